"""Deterministic 2D pick-and-stack task with a scripted expert and A/B evaluation.

Two blocks (red, green) lie on a tabletop seen from above. The agent moves a
gripper with delta actions ``(dx, dy, grip)`` in ``[-0.05, 0.05]^2 x [0, 1]``;
``grip >= 0.5`` means closed. The goal is to put the red block on the green one.
Scoring: 1 for a stable stack, 0.5 for an unstable one, 0 otherwise.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .numerics import make_rng
from .synthdata import BACKGROUND, PALETTE, SKIN, WRIST_MARK, _pixel_centers, _rgb

RED, GREEN = 0, 1
ACTION_LOW = np.array([-0.05, -0.05, 0.0])
ACTION_HIGH = np.array([0.05, 0.05, 1.0])


class PlacementError(RuntimeError):
    pass


@dataclass(frozen=True)
class EnvConfig:
    max_steps: int = 60
    grasp_radius: float = 0.06
    stable_tol: float = 0.05
    loose_tol: float = 0.1
    block_size: float = 0.1
    block_range: tuple = (0.15, 0.85)
    gripper_range: tuple = (0.2, 0.8)
    gripper_radius: float = 0.035
    render_size: int = 64
    distractors: tuple = ()
    seed: int = 0

    def __post_init__(self):
        if not self.stable_tol < self.loose_tol:
            raise ValueError("stable_tol must be smaller than loose_tol")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SimState:
    gripper: np.ndarray
    closed: bool
    held: Optional[int]
    blocks: np.ndarray  # (2, 2) red, green centres
    red_on_green: bool = False
    step_count: int = 0
    sizes: tuple = (0.1, 0.1)
    colors: tuple = ("red", "green")

    def copy(self) -> "SimState":
        return replace(self, gripper=self.gripper.copy(), blocks=self.blocks.copy())

    def proprio(self) -> np.ndarray:
        return np.array([self.gripper[0], self.gripper[1], float(self.closed)])


@dataclass
class Observation:
    image: np.ndarray
    state: np.ndarray


def render(state: SimState, cfg: EnvConfig) -> np.ndarray:
    """Flat-shaded top-down view; a pure function of ``state``."""
    n = cfg.render_size
    pix = _pixel_centers(n)
    x, y = pix[:, 0], pix[:, 1]
    img = np.tile(_rgb(BACKGROUND), (len(x), 1))
    stripes = (np.floor(x * 8) + np.floor(y * 8)) % 2 == 0
    img[stripes] -= 10.0 / 255.0
    # green first so a stacked red block is drawn on top
    for b in (GREEN, RED):
        cx, cy = state.blocks[b]
        half = 0.5 * state.sizes[b]
        inside = (np.abs(x - cx) <= half) & (np.abs(y - cy) <= half)
        img[inside] = _rgb(PALETTE[state.colors[b]])
    gx, gy = state.gripper
    d2 = (x - gx) ** 2 + (y - gy) ** 2
    img[d2 <= cfg.gripper_radius**2] = _rgb(SKIN)
    if state.closed:
        img[d2 <= (0.4 * cfg.gripper_radius) ** 2] = _rgb(WRIST_MARK)
    return img.reshape(n, n, 3)


def observe(state: SimState, cfg: EnvConfig) -> Observation:
    return Observation(render(state, cfg), state.proprio())


def reset(cfg: EnvConfig, seed: int) -> tuple[SimState, Observation]:
    """Place both blocks uniformly without overlap (rejection sampling)."""
    rng = make_rng(seed)
    lo, hi = cfg.block_range
    for _ in range(1000):
        blocks = rng.uniform(lo, hi, size=(2, 2))
        # pairwise centre distance at least the sum of half-sizes (plus half a block of clearance)
        if np.linalg.norm(blocks[0] - blocks[1]) >= 1.5 * cfg.block_size:
            break
    else:
        raise PlacementError("could not place blocks without overlap after 1000 tries")
    gripper = rng.uniform(*cfg.gripper_range, size=2)
    state = SimState(gripper, False, None, blocks, sizes=(cfg.block_size, cfg.block_size))
    return state, observe(state, cfg)


def clip_action(action) -> np.ndarray:
    return np.clip(np.asarray(action, dtype=np.float64).reshape(3), ACTION_LOW, ACTION_HIGH)


def _grasp_candidate(state: SimState, cfg: EnvConfig) -> Optional[int]:
    d = np.linalg.norm(state.blocks - state.gripper, axis=1)
    within = [b for b in (RED, GREEN) if d[b] <= cfg.grasp_radius]
    if not within:
        return None
    if state.red_on_green and RED in within:
        return RED
    return min(within, key=lambda b: d[b])


def is_stable_stack(state: SimState, cfg: EnvConfig) -> bool:
    return (state.held is None and state.red_on_green
            and np.linalg.norm(state.blocks[RED] - state.blocks[GREEN]) <= cfg.stable_tol)


def score(state: SimState, cfg: EnvConfig) -> float:
    if state.held is not None or not state.red_on_green:
        return 0.0
    offset = np.linalg.norm(state.blocks[RED] - state.blocks[GREEN])
    if offset <= cfg.stable_tol:
        return 1.0
    if offset <= cfg.loose_tol:
        return 0.5
    return 0.0


def step(state: SimState, action, cfg: EnvConfig) -> tuple[SimState, Observation, bool]:
    a = clip_action(action)
    s = state.copy()
    s.gripper = np.clip(s.gripper + a[:2], 0.0, 1.0)
    close = a[2] >= 0.5
    if close and not s.closed:
        s.held = _grasp_candidate(s, cfg)
        if s.held is not None:
            s.red_on_green = False
    elif not close and s.closed and s.held is not None:
        s.blocks[s.held] = s.gripper
        if s.held == RED:
            s.red_on_green = bool(np.linalg.norm(s.blocks[RED] - s.blocks[GREEN]) <= cfg.loose_tol)
        s.held = None
    s.closed = bool(close)
    if s.held is not None:
        s.blocks[s.held] = s.gripper
    s.step_count += 1
    done = s.step_count >= cfg.max_steps or is_stable_stack(s, cfg)
    return s, observe(s, cfg), done


def scripted_expert(state: SimState, cfg: EnvConfig = EnvConfig()) -> np.ndarray:
    """Proportional controller: reach red, grasp, carry over green, release."""
    if is_stable_stack(state, cfg) or (state.red_on_green and state.held is None):
        return np.array([0.0, 0.0, 0.0])
    if state.closed and state.held is None:
        return np.array([0.0, 0.0, 0.0])
    if state.held == RED:
        delta = state.blocks[GREEN] - state.gripper
        if np.linalg.norm(delta) < 1e-3:
            return np.array([0.0, 0.0, 0.0])
        return clip_action(np.r_[delta, 1.0])
    if state.held == GREEN:
        return np.array([0.0, 0.0, 0.0])
    delta = state.blocks[RED] - state.gripper
    if np.linalg.norm(delta) < 1e-3:
        return np.array([0.0, 0.0, 1.0])
    return clip_action(np.r_[delta, 0.0])


@dataclass
class EpisodeResult:
    score: float
    steps: int
    observations: list = field(default_factory=list, repr=False)
    actions: list = field(default_factory=list, repr=False)


PolicyFn = Callable[[Observation, SimState, int], np.ndarray]


def run_episode(policy: PolicyFn, cfg: EnvConfig, seed: int, record: bool = False) -> EpisodeResult:
    state, obs = reset(cfg, seed)
    result = EpisodeResult(0.0, 0)
    done = False
    while not done:
        action = clip_action(policy(obs, state, seed * 1009 + state.step_count))
        if record:
            result.observations.append(obs)
            result.actions.append(action)
        state, obs, done = step(state, action, cfg)
    result.score = score(state, cfg)
    result.steps = state.step_count
    return result


def expert_policy(cfg: EnvConfig = EnvConfig()) -> PolicyFn:
    return lambda obs, state, seed: scripted_expert(state, cfg)


def random_policy(obs, state, seed) -> np.ndarray:
    rng = make_rng(seed)
    return rng.uniform(ACTION_LOW, ACTION_HIGH)


def episode_seeds(seed: int, n: int) -> list[int]:
    return [int(seed) * 100_003 + i for i in range(n)]


def evaluate(policy: PolicyFn, cfg: EnvConfig, n_episodes: int, seed: int) -> dict:
    """Mean rubric score and standard error (std / sqrt(n)) over seeded episodes."""
    seeds = episode_seeds(seed, n_episodes)
    scores = [run_episode(policy, cfg, s).score for s in seeds]
    arr = np.asarray(scores)
    stderr = float(arr.std() / np.sqrt(len(arr))) if len(arr) else 0.0
    return {
        "mean": float(arr.mean()) if len(arr) else 0.0,
        "stderr": stderr,
        "scores": scores,
        "seeds": seeds,
        "n_episodes": n_episodes,
        "config": cfg.to_dict(),
    }


def evaluate_ab(policies: dict, cfg: EnvConfig, n_episodes: int, seed: int) -> dict:
    """Evaluate several policies on one shared seed list."""
    report = {"seeds": episode_seeds(seed, n_episodes), "config": cfg.to_dict(), "policies": {}}
    for name, pol in policies.items():
        r = evaluate(pol, cfg, n_episodes, seed)
        report["policies"][name] = {"mean": r["mean"], "stderr": r["stderr"], "scores": r["scores"]}
    return report


def collect_demos(cfg: EnvConfig, n_demos: int, seed: int) -> list[EpisodeResult]:
    return [run_episode(expert_policy(cfg), cfg, s, record=True) for s in episode_seeds(seed, n_demos)]


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True)
