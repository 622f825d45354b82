"""Behavior cloning with a Gaussian-mixture action head on top of the image encoder.

The policy embeds the image with the encoder, appends the proprioceptive
state, runs a two-layer ReLU MLP with dropout, and emits, per mode, an action
mean, a log standard deviation and a mixing logit. Heads work in a normalized
action space ``u = (a - center) / half_range``; :func:`policy_forward` returns
the mixture in raw action units.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.ndimage import gaussian_filter

from . import container
from . import encoder as enc
from .encoder import EncoderConfig, ParamPartition
from .gmm import LOG_2PI, GmmModel, sample
from .layers import linear, linear_backward, relu, relu_backward, xavier
from .numerics import Adam, make_rng
from .simenv import ACTION_HIGH, ACTION_LOW


@dataclass(frozen=True)
class PolicyConfig:
    encoder: EncoderConfig = EncoderConfig()
    hidden: tuple = (128, 128)
    modes: int = 5
    action_dim: int = 3
    state_dim: int = 3
    dropout_prob: float = 0.2
    log_std_min: float = -5.0
    log_std_max: float = 2.0
    action_low: tuple = tuple(ACTION_LOW.tolist())
    action_high: tuple = tuple(ACTION_HIGH.tolist())

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (np.asarray(self.action_low) + np.asarray(self.action_high))

    @property
    def half_range(self) -> np.ndarray:
        return 0.5 * (np.asarray(self.action_high) - np.asarray(self.action_low))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["action_low"] = list(self.action_low)
        d["action_high"] = list(self.action_high)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyConfig":
        d = dict(d)
        d["encoder"] = EncoderConfig(**d["encoder"])
        for k in ("hidden", "action_low", "action_high"):
            d[k] = tuple(d[k])
        return cls(**d)


@dataclass(frozen=True)
class BcConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    iterations: int = 5000
    batch_size: int = 32
    crop_pad: int = 4
    blur_prob: float = 0.3
    blur_sigma: tuple = (0.1, 1.0)
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blur_sigma"] = list(self.blur_sigma)
        return d


def init_policy(cfg: PolicyConfig, seed: int, encoder_params: Optional[dict] = None) -> dict:
    """Fresh MLP/GMM head; the encoder is copied from ``encoder_params`` or freshly initialized."""
    rng = make_rng(seed)
    if encoder_params is None:
        encoder_params = enc.init_encoder(cfg.encoder, int(rng.integers(2**63)))
    params = {k: np.asarray(v, dtype=np.float64) for k, v in encoder_params.items()
              if k in enc.encoder_shapes(cfg.encoder)}
    sizes = [cfg.encoder.embed_dim + cfg.state_dim, *cfg.hidden]
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        params[f"policy.fc{i + 1}.weight"] = xavier(rng, a, b)
        params[f"policy.fc{i + 1}.bias"] = np.zeros(b)
    out = cfg.modes * (2 * cfg.action_dim + 1)
    params["policy.head.weight"] = xavier(rng, sizes[-1], out)
    params["policy.head.bias"] = np.zeros(out)
    return params


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def _dropout_masks(cfg: PolicyConfig, batch: int, seed) -> list:
    if seed is None:
        raise ValueError("train_mode needs a dropout seed")
    rng = make_rng(seed)
    p = cfg.dropout_prob
    masks = []
    for h in cfg.hidden:
        if p >= 1.0:
            masks.append(np.zeros((batch, h)))
        else:
            masks.append((rng.random((batch, h)) >= p) / (1.0 - p))
    return masks


@dataclass
class PolicyCache:
    enc_cache: object
    x: np.ndarray
    pre: list
    acts: list
    masks: Optional[list]
    raw_log_std: np.ndarray


def _head_forward(params, images, states, cfg: PolicyConfig, train_mode: bool, seed):
    z, ecache = enc.forward(params, images, cfg.encoder)
    z = np.atleast_2d(z)
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    if states.shape != (z.shape[0], cfg.state_dim):
        raise ValueError(f"expected state of shape ({z.shape[0]}, {cfg.state_dim}), got {states.shape}")
    x = np.concatenate([z, states], axis=1)
    masks = _dropout_masks(cfg, x.shape[0], seed) if train_mode and cfg.dropout_prob > 0 else None
    h, pre, acts = x, [], []
    for i in range(len(cfg.hidden)):
        u = linear(h, params[f"policy.fc{i + 1}.weight"], params[f"policy.fc{i + 1}.bias"])
        pre.append(u)
        h = relu(u)
        if masks is not None:
            h = h * masks[i]
        acts.append(h)
    out = linear(h, params["policy.head.weight"], params["policy.head.bias"])
    k, a = cfg.modes, cfg.action_dim
    mean_u = out[:, :k * a].reshape(-1, k, a)
    raw_log_std = out[:, k * a:2 * k * a].reshape(-1, k, a)
    log_std_u = np.clip(raw_log_std, cfg.log_std_min, cfg.log_std_max)
    logits = out[:, 2 * k * a:]
    cache = PolicyCache(ecache, x, pre, acts, masks, raw_log_std)
    return mean_u, log_std_u, logits, cache


def _to_raw(mean_u, log_std_u, cfg: PolicyConfig):
    half = cfg.half_range
    return cfg.center + half * mean_u, log_std_u + np.log(half)


def policy_forward(params: dict, image, state, cfg: PolicyConfig, train_mode: bool = False,
                   seed: Optional[int] = None) -> GmmModel:
    """Mixture over raw actions for a single observation."""
    mean_u, log_std_u, logits, _ = _head_forward(params, np.asarray(image)[None], np.asarray(state)[None],
                                                 cfg, train_mode, seed)
    mean, log_std = _to_raw(mean_u[0], log_std_u[0], cfg)
    w = np.exp(logits[0] - logits[0].max())
    w = w / w.sum()
    return GmmModel(w, mean, np.exp(2.0 * log_std))


def nll_and_grads(params: dict, images, states, actions, cfg: PolicyConfig, train_mode: bool = True,
                  seed: Optional[int] = None, partition: Optional[ParamPartition] = None):
    """Mean negative log-likelihood of raw ``actions`` and its gradient."""
    mean_u, log_std_u, logits, cache = _head_forward(params, images, states, cfg, train_mode, seed)
    mean, log_std = _to_raw(mean_u, log_std_u, cfg)
    a = np.atleast_2d(np.asarray(actions, dtype=np.float64))[:, None, :]
    bsz = a.shape[0]
    inv_var = np.exp(-2.0 * log_std)
    diff = a - mean
    comp = -0.5 * LOG_2PI * cfg.action_dim - log_std.sum(axis=2) - 0.5 * (diff * diff * inv_var).sum(axis=2)
    lmax = logits.max(axis=1, keepdims=True)
    log_w = logits - lmax - np.log(np.exp(logits - lmax).sum(axis=1, keepdims=True))
    joint = log_w + comp
    jmax = joint.max(axis=1, keepdims=True)
    log_p = (jmax + np.log(np.exp(joint - jmax).sum(axis=1, keepdims=True)))[:, 0]
    nll = float(-log_p.mean())

    post = np.exp(joint - log_p[:, None])  # responsibilities (B, K)
    w = np.exp(log_w)
    scale = 1.0 / bsz
    dmean = -(post[:, :, None] * diff * inv_var) * scale
    dlog_std = (post[:, :, None] * (1.0 - diff * diff * inv_var)) * scale
    dlogits = (w - post) * scale
    # back to normalized head outputs; clamp passes no gradient outside its range
    dmean_u = dmean * cfg.half_range
    inside = (cache.raw_log_std >= cfg.log_std_min) & (cache.raw_log_std <= cfg.log_std_max)
    draw_log_std = dlog_std * inside
    dout = np.concatenate([dmean_u.reshape(bsz, -1), draw_log_std.reshape(bsz, -1), dlogits], axis=1)

    def want(name):
        return partition is None or name in partition

    grads = {}
    h = cache.acts[-1]
    dh, dw, db = linear_backward(dout, h, params["policy.head.weight"])
    if want("policy.head.weight"):
        grads["policy.head.weight"] = dw
    if want("policy.head.bias"):
        grads["policy.head.bias"] = db
    for i in reversed(range(len(cfg.hidden))):
        if cache.masks is not None:
            dh = dh * cache.masks[i]
        du = relu_backward(dh, cache.pre[i])
        inp = cache.x if i == 0 else cache.acts[i - 1]
        dh, dw, db = linear_backward(du, inp, params[f"policy.fc{i + 1}.weight"])
        if want(f"policy.fc{i + 1}.weight"):
            grads[f"policy.fc{i + 1}.weight"] = dw
        if want(f"policy.fc{i + 1}.bias"):
            grads[f"policy.fc{i + 1}.bias"] = db
    dz = dh[:, :cfg.encoder.embed_dim]
    egrads, _ = enc.backward(params, cache.enc_cache, dz, cfg.encoder, partition)
    grads.update(egrads)
    return nll, grads


def act(params: dict, obs, cfg: PolicyConfig, seed: int) -> np.ndarray:
    """Sample an action from the eval-mode mixture and clip it to the action bounds."""
    model = policy_forward(params, obs.image, obs.state, cfg, train_mode=False)
    a = sample(model, seed)
    return np.clip(a, cfg.action_low, cfg.action_high)


def as_policy_fn(params: dict, cfg: PolicyConfig):
    return lambda obs, state, seed: act(params, obs, cfg, seed)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def augment(image, cfg: BcConfig, seed: int) -> np.ndarray:
    """Pad (edge-replicate) and randomly crop back to size, then blur with probability ``blur_prob``."""
    img = np.asarray(image, dtype=np.float64)
    rng = make_rng(seed)
    h, w = img.shape[:2]
    p = cfg.crop_pad
    if p > 0:
        padded = np.pad(img, ((p, p), (p, p), (0, 0)), mode="edge")
        dy, dx = rng.integers(0, 2 * p + 1, size=2)
        img = padded[dy:dy + h, dx:dx + w]
    if cfg.blur_prob > 0 and rng.random() < cfg.blur_prob:
        sigma = rng.uniform(*cfg.blur_sigma)
        img = gaussian_filter(img, sigma=(sigma, sigma, 0.0), mode="nearest")
    return img


# ---------------------------------------------------------------------------
# demos
# ---------------------------------------------------------------------------


@dataclass
class DemoSet:
    images: np.ndarray  # uint8 (N, H, W, 3)
    states: np.ndarray
    actions: np.ndarray
    episode: np.ndarray

    def __len__(self) -> int:
        return len(self.actions)

    @classmethod
    def from_episodes(cls, episodes) -> "DemoSet":
        imgs, st, ac, ep = [], [], [], []
        for i, e in enumerate(episodes):
            for obs, a in zip(e.observations, e.actions):
                imgs.append(container.to_u8_image(obs.image))
                st.append(obs.state)
                ac.append(a)
                ep.append(i)
        return cls(np.stack(imgs), np.asarray(st, dtype=np.float64), np.asarray(ac, dtype=np.float64),
                   np.asarray(ep))


def write_demos(out_dir, demos: DemoSet) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    container.save(out / "demos.images.hrpt", {"images": demos.images})
    with (out / "demos.jsonl").open("w") as fh:
        for i in range(len(demos)):
            fh.write(json.dumps({
                "episode": int(demos.episode[i]),
                "image": {"file": "demos.images.hrpt", "tensor": "images", "index": i},
                "state": demos.states[i].tolist(),
                "action": demos.actions[i].tolist(),
            }, separators=(",", ":")) + "\n")


def read_demos(path) -> DemoSet:
    root = Path(path)
    rows = [json.loads(line) for line in (root / "demos.jsonl").read_text().splitlines() if line.strip()]
    if not rows:
        raise ValueError(f"{root}: no demonstration steps")
    stores = {}
    images = []
    for r in rows:
        ref = r["image"]
        if ref["file"] not in stores:
            stores[ref["file"]] = container.load(root / ref["file"])[0]
        images.append(stores[ref["file"]][ref["tensor"]][ref["index"]])
    return DemoSet(np.stack(images), np.array([r["state"] for r in rows], dtype=np.float64),
                   np.array([r["action"] for r in rows], dtype=np.float64),
                   np.array([r["episode"] for r in rows]))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class BcResult:
    params: dict
    trace: list = field(default_factory=list)


def _augmented_batch(demos: DemoSet, idx, cfg: BcConfig, seed: int) -> np.ndarray:
    imgs = container.from_u8_image(demos.images[idx])
    return np.stack([augment(img, cfg, seed * 7919 + j) for j, img in enumerate(imgs)])


def bc_train(demos: DemoSet, init: dict, pcfg: PolicyConfig, cfg: BcConfig = BcConfig(),
             out_dir=None) -> BcResult:
    """Minimize the mean action NLL end-to-end (every tensor trainable) with ADAM."""
    if len(demos) == 0:
        raise ValueError("no demonstrations")
    params = dict(init)
    opt = Adam(params, params.keys(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = make_rng(cfg.seed)
    n = len(demos)
    order, cursor = rng.permutation(n), 0
    trace = []
    for it in range(cfg.iterations):
        if cursor + cfg.batch_size > n:
            order, cursor = rng.permutation(n), 0
        idx = np.sort(order[cursor:cursor + cfg.batch_size]) if n >= cfg.batch_size else rng.integers(n, size=cfg.batch_size)
        cursor += cfg.batch_size
        step_seed = int(rng.integers(2**62))
        images = _augmented_batch(demos, idx, cfg, step_seed)
        nll, grads = nll_and_grads(params, images, demos.states[idx], demos.actions[idx], pcfg,
                                   train_mode=True, seed=step_seed + 1)
        if not np.isfinite(nll):
            if out_dir is not None:
                save_policy(Path(out_dir) / "last_good.hrpt", params, pcfg, {"iteration": it})
            raise FloatingPointError(f"non-finite NLL at iteration {it}")
        params = opt.step(params, grads)
        trace.append({"iteration": it, "nll": nll})
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with (out / "nll_trace.jsonl").open("w") as fh:
            for row in trace:
                fh.write(json.dumps(row) + "\n")
    return BcResult(params, trace)


def save_policy(path, params: dict, pcfg: PolicyConfig, extra: dict | None = None) -> None:
    meta = {"policy_config": pcfg.to_dict()}
    if extra:
        meta.update(extra)
    enc.save_checkpoint(path, params, pcfg.encoder, meta)


def load_policy(path) -> tuple[dict, PolicyConfig, dict]:
    params, _, meta = enc.load_checkpoint(path)
    if "policy_config" not in meta:
        raise container.ContainerError(f"{path} is not a policy checkpoint")
    return params, PolicyConfig.from_dict(meta["policy_config"]), meta
