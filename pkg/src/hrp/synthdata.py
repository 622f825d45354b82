"""Synthetic egocentric clips with exact ground truth.

A planar tabletop scene (flat-shaded boxes, a skin-coloured hand disk with a
marked wrist) is viewed by a camera whose world-to-image map at frame ``t`` is
a homography ``W_t``. Because the scene is planar, adjacent-frame homographies
``W_{t+1} W_t^{-1}`` are exact, so mined labels can be checked against
ground truth to floating-point precision.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import container
from .geometry import Box, Homography, project_box, project_points
from .mining import FrameDetections, HandDetection, mask_boundary, write_detections
from .numerics import make_rng

# colours are multiples of 1/255 so u8 storage is lossless
PALETTE = {
    "red": (200, 40, 40),
    "green": (40, 170, 60),
    "blue": (50, 80, 200),
    "yellow": (220, 200, 50),
    "purple": (140, 60, 160),
}
SKIN = (230, 180, 140)
WRIST_MARK = (90, 50, 30)
BACKGROUND = (150, 150, 160)
MOTIONS = ("static", "linear", "projective")


def _rgb(c) -> np.ndarray:
    return np.asarray(c, dtype=np.float64) / 255.0


@dataclass
class SceneSpec:
    image_size: int = 64
    fps: int = 30
    clip_length: int = 48
    camera_motion: str = "static"
    motion_params: tuple = (0.0, 0.0)
    objects: list = field(default_factory=lambda: [((0.55, 0.45, 0.75, 0.65), "red")])
    hand_radius: float = 0.08
    hand_start: tuple = (0.2, 0.85)
    hand_path_end: Optional[tuple] = None
    contact_frame: Optional[int] = 20
    correspondence_count: int = 40
    correspondence_jitter: float = 0.0
    outlier_fraction: float = 0.0
    dropout_prob: float = 0.0
    score_jitter: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 16:
            raise ValueError("image_size must be >= 16")
        if self.clip_length < 2:
            raise ValueError("clip_length must be >= 2")
        if self.contact_frame is not None and not 0 <= self.contact_frame < self.clip_length:
            raise ValueError("contact_frame must lie inside the clip")
        if self.camera_motion not in MOTIONS:
            raise ValueError(f"unknown camera motion {self.camera_motion!r}")
        if not self.objects:
            raise ValueError("scene needs at least one object")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["objects"] = [[list(b), c] for b, c in self.objects]
        return d


@dataclass
class GroundTruth:
    world_to_image: list
    adjacent: list
    contact_onset: Optional[int]
    contact_points: np.ndarray
    wrist: np.ndarray
    future_wrist: np.ndarray
    future_wrist_valid: np.ndarray
    active_box: np.ndarray
    active_box_valid: np.ndarray


def camera_homography(spec: SceneSpec, t: int) -> Homography:
    """World-to-image map at frame t. The camera moves by +v, so content moves by -v."""
    if spec.camera_motion == "static":
        return Homography.identity()
    if spec.camera_motion == "linear":
        vx, vy = spec.motion_params[:2]
        return Homography.translation(-vx * t, -vy * t)
    vx, vy, rot, scale, px, py = (tuple(spec.motion_params) + (0.0,) * 6)[:6]
    c, s = np.cos(rot * t), np.sin(rot * t)
    m = np.array([[(1 + scale * t) * c, -s, 0.0], [s, (1 + scale * t) * c, 0.0], [px * t, py * t, 1.0]])
    center = np.array([[1, 0, 0.5], [0, 1, 0.5], [0, 0, 1.0]])
    shift = np.array([[1, 0, -vx * t], [0, 1, -vy * t], [0, 0, 1.0]])
    return Homography(shift @ center @ m @ np.linalg.inv(center))


def _hand_center(spec: SceneSpec, t: int) -> np.ndarray:
    start = np.asarray(spec.hand_start, dtype=np.float64)
    if spec.contact_frame is not None:
        end = np.asarray(_contact_center(spec))
        frac = min(t / max(spec.contact_frame, 1), 1.0)
    else:
        end = np.asarray(spec.hand_path_end if spec.hand_path_end is not None else (0.3, 0.5))
        frac = t / max(spec.clip_length - 1, 1)
    return start + frac * (end - start)


def _contact_center(spec: SceneSpec) -> tuple:
    # hand disk centred on the midpoint of the active box's lower edge
    x1, y1, x2, y2 = spec.objects[0][0]
    return (0.5 * (x1 + x2), y2)


def _wrist(spec: SceneSpec, center: np.ndarray) -> np.ndarray:
    return center + np.array([0.0, 0.6 * spec.hand_radius])


def render_world(spec: SceneSpec, world_pts: np.ndarray, hand_center) -> tuple[np.ndarray, np.ndarray]:
    """Shade world points; returns (rgb (n, 3), hand-mask (n,))."""
    x, y = world_pts[:, 0], world_pts[:, 1]
    img = np.tile(_rgb(BACKGROUND), (len(x), 1))
    # faint world-fixed stripes make camera motion visible
    stripes = (np.floor(x * 8) + np.floor(y * 8)) % 2 == 0
    img[stripes] -= 10.0 / 255.0
    for (x1, y1, x2, y2), colour in reversed(spec.objects):
        inside = (x >= x1) & (x <= x2) & (y >= y1) & (y <= y2)
        img[inside] = _rgb(PALETTE[colour])
    hand = None
    if hand_center is not None:
        d2 = (x - hand_center[0]) ** 2 + (y - hand_center[1]) ** 2
        hand = d2 <= spec.hand_radius**2
        img[hand] = _rgb(SKIN)
        w = _wrist(spec, np.asarray(hand_center))
        mark = (x - w[0]) ** 2 + (y - w[1]) ** 2 <= (0.25 * spec.hand_radius) ** 2
        img[mark] = _rgb(WRIST_MARK)
    return img, hand


def _pixel_centers(n: int) -> np.ndarray:
    c = (np.arange(n) + 0.5) / n
    px, py = np.meshgrid(c, c)
    return np.c_[px.ravel(), py.ravel()]


def render_clip(spec: SceneSpec, wrist_horizon: int = 30):
    """Render frames, derive noisy detections, and return exact ground truth.

    Returns ``(frames (T, S, S, 3) in [0, 1], detections, ground_truth)``.
    """
    rng = make_rng(spec.seed)
    n, T = spec.image_size, spec.clip_length
    pix = _pixel_centers(n)
    cams = [camera_homography(spec, t) for t in range(T)]
    adjacent = [Homography(cams[t + 1].m @ np.linalg.inv(cams[t].m)) for t in range(T - 1)]
    world_box = Box(*spec.objects[0][0])

    frames = np.empty((T, n, n, 3))
    masks = []
    wrists = np.empty((T, 2))
    for t in range(T):
        inv = cams[t].inverse()
        world, _ = project_points(pix, inv)
        center = _hand_center(spec, t)
        img, hand = render_world(spec, world, center)
        frames[t] = img.reshape(n, n, 3)
        masks.append(hand.reshape(n, n))
        wrists[t] = project_points(_wrist(spec, center)[None], cams[t])[0][0]
    frames = np.rint(frames * 255.0) / 255.0

    j = spec.contact_frame
    # exact contact set: hand circle inside the active box, in frame j
    if j is not None:
        theta = np.linspace(0.0, 2 * np.pi, 720, endpoint=False)
        c = _hand_center(spec, j)
        circle = c + spec.hand_radius * np.c_[np.cos(theta), np.sin(theta)]
        x1, y1, x2, y2 = spec.objects[0][0]
        keep = (circle[:, 0] >= x1) & (circle[:, 0] <= x2) & (circle[:, 1] >= y1) & (circle[:, 1] <= y2)
        contact_pts = project_points(circle[keep], cams[j])[0]
        box_j = project_box(world_box, cams[j])
    else:
        contact_pts = np.zeros((0, 2))
        box_j = None

    k = wrist_horizon
    # a wrist that has left the image at t+k cannot be detected, so it gives no label
    visible = np.all((wrists >= 0) & (wrists <= 1), axis=1)
    future = np.zeros((T, 2))
    future_valid = np.zeros(T, dtype=bool)
    for t in range(T - k):
        p = project_points(wrists[t + k][None], Homography(cams[t].m @ np.linalg.inv(cams[t + k].m)))
        future[t] = p[0][0]
        future_valid[t] = visible[t + k] and not p[1][0]
    active = np.zeros((T, 4))
    active_valid = np.zeros(T, dtype=bool)
    if box_j is not None and not box_j.empty:
        for t in range(T):
            b = project_box(box_j, Homography(cams[t].m @ np.linalg.inv(cams[j].m)))
            if not b.empty:
                active[t], active_valid[t] = b.as_array(), True

    detections = []
    for t in range(T):
        in_contact = j is not None and t >= j
        score = 1.0 if in_contact else 0.0
        if spec.score_jitter > 0:
            score = float(np.clip(score + rng.uniform(-spec.score_jitter, spec.score_jitter), 0.0, 1.0))
        dropped = spec.dropout_prob > 0 and rng.random() < spec.dropout_prob
        hb = np.nonzero(masks[t])
        hand_box = None
        if len(hb[0]):
            hand_box = np.array([hb[1].min() / n, hb[0].min() / n, (hb[1].max() + 1) / n, (hb[0].max() + 1) / n])
        wrist = wrists[t] if visible[t] and not dropped else None
        obj = None
        if in_contact:
            b = project_box(world_box, cams[t])
            obj = None if b.empty else b.as_array()
        det = HandDetection(
            box=None if dropped else hand_box,
            wrist=wrist,
            contact_state="portable" if in_contact else "no_contact",
            contact_score=score,
            object_box=obj,
        )
        if t < T - 1:
            src = rng.random((spec.correspondence_count, 2))
            dst = project_points(src, adjacent[t])[0]
            if spec.correspondence_jitter > 0:
                dst = dst + rng.normal(0.0, spec.correspondence_jitter, dst.shape)
            n_out = int(round(spec.outlier_fraction * len(src)))
            if n_out:
                dst[:n_out] = rng.random((n_out, 2))
            corr = np.c_[src, dst]
        else:
            corr = np.zeros((0, 4))
        detections.append(FrameDetections(
            frame_index=t,
            hands={"right": det},
            hand_mask=masks[t] if in_contact else None,
            correspondences_to_next=corr,
        ))

    gt = GroundTruth(
        world_to_image=cams,
        adjacent=adjacent,
        contact_onset=j,
        contact_points=contact_pts,
        wrist=wrists,
        future_wrist=future,
        future_wrist_valid=future_valid,
        active_box=active,
        active_box_valid=active_valid,
    )
    return frames, detections, gt


def raster_contact_points(mask: np.ndarray, box) -> np.ndarray:
    """Boundary cells of ``mask`` inside ``box`` (same rule the miner applies)."""
    rows, cols = np.nonzero(mask_boundary(mask))
    h, w = mask.shape
    pts = np.c_[(cols + 0.5) / w, (rows + 0.5) / h]
    x1, y1, x2, y2 = box
    keep = (pts[:, 0] >= x1) & (pts[:, 0] <= x2) & (pts[:, 1] >= y1) & (pts[:, 1] <= y2)
    return pts[keep]


# ---------------------------------------------------------------------------
# corpus generation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CorpusSpec:
    """Distribution that per-clip :class:`SceneSpec` values are drawn from."""

    image_size: int = 64
    clip_length: int = 48
    motions: tuple = MOTIONS
    contact_prob: float = 0.85
    correspondence_jitter: float = 0.0
    outlier_fraction: float = 0.0
    dropout_prob: float = 0.0
    score_jitter: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def _non_overlapping_boxes(rng, count: int, size_range=(0.12, 0.22), tries: int = 200) -> list:
    boxes = []
    for _ in range(tries):
        if len(boxes) == count:
            break
        w, h = rng.uniform(*size_range, size=2)
        x1 = rng.uniform(0.1, 0.9 - w)
        y1 = rng.uniform(0.1, 0.75 - h)
        cand = (x1, y1, x1 + w, y1 + h)
        if all(cand[2] + 0.03 < b[0] or b[2] + 0.03 < cand[0] or cand[3] + 0.03 < b[1] or b[3] + 0.03 < cand[1]
               for b in boxes):
            boxes.append(cand)
    return boxes


def sample_scene(dist: CorpusSpec, seed: int) -> SceneSpec:
    rng = make_rng(seed)
    motion = dist.motions[int(rng.integers(len(dist.motions)))]
    if motion == "static":
        params = (0.0, 0.0)
    elif motion == "linear":
        params = tuple(float(v) for v in rng.uniform(-0.004, 0.004, size=2))
    else:
        params = (float(rng.uniform(-0.003, 0.003)), float(rng.uniform(-0.003, 0.003)),
                  float(rng.uniform(-0.004, 0.004)), float(rng.uniform(-0.003, 0.003)),
                  float(rng.uniform(-0.002, 0.002)), float(rng.uniform(-0.002, 0.002)))
    n_obj = int(rng.integers(1, 4))
    boxes = _non_overlapping_boxes(rng, n_obj)
    colours = list(PALETTE)
    picks = rng.choice(len(colours), size=len(boxes), replace=False)
    objects = [(tuple(float(v) for v in b), colours[int(i)]) for b, i in zip(boxes, picks)]
    contact = rng.random() < dist.contact_prob
    T = dist.clip_length
    contact_frame = int(rng.integers(max(8, T // 4), max(9, (2 * T) // 3))) if contact else None
    start = (float(rng.uniform(0.1, 0.9)), float(rng.uniform(0.8, 0.95)))
    end = (float(rng.uniform(0.1, 0.9)), float(rng.uniform(0.4, 0.9)))
    return SceneSpec(
        image_size=dist.image_size,
        clip_length=T,
        camera_motion=motion,
        motion_params=params,
        objects=objects,
        hand_radius=float(rng.uniform(0.06, 0.1)),
        hand_start=start,
        hand_path_end=end,
        contact_frame=contact_frame,
        correspondence_jitter=dist.correspondence_jitter,
        outlier_fraction=dist.outlier_fraction,
        dropout_prob=dist.dropout_prob,
        score_jitter=dist.score_jitter,
        seed=int(rng.integers(2**63)),
    )


def ground_truth_to_json(gt: GroundTruth) -> dict:
    return {
        "world_to_image": [h.m.tolist() for h in gt.world_to_image],
        "adjacent": [h.m.tolist() for h in gt.adjacent],
        "contact_onset": gt.contact_onset,
        "contact_points": gt.contact_points.tolist(),
        "wrist": gt.wrist.tolist(),
        "future_wrist": gt.future_wrist.tolist(),
        "future_wrist_valid": gt.future_wrist_valid.astype(int).tolist(),
        "active_box": gt.active_box.tolist(),
        "active_box_valid": gt.active_box_valid.astype(int).tolist(),
    }


def make_corpus(out_dir, n_clips: int, dist: CorpusSpec = CorpusSpec(), seed: int = 0) -> dict:
    """Render ``n_clips`` clips and write detections, frames and ground truth.

    Per clip: ``clip_XXXXX.detections.jsonl``, ``clip_XXXXX.frames.hrpt`` and
    ``clip_XXXXX.truth.json``; plus ``manifest.json``.
    """
    if n_clips < 1:
        raise ValueError("n_clips must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(n_clips):
        clip_id = f"clip_{i:05d}"
        spec = sample_scene(dist, seed * 1_000_003 + i)
        frames, dets, gt = render_clip(spec)
        write_detections(out / f"{clip_id}.detections.jsonl", dets)
        container.save(out / f"{clip_id}.frames.hrpt", {"frames": container.to_u8_image(frames)},
                       {"clip_id": clip_id, "fps": spec.fps})
        (out / f"{clip_id}.truth.json").write_text(json.dumps(ground_truth_to_json(gt)) + "\n")
        entries.append({
            "clip_id": clip_id,
            "detections": f"{clip_id}.detections.jsonl",
            "frames": f"{clip_id}.frames.hrpt",
            "truth": f"{clip_id}.truth.json",
            "motion": spec.camera_motion,
            "scene": spec.to_dict(),
        })
    manifest = {
        "format": "hrp-synthetic-corpus",
        "version": 1,
        "n_clips": n_clips,
        "seed": seed,
        "distribution": dist.to_dict(),
        "clips": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_truth(path) -> dict:
    return json.loads(Path(path).read_text())
