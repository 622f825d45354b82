"""Affordance label mining from per-frame hand/object detections of one clip.

Input is one JSON-Lines detection file per clip (see :func:`frame_to_json`);
output is a sequence of :class:`AffordanceRecord` per clip plus a dataset
directory written by :func:`write_dataset`.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import container
from .geometry import (
    Box,
    Homography,
    RansacConfig,
    RansacFailure,
    DegenerateConfigurationError,
    compose_chain,
    estimate_ransac,
    project_box,
    project_points,
)
from .gmm import EmConfig, fit_em, sorted_means
from .numerics import SavGolConfig, savgol_smooth

log = logging.getLogger(__name__)

CONTACT_STATES = ("no_contact", "self", "portable", "fixed")
HANDS = ("right", "left")


# ---------------------------------------------------------------------------
# detection types
# ---------------------------------------------------------------------------


@dataclass
class HandDetection:
    box: Optional[np.ndarray] = None
    wrist: Optional[np.ndarray] = None
    contact_state: str = "no_contact"
    contact_score: float = 0.0
    object_box: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.contact_state not in CONTACT_STATES:
            raise ValueError(f"unknown contact state {self.contact_state!r}")
        if not np.isfinite(self.contact_score):
            raise ValueError("contact_score must be finite")
        for name in ("box", "wrist", "object_box"):
            v = getattr(self, name)
            if v is not None:
                v = np.asarray(v, dtype=np.float64)
                if np.any(v < 0.0) or np.any(v > 1.0) or not np.all(np.isfinite(v)):
                    raise ValueError(f"{name} must lie within [0, 1]^2")
                setattr(self, name, v)


@dataclass
class FrameDetections:
    frame_index: int
    hands: dict = field(default_factory=dict)
    hand_mask: Optional[np.ndarray] = None
    hand_polygon: Optional[np.ndarray] = None
    correspondences_to_next: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))

    def hand(self, which: str) -> Optional[HandDetection]:
        return self.hands.get(which)

    def mask_raster(self, resolution: int = 64) -> Optional[np.ndarray]:
        if self.hand_mask is not None:
            return self.hand_mask
        if self.hand_polygon is not None:
            return rasterize_polygon(self.hand_polygon, resolution)
        return None


def rasterize_polygon(poly, resolution: int) -> np.ndarray:
    """Even-odd fill of a polygon (normalized coordinates) sampled at cell centers."""
    poly = np.asarray(poly, dtype=np.float64).reshape(-1, 2)
    c = (np.arange(resolution) + 0.5) / resolution
    px, py = np.meshgrid(c, c)
    inside = np.zeros(px.shape, dtype=bool)
    x0, y0 = poly[:, 0], poly[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    for a, b, cx, cy in zip(x0, y0, x1, y1):
        crosses = (b > py) != (cy > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = a + (py - b) * (cx - a) / (cy - b)
        inside ^= crosses & (px < xint)
    return inside


# --- JSON-Lines schema -----------------------------------------------------


def _rle_encode(mask: np.ndarray) -> dict:
    flat = np.asarray(mask, dtype=bool).ravel()
    change = np.flatnonzero(np.diff(flat.astype(np.int8))) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        runs = [0] + runs
    return {"shape": list(mask.shape), "rle": runs}


def _rle_decode(obj: dict) -> np.ndarray:
    shape = tuple(obj["shape"])
    flat = np.zeros(int(np.prod(shape)), dtype=bool)
    pos, val = 0, False
    for run in obj["rle"]:
        if val:
            flat[pos:pos + run] = True
        pos += run
        val = not val
    return flat.reshape(shape)


def _maybe(v):
    return None if v is None else [float(x) for x in np.asarray(v).ravel()]


def frame_to_json(fd: FrameDetections) -> dict:
    hands = {}
    for h in HANDS:
        det = fd.hands.get(h)
        hands[h] = None if det is None else {
            "box": _maybe(det.box),
            "wrist": _maybe(det.wrist),
            "contact_state": det.contact_state,
            "contact_score": float(det.contact_score),
            "object_box": _maybe(det.object_box),
        }
    mask = None
    if fd.hand_mask is not None:
        mask = _rle_encode(fd.hand_mask)
    elif fd.hand_polygon is not None:
        mask = {"polygon": np.asarray(fd.hand_polygon, dtype=float).tolist()}
    return {
        "frame_index": int(fd.frame_index),
        "hands": hands,
        "hand_mask": mask,
        "correspondences_to_next": [float(x) for x in np.asarray(fd.correspondences_to_next).ravel()],
    }


def frame_from_json(obj: dict) -> FrameDetections:
    hands = {}
    for h, det in (obj.get("hands") or {}).items():
        if det is None:
            continue
        hands[h] = HandDetection(
            box=det.get("box"),
            wrist=det.get("wrist"),
            contact_state=det.get("contact_state", "no_contact"),
            contact_score=float(det.get("contact_score", 0.0)),
            object_box=det.get("object_box"),
        )
    mask = obj.get("hand_mask")
    raster = polygon = None
    if mask is not None:
        if "polygon" in mask:
            polygon = np.asarray(mask["polygon"], dtype=np.float64)
        else:
            raster = _rle_decode(mask)
    corr = np.asarray(obj.get("correspondences_to_next", []), dtype=np.float64)
    if corr.size % 4:
        raise ValueError("correspondences_to_next must hold groups of four numbers")
    return FrameDetections(int(obj["frame_index"]), hands, raster, polygon, corr.reshape(-1, 4))


def write_detections(path, clip) -> None:
    path = Path(path)
    with path.open("w") as fh:
        for fd in clip:
            fh.write(json.dumps(frame_to_json(fd), separators=(",", ":")) + "\n")


def read_detections(path) -> list[FrameDetections]:
    path = Path(path)
    frames = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                frames.append(frame_from_json(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    frames.sort(key=lambda f: f.frame_index)
    return frames


# ---------------------------------------------------------------------------
# mining
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MiningConfig:
    wrist_horizon_k: int = 30
    gmm_modes: int = 5
    contact_smoothing: SavGolConfig = SavGolConfig(7, 2)
    contact_threshold: float = 0.5
    hand_preference: str = "right_then_left"
    ransac: RansacConfig = RansacConfig()
    em: EmConfig = EmConfig()
    mask_resolution: int = 64

    def __post_init__(self):
        if self.wrist_horizon_k < 1:
            raise ValueError("wrist_horizon_k must be >= 1")
        if self.gmm_modes < 1:
            raise ValueError("gmm_modes must be >= 1")
        if self.hand_preference not in ("right_then_left", "both_hands"):
            raise ValueError(f"unknown hand_preference {self.hand_preference!r}")

    def to_dict(self) -> dict:
        return {
            "wrist_horizon_k": self.wrist_horizon_k,
            "gmm_modes": self.gmm_modes,
            "contact_smoothing": [self.contact_smoothing.window_length, self.contact_smoothing.poly_order],
            "contact_threshold": self.contact_threshold,
            "hand_preference": self.hand_preference,
            "ransac": {
                "inlier_threshold": self.ransac.inlier_threshold,
                "max_iterations": self.ransac.max_iterations,
                "min_inlier_fraction": self.ransac.min_inlier_fraction,
                "seed": self.ransac.seed,
            },
            "em": {"max_iters": self.em.max_iters, "tol": self.em.tol,
                   "variance_floor": self.em.variance_floor, "init": self.em.init, "seed": self.em.seed},
        }


@dataclass
class AffordanceRecord:
    frame_index: int
    contact: np.ndarray
    wrist: np.ndarray
    object: np.ndarray
    m_c: int
    m_h: int
    m_b: int
    hand: str = "right"
    clip_id: str = ""
    image: Optional[dict] = None

    def __post_init__(self):
        for name in ("contact", "wrist", "object"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))

    def validate(self) -> None:
        for mask, arr, name in ((self.m_c, self.contact, "contact"), (self.m_h, self.wrist, "wrist"),
                                (self.m_b, self.object, "object")):
            if mask not in (0, 1):
                raise ValueError(f"mask for {name} must be 0 or 1")
            if mask == 0 and np.any(arr != 0.0):
                raise ValueError(f"{name} is masked off but not zero-filled")
            if mask == 1 and (not np.all(np.isfinite(arr)) or np.any(arr < 0.0) or np.any(arr > 1.0)):
                raise ValueError(f"{name} is active but outside [0, 1]")

    def to_json(self) -> dict:
        return {
            "clip_id": self.clip_id,
            "frame_index": int(self.frame_index),
            "hand": self.hand,
            "contact": self.contact.tolist(),
            "wrist": self.wrist.tolist(),
            "object": self.object.tolist(),
            "m_c": int(self.m_c),
            "m_h": int(self.m_h),
            "m_b": int(self.m_b),
            "image": self.image,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "AffordanceRecord":
        return cls(obj["frame_index"], obj["contact"], obj["wrist"], obj["object"],
                   int(obj["m_c"]), int(obj["m_h"]), int(obj["m_b"]),
                   obj.get("hand", "right"), obj.get("clip_id", ""), obj.get("image"))


@dataclass
class ClipLabels:
    records: list
    contact_frame: dict
    failed_links: list
    warning: Optional[str] = None


def _hand_series(clip, hand):
    scores = np.array([(fd.hand(hand).contact_score if fd.hand(hand) else 0.0) for fd in clip])
    states = [(fd.hand(hand).contact_state if fd.hand(hand) else "no_contact") for fd in clip]
    return scores, states


def _smooth(scores: np.ndarray, cfg: SavGolConfig) -> np.ndarray:
    n = len(scores)
    if n >= cfg.window_length:
        return savgol_smooth(scores, cfg)
    w = n if n % 2 else n - 1
    if w >= 3 and w > cfg.poly_order:
        return savgol_smooth(scores, SavGolConfig(w, cfg.poly_order))
    return scores.astype(np.float64)


def find_first_contact(clip, cfg: MiningConfig = MiningConfig(), hand: str = "right") -> Optional[int]:
    """Index (position in ``clip``) of the first fixed/portable contact after smoothing, or None."""
    if len(clip) == 0:
        raise ValueError("clip is empty")
    scores, states = _hand_series(clip, hand)
    smoothed = _smooth(scores, cfg.contact_smoothing)
    for t, (s, st) in enumerate(zip(smoothed, states)):
        if s >= cfg.contact_threshold and st in ("portable", "fixed"):
            return t
    return None


class MissingDetectionError(ValueError):
    pass


def mask_boundary(mask: np.ndarray) -> np.ndarray:
    """Cells of ``mask`` with at least one 4-neighbour outside the mask (raster edge counts as outside)."""
    m = np.asarray(mask, dtype=bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:])
    return m & ~interior


def extract_contact_points(clip, j: int, cfg: MiningConfig = MiningConfig(), hand: str = "right") -> np.ndarray:
    """Hand-contour points of frame ``j`` that fall inside the active-object box, as (n, 2)."""
    fd = clip[j]
    det = fd.hand(hand)
    mask = fd.mask_raster(cfg.mask_resolution)
    if mask is None:
        raise MissingDetectionError(f"frame {fd.frame_index} has no hand mask")
    if det is None or det.object_box is None:
        raise MissingDetectionError(f"frame {fd.frame_index} has no object box for the {hand} hand")
    rows, cols = np.nonzero(mask_boundary(mask))
    h, w = mask.shape
    pts = np.c_[(cols + 0.5) / w, (rows + 0.5) / h]
    x1, y1, x2, y2 = det.object_box
    keep = (pts[:, 0] >= x1) & (pts[:, 0] <= x2) & (pts[:, 1] >= y1) & (pts[:, 1] <= y2)
    return pts[keep]


class _Chain:
    """Maps between frames of a clip by composing estimated adjacent homographies."""

    def __init__(self, links: list):
        self.links = links
        self._cache: dict = {}

    def between(self, a: int, b: int) -> Optional[Homography]:
        if a == b:
            return Homography.identity()
        key = (a, b)
        if key not in self._cache:
            lo, hi = min(a, b), max(a, b)
            seg = self.links[lo:hi]
            if any(h is None for h in seg):
                self._cache[key] = None
            else:
                fwd = compose_chain(seg)
                self._cache[key] = fwd if a < b else fwd.inverse()
        return self._cache[key]


def estimate_links(clip, cfg: MiningConfig, seed: int = 0) -> list:
    links = []
    for t in range(len(clip) - 1):
        corr = clip[t].correspondences_to_next
        rcfg = RansacConfig(cfg.ransac.inlier_threshold, cfg.ransac.max_iterations,
                            cfg.ransac.min_inlier_fraction, (cfg.ransac.seed ^ seed) + t)
        try:
            h, _ = estimate_ransac(corr[:, :2], corr[:, 2:], rcfg)
        except (RansacFailure, DegenerateConfigurationError, ValueError) as exc:
            log.debug("homography link %d failed: %s", t, exc)
            h = None
        links.append(h)
    return links


def _select_hands(clip, cfg: MiningConfig) -> list[str]:
    present = [h for h in HANDS if any(fd.hand(h) is not None for fd in clip)]
    if cfg.hand_preference == "both_hands":
        return present
    return present[:1]


def _in_unit(p) -> bool:
    return bool(np.all(p >= 0.0) and np.all(p <= 1.0))


def label_clip(clip, cfg: MiningConfig = MiningConfig(), seed: int = 0, clip_id: str = "") -> ClipLabels:
    """Per-frame contact, future-wrist and active-object labels with validity masks.

    Failed homography links zero the masks of labels that need them instead of
    aborting the clip.
    """
    if len(clip) < 2:
        raise ValueError("clip must contain at least two frames")
    links = estimate_links(clip, cfg, seed)
    chain = _Chain(links)
    failed = [t for t, h in enumerate(links) if h is None]
    T = len(clip)
    k = cfg.wrist_horizon_k
    zeros_c = np.zeros(2 * cfg.gmm_modes)
    records = []
    onsets = {}
    for hand in _select_hands(clip, cfg):
        j = find_first_contact(clip, cfg, hand)
        onsets[hand] = j
        contact_pts = None
        obj_box = None
        if j is not None:
            try:
                contact_pts = extract_contact_points(clip, j, cfg, hand)
            except MissingDetectionError as exc:
                log.debug("clip %s: %s", clip_id, exc)
            ob = clip[j].hand(hand).object_box
            if ob is not None and ob[0] < ob[2] and ob[1] < ob[3]:
                obj_box = Box.from_array(ob)
        em_cfg = EmConfig(cfg.em.max_iters, cfg.em.tol, cfg.em.variance_floor, cfg.em.init,
                          cfg.em.seed ^ seed)
        for t in range(T):
            contact, m_c = zeros_c, 0
            if j is not None and t < j and contact_pts is not None and len(contact_pts):
                h = chain.between(j, t)
                if h is not None:
                    pts, outside = project_points(contact_pts, h)
                    pts = pts[~outside]
                    if len(pts):
                        model = fit_em(pts, cfg.gmm_modes, em_cfg)
                        contact, m_c = sorted_means(model).ravel(), 1
            wrist, m_h = np.zeros(2), 0
            if t + k < T:
                det = clip[t + k].hand(hand)
                h = chain.between(t + k, t)
                if det is not None and det.wrist is not None and h is not None:
                    p, outside = project_points(det.wrist[None], h)
                    if not outside[0]:
                        wrist, m_h = p[0], 1
            box, m_b = np.zeros(4), 0
            if obj_box is not None:
                h = chain.between(j, t)
                if h is not None:
                    b = project_box(obj_box, h)
                    if not b.empty:
                        box, m_b = b.as_array(), 1
            rec = AffordanceRecord(clip[t].frame_index, contact, wrist, box, m_c, m_h, m_b, hand, clip_id)
            records.append(rec)
    warning = None
    if links and len(failed) == len(links):
        warning = f"clip {clip_id}: every homography link failed"
        log.warning(warning)
    return ClipLabels(records, onsets, failed, warning)


# ---------------------------------------------------------------------------
# dataset IO
# ---------------------------------------------------------------------------


def label_counts(records) -> dict:
    return {
        "records": len(records),
        "contact": int(sum(r.m_c for r in records)),
        "hand": int(sum(r.m_h for r in records)),
        "object": int(sum(r.m_b for r in records)),
    }


def write_dataset(out_dir, clips: dict, config: dict | None = None, frames: dict | None = None) -> dict:
    """Write ``{clip_id: records}`` as a manifest plus per-clip JSON-Lines.

    ``frames`` optionally maps clip_id to a (n, H, W, 3) array of the images
    referenced by that clip's records (record.image["index"] indexes into it);
    they are stored as ``<clip_id>.frames.hrpt``.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        entries = []
        for clip_id in sorted(clips):
            records = clips[clip_id]
            for r in records:
                r.validate()
            rec_name = f"{clip_id}.records.jsonl"
            with (out / rec_name).open("w") as fh:
                for r in records:
                    fh.write(json.dumps(r.to_json(), separators=(",", ":")) + "\n")
            entry = {"clip_id": clip_id, "records": rec_name, "counts": label_counts(records)}
            if frames is not None and clip_id in frames:
                fr = np.asarray(frames[clip_id])
                if fr.dtype != np.uint8:
                    fr = container.to_u8_image(fr)
                frame_name = f"{clip_id}.frames.hrpt"
                container.save(out / frame_name, {"frames": fr}, {"clip_id": clip_id})
                entry["frames"] = frame_name
            entries.append(entry)
        all_records = [r for c in clips.values() for r in c]
        manifest = {
            "format": "hrp-affordance-dataset",
            "version": 1,
            "clips": entries,
            "config": config or {},
            "counts": label_counts(all_records),
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"failed writing dataset under {out}: {exc}") from exc
    return manifest


@dataclass
class AffordanceDataset:
    manifest: dict
    clips: dict
    frames: dict

    @property
    def records(self) -> list:
        return [r for cid in sorted(self.clips) for r in self.clips[cid]]

    def counts(self) -> dict:
        return label_counts(self.records)


def read_dataset(root, load_frames: bool = True) -> AffordanceDataset:
    root = Path(root)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except OSError as exc:
        raise OSError(f"cannot read {root / 'manifest.json'}: {exc}") from exc
    clips, frames = {}, {}
    for entry in manifest["clips"]:
        cid = entry["clip_id"]
        recs = []
        with (root / entry["records"]).open() as fh:
            for line in fh:
                if line.strip():
                    recs.append(AffordanceRecord.from_json(json.loads(line)))
        clips[cid] = recs
        if load_frames and "frames" in entry:
            tensors, _ = container.load(root / entry["frames"])
            frames[cid] = tensors["frames"]
    return AffordanceDataset(manifest, clips, frames)
