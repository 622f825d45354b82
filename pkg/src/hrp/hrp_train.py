"""Masked multi-task affordance loss and normalization-only fine-tuning."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import encoder as enc
from .container import from_u8_image
from .encoder import EncoderConfig, ParamPartition
from .mining import AffordanceDataset
from .numerics import Adam, make_rng

log = logging.getLogger(__name__)

TERMS = ("contact", "hand", "object")


@dataclass(frozen=True)
class HrpLossConfig:
    lambda_ct: float = 0.005
    lambda_hand: float = 0.5
    lambda_obj: float = 0.05

    def __post_init__(self):
        if min(self.lambda_ct, self.lambda_hand, self.lambda_obj) < 0:
            raise ValueError("loss weights must be non-negative")

    def weights(self) -> dict:
        return {"contact": self.lambda_ct, "hand": self.lambda_hand, "object": self.lambda_obj}


@dataclass(frozen=True)
class HrpTrainConfig:
    loss: HrpLossConfig = HrpLossConfig()
    steps: int = 2000
    batch_size: int = 32
    lr: float = 1e-4
    weight_decay: float = 0.0
    seed: int = 0
    partition_mode: str = "layernorm_only"
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.partition_mode not in ("layernorm_only", "full"):
            raise ValueError(f"unknown partition mode {self.partition_mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Batch:
    images: np.ndarray
    contact: np.ndarray
    wrist: np.ndarray
    object: np.ndarray
    masks: np.ndarray  # (B, 3) columns contact, hand, object

    def targets(self) -> dict:
        return {"contact": self.contact, "hand": self.wrist, "object": self.object}


def hrp_loss(preds: dict, batch: Batch, cfg: HrpLossConfig = HrpLossConfig()):
    """Mean over the batch of the mask-gated, weighted, unsquared L2 residual norms.

    Returns ``(loss, terms, dpreds)``: the scalar loss, the mean per-term values
    (after weighting and masking), and gradients wrt each prediction.
    """
    weights = cfg.weights()
    targets = batch.targets()
    bsz = batch.masks.shape[0]
    loss = 0.0
    terms, dpreds = {}, {}
    for col, name in enumerate(TERMS):
        p = np.asarray(preds[name], dtype=np.float64)
        bad = ~np.all(np.isfinite(p), axis=1)
        if bad.any():
            raise FloatingPointError(f"non-finite {name} prediction at batch index {int(np.flatnonzero(bad)[0])}")
        r = p - targets[name]
        norm = np.sqrt((r * r).sum(axis=1))
        gate = batch.masks[:, col] * weights[name]
        term = float((gate * norm).sum() / bsz)
        terms[name] = term
        loss += term
        safe = np.where(norm > 0.0, norm, 1.0)
        # subgradient 0 at zero residual
        unit = np.where((norm > 0.0)[:, None], r / safe[:, None], 0.0)
        dpreds[name] = (gate / bsz)[:, None] * unit
    return loss, terms, dpreds


def record_loss(preds: dict, record, cfg: HrpLossConfig = HrpLossConfig()) -> tuple[float, dict]:
    """Single-record form of :func:`hrp_loss`."""
    batch = Batch(np.zeros((1, 1, 1, 3)), record.contact[None], record.wrist[None], record.object[None],
                  np.array([[record.m_c, record.m_h, record.m_b]], dtype=np.float64))
    loss, terms, _ = hrp_loss({k: np.atleast_2d(v) for k, v in preds.items()}, batch, cfg)
    return loss, terms


def loss_and_grads(params: dict, batch: Batch, ecfg: EncoderConfig, lcfg: HrpLossConfig,
                   partition: Optional[ParamPartition] = None):
    z, cache = enc.forward(params, batch.images, ecfg)
    preds, hcache = enc.heads_forward(params, z)
    loss, terms, dpreds = hrp_loss(preds, batch, lcfg)
    grads, dz = enc.heads_backward(params, hcache, dpreds, partition)
    egrads, _ = enc.backward(params, cache, dz, ecfg, partition)
    grads.update(egrads)
    return loss, terms, grads


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


@dataclass
class HrpData:
    """Flattened training arrays; images kept as uint8 until batching."""

    images: np.ndarray
    contact: np.ndarray
    wrist: np.ndarray
    object: np.ndarray
    masks: np.ndarray

    def __len__(self) -> int:
        return self.images.shape[0]

    def batch(self, idx) -> Batch:
        return Batch(from_u8_image(self.images[idx]) if self.images.dtype == np.uint8
                     else self.images[idx].astype(np.float64),
                     self.contact[idx], self.wrist[idx], self.object[idx], self.masks[idx])

    @classmethod
    def from_dataset(cls, ds: AffordanceDataset) -> "HrpData":
        imgs, c, w, o, m = [], [], [], [], []
        for cid in sorted(ds.clips):
            frames = ds.frames.get(cid)
            for r in ds.clips[cid]:
                if r.image is None or frames is None:
                    continue
                imgs.append(frames[r.image["index"]])
                c.append(r.contact)
                w.append(r.wrist)
                o.append(r.object)
                m.append((r.m_c, r.m_h, r.m_b))
        if not imgs:
            raise ValueError("dataset has no records with images")
        return cls(np.stack(imgs), np.stack(c), np.stack(w), np.stack(o), np.asarray(m, dtype=np.float64))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


class NonFiniteLossError(FloatingPointError):
    def __init__(self, step: int, checkpoint: Optional[Path]):
        super().__init__(f"non-finite loss at step {step}; last good state saved to {checkpoint}")
        self.step = step
        self.checkpoint = checkpoint


@dataclass
class TrainResult:
    params: dict
    trace: list = field(default_factory=list)
    partition: Optional[ParamPartition] = None


def _write_trace(path: Path, trace: list) -> None:
    with path.open("w") as fh:
        for row in trace:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def train_hrp(data: HrpData, init_params: dict, ecfg: EncoderConfig, cfg: HrpTrainConfig = HrpTrainConfig(),
              out_dir=None) -> TrainResult:
    """ADAM over the selected partition on seeded, shuffled minibatches.

    ``init_params`` must hold encoder and head tensors. Frozen tensors are
    passed through by reference and never rewritten.
    """
    if len(data) == 0:
        raise ValueError("empty dataset")
    params = dict(init_params)
    partition = ParamPartition.for_mode(cfg.partition_mode, params)
    opt = Adam(params, partition.trainable, lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = make_rng(cfg.seed)
    out = Path(out_dir) if out_dir is not None else None
    n = len(data)
    order = rng.permutation(n)
    cursor = 0
    trace = []
    for step in range(cfg.steps):
        if cursor + cfg.batch_size > n:
            order = rng.permutation(n)
            cursor = 0
        idx = np.sort(order[cursor:cursor + cfg.batch_size])
        cursor += cfg.batch_size
        batch = data.batch(idx)
        loss, terms, grads = loss_and_grads(params, batch, ecfg, cfg.loss, partition)
        if not np.isfinite(loss):
            ckpt = None
            if out is not None:
                ckpt = out / "last_good.hrpt"
                enc.save_checkpoint(ckpt, params, ecfg, {"step": step})
            raise NonFiniteLossError(step, ckpt)
        params = opt.step(params, grads)
        trace.append({
            "step": step,
            "total": loss,
            **{f"loss_{k}": v for k, v in terms.items()},
            "mask_counts": [int(x) for x in batch.masks.sum(axis=0)],
        })
        if out is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            enc.save_checkpoint(out / f"step_{step + 1:06d}.hrpt", params, ecfg, {"step": step + 1})
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        _write_trace(out / "loss_trace.jsonl", trace)
    return TrainResult(params, trace, partition)


ABLATIONS = {
    "full": HrpLossConfig(0.005, 0.5, 0.05),
    "no_contact": HrpLossConfig(0.0, 0.5, 0.05),
    "no_object": HrpLossConfig(0.005, 0.5, 0.0),
    "no_hand": HrpLossConfig(0.005, 0.0, 0.05),
}
ABLATION_LABELS = {"full": "Ours", "no_contact": "No Contact", "no_object": "No Object", "no_hand": "No Hand"}


def ablate_losses(data: HrpData, init_params: dict, ecfg: EncoderConfig, base: HrpTrainConfig,
                  out_dir=None) -> dict:
    """Train once per loss-drop setting; returns {name: TrainResult}."""
    results = {}
    for name, lcfg in ABLATIONS.items():
        sub = None if out_dir is None else Path(out_dir) / name
        results[name] = train_hrp(data, init_params, ecfg, replace(base, loss=lcfg), sub)
    return results
