"""Patch-transformer image encoder with affordance heads and hand-written backward.

Parameters live in a flat ``dict[str, np.ndarray]``. Encoder tensor names::

    patch_embed.weight / .bias, cls_token, pos_embed,
    blocks.{i}.ln1.gamma/.beta, blocks.{i}.attn.qkv.weight, .q_bias, .v_bias,
    blocks.{i}.attn.proj.weight/.bias, blocks.{i}.ln2.gamma/.beta,
    blocks.{i}.mlp.fc1.weight/.bias, blocks.{i}.mlp.fc2.weight/.bias,
    norm.gamma/.beta

Affordance heads use the prefixes ``head_contact.``, ``head_hand.`` and
``head_object.``. The embedding ``z`` is the class token after the final norm.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import container
from .layers import (
    gelu,
    gelu_backward,
    layer_norm,
    layer_norm_backward,
    linear,
    linear_backward,
    softmax,
    softmax_backward,
    trunc_normal,
    xavier,
)
from .numerics import make_rng

HEAD_PREFIXES = ("head_contact.", "head_hand.", "head_object.")


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))

    def to_dict(self) -> dict:
        return asdict(self)


TINY_CONFIG = EncoderConfig(image_size=16, patch_size=4, embed_dim=32, depth=2, heads=2)


def is_layernorm(name: str) -> bool:
    return name.endswith((".gamma", ".beta"))


def is_head(name: str) -> bool:
    return name.startswith(HEAD_PREFIXES)


@dataclass(frozen=True)
class ParamPartition:
    """Names of tensors that receive gradients; everything else is frozen."""

    trainable: frozenset = field(default_factory=frozenset)
    mode: str = "custom"

    @classmethod
    def for_mode(cls, mode: str, names) -> "ParamPartition":
        names = list(names)
        if mode in ("full", "bc"):
            keep = names
        elif mode in ("layernorm_only", "hrp", "layernorm"):
            keep = [n for n in names if is_layernorm(n) or is_head(n)]
            mode = "layernorm_only"
        elif mode == "frozen":
            keep = []
        else:
            raise ValueError(f"unknown partition mode {mode!r}")
        return cls(frozenset(keep), mode)

    def __contains__(self, name: str) -> bool:
        return name in self.trainable


# ---------------------------------------------------------------------------
# init
# ---------------------------------------------------------------------------


def init_encoder(cfg: EncoderConfig, seed: int) -> dict[str, np.ndarray]:
    rng = make_rng(seed)
    d, p = cfg.embed_dim, cfg.patch_size
    hid = cfg.mlp_hidden
    params = {
        "patch_embed.weight": xavier(rng, p * p * 3, d),
        "patch_embed.bias": np.zeros(d),
        "cls_token": trunc_normal(rng, (d,)),
        "pos_embed": trunc_normal(rng, (cfg.n_patches + 1, d)),
    }
    for i in range(cfg.depth):
        b = f"blocks.{i}."
        params.update({
            b + "ln1.gamma": np.ones(d),
            b + "ln1.beta": np.zeros(d),
            b + "attn.qkv.weight": xavier(rng, d, 3 * d),
            b + "attn.q_bias": np.zeros(d),
            b + "attn.v_bias": np.zeros(d),
            b + "attn.proj.weight": xavier(rng, d, d),
            b + "attn.proj.bias": np.zeros(d),
            b + "ln2.gamma": np.ones(d),
            b + "ln2.beta": np.zeros(d),
            b + "mlp.fc1.weight": xavier(rng, d, hid),
            b + "mlp.fc1.bias": np.zeros(hid),
            b + "mlp.fc2.weight": xavier(rng, hid, d),
            b + "mlp.fc2.bias": np.zeros(d),
        })
    params["norm.gamma"] = np.ones(d)
    params["norm.beta"] = np.zeros(d)
    return params


def head_dims(gmm_modes: int = 5) -> dict[str, int]:
    return {"head_contact.": 2 * gmm_modes, "head_hand.": 2, "head_object.": 4}


def init_heads(cfg: EncoderConfig, seed: int, gmm_modes: int = 5) -> dict[str, np.ndarray]:
    rng = make_rng(seed)
    d = cfg.embed_dim
    params = {}
    for prefix, out in head_dims(gmm_modes).items():
        params[prefix + "fc1.weight"] = xavier(rng, d, d)
        params[prefix + "fc1.bias"] = np.zeros(d)
        params[prefix + "fc2.weight"] = xavier(rng, d, out)
        params[prefix + "fc2.bias"] = np.zeros(out)
    return params


def encoder_names(params) -> list[str]:
    return [n for n in params if not is_head(n) and not n.startswith("policy.")]


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------


class StaleCacheError(RuntimeError):
    pass


def patchify(images: np.ndarray, p: int) -> np.ndarray:
    b, h, w, c = images.shape
    x = images.reshape(b, h // p, p, w // p, p, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, (h // p) * (w // p), p * p * c)


def unpatchify(patches: np.ndarray, p: int, size: int) -> np.ndarray:
    b = patches.shape[0]
    g = size // p
    x = patches.reshape(b, g, g, p, p, 3).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, size, size, 3)


def _qkv_bias(q_bias, v_bias):
    # keys carry no bias: a per-row constant in the scores cancels in softmax
    return np.concatenate([q_bias, np.zeros_like(q_bias), v_bias])


def _attention(y, wqkv, bqkv, wo, bo, heads):
    b, t, d = y.shape
    dh = d // heads
    qkv = linear(y, wqkv, bqkv).reshape(b, t, 3, heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scale = 1.0 / np.sqrt(dh)
    att = softmax((q @ k.transpose(0, 1, 3, 2)) * scale)
    o = (att @ v).transpose(0, 2, 1, 3).reshape(b, t, d)
    return linear(o, wo, bo), (q, k, v, att, o, scale)


def _attention_backward(dout, y, cache, wqkv, wo, heads, need_params):
    q, k, v, att, o, scale = cache
    b, t, d = dout.shape
    dh = d // heads
    do, dwo, dbo = linear_backward(dout, o, wo, need_params)
    do = do.reshape(b, t, heads, dh).transpose(0, 2, 1, 3)
    datt = do @ v.transpose(0, 1, 3, 2)
    dv = att.transpose(0, 1, 3, 2) @ do
    ds = softmax_backward(datt, att) * scale
    dq = ds @ k
    dk = ds.transpose(0, 1, 3, 2) @ q
    dqkv = np.stack([dq, dk, dv]).transpose(1, 3, 0, 2, 4).reshape(b, t, 3 * d)
    dy, dwqkv, dbqkv = linear_backward(dqkv, y, wqkv, need_params)
    return dy, dwqkv, dbqkv, dwo, dbo


_WB = ("weight", "bias")
_GB = ("gamma", "beta")


def _store(grads, want, prefix, suffixes, *values):
    for suffix, value in zip(suffixes, values):
        if want(prefix + suffix):
            grads[prefix + suffix] = value


@dataclass
class ForwardCache:
    params_ref: dict
    single: bool
    patches: np.ndarray
    layers: list
    final: tuple


def forward(params: dict, images, cfg: EncoderConfig) -> tuple[np.ndarray, ForwardCache]:
    """Encode images of shape (H, W, 3) or (B, H, W, 3) into embeddings (d,) or (B, d)."""
    x = np.asarray(images, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or x.shape[1:] != (cfg.image_size, cfg.image_size, 3):
        raise ValueError(
            f"expected images of shape (B, {cfg.image_size}, {cfg.image_size}, 3), got {np.shape(images)}"
        )
    bsz = x.shape[0]
    patches = patchify(x, cfg.patch_size)
    tok = linear(patches, params["patch_embed.weight"], params["patch_embed.bias"])
    cls = np.broadcast_to(params["cls_token"], (bsz, 1, cfg.embed_dim))
    h = np.concatenate([cls, tok], axis=1) + params["pos_embed"][None]
    layers = []
    for i in range(cfg.depth):
        pre = f"blocks.{i}."
        y1, ln1c = layer_norm(h, params[pre + "ln1.gamma"], params[pre + "ln1.beta"], cfg.ln_eps)
        a, attc = _attention(y1, params[pre + "attn.qkv.weight"],
                             _qkv_bias(params[pre + "attn.q_bias"], params[pre + "attn.v_bias"]),
                             params[pre + "attn.proj.weight"], params[pre + "attn.proj.bias"], cfg.heads)
        h1 = h + a
        y2, ln2c = layer_norm(h1, params[pre + "ln2.gamma"], params[pre + "ln2.beta"], cfg.ln_eps)
        u = linear(y2, params[pre + "mlp.fc1.weight"], params[pre + "mlp.fc1.bias"])
        g, gt = gelu(u)
        m = linear(g, params[pre + "mlp.fc2.weight"], params[pre + "mlp.fc2.bias"])
        layers.append((y1, ln1c, attc, y2, ln2c, u, g, gt))
        h = h1 + m
    z, fc = layer_norm(h[:, 0], params["norm.gamma"], params["norm.beta"], cfg.ln_eps)
    cache = ForwardCache(dict(params), single, patches, layers, fc)
    return (z[0] if single else z), cache


def backward(params: dict, cache: ForwardCache, dz, cfg: EncoderConfig,
             partition: ParamPartition | None = None, input_grad: bool = False):
    """Reverse pass of :func:`forward`.

    Returns ``(grads, dimages)``. ``grads`` holds entries only for encoder tensors
    in ``partition`` (all of them when ``partition`` is None). ``dimages`` is
    None unless ``input_grad`` is set.
    """
    for name, ref in cache.params_ref.items():
        if params.get(name) is not ref:
            raise StaleCacheError(f"cache was produced with a different value of {name!r}")

    def want(name):
        return partition is None or name in partition

    def want_any(prefix, suffixes):
        return any(want(prefix + s) for s in suffixes)

    dz = np.asarray(dz, dtype=np.float64)
    if cache.single:
        dz = dz[None]
    grads: dict[str, np.ndarray] = {}
    bsz = dz.shape[0]
    t = cfg.n_patches + 1
    d = cfg.embed_dim

    dcls, dg_, db_ = layer_norm_backward(dz, cache.final, params["norm.gamma"],
                                         want_any("norm.", _GB))
    _store(grads, want, "norm.", _GB, dg_, db_)
    dh = np.zeros((bsz, t, d))
    dh[:, 0] = dcls

    for i in reversed(range(cfg.depth)):
        pre = f"blocks.{i}."
        y1, ln1c, attc, y2, ln2c, u, g, gt = cache.layers[i]
        # mlp branch
        name = pre + "mlp.fc2."
        dgl, dw, db = linear_backward(dh, g, params[name + "weight"], want_any(name, _WB))
        _store(grads, want, name, _WB, dw, db)
        du = gelu_backward(dgl, u, gt)
        name = pre + "mlp.fc1."
        dy2, dw, db = linear_backward(du, y2, params[name + "weight"], want_any(name, _WB))
        _store(grads, want, name, _WB, dw, db)
        name = pre + "ln2."
        dh1, dg_, db_ = layer_norm_backward(dy2, ln2c, params[name + "gamma"], want_any(name, _GB))
        _store(grads, want, name, _GB, dg_, db_)
        dh1 = dh1 + dh
        # attention branch
        need = want_any(pre + "attn.", ("qkv.weight", "q_bias", "v_bias", "proj.weight", "proj.bias"))
        dy1, dwqkv, dbqkv, dwo, dbo = _attention_backward(
            dh1, y1, attc, params[pre + "attn.qkv.weight"], params[pre + "attn.proj.weight"],
            cfg.heads, need)
        d = cfg.embed_dim
        if need:
            dbqkv = (dbqkv[:d], dbqkv[2 * d:])
        else:
            dbqkv = (None, None)
        _store(grads, want, pre + "attn.", ("qkv.weight", "q_bias", "v_bias"), dwqkv, *dbqkv)
        _store(grads, want, pre + "attn.proj.", _WB, dwo, dbo)
        name = pre + "ln1."
        dh0, dg_, db_ = layer_norm_backward(dy1, ln1c, params[name + "gamma"], want_any(name, _GB))
        _store(grads, want, name, _GB, dg_, db_)
        dh = dh0 + dh1

    if want("pos_embed"):
        grads["pos_embed"] = dh.sum(axis=0)
    if want("cls_token"):
        grads["cls_token"] = dh[:, 0].sum(axis=0)
    dtok = dh[:, 1:]
    dpatches, dw, db = linear_backward(dtok, cache.patches, params["patch_embed.weight"],
                                       want_any("patch_embed.", _WB))
    _store(grads, want, "patch_embed.", _WB, dw, db)
    dimages = None
    if input_grad:
        dimages = unpatchify(dpatches, cfg.patch_size, cfg.image_size)
        if cache.single:
            dimages = dimages[0]
    return grads, dimages


# ---------------------------------------------------------------------------
# affordance heads
# ---------------------------------------------------------------------------


def heads_forward(params: dict, z):
    """Apply the contact, hand and object heads to embeddings ``z`` (B, d)."""
    z = np.atleast_2d(z)
    out, cache = {}, {}
    for prefix in HEAD_PREFIXES:
        u = linear(z, params[prefix + "fc1.weight"], params[prefix + "fc1.bias"])
        g, gt = gelu(u)
        out[prefix[5:-1]] = linear(g, params[prefix + "fc2.weight"], params[prefix + "fc2.bias"])
        cache[prefix] = (u, g, gt)
    return out, (z, cache)


def heads_backward(params: dict, hcache, douts: dict, partition: ParamPartition | None = None):
    z, cache = hcache

    def want(name):
        return partition is None or name in partition

    grads = {}
    dz = np.zeros_like(z)
    for prefix in HEAD_PREFIXES:
        u, g, gt = cache[prefix]
        dg, dw, db = linear_backward(douts[prefix[5:-1]], g, params[prefix + "fc2.weight"],
                                     want(prefix + "fc2.weight") or want(prefix + "fc2.bias"))
        _store(grads, want, prefix + "fc2.", _WB, dw, db)
        du = gelu_backward(dg, u, gt)
        dzi, dw, db = linear_backward(du, z, params[prefix + "fc1.weight"],
                                      want(prefix + "fc1.weight") or want(prefix + "fc1.bias"))
        _store(grads, want, prefix + "fc1.", _WB, dw, db)
        dz += dzi
    return grads, dz


# ---------------------------------------------------------------------------
# bookkeeping
# ---------------------------------------------------------------------------


def encoder_shapes(cfg: EncoderConfig) -> dict[str, tuple]:
    d, p, hid, n = cfg.embed_dim, cfg.patch_size, cfg.mlp_hidden, cfg.n_patches
    shapes = {
        "patch_embed.weight": (p * p * 3, d), "patch_embed.bias": (d,),
        "cls_token": (d,), "pos_embed": (n + 1, d),
    }
    for i in range(cfg.depth):
        b = f"blocks.{i}."
        shapes.update({
            b + "ln1.gamma": (d,), b + "ln1.beta": (d,),
            b + "attn.qkv.weight": (d, 3 * d), b + "attn.q_bias": (d,), b + "attn.v_bias": (d,),
            b + "attn.proj.weight": (d, d), b + "attn.proj.bias": (d,),
            b + "ln2.gamma": (d,), b + "ln2.beta": (d,),
            b + "mlp.fc1.weight": (d, hid), b + "mlp.fc1.bias": (hid,),
            b + "mlp.fc2.weight": (hid, d), b + "mlp.fc2.bias": (d,),
        })
    shapes["norm.gamma"] = (d,)
    shapes["norm.beta"] = (d,)
    return shapes


def count_trainable(mode: str, cfg: EncoderConfig) -> tuple[int, int]:
    """(trainable, total) parameter counts over the encoder tensors, heads excluded."""
    shapes = encoder_shapes(cfg)
    part = ParamPartition.for_mode(mode, shapes)
    total = sum(int(np.prod(s)) for s in shapes.values())
    trainable = sum(int(np.prod(s)) for n, s in shapes.items() if n in part)
    return trainable, total


def layernorm_param_count(cfg: EncoderConfig) -> int:
    # two norms per block plus the final norm, each with gamma and beta
    return (2 * cfg.depth + 1) * 2 * cfg.embed_dim


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, params: dict, cfg: EncoderConfig, extra: dict | None = None) -> None:
    meta = {"encoder_config": cfg.to_dict()}
    if extra:
        meta.update(extra)
    container.save(Path(path), {k: params[k] for k in sorted(params)}, meta)


def load_checkpoint(path) -> tuple[dict, EncoderConfig, dict]:
    tensors, meta = container.load(Path(path))
    cfg = EncoderConfig(**meta["encoder_config"])
    params = {k: v.astype(np.float64) for k, v in tensors.items()}
    missing = set(encoder_shapes(cfg)) - set(params)
    if missing:
        raise container.ContainerError(f"{path}: missing encoder tensors {sorted(missing)[:3]}")
    return params, cfg, meta
