"""Shared numerical kernels: ADAM, Savitzky-Golay smoothing, gradient checking, seeded RNG."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.signal import savgol_filter


def make_rng(seed: int) -> np.random.Generator:
    """Return a PCG64 generator; the same seed gives the same stream on every run."""
    return np.random.default_rng(np.uint64(int(seed) & 0xFFFFFFFFFFFFFFFF))


# ---------------------------------------------------------------------------
# ADAM
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.first_moment.shape != self.second_moment.shape:
            raise ValueError("moment vectors must have identical shape")
        if self.step_count < 0:
            raise ValueError("step_count must be >= 0")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")

    @classmethod
    def zeros(cls, n: int, **kwargs) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), **kwargs)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected ADAM update.

    L2 weight decay is folded into the gradient (``g + wd * p``) before the
    moment update. Returns new arrays; the inputs are not modified.
    """
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    n = state.first_moment.shape[0]
    if params.shape != (n,) or grads.shape != (n,):
        raise ValueError(
            f"length mismatch: params {params.shape}, grads {grads.shape}, moments ({n},)"
        )
    bad = np.flatnonzero(~np.isfinite(grads))
    if bad.size:
        raise FloatingPointError(f"non-finite gradient at index {int(bad[0])}")

    g = grads + state.weight_decay * params if state.weight_decay else grads
    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * g
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_params = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = AdamState(
        m, v, t, state.lr, state.beta1, state.beta2, state.eps, state.weight_decay
    )
    return new_params, new_state


class Adam:
    """ADAM over a dict of named tensors, touching only the names it was built with.

    Parameters are flattened into one vector in a fixed (sorted) name order so the
    update is exactly :func:`adam_step`.
    """

    def __init__(self, params: dict[str, np.ndarray], names, lr=1e-4, weight_decay=0.0,
                 beta1=0.9, beta2=0.999, eps=1e-8):
        self.names = sorted(names)
        self.shapes = {k: params[k].shape for k in self.names}
        self.sizes = {k: params[k].size for k in self.names}
        n = sum(self.sizes.values())
        self.state = AdamState.zeros(n, lr=lr, beta1=beta1, beta2=beta2, eps=eps,
                                     weight_decay=weight_decay)

    def _flatten(self, tensors: dict[str, np.ndarray]) -> np.ndarray:
        if not self.names:
            return np.zeros(0)
        return np.concatenate([np.asarray(tensors[k], dtype=np.float64).ravel() for k in self.names])

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        """Return a new params dict; untouched tensors are passed through by reference."""
        flat_p = self._flatten(params)
        flat_g = self._flatten({k: grads.get(k, np.zeros(self.shapes[k])) for k in self.names})
        new_flat, self.state = adam_step(flat_p, flat_g, self.state)
        out = dict(params)
        offset = 0
        for k in self.names:
            size = self.sizes[k]
            out[k] = new_flat[offset:offset + size].reshape(self.shapes[k])
            offset += size
        return out


# ---------------------------------------------------------------------------
# Savitzky-Golay
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SavGolConfig:
    window_length: int = 7
    poly_order: int = 2

    def __post_init__(self):
        if self.window_length < 3 or self.window_length % 2 == 0:
            raise ValueError("window_length must be an odd integer >= 3")
        if not 0 <= self.poly_order < self.window_length:
            raise ValueError("poly_order must satisfy 0 <= poly_order < window_length")


def savgol_smooth(signal, cfg: SavGolConfig = SavGolConfig()) -> np.ndarray:
    """Least-squares polynomial smoothing with mirrored boundary padding."""
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("signal must be one-dimensional")
    if x.shape[0] < cfg.window_length:
        raise ValueError(
            f"signal of length {x.shape[0]} is shorter than window {cfg.window_length}"
        )
    return savgol_filter(x, cfg.window_length, cfg.poly_order, mode="mirror")


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_index: int
    rel_errors: np.ndarray = field(repr=False)
    numeric: np.ndarray = field(repr=False)
    analytic: np.ndarray = field(repr=False)


def relative_error(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return np.abs(a - b) / denom


def numeric_grad(f: Callable[[np.ndarray], float], point, h: float = 1e-4, indices=None) -> np.ndarray:
    x = np.array(point, dtype=np.float64)
    idx = range(x.size) if indices is None else indices
    out = np.zeros(len(idx) if indices is not None else x.size)
    flat = x.reshape(-1)
    for j, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value when perturbing index {i}")
        out[j] = (fp - fm) / (2.0 * h)
    return out


def grad_check(f: Callable[[np.ndarray], float], point, analytic, h: float = 1e-4,
               indices=None) -> GradCheckResult:
    """Compare ``analytic`` against central differences of ``f`` at ``point``.

    ``indices`` restricts the check to a subset of flat coordinates; ``analytic``
    must then hold the gradient at exactly those coordinates.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    f0 = f(np.array(point, dtype=np.float64))
    if not np.isfinite(f0):
        raise FloatingPointError("non-finite function value at the check point")
    num = numeric_grad(f, point, h, indices)
    ana = np.asarray(analytic, dtype=np.float64).reshape(-1)
    if ana.shape != num.shape:
        raise ValueError(f"analytic gradient has shape {ana.shape}, expected {num.shape}")
    rel = relative_error(ana, num)
    worst = int(np.argmax(rel)) if rel.size else -1
    return GradCheckResult(float(rel.max()) if rel.size else 0.0, worst, rel, num, ana)


def grad_check_tensors(loss: Callable[[dict], float], params: dict, grads: dict, h: float = 1e-4,
                       max_coords: int | None = 24, seed: int = 0) -> dict[str, float]:
    """Run :func:`grad_check` on every tensor in ``grads``.

    With ``max_coords`` set, each tensor is checked on at most that many
    coordinates drawn without replacement (seeded). Returns the max relative
    error per tensor name.
    """
    rng = make_rng(seed)
    report = {}
    for name in sorted(grads):
        base = np.asarray(params[name], dtype=np.float64)
        size = base.size
        if max_coords is None or size <= max_coords:
            idx = np.arange(size)
        else:
            idx = np.sort(rng.choice(size, size=max_coords, replace=False))

        def f(x, name=name):
            trial = dict(params)
            trial[name] = x
            return loss(trial)

        analytic = np.asarray(grads[name]).reshape(-1)[idx]
        report[name] = grad_check(f, base, analytic, h, indices=idx).max_rel_error
    return report
