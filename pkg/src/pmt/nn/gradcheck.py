from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import PMTModel


@dataclass
class GradCheckResult:
    max_rel_error: float
    per_tensor: dict
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def _rel_error(a: np.ndarray, b: np.ndarray, floor: float) -> float:
    num = np.linalg.norm(a - b)
    den = max(np.linalg.norm(a) + np.linalg.norm(b), floor)
    return float(num / den)


def grad_check(model: PMTModel, tolerance: float = 1e-6, T: int = 4, batch: int = 2,
               causal: bool = True, smoothing: float = 0.1, h: float = 1e-5,
               seed: int = 0) -> GradCheckResult:
    """Compare analytic gradients with central finite differences for every parameter.

    The analytic path runs at the model's own precision. The finite-difference
    reference always runs on a float64 copy, so a float32 model is measured
    against an accurate oracle rather than against float32 rounding noise.
    Error per tensor is ``|g_a - g_fd| / max(|g_a| + |g_fd|, floor)`` in the
    2-norm, with ``floor = 1e-4 * |full gradient|``. The floor keeps tensors
    whose exact gradient is zero (the key bias: softmax ignores a constant
    shift) from reporting roundoff divided by roundoff.
    """
    cfg = model.config
    if cfg.D > 16 or cfg.L > 2 or T > 8:
        raise ValueError("grad_check is meant for tiny models (D<=16, L<=2, T<=8)")
    rng = np.random.default_rng(seed)
    tokens = rng.integers(0, cfg.vocab_size, (batch, T))
    tokens[0, 0] = cfg.missing_token
    windows = rng.integers(0, 2000, (batch, 1)) + np.arange(T)
    targets = rng.integers(0, cfg.V_out, (batch, T))
    mask = rng.random((batch, T)) < 0.75
    mask[0, 0] = True

    _, grads, _ = model.loss_and_grads(tokens, windows, targets, mask, causal, smoothing)

    ref = model.astype(np.float64)

    def f() -> float:
        return ref.loss_and_grads(tokens, windows, targets, mask, causal, smoothing)[0]

    fds = {}
    for name, p in ref.params.items():
        fd = np.zeros_like(p)
        flat, gflat = p.reshape(-1), fd.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = f()
            flat[i] = old - h
            down = f()
            flat[i] = old
            gflat[i] = (up - down) / (2 * h)
        fds[name] = fd
    scale = np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    floor = max(1e-4 * scale, 1e-12)
    per_tensor = {k: _rel_error(grads[k].astype(np.float64), fd, floor) for k, fd in fds.items()}
    return GradCheckResult(max(per_tensor.values()), per_tensor, tolerance)
