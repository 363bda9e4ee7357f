"""Fixed sinusoidal temporal encoding and the spatiotemporal input embedding.

Layout of a D-dimensional row: absolute encoding in ``[0, D/2)``, daily
encoding in ``[D/2, 3D/4)``, weekly encoding in ``[3D/4, D)``. Within each
block, even offsets hold ``sin`` and odd offsets ``cos`` of pair ``i``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .trajectory import WINDOWS_PER_DAY, WINDOWS_PER_WEEK


@dataclass(frozen=True)
class EncodingSpec:
    D: int
    windows_per_day: int = WINDOWS_PER_DAY
    windows_per_week: int = WINDOWS_PER_WEEK
    # windows between the preceding Monday 00:00 and window index 0
    phase_offset: int = 0

    def __post_init__(self):
        if self.D <= 0 or self.D % 8:
            raise ValueError(f"D must be a positive multiple of 8, got {self.D}")
        if self.windows_per_day <= 0 or self.windows_per_week <= 0:
            raise ValueError("period lengths must be positive")

    @property
    def absolute_slice(self) -> slice:
        return slice(0, self.D // 2)

    @property
    def daily_slice(self) -> slice:
        return slice(self.D // 2, 3 * self.D // 4)

    @property
    def weekly_slice(self) -> slice:
        return slice(3 * self.D // 4, self.D)

    def to_dict(self) -> dict:
        return asdict(self)


def _sincos_block(angle: np.ndarray, n_dims: int, exponent_scale: float, D: int) -> np.ndarray:
    # scalar libm pow is correctly rounded here; the vectorized numpy power can be
    # off by an ulp, which large window indices amplify past 1e-11
    freq = np.array([math.pow(10000.0, exponent_scale * i / D) for i in range(n_dims // 2)])
    arg = angle[:, None] / freq[None, :]
    out = np.empty((len(angle), n_dims), dtype=np.float64)
    out[:, 0::2] = np.sin(arg)
    out[:, 1::2] = np.cos(arg)
    return out


def temporal_encoding(window_indices, spec: EncodingSpec) -> np.ndarray:
    """T x D float64 matrix; row t encodes absolute window index ``window_indices[t]``."""
    t = np.asarray(window_indices, dtype=np.int64).reshape(-1)
    D = spec.D
    # modulo in integers before trig keeps the periodic blocks bit-exact
    day_phase = (t + spec.phase_offset) % spec.windows_per_day
    week_phase = (t + spec.phase_offset) % spec.windows_per_week
    theta_d = 2.0 * np.pi * day_phase.astype(np.float64) / spec.windows_per_day
    theta_w = 2.0 * np.pi * week_phase.astype(np.float64) / spec.windows_per_week
    return np.concatenate([
        _sincos_block(t.astype(np.float64), D // 2, 4.0, D),
        _sincos_block(theta_d, D // 4, 8.0, D),
        _sincos_block(theta_w, D // 4, 8.0, D),
    ], axis=1)


def embed_sequence(tokens, window_indices, spatial_table: np.ndarray,
                   spec: EncodingSpec) -> np.ndarray:
    """Spatial embedding lookup plus temporal encoding; works on (T,) or (B, T) inputs."""
    tokens = np.asarray(tokens, dtype=np.int64)
    windows = np.asarray(window_indices, dtype=np.int64)
    if tokens.shape != windows.shape:
        raise ValueError(f"tokens {tokens.shape} and window indices {windows.shape} differ")
    if spatial_table.ndim != 2 or spatial_table.shape[1] != spec.D:
        raise ValueError(f"spatial table must be (V+2, {spec.D}), got {spatial_table.shape}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= spatial_table.shape[0]):
        raise ValueError("token id out of range for the spatial table")
    te = temporal_encoding(windows.reshape(-1), spec).reshape(*windows.shape, spec.D)
    return spatial_table[tokens] + te.astype(spatial_table.dtype, copy=False)
