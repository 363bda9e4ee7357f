"""Region universe and token vocabulary.

Regions are cells of a uniform planar grid (meters). Real regions get the
contiguous token ids ``0..V-1``; ``MISSING`` is ``V`` and ``MASK`` is ``V+1``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .seeding import rng_for

OUT_OF_BOUNDS = None


@dataclass(frozen=True)
class RegionMeta:
    region_id: str
    centroid: tuple[float, float]
    population: float
    attributes: dict[str, float] = field(default_factory=dict)
    group_label: str | None = None

    def __post_init__(self):
        if not all(math.isfinite(c) for c in self.centroid):
            raise ValueError(f"region {self.region_id}: non-finite centroid")
        if not (self.population >= 0):
            raise ValueError(f"region {self.region_id}: negative population")
        for k, v in self.attributes.items():
            if not math.isfinite(v):
                raise ValueError(f"region {self.region_id}: attribute {k} is not finite")


@dataclass(frozen=True)
class GridGeometry:
    xmin: float
    ymin: float
    xmax: float
    ymax: float
    cell_size: float
    nx: int
    ny: int


class RegionVocabulary:
    """Immutable mapping between regions and token ids."""

    def __init__(self, regions: list[RegionMeta], grid: GridGeometry | None = None):
        self.regions: tuple[RegionMeta, ...] = tuple(regions)
        ids = [r.region_id for r in self.regions]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate region ids")
        self.token_of: dict[str, int] = {rid: i for i, rid in enumerate(ids)}
        self.grid = grid

    @property
    def n_regions(self) -> int:
        return len(self.regions)

    @property
    def missing_token(self) -> int:
        return len(self.regions)

    @property
    def mask_token(self) -> int:
        return len(self.regions) + 1

    @property
    def size(self) -> int:
        """Vocabulary size including MISSING and MASK."""
        return len(self.regions) + 2

    def encode(self, region_id: str) -> int:
        return self.token_of[region_id]

    def decode(self, token: int) -> str:
        if not 0 <= token < len(self.regions):
            raise ValueError(f"token {token} is not a region token")
        return self.regions[token].region_id

    def is_region(self, token) -> np.ndarray | bool:
        t = np.asarray(token)
        return (t >= 0) & (t < len(self.regions))

    def centroids(self) -> np.ndarray:
        return np.array([r.centroid for r in self.regions], dtype=np.float64)

    def populations(self) -> np.ndarray:
        return np.array([r.population for r in self.regions], dtype=np.float64)

    def attribute(self, name: str) -> np.ndarray:
        return np.array([r.attributes[name] for r in self.regions], dtype=np.float64)

    def attribute_names(self) -> list[str]:
        if not self.regions:
            return []
        return list(self.regions[0].attributes)

    def group_labels(self) -> list[str | None]:
        return [r.group_label for r in self.regions]

    def __len__(self) -> int:
        return len(self.regions)

    def __eq__(self, other) -> bool:
        return isinstance(other, RegionVocabulary) and self.regions == other.regions

    def __repr__(self) -> str:
        return f"RegionVocabulary(n_regions={self.n_regions}, grid={self.grid})"

    # -- CSV interchange -------------------------------------------------
    def to_csv(self, path: str | Path | None = None) -> str:
        attrs = self.attribute_names()
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["region_id", "cx", "cy", "population", "group_label", *attrs])
        for r in self.regions:
            w.writerow([
                r.region_id, repr(float(r.centroid[0])), repr(float(r.centroid[1])),
                repr(float(r.population)), r.group_label or "",
                *(repr(float(r.attributes[a])) for a in attrs),
            ])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, source: str | Path) -> "RegionVocabulary":
        """Load region metadata; ``source`` is a path or CSV text."""
        text = source
        if isinstance(source, Path) or "\n" not in str(source):
            text = Path(source).read_text()
        reader = csv.reader(io.StringIO(text))
        header = next(reader)
        fixed = ["region_id", "cx", "cy", "population", "group_label"]
        if header[:5] != fixed:
            raise ValueError(f"region CSV header must start with {fixed}, got {header[:5]}")
        attrs = header[5:]
        regions = []
        for row in reader:
            if not row:
                continue
            regions.append(RegionMeta(
                region_id=row[0],
                centroid=(float(row[1]), float(row[2])),
                population=float(row[3]),
                attributes={a: float(v) for a, v in zip(attrs, row[5:])},
                group_label=row[4] or None,
            ))
        return cls(regions, grid=_infer_grid(regions))


def _infer_grid(regions: list[RegionMeta]) -> GridGeometry | None:
    """Recover grid geometry from lattice centroids in row-major order."""
    if not regions:
        return None
    c = np.array([r.centroid for r in regions])
    xs, ys = np.unique(c[:, 0]), np.unique(c[:, 1])
    steps = np.concatenate([np.diff(xs), np.diff(ys)])
    if steps.size == 0:
        return None
    cell = float(steps.min())
    if not np.allclose(steps, cell):
        return None
    nx, ny = len(xs), len(ys)
    if nx * ny != len(regions):
        return None
    g = GridGeometry(float(xs[0] - cell / 2), float(ys[0] - cell / 2),
                     float(xs[-1] + cell / 2), float(ys[-1] + cell / 2), cell, nx, ny)
    expected = np.array([_cell_center(g, i % nx, i // nx) for i in range(len(regions))])
    return g if np.allclose(expected, c) else None


def _cell_center(g: GridGeometry, ix: int, iy: int) -> tuple[float, float]:
    return (g.xmin + (ix + 0.5) * g.cell_size, g.ymin + (iy + 0.5) * g.cell_size)


def smooth_field(xy: np.ndarray, rng: np.random.Generator, n_bumps: int = 4,
                 length_scale: float | None = None) -> np.ndarray:
    """Sum of random Gaussian bumps over points ``xy``, rescaled to [0, 1]."""
    lo, hi = xy.min(axis=0), xy.max(axis=0)
    extent = float(max(hi - lo)) or 1.0
    ls = length_scale or 0.3 * extent
    centers = lo + rng.random((n_bumps, 2)) * (hi - lo + 1e-12)
    weights = rng.uniform(0.5, 1.5, n_bumps) * rng.choice([-1.0, 1.0], n_bumps)
    d2 = ((xy[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
    f = (weights * np.exp(-d2 / (2 * ls**2))).sum(1)
    span = f.max() - f.min()
    return (f - f.min()) / span if span > 0 else np.full(len(xy), 0.5)


def build_grid_vocab(bbox: tuple[float, float, float, float], cell_size: float,
                     seed: int = 0) -> RegionVocabulary:
    """One region per grid cell of ``bbox = (xmin, ymin, xmax, ymax)``.

    Populations and attributes are smooth spatial fields plus noise, derived
    deterministically from ``seed``; they stand in for census covariates.
    """
    xmin, ymin, xmax, ymax = map(float, bbox)
    if not all(math.isfinite(v) for v in (xmin, ymin, xmax, ymax)):
        raise ValueError("bbox must be finite")
    if not (xmax > xmin and ymax > ymin):
        raise ValueError(f"degenerate bbox {bbox}")
    if not (cell_size > 0):
        raise ValueError(f"cell_size must be positive, got {cell_size}")
    nx = max(1, math.ceil((xmax - xmin) / cell_size - 1e-9))
    ny = max(1, math.ceil((ymax - ymin) / cell_size - 1e-9))
    grid = GridGeometry(xmin, ymin, xmax, ymax, float(cell_size), nx, ny)

    centers = np.array([_cell_center(grid, i % nx, i // nx) for i in range(nx * ny)])
    rng = rng_for(seed, "geo_vocab")
    density = smooth_field(centers, rng)
    wealth = smooth_field(centers, rng)
    minority = smooth_field(centers, rng)
    n = len(centers)
    population = np.round(600 + 2400 * np.clip(density + 0.1 * rng.standard_normal(n), 0, 1))
    income = 30_000 + 120_000 * np.clip(wealth + 0.05 * rng.standard_normal(n), 0, 1)
    bachelor = np.clip(0.1 + 0.6 * wealth + 0.05 * rng.standard_normal(n), 0, 1)
    minority_share = np.clip(minority + 0.05 * rng.standard_normal(n), 0, 1)

    regions = []
    for i in range(n):
        regions.append(RegionMeta(
            region_id=f"c{i % nx:03d}_{i // nx:03d}",
            centroid=(float(centers[i, 0]), float(centers[i, 1])),
            population=float(population[i]),
            attributes={
                "income": float(income[i]),
                "bachelor_share": float(bachelor[i]),
                "minority_share": float(minority_share[i]),
            },
            group_label="B" if minority_share[i] > 0.5 else "A",
        ))
    return RegionVocabulary(regions, grid)


def assign_regions(x, y, vocab: RegionVocabulary) -> np.ndarray:
    """Vectorized point-to-token assignment; -1 marks out-of-bounds points."""
    g = vocab.grid
    if g is None:
        raise ValueError("vocabulary has no grid geometry")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    ix = np.floor((x - g.xmin) / g.cell_size).astype(np.int64)
    iy = np.floor((y - g.ymin) / g.cell_size).astype(np.int64)
    inside = (x >= g.xmin) & (x < g.xmax) & (y >= g.ymin) & (y < g.ymax)
    inside &= (ix >= 0) & (ix < g.nx) & (iy >= 0) & (iy < g.ny)
    return np.where(inside, iy * g.nx + ix, -1)


def assign_region(point: tuple[float, float], vocab: RegionVocabulary) -> int | None:
    """Token of the half-open cell containing ``point``; None when outside the bbox."""
    tok = int(assign_regions([point[0]], [point[1]], vocab)[0])
    return tok if tok >= 0 else OUT_OF_BOUNDS
