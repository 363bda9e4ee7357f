"""What the learned spatial embedding says about geography and region attributes."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .nn.optim import AdamState, adam_step
from .seeding import derive_seed, rng_for


def region_rows(spatial_table: np.ndarray, n_regions: int) -> np.ndarray:
    """Drop the MISSING and MASK rows."""
    return np.asarray(spatial_table, dtype=np.float64)[:n_regions]


def similarity_matrix(embeddings: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """(cos + 1) / 2 between embedding rows: symmetric, unit diagonal, values in [0, 1].

    Rows with (near) zero norm get the neutral similarity 0.5 to every other row.
    """
    E = np.asarray(embeddings, dtype=np.float64)
    norms = np.linalg.norm(E, axis=1)
    zero = norms <= eps
    if zero.any():
        warnings.warn(f"{int(zero.sum())} zero-norm embedding rows; similarity set to 0.5",
                      RuntimeWarning, stacklevel=2)
    U = E / np.where(zero, 1.0, norms)[:, None]
    S = (U @ U.T + 1.0) / 2.0
    S = np.triu(S) + np.triu(S, 1).T
    S[zero, :] = 0.5
    S[:, zero] = 0.5
    np.clip(S, 0.0, 1.0, out=S)
    np.fill_diagonal(S, 1.0)
    return S


def pairwise_distances(centroids: np.ndarray) -> np.ndarray:
    c = np.asarray(centroids, dtype=np.float64)
    return np.sqrt(((c[:, None, :] - c[None, :, :]) ** 2).sum(-1))


def distance_correlation(sims: np.ndarray, centroids: np.ndarray, max_pairs: int | None = None,
                         seed: int = 0) -> tuple[float | None, float | None]:
    """(Pearson, Spearman) between pair similarity and centroid distance over unordered pairs.

    Either value is None when one of the vectors is constant.
    """
    n = len(sims)
    if n < 3:
        raise ValueError("need at least 3 regions")
    iu = np.triu_indices(n, 1)
    s = np.asarray(sims)[iu]
    d = pairwise_distances(centroids)[iu]
    if max_pairs is not None and len(s) > max_pairs:
        pick = rng_for(seed, "pairs").choice(len(s), max_pairs, replace=False)
        s, d = s[pick], d[pick]
    if np.ptp(s) == 0 or np.ptp(d) == 0:
        return None, None
    return float(stats.pearsonr(s, d)[0]), float(stats.spearmanr(s, d)[0])


@dataclass
class GroupSimilarity:
    within: np.ndarray
    cross: np.ndarray
    within_mean: float
    cross_mean: float
    bin_edges: np.ndarray
    within_hist: np.ndarray
    cross_hist: np.ndarray
    ranksum_statistic: float | None
    ranksum_pvalue: float | None


def group_similarity(sims: np.ndarray, labels, group: str, other: str,
                     bins: int = 20) -> GroupSimilarity:
    """Similarities of all pairs inside ``group`` versus all ``group`` x ``other`` pairs."""
    labels = np.asarray(labels, dtype=object)
    a = np.flatnonzero(labels == group)
    b = np.flatnonzero(labels == other)
    if len(a) < 2 or len(b) < 2:
        raise ValueError(f"groups need >= 2 members each, got {len(a)} and {len(b)}")
    S = np.asarray(sims)
    iu = np.triu_indices(len(a), 1)
    within = S[np.ix_(a, a)][iu]
    cross = S[np.ix_(a, b)].ravel()
    edges = np.linspace(0.0, 1.0, bins + 1)
    stat = pval = None
    if np.ptp(np.concatenate([within, cross])) > 0:
        res = stats.mannwhitneyu(within, cross, alternative="two-sided")
        stat, pval = float(res.statistic), float(res.pvalue)
    return GroupSimilarity(within, cross, float(within.mean()), float(cross.mean()), edges,
                           np.histogram(within, edges)[0], np.histogram(cross, edges)[0],
                           stat, pval)


# -- attribute probe ------------------------------------------------------------

class _MLP:
    """Two ReLU hidden layers and a scalar output, trained with Adam on squared error."""

    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator):
        def uni(shape, fan_in):
            b = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-b, b, shape)

        self.p = {"w1": uni((n_in, hidden), n_in), "b1": np.zeros(hidden),
                  "w2": uni((hidden, hidden), hidden), "b2": np.zeros(hidden),
                  "w3": uni((hidden, 1), hidden), "b3": np.zeros(1)}

    def forward(self, x):
        z1 = x @ self.p["w1"] + self.p["b1"]
        h1 = np.maximum(z1, 0)
        z2 = h1 @ self.p["w2"] + self.p["b2"]
        h2 = np.maximum(z2, 0)
        out = (h2 @ self.p["w3"] + self.p["b3"])[:, 0]
        return out, (x, z1, h1, z2, h2)

    def grads(self, x, y):
        out, (x, z1, h1, z2, h2) = self.forward(x)
        d = (2.0 / len(y)) * (out - y)[:, None]
        g = {"w3": h2.T @ d, "b3": d.sum(0)}
        d = (d @ self.p["w3"].T) * (z2 > 0)
        g["w2"], g["b2"] = h1.T @ d, d.sum(0)
        d = (d @ self.p["w2"].T) * (z1 > 0)
        g["w1"], g["b1"] = x.T @ d, d.sum(0)
        return g


def r_squared(y_true, y_pred) -> float:
    y_true = np.asarray(y_true, dtype=np.float64)
    ss_tot = ((y_true - y_true.mean()) ** 2).sum()
    ss_res = ((y_true - y_pred) ** 2).sum()
    return float(1.0 - ss_res / ss_tot) if ss_tot > 0 else 0.0


@dataclass
class ProbeResult:
    mean: float
    std: float
    r2: np.ndarray
    metadata: dict = field(default_factory=dict)


def probe_attribute(embeddings: np.ndarray, values, trials: int = 100, epochs: int = 5,
                    hidden: int = 64, batch_size: int = 4, lr: float = 1e-2,
                    seed: int = 0) -> ProbeResult:
    """Validation R^2 of an MLP predicting ``values`` from embeddings, over random half splits.

    Inputs and target are standardized with training-half statistics.
    """
    X = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(values, dtype=np.float64)
    if len(X) < 10:
        raise ValueError("probe needs at least 10 regions")
    if len(y) != len(X) or not np.all(np.isfinite(y)):
        raise ValueError("attribute values must be finite, one per region")
    n = len(X)
    r2 = np.empty(trials)
    for trial in range(trials):
        rng = rng_for(seed, "probe", trial)
        perm = rng.permutation(n)
        tr, va = perm[: n // 2], perm[n // 2:]
        mu, sd = X[tr].mean(0), X[tr].std(0) + 1e-12
        ym, ys = y[tr].mean(), y[tr].std() + 1e-12
        Xt, Xv = (X[tr] - mu) / sd, (X[va] - mu) / sd
        yt = (y[tr] - ym) / ys
        net = _MLP(X.shape[1], hidden, rng)
        opt = AdamState()
        for _ in range(epochs):
            order = rng.permutation(len(tr))
            for i in range(0, len(order), batch_size):
                idx = order[i:i + batch_size]
                adam_step(net.p, net.grads(Xt[idx], yt[idx]), opt, lr, 0.9, 0.999, 1e-8)
        pred = net.forward(Xv)[0] * ys + ym
        r2[trial] = r_squared(y[va], pred)
    meta = {"hidden_layers": [hidden, hidden], "epochs": epochs, "trials": trials,
            "batch_size": batch_size, "lr": lr}
    return ProbeResult(float(r2.mean()), float(r2.std()), r2, meta)


def permutation_null(embeddings: np.ndarray, values, trials: int = 100, seed: int = 0,
                     **kwargs) -> ProbeResult:
    """Probe R^2 with ``values`` freshly shuffled in every trial: the no-information baseline."""
    values = np.asarray(values, dtype=np.float64)
    r2 = np.empty(trials)
    meta = {}
    for k in range(trials):
        shuffled = rng_for(seed, "permute", k).permutation(values)
        res = probe_attribute(embeddings, shuffled, trials=1, seed=derive_seed(seed, "null", k),
                              **kwargs)
        r2[k] = res.r2[0]
        meta = res.metadata
    return ProbeResult(float(r2.mean()), float(r2.std()), r2, {**meta, "trials": trials,
                                                                "null": "permuted attribute"})
