"""Downstream evaluation: next-location prediction, imputation, generation, and their metrics.

Predictors are objects with ``n_regions`` and ``logits(tokens, windows, causal)``
over model token ids (MISSING = n_regions, MASK = n_regions + 1); a
:class:`~pmt.nn.PMTModel` or a :class:`~pmt.nn.Checkpoint` both qualify.
"""

from __future__ import annotations

import csv
import io
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .nn.checkpoint import Checkpoint
from .nn.model import PMTModel
from .pretrain import stack_sequences, to_model_tokens
from .seeding import rng_for
from .trajectory import MISSING, WINDOWS_PER_DAY, TrajectorySequence

DAYTIME_SLOTS = (15, 39)  # [07:30, 19:30) in 30-minute slots
ACC_KS = (1, 3, 10)


@dataclass
class MetricsReport:
    task: str
    model_id: str
    stratum: str
    metrics: dict
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        accs = [self.metrics.get(f"acc@{k}") for k in ACC_KS]
        present = [a for a in accs if a is not None]
        if any(not 0.0 <= a <= 1.0 for a in present):
            raise ValueError(f"accuracy outside [0, 1]: {self.metrics}")
        if any(b < a - 1e-12 for a, b in zip(present, present[1:])):
            raise ValueError(f"accuracies must be non-decreasing in k: {self.metrics}")


def reports_to_rows(reports: Sequence[MetricsReport]) -> list[dict]:
    return [{"model": r.model_id, "task": r.task, "stratum": r.stratum, "metric": k, "value": v}
            for r in reports for k, v in r.metrics.items()]


def write_reports(reports: Sequence[MetricsReport], csv_path: str | Path | None = None,
                  json_path: str | Path | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "task", "stratum", "metric", "value"])
    for row in reports_to_rows(reports):
        v = row["value"]
        w.writerow([row["model"], row["task"], row["stratum"], row["metric"],
                    "" if v is None else repr(v)])
    text = buf.getvalue()
    if csv_path is not None:
        Path(csv_path).write_text(text)
    if json_path is not None:
        Path(json_path).write_text(json.dumps([asdict(r) for r in reports], indent=2,
                                              sort_keys=True) + "\n")
    return text


# -- predictors ----------------------------------------------------------------

def as_predictor(model):
    if isinstance(model, Checkpoint):
        return model.to_model()
    if not hasattr(model, "logits"):
        raise TypeError(f"{type(model).__name__} is not a predictor")
    return model


def n_regions_of(model) -> int:
    if hasattr(model, "n_regions"):
        return int(model.n_regions)
    return int(model.config.V_out)


def _context_of(model, context_length):
    if context_length is not None:
        return context_length
    if isinstance(model, Checkpoint):
        return model.metadata.get("context_length")
    return None


def _phase_offset(model) -> int:
    enc = getattr(model, "encoding", None)
    return 0 if enc is None else int(enc.phase_offset)


def is_daytime(window_indices, phase_offset: int = 0, slots=DAYTIME_SLOTS) -> np.ndarray:
    slot = (np.asarray(window_indices) + phase_offset) % WINDOWS_PER_DAY
    return (slot >= slots[0]) & (slot < slots[1])


def _chunks(T: int, length: int | None):
    """(start, stop) input ranges covering ``0..T-1`` in order."""
    if length is None or length >= T:
        return [(0, T)]
    return [(s, min(s + length, T)) for s in range(0, T, length)]


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    x = logits.astype(np.float64)
    m = x.max(-1, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(-1, keepdims=True))


def _rank_of_target(logp: np.ndarray, target: np.ndarray) -> np.ndarray:
    """0-based rank; ties count against the target."""
    tv = np.take_along_axis(logp, target[..., None], -1)
    return (logp > tv).sum(-1) + ((logp == tv).sum(-1) - 1)


def _score_block(logp, targets, mask):
    rank = _rank_of_target(logp, np.where(mask, targets, 0))
    nll = -np.take_along_axis(logp, np.where(mask, targets, 0)[..., None], -1)[..., 0]
    return rank[mask], nll[mask]


def _summarize(ranks: np.ndarray, nll: np.ndarray) -> dict:
    n = int(len(ranks))
    out = {"n": n, "loss": float(nll.mean()) if n else None}
    for k in ACC_KS:
        out[f"acc@{k}"] = float((ranks < k).mean()) if n else None
    return out


# -- next-location prediction ------------------------------------------------------

def next_location_scores(model, seqs: Sequence[TrajectorySequence],
                         context_length: int | None = None, origin_epoch: int | None = None):
    """Per scored position: target rank, NLL and target window index.

    Every position ``t >= 1`` with a real-region target is predicted from the
    preceding inputs of its context chunk.
    """
    ctx = _context_of(model, context_length)
    model = as_predictor(model)
    V = n_regions_of(model)
    tokens, windows = stack_sequences(seqs, origin_epoch)
    tok = to_model_tokens(tokens, V)
    T = tok.shape[1]
    if T < 2:
        raise ValueError("next-location scoring needs T >= 2")
    ranks, nlls, wins = [], [], []
    for s, e in _chunks(T - 1, ctx):
        inp, win = tok[:, s:e], windows[:, s:e]
        tgt, tgt_win = tok[:, s + 1:e + 1], windows[:, s + 1:e + 1]
        mask = tgt < V
        logp = _log_softmax(model.logits(inp, win, causal=True))
        r, n = _score_block(logp, tgt, mask)
        ranks.append(r)
        nlls.append(n)
        wins.append(tgt_win[mask])
    return np.concatenate(ranks), np.concatenate(nlls), np.concatenate(wins)


def eval_next_location(model, test_seqs: Sequence[TrajectorySequence], model_id: str = "pmt",
                       context_length: int | None = None, daytime=DAYTIME_SLOTS,
                       origin_epoch: int | None = None) -> list[MetricsReport]:
    """Cross-entropy and Acc@1/3/10 on held-out users, for daytime and all-day targets."""
    ctx = _context_of(model, context_length)
    predictor = as_predictor(model)
    ranks, nll, wins = next_location_scores(predictor, test_seqs, ctx, origin_epoch)
    phase = _phase_offset(predictor)
    day = is_daytime(wins, phase, daytime)
    meta = {"daytime_slots": list(daytime)}
    return [MetricsReport("next_location", model_id, "daytime", _summarize(ranks[day], nll[day]), meta),
            MetricsReport("next_location", model_id, "all-day", _summarize(ranks, nll), meta)]


@dataclass
class FbmModel:
    """Per-user visit counts split into daytime and nighttime windows."""

    day: dict
    night: dict
    global_counts: np.ndarray
    n_regions: int
    phase_offset: int = 0
    daytime: tuple = DAYTIME_SLOTS
    origin_epoch: int | None = None

    def ranking(self, user_id: str, window_index: int) -> tuple[np.ndarray, bool]:
        """All region tokens, most likely first; flag is True for the global fallback."""
        is_day = bool(is_daytime(window_index, self.phase_offset, self.daytime))
        fallback = user_id not in self.day
        if fallback:
            keys = [self.global_counts]
        else:
            own = (self.day if is_day else self.night)[user_id]
            other = (self.night if is_day else self.day)[user_id]
            keys = [own, other, self.global_counts]
        # lexsort: last key is primary; the token id is the final tie-break
        order = np.lexsort([np.arange(self.n_regions)] + [-k for k in reversed(keys)])
        return order, fallback


def fbm_fit(seqs: Sequence[TrajectorySequence], n_regions: int, phase_offset: int = 0,
            daytime=DAYTIME_SLOTS, origin_epoch: int | None = None) -> FbmModel:
    """Count every observed window of each user over the whole study period."""
    tokens, windows = stack_sequences(seqs, origin_epoch)
    origin = min(s.start_epoch for s in seqs) if origin_epoch is None else origin_epoch
    day, night = {}, {}
    for s, tok, win in zip(seqs, tokens, windows):
        obs = tok != MISSING
        d = is_daytime(win, phase_offset, daytime)
        day[s.user_id] = np.bincount(tok[obs & d], minlength=n_regions)
        night[s.user_id] = np.bincount(tok[obs & ~d], minlength=n_regions)
    g = np.bincount(tokens[tokens != MISSING], minlength=n_regions)
    return FbmModel(day, night, g, n_regions, phase_offset, tuple(daytime), origin)


def fbm_predict(fbm: FbmModel, user_id: str, window_index: int, k: int = 1) -> list[int]:
    order, _ = fbm.ranking(user_id, window_index)
    return [int(t) for t in order[:k]]


def eval_fbm_next_location(fbm: FbmModel, test_seqs: Sequence[TrajectorySequence],
                           model_id: str = "fbm") -> list[MetricsReport]:
    """Acc@k of the frequency baseline on the same targets as :func:`eval_next_location`."""
    tokens, windows = stack_sequences(test_seqs, fbm.origin_epoch)
    ranks, day_flags, fallbacks = [], [], 0
    for s, tok, win in zip(test_seqs, tokens, windows):
        cache = {}
        for t in np.flatnonzero(tok[1:] != MISSING) + 1:
            is_day = bool(is_daytime(win[t], fbm.phase_offset, fbm.daytime))
            if is_day not in cache:
                order, fb = fbm.ranking(s.user_id, int(win[t]))
                pos = np.empty(fbm.n_regions, dtype=np.int64)
                pos[order] = np.arange(fbm.n_regions)
                cache[is_day] = pos
                fallbacks += fb
            ranks.append(cache[is_day][tok[t]])
            day_flags.append(is_day)
    ranks = np.array(ranks, dtype=np.int64)
    day = np.array(day_flags, dtype=bool)
    meta = {"fallback_queries": int(fallbacks), "daytime_slots": list(fbm.daytime)}

    def summary(r):
        out = {"n": int(len(r)), "loss": None}
        for k in ACC_KS:
            out[f"acc@{k}"] = float((r < k).mean()) if len(r) else None
        return out

    return [MetricsReport("next_location", model_id, "daytime", summary(ranks[day]), meta),
            MetricsReport("next_location", model_id, "all-day", summary(ranks), meta)]


# -- imputation ------------------------------------------------------------------

def remove_observations(tokens: np.ndarray, ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Boolean (B, T) mask of removed positions: ``round(ratio * observed)`` per row."""
    removed = np.zeros(tokens.shape, dtype=bool)
    for i, row in enumerate(tokens):
        obs = np.flatnonzero(row != MISSING)
        k = int(round(ratio * len(obs)))
        if k:
            removed[i, rng.choice(obs, size=k, replace=False)] = True
    return removed


def eval_imputation(model, test_seqs: Sequence[TrajectorySequence],
                    removal_ratios=(0.5, 0.6, 0.7, 0.8, 0.9), seed: int = 0,
                    model_id: str = "pmt", context_length: int | None = None,
                    origin_epoch: int | None = None) -> list[MetricsReport]:
    """Mask a fraction of observed windows and score the bidirectional reconstruction.

    Only removed positions are scored, so the ground truth is always a real region.
    """
    ctx = _context_of(model, context_length)
    model = as_predictor(model)
    V = n_regions_of(model)
    tokens, windows = stack_sequences(test_seqs, origin_epoch)
    tok = to_model_tokens(tokens, V)
    T = tok.shape[1]
    reports = []
    for ratio in removal_ratios:
        rng = rng_for(seed, "imputation", repr(float(ratio)))
        removed = remove_observations(tokens, ratio, rng)
        inputs = np.where(removed, V + 1, tok)
        ranks, nlls, truths = [], [], []
        for s, e in _chunks(T, ctx):
            m = removed[:, s:e]
            if not m.any():
                continue
            logp = _log_softmax(model.logits(inputs[:, s:e], windows[:, s:e], causal=False))
            r, n = _score_block(logp, tok[:, s:e], m)
            ranks.append(r)
            nlls.append(n)
            truths.append(tok[:, s:e][m])
        ranks = np.concatenate(ranks) if ranks else np.zeros(0, np.int64)
        nlls = np.concatenate(nlls) if nlls else np.zeros(0)
        truths = np.concatenate(truths) if truths else np.zeros(0, np.int64)
        metrics = _summarize(ranks, nlls)
        metrics["majority_base_rate"] = (float(np.bincount(truths).max() / len(truths))
                                         if len(truths) else None)
        occ_after = float(((tokens != MISSING) & ~removed).mean())
        metrics["occupancy_after_removal"] = occ_after
        meta = {"empty": len(ranks) == 0}
        reports.append(MetricsReport("imputation", model_id, f"removal={ratio:g}", metrics, meta))
    return reports


# -- generation ------------------------------------------------------------------

def generate(model, history_tokens, history_windows, steps: int,
             context_length: int | None = None, temperature: float | None = None,
             rng: np.random.Generator | None = None) -> np.ndarray:
    """Extend each history by ``steps`` tokens, one causal prediction at a time.

    Greedy argmax by default; ``temperature`` switches to sampling. Histories
    are (T0,) or (B, T0) region tokens with MISSING = -1; the output has the
    same leading shape with ``steps`` region tokens.
    """
    ctx = _context_of(model, context_length)
    model = as_predictor(model)
    V = n_regions_of(model)
    hist = np.asarray(history_tokens, dtype=np.int64)
    win = np.asarray(history_windows, dtype=np.int64)
    squeeze = hist.ndim == 1
    hist, win = np.atleast_2d(hist), np.atleast_2d(win)
    if hist.shape[1] == 0:
        raise ValueError("history must be non-empty")
    if temperature is not None and rng is None:
        raise ValueError("sampling needs an rng")
    tok = to_model_tokens(hist, V)
    out = np.empty((tok.shape[0], steps), dtype=np.int64)
    for i in range(steps):
        inp, w = (tok, win) if ctx is None else (tok[:, -ctx:], win[:, -ctx:])
        last = model.logits(inp, w, causal=True)[:, -1, :].astype(np.float64)
        if temperature is None:
            nxt = last.argmax(-1)
        else:
            p = np.exp(_log_softmax(last / temperature))
            nxt = np.array([rng.choice(V, p=row / row.sum()) for row in p])
        out[:, i] = nxt
        tok = np.concatenate([tok, nxt[:, None]], axis=1)
        win = np.concatenate([win, win[:, -1:] + 1], axis=1)
    return out[0] if squeeze else out


def ngram_set(seq, n: int, missing: int = MISSING) -> list[tuple]:
    """All n-grams of ``seq`` that contain no unknown location, in order."""
    seq = list(seq)
    return [tuple(seq[i:i + n]) for i in range(len(seq) - n + 1)
            if missing not in seq[i:i + n]]


def ngram_precision(generated, reference, n: int, missing: int = MISSING) -> float | None:
    """Clipped n-gram precision of ``generated`` against ``reference``; None when undefined."""
    generated, reference = list(generated), list(reference)
    if len(generated) != len(reference):
        raise ValueError("generated and reference must have equal length")
    ref_counts = Counter(ngram_set(reference, n, missing))
    if not ref_counts:
        return None
    gen_counts = Counter(ngram_set(generated, n, missing))
    hits = sum(min(gen_counts[s], c) for s, c in ref_counts.items())
    return hits / sum(ref_counts.values())


def top_regions(populations, fraction: float = 0.25) -> np.ndarray:
    pop = np.asarray(populations, dtype=np.float64)
    k = max(1, math.ceil(fraction * len(pop)))
    order = np.lexsort((np.arange(len(pop)), -pop))
    return np.sort(order[:k])


def aggregate_errors(generated, reference, populations, top_fraction: float = 0.25,
                     missing: int = MISSING) -> dict:
    """RMSE and MAPE between per-window region head counts.

    ``generated`` and ``reference`` are (users, windows). A user enters window
    ``t`` only where its reference is known, in both aggregates, so per-window
    totals agree. RMSE covers every region and window; MAPE covers the most
    populous ``top_fraction`` of regions where the reference count is positive.
    """
    gen = np.atleast_2d(np.asarray(generated, dtype=np.int64))
    ref = np.atleast_2d(np.asarray(reference, dtype=np.int64))
    if gen.shape != ref.shape:
        raise ValueError("generated and reference must have the same shape")
    V = len(populations)
    known = ref != missing
    n_win = ref.shape[1]
    gen_counts = np.zeros((n_win, V))
    ref_counts = np.zeros((n_win, V))
    for t in range(n_win):
        k = known[:, t]
        gen_counts[t] = np.bincount(gen[k, t], minlength=V)[:V]
        ref_counts[t] = np.bincount(ref[k, t], minlength=V)[:V]
    diff = gen_counts - ref_counts
    rmse = float(np.sqrt((diff ** 2).mean()))
    top = top_regions(populations, top_fraction)
    r, g = ref_counts[:, top], gen_counts[:, top]
    pos = r > 0
    mape = float((np.abs(g - r)[pos] / r[pos]).mean()) if pos.any() else None
    return {"rmse": rmse, "mape": mape,
            "gen_totals": gen_counts.sum(1), "ref_totals": ref_counts.sum(1)}


def eval_generation(model, test_seqs: Sequence[TrajectorySequence], populations,
                    horizons=(16, 48), start_slot: int = 18, days: Sequence[int] | None = None,
                    model_id: str = "pmt", context_length: int | None = None,
                    origin_epoch: int | None = None, traces: list | None = None
                    ) -> list[MetricsReport]:
    """Generate from ``start_slot`` (09:00) on each day and compare to the observed trajectory.

    n-gram precisions are averaged per user over days, then over users (users
    with no defined precision are dropped). RMSE and MAPE are averaged over days.
    """
    ctx = _context_of(model, context_length)
    predictor = as_predictor(model)
    phase = _phase_offset(predictor)
    tokens, windows = stack_sequences(test_seqs, origin_epoch)
    T = tokens.shape[1]
    starts_all = [t for t in range(1, T) if (windows[0, t] + phase) % WINDOWS_PER_DAY == start_slot]
    reports = []
    for h in horizons:
        starts = [s for s in starts_all if s + h <= T]
        if days is not None:
            starts = [starts[d] for d in days if d < len(starts)]
        per_user = {n: [[] for _ in test_seqs] for n in (2, 3)}
        rmses, mapes = [], []
        for s in starts:
            lo = 0 if ctx is None else max(0, s - ctx)
            gen = generate(predictor, tokens[:, lo:s], windows[:, lo:s], h, ctx)
            ref = tokens[:, s:s + h]
            if traces is not None:
                traces.append({"start": int(s), "horizon": h, "generated": gen.tolist(),
                               "reference": ref.tolist()})
            for u in range(len(test_seqs)):
                for n in (2, 3):
                    p = ngram_precision(gen[u], ref[u], n)
                    if p is not None:
                        per_user[n][u].append(p)
            agg = aggregate_errors(gen, ref, populations)
            rmses.append(agg["rmse"])
            if agg["mape"] is not None:
                mapes.append(agg["mape"])
        metrics = {}
        for n in (2, 3):
            user_means = [np.mean(v) for v in per_user[n] if v]
            metrics[f"{n}-gram"] = float(np.mean(user_means)) if user_means else None
        metrics["rmse"] = float(np.mean(rmses)) if rmses else None
        metrics["mape"] = float(np.mean(mapes)) if mapes else None
        meta = {"n_starts": len(starts), "ngram_average": "macro over users",
                "start_slot": start_slot}
        reports.append(MetricsReport("generation", model_id, f"horizon={h}", metrics, meta))
    return reports
