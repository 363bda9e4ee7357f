"""Raw location records to fixed-window token sequences.

In memory and on disk an unobserved window is ``MISSING = -1``; the model layer
maps it to the vocabulary's MISSING token id.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geo_vocab import RegionVocabulary, assign_regions
from .seeding import rng_for

MISSING = -1
WINDOW_MINUTES = 30
WINDOW_SECONDS = WINDOW_MINUTES * 60
WINDOWS_PER_DAY = 48
WINDOWS_PER_WEEK = 7 * WINDOWS_PER_DAY
MONDAY_EPOCH = 345_600  # 1970-01-05 00:00 UTC


def week_phase(epoch: int) -> int:
    """Windows between the Monday 00:00 UTC preceding ``epoch`` and ``epoch``."""
    return int((int(epoch) - MONDAY_EPOCH) // WINDOW_SECONDS % WINDOWS_PER_WEEK)


@dataclass(frozen=True)
class LbsRecord:
    user_id: str
    timestamp: int
    x: float
    y: float


@dataclass
class TrajectorySequence:
    user_id: str
    start_epoch: int
    tokens: np.ndarray
    window_minutes: int = WINDOW_MINUTES
    truth: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.truth is not None:
            self.truth = np.asarray(self.truth, dtype=np.int64)
            if self.truth.shape != self.tokens.shape:
                raise ValueError("truth and tokens differ in length")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def observed(self) -> np.ndarray:
        return self.tokens != MISSING

    def window_indices(self, origin_epoch: int | None = None) -> np.ndarray:
        """Absolute window indices, counted from ``origin_epoch`` (default: own start)."""
        origin = self.start_epoch if origin_epoch is None else origin_epoch
        first = (self.start_epoch - origin) // (self.window_minutes * 60)
        return first + np.arange(len(self.tokens), dtype=np.int64)


def _check_span(span: tuple[int, int]) -> tuple[int, int]:
    start, end = int(span[0]), int(span[1])
    if end <= start:
        raise ValueError(f"empty span {span}")
    if (end - start) % WINDOW_SECONDS or start % WINDOW_SECONDS:
        raise ValueError(f"span {span} is not aligned to {WINDOW_MINUTES}-minute windows")
    return start, end


def windowize_arrays(user_ids: Sequence, timestamps, xs, ys, span: tuple[int, int],
                     vocab: RegionVocabulary) -> list[TrajectorySequence]:
    """Columnar form of :func:`windowize`."""
    start, end = _check_span(span)
    n_windows = (end - start) // WINDOW_SECONDS
    users = np.asarray([str(u) for u in user_ids], dtype=object)
    ts = np.asarray(timestamps, dtype=np.int64)
    if len(users) == 0:
        return []
    in_span = (ts >= start) & (ts < end)
    tokens = assign_regions(xs, ys, vocab)
    keep = in_span & (tokens >= 0)

    user_names = sorted(set(users[in_span].tolist()))
    user_idx = {u: i for i, u in enumerate(user_names)}
    grid = np.full((len(user_names), n_windows), MISSING, dtype=np.int64)

    idx = np.flatnonzero(keep)
    if idx.size:
        u = np.array([user_idx[x] for x in users[idx]], dtype=np.int64)
        w = (ts[idx] - start) // WINDOW_SECONDS
        # ties on timestamp fall back to input order, so the later record wins
        order = np.lexsort((idx, ts[idx], w, u))
        u, w, tok = u[order], w[order], tokens[idx][order]
        last = np.ones(len(u), dtype=bool)
        last[:-1] = (u[1:] != u[:-1]) | (w[1:] != w[:-1])
        grid[u[last], w[last]] = tok[last]
    return [TrajectorySequence(name, start, grid[i]) for i, name in enumerate(user_names)]


def windowize(records: Iterable[LbsRecord], span: tuple[int, int],
              vocab: RegionVocabulary) -> list[TrajectorySequence]:
    """One sequence per user holding the last region seen in each 30-minute window.

    Records outside the grid are dropped; windows without records are MISSING.
    """
    records = list(records)
    _check_span(span)
    if not records:
        return []
    return windowize_arrays(
        [r.user_id for r in records], [r.timestamp for r in records],
        [r.x for r in records], [r.y for r in records], span, vocab)


def temporal_occupancy(seq: TrajectorySequence | np.ndarray) -> float:
    tokens = seq.tokens if isinstance(seq, TrajectorySequence) else np.asarray(seq)
    if len(tokens) == 0:
        raise ValueError("temporal occupancy of an empty sequence is undefined")
    return float(np.count_nonzero(tokens != MISSING)) / len(tokens)


def filter_by_occupancy(seqs: Iterable[TrajectorySequence],
                        min_occ: float = 0.5) -> list[TrajectorySequence]:
    """Keep sequences whose occupancy is strictly greater than ``min_occ``."""
    return [s for s in seqs if temporal_occupancy(s) > min_occ]


def split_users(seqs: Sequence[TrajectorySequence], train_fraction: float = 2 / 3,
                seed: int = 0) -> tuple[list[TrajectorySequence], list[TrajectorySequence]]:
    """User-disjoint (pretrain, test) partition, deterministic in ``seed``."""
    ids = [s.user_id for s in seqs]
    if len(set(ids)) != len(ids):
        raise ValueError("each user must contribute exactly one sequence")
    if not 0.0 <= train_fraction <= 1.0:
        raise ValueError(f"train_fraction out of range: {train_fraction}")
    n_train = int(round(len(seqs) * train_fraction))
    perm = rng_for(seed, "split_users").permutation(len(seqs))
    train_idx = np.sort(perm[:n_train])
    test_idx = np.sort(perm[n_train:])
    return [seqs[i] for i in train_idx], [seqs[i] for i in test_idx]


# -- file formats ------------------------------------------------------------

def read_lbs_csv(path: str | Path) -> tuple[list[str], np.ndarray, np.ndarray, np.ndarray]:
    """Read ``user_id,timestamp,x,y`` records as columns."""
    users, ts, xs, ys = [], [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if [h.strip() for h in header] != ["user_id", "timestamp", "x", "y"]:
            raise ValueError(f"unexpected LBS header {header}")
        for row in reader:
            if not row:
                continue
            users.append(row[0])
            ts.append(int(row[1]))
            xs.append(float(row[2]))
            ys.append(float(row[3]))
    return users, np.array(ts, dtype=np.int64), np.array(xs), np.array(ys)


def write_lbs_csv(path: str | Path, records: Iterable[LbsRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user_id", "timestamp", "x", "y"])
        for r in records:
            w.writerow([r.user_id, int(r.timestamp), repr(float(r.x)), repr(float(r.y))])


def format_sequence(user_id: str, start_epoch: int, tokens) -> str:
    return f"{user_id}|{int(start_epoch)}|" + ",".join(str(int(t)) for t in tokens)


def parse_sequence(line: str) -> TrajectorySequence:
    user_id, start, body = line.rstrip("\n").split("|")
    tokens = np.array([int(t) for t in body.split(",")] if body else [], dtype=np.int64)
    if np.any(tokens < MISSING):
        raise ValueError(f"invalid token in sequence for user {user_id}")
    return TrajectorySequence(user_id, int(start), tokens)


def write_sequences(path: str | Path, seqs: Iterable[TrajectorySequence],
                    truth: bool = True) -> None:
    """Write the ``user|start|tokens`` file; thinned sequences get a ``.truth`` sidecar."""
    seqs = list(seqs)
    path = Path(path)
    path.write_text("".join(format_sequence(s.user_id, s.start_epoch, s.tokens) + "\n"
                            for s in seqs))
    if truth and seqs and all(s.truth is not None for s in seqs):
        Path(str(path) + ".truth").write_text(
            "".join(format_sequence(s.user_id, s.start_epoch, s.truth) + "\n" for s in seqs))


def read_sequences(path: str | Path, truth: bool = True) -> list[TrajectorySequence]:
    path = Path(path)
    seqs = [parse_sequence(line) for line in path.read_text().splitlines() if line.strip()]
    sidecar = Path(str(path) + ".truth")
    if truth and sidecar.exists():
        by_user = {t.user_id: t for t in read_sequences(sidecar, truth=False)}
        for s in seqs:
            t = by_user.get(s.user_id)
            if t is not None:
                s.truth = t.tokens
    return seqs
