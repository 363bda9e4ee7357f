"""``pmt`` command line: one subcommand per pipeline stage.

Every stage reads an optional JSON run config (unknown keys are rejected),
applies flag overrides, runs, and writes ``manifest.json`` next to its outputs.
``pmt <stage> --from-manifest DIR/manifest.json --out NEW`` replays a run.

Exit codes: 0 ok, 1 usage error, 2 data or config validation failure,
3 runtime failure. Errors are also written to stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .embed_analysis import (
    distance_correlation, group_similarity, permutation_null, probe_attribute, region_rows,
    similarity_matrix,
)
from .evaluation import (
    eval_fbm_next_location, eval_generation, eval_imputation, eval_next_location, fbm_fit,
    write_reports,
)
from .geo_vocab import RegionVocabulary, build_grid_vocab
from .nn.checkpoint import Checkpoint, CheckpointError
from .nn.config import ModelConfig, TrainingConfig
from .pretrain import TASKS, TrainingDivergedError, train
from .seeding import derive_seed
from .synth import EprParams, emit_records, simulate_population
from .temporal import EncodingSpec, temporal_encoding
from .trajectory import (
    WINDOW_SECONDS, WINDOWS_PER_WEEK, filter_by_occupancy, read_lbs_csv, read_sequences,
    split_users, week_phase, windowize_arrays, write_lbs_csv, write_sequences,
)

log = logging.getLogger("pmt")

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    def __init__(self, message: str, usage: str = ""):
        super().__init__(message)
        self.usage = usage


class ConfigError(ValueError):
    pass


# -- run config ------------------------------------------------------------------

@dataclass
class WorldConfig:
    bbox: list = field(default_factory=lambda: [0.0, 0.0, 5000.0, 5000.0])
    cell_size: float = 500.0


@dataclass
class SynthConfig:
    n_agents: int = 200
    start_epoch: int = 1_578_268_800  # Monday 2020-01-06 00:00 UTC
    days: int = 14
    target_occupancy: float = 0.75
    burst_length: float = 4.0
    arrival_bias: float = 0.0
    emit_records: bool = False
    max_records_per_window: int = 3
    epr: dict = field(default_factory=dict)


@dataclass
class IngestConfig:
    # span defaults to the records' own extent when unset
    start_epoch: int | None = None
    days: int | None = None
    occupancy_threshold: float = 0.5
    train_fraction: float = 2 / 3


@dataclass
class EvalConfig:
    removal_ratios: list = field(default_factory=lambda: [0.5, 0.6, 0.7, 0.8, 0.9])
    horizons: list = field(default_factory=lambda: [16, 48])
    start_slot: int = 18
    traces: bool = False


@dataclass
class AnalysisConfig:
    attributes: list | None = None
    trials: int = 100
    epochs: int = 5
    hidden: int = 64
    batch_size: int = 4
    lr: float = 1e-3
    null_trials: int = 100
    group: str = "B"
    other: str = "A"
    bins: int = 20
    max_pairs: int | None = None


_SECTIONS = {"world": WorldConfig, "synth": SynthConfig, "ingest": IngestConfig,
             "eval": EvalConfig, "analysis": AnalysisConfig}


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str | None = None
    world: WorldConfig = field(default_factory=WorldConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    ingest: IngestConfig = field(default_factory=IngestConfig)
    model: dict = field(default_factory=dict)
    training: dict = field(default_factory=dict)
    eval: EvalConfig = field(default_factory=EvalConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("run config must be a JSON object")
        _reject_unknown(cls, data, "")
        kwargs = {}
        for key, value in data.items():
            if key in _SECTIONS:
                if not isinstance(value, dict):
                    raise ConfigError(f"config section {key!r} must be an object")
                _reject_unknown(_SECTIONS[key], value, key + ".")
                kwargs[key] = _SECTIONS[key](**value)
            else:
                kwargs[key] = value
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.model)

    def training_config(self, task: str) -> TrainingConfig:
        return TrainingConfig.from_dict({**self.training,
                                         "seed": derive_seed(self.seed, "pretrain", task)})

    def epr_params(self) -> EprParams:
        return EprParams(**{k: tuple(v) if isinstance(v, list) else v
                            for k, v in self.synth.epr.items()})

    def validate(self) -> None:
        """Check every section up front so no stage starts on a bad config."""
        try:
            if not isinstance(self.seed, int) or self.seed < 0:
                raise ConfigError("seed must be a non-negative integer")
            if "seed" in self.training:
                raise ConfigError("training.seed is derived from the global seed; set 'seed'")
            self.model_config()
            self.training_config("next")
            _reject_unknown(EprParams, self.synth.epr, "synth.epr.")
            self.epr_params()
            if len(self.world.bbox) != 4 or not self.world.cell_size > 0:
                raise ConfigError("world.bbox needs 4 numbers and world.cell_size must be > 0")
            s = self.synth
            if s.n_agents < 1 or s.days < 1 or not 0 < s.target_occupancy <= 1:
                raise ConfigError("synth needs n_agents >= 1, days >= 1, target_occupancy in (0, 1]")
            if s.start_epoch % WINDOW_SECONDS:
                raise ConfigError("synth.start_epoch must be aligned to 30 minutes")
            g = self.ingest
            if not 0 < g.train_fraction < 1 or not 0 <= g.occupancy_threshold < 1:
                raise ConfigError("ingest.train_fraction must be in (0, 1) and "
                                  "occupancy_threshold in [0, 1)")
            if (g.start_epoch is None) != (g.days is None):
                raise ConfigError("set both ingest.start_epoch and ingest.days, or neither")
            e = self.eval
            if any(not 0 < r < 1 for r in e.removal_ratios) or any(h < 1 for h in e.horizons):
                raise ConfigError("eval.removal_ratios must be in (0, 1) and horizons >= 1")
            a = self.analysis
            if a.trials < 1 or a.null_trials < 1 or a.hidden < 1 or a.bins < 1:
                raise ConfigError("analysis trials, null_trials, hidden and bins must be >= 1")
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


def _reject_unknown(cls, data: dict, prefix: str) -> None:
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config keys: {[prefix + k for k in unknown]}")


def _set_path(data: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = data
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{dotted!r} does not name a config field")
    node[parts[-1]] = value


def _parse_set(item: str) -> tuple[str, object]:
    if "=" not in item:
        raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def resolve_config(args, environ=os.environ) -> RunConfig:
    """File values, then ``PMT_SEED``, then flags; later sources win."""
    data: dict = {}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ConfigError("run config must be a JSON object")
    if environ.get("PMT_SEED") is not None:
        try:
            data["seed"] = int(environ["PMT_SEED"])
        except ValueError as exc:
            raise ConfigError(f"PMT_SEED must be an integer, got {environ['PMT_SEED']!r}") from exc
    for item in args.set or []:
        key, value = _parse_set(item)
        _set_path(data, key, value)
    for dest, path in _FLAG_PATHS.items():
        value = getattr(args, dest, None)
        if value is not None:
            _set_path(data, path, value)
    return RunConfig.from_dict(data)


# flag dest -> config path
_FLAG_PATHS = {
    "seed": "seed",
    "agents": "synth.n_agents",
    "days": "synth.days",
    "epochs": "training.epochs",
    "batch_size": "training.batch_size",
    "context_length": "training.context_length",
    "trials": "analysis.trials",
}


# -- helpers -----------------------------------------------------------------------

def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _require(path: str | None, flag: str) -> Path:
    if path is None:
        raise UsageError(f"{flag} is required")  # kept optional in argparse for manifest replay
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{flag}: {p} does not exist")
    return p


def _load_checkpoint(path: str | None) -> Checkpoint:
    return Checkpoint.load(_require(path, "--checkpoint"))


def _load_sequences(path: str | None, flag: str):
    seqs = read_sequences(_require(path, flag))
    if not seqs:
        raise ConfigError(f"{flag}: no sequences in {path}")
    return seqs


def _write_csv(path: Path, header: list, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


# -- stages ------------------------------------------------------------------------

def cmd_synth(args, cfg: RunConfig, out: Path) -> dict:
    world = build_grid_vocab(tuple(cfg.world.bbox), cfg.world.cell_size,
                             derive_seed(cfg.seed, "world"))
    s = cfg.synth
    span = (s.start_epoch, s.start_epoch + s.days * 86_400)
    seqs = simulate_population(world, cfg.epr_params(), s.n_agents, span,
                               derive_seed(cfg.seed, "synth"), s.target_occupancy,
                               s.burst_length, week_phase(s.start_epoch), s.arrival_bias)
    world.to_csv(out / "regions.csv")
    write_sequences(out / "sequences.txt", seqs)
    files = ["regions.csv", "sequences.txt", "sequences.txt.truth"]
    if s.emit_records:
        recs = emit_records(seqs, world, derive_seed(cfg.seed, "records"),
                            s.max_records_per_window)
        write_lbs_csv(out / "records.csv", recs)
        files.append("records.csv")
    return {"files": files, "n_sequences": len(seqs)}


def cmd_ingest(args, cfg: RunConfig, out: Path) -> dict:
    g = cfg.ingest
    if (args.records is None) == (args.sequences is None):
        raise UsageError("ingest needs exactly one of --records or --sequences")
    if args.records is not None:
        vocab = RegionVocabulary.from_csv(_require(args.regions, "--regions"))
        users, ts, xs, ys = read_lbs_csv(_require(args.records, "--records"))
        if len(ts) == 0:
            raise ConfigError("no records to ingest")
        if g.start_epoch is not None:
            span = (g.start_epoch, g.start_epoch + g.days * 86_400)
        else:
            lo = int(ts.min()) // WINDOW_SECONDS * WINDOW_SECONDS
            span = (lo, (int(ts.max()) // WINDOW_SECONDS + 1) * WINDOW_SECONDS)
        seqs = windowize_arrays(users, ts, xs, ys, span, vocab)
    else:
        seqs = _load_sequences(args.sequences, "--sequences")
    kept = filter_by_occupancy(seqs, g.occupancy_threshold)
    if len(kept) < 2:
        raise ConfigError(f"only {len(kept)} sequences pass occupancy > {g.occupancy_threshold}")
    tr, te = split_users(kept, g.train_fraction, derive_seed(cfg.seed, "split"))
    write_sequences(out / "train.txt", tr)
    write_sequences(out / "test.txt", te)
    stats = {"n_input": len(seqs), "n_kept": len(kept), "n_train": len(tr), "n_test": len(te),
             "occupancy_threshold": g.occupancy_threshold}
    (out / "ingest.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
    return {"files": sorted(p.name for p in out.iterdir() if p.name != "manifest.json"), **stats}


def cmd_pretrain(args, cfg: RunConfig, out: Path) -> dict:
    task = args.task
    if task is None:
        raise UsageError(f"--task is required ({' or '.join(TASKS)})")
    train_seqs = _load_sequences(args.train, "--train")
    eval_seqs = _load_sequences(args.eval, "--eval") if args.eval else None
    init = _load_checkpoint(args.init) if args.init else None
    mc = cfg.model_config()
    if init is not None and init.model_config != mc:
        raise ConfigError(f"--init checkpoint config {init.model_config.to_dict()} does not "
                          f"match run config {mc.to_dict()}")
    tc = cfg.training_config(task)
    origin = min(s.start_epoch for s in train_seqs)
    if init is not None and "origin_epoch" in init.metadata:
        origin = int(init.metadata["origin_epoch"])
    encoding = init.encoding if init is not None else EncodingSpec(mc.D, phase_offset=week_phase(origin))
    try:
        res = train(task, train_seqs, mc, tc, init_checkpoint=init, eval_seqs=eval_seqs,
                    encoding=encoding, out_dir=out, origin_epoch=origin)
    except TrainingDivergedError as exc:
        exc.checkpoint.save(out / f"{task}-diverged-last-good.pmt")
        raise
    return {"files": [p.name for p in res.checkpoint_paths] + [f"{task}-loss.csv"],
            "final_checkpoint": res.checkpoint_paths[-1].name, "steps": len(res.log_rows),
            "training_seed": tc.seed}


def _origin(ckpt: Checkpoint, seqs) -> int:
    return int(ckpt.metadata.get("origin_epoch", min(s.start_epoch for s in seqs)))


def cmd_eval_next(args, cfg: RunConfig, out: Path) -> dict:
    ckpt = _load_checkpoint(args.checkpoint)
    test = _load_sequences(args.test, "--test")
    origin = _origin(ckpt, test)
    reports = eval_next_location(ckpt, test, model_id="pmt", origin_epoch=origin)
    fbm = fbm_fit(test, ckpt.model_config.V_out, ckpt.encoding.phase_offset,
                  origin_epoch=origin)
    reports += eval_fbm_next_location(fbm, test)
    write_reports(reports, out / "next_location.csv", out / "next_location.json")
    return {"files": ["next_location.csv", "next_location.json"]}


def cmd_eval_impute(args, cfg: RunConfig, out: Path) -> dict:
    ckpt = _load_checkpoint(args.checkpoint)
    test = _load_sequences(args.test, "--test")
    reports = eval_imputation(ckpt, test, tuple(cfg.eval.removal_ratios),
                              seed=derive_seed(cfg.seed, "impute"),
                              origin_epoch=_origin(ckpt, test))
    write_reports(reports, out / "imputation.csv", out / "imputation.json")
    return {"files": ["imputation.csv", "imputation.json"]}


def cmd_eval_generate(args, cfg: RunConfig, out: Path) -> dict:
    ckpt = _load_checkpoint(args.checkpoint)
    test = _load_sequences(args.test, "--test")
    vocab = RegionVocabulary.from_csv(_require(args.regions, "--regions"))
    if vocab.n_regions != ckpt.model_config.V_out:
        raise ConfigError(f"{vocab.n_regions} regions but the checkpoint predicts "
                          f"{ckpt.model_config.V_out}")
    traces = [] if cfg.eval.traces else None
    reports = eval_generation(ckpt, test, vocab.populations(), tuple(cfg.eval.horizons),
                              cfg.eval.start_slot, origin_epoch=_origin(ckpt, test),
                              traces=traces)
    write_reports(reports, out / "generation.csv", out / "generation.json")
    files = ["generation.csv", "generation.json"]
    if traces is not None:
        (out / "generation_traces.json").write_text(json.dumps(traces) + "\n")
        files.append("generation_traces.json")
    return {"files": files}


def cmd_analyze_embed(args, cfg: RunConfig, out: Path) -> dict:
    ckpt = _load_checkpoint(args.checkpoint)
    vocab = RegionVocabulary.from_csv(_require(args.regions, "--regions"))
    V = ckpt.model_config.V_out
    if vocab.n_regions != V:
        raise ConfigError(f"{vocab.n_regions} regions but the checkpoint has {V}")
    a = cfg.analysis
    E = region_rows(ckpt.params["spatial_embedding"], V)
    sims = similarity_matrix(E)
    pearson, spearman = distance_correlation(sims, vocab.centroids(), a.max_pairs,
                                             derive_seed(cfg.seed, "pairs"))
    _write_csv(out / "embed_correlation.csv", ["statistic", "value"],
               [["pearson", _fmt(pearson)], ["spearman", _fmt(spearman)],
                ["n_regions", V]])
    files = ["embed_correlation.csv"]
    labels = vocab.group_labels()
    try:
        gs = group_similarity(sims, labels, a.group, a.other, a.bins)
    except ValueError as exc:
        log.warning("group similarity skipped: %s", exc)
        gs = None
    if gs is not None:
        rows = [[_fmt(float(lo)), _fmt(float(hi)), int(w), int(c)]
                for lo, hi, w, c in zip(gs.bin_edges[:-1], gs.bin_edges[1:],
                                        gs.within_hist, gs.cross_hist)]
        _write_csv(out / "similarity_hist.csv",
                   ["bin_lo", "bin_hi", f"within_{a.group}", f"{a.group}_x_{a.other}"], rows)
        files.append("similarity_hist.csv")
    names = a.attributes if a.attributes is not None else vocab.attribute_names()
    probe = {"group_similarity": None if gs is None else {
        "within_mean": gs.within_mean, "cross_mean": gs.cross_mean,
        "ranksum_statistic": gs.ranksum_statistic, "ranksum_pvalue": gs.ranksum_pvalue},
        "attributes": {}}
    kw = dict(epochs=a.epochs, hidden=a.hidden, batch_size=a.batch_size, lr=a.lr)
    for name in names:
        try:
            values = vocab.attribute(name)
        except KeyError as exc:
            raise ConfigError(f"unknown attribute {name!r}") from exc
        res = probe_attribute(E, values, trials=a.trials, seed=derive_seed(cfg.seed, "probe", name),
                              **kw)
        null = permutation_null(E, values, trials=a.null_trials,
                                seed=derive_seed(cfg.seed, "null", name), **kw)
        probe["attributes"][name] = {
            "r2_mean": res.mean, "r2_std": res.std, "null_mean": null.mean,
            "null_p95": float(np.percentile(null.r2, 95)), "metadata": res.metadata}
    (out / "probe.json").write_text(json.dumps(probe, indent=2, sort_keys=True) + "\n")
    files.append("probe.json")
    return {"files": files, "pearson": pearson, "spearman": spearman}


def cmd_encode_dump(args, cfg: RunConfig, out: Path) -> dict:
    if args.checkpoint:
        spec = _load_checkpoint(args.checkpoint).encoding
    else:
        D = args.D if args.D is not None else cfg.model_config().D
        spec = EncodingSpec(D, phase_offset=args.phase_offset)
    if args.windows < 1:
        raise ConfigError("--windows must be >= 1")
    idx = np.arange(args.start, args.start + args.windows)
    te = temporal_encoding(idx, spec)
    header = ["window"] + [f"d{j}" for j in range(spec.D)]
    _write_csv(out / "temporal_encoding.csv", header,
               ([int(w)] + [repr(float(v)) for v in row] for w, row in zip(idx, te)))
    return {"files": ["temporal_encoding.csv"], "encoding": spec.to_dict()}


def cmd_ckpt_info(args, cfg: RunConfig, out: Path | None) -> dict:
    ckpt = _load_checkpoint(args.checkpoint)
    if args.json:
        info = {"model_config": ckpt.model_config.to_dict(), "encoding": ckpt.encoding.to_dict(),
                "metadata": ckpt.metadata,
                "optimizer_step": None if ckpt.optimizer is None else ckpt.optimizer.step,
                "tensors": {k: list(v.shape) for k, v in ckpt.params.items()},
                "parameters": int(sum(v.size for v in ckpt.params.values()))}
        print(json.dumps(info, indent=2, sort_keys=True))
    else:
        print(ckpt.describe())
    return {"files": []}


_COMMANDS = {
    "synth": cmd_synth, "ingest": cmd_ingest, "pretrain": cmd_pretrain,
    "eval-next": cmd_eval_next, "eval-impute": cmd_eval_impute,
    "eval-generate": cmd_eval_generate, "analyze-embed": cmd_analyze_embed,
    "encode-dump": cmd_encode_dump, "ckpt-info": cmd_ckpt_info,
}
_OUT_OPTIONAL = {"ckpt-info"}
# argument dests that are file paths; stored absolute in the manifest
_PATH_ARGS = ("records", "sequences", "regions", "train", "eval", "init", "checkpoint", "test")


# -- parser ------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message, self.format_usage())


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--out", help="output directory (falls back to config out_dir)")
    common.add_argument("--seed", type=int, help="global seed; overrides PMT_SEED and the config")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config field, e.g. training.epochs=3 (repeatable)")
    common.add_argument("--threads", type=int, default=1, help="cap on BLAS threads")
    common.add_argument("--from-manifest", help="replay the run recorded in a manifest.json")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="pmt", description="Pretrained mobility transformer pipeline.")
    parser.add_argument("--version", action="version", version=f"pmt {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", parents=[common], help="simulate a synthetic world and agents")
    p.add_argument("--agents", type=int)
    p.add_argument("--days", type=int)

    p = sub.add_parser("ingest", parents=[common], help="windowize, filter and split users")
    p.add_argument("--records", help="LBS CSV: user_id,timestamp,x,y")
    p.add_argument("--regions", help="regions CSV (needed with --records)")
    p.add_argument("--sequences", help="already windowized sequence file")

    p = sub.add_parser("pretrain", parents=[common], help="train the next or mask task")
    p.add_argument("--task", choices=TASKS)
    p.add_argument("--train")
    p.add_argument("--eval")
    p.add_argument("--init", help="checkpoint to start from")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--context-length", type=int)

    for name, help_text in (("eval-next", "next-location accuracy against FBM"),
                            ("eval-impute", "imputation accuracy by removal ratio")):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("--checkpoint")
        p.add_argument("--test")

    p = sub.add_parser("eval-generate", parents=[common], help="n-gram precision, RMSE, MAPE")
    p.add_argument("--checkpoint")
    p.add_argument("--test")
    p.add_argument("--regions")

    p = sub.add_parser("analyze-embed", parents=[common], help="embedding geography and probe")
    p.add_argument("--checkpoint")
    p.add_argument("--regions")
    p.add_argument("--trials", type=int)

    p = sub.add_parser("encode-dump", parents=[common], help="temporal encoding matrix as CSV")
    p.add_argument("--D", type=int)
    p.add_argument("--checkpoint")
    p.add_argument("--start", type=int, default=0)
    p.add_argument("--windows", type=int, default=WINDOWS_PER_WEEK)
    p.add_argument("--phase-offset", type=int, default=0)

    p = sub.add_parser("ckpt-info", parents=[common], help="print checkpoint config and tensors")
    p.add_argument("--checkpoint")
    p.add_argument("--json", action="store_true")
    return parser



# -- manifest ----------------------------------------------------------------------

_NON_REPLAY = {"config", "out", "set", "from_manifest", "verbose", "command"} | set(_FLAG_PATHS)


def _replay_args(args) -> dict:
    rec = {}
    for k, v in vars(args).items():
        if k in _NON_REPLAY:
            continue
        if k in _PATH_ARGS and v is not None:
            v = str(Path(v).resolve())
        rec[k] = v
    return rec


def write_manifest(out: Path, command: str, args, cfg: RunConfig, result: dict) -> Path:
    inputs = {k: {"path": v, "sha256": _sha256(Path(v))}
              for k, v in _replay_args(args).items() if k in _PATH_ARGS and v is not None}
    outputs = {name: _sha256(out / name) for name in result.get("files", [])
               if (out / name).exists()}
    manifest = {
        "pmt_version": __version__,
        "command": command,
        "args": _replay_args(args),
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "sub_seeds": _sub_seeds(command, args, cfg),
        "inputs": inputs,
        "outputs": outputs,
        "summary": {k: v for k, v in result.items() if k != "files"},
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _sub_seeds(command: str, args, cfg: RunConfig) -> dict:
    s = cfg.seed
    if command == "synth":
        return {"world": derive_seed(s, "world"), "synth": derive_seed(s, "synth"),
                "records": derive_seed(s, "records")}
    if command == "ingest":
        return {"split": derive_seed(s, "split")}
    if command == "pretrain":
        return {"pretrain": derive_seed(s, "pretrain", args.task)}
    if command == "eval-impute":
        return {"impute": derive_seed(s, "impute")}
    if command == "analyze-embed":
        return {"pairs": derive_seed(s, "pairs"), "probe": "derive_seed(seed, 'probe', attribute)",
                "null": "derive_seed(seed, 'null', attribute)"}
    return {}


def _load_manifest(path: str, command: str, args) -> tuple[argparse.Namespace, RunConfig]:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"--from-manifest: {p} does not exist")
    try:
        m = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
    if m.get("command") != command:
        raise ConfigError(f"manifest records command {m.get('command')!r}, not {command!r}")
    replay = argparse.Namespace(**{**vars(args), **m["args"]})
    for k, info in m.get("inputs", {}).items():
        if Path(info["path"]).exists() and _sha256(Path(info["path"])) != info["sha256"]:
            log.warning("input %s changed since the manifest was written", info["path"])
    return replay, RunConfig.from_dict(m["config"])


# -- entry point -------------------------------------------------------------------

def _emit_error(code: int, kind: str, exc: BaseException) -> int:
    err = {"error": {"exit_code": code, "kind": kind, "type": type(exc).__name__,
                     "message": str(exc)}}
    print(json.dumps(err), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:  # --help and --version
            return int(exc.code or 0)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        if args.from_manifest:
            args, cfg = _load_manifest(args.from_manifest, args.command, args)
        else:
            cfg = resolve_config(args)
        out_dir = args.out or cfg.out_dir
        if out_dir is None and args.command not in _OUT_OPTIONAL:
            raise UsageError("an output directory is required (--out or out_dir in the config)",
                             parser.format_usage())
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        out = Path(out_dir) if out_dir is not None else None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
        with threadpool_limits(limits=args.threads):
            result = _COMMANDS[args.command](args, cfg, out)
        if out is not None:
            write_manifest(out, args.command, args, cfg, result)
        return EXIT_OK
    except UsageError as exc:
        if exc.usage:
            sys.stderr.write(exc.usage)
        return _emit_error(EXIT_USAGE, "usage", exc)
    except (ConfigError, CheckpointError, FileNotFoundError, KeyError, ValueError) as exc:
        return _emit_error(EXIT_VALIDATION, "validation", exc)
    except Exception as exc:  # noqa: BLE001  anything else is a runtime failure
        log.debug("runtime failure", exc_info=True)
        return _emit_error(EXIT_RUNTIME, "runtime", exc)


if __name__ == "__main__":
    sys.exit(main())
