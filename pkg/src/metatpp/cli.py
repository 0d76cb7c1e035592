"""Command-line entry point: train, evaluate, predict, simulate, gen-synth.

Exit codes: 0 ok, 1 usage, 2 data error, 3 numeric abort.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import data
from .baselines import (HawkesFitConfig, HawkesModel, HppBaseline, NnippConfig, NnippModel,
                        hawkes_expected_counts, hawkes_fit)
from .checkpoint import Checkpoint, CheckpointError, checkpoint_from_model, fingerprint, model_from_checkpoint
from .encoder import EncoderConfig, EventSequence
from .evalsim import (BoundViolation, SynthTaskSpec, evaluate, gen_synth_tasks, probe_bound, rng_stream,
                      thinning_sample)
from .intensity import IntensityModel, ModelConfig
from .metatrain import Episode, TrainConfig, TrainingDiverged, predict_intensity_curve, split_episode, train

log = logging.getLogger("metatpp")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
MODEL_KINDS = ("proposed", "nnipp", "hawkes")


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class RunConfig:
    """Flat ``key = value`` run description; relative paths resolve against the file's directory."""

    manifest: str
    out_dir: str = "run"
    model: str = "proposed"
    # optimisation
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    batch_size: int = 32
    epochs: int = 100
    seed: int = 0
    # architecture
    use_periodic: bool = True
    use_context: bool = True
    mnn_width: int = 512
    mnn_depth: int = 2
    mnn_time_unit: float = 1.0
    time_scale: float = 0.0  # 0 means T_e
    lstm_hidden: int = 128
    support_dim: int = 128
    task_dim: int = 128
    fusion_layers: int = 2
    fusion_units: int = 128
    bidirectional: bool = True
    hawkes_kernels: int = 1
    hawkes_steps: int = 1000
    base_dir: str = "."

    def __post_init__(self):
        if self.model not in MODEL_KINDS:
            raise data.DataError(f"model must be one of {MODEL_KINDS}, got {self.model!r}")
        for name in ("mnn_width", "mnn_depth", "lstm_hidden", "support_dim", "task_dim", "fusion_units"):
            if getattr(self, name) < 1:
                raise data.DataError(f"{name} must be >= 1")
        if self.fusion_layers < 0 or self.time_scale < 0:
            raise data.DataError("fusion_layers and time_scale must be >= 0")
        if not 1 <= self.hawkes_kernels <= 4:
            raise data.DataError("hawkes_kernels must be in 1..4")
        self.train_config()  # validates optimiser fields

    @classmethod
    def load(cls, path, overrides=()):
        path = Path(path)
        values = data.parse_kv(path.read_text(encoding="utf-8"), str(path))
        for item in overrides:
            if "=" not in item:
                raise UsageError(f"--set expects key=value, got {item!r}")
            k, v = item.split("=", 1)
            values[k.strip()] = v.strip()
        if "base_dir" in values:
            raise data.DataError(f"{path}: unknown keys ['base_dir']")
        values["base_dir"] = str(path.parent)
        return data.kv_to_dataclass(cls, values, str(path))

    def resolve(self, p):
        p = Path(p)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def train_config(self):
        try:
            return TrainConfig(self.lr, self.beta1, self.beta2, self.eps, self.weight_decay,
                               self.batch_size, self.epochs, self.seed)
        except ValueError as e:
            raise data.DataError(str(e)) from None

    def model_config(self, manifest: data.DatasetManifest, context_dim: int):
        enc = EncoderConfig(self.lstm_hidden, self.support_dim, context_dim if self.use_context else 0,
                            self.task_dim, self.fusion_layers, self.fusion_units, self.bidirectional)
        return ModelConfig(manifest.periods if self.use_periodic else (), self.mnn_width, self.mnn_depth,
                           self.time_scale or manifest.T_e, self.mnn_time_unit, enc)

    def nnipp_config(self):
        return NnippConfig(self.mnn_width, self.mnn_depth, self.mnn_time_unit)


def strip_context(episodes):
    return [Episode(ep.support, ep.query, np.zeros(0), ep.T_c, ep.T_e, ep.task_id) for ep in episodes]


def _hex_list(a):
    return [float(x).hex() for x in np.asarray(a, dtype=np.float64).reshape(-1)]


def _from_hex(items):
    return np.array([float.fromhex(x) for x in items])


# ---------------------------------------------------------------- commands

def build_model(cfg: RunConfig, manifest, context_dim):
    if cfg.model == "proposed":
        return IntensityModel(cfg.model_config(manifest, context_dim), seed=cfg.seed)
    return NnippModel(cfg.nnipp_config(), seed=cfg.seed)


def cmd_train(args):
    cfg = RunConfig.load(args.config, args.set or ())
    manifest = data.DatasetManifest.load(cfg.resolve(cfg.manifest))
    res = data.ingest(manifest)
    train_eps, val_eps = res.episodes["train"], res.episodes["val"]
    if not train_eps:
        raise data.DataError("training split is empty after filtering")
    out = cfg.resolve(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "excluded.txt").write_text("".join(f"{t}\n" for t in res.excluded), encoding="utf-8")
    extra = {"T_c": manifest.T_c, "T_e": manifest.T_e,
             "context_mean": _hex_list(res.context_mean), "context_std": _hex_list(res.context_std),
             "use_context": cfg.use_context, "excluded": len(res.excluded)}

    if cfg.model == "hawkes":
        fit_cfg = HawkesFitConfig(steps=cfg.hawkes_steps)
        model = hawkes_fit([ep.events for ep in train_eps], manifest.T_e, cfg.hawkes_kernels, fit_cfg)
        ck = Checkpoint("hawkes", {"n_kernels": cfg.hawkes_kernels, "steps": cfg.hawkes_steps},
                        model.state(), extra=extra)
        ck.save(out / "checkpoint.bin")
        print(f"wrote {out / 'checkpoint.bin'}")
        return EXIT_OK

    k = res.context_mean.size
    if not cfg.use_context or cfg.model == "nnipp":
        train_eps, val_eps = strip_context(train_eps), strip_context(val_eps)
        k = 0
    model = build_model(cfg, manifest, k)
    log_path = out / "train_log.csv"
    with open(log_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "val_nll"])

        def on_epoch(rec):
            writer.writerow([rec.epoch, repr(rec.train_loss), repr(rec.val_nll)])
            fh.flush()

        result = train(model, train_eps, val_eps, cfg.train_config(), on_epoch=on_epoch)
    extra["best_epoch"] = result.best_epoch
    ck = checkpoint_from_model(model, result.best_val_nll, result.best_epoch, extra)
    ck.save(out / "checkpoint.bin")
    print(f"best epoch {result.best_epoch} val_nll {result.best_val_nll:.6f}; wrote {out / 'checkpoint.bin'}")
    return EXIT_OK


def _episodes_for(ck: Checkpoint, episodes):
    if ck.model_kind == "nnipp" or not ck.extra.get("use_context", True):
        return strip_context(episodes)
    return episodes


def _check_config(ck: Checkpoint, config_path, overrides, manifest):
    cfg = RunConfig.load(config_path, overrides or ())
    if cfg.model != ck.model_kind:
        raise CheckpointError(f"config model {cfg.model!r} does not match checkpoint kind {ck.model_kind!r}")
    if cfg.model == "proposed":
        k = len(ck.extra.get("context_mean", []))
        expected = fingerprint("proposed", cfg.model_config(manifest, k).to_dict())
    elif cfg.model == "nnipp":
        from dataclasses import asdict
        expected = fingerprint("nnipp", asdict(cfg.nnipp_config()))
    else:
        expected = fingerprint("hawkes", {"n_kernels": cfg.hawkes_kernels, "steps": cfg.hawkes_steps})
    if expected != ck.fingerprint:
        raise CheckpointError(f"config fingerprint {expected} does not match checkpoint {ck.fingerprint}")


def cmd_evaluate(args):
    manifest = data.DatasetManifest.load(args.manifest)
    res = data.ingest(manifest)
    episodes = res.episodes[args.split]
    if not episodes:
        raise data.DataError(f"split {args.split!r} is empty after filtering")
    expected_fn = None
    if args.baseline == "hpp":
        model = HppBaseline()
    elif args.checkpoint is None:
        raise UsageError("evaluate needs --checkpoint unless --baseline hpp is given")
    else:
        ck = Checkpoint.load(args.checkpoint)
        if args.config:
            _check_config(ck, args.config, args.set, manifest)
        if args.baseline and ck.model_kind != args.baseline:
            raise CheckpointError(f"checkpoint holds a {ck.model_kind!r} model, not {args.baseline!r}")
        if ck.model_kind == "proposed" and len(ck.extra.get("context_mean", [])) != res.context_mean.size:
            raise CheckpointError("checkpoint context dimension does not match the dataset")
        model = model_from_checkpoint(ck)
        episodes = _episodes_for(ck, episodes)
        if isinstance(model, HawkesModel):
            def expected_fn(ep, edges):
                return hawkes_expected_counts(model, ep, edges, args.replicates, seed=args.seed)
    report = evaluate(model, episodes, args.bins, expected_fn)
    report.write_csv(args.out)
    print(f"{len(report.task_ids)} tasks  mean NLL {report.mean_nll:.6f}  mean MSE {report.mean_mse:.6f}")
    return EXIT_OK


def _parse_context(text, ck: Checkpoint):
    mean = _from_hex(ck.extra.get("context_mean", []))
    std = _from_hex(ck.extra.get("context_std", []))
    if text is None:
        if mean.size and ck.extra.get("use_context", True) and ck.model_kind == "proposed":
            raise data.DataError(f"model expects a {mean.size}-dim context (--context)")
        return np.zeros(0)
    try:
        g = np.array([float(v) for v in text.split(",") if v.strip()])
    except ValueError:
        raise data.DataError(f"--context must be comma-separated numbers, got {text!r}") from None
    if g.size != mean.size:
        raise data.DataError(f"--context has {g.size} values, model expects {mean.size}")
    if ck.model_kind != "proposed" or not ck.extra.get("use_context", True):
        return np.zeros(0)
    return (g - mean) / std


def cmd_predict(args):
    ck = Checkpoint.load(args.checkpoint)
    if ck.model_kind == "hawkes":
        raise UsageError("predict supports proposed and nnipp checkpoints")
    model = model_from_checkpoint(ck)
    T_c = args.T_c if args.T_c is not None else ck.extra.get("T_c")
    T_e = args.T_e if args.T_e is not None else ck.extra.get("T_e")
    if T_c is None or T_e is None:
        raise UsageError("T_c/T_e unknown; pass --T-c and --T-e")
    events = data.read_events_csv(args.events)
    if args.task_id is None:
        if len(events) != 1:
            raise UsageError("events file holds several tasks; choose one with --task-id")
        (tid, ts), = events.items()
    elif args.task_id not in events:
        raise data.DataError(f"task {args.task_id!r} not in {args.events}")
    else:
        tid, ts = args.task_id, events[args.task_id]
    late = ts[ts > T_c]
    if late.size:
        raise data.DataError(f"event at t={float(late[0])!r} lies beyond T_c={T_c}; only support events are accepted")
    if args.resolution < 1:
        raise UsageError("--resolution must be >= 1")
    ep = split_episode(EventSequence(ts, tid), _parse_context(args.context, ck), T_c, T_e, tid)
    grid = np.linspace(T_c, T_e, args.resolution + 1)
    curve = predict_intensity_curve(ep, model, grid)
    cum = model.conditioned(ep).cumulative(grid)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "lambda", "expected_cum"])
        for (t, lam), c in zip(curve, cum - cum[0]):
            w.writerow([repr(float(t)), repr(float(lam)), repr(float(c))])
    print(f"wrote {args.resolution + 1} rows to {args.out}")
    return EXIT_OK


def _simulate_checkpoint(args):
    if args.manifest is None:
        raise UsageError("simulating from a checkpoint needs --manifest for the support sets")
    ck = Checkpoint.load(args.checkpoint)
    model = model_from_checkpoint(ck)
    res = data.ingest(data.DatasetManifest.load(args.manifest))
    episodes = _episodes_for(ck, res.episodes[args.split])
    rows = []
    for i, ep in enumerate(episodes):
        if isinstance(model, HawkesModel):
            from .baselines import simulate_hawkes
            sim = [simulate_hawkes(model, ep.T_c, ep.T_e, rng_stream(args.seed, i, r), ep.support.timestamps)
                   for r in range(args.replicates)]
            sim = [s.timestamps for s in sim]
        else:
            task = model.conditioned(ep)
            n_windows = max(1, int(np.ceil((ep.T_e - ep.T_c) / 6.0)))
            sim = [thinning_sample(task.intensity, lambda a, b: probe_bound(task.intensity, a, b),
                                   ep.T_c, ep.T_e, seed=rng_stream(args.seed, i, r),
                                   n_windows=n_windows).timestamps for r in range(args.replicates)]
        for r, q in enumerate(sim):
            q = q[q > ep.T_c]
            rows.append((f"{ep.task_id}_r{r}", np.concatenate([ep.support.timestamps, q])))
    return rows


def _load_spec(path, seed=None):
    values = data.parse_kv(Path(path).read_text(encoding="utf-8"), str(path))
    spec = data.kv_to_dataclass(SynthTaskSpec, values, str(path))
    if seed is not None:
        spec = replace(spec, seed=seed)
    bad = spec.problems()
    if bad:
        raise data.DataError("invalid synthetic spec: " + "; ".join(bad))
    return spec


def cmd_simulate(args):
    if (args.checkpoint is None) == (args.spec is None):
        raise UsageError("give exactly one of --checkpoint or --spec")
    if args.replicates < 1:
        raise UsageError("--replicates must be >= 1")
    if args.checkpoint is not None:
        rows = _simulate_checkpoint(args)
    else:
        spec = _load_spec(args.spec, args.seed)
        rows = []
        for r in range(args.replicates):
            rows += [(f"{seq.task_id}_r{r}", seq.timestamps) for seq, _, _ in gen_synth_tasks(spec, r)]
    data.write_events_csv(args.out, rows)
    print(f"wrote {len(rows)} sequences to {args.out}")
    return EXIT_OK


def write_synth_dataset(spec: SynthTaskSpec, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tasks = gen_synth_tasks(spec)
    labels = data.split_assignment(len(tasks), spec.seed)
    data.write_events_csv(out / "events.csv", [(seq.task_id, seq.timestamps) for seq, _, _ in tasks])
    data.write_contexts_csv(out / "contexts.csv", [(seq.task_id, g) for seq, g, _ in tasks])
    data.write_splits_csv(out / "splits.csv", {seq.task_id: lab for (seq, _, _), lab in zip(tasks, labels)})
    with open(out / "generator.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["task_id", "rate", "depth", "phase", "slope"])
        for seq, _, p in tasks:
            w.writerow([seq.task_id] + [repr(float(p[k])) for k in ("rate", "depth", "phase", "slope")])
    manifest = data.DatasetManifest("events.csv", "splits.csv", "contexts.csv", spec.T_c, spec.T_e,
                                    "hours", (spec.period,), "absolute")
    manifest.save(out / "manifest.txt")
    return out / "manifest.txt"


def cmd_gen_synth(args):
    spec = _load_spec(args.spec, args.seed) if args.spec else SynthTaskSpec(
        seed=args.seed if args.seed is not None else 0)
    path = write_synth_dataset(spec, args.out)
    print(f"wrote {spec.n_tasks} tasks; manifest {path}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser():
    p = _Parser(prog="metatpp", description="Periodicity-aware meta-learned point process intensities.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model described by a run config")
    t.add_argument("--config", required=True)
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="per-task NLL and binned MSE on a split")
    e.add_argument("--manifest", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--baseline", choices=("hpp", "nnipp", "hawkes"))
    e.add_argument("--config", help="run config whose fingerprint must match the checkpoint")
    e.add_argument("--set", action="append", metavar="KEY=VALUE")
    e.add_argument("--split", default="test", choices=data.SPLITS)
    e.add_argument("--bins", type=int, default=100)
    e.add_argument("--replicates", type=int, default=100, help="simulations per task for Hawkes MSE")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("predict", help="intensity curve over [T_c, T_e] from support events")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--events", required=True, help="events CSV holding support events only")
    r.add_argument("--task-id")
    r.add_argument("--context", help="comma-separated raw context values")
    r.add_argument("--T-c", dest="T_c", type=float)
    r.add_argument("--T-e", dest="T_e", type=float)
    r.add_argument("--resolution", type=int, default=100)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_predict)

    s = sub.add_parser("simulate", help="sample event sequences by thinning")
    s.add_argument("--checkpoint")
    s.add_argument("--spec")
    s.add_argument("--manifest")
    s.add_argument("--split", default="test", choices=data.SPLITS)
    s.add_argument("--replicates", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    g = sub.add_parser("gen-synth", help="write a synthetic periodic dataset with a manifest")
    g.add_argument("--spec")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_synth)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"metatpp: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, BoundViolation, FloatingPointError) as e:
        print(f"metatpp: numeric abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (data.DataError, CheckpointError, ValueError, OSError, KeyError) as e:
        print(f"metatpp: error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
