"""File formats: key-value configs, manifests, events/contexts/splits CSVs, ingestion."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path
import typing

import numpy as np

from .encoder import EventSequence
from .evalsim import rng_stream
from .metatrain import Episode, split_episode

log = logging.getLogger(__name__)

MIN_SUPPORT = 5
TIME_UNITS = {"hours": 1.0, "minutes": 1.0 / 60.0, "days": 24.0}
ORIGINS = ("absolute", "first-event-midnight")
SPLITS = ("train", "val", "test")


class DataError(ValueError):
    pass


# ---------------------------------------------------------------- key-value files

def parse_kv(text, source="<config>"):
    """``key = value`` lines; ``#`` starts a comment; duplicate keys are errors."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in out:
            raise DataError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _coerce(value: str, typ, key):
    origin = typing.get_origin(typ)
    try:
        if typ is bool:
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if typ is int:
            return int(value)
        if typ is float:
            return float(value)
        if typ is str:
            return value
        if typ is tuple or origin is tuple:
            inner = (typing.get_args(typ) or (float,))[0]
            items = [v.strip() for v in value.split(",") if v.strip()]
            return tuple(_coerce(v, inner, key) for v in items)
    except ValueError:
        raise DataError(f"{key}: cannot parse {value!r} as {getattr(typ, '__name__', typ)}") from None
    raise DataError(f"{key}: unsupported field type {typ}")


def kv_to_dataclass(cls, values: dict, source="<config>"):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls) if f.init}
    unknown = sorted(set(values) - names)
    if unknown:
        raise DataError(f"{source}: unknown keys {unknown}")
    kwargs = {k: _coerce(v, hints[k], k) for k, v in values.items()}
    return cls(**kwargs)


def dataclass_to_kv(obj):
    lines = []
    for f in fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, tuple):
            v = ", ".join(repr(x) if isinstance(x, float) else str(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- manifest

@dataclass(frozen=True)
class DatasetManifest:
    events: str
    splits: str
    contexts: str = ""
    T_c: float = 12.0
    T_e: float = 168.0
    time_unit: str = "hours"
    periods: tuple[float, ...] = (24.0,)
    origin: str = "absolute"
    min_support: int = MIN_SUPPORT
    base_dir: str = field(default=".", compare=False)

    def __post_init__(self):
        if self.time_unit not in TIME_UNITS:
            raise DataError(f"time_unit must be one of {sorted(TIME_UNITS)}")
        if self.origin not in ORIGINS:
            raise DataError(f"origin must be one of {ORIGINS}")
        if not 0 < self.T_c < self.T_e:
            raise DataError("need 0 < T_c < T_e")

    def path(self, name):
        p = Path(getattr(self, name))
        return p if p.is_absolute() else Path(self.base_dir) / p

    @classmethod
    def load(cls, path):
        path = Path(path)
        values = parse_kv(path.read_text(encoding="utf-8"), str(path))
        values.pop("base_dir", None)
        m = kv_to_dataclass(cls, values, str(path))
        return cls(**{**{f.name: getattr(m, f.name) for f in fields(m)}, "base_dir": str(path.parent)})

    def save(self, path):
        text = dataclass_to_kv(self)
        text = "\n".join(l for l in text.splitlines() if not l.startswith("base_dir")) + "\n"
        Path(path).write_text(text, encoding="utf-8")


# ---------------------------------------------------------------- CSV I/O

def read_events_csv(path):
    """task_id -> sorted timestamps (file order preserved for task ids)."""
    by_task: dict[str, list] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: no tasks")
        if [h.strip() for h in header] != ["task_id", "timestamp"]:
            raise DataError(f"{path}: expected header 'task_id,timestamp', got {header}")
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != 2:
                raise DataError(f"{path}:{lineno}: expected 2 columns, got {len(row)}")
            tid, ts = row[0].strip(), row[1].strip()
            try:
                value = float(ts)
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric timestamp {ts!r}") from None
            if not np.isfinite(value):
                raise DataError(f"{path}:{lineno}: non-finite timestamp {ts!r}")
            by_task.setdefault(tid, []).append(value)
    if not by_task:
        raise DataError(f"{path}: no tasks")
    return {k: np.sort(np.array(v)) for k, v in by_task.items()}


def write_events_csv(path, sequences):
    """``sequences``: iterable of (task_id, timestamps)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["task_id", "timestamp"])
        for tid, ts in sequences:
            for t in np.asarray(ts, dtype=np.float64):
                w.writerow([tid, repr(float(t))])


def read_contexts_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0].strip() != "task_id":
            raise DataError(f"{path}: expected header starting with task_id")
        k = len(header) - 1
        expected = [f"g{i}" for i in range(k)]
        if [h.strip() for h in header[1:]] != expected:
            raise DataError(f"{path}: context columns must be {','.join(expected)}")
        out = {}
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != k + 1:
                raise DataError(f"{path}:{lineno}: expected {k + 1} columns")
            try:
                out[row[0].strip()] = np.array([float(v) for v in row[1:]])
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric context value") from None
    return out, k


def write_contexts_csv(path, contexts):
    """``contexts``: iterable of (task_id, vector)."""
    contexts = list(contexts)
    k = len(contexts[0][1]) if contexts else 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["task_id"] + [f"g{i}" for i in range(k)])
        for tid, g in contexts:
            w.writerow([tid] + [repr(float(v)) for v in g])


def read_splits_csv(path):
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["task_id", "split"]:
            raise DataError(f"{path}: expected header 'task_id,split'")
        for lineno, row in enumerate(reader, 2):
            tid, split = row["task_id"].strip(), row["split"].strip()
            if split not in SPLITS:
                raise DataError(f"{path}:{lineno}: unknown split {split!r}")
            if tid in out:
                raise DataError(f"{path}:{lineno}: task {tid!r} assigned twice")
            out[tid] = split
    return out


def write_splits_csv(path, splits):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["task_id", "split"])
        for tid, split in splits.items():
            w.writerow([tid, split])


# ---------------------------------------------------------------- ingestion

def task_origin(ts, rule):
    if rule == "absolute" or ts.size == 0:
        return 0.0
    # midnight starting the day after the first event
    return (np.floor(ts[0] / 24.0) + 1.0) * 24.0


@dataclass
class IngestResult:
    episodes: dict
    excluded: list
    context_mean: np.ndarray
    context_std: np.ndarray


def ingest(manifest: DatasetManifest, standardize=True):
    """Episodes per split, with |S| < min_support tasks excluded."""
    raw = read_events_csv(manifest.path("events"))
    splits = read_splits_csv(manifest.path("splits"))
    missing = [t for t in raw if t not in splits]
    if missing:
        raise DataError(f"tasks without a split assignment: {missing[:5]}")
    if manifest.contexts:
        ctx, k = read_contexts_csv(manifest.path("contexts"))
        lacking = [t for t in raw if t not in ctx]
        if lacking and k:
            raise DataError(f"tasks missing a context row: {lacking[:5]}")
    else:
        ctx, k = {}, 0

    factor = TIME_UNITS[manifest.time_unit]
    episodes = {s: [] for s in SPLITS}
    excluded = []
    for tid, ts in raw.items():
        ts = ts * factor
        ts = ts - task_origin(ts, manifest.origin)
        ts = ts[(ts >= 0) & (ts <= manifest.T_e)]
        g = ctx.get(tid, np.zeros(0)) if k else np.zeros(0)
        ep = split_episode(EventSequence(ts, tid), g, manifest.T_c, manifest.T_e, task_id=tid)
        if len(ep.support) < manifest.min_support:
            excluded.append(tid)
            continue
        episodes[splits[tid]].append(ep)
    if excluded:
        log.info("excluded %d tasks with fewer than %d support events", len(excluded),
                 manifest.min_support)

    mean, std = np.zeros(k), np.ones(k)
    if k and standardize and episodes["train"]:
        G = np.stack([ep.context for ep in episodes["train"]])
        mean = G.mean(axis=0)
        std = G.std(axis=0)
        std[std == 0] = 1.0
        for s in SPLITS:
            episodes[s] = [Episode(ep.support, ep.query, (ep.context - mean) / std, ep.T_c,
                                   ep.T_e, ep.task_id) for ep in episodes[s]]
    return IngestResult(episodes, excluded, mean, std)


def episodes_to_rows(episodes):
    return [(ep.task_id, ep.events) for ep in episodes]


def split_assignment(n_tasks, seed, fractions=(0.6, 0.2, 0.2)):
    """Deterministic train/val/test labels by a seeded permutation of task indices."""
    order = rng_stream(seed, 2).permutation(n_tasks)
    n_train = int(round(fractions[0] * n_tasks))
    n_val = int(round(fractions[1] * n_tasks))
    labels = np.empty(n_tasks, dtype=object)
    labels[order[:n_train]] = "train"
    labels[order[n_train:n_train + n_val]] = "val"
    labels[order[n_train + n_val:]] = "test"
    return list(labels)
