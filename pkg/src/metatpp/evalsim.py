"""Metrics, thinning simulation and synthetic meta-task generation."""
from __future__ import annotations

import csv
from dataclasses import dataclass, fields

import numpy as np

from .encoder import EventSequence
from .intensity import LOG_FLOOR

DEFAULT_BINS = 100
PROBE_POINTS = 64
PROBE_MARGIN = 1.5


def rng_stream(seed, *keys):
    """Counter-based (Philox) generator for the stream ``(seed, *keys)``.

    Streams with distinct keys are independent, so tasks and replicates can
    be generated in any order or in parallel with identical results.
    """
    if isinstance(seed, np.random.Generator):
        return seed
    base = list(seed) if isinstance(seed, (tuple, list)) else [int(seed)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(base + [int(k) for k in keys])))


# ---------------------------------------------------------------- metrics

def nll_metric(model, ep):
    """-sum_Q log lambda + Lambda(T_e) - Lambda(T_c), with z from the support only."""
    if hasattr(model, "batch_nll"):
        return float(model.batch_nll([ep])[0])
    task = model.conditioned(ep)
    q = ep.query.timestamps
    lam = np.maximum(task.intensity(q), LOG_FLOOR) if q.size else np.zeros(0)
    ends = task.cumulative(np.array([ep.T_c, ep.T_e]))
    return float(-np.sum(np.log(lam)) + (ends[1] - ends[0]))


def bin_edges(ep, J=DEFAULT_BINS):
    if J < 1:
        raise ValueError(f"bin count must be >= 1, got {J}")
    return np.linspace(ep.T_c, ep.T_e, J + 1)


def observed_counts(ep, J=DEFAULT_BINS):
    # half-open bins with the last one closed
    counts, _ = np.histogram(ep.query.timestamps, bins=bin_edges(ep, J))
    return counts.astype(np.float64)


def expected_counts(model, ep, grid):
    """Per-bin expected counts: differences of Lambda at consecutive grid edges."""
    grid = np.asarray(grid, dtype=np.float64)
    cum = model.conditioned(ep).cumulative(grid)
    return np.diff(cum)


def mse_metric(model, ep, J=DEFAULT_BINS, expected=None):
    """Mean over J equal bins of (observed count - expected count)^2."""
    edges = bin_edges(ep, J)
    if expected is None:
        expected = expected_counts(model, ep, edges)
    err = observed_counts(ep, J) - np.asarray(expected, dtype=np.float64)
    return float(np.mean(err ** 2))


@dataclass
class MetricsReport:
    task_ids: list
    nll: np.ndarray
    mse: np.ndarray
    bins: int = DEFAULT_BINS
    bin_width: float = float("nan")

    @property
    def mean_nll(self):
        return float(np.mean(self.nll))

    @property
    def mean_mse(self):
        return float(np.mean(self.mse))

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["task_id", "nll", "mse"])
            for tid, a, b in zip(self.task_ids, self.nll, self.mse):
                w.writerow([tid, repr(float(a)), repr(float(b))])
            w.writerow(["__mean__", repr(self.mean_nll), repr(self.mean_mse)])

    @classmethod
    def read_csv(cls, path):
        ids, nll, mse = [], [], []
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != ["task_id", "nll", "mse"]:
                raise ValueError(f"{path}: expected header task_id,nll,mse")
            for row in reader:
                if row["task_id"] == "__mean__":
                    continue
                ids.append(row["task_id"])
                nll.append(float(row["nll"]))
                mse.append(float(row["mse"]))
        return cls(ids, np.array(nll), np.array(mse))


def evaluate(model, episodes, J=DEFAULT_BINS, expected_fn=None):
    """MetricsReport over ``episodes``; ``expected_fn(ep, edges)`` overrides the MSE expectation."""
    nll, mse = [], []
    for ep in episodes:
        nll.append(nll_metric(model, ep))
        expected = None if expected_fn is None else expected_fn(ep, bin_edges(ep, J))
        mse.append(mse_metric(model, ep, J, expected))
    width = (episodes[0].T_e - episodes[0].T_c) / J if episodes else float("nan")
    return MetricsReport([ep.task_id for ep in episodes], np.array(nll), np.array(mse), J, width)


# ---------------------------------------------------------------- thinning

class BoundViolation(RuntimeError):
    pass


def thinning_sample(intensity, lambda_bound, t_start, t_end, seed=0, n_windows=1,
                    history=None, history_dependent=False):
    """Sample event times on [t_start, t_end] by thinning.

    Inhomogeneous mode: ``intensity(t_array) -> array`` and
    ``lambda_bound(a, b) -> float`` bounding the intensity on [a, b]. The range
    is cut into ``n_windows`` equal windows; each receives Poisson proposals
    at its bound, kept with probability intensity / bound.

    History-dependent mode (Ogata): ``intensity(t, past) -> float`` and
    ``lambda_bound(t, t_end, past) -> float`` bounding the intensity from t on
    until the next event. ``history`` holds events before ``t_start``.

    A proposal where intensity exceeds the bound raises ``BoundViolation``.
    """
    if t_end < t_start:
        raise ValueError("t_end must be >= t_start")
    rng = rng_stream(seed)
    if history_dependent:
        return _ogata(intensity, lambda_bound, t_start, t_end, rng, history)
    edges = np.linspace(t_start, t_end, n_windows + 1)
    out = []
    for a, b in zip(edges[:-1], edges[1:]):
        M = float(lambda_bound(a, b))
        if M <= 0 or b <= a:
            continue
        n = rng.poisson(M * (b - a))
        if n == 0:
            continue
        cand = np.sort(rng.uniform(a, b, size=n))
        lam = np.asarray(intensity(cand), dtype=np.float64)
        bad = np.flatnonzero(lam > M)
        if bad.size:
            t = cand[bad[0]]
            raise BoundViolation(f"intensity {lam[bad[0]]:.6g} exceeds bound {M:.6g} at t={t:.6g}")
        keep = rng.uniform(0.0, M, size=n) < lam
        out.append(cand[keep])
    ts = np.concatenate(out) if out else np.zeros(0)
    return EventSequence(ts)


def _ogata(intensity, lambda_bound, t_start, t_end, rng, history):
    past = list(np.asarray(history, dtype=np.float64)) if history is not None else []
    n_hist = len(past)
    t = t_start
    while True:
        M = float(lambda_bound(t, t_end, np.asarray(past)))
        if M <= 0:
            break
        t += rng.exponential(1.0 / M)
        if t > t_end:
            break
        lam = float(intensity(t, np.asarray(past)))
        if lam > M * (1 + 1e-12):
            raise BoundViolation(f"intensity {lam:.6g} exceeds bound {M:.6g} at t={t:.6g}")
        if rng.uniform(0.0, M) < lam:
            past.append(t)
    return EventSequence(np.asarray(past[n_hist:]))


def probe_bound(intensity, a, b, points=PROBE_POINTS, margin=PROBE_MARGIN):
    """margin * max of ``intensity`` on a uniform probe grid of [a, b]."""
    grid = np.linspace(a, b, points)
    return margin * float(np.max(intensity(grid)))


def sample_model(model, ep, seed=0, n_windows=None):
    """Draw query-window events (T_c, T_e] from a model conditioned on ``ep``'s support."""
    task = model.conditioned(ep)
    if n_windows is None:
        n_windows = max(1, int(np.ceil((ep.T_e - ep.T_c) / 6.0)))
    seq = thinning_sample(task.intensity, lambda a, b: probe_bound(task.intensity, a, b),
                          ep.T_c, ep.T_e, seed=seed, n_windows=n_windows)
    return seq.timestamps[seq.timestamps > ep.T_c]


# ---------------------------------------------------------------- synthetic tasks

@dataclass(frozen=True)
class SynthTaskSpec:
    rate_range: tuple = (0.5, 2.5)
    depth_range: tuple = (0.3, 0.9)
    phase_range: tuple = (0.0, 24.0)
    slope_range: tuple = (0.0, 0.0)
    period: float = 24.0
    T_c: float = 12.0
    T_e: float = 168.0
    n_tasks: int = 100
    seed: int = 0

    def problems(self):
        bad = []
        for name in ("rate_range", "depth_range", "phase_range", "slope_range"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                bad.append(f"{name}: lower bound {lo} > upper bound {hi}")
        if self.rate_range[0] <= 0:
            bad.append("rate_range: lower bound must be > 0")
        if self.depth_range[0] < 0 or self.depth_range[1] >= 1:
            bad.append("depth_range: must lie within [0, 1)")
        if self.period <= 0:
            bad.append("period: must be > 0")
        if not 0 < self.T_c < self.T_e:
            bad.append("T_c/T_e: need 0 < T_c < T_e")
        if self.n_tasks < 1:
            bad.append("n_tasks: must be >= 1")
        return bad

    def validate(self):
        bad = self.problems()
        if bad:
            raise ValueError("invalid synthetic spec: " + "; ".join(bad))

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


def _standardize_uniform(x, lo, hi):
    # moments of U(lo, hi); a degenerate range carries no signal
    if hi == lo:
        return 0.0
    return (x - 0.5 * (lo + hi)) / ((hi - lo) / np.sqrt(12.0))


def synth_intensity(a, b, phase, slope, period):
    def lam(t):
        t = np.asarray(t, dtype=np.float64)
        return np.maximum(0.0, a * (1.0 + b * np.sin(2 * np.pi * (t + phase) / period)) + slope * t)
    return lam


def gen_synth_tasks(spec: SynthTaskSpec, replicate=0):
    """List of (EventSequence, context, generator params) for each task.

    Task parameters depend on ``spec.seed`` only; ``replicate`` selects an
    independent draw of the event times for the same tasks.
    """
    spec.validate()
    out = []
    for m in range(spec.n_tasks):
        r = rng_stream(spec.seed, 0, m)
        a = r.uniform(*spec.rate_range)
        b = r.uniform(*spec.depth_range)
        phase = r.uniform(*spec.phase_range)
        slope = r.uniform(*spec.slope_range)
        lam = synth_intensity(a, b, phase, slope, spec.period)
        bound = a * (1 + b) + max(0.0, slope) * spec.T_e
        seq = thinning_sample(lam, lambda lo, hi: bound, 0.0, spec.T_e,
                              seed=rng_stream(spec.seed, 1, m, replicate))
        ctx = np.array([_standardize_uniform(a, *spec.rate_range),
                        _standardize_uniform(b, *spec.depth_range)])
        tid = f"task{m:04d}"
        out.append((EventSequence(seq.timestamps, tid), ctx,
                    {"rate": a, "depth": b, "phase": phase, "slope": slope}))
    return out
