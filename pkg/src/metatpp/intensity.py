"""Task-conditioned cumulative intensity built from monotone networks.

Lambda(t; z) = sum over periods of Lambda_p(t; z) + Lambda_a(t; z), with

    Lambda_p(t) = s (f_p(t') - f_p(0)) + s floor(t / tau) (f_p(tau) - f_p(0)),
    t' = t - tau floor(t / tau),
    Lambda_a(t) = s (f_a(t) - f_a(0)).

The intensity is the exact time derivative, obtained with
``diffcore.time_tangent``. The monotone nets read time divided by
``mnn_time_unit`` (hours by default); the encoder reads t / time_scale.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import diffcore as dc
from .encoder import EncoderConfig, encode_support_batch, encode_task_batch, init_encoder

LOG_FLOOR = 1e-12
EVAL_CHUNK = 8192


class MonotoneNet:
    """f(u, z) with non-negative effective weights, tanh hidden, softplus output.

    Stored weights are unconstrained; the forward pass uses their absolute value.
    """

    def __init__(self, params: dc.ParamStore, prefix: str, cond_dim: int, width: int,
                 depth: int = 2, rng=None):
        self.params, self.prefix = params, prefix
        self.cond_dim, self.width, self.depth = cond_dim, width, depth
        if rng is not None:
            first = dc.glorot_uniform(rng, 1 + cond_dim, width)
            params.add(f"{prefix}.w_t", first[:1])
            if cond_dim:
                params.add(f"{prefix}.W_z", first[1:])
            params.add(f"{prefix}.b0", np.zeros((1, width)))
            for i in range(1, depth):
                params.add(f"{prefix}.W{i}", dc.glorot_uniform(rng, width, width))
                params.add(f"{prefix}.b{i}", np.zeros((1, width)))
            params.add(f"{prefix}.w_out", dc.glorot_uniform(rng, width, 1))
            params.add(f"{prefix}.b_out", np.zeros((1, 1)))

    def bind(self, cond=None):
        """Fix the conditioning rows; returns ``f(u, rows) -> (N, 1)`` node."""
        p, pre = self.params, self.prefix
        w_t = dc.absolute(p[f"{pre}.w_t"])
        if self.cond_dim:
            if cond is None:
                raise ValueError(f"{pre}: conditioning input required")
            first = dc.add_row(dc.matmul(cond, dc.absolute(p[f"{pre}.W_z"])), p[f"{pre}.b0"])
        else:
            first = None
        hidden = [(dc.absolute(p[f"{pre}.W{i}"]), p[f"{pre}.b{i}"]) for i in range(1, self.depth)]
        w_out = dc.absolute(p[f"{pre}.w_out"])
        b_out = p[f"{pre}.b_out"]

        def f(u, rows):
            if first is None:
                h = dc.tanh(dc.add_row(dc.matmul(u, w_t), p[f"{pre}.b0"]))
            else:
                h = dc.tanh(dc.matmul(u, w_t) + dc.take_rows(first, rows))
            for W, b in hidden:
                h = dc.tanh(dc.add_row(dc.matmul(h, W), b))
            return dc.softplus(dc.add_row(dc.matmul(h, w_out), b_out))

        return f


def _col(x):
    return np.asarray(x, dtype=np.float64).reshape(-1, 1)


def _check_times(t):
    if np.any(t < 0):
        raise ValueError(f"time must be non-negative, got {t.min()}")


def _phase_split(t, tau):
    """floor(t / tau) and the phase; right-continuous at multiples of tau."""
    k = np.floor(t / tau)
    phase = t - tau * k
    # guard rounding at breakpoints
    over = phase >= tau
    k[over] += 1
    phase[over] -= tau
    under = phase < 0
    k[under] -= 1
    phase[under] += tau
    return k, phase


def periodic_term(f, t, rows, n_tasks, tau, s, unit=1.0):
    """Lambda_p graph at times ``t`` (N, 1 node) for tasks ``rows``."""
    k, _ = _phase_split(t.value, tau)
    u = dc.affine(t - dc.constant(tau * k), 1.0 / unit)
    task_rows = np.arange(n_tasks)
    f0 = f(dc.constant(np.zeros((n_tasks, 1))), task_rows)
    f1 = f(dc.constant(np.full((n_tasks, 1), tau / unit)), task_rows)
    within = dc.affine(f(u, rows) - dc.take_rows(f0, rows), s)
    laps = dc.affine(dc.take_rows(f1 - f0, rows), s)
    return within + dc.constant(k) * laps


def aperiodic_term(f, t, rows, n_tasks, s, unit=1.0):
    task_rows = np.arange(n_tasks)
    f0 = f(dc.constant(np.zeros((n_tasks, 1))), task_rows)
    return dc.affine(f(dc.affine(t, 1.0 / unit), rows) - dc.take_rows(f0, rows), s)


@dataclass(frozen=True)
class ModelConfig:
    periods: tuple = (24.0,)
    mnn_width: int = 512
    mnn_depth: int = 2
    time_scale: float = 168.0
    mnn_time_unit: float = 1.0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        periods = tuple(float(p) for p in self.periods)
        if any(p <= 0 for p in periods) or len(set(periods)) != len(periods):
            raise ValueError(f"periods must be positive and distinct, got {periods}")
        object.__setattr__(self, "periods", periods)
        if self.time_scale <= 0 or self.mnn_time_unit <= 0:
            raise ValueError("time_scale and mnn_time_unit must be positive")

    def to_dict(self):
        d = asdict(self)
        d["periods"] = list(self.periods)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        enc = EncoderConfig(**d.pop("encoder"))
        return cls(encoder=enc, **d)


class TaskIntensity:
    """Numeric evaluation of one task's Lambda and lambda (no gradients kept)."""

    def __init__(self, cumulative_graph):
        self._graph = cumulative_graph

    def _eval(self, t, with_rate):
        t = np.asarray(t, dtype=np.float64)
        flat = t.reshape(-1)
        _check_times(flat)
        out = np.empty_like(flat)
        for lo in range(0, flat.size, EVAL_CHUNK):
            chunk = flat[lo:lo + EVAL_CHUNK]
            leaf = dc.variable(_col(chunk))
            cum = self._graph(leaf, np.zeros(chunk.size, dtype=np.intp))
            node = dc.time_tangent(cum, leaf, rowwise=True) if with_rate else cum
            out[lo:lo + EVAL_CHUNK] = node.value[:, 0]
        return out.reshape(t.shape)

    def cumulative(self, t):
        return self._eval(t, False)

    def intensity(self, t):
        return self._eval(t, True)


class CumulativeModel:
    """Shared machinery: training loss and query NLL over batches of episodes.

    Subclasses provide ``_represent(episodes)`` (node or None) and
    ``_cumulative(rep, t, rows, n_tasks)``.
    """

    kind = "base"

    def __init__(self, params, scale=1.0):
        self.params = params
        self.scale = float(scale)

    def _represent(self, episodes):
        raise NotImplementedError

    def _cumulative(self, rep, t, rows, n_tasks):
        raise NotImplementedError

    def _events_graph(self, episodes, event_lists):
        B = len(episodes)
        rep = self._represent(episodes)
        rows = np.concatenate([np.full(len(e), b, dtype=np.intp)
                               for b, e in enumerate(event_lists)]) if B else np.zeros(0, np.intp)
        times = np.concatenate([np.asarray(e, dtype=np.float64) for e in event_lists])
        leaf = dc.variable(_col(times))
        lam = dc.time_tangent(self._cumulative(rep, leaf, rows, B), leaf, rowwise=True)
        log_lam = dc.log(dc.clamp_min(lam, LOG_FLOOR))
        return rep, rows, log_lam

    def _at(self, rep, times, B):
        return self._cumulative(rep, dc.constant(_col(times)), np.arange(B), B)

    def batch_loss(self, episodes):
        """Mean over tasks of -sum_{S u Q} log lambda + Lambda(T_e); returns (node, per-task)."""
        B = len(episodes)
        events = [np.concatenate([ep.support.timestamps, ep.query.timestamps]) for ep in episodes]
        rep, rows, log_lam = self._events_graph(episodes, events)
        cum_e = self._at(rep, [ep.T_e for ep in episodes], B)
        total = dc.reduce_sum(cum_e) - dc.reduce_sum(log_lam)
        per_task = cum_e.value[:, 0].copy()
        np.add.at(per_task, rows, -log_lam.value[:, 0])
        return dc.affine(total, 1.0 / B), per_task

    def batch_nll(self, episodes):
        """Query-window NLL per task: -sum_Q log lambda + Lambda(T_e) - Lambda(T_c)."""
        B = len(episodes)
        rep, rows, log_lam = self._events_graph(episodes, [ep.query.timestamps for ep in episodes])
        cum_e = self._at(rep, [ep.T_e for ep in episodes], B)
        cum_c = self._at(rep, [ep.T_c for ep in episodes], B)
        nll = cum_e.value[:, 0] - cum_c.value[:, 0]
        np.add.at(nll, rows, -log_lam.value[:, 0])
        return nll

    def conditioned(self, ep):
        rep = self._represent([ep])
        return TaskIntensity(lambda t, rows: self._cumulative(rep, t, rows, 1))


class IntensityModel(CumulativeModel):
    """Encoder + periodic and aperiodic monotone nets + frozen scale s."""

    kind = "proposed"

    def __init__(self, config: ModelConfig, seed=0, scale=1.0):
        params = dc.ParamStore()
        super().__init__(params, scale)
        self.config = config
        rng = np.random.default_rng(seed)
        init_encoder(params, config.encoder, rng)
        kz = config.encoder.task_dim
        self.periodic_nets = [
            MonotoneNet(params, f"periodic{i}", kz, config.mnn_width, config.mnn_depth, rng)
            for i in range(len(config.periods))
        ]
        self.aperiodic_net = MonotoneNet(params, "aperiodic", kz, config.mnn_width,
                                         config.mnn_depth, rng)

    def _represent(self, episodes):
        cfg = self.config.encoder
        zs = encode_support_batch(self.params, cfg, [ep.support.timestamps for ep in episodes],
                                  self.config.time_scale)
        ctx = np.stack([np.asarray(ep.context, float).reshape(-1) for ep in episodes])
        return encode_task_batch(self.params, cfg, zs, ctx)

    def represent(self, episodes):
        return self._represent(episodes).value

    def _components(self, z, t, rows, n_tasks):
        unit = self.config.mnn_time_unit
        parts = [periodic_term(net.bind(z), t, rows, n_tasks, tau, self.scale, unit)
                 for net, tau in zip(self.periodic_nets, self.config.periods)]
        parts.append(aperiodic_term(self.aperiodic_net.bind(z), t, rows, n_tasks, self.scale, unit))
        return parts

    def _cumulative(self, z, t, rows, n_tasks):
        # summation order: periods in configured order, then the aperiodic term
        parts = self._components(z, t, rows, n_tasks)
        total = parts[0]
        for p in parts[1:]:
            total = total + p
        return total

    def with_z(self, z):
        """TaskIntensity for an explicit task representation vector."""
        zc = dc.constant(np.asarray(z, dtype=np.float64).reshape(1, -1))
        return TaskIntensity(lambda t, rows: self._cumulative(zc, t, rows, 1))

    def component(self, z, index):
        """TaskIntensity of a single term: periodic ``index`` or the aperiodic one (-1)."""
        zc = dc.constant(np.asarray(z, dtype=np.float64).reshape(1, -1))
        return TaskIntensity(lambda t, rows: self._components(zc, t, rows, 1)[index])

    def config_dict(self):
        return self.config.to_dict()


# ------------------------------------------------------------ functional API

def _single(net, z):
    zc = None if z is None else dc.constant(np.asarray(z, dtype=np.float64).reshape(1, -1))
    return net.bind(zc)


def cumulative_periodic(t, z, net: MonotoneNet, tau: float, s: float, unit: float = 1.0):
    t = _col(t)
    _check_times(t)
    node = periodic_term(_single(net, z), dc.constant(t), np.zeros(len(t), np.intp), 1, tau, s, unit)
    return node.value[:, 0]


def cumulative_aperiodic(t, z, net: MonotoneNet, s: float, unit: float = 1.0):
    t = _col(t)
    _check_times(t)
    node = aperiodic_term(_single(net, z), dc.constant(t), np.zeros(len(t), np.intp), 1, s, unit)
    return node.value[:, 0]


def cumulative_total(t, z, model: IntensityModel):
    return model.with_z(z).cumulative(t)


def intensity_at(t, z, model: IntensityModel):
    return model.with_z(z).intensity(t)


def compute_scale(train_episodes):
    """s = max over training tasks of the query-set size."""
    sizes = [len(ep.query) for ep in train_episodes]
    if not sizes:
        raise ValueError("compute_scale: empty training set")
    s = max(sizes)
    if s < 1:
        raise ValueError("compute_scale: all query sets are empty")
    return float(s)
