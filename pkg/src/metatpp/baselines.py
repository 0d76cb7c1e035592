"""Comparison models: homogeneous Poisson, task-agnostic neural Poisson, Hawkes MLE."""
from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np
from numba import njit

from . import diffcore as dc
from .evalsim import thinning_sample
from .intensity import LOG_FLOOR, CumulativeModel, MonotoneNet, aperiodic_term
from .metatrain import AdamState, TrainConfig, adam_step, train


# ---------------------------------------------------------------- HPP

class ConstantIntensity:
    """lambda(t) = rate; also usable as a model whose every task shares the rate."""

    def __init__(self, rate):
        self.rate = float(rate)

    def intensity(self, t):
        return np.full(np.shape(t), self.rate)

    def cumulative(self, t):
        return self.rate * np.asarray(t, dtype=np.float64)

    def conditioned(self, ep):
        return self


@dataclass(frozen=True)
class HppModel:
    rate: float

    def conditioned(self, ep):
        return ConstantIntensity(self.rate)


def hpp_fit(ep) -> HppModel:
    if ep.T_c <= 0:
        raise ValueError(f"T_c must be positive, got {ep.T_c}")
    return HppModel(len(ep.support) / ep.T_c)


def hpp_nll(model: HppModel, ep):
    """-|Q| log rate + rate (T_e - T_c); log guarded by the intensity floor."""
    n = len(ep.query)
    window = ep.T_e - ep.T_c
    return -n * np.log(max(model.rate, LOG_FLOOR)) + model.rate * window if n else model.rate * window


class HppBaseline:
    """Fits an HPP on each episode's support set when conditioned."""

    kind = "hpp"

    def conditioned(self, ep):
        return ConstantIntensity(hpp_fit(ep).rate)


# ---------------------------------------------------------------- NNIPP

@dataclass(frozen=True)
class NnippConfig:
    mnn_width: int = 512
    mnn_depth: int = 2
    mnn_time_unit: float = 1.0


class NnippModel(CumulativeModel):
    """One shared Lambda(t) = s (f(t) - f(0)); no task representation."""

    kind = "nnipp"

    def __init__(self, config: NnippConfig, seed=0, scale=1.0):
        params = dc.ParamStore()
        super().__init__(params, scale)
        self.config = config
        self.net = MonotoneNet(params, "aperiodic", 0, config.mnn_width, config.mnn_depth,
                               np.random.default_rng(seed))

    def _represent(self, episodes):
        return None

    def _cumulative(self, rep, t, rows, n_tasks):
        return aperiodic_term(self.net.bind(None), t, rows, n_tasks, self.scale,
                              self.config.mnn_time_unit)

    def config_dict(self):
        return asdict(self.config)


def nnipp_train(train_eps, val_eps, config: NnippConfig, train_config: TrainConfig, seed=0):
    """Train NNIPP on all training tasks as if they were one task."""
    model = NnippModel(config, seed=seed)
    result = train(model, train_eps, val_eps, train_config)
    return model, result


# ---------------------------------------------------------------- Hawkes

def _softplus(x):
    return np.logaddexp(0.0, x)


def _inv_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    return np.where(y > 30, y, np.log(np.expm1(np.maximum(y, 1e-300))))


@dataclass
class HawkesModel:
    mu: float
    delta: np.ndarray
    omega: np.ndarray

    kind = "hawkes"

    def __post_init__(self):
        self.delta = np.atleast_1d(np.asarray(self.delta, dtype=np.float64))
        self.omega = np.atleast_1d(np.asarray(self.omega, dtype=np.float64))
        if self.delta.shape != self.omega.shape or not 1 <= self.delta.size <= 4:
            raise ValueError("need 1 to 4 kernels with matching delta/omega")
        if self.mu < 0 or np.any(self.delta < 0) or np.any(self.omega <= 0):
            raise ValueError("Hawkes parameters must satisfy mu >= 0, delta >= 0, omega > 0")

    @property
    def n_kernels(self):
        return self.delta.size

    def state(self):
        return {"mu": np.array([self.mu]), "delta": self.delta.copy(), "omega": self.omega.copy()}

    @classmethod
    def from_state(cls, state):
        return cls(float(state["mu"][0]), state["delta"], state["omega"])

    def conditioned(self, ep):
        """Intensity given the full observed history (support and query)."""
        return HawkesTask(self, ep.events)


class HawkesTask:
    def __init__(self, model: HawkesModel, events):
        self.model = model
        self.events = np.sort(np.asarray(events, dtype=np.float64))

    def intensity(self, t):
        t = np.asarray(t, dtype=np.float64)
        flat = t.reshape(-1)
        out = np.empty_like(flat)
        m = self.model
        for i, ti in enumerate(flat):
            past = self.events[self.events < ti]
            dt = ti - past
            out[i] = m.mu + np.sum(m.delta * m.omega * np.exp(-np.outer(dt, m.omega)))
        return out.reshape(t.shape)

    def cumulative(self, t):
        t = np.asarray(t, dtype=np.float64)
        flat = t.reshape(-1)
        out = np.array([hawkes_cumulative(self.model, self.events[self.events < ti], ti)
                        for ti in flat])
        return out.reshape(t.shape)


def hawkes_intensity(model: HawkesModel, history, t):
    """mu + sum_k sum_{t_i < t} delta_k omega_k exp(-omega_k (t - t_i))."""
    h = np.asarray(getattr(history, "timestamps", history), dtype=np.float64)
    if h.size and np.max(h) >= t:
        raise ValueError(f"history must lie strictly before t={t}")
    dt = t - h
    return float(model.mu + np.sum(model.delta * model.omega * np.exp(-np.outer(dt, model.omega))))


def hawkes_cumulative(model: HawkesModel, history, T):
    """Integral of the intensity over [0, T] given events before T."""
    h = np.asarray(getattr(history, "timestamps", history), dtype=np.float64)
    h = h[h < T]
    return float(model.mu * T + np.sum(model.delta * -np.expm1(-np.outer(T - h, model.omega))))


@njit(cache=True)
def _hawkes_loglik_grad(times, T, mu, delta, omega):
    K = delta.size
    N = times.size
    A = np.zeros(K)
    B = np.zeros(K)
    ll = 0.0
    g_mu = 0.0
    g_delta = np.zeros(K)
    g_omega = np.zeros(K)
    prev = 0.0
    for i in range(N):
        ti = times[i]
        if i > 0:
            d = ti - prev
            for k in range(K):
                e = np.exp(-omega[k] * d)
                B[k] = e * (B[k] + d * (1.0 + A[k]))
                A[k] = e * (1.0 + A[k])
        lam = mu
        for k in range(K):
            lam += delta[k] * omega[k] * A[k]
        ll += np.log(lam)
        inv = 1.0 / lam
        g_mu += inv
        for k in range(K):
            g_delta[k] += omega[k] * A[k] * inv
            g_omega[k] += delta[k] * (A[k] - omega[k] * B[k]) * inv
        prev = ti
    ll -= mu * T
    g_mu -= T
    for k in range(K):
        for i in range(N):
            r = T - times[i]
            e = np.exp(-omega[k] * r)
            ll -= delta[k] * (1.0 - e)
            g_delta[k] -= 1.0 - e
            g_omega[k] -= delta[k] * r * e
    return ll, g_mu, g_delta, g_omega


def hawkes_loglik(model: HawkesModel, events, T_end, with_grad=False):
    """Exact log-likelihood on [0, T_end] (compensator in closed form)."""
    ts = np.sort(np.asarray(getattr(events, "timestamps", events), dtype=np.float64))
    ll, gm, gd, go = _hawkes_loglik_grad(ts, float(T_end), float(model.mu), model.delta, model.omega)
    if with_grad:
        return ll, (gm, gd, go)
    return ll


@dataclass(frozen=True)
class HawkesFitConfig:
    lr: float = 0.05
    steps: int = 3000
    final_lr_fraction: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def _as_sequences(events, T_end):
    if isinstance(events, (list, tuple)) and events and np.ndim(getattr(events[0], "timestamps", events[0])) == 1:
        seqs = [np.sort(np.asarray(getattr(e, "timestamps", e), dtype=np.float64)) for e in events]
    else:
        seqs = [np.sort(np.asarray(getattr(events, "timestamps", events), dtype=np.float64))]
    ends = np.broadcast_to(np.asarray(T_end, dtype=np.float64), (len(seqs),))
    return seqs, ends


def hawkes_fit(events, T_end, n_kernels=1, config: HawkesFitConfig = HawkesFitConfig()):
    """Maximum likelihood by Adam over softplus-reparameterized parameters.

    ``events`` is one sequence or a list of independent sequences sharing the
    parameters (``T_end`` then a scalar or one end time per sequence). The
    step size decays geometrically from ``lr`` to ``lr * final_lr_fraction``.
    """
    if not 1 <= n_kernels <= 4:
        raise ValueError("n_kernels must be in 1..4")
    seqs, ends = _as_sequences(events, T_end)
    n = max(sum(s.size for s in seqs), 1)
    params = dc.ParamStore()
    params.add("mu", _inv_softplus(np.array([0.5 * n / float(np.sum(ends))])))
    params.add("delta", _inv_softplus(np.full(n_kernels, 0.5 / n_kernels)))
    params.add("omega", _inv_softplus(np.geomspace(1.0, 10.0 ** (n_kernels - 1), n_kernels)))
    state = AdamState()
    decay = config.final_lr_fraction ** (1.0 / max(config.steps, 1))
    for step in range(config.steps):
        raw = {k: node.value for k, node in params.items()}
        mu, delta, omega = _softplus(raw["mu"])[0], _softplus(raw["delta"]), _softplus(raw["omega"])
        gm, gd, go = 0.0, np.zeros(n_kernels), np.zeros(n_kernels)
        for ts, T in zip(seqs, ends):
            _, a, b, c = _hawkes_loglik_grad(ts, float(T), float(mu), delta, omega)
            gm, gd, go = gm + a, gd + b, go + c
        sig = {k: 1.0 / (1.0 + np.exp(-v)) for k, v in raw.items()}
        # minimize mean negative log-likelihood per event
        grads = {"mu": -np.array([gm]) * sig["mu"] / n,
                 "delta": -gd * sig["delta"] / n,
                 "omega": -go * sig["omega"] / n}
        cfg = TrainConfig(lr=config.lr * decay ** step, beta1=config.beta1,
                          beta2=config.beta2, eps=config.eps)
        adam_step(params, grads, state, cfg)
    raw = {k: node.value for k, node in params.items()}
    return HawkesModel(float(_softplus(raw["mu"])[0]), _softplus(raw["delta"]),
                       _softplus(raw["omega"]))


def simulate_hawkes(model: HawkesModel, t_start, t_end, seed=0, history=None):
    """Ogata thinning; the intensity just after the latest event bounds the future."""

    def lam(t, past):
        dt = t - past[past < t]
        return model.mu + np.sum(model.delta * model.omega * np.exp(-np.outer(dt, model.omega)))

    def bound(t, _end, past):
        dt = t - past[past <= t]
        return model.mu + np.sum(model.delta * model.omega * np.exp(-np.outer(dt, model.omega)))

    return thinning_sample(lam, bound, t_start, t_end, seed=seed, history=history,
                           history_dependent=True)


def hawkes_expected_counts(model: HawkesModel, ep, edges, replicates=100, seed=0):
    """Mean per-bin counts of query-window simulations conditioned on the support set."""
    from .evalsim import rng_stream

    total = np.zeros(len(edges) - 1)
    for r in range(replicates):
        seq = simulate_hawkes(model, ep.T_c, ep.T_e, seed=rng_stream(seed, r),
                              history=ep.support.timestamps)
        total += np.histogram(seq.timestamps, bins=edges)[0]
    return total / replicates
