"""Episodic training: support/query split, exact NLL objective, Adam, best-on-validation."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .encoder import EventSequence
from .intensity import compute_scale

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Episode:
    support: EventSequence
    query: EventSequence
    context: np.ndarray
    T_c: float
    T_e: float
    task_id: str = ""

    def __post_init__(self):
        if not self.T_c < self.T_e:
            raise ValueError(f"T_c={self.T_c} must be < T_e={self.T_e}")
        object.__setattr__(self, "context", np.asarray(self.context, dtype=np.float64).reshape(-1))

    @property
    def events(self):
        return np.concatenate([self.support.timestamps, self.query.timestamps])


def split_episode(events, context, T_c, T_e, task_id=""):
    """S = {0 <= t <= T_c}, Q = {T_c < t <= T_e}."""
    if T_c >= T_e:
        raise ValueError(f"T_c={T_c} must be < T_e={T_e}")
    ts = events.timestamps if isinstance(events, EventSequence) else np.sort(np.asarray(events, float))
    task_id = getattr(events, "task_id", "") or task_id
    if ts.size and (ts[0] < 0 or ts[-1] > T_e):
        raise ValueError(f"task {task_id!r}: events must lie in [0, {T_e}]")
    cut = np.searchsorted(ts, T_c, side="right")
    return Episode(EventSequence(ts[:cut], task_id), EventSequence(ts[cut:], task_id),
                   np.asarray(context, dtype=np.float64), float(T_c), float(T_e), task_id)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    batch_size: int = 32
    epochs: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params: dc.ParamStore, grads: dict, state: AdamState, config: TrainConfig):
    """One bias-corrected Adam update in place, with decoupled weight decay."""
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, node in params.items():
        g = grads[name]
        if g.shape != node.value.shape:
            raise dc.ShapeError(f"adam_step: grad for {name} has shape {g.shape}, "
                                f"parameter has {node.value.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = config.lr * (m / c1) / (np.sqrt(v / c2) + config.eps)
        if config.weight_decay:
            update = update + config.lr * config.weight_decay * node.value
        node.value = node.value - update
    return params


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_nll: float


@dataclass
class TrainResult:
    best_state: dict
    best_epoch: int
    best_val_nll: float
    scale: float
    history: list


def mean_nll(model, episodes, batch_size=64):
    if not episodes:
        return float("nan")
    vals = [model.batch_nll(episodes[i:i + batch_size]) for i in range(0, len(episodes), batch_size)]
    return float(np.mean(np.concatenate(vals)))


def train(model, train_eps, val_eps, config: TrainConfig, on_epoch=None) -> TrainResult:
    """Minibatch episodic training; keeps the parameters with the lowest validation NLL.

    With ``epochs == 0`` the initial parameters are returned with their
    validation NLL. Selection falls back to the training loss when no
    validation episodes are given.
    """
    if not train_eps:
        raise ValueError("empty training set")
    model.scale = compute_scale(train_eps)
    rng = np.random.default_rng(config.seed)
    state = AdamState()
    params = model.params

    if config.epochs == 0:
        val = mean_nll(model, val_eps)
        return TrainResult(params.state(), 0, val, model.scale, [])

    best_state, best_epoch, best_score = None, -1, np.inf
    history = []
    n = len(train_eps)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        losses = []
        for b, start in enumerate(range(0, n, config.batch_size)):
            batch = [train_eps[i] for i in order[start:start + config.batch_size]]
            params.zero_grad()
            loss, _ = model.batch_loss(batch)
            value = float(loss.value)
            if not np.isfinite(value):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {b}")
            dc.backward(loss)
            grads = params.grads()
            if not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingDiverged(f"non-finite gradient at epoch {epoch}, batch {b}")
            adam_step(params, grads, state, config)
            losses.append(value)
        train_loss = float(np.mean(losses))
        val = mean_nll(model, val_eps) if val_eps else float("nan")
        if val_eps and not np.isfinite(val):
            raise TrainingDiverged(f"non-finite validation NLL at epoch {epoch}")
        record = EpochRecord(epoch, train_loss, val)
        history.append(record)
        log.info("epoch %d train_loss %.6f val_nll %.6f", epoch, train_loss, val)
        if on_epoch is not None:
            on_epoch(record)
        score = val if val_eps else train_loss
        if score < best_score:
            best_state, best_epoch, best_score = params.state(), epoch, score
    params.load_state(best_state)
    return TrainResult(best_state, best_epoch, best_score, model.scale, history)


def select_best(history):
    """Index of the lowest validation NLL (first on ties)."""
    return int(np.argmin([r.val_nll for r in history]))


def predict_intensity_curve(ep: Episode, model, grid):
    """(t, lambda) rows on ``grid``; z comes from the support set and context only."""
    grid = np.asarray(grid, dtype=np.float64).reshape(-1)
    tol = 1e-9 * max(1.0, ep.T_e)
    if grid.size == 0 or grid.min() < ep.T_c - tol or grid.max() > ep.T_e + tol:
        raise ValueError(f"grid must lie within [{ep.T_c}, {ep.T_e}]")
    visible = Episode(ep.support, EventSequence(np.zeros(0), ep.task_id), ep.context,
                      ep.T_c, ep.T_e, ep.task_id)
    lam = model.conditioned(visible).intensity(grid)
    return np.column_stack([grid, lam])
