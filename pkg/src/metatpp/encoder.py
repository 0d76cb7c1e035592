"""Task representation encoder: support set + urban context -> z.

The support set is read by a gated recurrent cell (LSTM) over the pairs
(t_n, t_n - t_{n-1}), pooled by the mean over positions, then fused with the
context vector by a small tanh network.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc


@dataclass(frozen=True)
class EventSequence:
    timestamps: np.ndarray
    task_id: str = ""

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=np.float64).reshape(-1)
        if ts.size and np.any(np.diff(ts) < 0):
            raise ValueError(f"task {self.task_id!r}: timestamps must be non-decreasing")
        if ts.size and ts[0] < 0:
            raise ValueError(f"task {self.task_id!r}: negative timestamp {ts[0]}")
        object.__setattr__(self, "timestamps", ts)

    def __len__(self):
        return self.timestamps.size


@dataclass(frozen=True)
class EncoderConfig:
    hidden: int = 128
    support_dim: int = 128
    context_dim: int = 0
    task_dim: int = 128
    fusion_layers: int = 2
    fusion_units: int = 128
    bidirectional: bool = True


def init_encoder(params: dc.ParamStore, cfg: EncoderConfig, rng, prefix="enc"):
    H = cfg.hidden
    dirs = ("fwd", "bwd") if cfg.bidirectional else ("fwd",)
    for d in dirs:
        params.add(f"{prefix}.lstm_{d}.W", dc.glorot_uniform(rng, 2, 4 * H))
        params.add(f"{prefix}.lstm_{d}.U", dc.glorot_uniform(rng, H, 4 * H))
        params.add(f"{prefix}.lstm_{d}.b", np.zeros((1, 4 * H)))
    params.add(f"{prefix}.proj.W", dc.glorot_uniform(rng, len(dirs) * H, cfg.support_dim))
    params.add(f"{prefix}.proj.b", np.zeros((1, cfg.support_dim)))
    fan_in = cfg.support_dim + cfg.context_dim
    for i in range(cfg.fusion_layers):
        params.add(f"{prefix}.fuse{i}.W", dc.glorot_uniform(rng, fan_in, cfg.fusion_units))
        params.add(f"{prefix}.fuse{i}.b", np.zeros((1, cfg.fusion_units)))
        fan_in = cfg.fusion_units
    params.add(f"{prefix}.out.W", dc.glorot_uniform(rng, fan_in, cfg.task_dim))
    params.add(f"{prefix}.out.b", np.zeros((1, cfg.task_dim)))


def support_inputs(supports, time_scale):
    """Padded (steps, B, 2) inputs for forward and reversed order, plus lengths.

    Row n of a task holds (t_n, t_n - t_{n-1}) / time_scale with t_0 = 0.
    """
    lengths = np.array([len(s) for s in supports], dtype=np.intp)
    if np.any(lengths == 0):
        raise ValueError("empty support set")
    steps, B = int(lengths.max()), len(supports)
    fwd = np.zeros((steps, B, 2))
    bwd = np.zeros((steps, B, 2))
    for b, s in enumerate(supports):
        ts = np.asarray(s, dtype=np.float64) / time_scale
        pairs = np.stack([ts, np.diff(ts, prepend=0.0)], axis=1)
        fwd[: len(ts), b] = pairs
        bwd[: len(ts), b] = pairs[::-1]
    return fwd, bwd, lengths


def _lstm_pool(params, prefix, inputs, lengths):
    """Run one LSTM direction and return the masked mean of its outputs."""
    steps, B, _ = inputs.shape
    W, U, bias = params[prefix + ".W"], params[prefix + ".U"], params[prefix + ".b"]
    H = U.shape[0]
    h = c = None
    pooled = None
    for n in range(steps):
        gates = dc.add_row(dc.matmul(dc.constant(inputs[n]), W), bias)
        if h is not None:
            gates = gates + dc.matmul(h, U)
        i = dc.sigmoid(gates[:, :H])
        f = dc.sigmoid(gates[:, H:2 * H])
        g = dc.tanh(gates[:, 2 * H:3 * H])
        o = dc.sigmoid(gates[:, 3 * H:])
        c = i * g if c is None else f * c + i * g
        h = o * dc.tanh(c)
        # padded steps sit after each sequence's end, so they never feed valid ones
        w = (n < lengths).astype(np.float64) / lengths
        term = h * dc.constant(np.repeat(w[:, None], H, axis=1))
        pooled = term if pooled is None else pooled + term
    return pooled


def encode_support_batch(params, cfg: EncoderConfig, supports, time_scale, prefix="enc"):
    """Support representations for a batch of tasks, shape (B, support_dim)."""
    fwd, bwd, lengths = support_inputs(supports, time_scale)
    parts = [_lstm_pool(params, f"{prefix}.lstm_fwd", fwd, lengths)]
    if cfg.bidirectional:
        parts.append(_lstm_pool(params, f"{prefix}.lstm_bwd", bwd, lengths))
    # projection is affine, so projecting the pooled halves equals pooling projections
    pooled = parts[0] if len(parts) == 1 else dc.concat(parts, axis=1)
    return dc.add_row(dc.matmul(pooled, params[f"{prefix}.proj.W"]), params[f"{prefix}.proj.b"])


def encode_task_batch(params, cfg: EncoderConfig, zs, contexts, prefix="enc"):
    """Fuse support representations (B, K_S) with contexts (B, K_g) into z (B, K_z)."""
    B = zs.shape[0]
    if cfg.context_dim:
        contexts = np.asarray(contexts, dtype=np.float64).reshape(B, -1)
        if contexts.shape[1] != cfg.context_dim:
            raise ValueError(f"context length {contexts.shape[1]} != configured {cfg.context_dim}")
        x = dc.concat([zs, dc.constant(contexts)], axis=1)
    else:
        x = zs
    for i in range(cfg.fusion_layers):
        x = dc.tanh(dc.add_row(dc.matmul(x, params[f"{prefix}.fuse{i}.W"]), params[f"{prefix}.fuse{i}.b"]))
    return dc.add_row(dc.matmul(x, params[f"{prefix}.out.W"]), params[f"{prefix}.out.b"])


def encode_support(events, params, cfg: EncoderConfig, time_scale, prefix="enc"):
    ts = events.timestamps if isinstance(events, EventSequence) else np.asarray(events, float)
    if ts.size == 0:
        raise ValueError("empty support set")
    return encode_support_batch(params, cfg, [ts], time_scale, prefix).value[0]


def encode_task(zs, g, params, cfg: EncoderConfig, prefix="enc"):
    zs = dc.constant(np.asarray(zs, dtype=np.float64).reshape(1, -1))
    if zs.shape[1] != cfg.support_dim:
        raise ValueError(f"support representation length {zs.shape[1]} != {cfg.support_dim}")
    g = np.zeros((1, 0)) if g is None else np.asarray(g, dtype=np.float64).reshape(1, -1)
    if g.shape[1] != cfg.context_dim:
        raise ValueError(f"context length {g.shape[1]} != configured {cfg.context_dim}")
    return encode_task_batch(params, cfg, zs, g, prefix).value[0]
