"""Training objectives and the epoch driver.

Four loss kinds are supported:

``pit-baseline``
    fixed-size EEND head, labels zero-padded, permutation-invariant BCE.
``sc-pit``
    speaker-wise decoder fed its own thresholded estimates (no teacher forcing);
    the first S outputs are matched to the S labels, the rest scored as silence.
``sc-greedy-tf``
    at each iteration the unused label row with the lowest BCE is the target
    and becomes the next condition.
``sc-two-stage-pit``
    a gradient-free pass fixes the speaker order; a teacher-forced pass in that
    order produces the loss.

Every loss returns the raw BCE sum (a 1 x 1 node).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import model as M
from . import numcore as nc
from .assignment import PermutationResult, optimal_permutation
from .decode import binarize
from .model import ConfigError
from .numcore import Node, ShapeError

log = logging.getLogger(__name__)

BCE_EPS = 1e-7
LOSS_KINDS = ("pit-baseline", "sc-pit", "sc-greedy-tf", "sc-two-stage-pit")
ALIASES = {
    "baseline": "pit-baseline",
    "eend": "pit-baseline",
    "pit": "sc-pit",
    "greedy-tf": "sc-greedy-tf",
    "two-stage-pit": "sc-two-stage-pit",
}


def canonical_kind(kind: str) -> str:
    kind = ALIASES.get(kind, kind)
    if kind not in LOSS_KINDS:
        raise ConfigError(f"unknown loss kind {kind!r}; expected one of {LOSS_KINDS}")
    return kind


def bce(z, y) -> Node:
    """Summed BCE; 1-D inputs are treated as single rows."""
    if not isinstance(z, Node):
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    return nc.bce_sum(z, np.atleast_2d(np.asarray(y, dtype=np.float64)), BCE_EPS)


def _row_costs(z_row: np.ndarray, ys: np.ndarray) -> np.ndarray:
    zc = np.clip(z_row, BCE_EPS, 1.0 - BCE_EPS)
    return -(ys @ np.log(zc) + (1.0 - ys) @ np.log1p(-zc))


def pairwise_bce_costs(z, y) -> np.ndarray:
    """``cost[i, j] = bce(z[i], y[j])``."""
    z = np.asarray(z.value if isinstance(z, Node) else z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if z.ndim != 2 or y.ndim != 2 or z.shape != y.shape:
        raise ShapeError(f"pairwise costs need equal S x T shapes, got {z.shape} and {y.shape}")
    zc = np.clip(z, BCE_EPS, 1.0 - BCE_EPS)
    return -(np.log(zc) @ y.T + np.log1p(-zc) @ (1.0 - y).T)


def _best_perm(cost: np.ndarray) -> PermutationResult:
    # non-finite costs propagate as a NaN loss for the caller to report
    if not np.all(np.isfinite(cost)):
        return PermutationResult(tuple(range(cost.shape[0])), float("nan"))
    return optimal_permutation(cost)


def pit_loss(z, y) -> tuple[Node, PermutationResult]:
    """Permutation-invariant BCE; gradient flows through the chosen assignment only."""
    z = nc.as_node(z)
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2 or y.shape[0] != z.shape[0]:
        raise ShapeError(f"pit_loss: posteriors {z.shape} vs labels {y.shape}")
    best = _best_perm(pairwise_bce_costs(z, y))
    return nc.bce_sum(z, y[list(best.perm)], BCE_EPS), best


def _zero_pad(y: np.ndarray, rows: int) -> np.ndarray:
    out = np.zeros((rows, y.shape[1]))
    out[: y.shape[0]] = y
    return out


def _labels(y, s_max: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[None, :]
    if y.shape[0] > s_max:
        raise ConfigError(f"{y.shape[0]} label rows exceed s_max={s_max}")
    return y


def _sum(nodes: Sequence[Node]) -> Node:
    total = nodes[0]
    for n in nodes[1:]:
        total = nc.add(total, n)
    return total


# ----------------------------------------------------------- loss traces


@dataclass
class LossTrace:
    """Loss plus the intermediate quantities tests and diagnostics look at."""

    loss: Node
    order: tuple[int, ...]  # label row consumed at iterations 1..S
    posteriors: list[Node] = field(default_factory=list)
    conditions: list[np.ndarray] = field(default_factory=list)  # fed at each iteration
    stage1_posteriors: list[np.ndarray] = field(default_factory=list)
    stage1_conditions: list[np.ndarray] = field(default_factory=list)
    perm: PermutationResult | None = None


def _free_running(p: M.BoundParams, e: Node, s_max: int, threshold: float):
    """Decode s_max rows from embeddings ``e``, feeding back thresholded estimates."""
    T = e.shape[1]
    state = M.DecoderState.zeros(p.config.hidden_dim, T)
    cond = np.zeros(T)
    zs, conds = [], []
    for _ in range(s_max):
        conds.append(cond)
        z, state = M.decode_step(p, e, cond, state)
        zs.append(z)
        cond = binarize(z.value[0], threshold)
    return zs, conds


def _teacher_forced(p: M.BoundParams, e: Node, targets: np.ndarray):
    """Decode one row per target, feeding each target as the next condition."""
    T = e.shape[1]
    state = M.DecoderState.zeros(p.config.hidden_dim, T)
    cond = np.zeros(T)
    zs, conds, terms = [], [], []
    for target in targets:
        conds.append(cond)
        z, state = M.decode_step(p, e, cond, state)
        zs.append(z)
        terms.append(nc.bce_sum(z, target[None, :], BCE_EPS))
        cond = target
    return zs, conds, terms


def two_stage_pit_trace(params, x, y, s_max: int, threshold: float = 0.5,
                        rng: np.random.Generator | None = None) -> LossTrace:
    p = M.bind(params)
    y = _labels(y, s_max)
    S, T = y.shape[0], M._frames(x).shape[1]
    e = M.encode(p, x, rng)
    # stage 1 reuses the embedding values but on detached parameters, so
    # nothing it computes is recorded on the tape
    z1, c1 = _free_running(p.detached(), nc.constant(e), s_max, threshold)
    z1 = [z.value[0] for z in z1]
    if S:
        best = _best_perm(pairwise_bce_costs(np.array(z1[:S]), y))
    else:
        best = PermutationResult((), 0.0)
    targets = np.zeros((s_max, T))
    targets[:S] = y[list(best.perm)]
    zs, conds, terms = _teacher_forced(p, e, targets)
    return LossTrace(_sum(terms), best.perm, zs, conds, z1, c1, best)


def two_stage_pit_loss(params, x, y, s_max: int, threshold: float = 0.5,
                       rng: np.random.Generator | None = None) -> Node:
    return two_stage_pit_trace(params, x, y, s_max, threshold, rng).loss


def greedy_tf_trace(params, x, y, s_max: int,
                    rng: np.random.Generator | None = None) -> LossTrace:
    p = M.bind(params)
    y = _labels(y, s_max)
    S = y.shape[0]
    e = M.encode(p, x, rng)
    T = e.shape[1]
    state = M.DecoderState.zeros(p.config.hidden_dim, T)
    cond = np.zeros(T)
    remaining = list(range(S))
    order, zs, conds, terms = [], [], [], []
    for _ in range(s_max):
        conds.append(cond)
        z, state = M.decode_step(p, e, cond, state)
        zs.append(z)
        if remaining:
            costs = _row_costs(z.value[0], y[remaining])
            j = remaining.pop(int(np.argmin(costs)))
            order.append(j)
            target = y[j]
        else:
            target = np.zeros(T)
        terms.append(nc.bce_sum(z, target[None, :], BCE_EPS))
        cond = target
    return LossTrace(_sum(terms), tuple(order), zs, conds)


def greedy_tf_loss(params, x, y, s_max: int, rng: np.random.Generator | None = None) -> Node:
    return greedy_tf_trace(params, x, y, s_max, rng).loss


def sc_pit_loss(params, x, y, s_max: int, threshold: float = 0.5,
                rng: np.random.Generator | None = None) -> Node:
    """Speaker-wise decoder without teacher forcing."""
    p = M.bind(params)
    y = _labels(y, s_max)
    S = y.shape[0]
    zs, _ = _free_running(p, M.encode(p, x, rng), s_max, threshold)
    terms = []
    if S:
        head, _ = pit_loss(nc.concat_vertical(*zs[:S]), y)
        terms.append(head)
    terms += [nc.bce_sum(z, np.zeros(z.shape), BCE_EPS) for z in zs[S:]]
    return _sum(terms)


def eend_pit_loss(params, x, y, rng: np.random.Generator | None = None) -> Node:
    p = M.bind(params)
    s_fixed = p.config.eend_speakers
    y = _labels(y, s_fixed)
    z = M.eend_forward(p, x, s_fixed, rng)
    return pit_loss(z, _zero_pad(y, s_fixed))[0]


def compute_loss(kind: str, params, x, y, s_max: int, threshold: float = 0.5,
                 rng: np.random.Generator | None = None) -> Node:
    kind = canonical_kind(kind)
    if kind == "pit-baseline":
        return eend_pit_loss(params, x, y, rng)
    if kind == "sc-pit":
        return sc_pit_loss(params, x, y, s_max, threshold, rng)
    if kind == "sc-greedy-tf":
        return greedy_tf_loss(params, x, y, s_max, rng)
    return two_stage_pit_loss(params, x, y, s_max, threshold, rng)


# ----------------------------------------------------------- training


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainHyper:
    lr: float = 1e-3
    batch_size: int = 4
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    seed: int = 0
    s_max: int = 4
    threshold: float = 0.5
    clip_norm: float | None = None


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float  # per (row x frame), averaged over recordings
    steps: int
    recordings: int


def _rows_scored(kind: str, cfg: M.ModelConfig, s_max: int) -> int:
    return cfg.eend_speakers if kind == "pit-baseline" else s_max


def batch_gradients(params: M.ModelParams, batch, kind: str, hyper: TrainHyper,
                    rng: np.random.Generator | None):
    """Summed loss and gradients over one minibatch, recordings in order."""
    tape = nc.Tape()
    bound = M.bind(params, tape)
    total, norm = None, 0.0
    rows = _rows_scored(kind, params.config, hyper.s_max)
    for x, y in batch:
        loss = compute_loss(kind, bound, x, y, hyper.s_max, hyper.threshold, rng)
        norm += float(loss.value[0, 0]) / (rows * M._frames(x).shape[1])
        total = loss if total is None else nc.add(total, loss)
    return total, nc.backward(tape, total), norm


def clip_gradients(grads: dict, max_norm: float | None) -> dict:
    if not max_norm:
        return grads
    norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm <= max_norm:
        return grads
    return {k: g * (max_norm / norm) for k, g in grads.items()}


def train_epoch(params: M.ModelParams, dataset: Sequence, loss_kind: str,
                optim: nc.OptimState, hyper: TrainHyper, epoch: int = 0,
                max_steps: int | None = None):
    """One shuffled pass of minibatch Adam steps.

    ``dataset`` holds ``(FeatureSequence, labels)`` pairs.  Shuffling and
    dropout draw from a generator seeded by ``(hyper.seed, epoch)``, so an
    epoch is reproducible on its own, which is what checkpoint resume relies on.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    kind = canonical_kind(loss_kind)
    rng = np.random.default_rng([hyper.seed, epoch])
    order = rng.permutation(len(dataset))
    drop_rng = rng if params.config.dropout > 0 else None
    losses, steps = [], 0
    for start in range(0, len(order), hyper.batch_size):
        if max_steps is not None and steps >= max_steps:
            break
        batch = [dataset[i] for i in order[start:start + hyper.batch_size]]
        total, grads, norm = batch_gradients(params, batch, kind, hyper, drop_rng)
        value = float(total.value[0, 0])
        if not np.isfinite(value):
            raise TrainingError(
                f"non-finite loss {value} at epoch {epoch}, step {optim.step + 1}")
        grads = clip_gradients(grads, hyper.clip_norm)
        new, optim = nc.adam_step(params.arrays, grads, optim, hyper.lr,
                                  hyper.beta1, hyper.beta2, hyper.eps)
        params = M.ModelParams(params.config, new)
        losses.append(norm / len(batch))
        steps += 1
    stats = EpochStats(epoch, float(np.mean(losses)), steps, min(len(order), steps * hyper.batch_size))
    log.debug("epoch %d: loss %.6f over %d steps", epoch, stats.mean_loss, steps)
    return params, optim, stats
