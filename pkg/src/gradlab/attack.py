"""Gradient-matching reconstruction of token sequences from partial gradients.

The attacker optimizes continuous dummy embeddings so that the gradients
they induce on the *selected* parameter blocks match the observed ones
under cosine distance, then snaps the embeddings to vocabulary rows and
greedily reorders the tokens with a fluency scorer.

The matching objective is a function of gradients, so its own gradient is
a second derivative; the tensor engine's graph-recorded adjoints make that
a plain ``grad`` call.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from . import autodiff as T
from .errors import ConfigError, DegenerateTargetError, InputError, UsageError
from .model import ModelConfig, ParamStore, forward
from .selection import GradientView, Selection, resolve, view_weights
from .autodiff import Tensor

_DENOM_FLOOR = 1e-12
# a target block whose norm sits at float-noise level carries no direction
# to match (e.g. attention key biases, whose gradient is exactly zero in
# real arithmetic because softmax ignores per-row constant shifts)
_ZERO_NORM_TOL = 1e-12


class AttackAbort(RuntimeError):
    """A trial hit a non-finite loss; counted as a failed seed upstream."""


class SequenceScorer(Protocol):
    def score(self, tokens) -> float: ...


@dataclass(frozen=True)
class AttackConfig:
    steps: int = 2000
    lr: float = 0.01  # cosine-decayed to 10% of the initial value
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    init_candidates: int = 4
    reg_weight: float = 0.01
    projection_period: int = 200
    reorder_budget: int = 200
    distance: str = "cosine"
    labels_known: bool = True
    length_known: bool = True
    seed: int = 0
    trace_every: int = 50

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.lr <= 0 or self.adam_eps <= 0:
            raise ConfigError("rates must be positive")
        if self.init_candidates < 1:
            raise ConfigError("init_candidates must be >= 1")
        if self.projection_period < 1:
            raise ConfigError("projection_period must be >= 1")
        if self.distance != "cosine":
            raise ConfigError(f"unsupported distance {self.distance!r}")

    def to_dict(self) -> dict:
        return {
            "steps": self.steps,
            "lr": self.lr,
            "adam_beta1": self.adam_beta1,
            "adam_beta2": self.adam_beta2,
            "adam_eps": self.adam_eps,
            "init_candidates": self.init_candidates,
            "reg_weight": self.reg_weight,
            "projection_period": self.projection_period,
            "reorder_budget": self.reorder_budget,
            "distance": self.distance,
            "labels_known": self.labels_known,
            "length_known": self.length_known,
            "seed": self.seed,
            "trace_every": self.trace_every,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        return cls(**d)


@dataclass
class ReconstructionResult:
    tokens: list[list[int]]
    final_loss: float
    loss_trace: list[float]
    wall_time: float
    selection: str
    seed: int
    labels: list[int] = field(default_factory=list)


# ---------------------------------------------------------------------------
# distance / objective
# ---------------------------------------------------------------------------


def cosine_distance(a, b):
    """1 - <a, b> / (|a| * |b|) over the flattened block; in [0, 2].

    ``a`` is the differentiable side; ``b`` is a constant target.  The
    denominator is floored at 1e-12, which defines the distance as 1 when
    |a| = 0 and keeps the value exactly invariant under positive rescaling
    of the target.
    """
    b_data = b.data if isinstance(b, Tensor) else np.asarray(b)
    nb = float(np.linalg.norm(b_data))
    if nb == 0.0:
        raise DegenerateTargetError("target block has zero norm")
    if isinstance(a, Tensor):
        if a.shape != b_data.shape:
            raise UsageError(f"shape mismatch {a.shape} vs {b_data.shape}")
        dot = T.tsum(T.mul(a, T.constant(b_data)))
        na = T.sqrt(T.tsum(T.mul(a, a)))
        denom = T.maximum(T.mul(na, nb), _DENOM_FLOOR)
        return T.sub(1.0, T.div(dot, denom))
    a = np.asarray(a)
    if a.shape != b_data.shape:
        raise UsageError(f"shape mismatch {a.shape} vs {b_data.shape}")
    denom = max(float(np.linalg.norm(a)) * nb, _DENOM_FLOOR)
    return 1.0 - float(np.sum(a * b_data)) / denom


def matching_loss(
    dummy: GradientView,
    target: GradientView,
    weights: Sequence[float] | None = None,
):
    """Weighted sum of per-block cosine distances; graph-recorded when the
    dummy side is made of recorded tensors.

    Zero-norm target blocks are excluded with a warning (a frozen or fully
    clipped block carries no direction to match).
    """
    if len(dummy) != len(target):
        raise UsageError("views have different block counts")
    if weights is None:
        weights = [1.0] * len(dummy)
    if len(weights) != len(dummy):
        raise UsageError("weights must align with the views")

    total = None
    skipped = []
    for (d_name, d_block), (t_name, t_block), w in zip(dummy, target, weights):
        if d_name != t_name:
            raise UsageError(f"views misaligned: {d_name!r} vs {t_name!r}")
        try:
            dist = cosine_distance(d_block, t_block)
        except DegenerateTargetError:
            skipped.append(t_name)
            continue
        term = T.mul(dist, w) if isinstance(dist, Tensor) else dist * w
        if total is None:
            total = term
        elif isinstance(total, Tensor) or isinstance(term, Tensor):
            total = T.add(total, term)
        else:
            total = total + term
    if skipped:
        warnings.warn(
            f"excluded zero-norm target blocks: {', '.join(skipped)}",
            RuntimeWarning,
            stacklevel=2,
        )
    if total is None:
        raise DegenerateTargetError("every selected target block has zero norm")
    return total


# ---------------------------------------------------------------------------
# discretization
# ---------------------------------------------------------------------------


def project_to_tokens(embeddings, table) -> np.ndarray:
    """Nearest vocabulary row by cosine similarity, per position.

    Ties break toward the lowest token id (argmax returns the first hit).
    """
    x = embeddings.data if isinstance(embeddings, Tensor) else np.asarray(embeddings)
    tab = table.data if isinstance(table, Tensor) else np.asarray(table)
    xn = x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), _DENOM_FLOOR)
    tn = tab / np.maximum(np.linalg.norm(tab, axis=-1, keepdims=True), _DENOM_FLOOR)
    sims = xn @ tn.T
    return np.argmax(sims, axis=-1).astype(np.int64)


def reorder(tokens, scorer: SequenceScorer, budget: int) -> list[int]:
    """Greedy first-improvement local search over {adjacent swap, relocate}.

    Preserves the token multiset; spends at most ``budget`` scorer calls.
    """
    seq = [int(t) for t in tokens]
    if budget <= 0 or len(seq) < 2 or scorer is None:
        return seq
    best = scorer.score(seq)
    evals = 1
    improved = True
    while improved and evals < budget:
        improved = False
        for cand in _moves(seq):
            score = scorer.score(cand)
            evals += 1
            if score > best:
                seq, best = cand, score
                improved = True
                break
            if evals >= budget:
                return seq
    return seq


def _moves(seq: list[int]):
    n = len(seq)
    for i in range(n - 1):
        cand = seq.copy()
        cand[i], cand[i + 1] = cand[i + 1], cand[i]
        yield cand
    for i in range(n):
        for j in range(n):
            if j == i or j == i + 1:
                continue
            cand = seq.copy()
            tok = cand.pop(i)
            cand.insert(j if j < i else j - 1, tok)
            yield cand


# ---------------------------------------------------------------------------
# label inference
# ---------------------------------------------------------------------------


def infer_labels(target: GradientView, batch_size: int = 1) -> list[int]:
    """Recover the label from classifier output gradients (B = 1 only).

    Under cross-entropy the output gradient factor is softmax - onehot: the
    true class is the unique negative bias coordinate, and the unique weight
    column whose sign pattern opposes the others'.
    """
    if batch_size != 1:
        raise UsageError("label inference supports batch size 1 only")
    blocks = dict(target)
    bias = blocks.get("cls.out.bias")
    if bias is not None:
        data = bias.data if isinstance(bias, Tensor) else np.asarray(bias)
        return [int(np.argmin(data))]
    weight = blocks.get("cls.out.weight")
    if weight is None:
        raise UsageError("selection does not include classifier gradients")
    data = weight.data if isinstance(weight, Tensor) else np.asarray(weight)
    k = data.shape[1]
    if k < 3:
        # for K=2 the two columns are exactly antipodal; the bias breaks the tie
        raise UsageError("weight-only label inference needs K >= 3")
    signs = np.sign(data)
    majority = np.sign(signs.sum(axis=1, keepdims=True))
    agreement = (signs * majority).sum(axis=0)
    return [int(np.argmin(agreement))]


# ---------------------------------------------------------------------------
# the reconstruction loop
# ---------------------------------------------------------------------------


def _matchable(view: GradientView) -> GradientView:
    # embed.word cannot receive gradient when the forward runs on continuous
    # dummy embeddings, so its target carries no usable matching signal
    return [(n, b) for n, b in view if n != "embed.word"]


def _dummy_view_value(params, config, x_data, labels, names) -> list[np.ndarray]:
    """Numeric dummy gradients for the selected blocks (no recording)."""
    x = Tensor(np.asarray(x_data))
    logits = forward(params, config, x)
    loss = T.cross_entropy_with_logits(logits, labels)
    grads = T.grad(loss, [params[n] for n in names], create_graph=False)
    return [g.data for g in grads]


def _matching_value(dummy_blocks, target_blocks, weights) -> float:
    total = 0.0
    for d, (t, w) in zip(dummy_blocks, zip(target_blocks, weights)):
        nb = float(np.linalg.norm(t))
        if nb == 0.0:
            continue
        denom = max(float(np.linalg.norm(d)) * nb, _DENOM_FLOOR)
        total += w * (1.0 - float(np.sum(d * t)) / denom)
    return total


def reconstruct(
    params: ParamStore,
    config: ModelConfig,
    target: GradientView,
    selection,
    labels,
    length: int,
    batch_size: int,
    attack: AttackConfig,
    scorer: SequenceScorer | None = None,
    init_embeddings: np.ndarray | None = None,
) -> ReconstructionResult:
    """LAMP-style gradient matching against the selected target blocks.

    Candidate embeddings start from the best of ``init_candidates`` random
    draws, follow Adam on (matching loss + embedding-norm regularizer), and
    are periodically snapped to vocabulary rows; a snapped candidate replaces
    the continuous one only if it does not increase the matching loss.  The
    emitted tokens are the best discrete candidate seen.
    """
    t_start = time.perf_counter()
    selection = Selection.parse(selection)
    rng = np.random.default_rng(attack.seed)

    pairs = [
        (n, b, w)
        for (n, b), w in zip(target, view_weights(selection, config))
        if n != "embed.word"
    ]
    if not pairs:
        raise DegenerateTargetError("selection leaves no matchable blocks")
    names = [n for n, _, _ in pairs]
    target_blocks = [
        np.asarray(b.data if isinstance(b, Tensor) else b) for _, b, _ in pairs
    ]
    weights = [w for _, _, w in pairs]
    live = [i for i, t in enumerate(target_blocks) if float(np.linalg.norm(t)) > 0]
    if not live:
        raise DegenerateTargetError("every selected target block has zero norm")
    if len(live) < len(names):
        dropped = [names[i] for i in range(len(names)) if i not in set(live)]
        warnings.warn(
            f"excluded zero-norm target blocks: {', '.join(dropped)}",
            RuntimeWarning,
            stacklevel=2,
        )
        names = [names[i] for i in live]
        target_blocks = [target_blocks[i] for i in live]
        weights = [weights[i] for i in live]

    if labels is None:
        if attack.labels_known:
            raise UsageError("labels_known is set but no labels were given")
        labels = infer_labels(target, batch_size)
    labels = list(np.asarray(labels).reshape(-1))
    if len(labels) != batch_size:
        raise InputError(f"need {batch_size} labels, got {len(labels)}")

    table = params["embed.word"].data
    init_std = float(table.std())
    mean_row_norm = float(np.linalg.norm(table, axis=1).mean())
    d = config.hidden_dim
    param_tensors = [params[n] for n in names]
    const_targets = [T.constant(t) for t in target_blocks]

    def recorded_loss(x_leaf: Tensor):
        logits = forward(params, config, x_leaf)
        loss = T.cross_entropy_with_logits(logits, labels)
        grads = T.grad(loss, param_tensors, create_graph=True)
        total = None
        for g, t_const, t_data, w in zip(
            grads, const_targets, target_blocks, weights
        ):
            nb = float(np.linalg.norm(t_data))
            dot = T.tsum(T.mul(g, t_const))
            na = T.sqrt(T.tsum(T.mul(g, g)))
            denom = T.maximum(T.mul(na, nb), _DENOM_FLOOR)
            dist = T.sub(1.0, T.div(dot, denom))
            term = T.mul(dist, w)
            total = term if total is None else T.add(total, term)
        return total

    def value_loss(x_data) -> float:
        blocks = _dummy_view_value(params, config, x_data, labels, names)
        return _matching_value(blocks, target_blocks, weights)

    # multi-candidate init: keep the draw with the lowest matching loss
    if init_embeddings is not None:
        x = np.array(init_embeddings, dtype=np.float64, copy=True)
        if x.shape != (batch_size, length, d):
            raise InputError(f"init embeddings must be {(batch_size, length, d)}")
    else:
        best_x, best_val = None, math.inf
        for _ in range(attack.init_candidates):
            cand = rng.normal(0.0, init_std, size=(batch_size, length, d))
            val = value_loss(cand)
            if val < best_val:
                best_x, best_val = cand, val
        x = best_x

    m = np.zeros_like(x)
    v = np.zeros_like(x)
    trace: list[float] = []
    best_tokens: np.ndarray | None = None
    best_disc_loss = math.inf

    def discrete_step(x_now, cont_loss: float):
        """Project + reorder; adopt the snapped candidate if not worse."""
        nonlocal best_tokens, best_disc_loss
        ids = project_to_tokens(x_now, table)
        if scorer is not None and attack.reorder_budget > 0:
            ids = np.asarray(
                [reorder(row, scorer, attack.reorder_budget) for row in ids],
                dtype=np.int64,
            )
        x_disc = table[ids].astype(np.float64)
        disc_loss = value_loss(x_disc)
        if disc_loss < best_disc_loss:
            best_tokens, best_disc_loss = ids.copy(), disc_loss
        if disc_loss <= cont_loss:
            return x_disc, disc_loss
        return x_now, cont_loss

    lr0 = attack.lr
    lr_final = 0.1 * lr0
    for step in range(attack.steps):
        leaf = Tensor(np.ascontiguousarray(x))
        mloss = recorded_loss(leaf)
        mloss_val = float(mloss.item())
        if not math.isfinite(mloss_val):
            raise AttackAbort(f"non-finite matching loss at step {step}")
        if step % attack.trace_every == 0:
            trace.append(mloss_val)

        if attack.reg_weight > 0:
            row_norms = T.sqrt(T.tsum(T.mul(leaf, leaf), axis=-1))
            devs = T.sub(row_norms, mean_row_norm)
            objective = T.add(
                mloss, T.mul(T.tmean(T.mul(devs, devs)), attack.reg_weight)
            )
        else:
            objective = mloss
        gx = T.grad(objective, [leaf], create_graph=False)[0].data

        t = step + 1
        lr_t = lr_final + 0.5 * (lr0 - lr_final) * (
            1.0 + math.cos(math.pi * step / max(1, attack.steps))
        )
        m = attack.adam_beta1 * m + (1 - attack.adam_beta1) * gx
        v = attack.adam_beta2 * v + (1 - attack.adam_beta2) * gx * gx
        m_hat = m / (1 - attack.adam_beta1**t)
        v_hat = v / (1 - attack.adam_beta2**t)
        x = x - lr_t * m_hat / (np.sqrt(v_hat) + attack.adam_eps)

        if (step + 1) % attack.projection_period == 0 and step + 1 < attack.steps:
            x, _ = discrete_step(x, value_loss(x))

    final_cont = value_loss(x)
    if not math.isfinite(final_cont):
        raise AttackAbort("non-finite matching loss at final evaluation")
    discrete_step(x, final_cont)
    trace.append(best_disc_loss)

    return ReconstructionResult(
        tokens=[[int(t) for t in row] for row in best_tokens],
        final_loss=float(best_disc_loss),
        loss_trace=trace,
        wall_time=time.perf_counter() - t_start,
        selection=str(selection),
        seed=attack.seed,
        labels=[int(l) for l in labels],
    )


def attack_cell(
    params: ParamStore,
    config: ModelConfig,
    grads,
    selection,
    labels,
    length: int,
    batch_size: int,
    attack: AttackConfig,
    scorer: SequenceScorer | None = None,
) -> ReconstructionResult:
    """Resolve the selection against a GradStore and run reconstruct."""
    view = resolve(Selection.parse(selection), grads, config)
    return reconstruct(
        params,
        config,
        view,
        selection,
        labels,
        length,
        batch_size,
        attack,
        scorer=scorer,
    )
