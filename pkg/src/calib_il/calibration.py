"""Affine score correction and the per-state convex calibration fit.

Two correction layers operate on a score matrix at state s. The classic one
rescales only the newest class group with a single (alpha, beta) pair. The
per-group one keeps one pair per (current state, first-seen state), so the
amount of correction can differ for classes learned at different times.

The fit minimizes mean cross-entropy of the corrected softmax plus an L2
penalty anchored at the identity pair (alpha=1, beta=0). Corrected scores
are linear in the parameters, so the objective is convex and the analytic
gradient is a plain per-group sum of softmax residuals.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .logits import StateLogits
from .schedule import StateSchedule

PROB_FLOOR = 1e-12


def softmax(scores: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max-subtraction for overflow safety.

    Accepts a single score vector or a matrix of row vectors; float64
    accumulation throughout.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("softmax of an empty score vector is undefined")
    shifted = scores - scores.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def cross_entropy(probs: np.ndarray, labels) -> float:
    """Mean negative log-probability of the true classes.

    ``probs`` may be one probability vector with an integer label, or a
    matrix with one label per row. Probabilities are floored at 1e-12 so
    pathological inputs cannot produce -inf.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim == 1:
        probs = probs[None, :]
        labels = np.asarray([labels])
    labels = np.asarray(labels, dtype=np.int64)
    picked = probs[np.arange(len(labels)), labels]
    return float(np.mean(-np.log(np.maximum(picked, PROB_FLOOR))))


@dataclass(frozen=True)
class CalibConfig:
    """Optimizer settings for the calibration fit."""

    epochs: int = 300
    learning_rate: float = 1e-3
    l2_alpha: float = 5e-3
    l2_beta: float = 5e-2
    batch_size: int = 128
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.l2_alpha < 0 or self.l2_beta < 0:
            raise ValueError("L2 penalties must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")


class CalibrationTable:
    """Triangular bank of (alpha, beta) pairs for states 2..S.

    State s holds one pair per group k in [1, s], i.e. (2+3+...+S) pairs
    and (S+2)(S-1) stored scalars in total.
    """

    def __init__(self, num_states: int, entries: dict[tuple[int, int], tuple[float, float]]):
        if num_states < 2:
            raise ValueError("a calibration table needs at least 2 states")
        expected = {(s, k) for s in range(2, num_states + 1) for k in range(1, s + 1)}
        keys = set(entries)
        if keys != expected:
            missing = sorted(expected - keys)
            extra = sorted(keys - expected)
            parts = []
            if missing:
                parts.append(f"missing pairs {missing}")
            if extra:
                parts.append(f"unexpected pairs {extra}")
            raise ValueError("incomplete calibration table: " + "; ".join(parts))
        clean = {}
        for key, (alpha, beta) in entries.items():
            alpha, beta = float(alpha), float(beta)
            if not (np.isfinite(alpha) and np.isfinite(beta)):
                raise ValueError(f"non-finite pair at {key}: ({alpha}, {beta})")
            clean[key] = (alpha, beta)
        self.num_states = int(num_states)
        self.entries = clean

    @classmethod
    def identity(cls, num_states: int) -> "CalibrationTable":
        entries = {
            (s, k): (1.0, 0.0)
            for s in range(2, num_states + 1)
            for k in range(1, s + 1)
        }
        return cls(num_states, entries)

    def pair(self, state: int, group: int) -> tuple[float, float]:
        try:
            return self.entries[(state, group)]
        except KeyError:
            raise ValueError(f"no pair stored for state {state}, group {group}") from None

    def pairs_for_state(self, state: int) -> tuple[np.ndarray, np.ndarray]:
        """Alpha and beta vectors over groups 1..state."""
        if not 2 <= state <= self.num_states:
            raise ValueError(f"state {state} not covered by this table")
        alpha = np.array([self.entries[(state, k)][0] for k in range(1, state + 1)])
        beta = np.array([self.entries[(state, k)][1] for k in range(1, state + 1)])
        return alpha, beta

    def collapse_to_single_pair(self) -> "CalibrationTable":
        """Keep only each state's newest-group pair; past groups go identity.

        The result applies the classic single-pair correction of the raw
        new-class scores while leaving past scores untouched.
        """
        entries = {}
        for s in range(2, self.num_states + 1):
            for k in range(1, s):
                entries[(s, k)] = (1.0, 0.0)
            entries[(s, s)] = self.entries[(s, s)]
        return CalibrationTable(self.num_states, entries)

    def __eq__(self, other):
        return (
            isinstance(other, CalibrationTable)
            and self.num_states == other.num_states
            and self.entries == other.entries
        )

    def __repr__(self):
        return f"CalibrationTable(num_states={self.num_states}, pairs={len(self.entries)})"


def apply_bic(logits: StateLogits, alpha: float, beta: float) -> np.ndarray:
    """Rescale only the newest class group: columns of group s become
    alpha * o + beta, all earlier groups stay raw."""
    if logits.state < 2:
        raise ValueError("state 1 has no past/new split, correction undefined")
    alpha, beta = float(alpha), float(beta)
    if not (np.isfinite(alpha) and np.isfinite(beta)):
        raise ValueError(f"non-finite correction pair ({alpha}, {beta})")
    out = logits.matrix.copy()
    new = logits.schedule.group_slice(logits.state, logits.state)
    out[:, new] = alpha * out[:, new] + beta
    return out


def apply_table(logits: StateLogits, table: CalibrationTable) -> np.ndarray:
    """Apply the per-group pairs of ``table`` for the logits' state."""
    s = logits.state
    if s < 2:
        raise ValueError("state 1 has no correction pairs")
    if table.num_states < s:
        raise ValueError(
            f"table covers states up to {table.num_states}, logits are at state {s}"
        )
    alpha, beta = table.pairs_for_state(s)
    groups = logits.schedule.column_groups(s)
    if len(groups) != logits.matrix.shape[1]:
        raise ValueError("group map inconsistent with column count")
    col_alpha = alpha[groups - 1]
    col_beta = beta[groups - 1]
    return logits.matrix * col_alpha + col_beta


def _group_starts(schedule: StateSchedule, state: int) -> np.ndarray:
    sizes = schedule.classes_per_state[:state]
    return np.concatenate(([0], np.cumsum(sizes)[:-1])).astype(np.int64)


def regularized_loss(
    matrix: np.ndarray,
    labels: np.ndarray,
    alpha: np.ndarray,
    beta: np.ndarray,
    schedule: StateSchedule,
    state: int,
    config: CalibConfig,
) -> float:
    """Mean corrected cross-entropy plus the identity-anchored L2 penalty."""
    groups = schedule.column_groups(state)
    corrected = matrix * alpha[groups - 1] + beta[groups - 1]
    data = cross_entropy(softmax(corrected), labels)
    penalty = config.l2_alpha * np.sum((alpha - 1.0) ** 2) + config.l2_beta * np.sum(
        beta**2
    )
    return data + float(penalty)


def loss_gradient(
    matrix: np.ndarray,
    labels: np.ndarray,
    alpha: np.ndarray,
    beta: np.ndarray,
    schedule: StateSchedule,
    state: int,
    config: CalibConfig,
) -> tuple[np.ndarray, np.ndarray]:
    """Analytic gradient of ``regularized_loss`` w.r.t. alpha and beta.

    Corrected scores are linear in the pairs, so the gradient per group is
    the softmax residual (q - onehot) summed over the group's columns,
    weighted by the raw scores for alpha and by 1 for beta, averaged over
    the batch, plus the penalty gradient.
    """
    if matrix.shape[0] == 0:
        raise ValueError("gradient of an empty batch is undefined")
    groups = schedule.column_groups(state)
    corrected = matrix * alpha[groups - 1] + beta[groups - 1]
    q = softmax(corrected)
    residual = q.copy()
    residual[np.arange(len(labels)), labels] -= 1.0
    residual /= len(labels)

    starts = _group_starts(schedule, state)
    per_col_alpha = (residual * matrix).sum(axis=0)
    per_col_beta = residual.sum(axis=0)
    grad_alpha = np.add.reduceat(per_col_alpha, starts)
    grad_beta = np.add.reduceat(per_col_beta, starts)
    grad_alpha += 2.0 * config.l2_alpha * (alpha - 1.0)
    grad_beta += 2.0 * config.l2_beta * beta
    return grad_alpha, grad_beta


@dataclass
class StateFit:
    """Fitted pairs for one state, with the fit's loss trajectory endpoints."""

    state: int
    alpha: np.ndarray
    beta: np.ndarray
    initial_loss: float
    final_loss: float

    def pairs(self) -> dict[tuple[int, int], tuple[float, float]]:
        return {
            (self.state, k + 1): (float(self.alpha[k]), float(self.beta[k]))
            for k in range(self.state)
        }


class _Adam:
    """Plain Adam with bias correction over a flat parameter vector."""

    def __init__(self, size: int, config: CalibConfig):
        self.lr = config.learning_rate
        self.b1 = config.adam_beta1
        self.b2 = config.adam_beta2
        self.eps = config.adam_eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.b1 * self.m + (1.0 - self.b1) * grad
        self.v = self.b2 * self.v + (1.0 - self.b2) * grad**2
        m_hat = self.m / (1.0 - self.b1**self.t)
        v_hat = self.v / (1.0 - self.b2**self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def fit_state_pairs(val_logits: StateLogits, config: CalibConfig) -> StateFit:
    """Fit the (alpha, beta) pairs of one state on its validation scores.

    Starts from the identity pairs and runs Adam over shuffled mini-batches
    for ``config.epochs`` passes. The iterate with the lowest full-set
    regularized loss is kept, so the result never ends above the identity
    initialization. The shuffling stream is seeded from (config.seed,
    state), which makes fits independent of the order states are visited.
    """
    s = val_logits.state
    if s < 2:
        raise ValueError("state 1 has no pairs to fit")
    counts = val_logits.group_counts()
    missing = [k for k, n in counts.items() if n == 0]
    if missing:
        raise ValueError(f"validation set has no samples for groups {missing}")

    schedule = val_logits.schedule
    matrix, labels = val_logits.matrix, val_logits.labels
    alpha = np.ones(s)
    beta = np.zeros(s)

    def full_loss(a, b):
        return regularized_loss(matrix, labels, a, b, schedule, s, config)

    best_loss = full_loss(alpha, beta)
    initial_loss = best_loss
    best = (alpha.copy(), beta.copy())

    rng = np.random.default_rng([config.seed, s])
    opt = _Adam(2 * s, config)
    params = np.concatenate([alpha, beta])
    n = len(labels)
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            ga, gb = loss_gradient(
                matrix[idx], labels[idx], params[:s], params[s:], schedule, s, config
            )
            params = opt.step(params, np.concatenate([ga, gb]))
        loss = full_loss(params[:s], params[s:])
        if loss < best_loss:
            best_loss = loss
            best = (params[:s].copy(), params[s:].copy())
    return StateFit(s, best[0], best[1], initial_loss, best_loss)


def fit_table(
    per_state_val_logits: list[StateLogits], config: CalibConfig
) -> tuple[CalibrationTable, list[StateFit]]:
    """Fit every state 2..S independently and assemble the full table."""
    if not per_state_val_logits:
        raise ValueError("need validation logits for states 2..S")
    schedule = per_state_val_logits[0].schedule
    num_states = schedule.num_states
    by_state = {}
    for logits in per_state_val_logits:
        if logits.schedule != schedule:
            raise ValueError("all validation logits must share one schedule")
        if logits.state in by_state:
            raise ValueError(f"duplicate validation logits for state {logits.state}")
        by_state[logits.state] = logits
    expected = set(range(2, num_states + 1))
    missing = sorted(expected - set(by_state))
    if missing:
        raise ValueError(f"missing validation logits for states {missing}")
    unexpected = sorted(set(by_state) - expected)
    if unexpected:
        raise ValueError(
            f"unexpected validation logits for states {unexpected}; "
            "the fit covers states 2..S")

    entries = {}
    fits = []
    for s in range(2, num_states + 1):
        fit = fit_state_pairs(by_state[s], config)
        entries.update(fit.pairs())
        fits.append(fit)
    return CalibrationTable(num_states, entries), fits
