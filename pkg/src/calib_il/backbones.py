"""Desk-scale incremental backbones: a two-layer relu MLP trained with
SGD+momentum, grown by one output group per state.

Four memoryless update rules share the training loop and differ only in
how they fight forgetting:

- ``ftplus``    finetune with past output rows bitwise frozen
- ``siw``       plain finetune, then restore each class row to its
                initial-training snapshot and standardize all rows
- ``lwf``       finetune plus a soft-target distillation term on past
                columns against the previous model
- ``lucir_lite`` cosine-similarity classifier plus feature-direction
                distillation with an adaptive weight

Updates never mutate their input model; each returns a fresh one.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import SpecError
from .logits import StateLogits
from .schedule import StateSchedule
from .synth import StateView

KINDS = ("ftplus", "siw", "lwf", "lucir_lite")

# Initial scale of the cosine-score multiplier; trained with the rest.
ETA_INIT = 10.0

_NORM_FLOOR = 1e-8


@dataclass(frozen=True)
class BackboneConfig:
    kind: str = "ftplus"
    hidden_dim: int = 64
    epochs_initial: int = 60
    epochs_incremental: int = 30
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 32
    distill_temperature: float = 2.0
    distill_weight: float = 1.0
    lucir_lambda_base: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SpecError(f"unknown backbone kind {self.kind!r}; expected one of {KINDS}")
        if self.hidden_dim < 1 or self.batch_size < 1:
            raise SpecError("hidden_dim and batch_size must be >= 1")
        if self.kind == "siw" and self.hidden_dim < 2:
            raise SpecError("siw standardizes over hidden units and needs hidden_dim >= 2")
        if self.epochs_initial < 1 or self.epochs_incremental < 0:
            raise SpecError("epochs_initial must be >= 1 and epochs_incremental >= 0")
        if self.learning_rate <= 0 or self.distill_temperature <= 0:
            raise SpecError("learning_rate and distill_temperature must be > 0")
        if not 0 <= self.momentum < 1:
            raise SpecError("momentum must be in [0, 1)")
        if self.weight_decay < 0 or self.distill_weight < 0 or self.lucir_lambda_base < 0:
            raise SpecError("weight_decay, distill_weight and lambda_base must be >= 0")
        if self.seed < 0:
            raise SpecError("seed must be >= 0")


@dataclass
class Model:
    """Two-layer MLP with a growing output head.

    ``class_first_state[c]`` records the state that introduced class c.
    ``frozen[c]`` marks output rows excluded from updates (ftplus only).
    ``snap_w2``/``snap_b2`` hold each row as it was right after the state
    that introduced it (siw restores from these).
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    class_first_state: np.ndarray
    frozen: np.ndarray
    snap_w2: np.ndarray
    snap_b2: np.ndarray
    cosine: bool = False
    eta: float = ETA_INIT

    @property
    def num_classes(self) -> int:
        return self.w2.shape[0]

    def copy(self) -> "Model":
        return Model(
            w1=self.w1.copy(),
            b1=self.b1.copy(),
            w2=self.w2.copy(),
            b2=self.b2.copy(),
            class_first_state=self.class_first_state.copy(),
            frozen=self.frozen.copy(),
            snap_w2=self.snap_w2.copy(),
            snap_b2=self.snap_b2.copy(),
            cosine=self.cosine,
            eta=self.eta,
        )

    def hidden(self, x: np.ndarray) -> np.ndarray:
        return np.maximum(x @ self.w1.T + self.b1, 0.0)

    def scores(self, x: np.ndarray) -> np.ndarray:
        h = self.hidden(x)
        if self.cosine:
            hn, _, _ = _normalize_rows(h)
            wn, _, _ = _normalize_rows(self.w2)
            return self.eta * (hn @ wn.T)
        return h @ self.w2.T + self.b2


def _normalize_rows(x: np.ndarray):
    """Row directions with a norm floor; returns (unit rows, norms, clipped)."""
    raw = np.sqrt(np.sum(x * x, axis=1))
    clipped = raw <= _NORM_FLOOR
    norms = np.maximum(raw, _NORM_FLOOR)
    return x / norms[:, None], norms, clipped


def _normalize_backward(d_unit, unit, norms, clipped):
    # d/dx (x/||x||) projects out the radial component; where the floor is
    # active the denominator is constant and no projection applies.
    radial = np.sum(d_unit * unit, axis=1, keepdims=True)
    out = (d_unit - radial * unit) / norms[:, None]
    if np.any(clipped):
        out[clipped] = d_unit[clipped] / norms[clipped, None]
    return out


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))


def mean_loss(model: Model, x: np.ndarray, y: np.ndarray) -> float:
    """Mean cross-entropy of the model on (x, y); the monitored train loss."""
    logp = _log_softmax(model.scores(x))
    return float(-np.mean(logp[np.arange(len(y)), y]))


def distillation_loss(model: Model, teacher: Model, x: np.ndarray,
                      temperature: float, weight: float) -> float:
    """Soft-target KL on the teacher's columns, scaled by weight * T^2."""
    n_past = teacher.num_classes
    logq = _log_softmax(model.scores(x)[:, :n_past] / temperature)
    logp = _log_softmax(teacher.scores(x) / temperature)
    p = np.exp(logp)
    kl = np.sum(p * (logp - logq), axis=1)
    return float(weight * temperature**2 * np.mean(kl))


def feature_distillation_loss(model: Model, teacher: Model, x: np.ndarray,
                              weight: float) -> float:
    """weight * mean(1 - cos(student features, teacher features))."""
    hn, _, _ = _normalize_rows(model.hidden(x))
    tn, _, _ = _normalize_rows(teacher.hidden(x))
    return float(weight * np.mean(1.0 - np.sum(hn * tn, axis=1)))


def lucir_lambda(num_past: int, num_new: int, lambda_base: float) -> float:
    """Adaptive distillation weight lambda_base * sqrt(past/new)."""
    if num_past < 1 or num_new < 1:
        raise SpecError("class counts for the adaptive weight must be >= 1")
    return float(lambda_base * np.sqrt(num_past / num_new))


def standardize_rows(w: np.ndarray) -> np.ndarray:
    """Rescale each row to mean 0 / population std 1; constant rows go to
    zero with a warning since they carry no class-specific direction."""
    mean = w.mean(axis=1, keepdims=True)
    std = w.std(axis=1, keepdims=True)
    flat = std[:, 0] == 0.0
    if np.any(flat):
        warnings.warn(f"standardizing {int(flat.sum())} constant row(s) to zero")
        std = np.where(std == 0.0, 1.0, std)
        out = (w - mean) / std
        out[flat] = 0.0
        return out
    return (w - mean) / std


# ---------------------------------------------------------------------------
# gradients


def _head_backward(grads_out, h, relu_mask, x, model, config):
    """Push d(loss)/d(scores-ish) through the linear head and the relu."""
    d_w2 = grads_out.T @ h + config.weight_decay * model.w2
    d_b2 = grads_out.sum(axis=0)
    d_h = grads_out @ model.w2
    d_a1 = d_h * relu_mask
    d_w1 = d_a1.T @ x + config.weight_decay * model.w1
    d_b1 = d_a1.sum(axis=0)
    return d_w1, d_b1, d_w2, d_b2


def _grads_linear(model, x, y, config, teacher=None):
    """CE gradient, optionally plus the soft-target distillation gradient."""
    a1 = x @ model.w1.T + model.b1
    h = np.maximum(a1, 0.0)
    z = h @ model.w2.T + model.b2
    b = len(y)
    q = np.exp(_log_softmax(z))
    g = q.copy()
    g[np.arange(b), y] -= 1.0
    g /= b
    if teacher is not None and config.distill_weight > 0:
        t = config.distill_temperature
        n_past = teacher.num_classes
        q_soft = np.exp(_log_softmax(z[:, :n_past] / t))
        p_soft = np.exp(_log_softmax(teacher.scores(x) / t))
        # d/dz of weight*T^2*mean(KL) collapses to weight*T*(q-p)/B.
        g[:, :n_past] += config.distill_weight * t * (q_soft - p_soft) / b
    return _head_backward(g, h, a1 > 0, x, model, config)


def _grads_cosine(model, x, y, config, teacher, lam):
    """Cosine-head CE plus feature-direction distillation gradients."""
    a1 = x @ model.w1.T + model.b1
    h = np.maximum(a1, 0.0)
    hn, h_norms, h_clip = _normalize_rows(h)
    wn, w_norms, w_clip = _normalize_rows(model.w2)
    cos = hn @ wn.T
    z = model.eta * cos
    b = len(y)
    q = np.exp(_log_softmax(z))
    g = q.copy()
    g[np.arange(b), y] -= 1.0
    g /= b
    d_eta = float(np.sum(g * cos))
    d_wn = model.eta * (g.T @ hn)
    d_hn = model.eta * (g @ wn)
    if teacher is not None and lam > 0:
        tn, _, _ = _normalize_rows(teacher.hidden(x))
        # d/d(hn) of lam*mean(1 - hn.tn); the projection in the backward
        # pass makes the radial part vanish as it must for a direction loss.
        d_hn = d_hn - (lam / b) * tn
    d_w2 = _normalize_backward(d_wn, wn, w_norms, w_clip) + config.weight_decay * model.w2
    d_h = _normalize_backward(d_hn, hn, h_norms, h_clip)
    d_a1 = d_h * (a1 > 0)
    d_w1 = d_a1.T @ x + config.weight_decay * model.w1
    d_b1 = d_a1.sum(axis=0)
    return d_w1, d_b1, d_w2, np.zeros_like(model.b2), d_eta


# ---------------------------------------------------------------------------
# training loop


def _sgd_epochs(model, x, y, config, epochs, rng, teacher=None, lam=0.0):
    """Mini-batch SGD with momentum; honors the model's frozen-row mask."""
    vel = {
        "w1": np.zeros_like(model.w1),
        "b1": np.zeros_like(model.b1),
        "w2": np.zeros_like(model.w2),
        "b2": np.zeros_like(model.b2),
        "eta": 0.0,
    }
    frozen = model.frozen.copy()
    lr, mu = config.learning_rate, config.momentum
    n = len(y)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            xb, yb = x[idx], y[idx]
            if model.cosine:
                d_w1, d_b1, d_w2, d_b2, d_eta = _grads_cosine(
                    model, xb, yb, config, teacher, lam)
                vel["eta"] = mu * vel["eta"] + d_eta
                model.eta = model.eta - lr * vel["eta"]
            else:
                d_w1, d_b1, d_w2, d_b2 = _grads_linear(model, xb, yb, config, teacher)
            vel["w1"] = mu * vel["w1"] + d_w1
            vel["b1"] = mu * vel["b1"] + d_b1
            vel["w2"] = mu * vel["w2"] + d_w2
            vel["b2"] = mu * vel["b2"] + d_b2
            if np.any(frozen):
                # Frozen rows must stay bitwise identical, so the update is
                # masked out rather than relying on zeroed gradients.
                keep_w2, keep_b2 = model.w2[frozen], model.b2[frozen]
                model.w2 = model.w2 - lr * vel["w2"]
                model.b2 = model.b2 - lr * vel["b2"]
                model.w2[frozen] = keep_w2
                model.b2[frozen] = keep_b2
            else:
                model.w2 = model.w2 - lr * vel["w2"]
                model.b2 = model.b2 - lr * vel["b2"]
            model.w1 = model.w1 - lr * vel["w1"]
            model.b1 = model.b1 - lr * vel["b1"]
    return model


def _init_rows(num_rows, dim, rng):
    return rng.normal(0.0, np.sqrt(2.0 / dim), (num_rows, dim))


def _check_new_labels(model: Model | None, view: StateView, schedule: StateSchedule):
    sl = schedule.group_slice(view.state, view.state)
    if len(view.train_y) == 0:
        raise SpecError(f"state {view.state} has no training samples")
    if view.train_y.min() < sl.start or view.train_y.max() >= sl.stop:
        raise SpecError(
            f"state {view.state} training labels must lie in the new group "
            f"[{sl.start}, {sl.stop})")
    if model is not None and model.num_classes != sl.start:
        raise SpecError(
            f"model already covers {model.num_classes} classes but state "
            f"{view.state} introduces ids from {sl.start}; groups would overlap")


def train_initial(config: BackboneConfig, view: StateView,
                  schedule: StateSchedule) -> Model:
    """Train the state-1 model from scratch on the first class group."""
    if view.state != 1:
        raise SpecError("initial training expects the state-1 view")
    _check_new_labels(None, view, schedule)
    d = view.train_x.shape[1]
    n_cls = schedule.classes_through(1)
    rng = np.random.default_rng([config.seed, 1])
    cosine = config.kind == "lucir_lite"
    model = Model(
        w1=_init_rows(config.hidden_dim, d, rng),
        b1=np.zeros(config.hidden_dim),
        w2=_init_rows(n_cls, config.hidden_dim, rng),
        b2=np.zeros(n_cls),
        class_first_state=np.full(n_cls, 1, dtype=np.int64),
        frozen=np.zeros(n_cls, dtype=bool),
        snap_w2=np.zeros((n_cls, config.hidden_dim)),
        snap_b2=np.zeros(n_cls),
        cosine=cosine,
        eta=ETA_INIT,
    )
    model = _sgd_epochs(model, view.train_x, view.train_y, config,
                        config.epochs_initial, rng)
    model.snap_w2 = model.w2.copy()
    model.snap_b2 = model.b2.copy()
    return model


def _grow_head(model: Model, view: StateView, schedule: StateSchedule,
               rng) -> Model:
    """Append freshly initialized rows for the state's new classes."""
    _check_new_labels(model, view, schedule)
    sl = schedule.group_slice(view.state, view.state)
    n_new = sl.stop - sl.start
    grown = model.copy()
    grown.w2 = np.concatenate([grown.w2, _init_rows(n_new, grown.w2.shape[1], rng)])
    grown.b2 = np.concatenate([grown.b2, np.zeros(n_new)])
    grown.class_first_state = np.concatenate(
        [grown.class_first_state, np.full(n_new, view.state, dtype=np.int64)])
    grown.frozen = np.concatenate([grown.frozen, np.zeros(n_new, dtype=bool)])
    grown.snap_w2 = np.concatenate([grown.snap_w2, np.zeros((n_new, grown.w2.shape[1]))])
    grown.snap_b2 = np.concatenate([grown.snap_b2, np.zeros(n_new)])
    return grown


def _snapshot_new(model: Model, state: int) -> Model:
    new = model.class_first_state == state
    model.snap_w2[new] = model.w2[new]
    model.snap_b2[new] = model.b2[new]
    return model


def update_finetune(model: Model, view: StateView, schedule: StateSchedule,
                    config: BackboneConfig) -> Model:
    """Plain finetuning on the new group with no forgetting protection."""
    rng = np.random.default_rng([config.seed, view.state])
    grown = _grow_head(model, view, schedule, rng)
    grown = _sgd_epochs(grown, view.train_x, view.train_y, config,
                        config.epochs_incremental, rng)
    return _snapshot_new(grown, view.state)


def update_ftplus(model: Model, view: StateView, schedule: StateSchedule,
                  config: BackboneConfig) -> Model:
    """Finetune on the new group with all past output rows frozen."""
    rng = np.random.default_rng([config.seed, view.state])
    grown = _grow_head(model, view, schedule, rng)
    grown.frozen = grown.class_first_state < view.state
    grown = _sgd_epochs(grown, view.train_x, view.train_y, config,
                        config.epochs_incremental, rng)
    grown.frozen[:] = False
    return _snapshot_new(grown, view.state)


def update_siw(model: Model, view: StateView, schedule: StateSchedule,
               config: BackboneConfig) -> Model:
    """Finetune, then restore every class row to its introduction-time
    snapshot and standardize all rows to a shared scale."""
    rng = np.random.default_rng([config.seed, view.state])
    grown = _grow_head(model, view, schedule, rng)
    grown = _sgd_epochs(grown, view.train_x, view.train_y, config,
                        config.epochs_incremental, rng)
    grown = _snapshot_new(grown, view.state)
    grown.w2 = standardize_rows(grown.snap_w2.copy())
    grown.b2 = np.zeros_like(grown.b2)
    return grown


def update_lwf(model: Model, view: StateView, schedule: StateSchedule,
               config: BackboneConfig) -> Model:
    """Finetune with a soft-target distillation term against the previous
    model on the past columns."""
    teacher = model.copy()
    rng = np.random.default_rng([config.seed, view.state])
    grown = _grow_head(model, view, schedule, rng)
    grown = _sgd_epochs(grown, view.train_x, view.train_y, config,
                        config.epochs_incremental, rng, teacher=teacher)
    return _snapshot_new(grown, view.state)


def update_lucir_lite(model: Model, view: StateView, schedule: StateSchedule,
                      config: BackboneConfig) -> Model:
    """Cosine-classifier finetune with feature-direction distillation whose
    weight grows as sqrt(past classes / new classes)."""
    if not model.cosine:
        raise SpecError("lucir_lite updates need a cosine-head model")
    teacher = model.copy()
    rng = np.random.default_rng([config.seed, view.state])
    grown = _grow_head(model, view, schedule, rng)
    sl = schedule.group_slice(view.state, view.state)
    lam = lucir_lambda(sl.start, sl.stop - sl.start, config.lucir_lambda_base)
    grown = _sgd_epochs(grown, view.train_x, view.train_y, config,
                        config.epochs_incremental, rng, teacher=teacher, lam=lam)
    return _snapshot_new(grown, view.state)


_UPDATES = {
    "ftplus": update_ftplus,
    "siw": update_siw,
    "lwf": update_lwf,
    "lucir_lite": update_lucir_lite,
}


def update_state(model: Model, view: StateView, schedule: StateSchedule,
                 config: BackboneConfig) -> Model:
    return _UPDATES[config.kind](model, view, schedule, config)


def extract_logits(model: Model, x: np.ndarray, labels: np.ndarray, state: int,
                   schedule: StateSchedule, dataset: str = "", backbone: str = "",
                   seed: int = 0) -> StateLogits:
    """Raw scores over all classes seen so far, bundled with labels."""
    if model.num_classes != schedule.classes_through(state):
        raise SpecError(
            f"model covers {model.num_classes} classes but state {state} "
            f"has seen {schedule.classes_through(state)}")
    return StateLogits(
        state=state,
        matrix=model.scores(x),
        labels=labels,
        schedule=schedule,
        dataset=dataset,
        backbone=backbone,
        seed=seed,
    )


def run_incremental(config: BackboneConfig, split, dataset: str = "",
                    seed: int = 0):
    """Train through all states; returns (val logits, test logits) lists."""
    schedule = split.schedule
    model = train_initial(config, split.views[0], schedule)
    val_out, test_out = [], []

    def collect(view):
        val_out.append(extract_logits(model, view.val_x, view.val_y, view.state,
                                      schedule, dataset, config.kind, seed))
        test_out.append(extract_logits(model, view.test_x, view.test_y, view.state,
                                       schedule, dataset, config.kind, seed))

    collect(split.views[0])
    for view in split.views[1:]:
        model = update_state(model, view, schedule, config)
        collect(view)
    return val_out, test_out
