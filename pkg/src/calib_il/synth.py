"""Synthetic incremental datasets: Gaussian class clusters at desk scale.

Each class is an isotropic Gaussian around a center drawn from the
dataset's seed, so datasets with distinct seeds share the generative family
but not the class geometry. An optional shared-rotation drift knob applies
one orthogonal rotation (Cayley transform of a seeded skew matrix, scaled
by ``drift_scale``) to the whole feature space, emulating domain shift
between datasets.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .schedule import StateSchedule

SPLITS = ("train", "validation", "test")


@dataclass(frozen=True)
class SynthSpec:
    """Generator knobs for one synthetic dataset."""

    num_classes: int
    feature_dim: int
    train_per_class: int
    val_per_class: int
    test_per_class: int
    center_scale: float = 1.0
    noise_scale: float = 1.0
    drift_scale: float = 0.0
    seed: int = 0

    def __post_init__(self):
        counts = (
            self.num_classes,
            self.feature_dim,
            self.train_per_class,
            self.val_per_class,
            self.test_per_class,
        )
        if any(c < 1 for c in counts):
            raise ValueError("all class/dim/sample counts must be >= 1")
        if self.center_scale <= 0:
            raise ValueError("center_scale must be > 0")
        if self.noise_scale < 0 or self.drift_scale < 0:
            raise ValueError("noise_scale and drift_scale must be >= 0")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")


@dataclass
class IncrementalDataset:
    """Feature matrix with labels, split tags and an incremental schedule."""

    features: np.ndarray
    labels: np.ndarray
    split: np.ndarray
    schedule: StateSchedule
    name: str = ""
    seed: int = 0

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.split = np.asarray(self.split, dtype=object)
        n = len(self.labels)
        if self.features.ndim != 2 or self.features.shape[0] != n or len(self.split) != n:
            raise ValueError("features, labels and split tags must align")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain non-finite values")
        bad = sorted({tag for tag in self.split} - set(SPLITS))
        if bad:
            raise ValueError(f"unknown split tags {bad}; expected {SPLITS}")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.schedule.num_classes):
            raise ValueError("labels outside the schedule's class range")
        for c in range(self.schedule.num_classes):
            mine = self.split[self.labels == c]
            for tag in SPLITS:
                if not np.any(mine == tag):
                    raise ValueError(f"class {c} has no '{tag}' samples")

    def subset(self, tag: str, classes: np.ndarray | None = None):
        """Features and labels of one split, optionally restricted to classes."""
        mask = self.split == tag
        if classes is not None:
            mask &= np.isin(self.labels, classes)
        return self.features[mask], self.labels[mask]


def _cayley_rotation(dim: int, scale: float, rng: np.random.Generator) -> np.ndarray:
    """Orthogonal rotation (I - tA)^-1 (I + tA) for a seeded skew matrix A."""
    raw = rng.normal(0.0, 1.0, (dim, dim))
    skew = (raw - raw.T) / 2.0
    eye = np.eye(dim)
    return np.linalg.solve(eye - scale * skew, eye + scale * skew)


def gen_synthetic_dataset(spec: SynthSpec, name: str = "") -> IncrementalDataset:
    """Draw one cluster per class and tag train/validation/test samples.

    Determinism contract: the same spec always yields the same arrays
    bitwise. The schedule starts as a single state covering all classes;
    ``split_states`` installs the incremental protocol.
    """
    rng = np.random.default_rng(spec.seed)
    centers = rng.normal(0.0, spec.center_scale, (spec.num_classes, spec.feature_dim))
    per_class = {
        "train": spec.train_per_class,
        "validation": spec.val_per_class,
        "test": spec.test_per_class,
    }
    features, labels, tags = [], [], []
    for c in range(spec.num_classes):
        for tag in SPLITS:
            n = per_class[tag]
            noise = rng.normal(0.0, 1.0, (n, spec.feature_dim))
            features.append(centers[c] + spec.noise_scale * noise)
            labels.extend([c] * n)
            tags.extend([tag] * n)
    x = np.concatenate(features, axis=0)
    if spec.drift_scale > 0:
        rot = _cayley_rotation(spec.feature_dim, spec.drift_scale, rng)
        x = x @ rot.T
    return IncrementalDataset(
        features=x,
        labels=np.asarray(labels),
        split=np.asarray(tags, dtype=object),
        schedule=StateSchedule((spec.num_classes,)),
        name=name,
        seed=spec.seed,
    )


@dataclass
class StateView:
    """Data visible in one state: new-class training data plus cumulative
    validation and test data over every class seen so far."""

    state: int
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray


@dataclass
class StateSplit:
    dataset: IncrementalDataset
    schedule: StateSchedule
    views: list[StateView]


def split_states(
    dataset: IncrementalDataset,
    num_states: int,
    classes_per_state: list[int] | None = None,
) -> StateSplit:
    """Install an incremental protocol on a dataset.

    Training views contain only the classes introduced in their state;
    validation and test views are cumulative over all classes seen so far.
    """
    if classes_per_state is not None:
        schedule = StateSchedule(tuple(classes_per_state))
        if schedule.num_classes != dataset.schedule.num_classes:
            raise ValueError("per-state sizes do not sum to the class count")
        if schedule.num_states != num_states:
            raise ValueError("per-state sizes disagree with num_states")
    else:
        schedule = StateSchedule.equal_split(dataset.schedule.num_classes, num_states)
    tagged = replace(dataset, schedule=schedule)
    views = []
    for s in range(1, num_states + 1):
        new = np.arange(schedule.group_slice(s, s).start, schedule.group_slice(s, s).stop)
        seen = np.arange(schedule.classes_through(s))
        train_x, train_y = tagged.subset("train", new)
        val_x, val_y = tagged.subset("validation", seen)
        test_x, test_y = tagged.subset("test", seen)
        views.append(StateView(s, train_x, train_y, val_x, val_y, test_x, test_y))
    return StateSplit(tagged, schedule, views)


def halve_train_split(dataset: IncrementalDataset) -> IncrementalDataset:
    """Keep ceil(n/2) training samples per class; validation/test untouched."""
    keep = np.ones(len(dataset.labels), dtype=bool)
    for c in range(dataset.schedule.num_classes):
        idx = np.flatnonzero((dataset.labels == c) & (dataset.split == "train"))
        n_keep = (len(idx) + 1) // 2
        keep[idx[n_keep:]] = False
    return replace(
        dataset,
        features=dataset.features[keep],
        labels=dataset.labels[keep],
        split=dataset.split[keep],
        name=dataset.name + "-halved" if dataset.name else "halved",
    )
