"""Intensity normalization, sample assembly and the train/test split."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array

from .errors import ConfigError, ShapeError
from .phantom import PLANES, REFERENCE, Cohort, SubjectSeries, timecode

TARGET_TIME = 24.0
MIN_REFERENCE_MEAN = 1e-9


def normalize_reference(image: np.ndarray, reference_mask: np.ndarray) -> np.ndarray:
    """Divide every pixel by the mean over ``reference_mask``."""
    image = np.asarray(image, dtype=np.float64)
    mask = np.asarray(reference_mask, dtype=bool)
    if mask.shape != image.shape:
        raise ShapeError(f"reference mask shape {mask.shape} != image shape {image.shape}")
    if not mask.any():
        raise ValueError("reference mask is empty")
    ref = image[mask].mean()
    if abs(ref) < MIN_REFERENCE_MEAN:
        raise ValueError(f"reference mean {ref!r} is too close to zero")
    return image / ref


def minmax_slice(image: np.ndarray) -> np.ndarray:
    """Scale one 2-D slice to [0, 1]; a constant slice maps to zeros."""
    image = np.asarray(image, dtype=np.float64)
    lo, hi = image.min(), image.max()
    if hi - lo <= 0:
        return np.zeros_like(image)
    return np.clip((image - lo) / (hi - lo), 0.0, 1.0)


def preprocess_pair(pair: np.ndarray, reference_masks: np.ndarray) -> np.ndarray:
    """Reference division then per-slice min-max, applied to each plane."""
    return np.stack([minmax_slice(normalize_reference(pair[p], reference_masks[p])) for p in range(len(pair))])


@dataclass
class Sample:
    subject_id: str
    input: np.ndarray  # (2T, H, W)
    target: np.ndarray  # (2, H, W)
    input_times: tuple[float, ...]
    grade: int | None = None

    @property
    def n_channels(self) -> int:
        return self.input.shape[0]


@dataclass
class Dataset:
    samples: list[Sample]
    split: str = "train"
    label: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [s.subject_id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise ValueError("subject ids must be unique within a dataset")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def n(self) -> int:
        return len(self.samples)

    @property
    def subject_ids(self) -> list[str]:
        return [s.subject_id for s in self.samples]

    def arrays(self, dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
        X = np.stack([s.input for s in self.samples]).astype(dtype)
        y = np.stack([s.target for s in self.samples]).astype(dtype)
        return X, y


def assemble_sample(series: SubjectSeries, input_times: Sequence[float],
                    target_time: float = TARGET_TIME) -> Sample:
    """Stack [sag(t1), ax(t1), sag(t2), ax(t2), ...] and the target pair.

    Input times are sorted chronologically; each channel is normalized
    independently.
    """
    times = sorted(float(t) for t in input_times)
    if not times:
        raise ValueError("at least one input time is required")
    missing = [t for t in times + [float(target_time)] if t not in series.images]
    if missing:
        raise KeyError(f"{series.subject_id}: missing time points {missing} h")
    ref = series.subject.labels == REFERENCE
    chans = [preprocess_pair(series.pair(t), ref) for t in times]
    x = np.concatenate(chans, axis=0)
    y = preprocess_pair(series.pair(target_time), ref)
    return Sample(series.subject_id, x, y, tuple(times), series.subject.true_grade)


def split_indices(n: int, train_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    if not 0 < train_fraction < 1:
        raise ConfigError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    n_train = int(round(n * train_fraction))
    if n_train == 0 or n_train == n:
        raise ConfigError(f"split of {n} subjects at fraction {train_fraction} leaves one side empty")
    perm = np.random.default_rng(seed).permutation(n)
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def split_cohort(cohort: Cohort | Sequence[SubjectSeries], train_fraction: float, seed: int):
    """Deterministic shuffled split into (train, test) lists of series."""
    series = cohort.series if isinstance(cohort, Cohort) else list(cohort)
    tr, te = split_indices(len(series), train_fraction, seed)
    return [series[i] for i in tr], [series[i] for i in te]


def build_datasets(cohort: Cohort, input_times: Sequence[float], train_fraction: float,
                   seed: int, label: str = "") -> tuple[Dataset, Dataset]:
    train_series, test_series = split_cohort(cohort, train_fraction, seed)
    train = Dataset([assemble_sample(s, input_times) for s in train_series], "train", label)
    test = Dataset([assemble_sample(s, input_times) for s in test_series], "test", label)
    return train, test


def channel_names(input_times: Sequence[float]) -> list[str]:
    return [f"{plane}_{timecode(t)}" for t in sorted(input_times) for plane in PLANES]


class ReferenceNormalizer(TransformerMixin, BaseEstimator):
    """Stateless transformer dividing each slice by its reference-ROI mean.

    ``X`` is (n, C, H, W); ``reference_masks`` broadcasts against it, e.g. a
    (n, C, H, W) boolean array or a (C, H, W) one shared by all samples.
    """

    def __init__(self, reference_masks=None):
        self.reference_masks = reference_masks

    def fit(self, X, y=None):
        X = np.asarray(X)
        if X.ndim != 4:
            raise ShapeError(f"expected (n, C, H, W), got shape {X.shape}")
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        X = np.asarray(X, dtype=np.float64)
        masks = np.broadcast_to(np.asarray(self.reference_masks, dtype=bool), X.shape)
        out = np.empty_like(X)
        for i in range(X.shape[0]):
            for c in range(X.shape[1]):
                out[i, c] = normalize_reference(X[i, c], masks[i, c])
        return out


class SliceMinMaxScaler(TransformerMixin, BaseEstimator):
    """Stateless per-slice min-max scaling to [0, 1]."""

    def fit(self, X, y=None):
        X = np.asarray(X)
        if X.ndim < 2:
            raise ShapeError("expected at least 2-D slices")
        self.n_features_in_ = X.shape[1] if X.ndim == 4 else 1
        return self

    def transform(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 2:
            check_array(X)
            return minmax_slice(X)
        flat = X.reshape((-1,) + X.shape[-2:])
        return np.stack([minmax_slice(s) for s in flat]).reshape(X.shape)
