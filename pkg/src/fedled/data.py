"""Vertically heterogeneous fault data: a seedable synthetic generator,
non-overlapping sliding-window extraction for raw signals, stratified 7:3
splitting and CSV ingestion.

Target labels never travel inside a :class:`DomainDataset` handed to
training.  The generator returns them in a separate :class:`HiddenLabels`
container keyed by sample id, which only evaluation code reads.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from fedled.errors import ConfigError, DataError, ParseError


@dataclass(frozen=True)
class DomainDataset:
    features: np.ndarray  # (N, F)
    labels: np.ndarray | None
    feature_names: tuple[str, ...]
    domain_id: str
    sample_ids: np.ndarray | None = None

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] == 0:
            raise DataError(f"features must be a non-empty N x F matrix, got {x.shape}")
        if not np.all(np.isfinite(x)):
            raise DataError("features contain NaN or Inf")
        if len(self.feature_names) != x.shape[1]:
            raise DataError("one feature name per column required")
        if len(set(self.feature_names)) != len(self.feature_names):
            raise DataError("feature names must be unique")
        x.setflags(write=False)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        ids = np.arange(x.shape[0]) if self.sample_ids is None else np.asarray(self.sample_ids)
        if ids.shape != (x.shape[0],):
            raise DataError("sample_ids must have one entry per row")
        object.__setattr__(self, "sample_ids", ids)
        if self.labels is not None:
            y = np.asarray(self.labels, dtype=np.int64)
            if y.shape != (x.shape[0],):
                raise DataError("labels must have one entry per row")
            if y.size and y.min() < 0:
                raise DataError("labels must be non-negative")
            y.setflags(write=False)
            object.__setattr__(self, "labels", y)

    def __len__(self):
        return self.features.shape[0]

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "DomainDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(
            self,
            features=self.features[idx],
            labels=None if self.labels is None else self.labels[idx],
            sample_ids=self.sample_ids[idx],
        )

    def unlabeled(self) -> "DomainDataset":
        return replace(self, labels=None)


class HiddenLabels:
    """Evaluation-only ground truth for an unlabeled domain."""

    def __init__(self, sample_ids, labels):
        self._by_id = dict(zip(np.asarray(sample_ids).tolist(), np.asarray(labels).tolist()))

    def for_dataset(self, ds: DomainDataset) -> np.ndarray:
        try:
            return np.array([self._by_id[i] for i in ds.sample_ids.tolist()], dtype=np.int64)
        except KeyError as exc:
            raise DataError(f"no hidden label for sample id {exc.args[0]}") from None

    def __len__(self):
        return len(self._by_id)


@dataclass(frozen=True)
class SyntheticConfig:
    num_classes: int = 4
    latent_dim: int = 8
    source_features: int = 12
    target_features: int = 12
    overlap_features: int = 4
    sample_overlap: float = 0.0
    condition_shift: float = 1.0
    noise_sigma: float = 0.1
    samples_per_domain: int = 2000
    class_separation: float = 4.0
    seed: int = 42

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.latent_dim < self.num_classes:
            raise ConfigError("latent_dim must be >= num_classes (class means sit on basis vertices)")
        if self.source_features < 1 or self.target_features < 1:
            raise ConfigError("feature counts must be positive")
        if not 0 <= self.overlap_features <= min(self.source_features, self.target_features):
            raise ConfigError("overlap_features must lie in [0, min(N_S, N_T)]")
        if not 0.0 <= self.sample_overlap <= 1.0:
            raise ConfigError("sample_overlap must lie in [0, 1]")
        if self.condition_shift < 0 or self.noise_sigma < 0:
            raise ConfigError("condition_shift and noise_sigma must be non-negative")
        if self.samples_per_domain < 10:
            raise ConfigError("samples_per_domain must be >= 10")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class SyntheticData:
    source: DomainDataset
    target: DomainDataset
    target_labels: HiddenLabels
    mixing_source: np.ndarray = field(repr=False)
    mixing_target: np.ndarray = field(repr=False)


def feature_names(cfg: SyntheticConfig) -> tuple[tuple[str, ...], tuple[str, ...]]:
    shared = [f"shared{i}" for i in range(cfg.overlap_features)]
    src = shared + [f"src{i}" for i in range(cfg.source_features - cfg.overlap_features)]
    tgt = shared + [f"tgt{i}" for i in range(cfg.target_features - cfg.overlap_features)]
    return tuple(src), tuple(tgt)


def generate_synthetic(cfg: SyntheticConfig) -> SyntheticData:
    """Two views of one class-conditional latent Gaussian mixture.

    Class ``c`` has latent mean ``class_separation * e_c`` and unit
    covariance.  The source sees ``A_S z + noise``; the target sees
    ``gain * (A_T z) + offset + noise``, where the first
    ``overlap_features`` rows of ``A_T`` are copied from ``A_S`` and
    gain/offset deviate from (1, 0) in proportion to ``condition_shift``.
    A ``sample_overlap`` fraction of target samples reuse source latent
    draws (and hence labels).
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n, k, c = cfg.samples_per_domain, cfg.latent_dim, cfg.num_classes
    m = cfg.overlap_features

    a_s = rng.standard_normal((cfg.source_features, k)) / np.sqrt(k)
    a_t = rng.standard_normal((cfg.target_features, k)) / np.sqrt(k)
    a_t[:m] = a_s[:m]
    gain = 1.0 + cfg.condition_shift * rng.uniform(-0.9, 0.9, cfg.target_features)
    offset = cfg.condition_shift * rng.standard_normal(cfg.target_features)

    means = np.zeros((c, k))
    means[np.arange(c), np.arange(c)] = cfg.class_separation

    def draw(count):
        y = rng.integers(0, c, size=count)
        return means[y] + rng.standard_normal((count, k)), y

    z_s, y_s = draw(n)
    n_shared = int(round(cfg.sample_overlap * n))
    z_new, y_new = draw(n - n_shared)
    z_t = np.vstack([z_s[:n_shared], z_new])
    y_t = np.concatenate([y_s[:n_shared], y_new])
    perm = rng.permutation(n)
    z_t, y_t = z_t[perm], y_t[perm]

    x_s = z_s @ a_s.T + cfg.noise_sigma * rng.standard_normal((n, cfg.source_features))
    x_t = gain * (z_t @ a_t.T) + offset + cfg.noise_sigma * rng.standard_normal((n, cfg.target_features))

    names_s, names_t = feature_names(cfg)
    source = DomainDataset(x_s, y_s, names_s, "source")
    target_ids = np.arange(n)
    target = DomainDataset(x_t, None, names_t, "target", sample_ids=target_ids)
    return SyntheticData(source, target, HiddenLabels(target_ids, y_t), a_s, a_t)


@dataclass(frozen=True)
class WindowSpec:
    window_len: int = 1024
    stride: int | None = None  # defaults to window_len (non-overlapping)

    def __post_init__(self):
        if self.window_len < 1:
            raise ConfigError("window_len must be >= 1")
        if self.stride is not None and self.stride < self.window_len:
            raise ConfigError("stride must be >= window_len for non-overlapping windows")

    @property
    def step(self) -> int:
        return self.window_len if self.stride is None else self.stride


def window_samples(signal, spec: WindowSpec = WindowSpec()) -> np.ndarray:
    """Cut a (length, channels) signal into disjoint windows.

    Each window becomes one row, channel-major: all ``window_len`` points of
    channel 0, then channel 1, and so on.  The trailing remainder is dropped.
    """
    sig = np.asarray(signal, dtype=np.float64)
    if sig.ndim == 1:
        sig = sig[:, None]
    length = sig.shape[0]
    if length < spec.window_len:
        raise DataError(f"signal of length {length} is shorter than one window ({spec.window_len})")
    starts = range(0, length - spec.window_len + 1, spec.step)
    rows = [sig[s : s + spec.window_len].T.reshape(-1) for s in starts]
    return np.vstack(rows)


def split_train_test(ds: DomainDataset, seed: int, train_fraction: float = 0.7):
    """Deterministic 7:3 split; stratified per class when labels exist.

    ``|train| = round(train_fraction * N)``.  With labels, each class first
    gets ``floor(train_fraction * n_c)`` train rows and the leftover quota
    goes to the classes with the largest fractional parts.
    """
    n = len(ds)
    if n < 10:
        raise DataError("need at least 10 samples to split")
    rng = np.random.default_rng(seed)
    n_train = int(np.floor(train_fraction * n + 0.5))
    if ds.labels is None:
        perm = rng.permutation(n)
        return ds.subset(np.sort(perm[:n_train])), ds.subset(np.sort(perm[n_train:]))
    classes, counts = np.unique(ds.labels, return_counts=True)
    if counts.min() < 2:
        bad = classes[np.argmin(counts)]
        raise DataError(f"class {bad} has fewer than 2 samples; cannot stratify")
    exact = train_fraction * counts
    quota = np.floor(exact + 1e-9).astype(np.int64)
    frac = exact - quota
    for i in np.argsort(-frac, kind="stable")[: max(0, n_train - int(quota.sum()))]:
        quota[i] += 1
    quota = np.clip(quota, 1, counts - 1)
    train_idx, test_idx = [], []
    for cls, k in zip(classes, quota):
        idx = rng.permutation(np.flatnonzero(ds.labels == cls))
        train_idx.append(idx[:k])
        test_idx.append(idx[k:])
    return (
        ds.subset(np.sort(np.concatenate(train_idx))),
        ds.subset(np.sort(np.concatenate(test_idx))),
    )


@dataclass(frozen=True)
class CsvSchema:
    """Which columns carry signal channels, and how windows get labels."""

    channels: Sequence[str] | None = None  # None -> every non-label column
    label_column: str | None = "label"
    window: WindowSpec = WindowSpec()
    strict: bool = False  # reject windows that mix labels
    domain_id: str = "csv"


def load_csv(path, schema: CsvSchema = CsvSchema()) -> DomainDataset:
    """Read one signal channel per column and window it.

    Labels (if the label column is present) are assigned per window by
    majority vote; under ``strict`` a mixed window is a data error.
    """
    path = Path(path)
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", line=1) from None
        header = [h.strip() for h in header]
        if not header or header == [""]:
            raise ParseError("missing header row", line=1)
        has_label = schema.label_column is not None and schema.label_column in header
        channels = list(schema.channels) if schema.channels is not None else [
            h for h in header if not (has_label and h == schema.label_column)
        ]
        missing = [ch for ch in channels if ch not in header]
        if missing:
            raise ParseError(f"missing declared columns {missing}", line=1)
        col_idx = [header.index(ch) for ch in channels]
        label_idx = header.index(schema.label_column) if has_label else None
        values, labels = [], []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} cells, got {len(row)}", line=line_no)
            try:
                values.append([float(row[i]) for i in col_idx])
                if label_idx is not None:
                    labels.append(int(row[label_idx]))
            except ValueError as exc:
                raise ParseError(f"non-numeric cell ({exc})", line=line_no) from None
    if not values:
        raise ParseError("no data rows", line=2)
    sig = np.array(values)
    if not np.all(np.isfinite(sig)):
        raise ParseError("non-finite value in signal columns")
    rows = window_samples(sig, schema.window)
    win = schema.window.window_len
    names = tuple(f"{ch}[{t}]" for ch in channels for t in range(win))
    y = None
    if label_idx is not None:
        lab = np.array(labels)
        y = []
        for w in range(rows.shape[0]):
            seg = lab[w * schema.window.step : w * schema.window.step + win]
            vals, counts = np.unique(seg, return_counts=True)
            if schema.strict and vals.size > 1:
                raise DataError(f"window {w} mixes labels {vals.tolist()}")
            y.append(int(vals[np.argmax(counts)]))
        y = np.array(y)
    return DomainDataset(rows, y, names, schema.domain_id)


def align_to_source(target: DomainDataset, source_names: Sequence[str]):
    """Place target columns into the source feature layout by name; others are zero.

    Returns ``(matrix, n_matched)``.
    """
    pos = {name: i for i, name in enumerate(target.feature_names)}
    out = np.zeros((len(target), len(source_names)))
    matched = 0
    for j, name in enumerate(source_names):
        i = pos.get(name)
        if i is not None:
            out[:, j] = target.features[:, i]
            matched += 1
    return out, matched
