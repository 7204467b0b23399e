"""Dataset ingestion, normalization, non-overlapping windowing, synthetic benchmarks.

CSV layout: a dataset directory holds train.csv, test.csv and
test_labels.csv, all headerless and comma-separated with rows as time
points. Labels are one column of 0/1 aligned with test.csv. The loader
validates shapes only; values pass through untouched.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, ContractError, DataFormatError

ANOMALY_TYPES = ("spike", "subtle_drift", "subsequence")

# segment lengths per anomaly kind when duration is left unset
DEFAULT_DURATIONS = {"spike": 1, "subtle_drift": 10, "subsequence": 20}


@dataclass(frozen=True)
class RawDataset:
    train: np.ndarray
    test: np.ndarray
    test_labels: np.ndarray
    name: str = "unnamed"

    def __post_init__(self):
        train = np.atleast_2d(np.asarray(self.train, dtype=np.float64))
        test = np.atleast_2d(np.asarray(self.test, dtype=np.float64))
        labels = np.ravel(np.asarray(self.test_labels))
        if train.shape[1] != test.shape[1]:
            raise ContractError(
                f"feature count differs between splits: train has {train.shape[1]}, "
                f"test has {test.shape[1]}"
            )
        if labels.shape[0] != test.shape[0]:
            raise ContractError(
                f"label length {labels.shape[0]} does not match test length "
                f"{test.shape[0]}"
            )
        if not np.all(np.isin(labels, (0, 1))):
            raise ContractError("test labels must be 0 or 1")
        object.__setattr__(self, "train", train)
        object.__setattr__(self, "test", test)
        object.__setattr__(self, "test_labels", labels.astype(np.int64))

    @property
    def n_features(self) -> int:
        return self.train.shape[1]


def _parse_matrix(path: str, filename: str) -> np.ndarray:
    """Parse one headerless numeric CSV; errors carry the 1-based line number."""
    rows = []
    width = None
    with open(path, "r", encoding="utf-8", newline="") as f:
        for lineno, line in enumerate(f, start=1):
            stripped = line.strip()
            if not stripped:
                raise DataFormatError(f"{filename} line {lineno}: blank line")
            cells = stripped.split(",")
            if width is None:
                width = len(cells)
            elif len(cells) != width:
                raise DataFormatError(
                    f"{filename} line {lineno}: ragged row, got {len(cells)} "
                    f"cells, expected {width}"
                )
            try:
                rows.append([float(c) for c in cells])
            except ValueError:
                bad = next(c for c in cells if not _is_number(c))
                raise DataFormatError(
                    f"{filename} line {lineno}: non-numeric cell {bad!r}"
                ) from None
    if not rows:
        raise DataFormatError(f"{filename}: file is empty")
    return np.asarray(rows, dtype=np.float64)


def _is_number(cell: str) -> bool:
    try:
        float(cell)
        return True
    except ValueError:
        return False


def load_csv(directory: str) -> RawDataset:
    """Load train.csv / test.csv / test_labels.csv from a dataset directory."""
    parts = {}
    for filename in ("train.csv", "test.csv", "test_labels.csv"):
        path = os.path.join(directory, filename)
        if not os.path.exists(path):
            raise DataFormatError(f"missing {filename} in {directory}")
        parts[filename] = _parse_matrix(path, filename)
    labels = parts["test_labels.csv"]
    if labels.shape[1] != 1:
        raise DataFormatError(
            f"test_labels.csv: expected one column, got {labels.shape[1]}"
        )
    test = parts["test.csv"]
    if labels.shape[0] != test.shape[0]:
        raise DataFormatError(
            f"test_labels.csv has {labels.shape[0]} rows but test.csv has "
            f"{test.shape[0]}"
        )
    flat = labels[:, 0]
    if not np.all(np.isin(flat, (0.0, 1.0))):
        raise DataFormatError("test_labels.csv: labels must be 0 or 1")
    return RawDataset(
        train=parts["train.csv"],
        test=test,
        test_labels=flat.astype(np.int64),
        name=os.path.basename(os.path.normpath(directory)) or "unnamed",
    )


def save_csv(dataset: RawDataset, directory: str) -> list[str]:
    """Write the three-file CSV layout; float cells use repr for exact round-trips."""
    os.makedirs(directory, exist_ok=True)
    written = []
    for filename, matrix in (
        ("train.csv", dataset.train),
        ("test.csv", dataset.test),
    ):
        path = os.path.join(directory, filename)
        lines = [",".join(repr(float(v)) for v in row) for row in matrix]
        with open(path, "wb") as f:
            f.write(("\n".join(lines) + "\n").encode("ascii"))
        written.append(path)
    path = os.path.join(directory, "test_labels.csv")
    with open(path, "wb") as f:
        f.write(("\n".join(str(int(v)) for v in dataset.test_labels) + "\n").encode("ascii"))
    written.append(path)
    return written


def normalize(raw: RawDataset) -> RawDataset:
    """Per-feature zero-mean unit-variance using train statistics for both splits.

    Zero-variance features are centered only.
    """
    if raw.train.shape[0] == 0:
        raise ContractError("normalize: empty train split")
    mean = raw.train.mean(axis=0)
    std = raw.train.std(axis=0)
    scale = np.where(std == 0.0, 1.0, std)
    return RawDataset(
        train=(raw.train - mean) / scale,
        test=(raw.test - mean) / scale,
        test_labels=raw.test_labels,
        name=raw.name,
    )


@dataclass(frozen=True)
class WindowedDataset:
    windows: np.ndarray
    window_len: int
    dropped_tail: int

    @property
    def n_windows(self) -> int:
        return self.windows.shape[0]

    @property
    def start_indices(self) -> np.ndarray:
        """Global start index of each window."""
        return np.arange(self.n_windows) * self.window_len

    def global_index(self, window: int, offset: int) -> int:
        return self.window_len * window + offset

    @property
    def covered_length(self) -> int:
        """Length of the series prefix the windows cover."""
        return self.n_windows * self.window_len


def windowize(series: np.ndarray, window_len: int = 100) -> WindowedDataset:
    """Cut a [T, d] series into floor(T / window_len) contiguous windows.

    The remainder shorter than one window is dropped; its size is recorded
    so scores can be aligned back to the original index space.
    """
    series = np.atleast_2d(np.asarray(series, dtype=np.float64))
    if window_len < 1:
        raise ContractError(f"window_len must be >= 1, got {window_len}")
    t, d = series.shape
    if t < window_len:
        raise ContractError(
            f"series of length {t} is shorter than one window ({window_len})"
        )
    n = t // window_len
    kept = series[: n * window_len]
    return WindowedDataset(
        windows=kept.reshape(n, window_len, d),
        window_len=window_len,
        dropped_tail=t - n * window_len,
    )


@dataclass(frozen=True)
class Anomaly:
    kind: str
    position: int
    magnitude: float
    duration: int | None = None

    def __post_init__(self):
        if self.kind not in ANOMALY_TYPES:
            raise ConfigError(
                f"unknown anomaly type {self.kind!r}; expected one of {ANOMALY_TYPES}"
            )
        if self.position < 0:
            raise ConfigError(f"anomaly position must be >= 0, got {self.position}")
        if self.magnitude <= 0:
            raise ConfigError(f"anomaly magnitude must be > 0, got {self.magnitude}")
        if self.duration is not None and self.duration < 1:
            raise ConfigError(f"anomaly duration must be >= 1, got {self.duration}")

    @property
    def length(self) -> int:
        return self.duration if self.duration is not None else DEFAULT_DURATIONS[self.kind]

    @property
    def end(self) -> int:
        """One past the last affected index."""
        return self.position + self.length


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for a deterministic synthetic dataset.

    The base signal is a sinusoid mixture shared by both splits; anomalies
    are injected into the test split only. Magnitudes are expressed in
    units of the noise standard deviation.
    """

    train_length: int = 72000
    test_length: int = 5000
    d: int = 2
    # prime periods, incommensurate with the 100-point window: every window
    # samples a fresh phase pair, so the latent manifold stays spread out
    frequencies: tuple = (1.0 / 97.0, 1.0 / 41.0)
    amplitudes: tuple = (1.0, 0.6)
    noise_std: float = 0.1
    anomalies: tuple = ()
    seed: int = 0

    def __post_init__(self):
        if self.train_length < 1 or self.test_length < 1:
            raise ConfigError("split lengths must be >= 1")
        if self.d < 1:
            raise ConfigError(f"d must be >= 1, got {self.d}")
        if len(self.frequencies) == 0 or len(self.frequencies) != len(self.amplitudes):
            raise ConfigError(
                "frequencies and amplitudes must be non-empty and equally long"
            )
        if self.noise_std < 0:
            raise ConfigError(f"noise_std must be >= 0, got {self.noise_std}")
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")
        object.__setattr__(self, "frequencies", tuple(float(f) for f in self.frequencies))
        object.__setattr__(self, "amplitudes", tuple(float(a) for a in self.amplitudes))
        anomalies = tuple(
            a if isinstance(a, Anomaly) else Anomaly(**a) for a in self.anomalies
        )
        object.__setattr__(self, "anomalies", anomalies)
        spans = sorted((a.position, a.end) for a in anomalies)
        for (s0, e0), (s1, e1) in zip(spans, spans[1:]):
            if s1 < e0:
                raise ConfigError(
                    f"anomaly segments overlap: [{s0}, {e0}) and [{s1}, {e1})"
                )
        for a in anomalies:
            if a.end > self.test_length:
                raise ConfigError(
                    f"anomaly [{a.position}, {a.end}) exceeds test length "
                    f"{self.test_length}"
                )


def default_synth_spec(seed: int = 0, train_length: int = 72000) -> SynthSpec:
    """Benchmark recipe: 5000 test points, 10 spikes and 10 subtle drifts.

    The test split is cut into 20 equal blocks; even blocks get one spike
    (6-10 sigma), odd blocks one 10-point drift (1.5-2.5 sigma). Offsets
    and magnitudes are drawn deterministically from the seed, on a stream
    separate from the generator's noise stream.
    """
    test_length = 5000
    n_blocks = 20
    block = test_length // n_blocks
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(7,)))
    anomalies = []
    for b in range(n_blocks):
        if b % 2 == 0:
            kind, lo_mag, hi_mag, dur = "spike", 6.0, 10.0, 1
        else:
            kind, lo_mag, hi_mag, dur = "subtle_drift", 1.5, 2.5, 10
        margin = 20
        start = b * block + margin
        stop = (b + 1) * block - margin - dur
        position = int(rng.integers(start, stop))
        magnitude = float(rng.uniform(lo_mag, hi_mag))
        anomalies.append(Anomaly(kind=kind, position=position, magnitude=magnitude, duration=dur))
    return SynthSpec(
        train_length=train_length,
        test_length=test_length,
        anomalies=tuple(anomalies),
        seed=seed,
    )


def _base_signal(spec: SynthSpec, t0: int, length: int) -> np.ndarray:
    """Sinusoid mixture evaluated on global indices [t0, t0 + length)."""
    t = np.arange(t0, t0 + length, dtype=np.float64)[:, None]
    out = np.zeros((length, spec.d))
    for k in range(spec.d):
        phase = 2.0 * np.pi * k / max(spec.d, 1)
        for freq, amp in zip(spec.frequencies, spec.amplitudes):
            out[:, k : k + 1] += amp * np.sin(2.0 * np.pi * freq * t + phase)
    return out


def generate_synthetic(spec: SynthSpec) -> RawDataset:
    """Materialize a SynthSpec; bit-identical for identical specs."""
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    train = _base_signal(spec, 0, spec.train_length)
    train += rng.normal(0.0, spec.noise_std, size=train.shape)
    test_clean = _base_signal(spec, spec.train_length, spec.test_length)
    test = test_clean + rng.normal(0.0, spec.noise_std, size=test_clean.shape)
    labels = np.zeros(spec.test_length, dtype=np.int64)

    for anomaly in spec.anomalies:
        lo, hi = anomaly.position, anomaly.end
        offset = anomaly.magnitude * spec.noise_std
        if anomaly.kind == "spike":
            sign = 1.0 if rng.random() < 0.5 else -1.0
            test[lo:hi] += sign * offset
        elif anomaly.kind == "subtle_drift":
            sign = 1.0 if rng.random() < 0.5 else -1.0
            test[lo:hi] += sign * offset
        else:  # subsequence: frequency-shifted replacement for the segment
            shifted = replace(
                spec,
                frequencies=tuple(
                    f * (1.0 + anomaly.magnitude) for f in spec.frequencies
                ),
                anomalies=(),
            )
            test[lo:hi] = (
                _base_signal(shifted, spec.train_length + lo, hi - lo)
                + rng.normal(0.0, spec.noise_std, size=(hi - lo, spec.d))
            )
        labels[lo:hi] = 1
    return RawDataset(train=train, test=test, test_labels=labels, name="synthetic")
