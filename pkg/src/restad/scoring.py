"""Per-point anomaly scores: reconstruction error, RBF dissimilarity, composites.

Scores are computed per time point, flattened back to sequence order by
concatenating windows (windows are non-overlapping, so this is exact).
Both raw channels are MinMax-normalized over the full evaluation set
before being combined; rank order is unaffected for single-channel
criteria, so threshold-free metrics see the raw ordering either way.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError

CRITERIA = ("r_only", "s_only", "r_plus_s", "r_times_s")

TRACE_SCHEMA_VERSION = 1

# Columns of the exported trace CSV, in order.
TRACE_COLUMNS = (
    "global_time_index",
    "eps_r",
    "eps_s",
    "composite",
    "label_if_available",
    "schema_version",
)


def reconstruction_error(x: np.ndarray, xhat: np.ndarray) -> np.ndarray:
    """Squared L2 reconstruction error per time point: [N, T, d] -> [N, T]."""
    x = np.asarray(x, dtype=np.float64)
    xhat = np.asarray(xhat, dtype=np.float64)
    if x.shape != xhat.shape:
        raise ContractError(
            f"reconstruction_error: shape mismatch {x.shape} vs {xhat.shape}"
        )
    diff = x - xhat
    return np.sum(diff * diff, axis=-1)


def dissimilarity(z: np.ndarray) -> np.ndarray:
    """eps_s = 1 - mean over centers of the RBF response: [N, T, M] -> [N, T].

    z lies in (0, 1], so the result lies in [0, 1).
    """
    z = np.asarray(z, dtype=np.float64)
    return 1.0 - np.mean(z, axis=-1)


def minmax(v: np.ndarray) -> np.ndarray:
    """(v - min) / (max - min); a constant input maps to all zeros."""
    v = np.asarray(v, dtype=np.float64)
    lo = v.min()
    hi = v.max()
    if hi == lo:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def composite_score(
    eps_r: np.ndarray, eps_s: np.ndarray, criterion: str
) -> np.ndarray:
    """Combine the two channels per the chosen criterion, flattened to the time axis.

    Each channel is MinMax-normalized over the whole evaluation set first;
    r_only / s_only skip the combination but keep the normalization.
    """
    if criterion not in CRITERIA:
        raise ConfigError(
            f"unknown criterion {criterion!r}; expected one of {CRITERIA}"
        )
    r = minmax(np.ravel(np.asarray(eps_r, dtype=np.float64)))
    s = minmax(np.ravel(np.asarray(eps_s, dtype=np.float64)))
    if r.shape != s.shape:
        raise ContractError(
            f"composite_score: channel lengths differ, {r.shape[0]} vs {s.shape[0]}"
        )
    if criterion == "r_only":
        return r
    if criterion == "s_only":
        return s
    if criterion == "r_plus_s":
        return r + s
    return r * s


@dataclass
class ScoreTrace:
    """Per-point score trace for one evaluation pass.

    eps_r and eps_s hold the raw (pre-normalization) channel values in
    sequence order over the evaluated prefix; composite holds the combined
    score. normalization_bounds records the (min, max) used per channel so
    the normalized values are reconstructible from the raw ones.
    """

    eps_r: np.ndarray
    eps_s: np.ndarray
    composite: np.ndarray
    criterion: str
    normalization_bounds: dict = field(default_factory=dict)
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.eps_r = np.ravel(np.asarray(self.eps_r, dtype=np.float64))
        self.eps_s = np.ravel(np.asarray(self.eps_s, dtype=np.float64))
        self.composite = np.ravel(np.asarray(self.composite, dtype=np.float64))
        n = self.eps_r.shape[0]
        if self.eps_s.shape[0] != n or self.composite.shape[0] != n:
            raise ContractError("ScoreTrace: channel lengths differ")
        if self.criterion not in CRITERIA:
            raise ConfigError(f"unknown criterion {self.criterion!r}")
        if not self.normalization_bounds:
            self.normalization_bounds = {
                "eps_r": (float(self.eps_r.min()), float(self.eps_r.max())),
                "eps_s": (float(self.eps_s.min()), float(self.eps_s.max())),
            }
        if self.labels is not None:
            self.labels = np.ravel(np.asarray(self.labels))
            if self.labels.shape[0] != n:
                raise ContractError(
                    f"ScoreTrace: {self.labels.shape[0]} labels for {n} points"
                )

    def __len__(self) -> int:
        return self.eps_r.shape[0]

    def to_csv(self, path) -> None:
        """Write the trace with one row per evaluated time point.

        Floats are written with repr so files are byte-identical across runs.
        """
        lines = [",".join(TRACE_COLUMNS)]
        has_labels = self.labels is not None
        for i in range(len(self)):
            label = str(int(self.labels[i])) if has_labels else ""
            lines.append(
                f"{i},{float(self.eps_r[i])!r},{float(self.eps_s[i])!r},"
                f"{float(self.composite[i])!r},{label},{TRACE_SCHEMA_VERSION}"
            )
        data = ("\n".join(lines) + "\n").encode("ascii")
        with open(path, "wb") as f:
            f.write(data)


def score_windows(model, windows: np.ndarray, batch_size: int = 32):
    """Run batched inference and return raw (eps_r, eps_s) flattened to sequence order.

    For a model without the similarity layer eps_s is identically zero;
    composite criteria other than r_only are rejected downstream.
    """
    windows = np.asarray(windows, dtype=np.float64)
    if windows.ndim != 3:
        raise ContractError(f"score_windows: expected [N, T, d], got {windows.shape}")
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    r_parts = []
    s_parts = []
    for start in range(0, windows.shape[0], batch_size):
        xb = windows[start : start + batch_size]
        xhat, z = model.forward(xb)
        r_parts.append(np.ravel(reconstruction_error(xb, xhat.data)))
        if z is not None:
            s_parts.append(np.ravel(dissimilarity(z.data)))
        else:
            s_parts.append(np.zeros(xb.shape[0] * xb.shape[1]))
    return np.concatenate(r_parts), np.concatenate(s_parts)


def score_model(
    model,
    windows: np.ndarray,
    criterion: str = "r_times_s",
    labels: np.ndarray | None = None,
    batch_size: int = 32,
) -> ScoreTrace:
    """Score an evaluation split and assemble the per-point trace."""
    if criterion not in CRITERIA:
        raise ConfigError(f"unknown criterion {criterion!r}")
    if not model.config.rbf_enabled and criterion != "r_only":
        raise ContractError(
            "model has no similarity channel; only criterion 'r_only' is defined"
        )
    eps_r, eps_s = score_windows(model, windows, batch_size=batch_size)
    composite = composite_score(eps_r, eps_s, criterion)
    return ScoreTrace(
        eps_r=eps_r,
        eps_s=eps_s,
        composite=composite,
        criterion=criterion,
        labels=labels,
    )


def retarget(trace: ScoreTrace, criterion: str) -> ScoreTrace:
    """Derive a trace for another criterion from already-computed channels.

    Lets one inference pass serve several reports.
    """
    composite = composite_score(trace.eps_r, trace.eps_s, criterion)
    return ScoreTrace(
        eps_r=trace.eps_r.copy(),
        eps_s=trace.eps_s.copy(),
        composite=composite,
        criterion=criterion,
        labels=None if trace.labels is None else trace.labels.copy(),
    )
