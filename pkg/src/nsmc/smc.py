"""Generic sequential Monte Carlo machinery.

Log-domain weight handling, multinomial resampling, effective sample
size, the particle-system container, the common filter-output record and
the bootstrap particle filter baseline.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from scipy.special import logsumexp

from .exceptions import WeightCollapseError
from .model import (
    Dataset,
    IndependentModel,
    IndependentSsmSpec,
    ModelSpec,
    StssmModel,
    StssmSpec,
    make_model,
)

__all__ = [
    "normalize_logweights",
    "ess",
    "multinomial_resample",
    "ParticleSystem",
    "FilterOutput",
    "bootstrap_pf",
]


def normalize_logweights(logw: np.ndarray) -> tuple[np.ndarray, float]:
    """Normalize log-weights with a max shift.

    Returns the probability vector and ``log((1/N) * sum(exp(logw)))``.
    Entries of ``-inf`` are allowed; if every entry is ``-inf`` a
    :class:`WeightCollapseError` is raised.
    """
    logw = np.asarray(logw, dtype=float)
    if np.any(np.isnan(logw)):
        raise ValueError("log-weights contain NaN")
    m = np.max(logw)
    if not np.isfinite(m):
        raise WeightCollapseError(step=-1, detail="all log-weights are -inf")
    w = np.exp(logw - m)
    total = w.sum()
    log_mean = m + np.log(total) - np.log(logw.size)
    return w / total, float(log_mean)


def ess(probabilities: np.ndarray) -> float:
    """Effective sample size ``1 / sum(p_i^2)`` of normalized weights."""
    p = np.asarray(probabilities, dtype=float)
    return float(1.0 / np.sum(p * p))


def multinomial_resample(
    probabilities: np.ndarray, count: int, rng: np.random.Generator
) -> np.ndarray:
    """Draw ``count`` i.i.d. categorical indices by inverse CDF.

    Uses strict ``u < cum`` comparisons so indices with zero probability
    are never selected; the cumulative array is pinned to end at exactly
    1.0.
    """
    cum = np.cumsum(np.asarray(probabilities, dtype=float))
    cum[-1] = 1.0
    u = rng.random(count)
    return np.searchsorted(cum, u, side="right")


def _categorical_rows(logw: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One categorical draw per row of a batch of log-weight vectors.

    ``logw`` has shape ``(..., M)``; returns integer indices of shape
    ``(...)``.  Rows whose weights all vanish fall back to index 0 (the
    caller is responsible for masking such rows).
    """
    m = np.max(logw, axis=-1, keepdims=True)
    w = np.exp(logw - np.where(np.isfinite(m), m, 0.0))
    cum = np.cumsum(w, axis=-1)
    total = cum[..., -1:]
    u = rng.random(logw.shape[:-1] + (1,)) * total
    idx = np.sum(cum <= u, axis=-1)
    return np.minimum(idx, logw.shape[-1] - 1)


def _multinomial_rows(
    logw: np.ndarray, count: int, rng: np.random.Generator
) -> np.ndarray:
    """``count`` categorical draws per row; shape ``(..., count)``.

    Rows are packed into one sorted array with integer offsets so a
    single ``searchsorted`` serves every row; this keeps memory linear
    in ``rows * max(m, count)``.
    """
    m_size = logw.shape[-1]
    batch = logw.shape[:-1]
    shift = np.max(logw, axis=-1, keepdims=True)
    w = np.exp(logw - np.where(np.isfinite(shift), shift, 0.0))
    cum = np.cumsum(w, axis=-1)
    total = cum[..., -1:]
    safe = np.where(total > 0.0, total, 1.0)
    p = cum / safe
    p[..., -1] = 1.0
    u = rng.random(batch + (count,))
    rows = int(np.prod(batch)) if batch else 1
    offsets = 2.0 * np.arange(rows, dtype=float)
    flat_p = (p.reshape(rows, m_size) + offsets[:, None]).ravel()
    flat_u = (u.reshape(rows, count) + offsets[:, None]).ravel()
    idx = np.searchsorted(flat_p, flat_u, side="right")
    idx = idx - np.repeat(np.arange(rows) * m_size, count)
    return np.minimum(idx, m_size - 1).reshape(batch + (count,))


@dataclass(frozen=True)
class ParticleSystem:
    """State of an outer particle filter after step ``t``.

    ``states`` holds the current time-step particles only; full paths are
    reconstructable on demand from the per-step ancestor records.
    """

    states: np.ndarray  # (N, n_x)
    ancestry: tuple[np.ndarray, ...]  # one (N,) index array per step >= 2
    logw: np.ndarray  # (N,) log-weights (zeros when fully adapted)
    logZ: float
    t: int

    @property
    def n(self) -> int:
        return self.states.shape[0]

    def normalized(self) -> tuple[np.ndarray, float]:
        return normalize_logweights(self.logw)


@dataclass(frozen=True)
class FilterOutput:
    """Per-step summaries of one filter run.

    Serialized as CSV with header ``t,stat,component,value``; the
    ``component`` column is empty for scalar statistics (``logZ_increment``
    and ``ess``).  Time and component indices are 1-based in the file.
    """

    method: str
    filter_means: np.ndarray  # (T, n_x)
    filter_vars: np.ndarray  # (T, n_x)
    logz_increments: np.ndarray  # (T,)
    ess_trace: np.ndarray | None = None  # (T,)

    @property
    def T(self) -> int:
        return self.filter_means.shape[0]

    @property
    def n_x(self) -> int:
        return self.filter_means.shape[1]

    @property
    def logZ(self) -> float:
        return float(np.sum(self.logz_increments))

    def to_csv(self, path: str | Path) -> None:
        with open(Path(path), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "stat", "component", "value"])
            for t in range(self.T):
                for d in range(self.n_x):
                    writer.writerow(
                        [t + 1, "mean", d + 1, repr(float(self.filter_means[t, d]))]
                    )
                for d in range(self.n_x):
                    writer.writerow(
                        [t + 1, "var", d + 1, repr(float(self.filter_vars[t, d]))]
                    )
                writer.writerow(
                    [t + 1, "logZ_increment", "", repr(float(self.logz_increments[t]))]
                )
                if self.ess_trace is not None:
                    writer.writerow([t + 1, "ess", "", repr(float(self.ess_trace[t]))])

    @classmethod
    def from_csv(cls, path: str | Path, method: str = "") -> "FilterOutput":
        rows = []
        with open(Path(path), newline="") as fh:
            reader = csv.reader(fh)
            next(reader)
            rows = list(reader)
        T = max(int(r[0]) for r in rows)
        n_x = max(int(r[2]) for r in rows if r[1] == "mean")
        means = np.full((T, n_x), np.nan)
        variances = np.full((T, n_x), np.nan)
        logz = np.full(T, np.nan)
        ess_vals = np.full(T, np.nan)
        has_ess = False
        for r in rows:
            t = int(r[0]) - 1
            if r[1] == "mean":
                means[t, int(r[2]) - 1] = float(r[3])
            elif r[1] == "var":
                variances[t, int(r[2]) - 1] = float(r[3])
            elif r[1] == "logZ_increment":
                logz[t] = float(r[3])
            elif r[1] == "ess":
                ess_vals[t] = float(r[3])
                has_ess = True
        return cls(
            method=method,
            filter_means=means,
            filter_vars=variances,
            logz_increments=logz,
            ess_trace=ess_vals if has_ess else None,
        )


def _weighted_summaries(states, probs):
    mean = probs @ states
    var = probs @ (states - mean) ** 2
    return mean, var


def bootstrap_pf(
    model: ModelSpec | StssmModel | IndependentModel,
    data: Dataset,
    N: int,
    rng: np.random.Generator,
    ess_threshold: float | None = None,
) -> FilterOutput:
    """Bootstrap particle filter: propose from the transition prior.

    Resamples multinomially every step by default.  ``ess_threshold``
    optionally switches to adaptive resampling (resample only when the
    effective sample size drops below ``ess_threshold * N``); the default
    of ``None`` matches the per-step-resampling analysis used everywhere
    else in this package.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    m = (
        make_model(model)
        if isinstance(model, (StssmSpec, IndependentSsmSpec))
        else model
    )
    T, ys = data.T, data.observations
    means = np.empty((T, m.n_x))
    variances = np.empty((T, m.n_x))
    logz_inc = np.empty(T)
    ess_trace = np.empty(T)
    log_n = np.log(N)

    states = m.sample_initial(N, rng)
    logw_inc = m.log_obs(ys[0], states)
    try:
        probs, log_mean = normalize_logweights(logw_inc)
    except WeightCollapseError:
        raise WeightCollapseError(step=1) from None
    logz_inc[0] = log_mean
    with np.errstate(divide="ignore"):
        logw = np.log(probs)
    ess_trace[0] = ess(probs)
    means[0], variances[0] = _weighted_summaries(states, probs)

    for t in range(1, T):
        probs, _ = normalize_logweights(logw)
        do_resample = (
            ess_threshold is None or ess(probs) < ess_threshold * N
        )
        if do_resample:
            ancestors = multinomial_resample(probs, N, rng)
            states = states[ancestors]
            carried = np.zeros(N)
        else:
            carried = logw - logsumexp(logw)
        states = m.sample_transition(states, rng)
        logw_inc = m.log_obs(ys[t], states)
        logw = carried + logw_inc
        try:
            probs, log_mean = normalize_logweights(logw)
        except WeightCollapseError:
            raise WeightCollapseError(step=t + 1) from None
        if do_resample:
            logz_inc[t] = log_mean
        else:
            # Carried weights are normalized, so the increment is a
            # weighted mean rather than a plain mean.
            logz_inc[t] = float(logsumexp(logw))
        ess_trace[t] = ess(probs)
        means[t], variances[t] = _weighted_summaries(states, probs)

    return FilterOutput(
        method="bpf",
        filter_means=means,
        filter_vars=variances,
        logz_increments=logz_inc,
        ess_trace=ess_trace,
    )
