"""Gaussian kernel mixtures and differentiable two-sample MMD estimators.

A kernel mixture evaluates k(a, b) = sum_u w_u * exp(-||a - b||^2 / (2 s_u))
where s_u are the squared-bandwidth values.  The squared distance between
two empirical kernel mean embeddings is estimated either with the plug-in
V-statistic (nonnegative, zero for identical samples, ``mmd_biased``) or
the U-statistic with same-index terms removed (unbiased, possibly negative,
``mmd_unbiased``).  Both are built from autodiff tensors so the estimate can
be minimized end to end; bandwidth selection never carries gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .errors import (
    ContractError,
    DegenerateDataError,
    InsufficientSamplesError,
    ShapeError,
    ValidationError,
)

FIXED = "fixed"
MEDIAN_HEURISTIC = "median_heuristic"


@dataclass(frozen=True)
class KernelSpec:
    """A Gaussian mixture kernel, either fully specified or a median recipe.

    In ``fixed`` mode, ``bandwidths`` holds squared-bandwidth values and
    ``weights`` the matching mixture weights (nonnegative, summing to 1).
    In ``median_heuristic`` mode the spec carries only the ladder recipe and
    must be resolved against data before evaluating a gram matrix.
    """

    bandwidth_mode: str = FIXED
    bandwidths: tuple = ()
    weights: tuple = ()
    ladder_size: int = 5
    step_multiplier: float = 2.0

    def __post_init__(self):
        problems = []
        if self.bandwidth_mode == FIXED:
            if not self.bandwidths:
                problems.append("fixed mode needs at least one bandwidth")
            if any(b <= 0 for b in self.bandwidths):
                problems.append("all bandwidths must be positive")
            if len(self.weights) != len(self.bandwidths):
                problems.append("weights and bandwidths must have equal length")
            elif self.weights:
                if any(w < 0 for w in self.weights):
                    problems.append("weights must be nonnegative")
                if abs(math.fsum(self.weights) - 1.0) > 1e-12:
                    problems.append("weights must sum to 1 within 1e-12")
        elif self.bandwidth_mode == MEDIAN_HEURISTIC:
            if self.ladder_size < 1:
                problems.append("ladder_size must be >= 1")
            if self.step_multiplier <= 1.0:
                problems.append("step_multiplier must be > 1")
        else:
            problems.append(f"unknown bandwidth_mode {self.bandwidth_mode!r}")
        if problems:
            raise ValidationError(problems)

    @classmethod
    def fixed(cls, bandwidths, weights=None) -> "KernelSpec":
        bandwidths = tuple(float(b) for b in bandwidths)
        if weights is None:
            weights = (1.0 / len(bandwidths),) * len(bandwidths) if bandwidths else ()
        return cls(bandwidth_mode=FIXED, bandwidths=bandwidths,
                   weights=tuple(float(w) for w in weights))

    @classmethod
    def median(cls, ladder_size: int = 5, step_multiplier: float = 2.0) -> "KernelSpec":
        return cls(bandwidth_mode=MEDIAN_HEURISTIC, ladder_size=int(ladder_size),
                   step_multiplier=float(step_multiplier))

    def resolve(self, x, y) -> "KernelSpec":
        """Return a fixed spec, running the median heuristic if needed."""
        if self.bandwidth_mode == FIXED:
            return self
        return median_heuristic(x, y, self.ladder_size, self.step_multiplier)


@dataclass
class MmdEstimate:
    """A differentiable MMD estimate plus its provenance."""

    value: Tensor
    estimator_kind: str
    sample_sizes: tuple

    def __post_init__(self):
        if self.estimator_kind == "biased_v" and self.value.item() < -1e-12:
            raise ContractError(
                f"biased estimate must be nonnegative up to rounding, got {self.value.item()}")

    def item(self) -> float:
        return self.value.item()


def _as_matrix(t) -> Tensor:
    t = t if isinstance(t, Tensor) else Tensor(t)
    if t.ndim != 2:
        raise ShapeError(f"expected an n-by-d sample matrix, got shape {t.shape}")
    return t


def _check_dims(x: Tensor, y: Tensor) -> None:
    if x.shape[1] != y.shape[1]:
        raise ShapeError(f"feature dimensions disagree: {x.shape} vs {y.shape}")


def gram(x, y, spec: KernelSpec) -> Tensor:
    """Kernel matrix with entry (i, j) = k(x_i, y_j), differentiable in both inputs.

    Distances are formed by direct differencing, so gram(X, X) has an exactly
    unit diagonal and gram(X, Y) equals gram(Y, X) transposed bit for bit.
    """
    x, y = _as_matrix(x), _as_matrix(y)
    _check_dims(x, y)
    spec = spec.resolve(x, y)
    n, m, d = x.shape[0], y.shape[0], x.shape[1]
    diff = x.reshape((n, 1, d)) - y.reshape((1, m, d))
    d2 = (diff * diff).sum(axis=2)
    out = None
    for bw, w in zip(spec.bandwidths, spec.weights):
        term = d2.mul_scalar(-1.0 / (2.0 * bw)).exp().mul_scalar(w)
        out = term if out is None else out + term
    return out


def median_heuristic(x, y, ladder_size: int = 5, step_multiplier: float = 2.0) -> KernelSpec:
    """Bandwidth ladder around the median pairwise squared distance.

    The base squared bandwidth is the median over all distinct-index pairs of
    the pooled sample (self-pairs excluded).  The ladder holds
    base * step_multiplier**(i - ceil(L/2)) for i in 1..L, uniform weights.
    """
    if ladder_size < 1:
        raise ValidationError("ladder_size must be >= 1")
    if step_multiplier <= 1.0:
        raise ValidationError("step_multiplier must be > 1")
    xv = x.values if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    yv = y.values if isinstance(y, Tensor) else np.asarray(y, dtype=np.float64)
    pooled = np.concatenate([xv, yv], axis=0)
    total = pooled.shape[0]
    if total < 2:
        raise DegenerateDataError("median heuristic needs at least 2 pooled samples")
    diff = pooled[:, None, :] - pooled[None, :, :]
    d2 = (diff * diff).sum(axis=2)
    iu = np.triu_indices(total, k=1)
    base = float(np.median(d2[iu]))
    if base <= 0.0:
        raise DegenerateDataError("all pairwise distances are zero; no usable bandwidth")
    offset = math.ceil(ladder_size / 2)
    bandwidths = tuple(base * step_multiplier ** (i - offset) for i in range(1, ladder_size + 1))
    return KernelSpec.fixed(bandwidths)


def mmd_biased(x, y, spec: KernelSpec) -> MmdEstimate:
    """Plug-in (V-statistic) squared distance between kernel mean embeddings.

    mean(K_xx) - 2 mean(K_xy) + mean(K_yy), all entries included, hence
    nonnegative up to rounding and exactly zero for identical samples.
    """
    x, y = _as_matrix(x), _as_matrix(y)
    _check_dims(x, y)
    if x.shape[0] < 1 or y.shape[0] < 1:
        raise InsufficientSamplesError("biased estimator needs at least 1 sample per side")
    spec = spec.resolve(x, y)
    value = gram(x, x, spec).mean() - gram(x, y, spec).mean().mul_scalar(2.0) + gram(y, y, spec).mean()
    return MmdEstimate(value=value, estimator_kind="biased_v",
                       sample_sizes=(x.shape[0], y.shape[0]))


def mmd_unbiased(x, y, spec: KernelSpec) -> MmdEstimate:
    """U-statistic estimate with same-index kernel terms removed.

    (1/(n(n-1))) sum_{i!=j} K_xx + (1/(m(m-1))) sum_{i!=j} K_yy
    - (2/(nm)) sum K_xy.  Mean zero when both samples share a distribution;
    individual estimates may be negative.
    """
    x, y = _as_matrix(x), _as_matrix(y)
    _check_dims(x, y)
    n, m = x.shape[0], y.shape[0]
    if n < 2 or m < 2:
        raise InsufficientSamplesError(f"unbiased estimator needs >= 2 samples per side, got {n} and {m}")
    spec = spec.resolve(x, y)
    off_x = Tensor(1.0 - np.eye(n))
    off_y = Tensor(1.0 - np.eye(m))
    xx = (gram(x, x, spec) * off_x).sum().mul_scalar(1.0 / (n * (n - 1)))
    yy = (gram(y, y, spec) * off_y).sum().mul_scalar(1.0 / (m * (m - 1)))
    xy = gram(x, y, spec).sum().mul_scalar(2.0 / (n * m))
    return MmdEstimate(value=xx + yy - xy, estimator_kind="unbiased_u", sample_sizes=(n, m))
