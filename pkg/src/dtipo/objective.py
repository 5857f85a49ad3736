"""Empirical objectives over a sample of returns.

``MV``:        U = mean - λ var
``MV_ES_ES``:  U = mean - λ1 var + λ2 ES⁻_{p1} + λ3 ES⁺_{p2}

VaR is the plug-in order statistic R_(⌈pM⌉). The lower tail is every sample
at or below it (k = ⌈pM⌉ entries); the upper tail is every sample at or above
it (k = M - ⌈pM⌉ + 1 entries).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad

MV, MV_ES_ES = "MV", "MV_ES_ES"


@dataclass(frozen=True)
class ObjectiveSpec:
    kind: str = MV_ES_ES
    lam: float = 1.104
    lambda1: float = 0.552
    lambda2: float = 0.276
    lambda3: float = 0.110
    p1: float = 0.01
    p2: float = 0.95

    def __post_init__(self):
        if self.kind not in (MV, MV_ES_ES):
            raise ValueError(f"objective kind must be MV or MV_ES_ES, got {self.kind!r}")
        if min(self.lam, self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("objective weights must be non-negative")
        if self.kind == MV_ES_ES and not 0 < self.p1 < self.p2 < 1:
            raise ValueError(f"need 0 < p1 < p2 < 1, got p1={self.p1}, p2={self.p2}")

    @classmethod
    def mean_variance(cls, lam: float) -> ObjectiveSpec:
        return cls(kind=MV, lam=lam)

    def to_dict(self) -> dict:
        return asdict(self)

    def shift(self, c: float) -> float:
        """Change in U when the constant ``c`` is added to every return."""
        return c if self.kind == MV else c * (1.0 + self.lambda2 + self.lambda3)


def _level_index(p: float, M: int) -> int:
    if not 0 < p < 1:
        raise ValueError(f"tail level must lie in (0, 1), got {p}")
    # guard against p*M landing a hair above an integer through rounding
    k = math.ceil(p * M - 1e-9 * max(1.0, p * M))
    return min(max(k, 1), M)


def _values(sample) -> np.ndarray:
    v = sample.values if isinstance(sample, ad.Tensor) else np.asarray(sample, dtype=float)
    v = v.ravel()
    if v.size == 0:
        raise ValueError("empty sample")
    return v


def empirical_var_at_risk(sample, p: float) -> float:
    v = np.sort(_values(sample))
    return float(v[_level_index(p, v.size) - 1])


def tail_size(p: float, M: int, side: str) -> int:
    k = _level_index(p, M)
    return k if side == "lower" else M - k + 1


def empirical_es(sample, p: float, side: str = "lower") -> ad.Tensor:
    """Lower or upper expected shortfall; differentiable when ``sample`` is on a tape."""
    x = ad.as_tensor(sample)
    M = _values(x).size
    return ad.tail_mean(ad.reshape(x, (M,)), tail_size(p, M, side), side)


@dataclass
class ObjectiveTerms:
    U: ad.Tensor
    mean: float
    var: float
    es_lower: float | None = None
    es_upper: float | None = None

    @property
    def loss(self) -> ad.Tensor:
        return -self.U


def evaluate(spec: ObjectiveSpec, sample) -> ObjectiveTerms:
    """Objective U (a Tensor) and its components; ``-U`` is the training loss."""
    x = ad.as_tensor(sample)
    if _values(x).size < 2:
        raise ValueError("objective needs at least 2 samples")
    mean = ad.reduce_mean(x)
    var = ad.reduce_variance(x)
    if spec.kind == MV:
        U = mean - spec.lam * var
        return ObjectiveTerms(U, mean.item(), var.item())
    es_lo = empirical_es(x, spec.p1, "lower")
    es_hi = empirical_es(x, spec.p2, "upper")
    U = mean - spec.lambda1 * var + spec.lambda2 * es_lo + spec.lambda3 * es_hi
    return ObjectiveTerms(U, mean.item(), var.item(), es_lo.item(), es_hi.item())


def recompose(spec: ObjectiveSpec, mean: float, var: float, es_lower: float = 0.0, es_upper: float = 0.0) -> float:
    """U from its already-computed components."""
    if spec.kind == MV:
        return mean - spec.lam * var
    return mean - spec.lambda1 * var + spec.lambda2 * es_lower + spec.lambda3 * es_upper
