"""Closed-form stability bounds and the exact divergence recursions.

Every bound is evaluated with the constants it is printed with; ``log`` is the
natural logarithm throughout.
"""
from __future__ import annotations

import math
import warnings
from collections.abc import Callable
from collections.abc import Mapping
from enum import StrEnum
from typing import Literal
from typing import NamedTuple

import numpy as np
from pydantic import BaseModel
from pydantic import Field

from stablab.core import FloatArray
from stablab.core import HypothesisError
from stablab.core import StepSchedule
from stablab.instances import Instance
from stablab.losses import HuberizedQuadraticLoss
from stablab.losses import loss_gradient
from stablab.losses import loss_hessian
from stablab.losses import QuadraticLoss
from stablab.losses import RegularizedLinearLoss
from stablab.losses import Ridge

__all__ = [
    'BoundKind',
    'BoundReport',
    'BoundSide',
    'GrowthCheck',
    'HittingBounds',
    'HypothesisError',
    'MissingBoundParameterError',
    'ZetaParams',
    'datadep_step_cap',
    'evaluate_bound',
    'growth_recursion_check',
    'hitting_probability_bounds',
    'lemma2_lower_bound',
    'recursion_lemma1',
    'zeta_estimate',
    'zeta_params_for',
]


class MissingBoundParameterError(ValueError):
    pass


class BoundKind(StrEnum):
    convex_lower = 'convex_lower'
    convex_upper_prior = 'convex_upper_prior'
    strongly_convex_lower = 'strongly_convex_lower'
    strongly_convex_upper_prior = 'strongly_convex_upper_prior'
    nonconvex_lower = 'nonconvex_lower'
    nonconvex_conditional_lower = 'nonconvex_conditional_lower'
    permutation_upper = 'permutation_upper'
    uniform_upper = 'uniform_upper'
    prior_nonconvex_upper = 'prior_nonconvex_upper'
    datadep_permutation_upper = 'datadep_permutation_upper'
    datadep_uniform_upper = 'datadep_uniform_upper'
    datadep_convex_upper = 'datadep_convex_upper'
    exponential_lower = 'exponential_lower'
    burn_in_probability = 'burn_in_probability'


class BoundSide(StrEnum):
    lower = 'lower'
    upper = 'upper'
    # a probability, neither side of a stability bound
    exact = 'exact'


class BoundReport(BaseModel):
    kind: BoundKind
    side: BoundSide
    value: float = Field(ge=0)
    form: Literal['stability', 'divergence', 'probability'] = 'stability'
    parameters: dict[str, float] = Field(default_factory=dict)


class _P:
    """read access to bound parameters that names the missing symbol"""

    def __init__(self, kind: BoundKind, params: Mapping[str, float]) -> None:
        self.kind = kind
        self.params = dict(params)
        if 'alpha_sum' not in self.params and {'alpha', 'T'} <= self.params.keys():
            self.params['alpha_sum'] = self.params['alpha'] * self.params['T']
        self.used: dict[str, float] = {}

    def __getattr__(self, name: str) -> float:
        try:
            value = float(self.params[name])
        except KeyError:
            raise MissingBoundParameterError(
                f"bound '{self.kind}' needs the parameter '{name}'",
            ) from None
        self.used[name] = value
        return value

    def get(self, name: str, default: float) -> float:
        value = float(self.params.get(name, default))
        self.used[name] = value
        return value


def _slow_growth(p: _P, exponent: float) -> float:
    """``T^e / n^{1+e}``"""
    return p.T**exponent / p.n**(1 + exponent)


def _prior_nonconvex(p: _P) -> float:
    a = p.a
    return (
        (1 + 1 / a) / (p.n - 1) *
        (2 * a * p.L**2 / p.beta)**(1 / (1 + a)) *
        p.T**(a / (1 + a))
    )


class _Formula(NamedTuple):
    side: BoundSide
    stability: Callable[[_P], float]
    divergence: Callable[[_P], float] | None = None


_FORMULAS: dict[BoundKind, _Formula] = {
    BoundKind.convex_lower: _Formula(
        BoundSide.lower,
        lambda p: p.L / (2 * p.n) * p.alpha_sum,
    ),
    BoundKind.convex_upper_prior: _Formula(
        BoundSide.upper,
        lambda p: p.L / p.n * p.alpha_sum,
    ),
    BoundKind.strongly_convex_lower: _Formula(
        BoundSide.lower,
        lambda p: 1 / (16 * p.gamma * p.n),
    ),
    BoundKind.strongly_convex_upper_prior: _Formula(
        BoundSide.upper,
        lambda p: 2 * p.L**2 / (p.gamma * p.n),
    ),
    BoundKind.nonconvex_lower: _Formula(
        BoundSide.lower,
        lambda p: p.get('gap', 1.0) * _slow_growth(p, p.a) / 6,
    ),
    BoundKind.nonconvex_conditional_lower: _Formula(
        BoundSide.lower,
        lambda p: (p.T / p.t0)**p.a / (2 * p.n),
    ),
    BoundKind.permutation_upper: _Formula(
        BoundSide.upper,
        lambda p: 2 * p.L**2 * _slow_growth(p, p.a),
        lambda p: 2 * p.L * _slow_growth(p, p.a),
    ),
    BoundKind.uniform_upper: _Formula(
        BoundSide.upper,
        lambda p: 16 * math.log(p.n) * p.L**2 * _slow_growth(p, p.a),
        lambda p: 16 * math.log(p.n) * p.L * _slow_growth(p, p.a),
    ),
    BoundKind.prior_nonconvex_upper: _Formula(BoundSide.upper, _prior_nonconvex),
    BoundKind.datadep_permutation_upper: _Formula(
        BoundSide.upper,
        lambda p: p.L**2 * _slow_growth(p, p.zeta * p.b) / p.zeta,
    ),
    BoundKind.datadep_uniform_upper: _Formula(
        BoundSide.upper,
        lambda p: (
            16 * math.log(p.n) * p.L**2 * _slow_growth(p, p.zeta * p.b) / p.zeta
        ),
    ),
    BoundKind.datadep_convex_upper: _Formula(
        BoundSide.upper,
        lambda p: 16 * p.L**2 * p.R**2 / (p.xi * p.gamma * p.n),
        lambda p: 4 * p.L * p.R / (p.xi * p.gamma * p.n),
    ),
    BoundKind.exponential_lower: _Formula(
        BoundSide.lower,
        lambda p: math.exp(p.a * p.T / 2) / p.n**2,
    ),
    BoundKind.burn_in_probability: _Formula(
        BoundSide.exact,
        lambda p: 1 - (1 - 1 / p.n)**p.n,
    ),
}


def evaluate_bound(
        kind: BoundKind | str,
        params: Mapping[str, float],
        *,
        divergence: bool = False,
) -> BoundReport:
    """Evaluate the bound ``kind`` at ``params``.

    :param params: symbol to value, e.g. ``{'n': 10, 'T': 1000, 'a': 0.05}``. For the
        convex bounds ``alpha_sum`` may be given directly or as ``alpha`` and ``T``.
    :param divergence: evaluate the divergence form of an upper bound instead of
        its stability form

    :raises MissingBoundParameterError: naming the first missing symbol
    """
    kind = BoundKind(kind)
    formula = _FORMULAS[kind]
    if divergence and formula.divergence is None:
        raise ValueError(f"bound '{kind}' has no divergence form")
    p = _P(kind, params)
    compute = formula.divergence if divergence and formula.divergence else formula.stability
    value = compute(p)
    if kind is BoundKind.burn_in_probability:
        form: Literal['stability', 'divergence', 'probability'] = 'probability'
    else:
        form = 'divergence' if divergence else 'stability'
    return BoundReport(
        kind=kind,
        side=formula.side,
        value=value,
        form=form,
        parameters=p.used,
    )


def _check_contraction(lam: float, alphas: FloatArray) -> None:
    if lam > 0 and np.any(alphas * lam > 1):
        t = int(np.argmax(alphas * lam > 1)) + 1
        raise HypothesisError(
            f'need α_t λ <= 1, violated at t={t} (α_t={alphas[t - 1]:g}, λ={lam:g})',
        )


def recursion_lemma1(
        lam: float,
        schedule: StepSchedule,
        n: int,
        gap: float,
        T: int,
) -> FloatArray:
    """The exact expected divergences ``E‖Δ_1‖..E‖Δ_T‖`` of

    .. math::

        E\\|Δ_t\\| = (1 - α_t λ) E\\|Δ_{t-1}\\| + \\frac{α_t}{n} gap, \\quad Δ_0 = 0

    A negative ``λ`` gives the expanding form ``(1 + α_t |λ|)``.
    """
    alphas = schedule.steps(T)
    _check_contraction(lam, alphas)
    out = np.empty(T)
    value = 0.0
    for t in range(T):
        value = (1 - alphas[t] * lam) * value + alphas[t] * gap / n
        out[t] = value
    return out


def lemma2_lower_bound(
        lam: float,
        schedule: StepSchedule,
        n: int,
        gap: float,
        T: int,
) -> float:
    """The unrolled sum-product

    .. math::

        \\frac{gap}{n} \\sum_{t=1}^{T-1} α_t \\prod_{τ=t+1}^{T-1} (1 - α_τ λ)

    which equals ``E‖Δ_{T-1}‖`` of :func:`recursion_lemma1`.
    """
    if T < 2:
        return 0.0
    alphas = schedule.steps(T - 1)
    _check_contraction(lam, alphas)
    factors = 1 - alphas[1:] * lam
    tail = np.append(np.cumprod(factors[::-1])[::-1], 1.0)
    return gap / n * math.fsum(alphas * tail)


class ZetaParams(BaseModel):
    beta: float = Field(ge=0)
    rho: float = Field(ge=0)
    b: float = Field(ge=0)
    sigma: float = Field(ge=0)
    hessian_at_w0: float = Field(ge=0)
    # may come out slightly negative from estimation noise
    excess_risk_at_w0: float
    hidden_constant: float = Field(default=1.0, ge=0)


def zeta_estimate(zp: ZetaParams) -> float:
    """:math:`c \\min\\{β, E\\|∇^2 f(w_0)\\| + ρ(bσ + \\sqrt{b (F(w_0) - \\inf F)})\\}`"""
    excess = zp.excess_risk_at_w0
    if excess < 0:
        warnings.warn(
            f'negative excess risk {excess:g} clamped to 0',
            RuntimeWarning,
            stacklevel=2,
        )
        excess = 0.0
    drift = zp.b * zp.sigma + math.sqrt(zp.b * excess)
    curvature = zp.hessian_at_w0 + (zp.rho * drift if drift > 0 else 0.0)
    return zp.hidden_constant * min(zp.beta, curvature)


def datadep_step_cap(beta: float, T: int) -> float:
    """the largest ``b`` allowed by the data-dependent bounds, ``min{2/β, 1/(8β² ln T²)}``"""
    if T < 2:
        raise HypothesisError(f'need T >= 2 for ln T² > 0, got T={T}')
    return min(2 / beta, 1 / (8 * beta**2 * math.log(T**2)))


def _empirical_minimum(instance: Instance) -> float:
    s = instance.twins.s
    loss = instance.loss
    if isinstance(loss, RegularizedLinearLoss) and isinstance(loss.scalar, Ridge):
        gram = s.features.T @ s.features / s.n + loss.mu * np.eye(s.d)
        w_min = np.linalg.solve(gram, s.features.T @ s.labels / s.n)
    elif isinstance(loss, QuadraticLoss) and not isinstance(loss, HuberizedQuadraticLoss):
        if np.any(loss.a.eigenvalues < 0):
            raise HypothesisError('excess risk is unbounded for an indefinite A')
        target = s.labels @ s.features / s.n
        w_min = np.linalg.pinv(loss.a.dense()) @ target
        if not np.allclose(loss.a.apply(w_min), target):
            raise HypothesisError('excess risk is unbounded: the mean of y x leaves the range of A')
    else:
        raise HypothesisError(
            f'excess risk needs a convex quadratic or ridge loss, got {loss.family!r}',
        )
    return float(np.mean(loss.value(w_min, s.features, s.labels)))


def zeta_params_for(
        instance: Instance,
        b: float,
        w0: FloatArray | None = None,
        *,
        hidden_constant: float = 1.0,
) -> ZetaParams:
    """Derive :class:`ZetaParams` from the training set ``S`` of an instance: the
    mean Hessian norm at ``w0``, the largest deviation of a sample gradient from the
    full gradient, and the excess empirical risk at ``w0``.

    When ``ρ = 0`` and the empirical risk has no minimum (an indefinite ``A``) the
    excess risk is reported as 0.
    """
    w = instance.w0 if w0 is None else w0
    s = instance.twins.s
    loss = instance.loss
    samples = [s.sample(j) for j in range(s.n)]
    hessians = [float(np.linalg.norm(loss_hessian(loss, w, z), 2)) for z in samples]
    grads = np.stack([loss_gradient(loss, w, z) for z in samples])
    sigma = float(np.max(np.linalg.norm(grads - grads.mean(axis=0), axis=1)))
    risk = float(np.mean(loss.value(w, s.features, s.labels)))
    try:
        excess = risk - _empirical_minimum(instance)
    except HypothesisError:
        # a constant Hessian takes the excess risk out of ζ
        if loss.constants.rho > 0:
            raise
        excess = 0.0
    return ZetaParams(
        beta=loss.constants.beta,
        rho=loss.constants.rho,
        b=b,
        sigma=sigma,
        hessian_at_w0=float(np.mean(hessians)),
        excess_risk_at_w0=excess,
        hidden_constant=hidden_constant,
    )


class GrowthCheck(NamedTuple):
    x_T: float
    bound: float
    holds: bool

    @property
    def ratio(self) -> float:
        return self.x_T / self.bound if self.bound > 0 else math.inf


def growth_recursion_check(a: float, y: float, t0: int, T: int) -> GrowthCheck:
    """Iterate ``x_{t+1} = (1 + a/(0.99 t)) x_t + y/t`` from ``x_{t0} = 0`` and compare
    ``x_T`` with ``y (T/t0)^a``.
    """
    if not 0 < a <= 0.1:
        raise HypothesisError(f'need 0 < a <= 0.1, got a={a}')
    if t0 < 1 or T < t0:
        raise HypothesisError(f'need 1 <= t0 <= T, got t0={t0}, T={T}')
    x = 0.0
    for t in range(t0, T):
        x = (1 + a / (0.99 * t)) * x + y / t
    bound = y * (T / t0)**a
    return GrowthCheck(x_T=x, bound=bound, holds=x >= bound)


class HittingBounds(NamedTuple):
    exact_zero_given_hit: float
    zero_bound: float
    exact_hit_given_hit: float
    hit_bound: float

    @property
    def holds(self) -> bool:
        return (
            self.exact_zero_given_hit <= self.zero_bound and
            self.exact_hit_given_hit <= self.hit_bound
        )


def hitting_probability_bounds(
        n: int,
        t_prev: int,
        t_cur: int,
        c: float,
) -> HittingBounds:
    """Conditional hitting probabilities under uniform sampling, with ``q = 1 - 1/n``:

    - ``P[H > t_prev | H <= t_cur] = q^{t_prev}(1 - q^{t_cur - t_prev}) / (1 - q^{t_cur})``,
      bounded by ``n / (n + t_prev)``
    - ``P[H <= t_prev | H <= t_cur] = (1 - q^{t_prev}) / (1 - q^{t_cur})``,
      bounded by ``(1 + t_cur/n) / c``
    """
    if n < 2:
        raise HypothesisError(f'need n >= 2, got n={n}')
    if t_prev < 1:
        raise HypothesisError(f'need t_prev >= 1, got t_prev={t_prev}')
    if c <= 1:
        raise HypothesisError(f'need c > 1, got c={c}')
    if abs(t_cur - c * t_prev) >= 1:
        raise HypothesisError(
            f'need t_cur = c t_prev, got t_cur={t_cur}, c={c}, t_prev={t_prev}',
        )
    q = 1 - 1 / n
    hit_cur = 1 - q**t_cur
    return HittingBounds(
        exact_zero_given_hit=q**t_prev * (1 - q**(t_cur - t_prev)) / hit_cur,
        zero_bound=n / (n + t_prev),
        exact_hit_given_hit=(1 - q**t_prev) / hit_cur,
        hit_bound=(1 + t_cur / n) / c,
    )
