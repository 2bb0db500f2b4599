from __future__ import annotations

import math
from enum import StrEnum
from typing import Literal
from typing import Self

from pydantic import BaseModel
from pydantic import ConfigDict
from pydantic import Field
from pydantic import model_validator

from stablab.engine import ENUMERATION_CAP
from stablab.engine import SamplerKind
from stablab.instances import ridge_step_cap
from stablab.theory import datadep_step_cap


class ConfigError(ValueError):
    pass


class ExperimentName(StrEnum):
    """The experiments that can be run from a configuration file"""
    convex_lower = 'convex_lower'
    strongly_convex_lower = 'strongly_convex_lower'
    nonconvex_decreasing = 'nonconvex_decreasing'
    nonconvex_constant = 'nonconvex_constant'
    permutation_vs_uniform = 'permutation_vs_uniform'
    datadep_convex = 'datadep_convex'
    datadep_nonconvex = 'datadep_nonconvex'
    prop1 = 'prop1'
    table1_sweep = 'table1_sweep'
    oracle_crosscheck = 'oracle_crosscheck'


# keys every experiment needs on top of ``experiment``
REQUIRED_KEYS: dict[ExperimentName, tuple[str, ...]] = {
    ExperimentName.convex_lower: ('n', 'T', 'alpha'),
    ExperimentName.strongly_convex_lower: ('n', 'T'),
    ExperimentName.nonconvex_decreasing: ('n', 'T', 'a'),
    ExperimentName.nonconvex_constant: ('n', 'T', 'a'),
    ExperimentName.permutation_vs_uniform: ('n', 'T', 'a'),
    ExperimentName.datadep_convex: ('n', 'd', 'T', 'mu', 'R'),
    ExperimentName.datadep_nonconvex: ('n', 'T', 'b'),
    ExperimentName.prop1: ('n', 'd'),
    ExperimentName.table1_sweep: ('a',),
    ExperimentName.oracle_crosscheck: ('n', 'T', 'alpha'),
}


class ExperimentConfig(BaseModel):
    """A validated experiment configuration.

    Unknown keys are rejected and the preconditions of the chosen experiment are
    checked before anything runs.
    """
    model_config = ConfigDict(extra='forbid', frozen=True)

    experiment: ExperimentName = Field(description='the experiment to run')
    n: int | None = Field(default=None, ge=2, description='number of samples')
    d: int | None = Field(default=None, ge=2, description='feature dimension')
    K: int | None = Field(
        default=None,
        ge=2,
        description='rank of the quadratic part of the convex construction',
    )
    T: int | None = Field(default=None, ge=1, description='number of SGD steps')
    M: int = Field(default=2000, ge=2, description='Monte Carlo trials')
    a: float | None = Field(
        default=None,
        gt=0,
        le=0.1,
        description='step-size constant of the non-convex schedules',
    )
    b: float | None = Field(default=None, gt=0, description='step size b/t')
    alpha: float | None = Field(default=None, ge=0, description='constant step size')
    beta: float | None = Field(default=None, gt=0, description='smoothness β')
    c: float = Field(default=0.99, gt=0, description='the constant c of a/(cβt)')
    mu: float | None = Field(default=None, ge=0, description='regularizer weight μ')
    R: float | None = Field(default=None, gt=0, description='radius of the features')
    t0: int | None = Field(
        default=None,
        ge=1,
        description='burn-in window of the conditional estimate (default n)',
    )
    xi: float = Field(default=0.2, gt=0, description='candidate Rayleigh floor ξ')
    hidden_constant: float = Field(
        default=1.0,
        gt=0,
        description='the constant hidden in the ζ estimate',
    )
    seed: int = Field(default=0, ge=0, description='base seed of all trials')
    sampler: SamplerKind = Field(default=SamplerKind.uniform)
    workers: int = Field(default=1, ge=1, description='worker processes')
    output: str = Field(default='results.csv', description='CSV output path')
    timing: bool = Field(
        default=False,
        description='write measured wall times instead of 0',
    )

    @model_validator(mode='after')
    def _check_preconditions(self) -> Self:
        missing = [
            key for key in REQUIRED_KEYS[self.experiment]
            if getattr(self, key) is None
        ]
        if missing:
            raise ValueError(
                f"experiment '{self.experiment}' is missing required key(s): "
                f"{', '.join(missing)}",
            )
        match self.experiment:
            case ExperimentName.convex_lower | ExperimentName.oracle_crosscheck:
                assert self.alpha is not None and self.n is not None
                # the smallest eigenvalue of A is 1
                if self.alpha > 1:
                    raise ValueError(f'alpha: need α λ_K <= 1, got alpha={self.alpha}')
                d, k = self.d or 3, self.K or 2
                if k >= d:
                    raise ValueError(f'K: need d > K, got d={d}, K={k}')
                if self.experiment is ExperimentName.oracle_crosscheck:
                    assert self.T is not None
                    if self.n**self.T > ENUMERATION_CAP:
                        raise ValueError(
                            f'T: need n^T <= {ENUMERATION_CAP}, got '
                            f'{self.n}^{self.T}',
                        )
            case ExperimentName.nonconvex_decreasing:
                assert self.n is not None and self.T is not None
                t0 = self.t0 or self.n
                if t0 > self.T:
                    raise ValueError(f't0: need t0 <= T, got t0={t0}, T={self.T}')
            case ExperimentName.datadep_convex:
                assert self.n is not None and self.d is not None
                assert self.mu is not None and self.R is not None
                if self.n < 2 * self.d:
                    raise ValueError(f'n: need n ≥ 2d, got n={self.n}, d={self.d}')
                if self.mu < self.n**-4:
                    raise ValueError(
                        f'mu: need μ ≥ γ/n⁴ = {self.n**-4:.3g}, got mu={self.mu}',
                    )
                cap = ridge_step_cap(self.mu, self.R)
                if self.alpha is not None and self.alpha > cap:
                    raise ValueError(
                        f'alpha: need α ≤ μ/(2β²R²) = {cap:.6g}, got alpha={self.alpha}',
                    )
            case ExperimentName.datadep_nonconvex:
                assert self.T is not None and self.b is not None
                if self.T < 2:
                    raise ValueError(f'T: need T >= 2, got T={self.T}')
                cap = datadep_step_cap(self.beta or 1.0, self.T)
                if self.b > cap:
                    raise ValueError(
                        f'b: need b ≤ min{{2/β, 1/(8β² ln T²)}} = {cap:.6g}, '
                        f'got b={self.b}',
                    )
            case ExperimentName.prop1:
                assert self.n is not None and self.d is not None
                if self.d <= 10:
                    raise ValueError(f'd: need d > 10, got d={self.d}')
                if self.n < 2 * self.d:
                    raise ValueError(f'n: need n ≥ 2d, got n={self.n}, d={self.d}')
                if self.M < 100:
                    raise ValueError(f'M: need M >= 100 dataset draws, got M={self.M}')
            case _:
                pass
        return self


Verdict = Literal['pass', 'fail']

# verdict tolerance of Monte Carlo comparisons, in standard errors
SE_TOLERANCE = 3.0
# relative verdict tolerance of exact comparisons
EXACT_TOLERANCE = 1e-12

CSV_COLUMNS = (
    'experiment',
    'n',
    'T',
    'schedule',
    'trials',
    'mean_divergence',
    'stderr',
    'stability_estimate',
    'bound_lower',
    'bound_upper',
    'bound_names',
    'verdict',
    'wall_time_ms',
    'seed',
)


def judge(
        measured: float,
        stderr: float,
        lower: float | None,
        upper: float | None,
) -> Verdict:
    """``pass`` iff ``lower - 3 SE <= measured <= upper + 3 SE`` for the sides that
    are present. The slack never drops below ``1e-12`` relative, which is all an
    exact value (``stderr == 0``) gets.
    """
    if not math.isfinite(measured) or not stderr >= 0:
        return 'fail'
    slack = max(
        SE_TOLERANCE * stderr,
        EXACT_TOLERANCE * max(1.0, abs(measured)),
    )
    if lower is not None and measured < lower - slack:
        return 'fail'
    if upper is not None and measured > upper + slack:
        return 'fail'
    return 'pass'


class ResultRow(BaseModel):
    """One line of the result CSV"""
    experiment: str
    n: int | None
    T: int | None
    schedule: str
    trials: int
    mean_divergence: float | None
    stderr: float
    stability_estimate: float | None = None
    bound_lower: float | None = None
    bound_upper: float | None = None
    bound_names: str = ''
    verdict: Verdict = 'pass'
    wall_time_ms: int = 0
    seed: int = 0
    compared: Literal['divergence', 'stability'] = Field(
        default='divergence',
        exclude=True,
        description='which measured column the bounds apply to',
    )

    @property
    def measured(self) -> float:
        value = (
            self.stability_estimate if self.compared == 'stability'
            else self.mean_divergence
        )
        return math.nan if value is None else value

    def judged(self) -> ResultRow:
        return self.model_copy(
            update={
                'verdict': judge(
                    self.measured,
                    self.stderr,
                    self.bound_lower,
                    self.bound_upper,
                ),
            },
        )

    def summary(self) -> str:
        def fmt(value: float | None) -> str:
            return '-' if value is None else f'{value:.6g}'

        tolerance = (
            f'{SE_TOLERANCE:g}SE' if self.stderr > 0 else f'{EXACT_TOLERANCE:g}'
        )
        return (
            f'{self.experiment} n={fmt(self.n)} T={fmt(self.T)} '
            f'[{self.bound_names}] {self.verdict} measured={fmt(self.measured)} '
            f'lower={fmt(self.bound_lower)} upper={fmt(self.bound_upper)} '
            f'tol={tolerance}'
        )
