"""Rayleigh-quotient floors of datasets and the inversely bounded condition
:math:`E_S[1/(ξ_S + μ)] <= 1/(ξ + μ)` over dataset draws.
"""
from __future__ import annotations

import math
import os
from enum import StrEnum
from typing import NamedTuple

import numpy as np
import numpy.typing as npt
import pandas as pd

from stablab.core import Dataset
from stablab.core import eigen_min_nonzero
from stablab.core import FloatArray
from stablab.core import HypothesisError
from stablab.core import rescale_to_ball
from stablab.core import spectral_build
from stablab.core import trial_rng

__all__ = [
    'DistributionKind',
    'FeatureDistribution',
    'HypothesisError',
    'RayleighCertificate',
    'inverse_rayleigh_expectation',
    'load_dataset_csv',
    'prop1_check',
    'rayleigh_certificate',
    'rayleigh_xi',
]

MIN_DRAWS = 100
# relative slack of the verdict for certificates without sampling noise
EXACT_SLACK = 1e-12


class DistributionKind(StrEnum):
    gaussian = 'gaussian'
    basis_cycle = 'basis_cycle'
    transformed_gaussian = 'transformed_gaussian'


class FeatureDistribution(NamedTuple):
    """A feature distribution in dimension ``d``.

    - ``gaussian``: :math:`N(0, I_d)`
    - ``basis_cycle``: the deterministic sequence ``e_1, e_2, ..., e_d, e_1, ...``
    - ``transformed_gaussian``: :math:`U D x` with :math:`x \\sim N(0, I_k)`, ``U`` the
      ``d×k`` matrix ``basis`` (default: the first ``k`` standard basis vectors) and
      ``D = diag(scales)``

    With ``radius`` set, draws outside the ball of that radius are pulled onto it.
    """
    kind: DistributionKind
    d: int
    scales: FloatArray | None = None
    basis: FloatArray | None = None
    radius: float | None = None

    @classmethod
    def gaussian(cls, d: int, *, radius: float | None = None) -> FeatureDistribution:
        return cls(kind=DistributionKind.gaussian, d=d, radius=radius)

    @classmethod
    def basis_cycle(cls, d: int) -> FeatureDistribution:
        return cls(kind=DistributionKind.basis_cycle, d=d)

    @classmethod
    def transformed_gaussian(
            cls,
            d: int,
            scales: npt.ArrayLike,
            basis: npt.ArrayLike | None = None,
            *,
            radius: float | None = None,
    ) -> FeatureDistribution:
        lam = np.asarray(scales, dtype=np.float64)
        if np.any(lam <= 0):
            raise ValueError('scales of a transformed Gaussian must be positive')
        u = np.eye(d)[:, :lam.shape[0]] if basis is None else np.asarray(basis)
        # validates orthonormality and shapes
        spectral_build(u, lam)
        return cls(
            kind=DistributionKind.transformed_gaussian,
            d=d,
            scales=lam,
            basis=u,
            radius=radius,
        )

    def draw(self, n: int, rng: np.random.Generator) -> FloatArray:
        match self.kind:
            case DistributionKind.gaussian:
                x = rng.standard_normal((n, self.d))
            case DistributionKind.basis_cycle:
                x = np.eye(self.d)[np.arange(n) % self.d]
            case DistributionKind.transformed_gaussian:
                assert self.scales is not None and self.basis is not None
                z = rng.standard_normal((n, self.scales.shape[0]))
                x = (z * self.scales) @ self.basis.T
            case _:
                raise NotImplementedError(self.kind)
        if self.radius is not None:
            x = rescale_to_ball(x, self.radius)
        return x


def rayleigh_xi(s: Dataset | npt.ArrayLike) -> float:
    """The tight floor :math:`ξ_S` of :math:`v^T (\\frac{1}{n}\\sum x_j x_j^T) v / v^T v`
    over the span of the features, i.e. the smallest nonzero eigenvalue of the second
    moment matrix.
    """
    features = s.features if isinstance(s, Dataset) else np.asarray(s, dtype=np.float64)
    return eigen_min_nonzero(features)


class RayleighCertificate(NamedTuple):
    mu: float
    # the candidate floor ξ
    xi: float
    draws: int
    estimate: float
    stderr: float
    # smallest ξ_S over all draws
    xi_min: float

    @property
    def target(self) -> float:
        return 1 / (self.xi + self.mu)

    @property
    def margin(self) -> float:
        """``1/(ξ + μ) - (estimate + 2 SE)``, non-negative when the check passes"""
        return self.target - (self.estimate + 2 * self.stderr)

    @property
    def verdict(self) -> bool:
        return self.margin >= -EXACT_SLACK * max(1.0, self.target)


def rayleigh_certificate(s: Dataset | npt.ArrayLike, mu: float) -> RayleighCertificate:
    """certificate of a single dataset, with its own floor as the candidate"""
    if mu < 0:
        raise ValueError(f'μ must be non-negative, got μ={mu}')
    xi_s = rayleigh_xi(s)
    return RayleighCertificate(
        mu=mu,
        xi=xi_s,
        draws=1,
        estimate=1 / (xi_s + mu),
        stderr=0.0,
        xi_min=xi_s,
    )


def inverse_rayleigh_expectation(
        distribution: FeatureDistribution,
        n: int,
        mu: float,
        M: int,
        seed: int,
        xi: float,
) -> RayleighCertificate:
    """Estimate :math:`E_S[1/(ξ_S + μ)]` from ``M`` datasets of size ``n`` and compare
    it with :math:`1/(ξ + μ)` using a one-sided margin of two standard errors.
    """
    if M < MIN_DRAWS:
        raise ValueError(f'need M >= {MIN_DRAWS} dataset draws, got M={M}')
    if mu < 0 or xi <= 0:
        raise ValueError(f'need μ >= 0 and ξ > 0, got μ={mu}, ξ={xi}')
    floors = np.array([
        rayleigh_xi(distribution.draw(n, trial_rng(seed, k)))
        for k in range(M)
    ])
    values = 1 / (floors + mu)
    return RayleighCertificate(
        mu=mu,
        xi=xi,
        draws=M,
        estimate=float(np.mean(values)),
        stderr=float(np.std(values, ddof=1) / math.sqrt(M)),
        xi_min=float(np.min(floors)),
    )


def prop1_check(
        d: int,
        n: int,
        M: int,
        seed: int,
        *,
        xi: float = 0.2,
        mu: float | None = None,
) -> RayleighCertificate:
    """Check the candidate floor ``ξ`` (default ``1/5``) for spherical Gaussian
    features with ``μ = n⁻⁴`` unless given.

    :raises HypothesisError: unless ``d > 10`` and ``n ≥ 2d``
    """
    if d <= 10:
        raise HypothesisError(f'need d > 10, got d={d}')
    if n < 2 * d:
        raise HypothesisError(f'need n ≥ 2d, got n={n}, d={d}')
    return inverse_rayleigh_expectation(
        FeatureDistribution.gaussian(d),
        n,
        n**-4 if mu is None else mu,
        M,
        seed,
        xi,
    )


def load_dataset_csv(path: str | os.PathLike[str]) -> Dataset:
    """Read a delimited text file with one sample per row, features first and the
    label last. The delimiter is sniffed and a header row is skipped.
    """
    df = pd.read_csv(path, sep=None, engine='python', header=None, comment='#')
    try:
        values = df.to_numpy(dtype=np.float64)
    except ValueError:
        df = pd.read_csv(path, sep=None, engine='python', header=0, comment='#')
        values = df.to_numpy(dtype=np.float64)
    if values.ndim != 2 or values.shape[1] < 2:
        raise ValueError(
            f'{path}: expected at least one feature column and a label column',
        )
    return Dataset.from_arrays(values[:, :-1], values[:, -1])
