"""Adversarial twin-dataset constructions.

All directions are taken from the standard basis so that orthogonality holds exactly:
the special direction is always ``v = e_d`` (the last coordinate).
"""
from __future__ import annotations

import math
import warnings
from enum import StrEnum
from typing import NamedTuple

import numpy as np

from stablab.core import Dataset
from stablab.core import FloatArray
from stablab.core import HypothesisError
from stablab.core import LabeledSample
from stablab.core import LossSpec
from stablab.core import rescale_to_ball
from stablab.core import spectral_build
from stablab.core import standard_basis
from stablab.core import StepSchedule
from stablab.core import TwinPair
from stablab.losses import HuberizedQuadraticLoss
from stablab.losses import QuadraticLoss
from stablab.losses import RegularizedLinearLoss
from stablab.losses import Ridge


class ConstructionError(HypothesisError):
    pass


class ConstructionKind(StrEnum):
    convex_lower = 'convex_lower'
    strongly_convex_lower = 'strongly_convex_lower'
    nonconvex_decreasing = 'nonconvex_decreasing'
    nonconvex_constant = 'nonconvex_constant'
    gaussian_linear = 'gaussian_linear'


class InstanceConstants(NamedTuple):
    L: float
    beta: float
    gamma: float = 0.0
    a: float | None = None
    b: float | None = None
    R: float | None = None
    mu: float = 0.0
    basis_radius: float | None = None


class Instance(NamedTuple):
    kind: ConstructionKind
    loss: LossSpec
    twins: TwinPair
    schedule: StepSchedule
    test_features: FloatArray
    test_labels: FloatArray
    constants: InstanceConstants
    direction: FloatArray | None
    w0: FloatArray

    @property
    def n(self) -> int:
        return self.twins.n

    @property
    def d(self) -> int:
        return self.twins.d

    @property
    def test_points(self) -> list[LabeledSample]:
        return [
            LabeledSample(x, float(y))
            for x, y in zip(self.test_features, self.test_labels)
        ]

    @property
    def gap(self) -> float:
        """``‖y_i x_i - y_i' x_i'‖``, the jump of the divergence at a hit"""
        i = self.twins.index
        s, s_prime = self.twins.s, self.twins.s_prime
        jump = s.labels[i] * s.features[i] - s_prime.labels[i] * s_prime.features[i]
        return float(np.linalg.norm(jump))


def _test_set(points: list[tuple[FloatArray, float]]) -> tuple[FloatArray, FloatArray]:
    return (
        np.stack([x for x, _ in points]),
        np.array([y for _, y in points], dtype=np.float64),
    )


def _twins(
        off_index: list[FloatArray],
        off_labels: list[float],
        v: FloatArray,
        index: int,
        label: float,
) -> TwinPair:
    features = np.stack(off_index)
    labels = np.array(off_labels, dtype=np.float64)
    features[index] = v
    labels[index] = label
    s = Dataset.from_arrays(features, labels)
    return TwinPair.swap(s, index, LabeledSample(-v, label))


def _max_label_norm(*sets: tuple[FloatArray, FloatArray]) -> float:
    return max(
        float(np.max(np.abs(y) * np.linalg.norm(x, axis=1)))
        for x, y in sets
    )


def _check_index(n: int, index: int) -> None:
    if not 0 <= index < n:
        raise ConstructionError(f'differing index must satisfy 0 <= i < n, got i={index}')


def build_convex_lower(
        n: int,
        d: int,
        K: int,
        *,
        alpha: float = 0.05,
        index: int = 0,
) -> Instance:
    """Huberized quadratic instance with a null direction ``v``.

    ``A`` has rank ``K`` on ``e_1..e_K`` with eigenvalues from 2 down to 1 and
    ``v = e_d`` is in its kernel. The twin samples are ``(v, 0.5)`` and
    ``(-v, 0.5)``; every other sample is ``(±e_K, 1)`` so SGD started at zero never
    leaves the quadratic branch as long as ``α λ_K <= 1``.
    Along ``e_K`` the iterates stay in ``[-1/λ_K, 1/λ_K]``, recorded as
    ``constants.basis_radius``.

    The declared ``L = 1/sqrt(λ_K) + max ||y x||`` bounds the gradient on the
    ball ``||U^T w|| <= 1/λ_K`` that SGD actually visits. It is not a global
    constant: outside the ball the Huberized gradient reaches
    ``sqrt(λ_1/λ_K) + max ||y x||``.
    """
    if K < 2:
        raise ConstructionError(f'need K >= 2, got K={K}')
    if K >= d:
        raise ConstructionError(
            f'need d > K to fit a null direction v, got d={d}, K={K}',
        )
    if n < 2:
        raise ConstructionError(f'need n >= 2, got n={n}')
    _check_index(n, index)
    eigenvalues = np.linspace(2.0, 1.0, K)
    if alpha * eigenvalues[-1] > 1:
        raise ConstructionError(f'need α λ_K <= 1, got α={alpha}')
    a = spectral_build(np.eye(d)[:, :K], eigenvalues)
    v = standard_basis(d, d - 1)
    u_k = standard_basis(d, K - 1)
    twins = _twins(
        [(-1.0)**j * u_k for j in range(n)],
        [1.0] * n,
        v,
        index,
        0.5,
    )
    test = _test_set([
        (v, -1.0),
        (v, 1.0),
        (standard_basis(d, 0), 1.0),
        (u_k, -1.0),
    ])
    lipschitz = 1 / math.sqrt(eigenvalues[-1]) + _max_label_norm(
        (twins.s.features, twins.s.labels),
        (twins.s_prime.features, twins.s_prime.labels),
        test,
    )
    return Instance(
        kind=ConstructionKind.convex_lower,
        loss=HuberizedQuadraticLoss(a, lipschitz=lipschitz),
        twins=twins,
        schedule=StepSchedule.constant(alpha),
        test_features=test[0],
        test_labels=test[1],
        constants=InstanceConstants(
            L=lipschitz,
            beta=float(eigenvalues[0]),
            basis_radius=float(1 / eigenvalues[-1]),
        ),
        direction=v,
        w0=np.zeros(d),
    )


def build_strongly_convex_lower(
        n: int,
        d: int,
        beta: float,
        *,
        index: int = 0,
) -> Instance:
    """Diagonal positive definite ``A`` whose smallest eigenvalue ``γ = β/2``
    belongs to ``v``, run with the constant step ``1/(2β)``.
    """
    if d < 2 or n < 2:
        raise ConstructionError(f'need d >= 2 and n >= 2, got d={d}, n={n}')
    if beta <= 0:
        raise ConstructionError(f'need β > 0, got β={beta}')
    _check_index(n, index)
    eigenvalues = np.linspace(beta, beta / 2, d)
    gamma = float(eigenvalues[-1])
    a = spectral_build(np.eye(d), eigenvalues)
    v = standard_basis(d, d - 1)
    twins = _twins(
        [standard_basis(d, j % (d - 1)) for j in range(n)],
        [0.5] * n,
        v,
        index,
        0.5,
    )
    test = _test_set([
        (v, -1.0),
        (v, 1.0),
        (standard_basis(d, 0), 1.0),
        (standard_basis(d, 0), -1.0),
    ])
    # coordinates stay within |y x_k| / λ_k, so ‖Aw‖ <= 0.5 √d
    lipschitz = 0.5 * math.sqrt(d) + _max_label_norm(test)
    return Instance(
        kind=ConstructionKind.strongly_convex_lower,
        loss=QuadraticLoss(a, lipschitz=lipschitz),
        twins=twins,
        schedule=StepSchedule.constant(1 / (2 * beta)),
        test_features=test[0],
        test_labels=test[1],
        constants=InstanceConstants(L=lipschitz, beta=beta, gamma=gamma),
        direction=v,
        w0=np.zeros(d),
    )


def build_nonconvex(
        n: int,
        d: int,
        beta: float,
        a: float,
        constant_step: bool = False,
        *,
        c: float = 0.99,
        index: int = 0,
) -> Instance:
    """Indefinite diagonal ``A`` with eigenvalue ``-β`` along ``v``.

    The step is ``a/(cβt)`` or, with ``constant_step``, ``a/(cβ)``.
    """
    if not 0 < a <= 0.1:
        raise ConstructionError(f'need 0 < a <= 0.1, got a={a}')
    if d < 2 or n < 2:
        raise ConstructionError(f'need d >= 2 and n >= 2, got d={d}, n={n}')
    if beta <= 0:
        raise ConstructionError(f'need β > 0, got β={beta}')
    _check_index(n, index)
    eigenvalues = np.concatenate([np.linspace(beta, beta / 2, d - 1), [-beta]])
    matrix = spectral_build(np.eye(d), eigenvalues)
    v = standard_basis(d, d - 1)
    twins = _twins(
        [standard_basis(d, j % (d - 1)) for j in range(n)],
        [0.5] * n,
        v,
        index,
        0.5,
    )
    test = _test_set([
        (v, -1.0),
        (v, 1.0),
        (standard_basis(d, 0), 1.0),
        (standard_basis(d, 0), -1.0),
    ])
    if constant_step:
        kind = ConstructionKind.nonconvex_constant
        schedule = StepSchedule.constant(a / (c * beta))
    else:
        kind = ConstructionKind.nonconvex_decreasing
        schedule = StepSchedule.inverse_t(a, beta, c)
    # gradient norm at w_0; not Lipschitz globally, runs report the observed maximum
    lipschitz = _max_label_norm(test)
    return Instance(
        kind=kind,
        loss=QuadraticLoss(matrix, lipschitz=lipschitz),
        twins=twins,
        schedule=schedule,
        test_features=test[0],
        test_labels=test[1],
        constants=InstanceConstants(L=lipschitz, beta=beta, a=a),
        direction=v,
        w0=np.zeros(d),
    )


def ridge_step_cap(mu: float, R: float, beta: float = 1.0) -> float:
    """largest constant step ``μ / (2β²R²)`` allowed for the data-dependent bound"""
    return mu / (2 * beta**2 * R**2)


def build_gaussian_linear(
        n: int,
        d: int,
        mu: float,
        R: float,
        seed: int,
        *,
        alpha: float | None = None,
        noise: float = 0.01,
        index: int = 0,
        n_test: int = 8,
) -> Instance:
    """Ridge regression on Gaussian features pulled into the ball of radius ``R``.

    Labels are ``x^T w* + noise`` for a planted unit vector ``w*``. The twin replaces
    sample ``index`` with an independent draw. Test points are fresh draws.
    """
    if n < 2 * d:
        raise ConstructionError(f'need n ≥ 2d, got n={n}, d={d}')
    if d <= 10:
        warnings.warn(
            f'd={d}: the Gaussian Rayleigh guarantee is stated for d > 10',
            UserWarning,
            stacklevel=2,
        )
    if mu < 1 / n**4:
        raise ConstructionError(f'need μ ≥ γ/n⁴ = {1 / n**4:.3g}, got μ={mu}')
    if R <= 0:
        raise ConstructionError(f'need R > 0, got R={R}')
    _check_index(n, index)
    cap = ridge_step_cap(mu, R)
    if alpha is None:
        alpha = cap
    elif alpha > cap:
        raise ConstructionError(f'need α ≤ μ/(2β²R²) = {cap:.6g}, got α={alpha}')

    rng = np.random.default_rng(seed)
    w_star = rng.standard_normal(d)
    w_star /= np.linalg.norm(w_star)

    def draw(m: int) -> tuple[FloatArray, FloatArray]:
        x = rescale_to_ball(rng.standard_normal((m, d)), R)
        return x, x @ w_star + noise * rng.standard_normal(m)

    features, labels = draw(n)
    replacement, replacement_label = draw(1)
    test = draw(n_test)
    s = Dataset.from_arrays(features, labels)
    twins = TwinPair.swap(
        s,
        index,
        LabeledSample(replacement[0], float(replacement_label[0])),
    )
    # |f_y'| at w_0 = 0
    lipschitz = float(
        np.max(np.abs(np.concatenate([labels, replacement_label, test[1]]))),
    )
    return Instance(
        kind=ConstructionKind.gaussian_linear,
        loss=RegularizedLinearLoss(Ridge(), mu, d, lipschitz=lipschitz),
        twins=twins,
        schedule=StepSchedule.constant(alpha),
        test_features=test[0],
        test_labels=test[1],
        constants=InstanceConstants(
            L=lipschitz,
            beta=Ridge.beta,
            gamma=Ridge.gamma,
            R=R,
            mu=mu,
        ),
        direction=None,
        w0=np.zeros(d),
    )
