from __future__ import annotations

import abc
import math
from collections.abc import Sequence
from typing import NamedTuple

import numpy as np
import numpy.typing as npt

from stablab.core import as_vector
from stablab.core import BoolArray
from stablab.core import DimensionMismatchError
from stablab.core import FloatArray
from stablab.core import LabeledSample
from stablab.core import LossConstants
from stablab.core import LossSpec
from stablab.core import SpectralMatrix
from stablab.core import StepSchedule


def _dot(a: FloatArray, b: FloatArray) -> FloatArray:
    return np.asarray(np.sum(a * b, axis=-1), dtype=np.float64)


class QuadraticLoss(LossSpec):
    """:math:`f(w; z) = \\frac{1}{2} w^T A w - y x^T w`"""
    family = 'quadratic'

    def __init__(self, a: SpectralMatrix, *, lipschitz: float | None = None) -> None:
        full_rank = a.rank == a.dim
        gamma = float(np.min(a.eigenvalues)) if full_rank else 0.0
        super().__init__(
            LossConstants(L=lipschitz, beta=a.norm, gamma=max(gamma, 0.0)),
        )
        self.a = a

    @property
    def dim(self) -> int:
        return self.a.dim

    def value(self, w: FloatArray, x: FloatArray, y: FloatArray) -> FloatArray:
        return 0.5 * _dot(w, self.a.apply(w)) - y * _dot(x, w)

    def gradient(self, w: FloatArray, x: FloatArray, y: FloatArray) -> FloatArray:
        return self.a.apply(w) - np.expand_dims(y, -1) * x

    def hessian(self, w: FloatArray, x: FloatArray, y: float) -> FloatArray:
        return self.a.dense()

    def basis_norm(self, w: FloatArray) -> FloatArray:
        return np.asarray(np.linalg.norm(w @ self.a.basis, axis=-1))


class HuberizedQuadraticLoss(LossSpec):
    """The quadratic loss trimmed to grow linearly once
    :math:`r(w) = \\|Σ^{1/2} U^T w\\|` exceeds ``1/√λ_K``.

    Inside the region the value is :math:`\\frac{1}{2} w^T A w - y x^T w`, outside it
    is :math:`\\frac{1}{\\sqrt{λ_K}}(r(w) - \\frac{1}{2\\sqrt{λ_K}}) - y x^T w`. Both
    value and gradient are continuous across the boundary; points exactly on the
    boundary belong to the inside branch.
    """
    family = 'huberized_quadratic'

    def __init__(self, a: SpectralMatrix, *, lipschitz: float | None = None) -> None:
        if np.any(a.eigenvalues <= 0):
            raise ValueError('huberization needs strictly positive eigenvalues')
        smallest = float(np.min(a.eigenvalues))
        if lipschitz is None:
            lipschitz = 1 / math.sqrt(smallest)
        # the hessian jumps at the boundary, so it is not Lipschitz
        super().__init__(
            LossConstants(L=lipschitz, beta=a.norm, gamma=0.0, rho=math.inf),
        )
        self.a = a
        self.threshold = 1 / math.sqrt(smallest)
        self._sqrt_eigenvalues = np.sqrt(a.eigenvalues)

    @property
    def dim(self) -> int:
        return self.a.dim

    def _radial(self, w: FloatArray) -> tuple[FloatArray, FloatArray]:
        u = (w @ self.a.basis) * self._sqrt_eigenvalues
        return u, np.asarray(np.linalg.norm(u, axis=-1))

    def inside(self, w: FloatArray) -> BoolArray:
        _, r = self._radial(w)
        return np.asarray(r <= self.threshold)

    def basis_norm(self, w: FloatArray) -> FloatArray:
        return np.asarray(np.linalg.norm(w @ self.a.basis, axis=-1))

    def value(self, w: FloatArray, x: FloatArray, y: FloatArray) -> FloatArray:
        _, r = self._radial(w)
        quadratic = np.where(
            r <= self.threshold,
            0.5 * r**2,
            self.threshold * (r - self.threshold / 2),
        )
        return quadratic - y * _dot(x, w)

    def gradient(self, w: FloatArray, x: FloatArray, y: FloatArray) -> FloatArray:
        u, r = self._radial(w)
        inside = r <= self.threshold
        # outside the region only the direction of u matters
        scale = np.where(inside, 1.0, self.threshold / np.where(inside, 1.0, r))
        radial = (u * np.expand_dims(scale, -1) * self._sqrt_eigenvalues)
        return radial @ self.a.basis.T - np.expand_dims(y, -1) * x

    def hessian(self, w: FloatArray, x: FloatArray, y: float) -> FloatArray:
        u, r = self._radial(w)
        if r <= self.threshold:
            return self.a.dense()
        b = self._sqrt_eigenvalues[:, None] * self.a.basis.T
        inner = np.eye(u.shape[0]) / r - np.outer(u, u) / r**3
        return np.asarray(self.threshold * (b.T @ inner @ b))


class ScalarFamily(abc.ABC):
    """A scalar loss ``f_y(u)`` with ``γ <= f_y'' <= β``"""
    name: str
    beta: float
    gamma: float
    rho: float

    @abc.abstractmethod
    def value(self, u: FloatArray, y: FloatArray) -> FloatArray:
        ...

    @abc.abstractmethod
    def first(self, u: FloatArray, y: FloatArray) -> FloatArray:
        ...

    @abc.abstractmethod
    def second(self, u: FloatArray, y: FloatArray) -> FloatArray:
        ...


class Ridge(ScalarFamily):
    """``f_y(u) = ½(u - y)²``"""
    name = 'ridge'
    beta = 1.0
    gamma = 1.0
    rho = 0.0

    def value(self, u: FloatArray, y: FloatArray) -> FloatArray:
        return 0.5 * (u - y)**2

    def first(self, u: FloatArray, y: FloatArray) -> FloatArray:
        return u - y

    def second(self, u: FloatArray, y: FloatArray) -> FloatArray:
        return np.ones_like(u - y)


class RegularizedLinearLoss(LossSpec):
    """:math:`f(w; z) = f_y(w^T x) + \\frac{μ}{2} w^T w` for a :class:`ScalarFamily`"""
    family = 'regularized_linear'

    def __init__(
            self,
            scalar: ScalarFamily,
            mu: float,
            d: int,
            *,
            lipschitz: float | None = None,
    ) -> None:
        if mu < 0:
            raise ValueError(f'regularizer weight must be non-negative, got μ={mu}')
        super().__init__(
            LossConstants(
                L=lipschitz,
                beta=scalar.beta,
                gamma=scalar.gamma,
                rho=scalar.rho,
                mu=mu,
            ),
        )
        self.scalar = scalar
        self.mu = mu
        self._dim = d

    @property
    def dim(self) -> int:
        return self._dim

    def value(self, w: FloatArray, x: FloatArray, y: FloatArray) -> FloatArray:
        return self.scalar.value(_dot(w, x), y) + 0.5 * self.mu * _dot(w, w)

    def gradient(self, w: FloatArray, x: FloatArray, y: FloatArray) -> FloatArray:
        slope = self.scalar.first(_dot(w, x), y)
        return np.expand_dims(slope, -1) * x + self.mu * w

    def hessian(self, w: FloatArray, x: FloatArray, y: float) -> FloatArray:
        curvature = float(self.scalar.second(np.asarray(w @ x), np.asarray(y)))
        return curvature * np.outer(x, x) + self.mu * np.eye(w.shape[0])


def _check_dims(spec: LossSpec, w: FloatArray, z: LabeledSample) -> None:
    if not (w.shape[0] == z.x.shape[0] == spec.dim):
        raise DimensionMismatchError(
            f'loss of dimension {spec.dim} evaluated at w of dimension {w.shape[0]} '
            f'and x of dimension {z.x.shape[0]}',
        )


def loss_value(spec: LossSpec, w: npt.ArrayLike, z: LabeledSample) -> float:
    wv = as_vector(w, name='w')
    z = LabeledSample(as_vector(z.x, name='x'), float(z.y))
    _check_dims(spec, wv, z)
    return float(spec.value(wv, z.x, np.asarray(z.y)))


def loss_gradient(spec: LossSpec, w: npt.ArrayLike, z: LabeledSample) -> FloatArray:
    wv = as_vector(w, name='w')
    z = LabeledSample(as_vector(z.x, name='x'), float(z.y))
    _check_dims(spec, wv, z)
    return np.asarray(spec.gradient(wv, z.x, np.asarray(z.y)), dtype=np.float64)


def loss_hessian(spec: LossSpec, w: npt.ArrayLike, z: LabeledSample) -> FloatArray:
    wv = as_vector(w, name='w')
    z = LabeledSample(as_vector(z.x, name='x'), float(z.y))
    _check_dims(spec, wv, z)
    return spec.hessian(wv, z.x, z.y)


def curvature_proxy(
        loss: LossSpec,
        w0: npt.ArrayLike,
        trajectory_s: Sequence[FloatArray] | FloatArray,
        trajectory_s_prime: Sequence[FloatArray] | FloatArray,
        schedule: StepSchedule,
        t: int,
        *,
        z: LabeledSample,
) -> float:
    """The expansion rate ``ψ_t = min{β, κ_t}`` of the update at step ``t`` with

    .. math::

        κ_t = \\|∇^2 f(w_0; z_t)\\|_2
            + \\frac{ρ}{2} \\|\\sum_{k<t} α_k ∇f(w_{S,k}; z_k)\\|
            + \\frac{ρ}{2} \\|\\sum_{k<t} α_k ∇f(w_{S',k}; z_k)\\|

    :param trajectory_s: gradients ``∇f(w_{S,k}; z_k)`` of steps ``1..t-1`` (rows)
    :param trajectory_s_prime: the same for the run on ``S'``
    :param z: the sample ``z_t`` drawn at step ``t``
    """
    if t < 1:
        raise ValueError(f't must be >= 1, got t={t}')
    grads = np.asarray(trajectory_s, dtype=np.float64).reshape(-1, loss.dim)
    grads_prime = np.asarray(trajectory_s_prime, dtype=np.float64).reshape(-1, loss.dim)
    if grads.shape[0] < t - 1 or grads_prime.shape[0] < t - 1:
        raise ValueError(
            f'gradient histories must cover steps 1..{t - 1}, got '
            f'{grads.shape[0]} and {grads_prime.shape[0]}',
        )
    kappa = float(np.linalg.norm(loss_hessian(loss, w0, z), 2))
    rho = loss.constants.rho
    if t > 1:
        alphas = schedule.steps(t - 1)
        for history in (grads[:t - 1], grads_prime[:t - 1]):
            drift = float(np.linalg.norm(alphas @ history))
            if drift > 0 and rho > 0:
                kappa += rho / 2 * drift
    return min(loss.constants.beta, kappa)


class Expansion(NamedTuple):
    ratio: float
    shift: float


def update_expansion(
        spec: LossSpec,
        alpha: float,
        w: npt.ArrayLike,
        w_prime: npt.ArrayLike,
        z: LabeledSample,
) -> Expansion:
    """How much one gradient update ``G(w) = w - α∇f(w; z)`` stretches distances
    (``‖G(w) - G(w')‖ / ‖w - w'‖``) and how far it moves ``w`` (``‖G(w) - w‖``).

    For a β-smooth loss the ratio is at most ``1 + αβ``; the shift is at most ``αL``.
    """
    wv = as_vector(w, name='w')
    wp = as_vector(w_prime, name='w_prime')
    gap = float(np.linalg.norm(wv - wp))
    if gap == 0:
        raise ValueError('w and w_prime must differ')
    step = alpha * loss_gradient(spec, wv, z)
    step_prime = alpha * loss_gradient(spec, wp, z)
    moved = float(np.linalg.norm((wv - step) - (wp - step_prime)))
    return Expansion(ratio=moved / gap, shift=float(np.linalg.norm(step)))
