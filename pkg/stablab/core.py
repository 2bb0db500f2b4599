from __future__ import annotations

import abc
from collections.abc import Sequence
from enum import StrEnum
from typing import NamedTuple

import numpy as np
import numpy.typing as npt

FloatArray = npt.NDArray[np.float64]
IntArray = npt.NDArray[np.intp]
BoolArray = npt.NDArray[np.bool_]

# tolerance for identities that hold exactly in real arithmetic
EXACT_TOL = 1e-10
# eigenvalues below this fraction of the largest one are treated as zero
RANK_TOL = 1e-10


class SpectralBasisError(ValueError):
    pass


class EmptySpanError(ValueError):
    pass


class DimensionMismatchError(ValueError):
    pass


class HypothesisError(ValueError):
    """Raised when the parameters violate a hypothesis of the result being checked.
    The message always names the failed condition.
    """


def as_vector(values: npt.ArrayLike, *, name: str = 'vector') -> FloatArray:
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise DimensionMismatchError(
            f"{name} must be a non-empty 1-d vector, got shape {v.shape}",
        )
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} has non-finite entries")
    return v


class SpectralMatrix(NamedTuple):
    """A symmetric matrix stored by its eigen-pairs, :math:`A = U diag(λ) U^T`."""
    basis: FloatArray
    eigenvalues: FloatArray

    @property
    def dim(self) -> int:
        return int(self.basis.shape[0])

    @property
    def rank(self) -> int:
        return int(self.basis.shape[1])

    @property
    def norm(self) -> float:
        """spectral norm ``max |λ_k|``"""
        return float(np.max(np.abs(self.eigenvalues)))

    def apply(self, v: FloatArray) -> FloatArray:
        """Compute ``A v``. Works row-wise on stacked vectors of shape ``(..., d)``."""
        return ((v @ self.basis) * self.eigenvalues) @ self.basis.T

    def dense(self) -> FloatArray:
        return (self.basis * self.eigenvalues) @ self.basis.T


def spectral_build(
        basis: npt.ArrayLike,
        eigenvalues: npt.ArrayLike,
) -> SpectralMatrix:
    """Build a :class:`SpectralMatrix` after checking that the columns of ``basis``
    are orthonormal.

    :param basis: a ``d×K`` matrix with orthonormal columns.
    :param eigenvalues: the ``K`` eigenvalues belonging to the columns.

    :raises SpectralBasisError: if ``UᵀU`` deviates from the identity by more than
        ``1e-10`` or the shapes do not fit together.
    """
    u = np.asarray(basis, dtype=np.float64)
    lam = np.asarray(eigenvalues, dtype=np.float64)
    if u.ndim == 1:
        u = u[:, None]
    if u.ndim != 2 or lam.ndim != 1 or u.shape[1] != lam.shape[0]:
        raise SpectralBasisError(
            f"basis of shape {u.shape} does not match {lam.shape[0]} eigenvalues",
        )
    if u.shape[1] > u.shape[0]:
        raise SpectralBasisError(
            f"cannot fit {u.shape[1]} orthonormal columns into dimension {u.shape[0]}",
        )
    gram = u.T @ u
    deviation = float(np.max(np.abs(gram - np.eye(u.shape[1]))))
    if deviation > EXACT_TOL:
        raise SpectralBasisError(
            f"basis columns are not orthonormal (max |UᵀU - I| = {deviation:.3g})",
        )
    if not np.all(np.isfinite(lam)):
        raise SpectralBasisError('eigenvalues must be finite')
    return SpectralMatrix(basis=u, eigenvalues=lam)


def standard_basis(d: int, k: int) -> FloatArray:
    """unit vector ``e_k`` (0-based) of dimension ``d``"""
    e = np.zeros(d)
    e[k] = 1.0
    return e


class LabeledSample(NamedTuple):
    x: FloatArray
    y: float


class Dataset(NamedTuple):
    """``n`` labeled samples, stored column-wise as a feature matrix and labels."""
    features: FloatArray
    labels: FloatArray

    @classmethod
    def from_arrays(
            cls,
            features: npt.ArrayLike,
            labels: npt.ArrayLike,
    ) -> Dataset:
        x = np.asarray(features, dtype=np.float64)
        y = np.asarray(labels, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
            raise DimensionMismatchError(
                f'features must have shape (n, d) with n, d >= 1, got {x.shape}',
            )
        if y.shape != (x.shape[0],):
            raise DimensionMismatchError(
                f'expected {x.shape[0]} labels, got shape {y.shape}',
            )
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ValueError('dataset has non-finite entries')
        return cls(features=x, labels=y)

    @classmethod
    def from_samples(cls, samples: Sequence[LabeledSample]) -> Dataset:
        if not samples:
            raise ValueError('a dataset needs at least one sample')
        return cls.from_arrays(
            np.stack([np.asarray(z.x, dtype=np.float64) for z in samples]),
            [z.y for z in samples],
        )

    @property
    def n(self) -> int:
        return int(self.features.shape[0])

    @property
    def d(self) -> int:
        return int(self.features.shape[1])

    def sample(self, j: int) -> LabeledSample:
        return LabeledSample(x=self.features[j], y=float(self.labels[j]))

    def replace(self, i: int, z: LabeledSample) -> Dataset:
        """return a copy with sample ``i`` swapped for ``z``"""
        features = self.features.copy()
        labels = self.labels.copy()
        features[i] = as_vector(z.x, name='replacement feature')
        labels[i] = z.y
        return Dataset.from_arrays(features, labels)


class TwinPair(NamedTuple):
    s: Dataset
    s_prime: Dataset
    index: int

    @classmethod
    def create(cls, s: Dataset, s_prime: Dataset, index: int) -> TwinPair:
        if s.features.shape != s_prime.features.shape:
            raise DimensionMismatchError(
                f'twin datasets differ in shape: {s.features.shape} vs '
                f'{s_prime.features.shape}',
            )
        if not 0 <= index < s.n:
            raise ValueError(f'differing index {index} outside of 0..{s.n - 1}')
        others = np.arange(s.n) != index
        if not (
            np.array_equal(s.features[others], s_prime.features[others]) and
            np.array_equal(s.labels[others], s_prime.labels[others])
        ):
            raise ValueError(f'twin datasets differ at an index other than {index}')
        return cls(s=s, s_prime=s_prime, index=index)

    @classmethod
    def swap(cls, s: Dataset, index: int, z: LabeledSample) -> TwinPair:
        return cls.create(s, s.replace(index, z), index)

    @property
    def n(self) -> int:
        return self.s.n

    @property
    def d(self) -> int:
        return self.s.d


class ScheduleKind(StrEnum):
    constant = 'constant'
    inverse_t = 'inverse_t'
    harmonic = 'harmonic'


class StepSchedule(NamedTuple):
    """Step sizes of SGD. ``α_t`` is defined for ``t >= 1`` as

    - ``constant``: ``α``
    - ``inverse_t``: ``a / (c β t)``
    - ``harmonic``: ``b / t``
    """
    kind: ScheduleKind
    alpha: float = 0.0
    a: float = 0.0
    beta: float = 0.0
    c: float = 0.99
    b: float = 0.0

    @classmethod
    def constant(cls, alpha: float) -> StepSchedule:
        if alpha < 0:
            raise ValueError(f'step size must be non-negative, got α={alpha}')
        return cls(kind=ScheduleKind.constant, alpha=float(alpha))

    @classmethod
    def inverse_t(cls, a: float, beta: float, c: float = 0.99) -> StepSchedule:
        if a <= 0 or beta <= 0 or c <= 0:
            raise ValueError(
                f'a, β and c must be positive, got a={a}, β={beta}, c={c}',
            )
        return cls(kind=ScheduleKind.inverse_t, a=float(a), beta=float(beta), c=c)

    @classmethod
    def harmonic(cls, b: float) -> StepSchedule:
        if b <= 0:
            raise ValueError(f'b must be positive, got b={b}')
        return cls(kind=ScheduleKind.harmonic, b=float(b))

    def steps(self, T: int) -> FloatArray:
        """α_1..α_T"""
        t = np.arange(1, T + 1, dtype=np.float64)
        match self.kind:
            case ScheduleKind.constant:
                return np.full(T, self.alpha)
            case ScheduleKind.inverse_t:
                return self.a / (self.c * self.beta * t)
            case ScheduleKind.harmonic:
                return self.b / t
            case _:
                raise NotImplementedError(self.kind)

    def at(self, t: int) -> float:
        if t < 1:
            raise ValueError(f'step sizes are defined for t >= 1, got t={t}')
        return float(self.steps(t)[-1])

    def describe(self) -> str:
        match self.kind:
            case ScheduleKind.constant:
                return f'constant({self.alpha:g})'
            case ScheduleKind.inverse_t:
                return f'a/(c*beta*t)(a={self.a:g};beta={self.beta:g};c={self.c:g})'
            case ScheduleKind.harmonic:
                return f'b/t(b={self.b:g})'
            case _:
                raise NotImplementedError(self.kind)


class LossConstants(NamedTuple):
    """declared constants of a loss family; ``L`` is ``None`` when not declared"""
    L: float | None
    beta: float
    gamma: float = 0.0
    rho: float = 0.0
    mu: float = 0.0


class LossSpec(abc.ABC):
    """The contract every loss family fulfils.

    ``value``, ``gradient`` work on stacked inputs: ``w`` and ``x`` of shape
    ``(..., d)`` and ``y`` of shape ``(...)``, broadcasting against each other.
    """
    family: str

    def __init__(self, constants: LossConstants) -> None:
        if not constants.beta >= constants.gamma >= 0:
            raise ValueError(
                f'declared constants must satisfy β >= γ >= 0, got '
                f'β={constants.beta}, γ={constants.gamma}',
            )
        if constants.L is not None and constants.L <= 0:
            raise ValueError(f'declared L must be positive, got L={constants.L}')
        self.constants = constants

    @property
    @abc.abstractmethod
    def dim(self) -> int:
        ...

    @abc.abstractmethod
    def value(self, w: FloatArray, x: FloatArray, y: FloatArray) -> FloatArray:
        ...

    @abc.abstractmethod
    def gradient(self, w: FloatArray, x: FloatArray, y: FloatArray) -> FloatArray:
        ...

    @abc.abstractmethod
    def hessian(self, w: FloatArray, x: FloatArray, y: float) -> FloatArray:
        """Hessian at a single point, shape ``(d, d)``"""

    def basis_norm(self, w: FloatArray) -> FloatArray | None:
        """``‖Uᵀw‖`` for losses built on a spectral matrix, else ``None``"""
        return None

    def inside(self, w: FloatArray) -> BoolArray | None:
        """whether ``w`` is in the quadratic branch of a piecewise loss"""
        return None


def eigen_min_nonzero(samples: Sequence[npt.ArrayLike] | FloatArray) -> float:
    """Smallest nonzero eigenvalue of the second moment matrix
    :math:`\\frac{1}{n}\\sum_j x_j x_j^T`, restricted to its range.

    Eigenvalues below ``1e-10`` times the largest one count as zero.

    :param samples: the feature vectors ``x_1..x_n`` (a list or an ``(n, d)`` array)

    :raises EmptySpanError: if all vectors are zero
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError(f'expected a non-empty list of vectors, got shape {x.shape}')
    second_moment = x.T @ x / x.shape[0]
    eigenvalues = np.linalg.eigvalsh(second_moment)
    largest = float(eigenvalues[-1])
    if largest <= 0:
        raise EmptySpanError('empty span: all feature vectors are zero')
    nonzero = eigenvalues[eigenvalues > RANK_TOL * largest]
    return float(nonzero[0])


def finite_diff_gradient(
        loss: LossSpec,
        w: FloatArray,
        z: LabeledSample,
        h: float = 1e-5,
) -> FloatArray:
    """Central differences ``(f(w + h e_k) - f(w - h e_k)) / 2h`` per coordinate.

    ``w`` has to be at least ``10h`` away from any branch boundary of the loss.
    """
    if h <= 0:
        raise ValueError(f'h must be positive, got h={h}')
    w = as_vector(w, name='w')
    steps = np.eye(w.shape[0]) * h
    x = np.broadcast_to(z.x, steps.shape)
    y = np.full(w.shape[0], z.y)
    upper = loss.value(w + steps, x, y)
    lower = loss.value(w - steps, x, y)
    return np.asarray((upper - lower) / (2 * h), dtype=np.float64)


def rescale_to_ball(x: FloatArray, radius: float) -> FloatArray:
    """shrink every row with ``‖x‖ > radius`` onto the sphere of that radius"""
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    scale = np.minimum(1.0, radius / np.maximum(norms, np.finfo(np.float64).tiny))
    return x * scale


def trial_rng(base_seed: int, k: int, stream: int = 0) -> np.random.Generator:
    """Generator of trial ``k``. Trials never share state and the stream of a trial
    only depends on ``(base_seed, k, stream)``.
    """
    return np.random.default_rng(
        np.random.SeedSequence(base_seed, spawn_key=(k, stream)),
    )


def derived_seed(base_seed: int, k: int, stream: int = 0) -> int:
    seq = np.random.SeedSequence(base_seed, spawn_key=(k, stream))
    return int(seq.generate_state(1, dtype=np.uint64)[0])
