"""Coupled SGD on twin datasets.

Both runs of a trial consume the same index sequence. Trials are propagated in
fixed-size chunks, vectorised over the trials of a chunk, and reduced in trial
order, so results do not depend on the number of workers.
"""
from __future__ import annotations

import math
import warnings
from collections.abc import Iterator
from collections.abc import Sequence
from concurrent.futures import ProcessPoolExecutor
from enum import StrEnum
from typing import Literal
from typing import NamedTuple

import numpy as np

from stablab.core import BoolArray
from stablab.core import FloatArray
from stablab.core import IntArray
from stablab.core import LossSpec
from stablab.core import trial_rng
from stablab.instances import Instance

# a trial whose divergence passes this value is flagged as overflowed
OVERFLOW_THRESHOLD = 1e12
# conditional estimates abort below this acceptance rate
MIN_ACCEPTANCE = 1e-4
ACCEPTANCE_PROBE = 50_000
ENUMERATION_CAP = 2_000_000
TRIAL_CHUNK = 1024
ENUMERATION_CHUNK = 65_536


class EnumerationCapError(ValueError):
    pass


class AcceptanceRateError(RuntimeError):
    pass


class SamplerKind(StrEnum):
    uniform = 'uniform'
    permutation = 'permutation'


def draw_indices(
        n: int,
        T: int,
        sampler: SamplerKind,
        rng: np.random.Generator,
) -> IntArray:
    """The index sequence ``i_1..i_T`` (0-based). The permutation sampler draws a
    fresh permutation for every epoch of ``n`` steps.
    """
    if sampler is SamplerKind.uniform:
        return rng.integers(0, n, size=T).astype(np.intp)
    epochs = -(-T // n)
    return np.concatenate([rng.permutation(n) for _ in range(epochs)])[:T]


def hitting_time(indices: IntArray, index: int) -> int | None:
    """first step (1-based) that samples ``index`` or ``None`` if it never does"""
    hits = np.flatnonzero(indices == index)
    return int(hits[0]) + 1 if hits.size else None


class HitCondition(NamedTuple):
    kind: Literal['hit_by', 'hit_at']
    t: int

    @classmethod
    def hit_by(cls, t0: int) -> HitCondition:
        """``H <= t0``, i.e. ``Δ_{t0} ≠ 0``"""
        return cls('hit_by', t0)

    @classmethod
    def hit_at(cls, t: int) -> HitCondition:
        return cls('hit_at', t)

    def accepts(self, h: int | None) -> bool:
        if h is None:
            return False
        return h <= self.t if self.kind == 'hit_by' else h == self.t


class TrajectoryPair(NamedTuple):
    w_final: FloatArray
    w_prime_final: FloatArray
    delta_norms: FloatArray
    hitting_time: int | None
    index_sequence: IntArray
    overflowed: bool
    # (T+1, d) including w_0, only when requested
    w_path: FloatArray | None = None
    w_prime_path: FloatArray | None = None

    @property
    def delta(self) -> FloatArray:
        return self.w_final - self.w_prime_final


class DivergenceStats(NamedTuple):
    trials: int
    mean: float
    stderr: float
    overflowed: int = 0
    accepted: int | None = None
    drawn: int | None = None
    acceptance_rate: float | None = None
    acceptance_stderr: float | None = None
    profile: FloatArray | None = None
    max_grad_norm: float = 0.0
    max_basis_norm: float | None = None
    quadratic_exits: int = 0


class StabilityEstimate(NamedTuple):
    point_means: FloatArray
    sup: float
    argmax: int
    stderr: float
    trials: int
    divergence: DivergenceStats


class EnumerationResult(NamedTuple):
    mean: float
    sequences: int
    profile: FloatArray | None = None


class _Data(NamedTuple):
    """datasets of a chunk, leading axis is either 1 (shared) or the trial count"""
    features: FloatArray
    labels: FloatArray
    features_prime: FloatArray
    labels_prime: FloatArray
    test_features: FloatArray
    test_labels: FloatArray

    @classmethod
    def stack(cls, instances: Sequence[Instance]) -> _Data:
        return cls(
            features=np.stack([i.twins.s.features for i in instances]),
            labels=np.stack([i.twins.s.labels for i in instances]),
            features_prime=np.stack([i.twins.s_prime.features for i in instances]),
            labels_prime=np.stack([i.twins.s_prime.labels for i in instances]),
            test_features=np.stack([i.test_features for i in instances]),
            test_labels=np.stack([i.test_labels for i in instances]),
        )


class _Job(NamedTuple):
    loss: LossSpec
    w0: FloatArray
    data: _Data
    indices: IntArray
    alphas: FloatArray
    keep_norms: bool
    keep_paths: bool = False


class _ChunkResult(NamedTuple):
    delta_final: FloatArray
    loss_gaps: FloatArray
    overflowed: BoolArray
    norms: FloatArray | None
    max_grad_norm: float
    max_basis_norm: float | None
    quadratic_exits: int
    w_final: FloatArray
    w_prime_final: FloatArray
    paths: tuple[FloatArray, FloatArray] | None


def _finite_max(values: FloatArray, mask: BoolArray) -> float:
    kept = values[mask]
    return float(np.max(kept)) if kept.size else 0.0


def _propagate(job: _Job) -> _ChunkResult:
    loss, data, indices, alphas = job.loss, job.data, job.indices, job.alphas
    trials, T = indices.shape
    if data.features.shape[0] == 1:
        rows = np.zeros(trials, dtype=np.intp)
    else:
        rows = np.arange(trials)
    w = np.tile(job.w0, (trials, 1))
    w_prime = w.copy()
    overflowed = np.zeros(trials, dtype=bool)
    norms = np.zeros((trials, T)) if job.keep_norms else None
    paths = None
    if job.keep_paths:
        paths = (np.zeros((T + 1, trials, w.shape[1])), np.zeros((T + 1, trials, w.shape[1])))
        paths[0][0] = w
        paths[1][0] = w_prime
    max_grad = 0.0
    max_basis: float | None = None
    exits = 0
    with np.errstate(over='ignore', invalid='ignore'):
        for t in range(T):
            j = indices[:, t]
            grad = loss.gradient(w, data.features[rows, j], data.labels[rows, j])
            grad_prime = loss.gradient(
                w_prime,
                data.features_prime[rows, j],
                data.labels_prime[rows, j],
            )
            alive = ~overflowed
            max_grad = max(
                max_grad,
                _finite_max(np.linalg.norm(grad, axis=1), alive),
                _finite_max(np.linalg.norm(grad_prime, axis=1), alive),
            )
            w = w - alphas[t] * grad
            w_prime = w_prime - alphas[t] * grad_prime
            delta_norm = np.linalg.norm(w - w_prime, axis=1)
            overflowed |= ~(delta_norm <= OVERFLOW_THRESHOLD)
            inside = loss.inside(w)
            if inside is not None:
                inside_prime = loss.inside(w_prime)
                assert inside_prime is not None
                alive = ~overflowed
                exits += int(np.sum(~inside & alive) + np.sum(~inside_prime & alive))
            if norms is not None:
                norms[:, t] = delta_norm
            if paths is not None:
                paths[0][t + 1] = w
                paths[1][t + 1] = w_prime
            basis = loss.basis_norm(w)
            if basis is not None:
                basis_prime = loss.basis_norm(w_prime)
                assert basis_prime is not None
                alive = ~overflowed
                max_basis = max(
                    max_basis or 0.0,
                    _finite_max(basis, alive),
                    _finite_max(basis_prime, alive),
                )
        delta_final = np.linalg.norm(w - w_prime, axis=1)
        tests = data.test_features[rows]
        test_labels = data.test_labels[rows]
        loss_gaps = (
            loss.value(w[:, None, :], tests, test_labels) -
            loss.value(w_prime[:, None, :], tests, test_labels)
        )
    return _ChunkResult(
        delta_final=delta_final,
        loss_gaps=loss_gaps,
        overflowed=overflowed,
        norms=norms,
        max_grad_norm=max_grad,
        max_basis_norm=max_basis,
        quadratic_exits=exits,
        w_final=w,
        w_prime_final=w_prime,
        paths=paths,
    )


def _run_jobs(jobs: Iterator[_Job], workers: int) -> list[_ChunkResult]:
    if workers <= 1:
        return [_propagate(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(_propagate, jobs))


def _standard_error(values: FloatArray) -> float:
    if values.size < 2:
        return math.nan
    return float(np.std(values, ddof=1) / math.sqrt(values.size))


class _Summary(NamedTuple):
    divergence: DivergenceStats
    loss_gaps: FloatArray


def _summarize(
        results: list[_ChunkResult],
        *,
        profile: bool,
) -> _Summary:
    finals = np.concatenate([r.delta_final for r in results])
    gaps = np.concatenate([r.loss_gaps for r in results])
    overflowed = np.concatenate([r.overflowed for r in results])
    finite = ~overflowed
    n_overflowed = int(np.sum(overflowed))
    if n_overflowed:
        warnings.warn(
            f'{n_overflowed} of {finals.size} trials overflowed '
            f'(‖Δ_t‖ > {OVERFLOW_THRESHOLD:g}); statistics use finite trials only',
            RuntimeWarning,
            stacklevel=3,
        )
    kept = finals[finite]
    mean_profile: FloatArray | None = None
    if profile:
        total = sum(
            np.sum(r.norms[~r.overflowed], axis=0)
            for r in results
            if r.norms is not None
        )
        mean_profile = np.asarray(total, dtype=np.float64) / max(kept.size, 1)
    basis_norms = [r.max_basis_norm for r in results if r.max_basis_norm is not None]
    stats = DivergenceStats(
        trials=int(kept.size),
        mean=float(np.mean(kept)) if kept.size else math.nan,
        stderr=_standard_error(kept),
        overflowed=n_overflowed,
        profile=mean_profile,
        max_grad_norm=max(r.max_grad_norm for r in results),
        max_basis_norm=max(basis_norms) if basis_norms else None,
        quadratic_exits=sum(r.quadratic_exits for r in results),
    )
    return _Summary(divergence=stats, loss_gaps=gaps[finite])


def _trial_indices(
        n: int,
        T: int,
        sampler: SamplerKind,
        base_seed: int,
        trials: range,
) -> IntArray:
    return np.stack([draw_indices(n, T, sampler, trial_rng(base_seed, k)) for k in trials])


def _chunks(total: int) -> Iterator[range]:
    for start in range(0, total, TRIAL_CHUNK):
        yield range(start, min(start + TRIAL_CHUNK, total))


def _shared(instance: Instance) -> _Data:
    return _Data.stack([instance])


def _check_trials(T: int, M: int) -> None:
    if T < 1:
        raise ValueError(f'need T >= 1, got T={T}')
    if M < 1:
        raise ValueError(f'need M >= 1 trials, got M={M}')


def run_twin_sgd(
        instance: Instance,
        T: int,
        sampler: SamplerKind,
        seed: int,
        *,
        record_path: bool = False,
) -> TrajectoryPair:
    """Run SGD on both twin datasets with one shared index sequence.

    The sequence is the one trial ``0`` of :func:`estimate_divergence` with
    ``base_seed=seed`` uses.
    """
    if T < 1:
        raise ValueError(f'need T >= 1, got T={T}')
    indices = draw_indices(instance.n, T, sampler, trial_rng(seed, 0))
    result = _propagate(
        _Job(
            loss=instance.loss,
            w0=instance.w0,
            data=_shared(instance),
            indices=indices[None, :],
            alphas=instance.schedule.steps(T),
            keep_norms=True,
            keep_paths=record_path,
        ),
    )
    assert result.norms is not None
    if result.overflowed[0]:
        warnings.warn('the trajectory overflowed', RuntimeWarning, stacklevel=2)
    return TrajectoryPair(
        w_final=result.w_final[0],
        w_prime_final=result.w_prime_final[0],
        delta_norms=result.norms[0],
        hitting_time=hitting_time(indices, instance.twins.index),
        index_sequence=indices,
        overflowed=bool(result.overflowed[0]),
        w_path=result.paths[0][:, 0] if result.paths is not None else None,
        w_prime_path=result.paths[1][:, 0] if result.paths is not None else None,
    )


def _monte_carlo(
        instance: Instance,
        T: int,
        sampler: SamplerKind,
        M: int,
        base_seed: int,
        *,
        workers: int,
        profile: bool,
) -> _Summary:
    _check_trials(T, M)
    alphas = instance.schedule.steps(T)
    data = _shared(instance)
    jobs = (
        _Job(
            loss=instance.loss,
            w0=instance.w0,
            data=data,
            indices=_trial_indices(instance.n, T, sampler, base_seed, trials),
            alphas=alphas,
            keep_norms=profile,
        )
        for trials in _chunks(M)
    )
    return _summarize(_run_jobs(jobs, workers), profile=profile)


def estimate_divergence(
        instance: Instance,
        T: int,
        sampler: SamplerKind,
        M: int,
        base_seed: int,
        *,
        workers: int = 1,
        profile: bool = False,
) -> DivergenceStats:
    """Monte Carlo estimate of :math:`E\\|Δ_T\\|` over ``M`` coupled trials.

    :param workers: number of processes, does not change the result
    :param profile: also report the mean ``‖Δ_t‖`` for ``t = 1..T``
    """
    return _monte_carlo(
        instance, T, sampler, M, base_seed, workers=workers, profile=profile,
    ).divergence


def _stability(summary: _Summary) -> StabilityEstimate:
    gaps = summary.loss_gaps
    if gaps.shape[1] == 0:
        raise ValueError('the instance declares no test points')
    point_means = np.mean(gaps, axis=0)
    argmax = int(np.argmax(point_means))
    return StabilityEstimate(
        point_means=point_means,
        sup=float(point_means[argmax]),
        argmax=argmax,
        stderr=_standard_error(gaps[:, argmax]),
        trials=int(gaps.shape[0]),
        divergence=summary.divergence,
    )


def estimate_stability(
        instance: Instance,
        T: int,
        sampler: SamplerKind,
        M: int,
        base_seed: int,
        *,
        workers: int = 1,
        profile: bool = False,
) -> StabilityEstimate:
    """Mean of ``f(w_T; z) - f(w_T'; z)`` for every test point ``z`` and its
    supremum over the test set.
    """
    if instance.test_features.shape[0] == 0:
        raise ValueError('the instance declares no test points')
    summary = _monte_carlo(
        instance, T, sampler, M, base_seed, workers=workers, profile=profile,
    )
    return _stability(summary)


def estimate_on_average(
        instances: Sequence[Instance],
        T: int,
        sampler: SamplerKind,
        base_seed: int,
        *,
        workers: int = 1,
        profile: bool = False,
) -> StabilityEstimate:
    """Like :func:`estimate_stability`, but trial ``k`` runs on its own dataset
    draw ``instances[k]``; all draws must share the loss and step schedule.
    """
    _check_trials(T, len(instances))
    first = instances[0]
    alphas = first.schedule.steps(T)
    jobs = (
        _Job(
            loss=first.loss,
            w0=first.w0,
            data=_Data.stack([instances[k] for k in trials]),
            indices=np.stack([
                draw_indices(instances[k].n, T, sampler, trial_rng(base_seed, k))
                for k in trials
            ]),
            alphas=alphas,
            keep_norms=profile,
        )
        for trials in _chunks(len(instances))
    )
    return _stability(_summarize(_run_jobs(jobs, workers), profile=profile))


def estimate_conditional_divergence(
        instance: Instance,
        T: int,
        sampler: SamplerKind,
        M: int,
        condition: HitCondition,
        base_seed: int,
        *,
        workers: int = 1,
) -> DivergenceStats:
    """Estimate :math:`E[\\|Δ_T\\| | condition]` by rejection: trials ``k = 0, 1, ...``
    are drawn until ``M`` of them satisfy the condition on their hitting time.

    :raises AcceptanceRateError: if the acceptance rate is estimated below ``1e-4``
    """
    _check_trials(T, M)
    if not 1 <= condition.t <= T:
        raise ValueError(f'condition time must lie in 1..T, got t={condition.t}')
    accepted: list[IntArray] = []
    drawn = 0
    while len(accepted) < M:
        indices = draw_indices(instance.n, T, sampler, trial_rng(base_seed, drawn))
        drawn += 1
        if condition.accepts(hitting_time(indices, instance.twins.index)):
            accepted.append(indices)
        if drawn >= ACCEPTANCE_PROBE and len(accepted) / drawn < MIN_ACCEPTANCE:
            raise AcceptanceRateError(
                f'acceptance rate {len(accepted) / drawn:.3g} for {condition.kind}'
                f'({condition.t}) is below {MIN_ACCEPTANCE:g} after {drawn} draws',
            )
    all_indices = np.stack(accepted)
    data = _shared(instance)
    alphas = instance.schedule.steps(T)
    jobs = (
        _Job(
            loss=instance.loss,
            w0=instance.w0,
            data=data,
            indices=all_indices[trials.start:trials.stop],
            alphas=alphas,
            keep_norms=False,
        )
        for trials in _chunks(M)
    )
    stats = _summarize(_run_jobs(jobs, workers), profile=False).divergence
    rate = M / drawn
    return stats._replace(
        accepted=M,
        drawn=drawn,
        acceptance_rate=rate,
        acceptance_stderr=math.sqrt(rate * (1 - rate) / drawn),
    )


class HittingLaw(NamedTuple):
    """``cdf[t] = P[H <= t]`` for ``t = 0..T``"""
    cdf: FloatArray
    trials: int | None = None
    stderr: FloatArray | None = None

    @property
    def pmf(self) -> FloatArray:
        return np.diff(self.cdf)

    @property
    def never(self) -> float:
        return float(1 - self.cdf[-1])


def hitting_time_distribution(
        n: int,
        sampler: SamplerKind,
        T: int,
        M: int | None = None,
        *,
        exact: bool = False,
        seed: int = 0,
        index: int = 0,
) -> HittingLaw:
    """Law of the hitting time ``H`` of a fixed index over ``{1..T, never}``.

    ``exact`` returns the analytic law, otherwise ``M`` index sequences are drawn.
    """
    t = np.arange(T + 1, dtype=np.float64)
    if exact:
        if sampler is SamplerKind.uniform:
            return HittingLaw(cdf=1 - (1 - 1 / n)**t)
        return HittingLaw(cdf=np.minimum(t / n, 1.0))
    if M is None or M < 2:
        raise ValueError(f'Monte Carlo mode needs M >= 2 trials, got M={M}')
    times = np.array([
        hitting_time(draw_indices(n, T, sampler, trial_rng(seed, k)), index) or T + 1
        for k in range(M)
    ])
    hit = times[:, None] <= t[None, :]
    stderr = np.std(hit, axis=0, ddof=1) / math.sqrt(M)
    return HittingLaw(cdf=np.mean(hit, axis=0), trials=M, stderr=stderr)


def _all_sequences(n: int, T: int, start: int, stop: int) -> IntArray:
    numbers = np.arange(start, stop, dtype=np.int64)
    powers = n ** np.arange(T - 1, -1, -1, dtype=np.int64)
    return ((numbers[:, None] // powers[None, :]) % n).astype(np.intp)


def enumerate_exact_divergence(
        instance: Instance,
        T: int,
        *,
        profile: bool = False,
) -> EnumerationResult:
    """Exact :math:`E\\|Δ_T\\|` under uniform sampling by running every index
    sequence in ``[n]^T``.

    :raises EnumerationCapError: if ``n^T`` exceeds ``2e6``
    """
    n = instance.n
    if T < 1:
        raise ValueError(f'need T >= 1, got T={T}')
    if n**T > ENUMERATION_CAP:
        raise EnumerationCapError(
            f'n^T = {n}^{T} sequences exceed the cap of {ENUMERATION_CAP}',
        )
    total = n**T
    data = _shared(instance)
    alphas = instance.schedule.steps(T)
    finals: list[float] = []
    norm_sum = np.zeros(T)
    for start in range(0, total, ENUMERATION_CHUNK):
        result = _propagate(
            _Job(
                loss=instance.loss,
                w0=instance.w0,
                data=data,
                indices=_all_sequences(n, T, start, min(start + ENUMERATION_CHUNK, total)),
                alphas=alphas,
                keep_norms=profile,
            ),
        )
        finals.extend(result.delta_final.tolist())
        if result.norms is not None:
            norm_sum += np.sum(result.norms, axis=0)
    return EnumerationResult(
        mean=math.fsum(finals) / total,
        sequences=total,
        profile=norm_sum / total if profile else None,
    )
