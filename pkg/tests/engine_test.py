import math
import warnings

import numpy as np
import pytest

from stablab.core import StepSchedule
from stablab.core import trial_rng
from stablab.core import TwinPair
from stablab.engine import AcceptanceRateError
from stablab.engine import draw_indices
from stablab.engine import enumerate_exact_divergence
from stablab.engine import EnumerationCapError
from stablab.engine import estimate_conditional_divergence
from stablab.engine import estimate_divergence
from stablab.engine import estimate_on_average
from stablab.engine import estimate_stability
from stablab.engine import HitCondition
from stablab.engine import hitting_time
from stablab.engine import hitting_time_distribution
from stablab.engine import run_twin_sgd
from stablab.engine import SamplerKind
from stablab.instances import build_convex_lower
from stablab.instances import build_gaussian_linear
from stablab.instances import build_nonconvex
from stablab.instances import build_strongly_convex_lower
from stablab.instances import Instance
from stablab.theory import recursion_lemma1


def test_permutation_sampler_covers_every_epoch() -> None:
    indices = draw_indices(5, 12, SamplerKind.permutation, trial_rng(0, 0))
    assert indices.shape == (12,)
    assert sorted(indices[:5]) == [0, 1, 2, 3, 4]
    assert sorted(indices[5:10]) == [0, 1, 2, 3, 4]
    assert len(set(indices[10:].tolist())) == 2


def test_uniform_sampler_range() -> None:
    indices = draw_indices(3, 1000, SamplerKind.uniform, trial_rng(1, 0))
    assert set(indices.tolist()) == {0, 1, 2}


@pytest.mark.parametrize(
    ('indices', 'index', 'expected'),
    (
        ([2, 0, 1, 0], 0, 2),
        ([0, 1], 0, 1),
        ([1, 1, 2], 0, None),
    ),
)
def test_hitting_time(indices: list[int], index: int, expected: int | None) -> None:
    assert hitting_time(np.array(indices), index) == expected


@pytest.mark.parametrize(
    ('condition', 'h', 'expected'),
    (
        (HitCondition.hit_by(5), 3, True),
        (HitCondition.hit_by(5), 5, True),
        (HitCondition.hit_by(5), 6, False),
        (HitCondition.hit_by(5), None, False),
        (HitCondition.hit_at(5), 5, True),
        (HitCondition.hit_at(5), 4, False),
    ),
)
def test_hit_condition(condition: HitCondition, h: int | None, expected: bool) -> None:
    assert condition.accepts(h) is expected


def test_identical_twins_never_diverge(convex_instance: Instance) -> None:
    s = convex_instance.twins.s
    instance = convex_instance._replace(twins=TwinPair.create(s, s, 0))
    pair = run_twin_sgd(instance, 50, SamplerKind.uniform, seed=3)
    np.testing.assert_array_equal(pair.delta_norms, np.zeros(50))
    np.testing.assert_array_equal(pair.delta, np.zeros(instance.d))


def test_zero_step_never_moves(convex_instance: Instance) -> None:
    instance = convex_instance._replace(schedule=StepSchedule.constant(0.0))
    pair = run_twin_sgd(instance, 30, SamplerKind.uniform, seed=0)
    np.testing.assert_array_equal(pair.w_final, instance.w0)
    np.testing.assert_array_equal(pair.delta_norms, np.zeros(30))


@pytest.mark.parametrize('seed', range(5))
def test_divergence_is_zero_before_the_first_hit(
        convex_instance: Instance,
        seed: int,
) -> None:
    pair = run_twin_sgd(convex_instance, 40, SamplerKind.uniform, seed=seed)
    h = pair.hitting_time
    assert h == hitting_time(pair.index_sequence, convex_instance.twins.index)
    if h is None:
        np.testing.assert_array_equal(pair.delta_norms, np.zeros(40))
    else:
        np.testing.assert_array_equal(pair.delta_norms[:h - 1], np.zeros(h - 1))
        assert pair.delta_norms[h - 1] == pytest.approx(0.05)


def test_divergence_stays_on_the_special_direction(convex_instance: Instance) -> None:
    pair = run_twin_sgd(
        convex_instance, 60, SamplerKind.permutation, seed=1, record_path=True,
    )
    assert pair.w_path is not None
    assert pair.w_prime_path is not None
    assert pair.w_path.shape == (61, convex_instance.d)
    np.testing.assert_array_equal(pair.w_path[0], convex_instance.w0)
    delta_path = pair.w_path - pair.w_prime_path
    np.testing.assert_array_equal(delta_path[:, :-1], 0.0)
    # six epochs, one hit each
    assert delta_path[-1, -1] == pytest.approx(6 * 0.05)


@pytest.mark.parametrize(
    'fixture',
    ('convex_instance', 'strongly_convex_instance', 'nonconvex_instance'),
)
@pytest.mark.parametrize('sampler', tuple(SamplerKind))
def test_twins_mirror_each_other_along_the_special_direction(
        fixture: str,
        sampler: SamplerKind,
        request: pytest.FixtureRequest,
) -> None:
    instance: Instance = request.getfixturevalue(fixture)
    v = instance.direction
    for seed in range(5):
        pair = run_twin_sgd(instance, 80, sampler, seed=seed, record_path=True)
        assert pair.w_path is not None
        assert pair.w_prime_path is not None
        delta_path = pair.w_path - pair.w_prime_path
        along = delta_path @ v
        np.testing.assert_allclose(
            delta_path, np.outer(along, v), rtol=0, atol=1e-12,
        )
        assert np.all(along >= 0)
        np.testing.assert_allclose(
            pair.w_path @ v, -(pair.w_prime_path @ v), rtol=0, atol=1e-12,
        )


def test_run_is_reproducible(convex_instance: Instance) -> None:
    a = run_twin_sgd(convex_instance, 25, SamplerKind.uniform, seed=9)
    b = run_twin_sgd(convex_instance, 25, SamplerKind.uniform, seed=9)
    np.testing.assert_array_equal(a.index_sequence, b.index_sequence)
    np.testing.assert_array_equal(a.delta_norms, b.delta_norms)


def test_convex_divergence_grows_with_hits(convex_instance: Instance) -> None:
    stats = estimate_divergence(convex_instance, 100, SamplerKind.uniform, 20000, 0)
    assert stats.trials == 20000
    assert stats.overflowed == 0
    assert stats.quadratic_exits == 0
    assert stats.mean == pytest.approx(0.5, abs=4 * stats.stderr)
    assert stats.max_grad_norm <= convex_instance.constants.L
    assert stats.max_basis_norm is not None
    assert stats.max_basis_norm <= convex_instance.constants.basis_radius


@pytest.mark.parametrize('alpha', (0.05, 0.5, 1.0))
@pytest.mark.parametrize('sampler', tuple(SamplerKind))
def test_convex_iterates_stay_in_the_basis_ball(
        alpha: float,
        sampler: SamplerKind,
) -> None:
    instance = build_convex_lower(10, 3, 2, alpha=alpha)
    assert instance.constants.basis_radius == 1.0
    stats = estimate_divergence(instance, 100, sampler, 2000, 7)
    assert stats.quadratic_exits == 0
    assert stats.max_basis_norm is not None
    assert stats.max_basis_norm <= 1.0
    assert stats.max_basis_norm >= alpha


def test_convex_divergence_under_permutation_is_exact(convex_instance: Instance) -> None:
    stats = estimate_divergence(convex_instance, 100, SamplerKind.permutation, 500, 0)
    assert stats.mean == pytest.approx(0.5, rel=1e-12)
    assert stats.stderr == pytest.approx(0.0, abs=1e-12)


def test_single_trial_has_no_standard_error(convex_instance: Instance) -> None:
    stats = estimate_divergence(convex_instance, 10, SamplerKind.uniform, 1, 0)
    assert stats.trials == 1
    assert math.isnan(stats.stderr)


def test_estimate_needs_a_trial(convex_instance: Instance) -> None:
    with pytest.raises(ValueError) as exc_info:
        estimate_divergence(convex_instance, 10, SamplerKind.uniform, 0, 0)
    assert exc_info.value.args[0] == 'need M >= 1 trials, got M=0'


def test_profile_tracks_the_mean_divergence(convex_instance: Instance) -> None:
    stats = estimate_divergence(
        convex_instance, 20, SamplerKind.permutation, 200, 4, profile=True,
    )
    assert stats.profile is not None
    assert stats.profile.shape == (20,)
    assert stats.profile[-1] == pytest.approx(stats.mean)
    # non-decreasing in the convex construction
    assert np.all(np.diff(stats.profile) >= -1e-15)


def test_strongly_convex_stability(strongly_convex_instance: Instance) -> None:
    estimate = estimate_stability(
        strongly_convex_instance, 60, SamplerKind.uniform, 20000, 2,
    )
    expected = 0.2 * (1 - 0.75**60)
    assert estimate.argmax == 0
    assert estimate.divergence.mean == pytest.approx(
        expected, abs=4 * estimate.divergence.stderr,
    )
    # w and w' mirror each other along v, so the loss gap at (v, -1) is ‖Δ_T‖
    assert estimate.sup == pytest.approx(estimate.divergence.mean, rel=1e-9)
    assert estimate.point_means[1] == pytest.approx(-estimate.sup, rel=1e-9)


def test_result_does_not_depend_on_workers(convex_instance: Instance) -> None:
    one = estimate_divergence(
        convex_instance, 50, SamplerKind.uniform, 3000, 11, workers=1,
    )
    two = estimate_divergence(
        convex_instance, 50, SamplerKind.uniform, 3000, 11, workers=2,
    )
    assert one.mean == two.mean
    assert one.stderr == two.stderr


@pytest.mark.parametrize(
    ('n', 'T', 'alpha', 'expected'),
    (
        (2, 1, 0.5, 0.25),
        (3, 8, 0.1, 0.8 / 3),
        (2, 10, 0.1, 0.5),
    ),
)
def test_enumeration_of_the_convex_construction(
        n: int,
        T: int,
        alpha: float,
        expected: float,
) -> None:
    instance = build_convex_lower(n, 3, 2, alpha=alpha)
    result = enumerate_exact_divergence(instance, T)
    assert result.sequences == n**T
    assert result.mean == pytest.approx(expected, rel=1e-12)


def test_enumeration_matches_the_recursion() -> None:
    instance = build_strongly_convex_lower(3, 2, 1.0)
    result = enumerate_exact_divergence(instance, 7, profile=True)
    expected = recursion_lemma1(0.5, instance.schedule, 3, instance.gap, 7)
    assert result.profile is not None
    np.testing.assert_allclose(result.profile, expected, rtol=1e-12)
    assert result.mean == pytest.approx(expected[-1], rel=1e-12)


def test_enumeration_matches_the_expanding_recursion() -> None:
    instance = build_nonconvex(2, 2, 1.0, 0.1, constant_step=True)
    result = enumerate_exact_divergence(instance, 10)
    expected = recursion_lemma1(-1.0, instance.schedule, 2, instance.gap, 10)
    assert result.mean == pytest.approx(expected[-1], rel=1e-12)


def test_monte_carlo_agrees_with_enumeration() -> None:
    instance = build_strongly_convex_lower(3, 2, 1.0)
    exact = enumerate_exact_divergence(instance, 6).mean
    stats = estimate_divergence(instance, 6, SamplerKind.uniform, 50000, 5)
    assert stats.mean == pytest.approx(exact, abs=4 * stats.stderr)


def test_enumeration_cap(convex_instance: Instance) -> None:
    with pytest.raises(EnumerationCapError) as exc_info:
        enumerate_exact_divergence(convex_instance, 7)
    assert exc_info.value.args[0] == 'n^T = 10^7 sequences exceed the cap of 2000000'


def test_enumeration_with_zero_step() -> None:
    instance = build_convex_lower(3, 3, 2, alpha=0.0)
    assert enumerate_exact_divergence(instance, 5).mean == 0.0


def test_conditional_under_permutation_always_accepts(convex_instance: Instance) -> None:
    stats = estimate_conditional_divergence(
        convex_instance, 30, SamplerKind.permutation, 500, HitCondition.hit_by(10), 0,
    )
    assert stats.acceptance_rate == 1.0
    assert stats.drawn == 500
    assert stats.accepted == 500


def test_conditional_acceptance_matches_the_hitting_law(
        convex_instance: Instance,
) -> None:
    stats = estimate_conditional_divergence(
        convex_instance, 30, SamplerKind.uniform, 2000, HitCondition.hit_by(10), 0,
    )
    assert stats.acceptance_stderr is not None
    assert stats.acceptance_rate == pytest.approx(
        1 - 0.9**10, abs=4 * stats.acceptance_stderr,
    )
    # a hit has already happened, so ‖Δ_T‖ >= α
    assert stats.mean >= 0.05


def test_conditional_nonconvex_divergence_clears_the_lower_bound() -> None:
    a, c = 0.05, 0.99
    instance = build_nonconvex(10, 2, a / c, a, c=c)
    stats = estimate_conditional_divergence(
        instance, 1000, SamplerKind.uniform, 5000, HitCondition.hit_by(10), 7,
    )
    bound = (1000 / 10)**a / (2 * 10)
    assert bound == pytest.approx(0.0629, abs=1e-4)
    assert stats.mean - 4 * stats.stderr >= bound


def test_conditional_rejects_rare_events() -> None:
    instance = build_convex_lower(100_000, 3, 2)
    with pytest.raises(AcceptanceRateError, match='after 50000 draws'):
        estimate_conditional_divergence(
            instance, 1, SamplerKind.uniform, 10, HitCondition.hit_at(1), 0,
        )


def test_conditional_time_outside_horizon(convex_instance: Instance) -> None:
    with pytest.raises(ValueError) as exc_info:
        estimate_conditional_divergence(
            convex_instance, 5, SamplerKind.uniform, 10, HitCondition.hit_at(6), 0,
        )
    assert exc_info.value.args[0] == 'condition time must lie in 1..T, got t=6'


def test_exact_hitting_law() -> None:
    uniform = hitting_time_distribution(10, SamplerKind.uniform, 10, exact=True)
    permutation = hitting_time_distribution(10, SamplerKind.permutation, 20, exact=True)
    assert uniform.cdf[0] == 0.0
    assert uniform.cdf[10] == pytest.approx(1 - 0.9**10)
    assert uniform.never == pytest.approx(0.9**10)
    np.testing.assert_allclose(permutation.pmf[:10], 0.1)
    np.testing.assert_array_equal(permutation.pmf[10:], 0.0)
    assert permutation.never == 0.0


@pytest.mark.parametrize('sampler', (SamplerKind.uniform, SamplerKind.permutation))
def test_monte_carlo_hitting_law(sampler: SamplerKind) -> None:
    exact = hitting_time_distribution(10, sampler, 15, exact=True)
    law = hitting_time_distribution(10, sampler, 15, 4000, seed=2)
    assert law.trials == 4000
    assert law.stderr is not None
    assert np.all(np.abs(law.cdf - exact.cdf) <= 4 * law.stderr + 1e-12)


def test_monte_carlo_hitting_law_needs_trials() -> None:
    with pytest.raises(ValueError):
        hitting_time_distribution(10, SamplerKind.uniform, 5)


def test_overflow_is_flagged() -> None:
    instance = build_nonconvex(10, 2, 1.0, 0.1, constant_step=True)
    with pytest.warns(RuntimeWarning, match='overflowed'):
        stats = estimate_divergence(instance, 400, SamplerKind.uniform, 200, 0)
    assert stats.overflowed > 0
    assert stats.trials + stats.overflowed == 200


def test_on_average_matches_a_fixed_dataset() -> None:
    instance = build_gaussian_linear(24, 11, 1e-2, 1.0, seed=0)
    fixed = estimate_stability(instance, 40, SamplerKind.uniform, 300, 6)
    averaged = estimate_on_average([instance] * 300, 40, SamplerKind.uniform, 6)
    np.testing.assert_allclose(averaged.point_means, fixed.point_means, rtol=1e-12)
    assert averaged.divergence.mean == pytest.approx(fixed.divergence.mean, rel=1e-12)


def test_on_average_over_dataset_draws() -> None:
    with warnings.catch_warnings():
        warnings.simplefilter('ignore', UserWarning)
        instances = [
            build_gaussian_linear(12, 6, 1e-2, 1.0, seed=k) for k in range(64)
        ]
    estimate = estimate_on_average(instances, 30, SamplerKind.permutation, 0)
    assert estimate.trials == 64
    assert estimate.point_means.shape == (8,)
    assert estimate.divergence.mean > 0
    assert math.isfinite(estimate.sup)
