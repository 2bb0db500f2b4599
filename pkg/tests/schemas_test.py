import math

import pytest
from pydantic import ValidationError

from stablab.schemas import ExperimentConfig
from stablab.schemas import judge
from stablab.schemas import ResultRow


@pytest.mark.parametrize(
    ('measured', 'stderr', 'lower', 'upper', 'expected'),
    (
        (0.5, 0.0, 0.5, 1.0, 'pass'),
        (0.5 - 1e-14, 0.0, 0.5, 0.5, 'pass'),
        (0.5 - 1e-9, 0.0, 0.5, 0.5, 'fail'),
        # a vanishing standard error keeps the exact slack
        (0.5 - 1e-14, 1e-18, 0.5, None, 'pass'),
        (0.498, 0.001, 0.5, None, 'pass'),
        (0.49, 0.001, 0.5, None, 'fail'),
        (1.2, 0.1, None, 1.0, 'pass'),
        (1.5, 0.1, None, 1.0, 'fail'),
        (3.0, 0.1, None, None, 'pass'),
        (math.nan, 0.1, 0.0, 1.0, 'fail'),
        (math.inf, 0.0, 0.0, None, 'fail'),
        (0.5, math.nan, 0.0, 1.0, 'fail'),
    ),
)
def test_judge(
        measured: float,
        stderr: float,
        lower: float | None,
        upper: float | None,
        expected: str,
) -> None:
    assert judge(measured, stderr, lower, upper) == expected


def test_result_row_judges_the_compared_column() -> None:
    row = ResultRow(
        experiment='convex_lower',
        n=10,
        T=100,
        schedule='constant(0.05)',
        trials=100,
        mean_divergence=0.1,
        stderr=0.001,
        stability_estimate=0.5,
        bound_lower=0.5,
        bound_upper=1.0,
        compared='stability',
    )
    assert row.measured == 0.5
    assert row.judged().verdict == 'pass'
    assert row.model_copy(update={'compared': 'divergence'}).judged().verdict == 'fail'
    assert 'compared' not in row.model_dump()


def test_result_row_summary() -> None:
    row = ResultRow(
        experiment='oracle_crosscheck',
        n=3,
        T=7,
        schedule='constant(0.1)',
        trials=2187,
        mean_divergence=0.25,
        stderr=0.0,
        bound_lower=0.25,
        bound_upper=0.25,
        bound_names='recursion',
    )
    assert row.summary() == (
        'oracle_crosscheck n=3 T=7 [recursion] pass measured=0.25 lower=0.25 '
        'upper=0.25 tol=1e-12'
    )


def test_result_row_summary_without_bounds() -> None:
    row = ResultRow(
        experiment='prop1',
        n=440,
        T=None,
        schedule='-',
        trials=200,
        mean_divergence=1.5,
        stderr=0.01,
        bound_upper=5.0,
        bound_names='inverse_rayleigh',
    )
    assert row.summary() == (
        'prop1 n=440 T=- [inverse_rayleigh] pass measured=1.5 lower=- upper=5 tol=3SE'
    )


def test_config_defaults() -> None:
    config = ExperimentConfig(experiment='convex_lower', n=10, T=100, alpha=0.05)
    assert config.M == 2000
    assert config.c == 0.99
    assert config.sampler == 'uniform'
    assert config.workers == 1
    assert config.timing is False


@pytest.mark.parametrize(
    ('values', 'msg'),
    (
        (
            {'experiment': 'convex_lower', 'n': 10},
            "experiment 'convex_lower' is missing required key(s): T, alpha",
        ),
        (
            {'experiment': 'convex_lower', 'n': 10, 'T': 5, 'alpha': 2.0},
            'alpha: need α λ_K <= 1, got alpha=2.0',
        ),
        (
            {'experiment': 'convex_lower', 'n': 10, 'T': 5, 'alpha': 0.1, 'd': 3, 'K': 3},
            'K: need d > K, got d=3, K=3',
        ),
        (
            {'experiment': 'oracle_crosscheck', 'n': 10, 'T': 7, 'alpha': 0.1},
            'T: need n^T <= 2000000, got 10^7',
        ),
        (
            {'experiment': 'nonconvex_decreasing', 'n': 10, 'T': 5, 'a': 0.05},
            't0: need t0 <= T, got t0=10, T=5',
        ),
        (
            {'experiment': 'datadep_convex', 'n': 20, 'd': 11, 'T': 5, 'mu': 0.1, 'R': 1},
            'n: need n ≥ 2d, got n=20, d=11',
        ),
        (
            {
                'experiment': 'datadep_convex',
                'n': 24,
                'd': 11,
                'T': 5,
                'mu': 0.1,
                'R': 1,
                'alpha': 1.0,
            },
            'alpha: need α ≤ μ/(2β²R²) = 0.05, got alpha=1.0',
        ),
        (
            {'experiment': 'datadep_nonconvex', 'n': 10, 'T': 1, 'b': 0.001},
            'T: need T >= 2, got T=1',
        ),
        (
            {'experiment': 'datadep_nonconvex', 'n': 10, 'T': 2, 'b': 300, 'beta': 0.01},
            'b: need b ≤ min{2/β, 1/(8β² ln T²)} = 200, got b=300.0',
        ),
        (
            {'experiment': 'prop1', 'n': 40, 'd': 10},
            'd: need d > 10, got d=10',
        ),
        (
            {'experiment': 'prop1', 'n': 440, 'd': 11, 'M': 50},
            'M: need M >= 100 dataset draws, got M=50',
        ),
    ),
)
def test_config_preconditions(values: dict[str, object], msg: str) -> None:
    with pytest.raises(ValidationError) as exc_info:
        ExperimentConfig.model_validate(values)
    (error,) = exc_info.value.errors()
    assert error['msg'] == f'Value error, {msg}'


def test_config_rejects_large_a() -> None:
    with pytest.raises(ValidationError):
        ExperimentConfig(experiment='nonconvex_constant', n=5, T=10, a=0.5)


def test_config_rejects_a_zero_hidden_constant() -> None:
    with pytest.raises(ValidationError):
        ExperimentConfig(
            experiment='datadep_nonconvex', n=10, T=100, b=0.001, hidden_constant=0,
        )


def test_config_is_frozen() -> None:
    config = ExperimentConfig(experiment='table1_sweep', a=0.05)
    with pytest.raises(ValidationError):
        config.a = 0.1  # type: ignore[misc]
