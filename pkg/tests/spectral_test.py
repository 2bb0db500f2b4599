from pathlib import Path

import numpy as np
import pytest

from stablab.core import Dataset
from stablab.core import HypothesisError
from stablab.core import SpectralBasisError
from stablab.core import trial_rng
from stablab.spectral import FeatureDistribution
from stablab.spectral import inverse_rayleigh_expectation
from stablab.spectral import load_dataset_csv
from stablab.spectral import prop1_check
from stablab.spectral import rayleigh_certificate
from stablab.spectral import rayleigh_xi


@pytest.mark.parametrize(
    ('features', 'expected'),
    (
        ([[1.0, 0.0], [0.0, 1.0]], 0.5),
        # one-dimensional span: the zero eigenvalue is ignored
        ([[1.0, 1.0], [1.0, 1.0]], 2.0),
        ([[3.0, 0.0, 0.0], [0.0, 1.0, 0.0]], 0.5),
    ),
)
def test_rayleigh_xi(features: list[list[float]], expected: float) -> None:
    assert rayleigh_xi(features) == pytest.approx(expected, rel=1e-12)


def test_rayleigh_xi_of_a_dataset() -> None:
    s = Dataset.from_arrays([[2.0, 0.0], [0.0, 2.0]], [1.0, 1.0])
    assert rayleigh_xi(s) == pytest.approx(2.0)


def test_rayleigh_xi_is_the_floor_over_the_span() -> None:
    rng = np.random.default_rng(4)
    x = rng.standard_normal((3, 5))
    second_moment = x.T @ x / 3
    xi = rayleigh_xi(x)
    quotients = []
    for _ in range(2000):
        v = x.T @ rng.standard_normal(3)
        quotients.append(v @ second_moment @ v / (v @ v))
    assert min(quotients) >= xi * (1 - 1e-10)
    # the floor is attained by an eigenvector inside the span
    eigenvalues = np.linalg.eigvalsh(second_moment)
    assert xi == pytest.approx(eigenvalues[eigenvalues > 1e-10].min())


def test_single_dataset_certificate() -> None:
    certificate = rayleigh_certificate([[1.0, 0.0], [0.0, 1.0]], 0.5)
    assert certificate.xi == pytest.approx(0.5)
    assert certificate.estimate == pytest.approx(1.0)
    assert certificate.verdict


def test_certificate_rejects_negative_mu() -> None:
    with pytest.raises(ValueError):
        rayleigh_certificate([[1.0, 0.0]], -1.0)


def test_basis_cycle_is_certified_exactly() -> None:
    distribution = FeatureDistribution.basis_cycle(3)
    certificate = inverse_rayleigh_expectation(distribution, 6, 0.0, 100, 0, 1 / 3)
    assert certificate.estimate == pytest.approx(3.0, rel=1e-12)
    assert certificate.stderr == 0.0
    assert certificate.xi_min == pytest.approx(1 / 3)
    assert certificate.verdict
    too_optimistic = inverse_rayleigh_expectation(distribution, 6, 0.0, 100, 0, 0.4)
    assert not too_optimistic.verdict


def test_large_regularizer_dominates() -> None:
    certificate = inverse_rayleigh_expectation(
        FeatureDistribution.gaussian(4), 8, 1e6, 100, 1, 0.2,
    )
    assert certificate.estimate * 1e6 == pytest.approx(1.0, rel=1e-5)


def test_estimate_decreases_with_mu() -> None:
    distribution = FeatureDistribution.gaussian(5)
    estimates = [
        inverse_rayleigh_expectation(distribution, 20, mu, 100, 3, 0.2).estimate
        for mu in (0.0, 0.1, 1.0, 10.0)
    ]
    assert estimates == sorted(estimates, reverse=True)
    assert len(set(estimates)) == 4


def test_prop1_holds_for_gaussian_features() -> None:
    certificate = prop1_check(11, 440, 200, 0)
    assert certificate.mu == pytest.approx(440**-4)
    assert certificate.xi == 0.2
    assert certificate.draws == 200
    assert certificate.verdict
    assert certificate.margin > 0


@pytest.mark.parametrize(
    ('d', 'n', 'msg'),
    (
        (10, 40, 'need d > 10, got d=10'),
        (11, 20, 'need n ≥ 2d, got n=20, d=11'),
    ),
)
def test_prop1_preconditions(d: int, n: int, msg: str) -> None:
    with pytest.raises(HypothesisError) as exc_info:
        prop1_check(d, n, 200, 0)
    assert exc_info.value.args[0] == msg


def test_expectation_needs_enough_draws() -> None:
    with pytest.raises(ValueError) as exc_info:
        inverse_rayleigh_expectation(FeatureDistribution.gaussian(3), 6, 0.0, 50, 0, 0.2)
    assert exc_info.value.args[0] == 'need M >= 100 dataset draws, got M=50'


def test_transformed_gaussian_lives_in_its_span() -> None:
    distribution = FeatureDistribution.transformed_gaussian(4, [2.0, 0.5])
    x = distribution.draw(4000, trial_rng(0, 0))
    np.testing.assert_array_equal(x[:, 2:], 0.0)
    assert rayleigh_xi(x) == pytest.approx(0.25, rel=0.1)


def test_transformed_gaussian_validation() -> None:
    with pytest.raises(ValueError):
        FeatureDistribution.transformed_gaussian(3, [1.0, -1.0])
    with pytest.raises(SpectralBasisError):
        FeatureDistribution.transformed_gaussian(2, [1.0, 1.0], [[1.0, 1.0], [0.0, 1.0]])


def test_gaussian_draws_respect_the_radius() -> None:
    x = FeatureDistribution.gaussian(6, radius=0.5).draw(50, trial_rng(2, 0))
    assert np.all(np.linalg.norm(x, axis=1) <= 0.5 + 1e-12)


def test_load_dataset_csv_with_header(tmp_path: Path) -> None:
    path = tmp_path / 'data.csv'
    path.write_text('x1,x2,y\n1,0,1\n0,2,-1\n')
    s = load_dataset_csv(path)
    np.testing.assert_array_equal(s.features, [[1.0, 0.0], [0.0, 2.0]])
    np.testing.assert_array_equal(s.labels, [1.0, -1.0])


def test_load_dataset_csv_semicolon_without_header(tmp_path: Path) -> None:
    path = tmp_path / 'data.txt'
    path.write_text('1;0;0;5\n0;1;0;6\n0;0;3;7\n')
    s = load_dataset_csv(path)
    assert s.n == 3
    assert s.d == 3
    np.testing.assert_array_equal(s.labels, [5.0, 6.0, 7.0])
    assert rayleigh_xi(s) == pytest.approx(1 / 3)
