import math

import numpy as np
import pytest

from brwre.dpre import (EtaField, EtaLaw, coupling_identity_check, dpre_clt_criterion, finite_t_comparison,
                        lambda_of_beta, polymer_dp, strong_disorder_slope)
from brwre.environment import EnvironmentModel, parse_model
from brwre.lattice_walk import return_probability, t_step_distribution
from brwre.oracle import polymer_martingale_check, polymer_partition_paths


def test_lambda_examples():
    assert lambda_of_beta(EtaLaw.gaussian(), 0.0) == 0.0
    assert lambda_of_beta(EtaLaw.two_point(), 0.0) == 0.0
    for beta in (0.3, 1.0, 2.5):
        assert abs(lambda_of_beta(EtaLaw.gaussian(), beta) - beta ** 2 / 2) < 1e-15
        assert abs(lambda_of_beta(EtaLaw.two_point(), beta) - math.log(math.cosh(beta))) < 1e-14


@pytest.mark.parametrize("law", [EtaLaw.gaussian(0.7), EtaLaw.two_point(), EtaLaw.finite([-1, 0, 3], [0.3, 0.6, 0.1])])
def test_lambda_convexity_gap(law):
    for beta in np.linspace(0.05, 3, 30):
        assert lambda_of_beta(law, 2 * beta) - 2 * lambda_of_beta(law, beta) > 0
    assert abs(lambda_of_beta(law, 0.0)) < 1e-15
    flat = EtaLaw.finite([0.4], [1.0])
    assert abs(lambda_of_beta(flat, 2.0) - 2 * lambda_of_beta(flat, 1.0)) < 1e-15


def test_polymer_trivial_cases():
    eta = EtaField(EtaLaw.gaussian(), 3)
    free = polymer_dp(eta, 0.0, 7, 2)
    assert abs(free.log_z) < 1e-15
    assert np.allclose(free.endpoint.values, t_step_distribution(2, 7).values, atol=1e-16)
    one = polymer_dp(eta, 0.9, 1, 2)
    assert abs(one.log_z - 0.9 * eta.values(0, np.zeros((1, 2), dtype=np.int64))[0]) < 1e-15
    assert np.allclose(one.endpoint.values, t_step_distribution(2, 1).values)
    const = polymer_dp(EtaField(EtaLaw.finite([0.7], [1.0]), 0), 1.3, 9, 1)
    assert abs(const.log_z - 1.3 * 0.7 * 9) < 1e-12


def test_polymer_matches_path_sums():
    eta = EtaField(EtaLaw.two_point(), 8)
    beta, T = 0.8, 6
    res = polymer_dp(eta, beta, T, 1)
    z, ends = polymer_partition_paths(lambda t, x: eta.values(t, np.array([[x]]))[0], beta, T)
    assert abs(res.log_z - math.log(z)) < 1e-13
    for x, w in ends.items():
        assert abs(res.endpoint.at(np.array([x])) - w / z) < 1e-14
    vals = res.endpoint.values
    assert abs(vals.sum() - 1) < 1e-14
    l1 = np.abs(res.endpoint.box.coords()).sum(axis=-1)
    assert np.all(vals[(l1 - T) % 2 != 0] == 0)


@pytest.mark.parametrize("d", [1, 2, 3])
@pytest.mark.parametrize("law", [EtaLaw.gaussian(), EtaLaw.two_point()])
def test_coupling_identity(d, law):
    for T in (1, 4, 8):
        r = coupling_identity_check(EtaField(law, 5 + T), 0.7, T, d)
        assert r.worst <= 1e-10


def test_coupling_identity_zero_field():
    r = coupling_identity_check(EtaField(EtaLaw.finite([0.0], [1.0]), 0), 1.0, 6, 2)
    assert r.total == 0.0 and r.endpoint <= 1e-15


def test_shift_invariance():
    h, beta, T = 0.6, 0.9, 7
    base = EtaField(EtaLaw.two_point(-1.0, 1.0), 4)
    shifted = EtaField(EtaLaw.two_point(-1.0 + h, 1.0 + h), 4)
    a, b = polymer_dp(base, beta, T, 2), polymer_dp(shifted, beta, T, 2)
    assert abs(b.log_z - a.log_z - beta * h * T) < 1e-12
    assert np.allclose(a.endpoint.values, b.endpoint.values, rtol=1e-12, atol=0)
    assert abs(a.log_zbar - b.log_zbar) < 1e-12


def test_exact_martingale_increment():
    for t in (0, 1, 2):
        worst, total_p = polymer_martingale_check([-1.0, 1.0], [0.5, 0.5], 0.8, t)
        assert worst <= 1e-12 and abs(total_p - 1.0) < 1e-12


def test_criterion_examples():
    pi = return_probability(3)
    assert dpre_clt_criterion(EtaLaw.gaussian(), 0.0, 3, pi).verdict == "holds"
    limit = math.sqrt(math.log(1 / pi.point))
    assert dpre_clt_criterion(EtaLaw.gaussian(), 0.9 * limit, 3, pi).verdict == "holds"
    assert dpre_clt_criterion(EtaLaw.gaussian(), 1.1 * limit, 3, pi).verdict == "fails"
    for beta in (0.01, 0.5, 2.0):
        assert dpre_clt_criterion(EtaLaw.two_point(), beta, 1).verdict == "fails"


def test_slope_examples():
    est = strong_disorder_slope(parse_model("0.5*poisson(0.5) + 0.5*poisson(3.5)"), 1, 200, 40, 1)
    assert est.upper < 0 and est.tag == "criterion"
    flat = strong_disorder_slope(parse_model("poisson(2)"), 1, 100, 5, 1)
    assert abs(flat.slope) < 1e-12 and flat.tag == "exploratory"
    branching = strong_disorder_slope(parse_model("point(2)"), 1, 40, 5, 1, route="branching")
    assert abs(branching.slope) < 1e-12


@pytest.mark.slow
def test_slope_a3_model_d3():
    model = parse_model("0.9*poisson(0.1) + 0.1*poisson(20)")
    est = strong_disorder_slope(model, 3, 60, 20, 2)
    assert est.tag == "criterion" and est.upper < 0


def test_coupled_model_uses_eta_seed():
    model = EnvironmentModel.coupled(EtaLaw.gaussian(), 0.5)
    assert model.is_coupled and not model.is_mixture


def test_finite_t_comparison():
    model = parse_model("coupled(finite(-1:0.5,1:0.5);0.5)")
    cmp = finite_t_comparison(model, 1, 6, 400, 3)
    assert cmp.excluded == 0 and cmp.replicas_used == 400
    se = math.sqrt(cmp.var_zbar / 400)
    assert abs(cmp.mean_zbar - 1) < 4 * se
    assert abs(cmp.mean_nbar - 1) < 4 * math.sqrt(cmp.var_nbar / 400)
    # branching noise on top of the environment makes Nbar the more spread
    assert cmp.var_nbar > cmp.var_zbar
    det = finite_t_comparison(parse_model("point(2)"), 2, 5, 3, 0)
    assert det.var_nbar == 0.0 and det.var_zbar == 0.0 and det.mean_nbar == 1.0
