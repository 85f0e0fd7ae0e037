import itertools
import math

import numpy as np
import pytest

from brwre.environment import EnvironmentField, OffspringLaw, env_moments, parse_model
from brwre.experiments import constant, cosine
from brwre.lattice_walk import collision_weights, return_probability, t_step_distribution
from brwre.moments_exact import (annealed_second_moment, normalized_second_moment,
                                 normalized_second_moments, overlap_bound_series,
                                 overlap_bound_series_all, quenched_log_totals, quenched_mean_field,
                                 quenched_total_backward, sclt_factorization_check,
                                 second_moment_envelope, second_moment_functional)
from brwre.oracle import brute_force_oracle, path_sum_quenched_mean

MODELS = ["0.5*poisson(2) + 0.5*poisson(4)", "finite(0:0.5,3:0.5)", "0.5*point(1) + 0.5*point(2)",
          "0.3*finite(0:0.2,2:0.8) + 0.7*finite(1:0.5,3:0.5)", "point(2)"]


def _rel(a, b):
    return abs(a - b) / max(abs(b), 1e-300)


def test_oracle_examples():
    tab = brute_force_oracle(parse_model("point(2)"), 1)
    assert tab.mean(1) == pytest.approx(1.0, abs=1e-14) and tab.mean(-1) == pytest.approx(1.0, abs=1e-14)
    assert tab.total_mean == 2.0
    tab = brute_force_oracle(parse_model("0.5*point(1) + 0.5*point(2)"), 1)
    assert abs(tab.total_law[1] - 0.5) < 1e-15 and abs(tab.total_law[2] - 0.5) < 1e-15
    assert abs(tab.total_mean - 1.5) < 1e-15
    assert abs(tab.total_probability - 1.0) < 1e-12


@pytest.mark.parametrize("spec", MODELS)
@pytest.mark.parametrize("T", [1, 2])
def test_second_moments_match_oracle(spec, T):
    model = parse_model(spec)
    tab = brute_force_oracle(model, T)
    m = env_moments(model).m
    p = t_step_distribution(1, T)
    for x in range(-T, T + 1):
        assert abs(m ** T * p.at(np.array([x])) - tab.mean(x)) <= 1e-10 * m ** T
    for x, y in itertools.product(range(-T, T + 1), repeat=2):
        val = annealed_second_moment(model, 1, T, x, y)
        ref = tab.second(x, y)
        assert abs(val - ref) <= 1e-10 * max(ref, 1.0)
    assert _rel(normalized_second_moment(model, 1, T), tab.normalized_second) <= 1e-10
    assert _rel(overlap_bound_series(model, 1, T), tab.sitewise_normalized_second) <= 1e-10
    one = constant(1.0, 1)
    assert _rel(second_moment_functional(model, 1, T, one, one), tab.normalized_second) <= 1e-10


def test_terminal_convention_differs_from_enumeration():
    model = parse_model(MODELS[0])
    tab = brute_force_oracle(model, 2)
    origin = normalized_second_moment(model, 1, 2, "origin")
    terminal = normalized_second_moment(model, 1, 2, "terminal")
    assert _rel(origin, tab.normalized_second) < 1e-12
    assert _rel(terminal, tab.normalized_second) > 1e-3


def test_functional_indicator_and_symmetry():
    model = parse_model(MODELS[0])
    for x, y in [(0, 2), (2, 0), (-2, 2)]:
        a = annealed_second_moment(model, 1, 2, x, y)
        b = annealed_second_moment(model, 1, 2, y, x)
        assert abs(a - b) <= 1e-14 * max(a, 1)
    total = sum(annealed_second_moment(model, 1, 2, x, y) for x in range(-2, 3) for y in range(-2, 3))
    one = constant(1.0, 1)
    assert _rel(second_moment_functional(model, 1, 2, one, one, normalized=False), total) < 1e-12


def test_functional_trig_route_matches_lattice():
    model = parse_model(MODELS[3])
    for d, T in [(1, 6), (2, 4), (3, 3)]:
        theta = np.linspace(0.4, 1.1, d)
        f = cosine(theta)
        g = cosine(-0.5 * theta)
        s = math.sqrt(T)
        fast = second_moment_functional(model, d, T, f, g, scale=s)
        slow = second_moment_functional(model, d, T, lambda u: f(u), lambda u: g(u), scale=s)
        assert abs(fast - slow) < 1e-13


def test_alpha_one_reduces_to_independent_walks():
    # constant offspring k: no environment noise, c = k - 1
    model = parse_model("point(3)")
    T = 2
    tab = brute_force_oracle(model, T)
    p = {x: t_step_distribution(1, T).at(np.array([x])) for x in range(-T, T + 1)}
    assert abs(normalized_second_moment(model, 1, T) - 1.0) < 1e-15
    assert abs(tab.normalized_second - 1.0) < 1e-12
    site = overlap_bound_series(model, 1, T)
    assert abs(site - tab.sitewise_normalized_second) < 1e-12
    assert site >= sum(v * v for v in p.values())


def test_normalized_second_moment_examples():
    model = parse_model(MODELS[0])
    mom = env_moments(model)
    assert abs(normalized_second_moment(model, 3, 1) - (1 + mom.c) / mom.m) < 1e-15
    assert abs(normalized_second_moment(model, 3, 1) - mom.m2 / mom.m ** 2) < 1e-15
    assert np.allclose(normalized_second_moments(parse_model("point(2)"), 3, 300), 1.0, rtol=0, atol=1e-12)


@pytest.mark.parametrize("spec,d", [(MODELS[0], 3), (MODELS[0], 1), ("0.9*poisson(0.1) + 0.1*poisson(20)", 3)])
def test_normalized_second_moment_nondecreasing(spec, d):
    v = normalized_second_moments(parse_model(spec), d, 300)
    assert np.all(np.diff(v) >= -1e-12 * v[1:])


def test_envelope_bounds_l2_model():
    model = parse_model(MODELS[0])
    rig, geo = second_moment_envelope(model, 3)
    v = normalized_second_moments(model, 3, 2000)
    assert v.max() <= rig <= geo


def test_overlap_series_examples():
    model = parse_model(MODELS[0])
    mom = env_moments(model)
    # T = 1: the root steps, then its children share the landing site
    assert abs(overlap_bound_series(model, 1, 1) - mom.m2 / mom.m ** 2) < 1e-15
    series = overlap_bound_series_all(parse_model("point(2)"), 3, 400)
    scaled = np.arange(401) ** 1.5 * series
    assert np.all(np.isfinite(scaled)) and scaled[16:].max() / scaled[16:].min() < 2.5
    # at alpha = 1 the conditioned weight is the plain return probability p_{2t}(0, 0)
    w = collision_weights(3, 10, 1.0, conditioned=True)
    for t in range(11):
        assert abs(w[t] - t_step_distribution(3, 2 * t).at(np.zeros(3, dtype=np.int64))) < 1e-15
    assert abs(overlap_bound_series(parse_model("point(2)"), 3, 5, include_c=False) -
               overlap_bound_series(parse_model("point(2)"), 3, 5)) < 1e-15


def test_quenched_mean_examples():
    model = parse_model("poisson(1.7)")
    qm = quenched_mean_field(EnvironmentField(model, 0), 6, 2)
    p = t_step_distribution(2, 6)
    assert np.allclose(qm.dense(), 1.7 ** 6 * p.values, rtol=1e-13, atol=0)
    env = EnvironmentField(parse_model("0.5*poisson(1) + 0.5*poisson(3)"), 4)
    one = quenched_mean_field(env, 1, 1)
    m00 = env.means(0, np.zeros((1, 1), dtype=np.int64))[0]
    assert abs(one.at(np.array([1])) - m00 / 2) < 1e-15
    assert abs(one.at(np.array([-1])) - m00 / 2) < 1e-15


def test_quenched_mean_matches_path_sums():
    env = EnvironmentField(parse_model("0.2*poisson(0.5) + 0.5*poisson(2) + 0.3*poisson(5)"), 12)
    T = 3
    qm = quenched_mean_field(env, T, 1)
    ref = path_sum_quenched_mean(lambda t, x: env.means(t, np.array([[x]]))[0], T)
    for x, v in ref.items():
        assert _rel(qm.at(np.array([x])), v) < 1e-13


@pytest.mark.parametrize("d,T", [(1, 30), (2, 12), (3, 8)])
def test_forward_and_backward_quenched_totals(d, T):
    env = EnvironmentField(parse_model("0.5*poisson(1) + 0.5*poisson(3)"), 3)
    logs = quenched_log_totals(env, T, d)
    assert abs(logs[T] - math.log(quenched_total_backward(env, T, d))) < 1e-10


def test_quenched_average_approaches_annealed_mean():
    model = parse_model("0.5*poisson(1) + 0.5*poisson(3)")
    T = 4
    fields = np.array([quenched_mean_field(EnvironmentField(model, s), T, 1).dense() for s in range(1000)])
    mean = fields.mean(axis=0)
    se = fields.std(axis=0, ddof=1) / math.sqrt(len(fields))
    p = t_step_distribution(1, T).values
    ok = p > 0
    assert np.all(np.abs(mean[ok] - 2.0 ** T * p[ok]) < 4 * se[ok])


def test_sclt_examples():
    pi = return_probability(3)
    one = constant(1.0, 3)
    lhs, rhs = sclt_factorization_check(3, 1.5, one, one, 50, 1.0, 1.0, pi)
    assert abs(lhs - collision_weights(3, 50, 1.5, include_origin=True)[50]) < 1e-13
    f = cosine([0.8, 0.0, 0.0])
    lhs, rhs = sclt_factorization_check(3, 1.0, f, f, 400, f.closed_integral, f.closed_integral, pi)
    assert abs(lhs - math.exp(-0.64 / 3)) < 5e-3 and abs(rhs - math.exp(-0.64 / 3)) < 1e-12


def test_sclt_gaussian_bump_trend():
    from brwre.experiments import gaussian_bump, integral_fg1
    pi = return_probability(3)
    f = gaussian_bump(0.5, 3)
    I = integral_fg1(f, 3)
    gaps = []
    # the joint (2t+1)^6 box caps the generic route at small t
    for t in (2, 4, 6):
        lhs, rhs = sclt_factorization_check(3, 1.5, f, f, t, I, I, pi)
        gaps.append(abs(lhs - rhs))
    assert gaps[0] > gaps[1] > gaps[2]
    g = cosine([1.0, 0.0, 0.0])
    gaps = []
    for t in (16, 64, 256):
        lhs, rhs = sclt_factorization_check(3, 1.5, g, g, t, g.closed_integral, g.closed_integral, pi)
        gaps.append(abs(lhs - rhs))
    assert gaps[0] > gaps[1] > gaps[2]


def test_unsupported_inputs():
    from brwre.errors import ResourceLimitError
    with pytest.raises(ResourceLimitError):
        annealed_second_moment(parse_model("point(2)"), 4, 2, (0,) * 4, (0,) * 4)
    with pytest.raises(ValueError):
        sclt_factorization_check(3, 4.0, constant(1.0, 3), constant(1.0, 3), 5, 1.0, 1.0)
    assert OffspringLaw.point(2).mean == 2
