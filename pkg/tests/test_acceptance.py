"""Acceptance suite: one pass/fail line per criterion.

Run under pytest (lines are printed even without -s) or directly as
``python3 tests/test_acceptance.py``.
"""
import filecmp
import itertools
import logging
import math
import os
import sys
import tempfile
import time

import numpy as np
import pytest

from brwre.cli import main as cli_main
from brwre.dpre import EtaField, EtaLaw, coupling_identity_check, polymer_dp, strong_disorder_slope
from brwre.environment import classify_phase, env_moments, parse_model
from brwre.brwre_sim import extinction_estimate
from brwre.experiments import clt_l2_experiment, cosine, overlap_scaling_experiment
from brwre.lattice_walk import return_probability, t_step_distribution
from brwre.moments_exact import (annealed_second_moment, normalized_second_moments,
                                 overlap_bound_series, second_moment_envelope)
from brwre.oracle import brute_force_oracle, polymer_martingale_check

ORACLE_MODELS = ["0.5*poisson(2) + 0.5*poisson(4)", "finite(0:0.5,3:0.5)",
                 "0.3*finite(0:0.2,2:0.8) + 0.7*finite(1:0.5,3:0.5)", "0.5*point(1) + 0.5*point(2)"]
L2_MODEL = "0.5*poisson(2) + 0.5*poisson(4)"
DIVERGENT_MODEL = "0.9*poisson(0.1) + 0.1*poisson(20)"
CLT_MODEL = "0.5*finite(1:0.99,2:0.01) + 0.5*finite(1:0.97,2:0.03)"
STRONG_MODEL = "coupled(finite(-1:0.5,1:0.5);1.0)"
EXTINCTION_MODELS = ["0.5*point(0) + 0.5*point(3)",
                     "0.5*finite(0:0.3,2:0.7) + 0.5*finite(0:0.1,1:0.2,3:0.7)"]


def _rel(a, b):
    return abs(a - b) / max(abs(b), 1e-300)


def criterion_1():
    worst = 0.0
    for spec, T in itertools.product(ORACLE_MODELS, (1, 2)):
        model = parse_model(spec)
        tab = brute_force_oracle(model, T)
        m = env_moments(model).m
        p = t_step_distribution(1, T)
        sites = range(-T, T + 1, 2)
        for x in sites:
            worst = max(worst, _rel(m ** T * p.at(np.array([x])), tab.mean(x)))
        for x, y in itertools.product(sites, repeat=2):
            worst = max(worst, _rel(annealed_second_moment(model, 1, T, x, y), tab.second(x, y)))
        worst = max(worst, _rel(normalized_second_moments(model, 1, T)[T], tab.normalized_second))
        worst = max(worst, _rel(overlap_bound_series(model, 1, T), tab.sitewise_normalized_second))
    return worst <= 1e-10, f"{len(ORACLE_MODELS)} models, T in {{1,2}}, worst relative error {worst:.2e} (tol 1e-10)"


def criterion_2():
    worst_n = 0.0
    for spec in ORACLE_MODELS:
        model = parse_model(spec)
        m = env_moments(model).m
        # unbounded Poisson support makes T = 3 enumeration too large
        tab = brute_force_oracle(model, 2 if "poisson" in spec else 3)
        for t, rows in enumerate(tab.conditional):
            for _, n, e in rows:
                worst_n = max(worst_n, abs(e / m ** (t + 1) - n / m ** t))
    worst_z = max(polymer_martingale_check([-1.0, 1.0], [0.5, 0.5], 0.8, t)[0] for t in range(3))
    law, beta, T, reps = EtaLaw.gaussian(), 0.5, 10, 10_000
    zbar = np.array([math.exp(polymer_dp(EtaField(law, s), beta, T, 1).log_zbar) for s in range(reps)])
    se = zbar.std(ddof=1) / math.sqrt(reps)
    z = (zbar.mean() - 1.0) / se
    ok = worst_n <= 1e-12 and worst_z <= 1e-12 and abs(z) < 4
    return ok, (f"Nbar step residual {worst_n:.1e}, Zbar step residual {worst_z:.1e} (tol 1e-12); "
                f"MC mean Zbar_{T} = {zbar.mean():.4f} +- {se:.4f}, z = {z:.2f} (|z| < 4)")


def criterion_3():
    worst = 0.0
    for d, law, T in itertools.product((1, 2, 3), (EtaLaw.gaussian(), EtaLaw.two_point()), range(1, 9)):
        worst = max(worst, coupling_identity_check(EtaField(law, 100 * d + T), 0.8, T, d).worst)
    return worst <= 1e-10, f"d in 1..3, T in 1..8, two eta laws: worst log-residual {worst:.2e} (tol 1e-10)"


def criterion_4():
    series = return_probability(3)
    mc = return_probability(3, method="monte-carlo", walks=1_000_000, horizon=10_000, seed=4)
    low = [return_probability(d).point for d in (1, 2)]
    ok = (series.width <= 2e-3 and mc.contains(series.lower) and mc.contains(series.upper)
          and low == [1.0, 1.0])
    return ok, (f"pi_3 in [{series.lower:.8f}, {series.upper:.8f}] (width {series.width:.1e}); "
                f"MC {mc.point:.5f} with interval [{mc.lower:.5f}, {mc.upper:.5f}]; pi_1, pi_2 = {low}")


def criterion_5():
    model = parse_model(L2_MODEL)
    v = normalized_second_moments(model, 3, 200)
    rig, geo = second_moment_envelope(model, 3)
    mono = bool(np.all(np.diff(v) >= -1e-12 * v[1:]))
    bounded = bool(v.max() <= geo)
    div = parse_model(DIVERGENT_MODEL)
    phase = classify_phase(div, 3)
    w = normalized_second_moments(div, 3, 200)
    bound = 1e6
    hit = int(np.argmax(w > bound)) if np.any(w > bound) else None
    div_mono = bool(np.all(np.diff(w) >= -1e-12 * w[1:]))
    ok = mono and bounded and div_mono and phase.alpha * phase.pi_lower > 1 and hit is not None
    return ok, (f"L2 model: nondecreasing {mono}, max {v.max():.6f} <= envelope {geo:.6f}; "
                f"alpha*pi_3 = {phase.alpha * phase.pi_lower:.2f} model exceeds {bound:.0e} at T = {hit}")


def criterion_6():
    model = parse_model(CLT_MODEL)
    tab = clt_l2_experiment(model, 3, cosine([1.0, 0.0, 0.0]), [25, 100, 400], 200, 6)
    targets = [r.target for r in tab.rows]
    zs = [r.standardized_error for r in tab.rows]
    ok = targets[0] > targets[1] > targets[2] and all(abs(z) < 4 for z in zs)
    return ok, ("exact E[D_T^2] " + ", ".join(f"{t:.5f}" for t in targets) +
                "; MC z-scores " + ", ".join(f"{z:.2f}" for z in zs) + " (|z| < 4)")


def criterion_7():
    horizons = [16, 64, 256]
    rows = overlap_scaling_experiment(parse_model("point(2)"), 3, horizons, 200, 7)
    exact = [r.exact_overlay for r in rows]
    q90 = [r.q90 for r in rows]
    exact_ratio = max(exact) / min(exact)
    mc_ok = all(np.isfinite(q90)) and max(q90) / min(q90) < 3
    ok = exact_ratio < 2 and mc_ok
    surv = ", ".join(f"T={r.T}: {r.survivors} kept / {r.overflow} overflow" for r in rows)
    return ok, (f"exact ratio {exact_ratio:.3f} (< 2); q90 " + ", ".join(f"{q:.4f}" for q in q90) +
                f" ({surv})")


def criterion_8():
    est = strong_disorder_slope(parse_model(STRONG_MODEL), 1, 400, 200, 8, route="polymer")
    ok = est.upper < 0 and est.tag == "criterion"
    return ok, (f"slope {est.slope:.5f}, 99% CI [{est.lower:.5f}, {est.upper:.5f}], "
                f"{est.replicas_used} replicas, tag {est.tag}")


def criterion_9():
    parts = []
    ok = True
    for i, spec in enumerate(EXTINCTION_MODELS):
        rep = extinction_estimate(parse_model(spec), 1, 60, 1000, 90 + i, sw_samples=4000)
        ok = ok and rep.ordering_holds() and rep.gw_residual <= 1e-12
        parts.append(f"[{spec}] e_GW {rep.e_gw:.4f} (resid {rep.gw_residual:.0e}) <= e_hat {rep.e_hat:.4f} "
                     f"[{rep.e_hat_ci[0]:.4f}, {rep.e_hat_ci[1]:.4f}] <= e_SW {rep.e_sw:.4f}")
    return ok, "; ".join(parts)


DETERMINISM_CONFIGS = {
    "simulate": "[run]\ndimension = 2\nhorizons = 12\nreplicas = 3\nseed = 1\n"
                "[model]\nmodel = 0.5*poisson(1) + 0.5*poisson(3)\n",
    "moments": "[run]\ndimension = 1\nhorizons = 1, 2, 10\n[model]\nmodel = 0.5*poisson(2) + 0.5*poisson(4)\n"
               "[experiment]\ntest_function = cosine(0.7)\n",
    "phase": "[run]\ndimension = 3\n[model]\nmodel = 0.9*poisson(0.1) + 0.1*poisson(20)\n",
    "clt": "[run]\ndimension = 2\nhorizons = 4, 8\nreplicas = 20\nseed = 2\n"
           "[model]\nmodel = 0.5*finite(1:0.9,2:0.1) + 0.5*finite(0:0.1,2:0.9)\n"
           "[experiment]\ntest_function = cosine(1.0, 0.0)\nepsilon = 0.1, 0.3\n",
    "overlap": "[run]\ndimension = 3\nhorizons = 4, 8\nreplicas = 10\nseed = 3\n[model]\nmodel = point(2)\n",
    "dpre": "[run]\ndimension = 1\nhorizons = 6, 40\nreplicas = 10\nseed = 4\n"
            "[model]\nmodel = coupled(finite(-1:0.5,1:0.5);1.0)\n",
    "extinction": "[run]\ndimension = 1\nhorizons = 30\nreplicas = 100\nseed = 5\n"
                  "[model]\nmodel = 0.5*point(0) + 0.5*point(3)\n[experiment]\nsw_samples = 500\n",
}


def criterion_10():
    bad = []
    logging.getLogger("brwre").setLevel(logging.WARNING)
    with tempfile.TemporaryDirectory() as tmp:
        for command, text in DETERMINISM_CONFIGS.items():
            cfg = os.path.join(tmp, f"{command}.ini")
            with open(cfg, "w") as fh:
                fh.write(text)
            outs = [os.path.join(tmp, f"{command}-{k}") for k in (1, 2)]
            codes = [cli_main([command, "--config", cfg, "--out", out, "--workers", str(k)])
                     for out, k in zip(outs, (1, 2))]
            names = sorted(n for n in os.listdir(outs[0]) if n != "meta.json") if codes == [0, 0] else []
            same = bool(names) and names == sorted(n for n in os.listdir(outs[1]) if n != "meta.json")
            if same:
                _, mismatch, errors = filecmp.cmpfiles(outs[0], outs[1], names, shallow=False)
                same = not mismatch and not errors
            if not same:
                bad.append(command)
    n = len(DETERMINISM_CONFIGS)
    return not bad, f"{n - len(bad)}/{n} subcommands byte-identical across reruns" + (
        f" (differ: {', '.join(bad)})" if bad else "")


CRITERIA = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5,
            criterion_6, criterion_7, criterion_8, criterion_9, criterion_10]


def _report(n):
    start = time.perf_counter()
    ok, detail = CRITERIA[n - 1]()
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} ({time.perf_counter() - start:.1f} s) {detail}"
    return ok, line


@pytest.mark.parametrize("n", range(1, len(CRITERIA) + 1))
def test_criterion(n, capsys):
    ok, line = _report(n)
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


if __name__ == "__main__":
    results = []
    for n in range(1, len(CRITERIA) + 1):
        ok, line = _report(n)
        print(line, flush=True)
        results.append(ok)
    sys.exit(0 if all(results) else 1)
