"""Acceptance criteria 1-10 at desk scale (n = 3, s0 = -1, resolutions 16-32).

Each test prints one ``criterion N: PASS|FAIL`` line (also repeated in the
terminal summary) and asserts the verdict.  Tolerances are pinned below.
"""

import math

import numpy as np
import pytest

from crf_lab import difference as dif
from crf_lab.config import ExperimentConfig, validate
from crf_lab.elliptic import apply_L, ibp_identity_check, solve_L, solve_pressure, yamabe_normalize
from crf_lab.experiments import EXIT_OK, initial_metric, run_twin, run_verify, twin_runs
from crf_lab.flow import FlowSettings, einstein_stub, initial_state, run
from crf_lab.geometry import bianchi_residuals, curvature, scalar_curvature
from crf_lab.grid import GridSpec, MetricField, integrate, scalar_field
from crf_lab.samples import base_metric, conformal_metric, random_metric, random_scalar, sine_profile

S0 = -1.0
ORDER_MIN = 3.5

pytestmark = pytest.mark.acceptance


def cube(n: int) -> GridSpec:
    return GridSpec.cube(n, 3, 1.0)


def order(coarse: float, fine: float, n_coarse: int, n_fine: int) -> float:
    return math.log(coarse / fine) / math.log(n_fine / n_coarse)


def rel_change(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b))


def twin_config(**kw) -> ExperimentConfig:
    return validate(ExperimentConfig(experiment="twin", **kw))


# --------------------------------------------------------------------------- 1


def test_criterion_1_curvature_pipeline(record_criterion):
    flat = curvature(MetricField.flat(cube(16)))
    flat_riemann = float(np.max(np.abs(flat.riemann_array)))

    errors = {}
    for n in (16, 32):
        grid = cube(n)
        phi = sine_profile(grid, 0.1)
        x = grid.coordinates()[0]
        d1 = 0.2 * np.pi * np.cos(2 * np.pi * x)
        d2 = -0.4 * np.pi**2 * np.sin(2 * np.pi * x)
        exact = np.exp(-2 * phi) * (-4 * d2 - 2 * d1**2)
        s = scalar_curvature(conformal_metric(grid, phi)).data
        errors[n] = float(np.max(np.abs(s - exact)))
    p = order(errors[16], errors[32], 16, 32)

    ok = flat_riemann <= 1e-10 and p >= ORDER_MIN
    record_criterion(
        1, ok, f"flat |Rm| = {flat_riemann:.1e}; conformal s error {errors[16]:.2e} -> {errors[32]:.2e}, order {p:.2f}"
    )
    assert ok


# --------------------------------------------------------------------------- 2

BIANCHI_AMPLITUDE = 1e-4  # the contracted identity's defect is quadratic in the amplitude


def test_criterion_2_bianchi(record_criterion):
    res = {n: bianchi_residuals(random_metric(cube(n), 1, BIANCHI_AMPLITUDE)) for n in (16, 32)}
    first32, second32 = res[32]
    p = order(res[16][1], res[32][1], 16, 32)
    # the same metric family at the default amplitude, for the record
    big = {n: bianchi_residuals(random_metric(cube(n), 1, 1e-2))[1] for n in (16, 32)}

    ok = first32 <= 1e-8 and second32 <= 1e-8 and p >= ORDER_MIN
    record_criterion(
        2,
        ok,
        f"amplitude {BIANCHI_AMPLITUDE:g}: first {first32:.1e}, contracted second {second32:.2e} at 32, "
        f"order {p:.2f} (amplitude 1e-2: {big[32]:.1e}, order {order(big[16], big[32], 16, 32):.2f})",
    )
    assert ok


# --------------------------------------------------------------------------- 3


def test_criterion_3_pressure(record_criterion):
    grid = cube(32)
    g = random_metric(grid, 1, 0.1)
    y = grid.coordinates()[1]
    p_star = scalar_field(np.broadcast_to(0.01 * np.cos(2 * np.pi * y), grid.shape).copy(), grid)
    p, _ = solve_L(g, S0, apply_L(g, S0, p_star))
    err = math.sqrt(integrate(scalar_field((p.data - p_star.data) ** 2, grid), g))
    ref = math.sqrt(integrate(scalar_field(p_star.data**2, grid), g))
    mms = err / ref

    p_e, _ = solve_pressure(g, S0, ricci=einstein_stub(g, S0))
    p_e_norm = math.sqrt(integrate(scalar_field(p_e.data**2, grid), g))

    phi = 0.1 * (np.sin(2 * np.pi * grid.coordinates()[0]) + np.cos(2 * np.pi * y))
    gc = conformal_metric(grid, phi)
    lhs, rhs = ibp_identity_check(gc, S0, random_scalar(grid, 3))
    gap = abs(lhs - rhs) / abs(rhs)

    ok = mms <= 1e-8 and p_e_norm <= 1e-9 and gap <= 1e-6
    record_criterion(3, ok, f"manufactured rel L2 {mms:.1e}; Einstein |p| {p_e_norm:.1e}; ibp gap {gap:.1e}")
    assert ok


# --------------------------------------------------------------------------- 4


def test_criterion_4_yamabe(record_criterion):
    grid = cube(16)
    out = {}
    for label, g0 in (
        ("base metric", base_metric(grid, 1, strength=0.5, noise=0.01)),
        ("second seed", base_metric(grid, 2, strength=0.5, noise=0.02)),
    ):
        g, rep = yamabe_normalize(g0, S0)
        out[label] = (float(np.max(np.abs(scalar_curvature(g).data - S0))), rep.iterations)

    ok = all(sup <= 1e-7 and its <= 30 for sup, its in out.values())
    record_criterion(
        4, ok, "; ".join(f"{k}: sup|s+1| {v[0]:.1e} in {v[1]} Newton steps" for k, v in out.items())
    )
    assert ok


# --------------------------------------------------------------------------- 5


def test_criterion_5_lemma_suite(record_criterion, tmp_path):
    cfg = validate(ExperimentConfig(experiment="verify", resolutions=(16, 32), seed=1, output_dir=str(tmp_path / "v")))
    result = run_verify(cfg)
    summary = result.data
    algebraic = max(summary[k]["max_residual"] for k in dif.ALGEBRAIC_IDENTITIES)
    exact = [k for k in dif.DIFFERENTIAL_IDENTITIES if math.isnan(summary[k]["conv_order"])]
    orders = {k: summary[k]["conv_order"] for k in dif.DIFFERENTIAL_IDENTITIES if k not in exact}

    ok = (
        result.exit_code == EXIT_OK
        and algebraic <= 1e-12
        and all(summary[k]["max_residual"] <= 1e-11 for k in exact)
        and all(p >= ORDER_MIN for p in orders.values())
    )
    record_criterion(
        5,
        ok,
        f"algebraic {algebraic:.1e}; exact at rounding: {', '.join(exact)}; orders "
        + ", ".join(f"{k} {p:.2f}" for k, p in orders.items()),
    )
    assert ok


# --------------------------------------------------------------------------- 6

EVOLUTION_EPS = 1e-4
EVOLUTION_TIME = 0.01


def test_criterion_6_evolution_identities(record_criterion):
    residuals = {}
    for dt in (1e-3, 5e-4):
        cfg = twin_config(final_time=0.012, dt=dt, perturbation=EVOLUTION_EPS)
        runs = twin_runs(cfg)
        residuals[dt] = {
            "h": dif.h_evolution_residual(runs.a, runs.b, EVOLUTION_TIME),
            "A": dif.A_evolution_residual(runs.a, runs.b, EVOLUTION_TIME),
            "S": dif.S_evolution_residual(runs.a, runs.b, EVOLUTION_TIME),
            "S discrete-rate": dif.S_evolution_residual(runs.a, runs.b, EVOLUTION_TIME, "discrete"),
        }
        runs.release()
    ratios = {k: residuals[1e-3][k] / residuals[5e-4][k] for k in residuals[1e-3]}

    # q-source on twin states with the standard pressure at resolution 32
    cfg32 = twin_config(resolution=32, dt=5e-4, perturbation=1e-6, pressure_form="standard")
    settings = cfg32.flow_settings()
    a = initial_state(initial_metric(cfg32), S0, settings)
    b = initial_state(initial_metric(cfg32, 1e-6), S0, settings)
    q_res = dif.q_source_residual(a, b)

    ok = all(3.0 <= ratios[k] <= 5.0 for k in ("h", "A", "S")) and q_res <= 1e-6
    record_criterion(
        6,
        ok,
        "dt-halving ratios "
        + ", ".join(f"{k} {r:.2f} ({residuals[1e-3][k]:.1e})" for k, r in ratios.items())
        + f"; q-source at 32: {q_res:.1e}",
    )
    assert ok


# --------------------------------------------------------------------------- 7


def test_criterion_7_flow_integrity(record_criterion):
    cfg = validate(ExperimentConfig(final_time=0.1, dt=1e-3))
    # raised ceiling so the drift is measured over the whole interval instead of aborting
    settings = FlowSettings(constraint_ceiling=1e-2)
    init = initial_state(initial_metric(cfg), S0, settings)
    traj = run(init, 0.1, 1e-3, [k * 0.01 for k in range(11)], settings)
    drift = max(m.drift_sup for m in traj.monitors)
    trace_law = traj.trace_law_max

    finals = {}
    for dt in (2e-3, 1e-3, 5e-4):
        finals[dt] = run(init, 0.02, dt, settings=settings).final.g.g
    e1 = float(np.max(np.abs(finals[2e-3] - finals[1e-3])))
    e2 = float(np.max(np.abs(finals[1e-3] - finals[5e-4])))
    ratio = e1 / e2

    ok = trace_law <= 1e-10 and abs(ratio - 16) <= 4 and drift <= 1e-5 and traj.aborted is None
    record_criterion(
        7, ok, f"trace law {trace_law:.1e}; step-doubling ratio {ratio:.2f}; drift over T=0.1 {drift:.2e}"
    )
    assert ok


# --------------------------------------------------------------------------- 8


def test_criterion_8_uniqueness(record_criterion, tmp_path):
    cfg = twin_config(final_time=0.1, dt=1e-3, output_every=10, output_dir=str(tmp_path / "twin"))
    result = run_twin(cfg)
    report = result.data["report"]
    floor = report.floor
    e_max = max(report.E)

    e_final = {}
    for dt in (2e-3, 1e-3):
        c = twin_config(final_time=0.02, dt=dt, scheme_b="half-step", output_every=10)
        runs = twin_runs(c)
        a, b = runs.pairs(10)[-1]
        e_final[dt] = sum(dif.energy_terms(dif.diff_state(a, b), a.g)[:3])
    e_ratio = e_final[2e-3] / e_final[1e-3]
    # E is quadratic in the solution error, so a fourth-order error ratio of 16 is sqrt(E)
    amp_ratio = math.sqrt(e_ratio)

    ok = result.exit_code == EXIT_OK and e_max <= 100 * floor and abs(amp_ratio - 16) <= 0.4 * 16
    record_criterion(
        8,
        ok,
        f"identical twin max E {e_max:.1e} (floor {floor:.0e}); half-step E(T) ratio {e_ratio:.1f}, "
        f"sqrt ratio {amp_ratio:.2f}",
    )
    assert ok


# --------------------------------------------------------------------------- 9

GRONWALL_T = 0.05


def test_criterion_9_gronwall(record_criterion):
    verdicts = {}
    for res in (16, 24):
        cfg = twin_config(resolution=res, final_time=GRONWALL_T, dt=1e-3, perturbation=1e-6)
        runs = twin_runs(cfg)
        pairs = runs.pairs(5)
        report = dif.energies([dif.diff_state(a, b) for a, b in pairs], runs.a)
        verdicts[res] = dif.gronwall_check(report)
        runs.release()
    v16, v24 = verdicts[16], verdicts[24]
    spread = rel_change(v16.fitted_rate, v24.fitted_rate)

    ok = (
        all(v.applicable and v.fit_quality >= 0.9 and v.ratio <= 1.5 for v in verdicts.values())
        and spread <= 0.2
    )
    record_criterion(
        9,
        ok,
        f"N^ {v16.fitted_rate:.3f} (16) vs {v24.fitted_rate:.3f} (24), spread {spread:.1%}; "
        f"fit quality {v16.fit_quality:.3f}/{v24.fit_quality:.3f}; ratio {v16.ratio:.3f}/{v24.ratio:.3f}",
    )
    assert ok


# -------------------------------------------------------------------------- 10


def test_criterion_10_bound_monitors(record_criterion):
    maxima = {}
    for dt in (1e-3, 5e-4):
        cfg = twin_config(final_time=0.02, dt=dt, perturbation=1e-6)
        runs = twin_runs(cfg)
        every = int(round(0.005 / dt))
        pairs = runs.pairs(every)
        diffs = [dif.diff_state(a, b) for a, b in pairs]
        report = dif.energies(diffs, runs.a)
        table = dif.bound_monitors(pairs, diffs, report)
        maxima[dt] = {m: table.max(m) for m in dif.MONITORS}
        runs.release()
    finite = all(math.isfinite(v) for m in maxima.values() for v in m.values())
    spread = {m: rel_change(maxima[1e-3][m], maxima[5e-4][m]) for m in dif.MONITORS}
    worst = max(spread, key=spread.get)

    ok = finite and all(s <= 0.2 for s in spread.values())
    record_criterion(
        10,
        ok,
        f"all finite: {finite}; largest relative spread {worst} {spread[worst]:.1e}; maxima "
        + ", ".join(f"{m} {maxima[1e-3][m]:.3g}" for m in dif.MONITORS),
    )
    assert ok
