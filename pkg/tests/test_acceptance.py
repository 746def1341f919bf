"""Acceptance gate: one test per criterion, each recording a single PASS/FAIL line.

The lines are printed inside each test and again, collected, in the pytest
terminal summary. Tolerances and runtime budgets are the contract values.

Tags: [DERIVED] oracle or regression checks, [PAPER] properties the theory asserts.
"""

from __future__ import annotations

import math
import time

import numpy as np

from torusmfg.cli import main, parse_config, run_verify
from torusmfg.grid import GridVectorField, TorusGrid, apply_reg, divergence, gradient, inner, laplacian_power
from torusmfg.linmodel import LinProblem, lin_oracle, lin_solve
from torusmfg.model import (
    Coupling,
    MFGProblem,
    PowerHamiltonian,
    RegParams,
    StatePair,
    apply_F,
    default_reg_order,
    legendre_verify,
)
from torusmfg.monotone import make_test_bank, minty_sweep, monotonicity_gap, random_trig_field
from torusmfg.solvers import continuation_solve, jacobian_apply, picard_solve
from torusmfg.timedep import (
    ConstraintSets,
    QuadraticForm,
    SpaceTimeGrid,
    TDProblem,
    make_td_bank,
    td_diagnostics,
    td_gap,
    td_picard_solve,
)

from conftest import baseline_problem

TWO_PI = 2 * np.pi
SCHEDULE = (1e-1, 1e-2, 1e-3, 1e-4)

RESULTS: list[str] = []


def record(n: int, title: str, checks: dict[str, bool], detail: str) -> bool:
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    line = f"{'PASS' if ok else 'FAIL'} criterion {n:>2} {title}: {detail}"
    if failed:
        line += f" [failed: {', '.join(failed)}]"
    RESULTS.append(line)
    print(line)
    return ok


def _white(grid: TorusGrid, rng: np.random.Generator):
    return grid.field(rng.standard_normal(grid.shape))


def test_criterion_01_operator_calculus():
    """[DERIVED] adjointness, div grad = Lap and PSD of Lap^{2k} within 1e-12 relative, under 1 s."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    adj = comp = psd = 0.0
    for d, n in ((1, 64), (2, 32)):
        g = TorusGrid(d, n)
        k = default_reg_order(d)
        for _ in range(5):
            f = _white(g, rng)
            V = GridVectorField(tuple(_white(g, rng) for _ in range(d)))
            Df = gradient(f)
            a, b = inner(divergence(V), f), sum(inner(V[i], Df[i]) for i in range(d))
            adj = max(adj, abs(a + b) / (abs(a) + abs(b)))
            q = random_trig_field(g, rng, n // 4)
            lap = laplacian_power(q, 1)
            comp = max(comp, (divergence(gradient(q)) - lap).norm_inf() / lap.norm_inf())
            val = inner(laplacian_power(f, 2 * k), f)
            psd = max(psd, -val / abs(val))
    dt = time.perf_counter() - t0
    ok = record(
        1,
        "operator calculus",
        {"adjointness": adj <= 1e-12, "composition": comp <= 1e-12, "psd": psd <= 1e-12, "runtime": dt < 1.0},
        f"adj={adj:.2e} comp={comp:.2e} psd={psd:.2e} time={dt:.2f}s",
    )
    assert ok


def test_criterion_02_legendre():
    """[PAPER] brute-force sup matches the closed-form Hamiltonian within 1e-3 at 10 p's per alpha, under 10 s."""
    t0 = time.perf_counter()
    ps = np.linspace(-1.5, 1.5, 10)
    worst, inconclusive = 0.0, False
    for alpha in (1.5, 2.0, 3.0):
        spec = PowerHamiltonian(alpha)
        for p in ps:
            chk = legendre_verify(spec, [float(p)], v_box=6.0, grid_n=20001)
            worst = max(worst, chk.gap)
            inconclusive |= chk.inconclusive
    dt = time.perf_counter() - t0
    ok = record(
        2,
        "Legendre consistency",
        {"gap": worst <= 1e-3, "interior maximizer": not inconclusive, "runtime": dt < 10.0},
        f"max|H_num - H|={worst:.2e} time={dt:.2f}s",
    )
    assert ok


def test_criterion_03_monotonicity():
    """[PAPER] gap >= -1e-10 over 200 pairs per configuration; decomposition within 1e-10; under 30 s."""
    t0 = time.perf_counter()
    g = TorusGrid(1, 32)
    bank = make_test_bank(g, 400, 3)
    worst, mis, configs = math.inf, 0.0, 0
    for alpha in (1.5, 2.0, 3.0):
        for cp in (Coupling("linear"), Coupling("power", 2.0)):
            for nu in (0.0, 1.0):
                pr = MFGProblem(g, PowerHamiltonian(alpha), cp, g.field(lambda x: np.cos(TWO_PI * x)), g.constant(1.0), nu)
                for reg, lam in ((RegParams(1e-2, variant="plain"), None), (RegParams(1e-2, variant="penalized"), 0.5)):
                    configs += 1
                    for i in range(200):
                        gp = monotonicity_gap(pr, bank[2 * i], bank[2 * i + 1], reg, lam)
                        worst = min(worst, gp.direct)
                        mis = max(mis, gp.mismatch)
    dt = time.perf_counter() - t0
    ok = record(
        3,
        "monotonicity",
        {"gap": worst >= -1e-10, "decomposition": mis <= 1e-10, "runtime": dt < 30.0},
        f"{configs} configurations x 200 pairs, min gap={worst:.3e} mismatch={mis:.2e} time={dt:.1f}s",
    )
    assert ok


def test_criterion_04_linear_oracle():
    """[DERIVED] three solvers vs the oracle, pairwise agreement, and the eps-sweep error; under 10 s."""
    t0 = time.perf_counter()
    g = TorusGrid(1, 64)
    pr = LinProblem.constant_drift(g, 0.3, g.field(lambda x: np.cos(TWO_PI * x)))
    exact = lin_oracle(pr, 1e-2)
    sols = [lin_solve(pr, 1e-2, m)[0] for m in ("variational", "bilinear", "continuation")]
    err = max((u - exact).norm_inf() for u in sols)
    pair = max((a - b).norm_inf() for i, a in enumerate(sols) for b in sols[i + 1 :])
    u0 = lin_oracle(pr)
    sweep = [(lin_solve(pr, e, "continuation")[0] - u0).norm_inf() for e in SCHEDULE]
    dt = time.perf_counter() - t0
    ok = record(
        4,
        "linear-model oracle",
        {
            "oracle": err <= 1e-8,
            "pairwise": pair <= 1e-10,
            "sweep decreasing": all(a > b for a, b in zip(sweep, sweep[1:])),
            "sweep at 1e-4": sweep[-1] <= 1e-3,
            "runtime": dt < 10.0,
        },
        f"oracle={err:.2e} pairwise={pair:.2e} sweep=[{', '.join(f'{e:.3g}' for e in sweep)}] time={dt:.1f}s",
    )
    assert ok


def test_criterion_05_stationary_solves():
    """[DERIVED] continuation to 1e-9 with m > 0, Picard to 1e-7 with m >= 0, L2 agreement 1e-4; under 60 s."""
    t0 = time.perf_counter()
    pr = baseline_problem()
    sc, rc = continuation_solve(pr, RegParams(1e-2, variant="penalized"))
    sp, rp = picard_solve(pr, RegParams(1e-2))
    diff = sc - sp
    l2 = math.sqrt(inner(diff.m, diff.m) + inner(diff.u, diff.u))
    dt = time.perf_counter() - t0
    reached = bool(rc.lambda_path) and rc.lambda_path[-1][0] == 1.0
    agree_applies = min(sc.m.min(), sp.m.min()) >= 1e-2
    ok = record(
        5,
        "stationary solves",
        {
            "continuation": rc.converged and reached and rc.final_residual <= 1e-9 and sc.m.min() > 0,
            "picard": rp.converged and rp.final_residual <= 1e-7 and sp.m.min() >= 0,
            "agreement": (l2 <= 1e-4) if agree_applies else True,
            "runtime": dt < 60.0,
        },
        f"cont res={rc.final_residual:.2e} minM={sc.m.min():.4f}; picard res={rp.final_residual:.2e} "
        f"its={rp.iterations}; L2 diff={l2:.2e} time={dt:.1f}s",
    )
    assert ok


def test_criterion_06_minty_sweep():
    """[PAPER] a priori ratios <= 10, sqrt(eps) mass fit residual <= 0.5, weak VI <= 1e-6 on 32 tests; under 5 min."""
    t0 = time.perf_counter()
    pr = baseline_problem()
    bank = make_test_bank(pr.grid, 32, 0, phi=pr.phi)
    rep = minty_sweep(pr, RegParams(SCHEDULE[0]), SCHEDULE, bank)
    ratios = {name: rep.ratio(name) for name in ("mgm", "mDu", "phiDu")}
    c, resid = rep.mass_fit()
    vi = max(r.max_weak_vi for r in rep.rows)
    dt = time.perf_counter() - t0
    ok = record(
        6,
        "Minty sweep",
        {
            "converged": all(r.status == "converged" for r in rep.rows),
            "ratios": max(ratios.values()) <= 10,
            "mass fit": resid <= 0.5,
            "weak VI": vi <= 1e-6,
            "runtime": dt < 300.0,
        },
        "ratios " + " ".join(f"{k}={v:.3g}" for k, v in ratios.items())
        + f"; fit c={c:.4f} residual={resid:.3f}; max weak VI={vi:.2e} time={dt:.1f}s",
    )
    assert ok


def test_criterion_07_uniqueness():
    """[PAPER] two distinct initializations agree within 1e-6; under 2 min."""
    t0 = time.perf_counter()
    pr = baseline_problem()
    reg = RegParams(1e-2, variant="penalized")
    a, ra = continuation_solve(pr, reg)
    start = make_test_bank(pr.grid, 3, 11, phi=pr.phi)[2]
    b, rb = continuation_solve(pr, reg, initial=start)
    c, rc = picard_solve(pr, RegParams(1e-2), s0=StatePair(pr.grid.zeros(), pr.grid.zeros()))
    d1 = (a - b).norm_inf()
    d2 = (a - c).norm_inf()
    dt = time.perf_counter() - t0
    ok = record(
        7,
        "uniqueness probe",
        {"converged": ra.converged and rb.converged and rc.converged, "continuation starts": d1 <= 1e-6, "runtime": dt < 120.0},
        f"path vs bank start={d1:.2e} (path vs Picard from zero={d2:.2e}) time={dt:.1f}s",
    )
    assert ok


def test_criterion_08_jacobian():
    """[DERIVED] directional FD within 1e-6 relative and eps-coercivity on 50 directions; under 10 s."""
    t0 = time.perf_counter()
    pr = baseline_problem()
    g = pr.grid
    reg = RegParams(1e-2)
    k = reg.order(g.d)
    base = make_test_bank(g, 3, 0, phi=pr.phi)[2]
    rng = np.random.default_rng(8)
    worst, coer = 0.0, math.inf
    h = 1e-5
    for _ in range(50):
        dirn = StatePair(random_trig_field(g, rng, 4), random_trig_field(g, rng, 4))
        J1, J2 = jacobian_apply(pr, reg, 1.0, base, dirn)
        floor = reg.eps * sum(inner(f, f) + inner(laplacian_power(f, k), laplacian_power(f, k)) for f in (dirn.m, dirn.u))
        coer = min(coer, (inner(J1, dirn.m) + inner(J2, dirn.u)) / floor)
        J1, J2 = J1 - apply_reg(dirn.m, reg.eps, k), J2 - apply_reg(dirn.u, reg.eps, k)
        p1, p2 = apply_F(pr, base.axpy(h, dirn))
        q1, q2 = apply_F(pr, base.axpy(-h, dirn))
        err = max(((p1 - q1).scale(0.5 / h) - J1).norm_inf(), ((p2 - q2).scale(0.5 / h) - J2).norm_inf())
        worst = max(worst, err / max(J1.norm_inf(), J2.norm_inf()))
    dt = time.perf_counter() - t0
    ok = record(
        8,
        "Jacobian fidelity",
        {"finite differences": worst <= 1e-6, "coercivity": coer >= 1.0 - 1e-10, "runtime": dt < 10.0},
        f"max FD error={worst:.2e} min <Jd,d>/eps|d|^2={coer:.4f} time={dt:.2f}s",
    )
    assert ok


def test_criterion_09_time_dependent():
    """[PAPER] TD solve, pins, m >= 0, gap over 100 pairs, a priori ratio, weak VI; under 5 min."""
    t0 = time.perf_counter()
    g = SpaceTimeGrid(16, 32)
    s = g.space
    problems = {
        "constant": TDProblem(g, PowerHamiltonian(2.0), Coupling("linear"), g.zeros(), s.constant(1.0), s.zeros()),
        "potential": TDProblem(
            g,
            PowerHamiltonian(2.0),
            Coupling("linear"),
            g.lift(s.field(lambda x: 0.5 * np.cos(TWO_PI * x))),
            s.field(lambda x: 1 + 0.5 * np.cos(TWO_PI * x)),
            s.zeros(),
        ),
    }
    solved = pinned = nonneg = True
    worst_gap, worst_vi, worst_ratio = math.inf, -math.inf, 0.0
    for pr in problems.values():
        cs = ConstraintSets(pr)
        bank = make_td_bank(pr, 200, 9)
        assert all(cs.in_A_star(w) and cs.in_B(v) for w, v in bank)
        Q = QuadraticForm(g, pr.order, 1e-2)
        for i in range(100):
            for form in (None, Q):
                worst_gap = min(worst_gap, td_gap(pr, bank[2 * i], bank[2 * i + 1], form).direct)
        apriori = []
        for eps in (1e-1, 1e-2, 1e-3):
            m, u, rep = td_picard_solve(pr, eps)
            solved &= rep.converged
            pinned &= rep.details["m0_slice_error"] == 0.0 and rep.details["uT_slice_error"] == 0.0
            nonneg &= m.min() >= 0
            dg = td_diagnostics(pr, m, u, bank[:32])
            worst_vi = max(worst_vi, dg.max_weak_vi)
            apriori.append(dg.apriori)
        worst_ratio = max(worst_ratio, max(apriori) / min(apriori))
    dt = time.perf_counter() - t0
    ok = record(
        9,
        "time-dependent",
        {
            "converged": solved,
            "pins exact": pinned,
            "m >= 0": nonneg,
            "gap": worst_gap >= -1e-10,
            "a priori ratio": worst_ratio <= 10,
            "weak VI": worst_vi <= 1e-5,
            "runtime": dt < 300.0,
        },
        f"min gap={worst_gap:.3e} apriori ratio={worst_ratio:.3f} max weak VI={worst_vi:.2e} time={dt:.1f}s",
    )
    assert ok


def test_criterion_10_determinism_and_mutation(tmp_path):
    """[DERIVED] identical config and seed give byte-identical reports; a sign-flipped divergence fails adjointness."""
    t0 = time.perf_counter()
    same = True
    for cmd in ("sweep", "solve-linear", "solve-timedep"):
        for out in ("a", "b"):
            main([cmd, "--seed", "4", "-o", str(tmp_path / out)])
        for ext in ("json", "csv"):
            same &= (tmp_path / "a" / f"{cmd}.{ext}").read_bytes() == (tmp_path / "b" / f"{cmd}.{ext}").read_bytes()
    mutant = run_verify(parse_config({}), divergence_fn=lambda V: divergence(V).scale(-1.0))
    caught = "adjointness" in mutant.document["failed"] and mutant.exit_code != 0
    dt = time.perf_counter() - t0
    ok = record(
        10,
        "determinism and mutation",
        {"byte-identical": same, "mutation caught": caught},
        f"reports identical={same}; mutant failed checks={mutant.document['failed']} time={dt:.1f}s",
    )
    assert ok
