"""
Command-line driver: config ingestion, runs, reports and the verification suite.

Usage::

    torusmfg <command> [--config run.yaml] [--out DIR] [--seed N]

with ``command`` one of ``solve-stationary``, ``sweep``, ``solve-linear``,
``solve-timedep`` or ``verify``. Every run writes ``<stem>.json`` (one
document) and ``<stem>.csv`` (one row per eps) to the output directory,
which defaults to ``$TORUSMFG_OUTPUT_DIR`` or ``./torusmfg-out``.

Exit codes: 0 converged / all checks pass, 1 a verification check failed,
2 invalid config, 3 no convergence, 4 domain failure.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Literal, Sequence

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .grid import GridField, GridVectorField, TorusGrid, apply_reg, divergence, gradient, inner, laplacian_power
from .linmodel import LinProblem, lin_oracle, lin_solve
from .model import (
    Coupling,
    DomainError,
    MFGProblem,
    PowerHamiltonian,
    RegParams,
    StatePair,
    apply_F,
    default_reg_order,
    legendre_verify,
)
from .monotone import make_test_bank, minty_sweep, monotonicity_gap, random_trig_field
from .solvers import continuation_solve, jacobian_apply, solve_obstacle
from .timedep import (
    QuadraticForm,
    SpaceTimeField,
    SpaceTimeGrid,
    TDProblem,
    make_td_bank,
    st_inner,
    td_diagnostics,
    td_gap,
    td_picard_solve,
)

__all__ = [
    "RunConfig",
    "ConfigError",
    "ReportBundle",
    "CheckResult",
    "TABLE_HEADER",
    "load_config",
    "run_command",
    "emit_report",
    "verify_suite",
    "main",
]

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_NOT_CONVERGED, EXIT_DOMAIN = 0, 1, 2, 3, 4
OUTPUT_ENV = "TORUSMFG_OUTPUT_DIR"
TABLE_HEADER = (
    "epsilon",
    "mgm",
    "mDu",
    "phiDu",
    "regQuad",
    "intM",
    "intU",
    "intUM",
    "intH",
    "minM",
    "maxWeakVI",
    "iters",
    "residual",
)
COMMANDS = ("solve-stationary", "sweep", "solve-linear", "solve-timedep", "verify")


# --------------------------------------------------------------------------- config schema


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class FourierTerm(_Model):
    """``cos * cos(2 pi k.x) + sin * sin(2 pi k.x)``."""

    k: list[int]
    cos: float = 0.0
    sin: float = 0.0


class FieldSpec(_Model):
    """Grid-independent field: ``mean + sum of terms``, optionally squared and shifted.

    ``square: true`` replaces ``f`` by ``f^2 + floor``, the positivity
    post-processing used for densities. A bare number is a constant field.
    """

    mean: float = 0.0
    terms: list[FourierTerm] = Field(default_factory=list)
    square: bool = False
    floor: float = 0.0

    @model_validator(mode="before")
    @classmethod
    def _constant(cls, data: Any) -> Any:
        if isinstance(data, (int, float)) and not isinstance(data, bool):
            return {"mean": float(data)}
        return data

    def build(self, grid: TorusGrid) -> GridField:
        vals = np.full(grid.shape, self.mean)
        for t in self.terms:
            # short wavevectors are padded with zeros, so 1-d specs work in 2-d
            phase = 2 * np.pi * sum(c * x for c, x in zip(t.k, grid.coords))
            vals = vals + t.cos * np.cos(phase) + t.sin * np.sin(phase)
        if self.square:
            vals = vals**2 + self.floor
        return grid.field(vals)

    def check_dim(self, d: int) -> str | None:
        for i, t in enumerate(self.terms):
            if not 1 <= len(t.k) <= d:
                return f"terms.{i}.k has {len(t.k)} entries, expected at most d={d}"
        return None


class CouplingCfg(_Model):
    kind: Literal["linear", "power", "entropy"] = "linear"
    gamma: float = 1.0

    @model_validator(mode="after")
    def _gamma(self) -> CouplingCfg:
        if self.kind == "power" and not self.gamma >= 1:
            raise ValueError(f"power coupling needs gamma >= 1, got {self.gamma}")
        return self


def _power_of_two(n: int) -> int:
    if n < 8 or n & (n - 1):
        raise ValueError(f"must be a power of two >= 8, got {n}")
    return n


class ProblemCfg(_Model):
    d: Literal[1, 2] = 1
    n: int = 64
    alpha: float = 2.0
    hamiltonian_scale: list[float] | None = None
    coupling: CouplingCfg = CouplingCfg()
    nu: float = Field(0.0, ge=0.0)
    V: FieldSpec = FieldSpec(terms=[FourierTerm(k=[1], cos=0.5)])
    phi: FieldSpec = FieldSpec(mean=1.0)
    k: int | None = Field(None, ge=1)

    _n = field_validator("n")(_power_of_two)

    @field_validator("alpha")
    @classmethod
    def _alpha(cls, a: float) -> float:
        if not a > 1:
            raise ValueError(f"the Hamiltonian exponent needs α > 1 (Assumption 2), got {a}")
        return a

    @model_validator(mode="after")
    def _dims(self) -> ProblemCfg:
        for name in ("V", "phi"):
            msg = getattr(self, name).check_dim(self.d)
            if msg:
                raise ValueError(f"{name}: {msg}")
        if self.hamiltonian_scale is not None and len(self.hamiltonian_scale) != self.d:
            raise ValueError(f"hamiltonian_scale needs {self.d} entries")
        return self


def _eps_value(e: float) -> float:
    if not 0 < e < 1:
        raise ValueError(f"eps must lie in (0, 1), got {e}")
    return e


def _decreasing(s: list[float]) -> list[float]:
    for e in s:
        _eps_value(e)
    if any(b >= a for a, b in zip(s, s[1:])):
        raise ValueError(f"schedule must be strictly decreasing, got {s}")
    return s


class SolverCfg(_Model):
    method: Literal["continuation", "picard"] = "continuation"
    eps: float = 1e-2
    tol: float | None = Field(None, gt=0)
    bank_size: int = Field(32, ge=1)

    _e = field_validator("eps")(_eps_value)


class SweepCfg(_Model):
    schedule: list[float] = [1e-1, 1e-2, 1e-3, 1e-4]
    warm_start: bool = True

    _s = field_validator("schedule")(_decreasing)


class LinearCfg(_Model):
    b: list[float] = [0.3]
    f: FieldSpec = FieldSpec(terms=[FourierTerm(k=[1], cos=1.0)])
    eps: float = 1e-2
    methods: list[Literal["variational", "bilinear", "continuation"]] = ["variational", "bilinear", "continuation"]
    schedule: list[float] = [1e-1, 1e-2, 1e-3, 1e-4]
    tol: float = Field(1e-12, gt=0)

    _e = field_validator("eps")(_eps_value)
    _s = field_validator("schedule")(_decreasing)


class TimedepCfg(_Model):
    Nt: int = Field(16, ge=8)
    Nx: int = 32
    T: float = Field(1.0, gt=0)
    k: int | None = Field(None, ge=1)
    m0: FieldSpec = FieldSpec(mean=1.0)
    uT: FieldSpec = FieldSpec()
    V: FieldSpec = FieldSpec()
    schedule: list[float] = [1e-1, 1e-2, 1e-3]
    bank_size: int = Field(32, ge=1)
    tol: float = Field(1e-9, gt=0)
    max_iter: int = Field(500, ge=1)

    _n = field_validator("Nx")(_power_of_two)
    _s = field_validator("schedule")(_decreasing)


class VerifyCfg(_Model):
    gap_pairs: int = Field(50, ge=1)
    td_pairs: int = Field(50, ge=1)
    fd_directions: int = Field(50, ge=1)


class OutputCfg(_Model):
    dir: str | None = None
    stem: str | None = None


class RunConfig(_Model):
    schema_version: Literal[1] = 1
    seed: int = 0
    problem: ProblemCfg = ProblemCfg()
    solver: SolverCfg = SolverCfg()
    sweep: SweepCfg = SweepCfg()
    linear: LinearCfg = LinearCfg()
    timedep: TimedepCfg = TimedepCfg()
    verify: VerifyCfg = VerifyCfg()
    output: OutputCfg = OutputCfg()

    @model_validator(mode="after")
    def _cross(self) -> RunConfig:
        d = self.problem.d
        if len(self.linear.b) not in (1, d):
            raise ValueError(f"linear.b needs 1 or {d} entries for d={d}")
        for name in ("m0", "uT", "V"):
            msg = getattr(self.timedep, name).check_dim(d)
            if msg:
                raise ValueError(f"timedep.{name}: {msg}")
        msg = self.linear.f.check_dim(d)
        if msg:
            raise ValueError(f"linear.f: {msg}")
        return self


class ConfigError(ValueError):
    """Invalid configuration; ``issues`` holds ``(field path, message)`` pairs."""

    def __init__(self, issues: list[tuple[str, str]]) -> None:
        self.issues = issues
        super().__init__("; ".join(f"{p}: {m}" for p, m in issues))


def _issues(err: ValidationError) -> list[tuple[str, str]]:
    out = []
    for e in err.errors():
        path = ".".join(str(p) for p in e["loc"]) or "<root>"
        msg = e["msg"].removeprefix("Value error, ")
        out.append((path, msg))
    return out


def parse_config(data: dict[str, Any] | None) -> RunConfig:
    try:
        return RunConfig.model_validate(data or {})
    except ValidationError as err:
        raise ConfigError(_issues(err)) from None


def load_config(path: str | os.PathLike[str] | None) -> RunConfig:
    """Read and validate a YAML config; ``None`` gives the defaults."""
    if path is None:
        return parse_config({})
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as err:
        raise ConfigError([("<file>", f"not valid YAML: {err}")]) from None
    if data is not None and not isinstance(data, dict):
        raise ConfigError([("<root>", "config must be a mapping")])
    return parse_config(data)


# --------------------------------------------------------------------------- builders


def _positive(f: GridField, path: str) -> GridField:
    if f.min() <= 0:
        raise ConfigError([(path, f"field must be positive at every node, min is {f.min():.6g}")])
    return f


def build_problem(cfg: RunConfig) -> MFGProblem:
    p = cfg.problem
    grid = TorusGrid(p.d, p.n)
    scale = None if p.hamiltonian_scale is None else tuple(p.hamiltonian_scale)
    return MFGProblem(
        grid=grid,
        hamiltonian=PowerHamiltonian(p.alpha, scale),
        coupling=Coupling(p.coupling.kind, p.coupling.gamma),
        V=p.V.build(grid),
        phi=_positive(p.phi.build(grid), "problem.phi"),
        nu=p.nu,
    )


def build_td_problem(cfg: RunConfig) -> TDProblem:
    p, t = cfg.problem, cfg.timedep
    grid = SpaceTimeGrid(t.Nt, t.Nx, p.d, t.T)
    space = grid.space
    scale = None if p.hamiltonian_scale is None else tuple(p.hamiltonian_scale)
    return TDProblem(
        grid=grid,
        hamiltonian=PowerHamiltonian(p.alpha, scale),
        coupling=Coupling(p.coupling.kind, p.coupling.gamma),
        V=grid.lift(t.V.build(space)),
        m0=_positive(t.m0.build(space), "timedep.m0"),
        uT=t.uT.build(space),
        k=t.k,
    )


def build_lin_problem(cfg: RunConfig) -> LinProblem:
    grid = TorusGrid(cfg.problem.d, cfg.problem.n)
    b = cfg.linear.b
    return LinProblem.constant_drift(grid, b[0] if len(b) == 1 else tuple(b), cfg.linear.f.build(grid))


# --------------------------------------------------------------------------- reports


@dataclass
class ReportBundle:
    """One report document plus per-eps table rows (``TABLE_HEADER`` keys)."""

    document: dict[str, Any]
    rows: list[dict[str, float | int]] = field(default_factory=list)
    exit_code: int = EXIT_OK


def _fmt_float(x: float) -> str:
    if math.isnan(x):
        return '"nan"'
    if math.isinf(x):
        return '"inf"' if x > 0 else '"-inf"'
    return format(x, ".17g")


def _json(obj: Any, indent: int = 0) -> str:
    """JSON text with floats at 17 significant digits and keys in insertion order."""
    pad = "  " * (indent + 1)
    end = "  " * indent
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{_json(str(k))}: {_json(v, indent + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        seq = list(obj)
        if not seq:
            return "[]"
        return "[\n" + ",\n".join(pad + _json(v, indent + 1) for v in seq) + "\n" + end + "]"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _fmt_float(float(obj))
    if isinstance(obj, str):
        import json

        return json.dumps(obj, ensure_ascii=False)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _cell(v: float | int) -> str:
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    x = float(v)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return format(x, ".17g")


def table_text(rows: Sequence[dict[str, float | int]]) -> str:
    lines = [",".join(TABLE_HEADER)]
    for r in rows:
        lines.append(",".join(_cell(r.get(c, float("nan"))) for c in TABLE_HEADER))
    return "\n".join(lines) + "\n"


def output_dir(cfg: RunConfig, override: str | None = None) -> Path:
    if override:
        return Path(override)
    if cfg.output.dir:
        return Path(cfg.output.dir)
    return Path(os.environ.get(OUTPUT_ENV, "torusmfg-out"))


def emit_report(bundle: ReportBundle, directory: str | os.PathLike[str], stem: str) -> tuple[Path, Path]:
    """Write ``<stem>.json`` and ``<stem>.csv``; filesystem errors propagate unchanged."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    doc = d / f"{stem}.json"
    tab = d / f"{stem}.csv"
    doc.write_text(_json(bundle.document) + "\n")
    tab.write_text(table_text(bundle.rows))
    return doc, tab


# --------------------------------------------------------------------------- commands


def _sweep_rows(report) -> list[dict[str, float | int]]:
    rows = []
    for r in report.rows:
        a = r.apriori
        rows.append(
            {
                "epsilon": r.eps,
                "mgm": a.mgm,
                "mDu": a.mDu,
                "phiDu": a.phiDu,
                "regQuad": a.regQuad,
                "intM": a.intM,
                "intU": a.intU,
                "intUM": a.intUM,
                "intH": a.intH,
                "minM": a.minM,
                "maxWeakVI": r.max_weak_vi,
                "iters": r.iterations,
                "residual": r.final_residual,
            }
        )
    return rows


def _run_sweep(cfg: RunConfig, schedule: Sequence[float]) -> ReportBundle:
    problem = build_problem(cfg)
    bank = make_test_bank(problem.grid, cfg.solver.bank_size, cfg.seed, phi=problem.phi)
    rep = minty_sweep(
        problem,
        RegParams(schedule[0], cfg.problem.k),
        schedule,
        bank,
        solver=cfg.solver.method,
        warm_start=cfg.sweep.warm_start,
        tol=cfg.solver.tol,
    )
    rows = _sweep_rows(rep)
    ok = all(r.status == "converged" for r in rep.rows)
    doc: dict[str, Any] = {"status": "converged" if ok else "maxIter", "solver": cfg.solver.method}
    doc["rows"] = [
        {
            **row,
            "status": r.status,
            "massDefect": r.mass_defect,
            "penMass": list(r.apriori.penMass),
            "violations": list(r.apriori.violations),
            "lambdaPath": [list(p) for p in r.report.lambda_path],
        }
        for row, r in zip(rows, rep.rows)
    ]
    if len(rep.rows) > 1:
        c, resid = rep.mass_fit()
        doc["ratios"] = {name: rep.ratio(name) for name in ("mgm", "mDu", "phiDu")}
        doc["massFit"] = {"c": c, "relativeResidual": resid}
        doc["cauchy"] = rep.cauchy
    return ReportBundle(doc, rows, EXIT_OK if ok else EXIT_NOT_CONVERGED)


def run_solve_stationary(cfg: RunConfig) -> ReportBundle:
    """A one-point sweep at ``solver.eps``."""
    return _run_sweep(cfg, [cfg.solver.eps])


def run_sweep(cfg: RunConfig) -> ReportBundle:
    return _run_sweep(cfg, cfg.sweep.schedule)


def run_solve_linear(cfg: RunConfig) -> ReportBundle:
    problem = build_lin_problem(cfg)
    lc = cfg.linear
    exact = lin_oracle(problem, lc.eps)
    sols = {}
    doc: dict[str, Any] = {"eps": lc.eps, "methods": {}}
    ok = True
    for meth in lc.methods:
        u, rep = lin_solve(problem, lc.eps, meth, tol=lc.tol)
        sols[meth] = u
        ok &= rep.converged
        doc["methods"][meth] = {
            "status": rep.status,
            "iterations": rep.iterations,
            "residual": rep.final_residual,
            "oracleError": (u - exact).norm_inf(),
        }
    names = list(sols)
    doc["pairwise"] = {
        f"{a}|{b}": (sols[a] - sols[b]).norm_inf() for i, a in enumerate(names) for b in names[i + 1 :]
    }
    u0 = lin_oracle(problem)
    rows = []
    errs = []
    for eps in lc.schedule:
        u, rep = lin_solve(problem, eps, "continuation", tol=lc.tol)
        ok &= rep.converged
        errs.append((u - u0).norm_inf())
        row: dict[str, float | int] = {c: float("nan") for c in TABLE_HEADER}
        row.update(epsilon=eps, intU=float(problem.grid.cell_volume * u.values.sum()), iters=rep.iterations)
        row["residual"] = rep.final_residual
        rows.append(row)
    doc["sweepError"] = errs
    doc["status"] = "converged" if ok else "maxIter"
    return ReportBundle(doc, rows, EXIT_OK if ok else EXIT_NOT_CONVERGED)


def run_solve_timedep(cfg: RunConfig) -> ReportBundle:
    problem = build_td_problem(cfg)
    tc = cfg.timedep
    bank = make_td_bank(problem, tc.bank_size, cfg.seed)
    rows, per_eps = [], []
    ok = True
    for eps in tc.schedule:
        m, u, rep = td_picard_solve(problem, eps, tol=tc.tol, max_iter=tc.max_iter)
        ok &= rep.converged
        dg = td_diagnostics(problem, m, u, bank)
        Q = QuadraticForm(problem.grid, problem.order, eps)
        rows.append(
            {
                "epsilon": eps,
                "mgm": dg.mgm,
                "mDu": dg.mDu,
                "phiDu": float("nan"),
                "regQuad": Q(m, m) + Q(u, u),
                "intM": dg.intM,
                "intU": dg.intU,
                "intUM": dg.intUM,
                "intH": dg.intH,
                "minM": dg.minM,
                "maxWeakVI": dg.max_weak_vi,
                "iters": rep.iterations,
                "residual": rep.final_residual,
            }
        )
        per_eps.append(
            {
                "epsilon": eps,
                "status": rep.status,
                "apriori": dg.apriori,
                "DuAlpha": dg.Du_alpha,
                "sliceMass": dg.slice_mass,
                "meanAdjustDefect": dg.mean_adjust_defect,
                "kkt": {k: v for k, v in rep.details.items()},
            }
        )
    vals = [r["apriori"] for r in per_eps]
    doc = {
        "status": "converged" if ok else "maxIter",
        "order": problem.order,
        "rows": per_eps,
        "aprioriRatio": max(vals) / min(vals) if min(vals) > 0 else float("inf"),
    }
    return ReportBundle(doc, rows, EXIT_OK if ok else EXIT_NOT_CONVERGED)


# --------------------------------------------------------------------------- verification suite


@dataclass(frozen=True)
class CheckResult:
    """``value`` is compared with ``threshold``; ``margin > 0`` means pass with room."""

    name: str
    passed: bool
    value: float
    threshold: float
    margin: float
    detail: str = ""


def _upper(name: str, value: float, threshold: float, detail: str = "") -> CheckResult:
    return CheckResult(name, bool(value <= threshold), value, threshold, threshold - value, detail)


def _lower(name: str, value: float, threshold: float, detail: str = "") -> CheckResult:
    return CheckResult(name, bool(value >= threshold), value, threshold, value - threshold, detail)


def _white(grid: TorusGrid, rng: np.random.Generator) -> GridField:
    return grid.field(rng.standard_normal(grid.shape))


def _check_operators(seed: int, div: Callable[[GridVectorField], GridField]) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    adj = comp = psd = 0.0
    for d, n in ((1, 64), (2, 32)):
        g = TorusGrid(d, n)
        for _ in range(5):
            f = _white(g, rng)
            V = GridVectorField(tuple(_white(g, rng) for _ in range(d)))
            Df = gradient(f)
            a = inner(div(V), f)
            b = sum(inner(V[i], Df[i]) for i in range(d))
            adj = max(adj, abs(a + b) / max(abs(a) + abs(b), 1e-300))
            # the Nyquist row is outside the range of grad, so compare on band-limited fields
            q = random_trig_field(g, rng, n // 4)
            lhs, rhs = div(gradient(q)), laplacian_power(q, 1)
            comp = max(comp, (lhs - rhs).norm_inf() / max(rhs.norm_inf(), 1e-300))
            k = default_reg_order(d)
            val = inner(laplacian_power(f, 2 * k), f)
            psd = max(psd, -val / max(abs(val), 1e-300))
    return [
        _upper("adjointness", adj, 1e-12, "|<div V, f> + <V, grad f>| relative, d=1 n=64 and d=2 n=32"),
        _upper("div-grad-composition", comp, 1e-12, "|div grad f - Lap f| relative"),
        _upper("bilaplacian-psd", psd, 1e-12, "negative part of <Lap^{2k} f, f> relative"),
    ]


def _check_legendre() -> CheckResult:
    worst = 0.0
    rng = np.random.default_rng(1)
    for alpha in (1.5, 2.0, 3.0):
        spec = PowerHamiltonian(alpha)
        for p in rng.uniform(-1.5, 1.5, size=4):
            chk = legendre_verify(spec, [float(p)], v_box=6.0, grid_n=20001)
            worst = max(worst, chk.gap)
    return _upper("legendre", worst, 1e-3, "brute-force sup vs closed form")


def _check_gap(cfg: RunConfig) -> list[CheckResult]:
    worst, mis = math.inf, 0.0
    count = 0
    grid = TorusGrid(1, 32)
    for alpha in (1.5, 2.0, 3.0):
        for cp in (Coupling("linear"), Coupling("power", 2.0)):
            for nu in (0.0, 1.0):
                problem = MFGProblem(grid, PowerHamiltonian(alpha), cp, grid.field(lambda x: np.cos(2 * np.pi * x)), grid.constant(1.0), nu)
                bank = make_test_bank(grid, 2 * cfg.verify.gap_pairs, cfg.seed)
                for variant in ("plain", "penalized"):
                    reg = RegParams(1e-2, None, variant)
                    for i in range(cfg.verify.gap_pairs):
                        gp = monotonicity_gap(problem, bank[2 * i], bank[2 * i + 1], reg, lam=0.5)
                        g0 = monotonicity_gap(problem, bank[2 * i], bank[2 * i + 1])
                        for gap in (gp, g0):
                            worst = min(worst, gap.direct)
                            mis = max(mis, gap.mismatch)
                        count += 1
    return [
        _lower("gap-nonnegativity", worst, -1e-10, f"{count} pairs over alpha, coupling, nu, variant"),
        _upper("gap-decomposition", mis, 1e-10, "direct vs decomposed, relative"),
    ]


def _check_kkt(seed: int) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for d, n in ((1, 64), (2, 16)):
        g = TorusGrid(d, n)
        for _ in range(3):
            f1 = random_trig_field(g, rng, 3).scale(0.05)
            sol = solve_obstacle(f1, 1e-2, default_reg_order(d))
            viol = max(-sol.min_w, -sol.min_r, abs(sol.complementarity), 0.0)
            worst = max(worst, viol if sol.status == "converged" else math.inf)
    return _upper("obstacle-kkt", worst, 1e-9, "max of -min w, -min r, |<r, w>|")


def _check_jacobian(cfg: RunConfig) -> list[CheckResult]:
    problem = build_problem(cfg)
    grid = problem.grid
    rng = np.random.default_rng(cfg.seed)
    reg = RegParams(cfg.solver.eps, cfg.problem.k, "plain")
    base = make_test_bank(grid, 3, cfg.seed, phi=problem.phi)[2]
    k = reg.order(grid.d)
    worst, coer = 0.0, math.inf
    for _ in range(cfg.verify.fd_directions):
        dirn = StatePair(random_trig_field(grid, rng, 4), random_trig_field(grid, rng, 4))
        J1, J2 = jacobian_apply(problem, reg, 1.0, base, dirn)
        floor = reg.eps * sum(
            inner(f, f) + inner(laplacian_power(f, k), laplacian_power(f, k)) for f in (dirn.m, dirn.u)
        )
        coer = min(coer, (inner(J1, dirn.m) + inner(J2, dirn.u)) / floor)
        # the regularization is linear and its size swamps central differences, so drop it
        J1, J2 = J1 - apply_reg(dirn.m, reg.eps, k), J2 - apply_reg(dirn.u, reg.eps, k)
        h = 1e-5
        p1, p2 = apply_F(problem, base.axpy(h, dirn))
        q1, q2 = apply_F(problem, base.axpy(-h, dirn))
        fd1, fd2 = (p1 - q1).scale(0.5 / h), (p2 - q2).scale(0.5 / h)
        err = max((fd1 - J1).norm_inf(), (fd2 - J2).norm_inf())
        worst = max(worst, err / max(J1.norm_inf(), J2.norm_inf(), 1e-300))
    return [
        _upper("jacobian-fd", worst, 1e-6, "central differences of the nonlinear part, relative"),
        _lower("jacobian-coercivity", coer, 1.0 - 1e-10, "<J d, d> / eps(|d|^2 + |Lap^k d|^2)"),
    ]


def _check_oracle(cfg: RunConfig) -> list[CheckResult]:
    grid = TorusGrid(1, 64)
    problem = LinProblem.constant_drift(grid, 0.3, grid.field(lambda x: np.cos(2 * np.pi * x)))
    exact = lin_oracle(problem, 1e-2)
    sols = [lin_solve(problem, 1e-2, m)[0] for m in ("variational", "bilinear", "continuation")]
    err = max((u - exact).norm_inf() for u in sols)
    pair = max((a - b).norm_inf() for i, a in enumerate(sols) for b in sols[i + 1 :])
    return [
        _upper("oracle-equivalence", err, 1e-8, "three linear-model solvers vs closed form"),
        _upper("oracle-pairwise", pair, 1e-10, "pairwise agreement of the three solvers"),
    ]


def _check_uniqueness(cfg: RunConfig) -> CheckResult:
    problem = build_problem(cfg)
    reg = RegParams(cfg.solver.eps, cfg.problem.k, "penalized")
    a, ra = continuation_solve(problem, reg)
    start = make_test_bank(problem.grid, 3, cfg.seed + 1, phi=problem.phi)[2]
    b, rb = continuation_solve(problem, reg, initial=start)
    diff = (a - b).norm_inf() if (ra.converged and rb.converged) else math.inf
    return _upper("uniqueness-probe", diff, 1e-6, "continuation path vs Newton from a bank state")


def _check_timedep(cfg: RunConfig) -> list[CheckResult]:
    problem = build_td_problem(cfg)
    g = problem.grid
    eps = cfg.timedep.schedule[min(1, len(cfg.timedep.schedule) - 1)]
    Q = QuadraticForm(g, problem.order, eps)
    rng = np.random.default_rng(cfg.seed)
    sym, coer = 0.0, math.inf
    for i in range(10):
        # constants attain the bound Q(v, v) = eps <v, v>
        a = g.field(np.full(g.shape, 1.0 + i)) if i < 2 else SpaceTimeField(g, rng.standard_normal(g.shape))
        b = SpaceTimeField(g, rng.standard_normal(g.shape))
        qab, qba = Q(a, b), Q(b, a)
        sym = max(sym, abs(qab - qba) / max(abs(qab), 1e-300))
        coer = min(coer, Q(a, a) / (eps * st_inner(a, a)))
    bank = make_td_bank(problem, 2 * cfg.verify.td_pairs, cfg.seed)
    worst = math.inf
    for i in range(cfg.verify.td_pairs):
        for form in (None, Q):
            worst = min(worst, td_gap(problem, bank[2 * i], bank[2 * i + 1], form).direct)
    m, u, rep = td_picard_solve(problem, eps, tol=cfg.timedep.tol, max_iter=cfg.timedep.max_iter)
    dg = td_diagnostics(problem, m, u, bank[: cfg.timedep.bank_size])
    pinned = max(rep.details["m0_slice_error"], rep.details["uT_slice_error"])
    return [
        _upper("td-form-symmetry", sym, 1e-12, "|Q(a,b) - Q(b,a)| relative"),
        _lower("td-form-coercivity", coer, 1.0 - 1e-12, "Q(v,v) / (eps <v,v>)"),
        _lower("td-gap-nonnegativity", worst, -1e-10, "F and F_eps over bank pairs"),
        _upper("td-solve", 0.0 if rep.converged and pinned == 0.0 and m.min() >= 0 else 1.0, 0.0, f"status {rep.status}"),
        _upper("td-weak-vi", dg.max_weak_vi, 1e-5, "max over the bank, mean-adjusted u"),
        _upper("td-mean-adjustment", dg.mean_adjust_defect, 1e-10, "<e2(w, v), <u>> over the bank"),
    ]


def verify_suite(
    cfg: RunConfig, divergence_fn: Callable[[GridVectorField], GridField] = divergence
) -> list[CheckResult]:
    """Run every invariant check. ``divergence_fn`` is a hook for mutation tests."""
    checks: list[CheckResult] = []
    checks += _check_operators(cfg.seed, divergence_fn)
    checks.append(_check_legendre())
    checks += _check_gap(cfg)
    checks.append(_check_kkt(cfg.seed))
    checks += _check_jacobian(cfg)
    checks += _check_oracle(cfg)
    checks.append(_check_uniqueness(cfg))
    checks += _check_timedep(cfg)
    return checks


def run_verify(cfg: RunConfig, divergence_fn: Callable[[GridVectorField], GridField] = divergence) -> ReportBundle:
    checks = verify_suite(cfg, divergence_fn)
    failed = [c.name for c in checks if not c.passed]
    doc = {
        "status": "pass" if not failed else "fail",
        "failed": failed,
        "checks": [
            {"name": c.name, "passed": c.passed, "value": c.value, "threshold": c.threshold, "margin": c.margin, "detail": c.detail}
            for c in checks
        ],
    }
    return ReportBundle(doc, [], EXIT_OK if not failed else EXIT_CHECK_FAILED)


_RUNNERS: dict[str, Callable[[RunConfig], ReportBundle]] = {
    "solve-stationary": run_solve_stationary,
    "sweep": run_sweep,
    "solve-linear": run_solve_linear,
    "solve-timedep": run_solve_timedep,
    "verify": run_verify,
}


def run_command(command: str, cfg: RunConfig) -> ReportBundle:
    """Run ``command``; domain failures become a bundle with exit code 4."""
    if command not in _RUNNERS:
        raise ValueError(f"unknown command {command!r}; expected one of {', '.join(COMMANDS)}")
    try:
        bundle = _RUNNERS[command](cfg)
    except DomainError as err:
        bundle = ReportBundle({"status": "domainFailure", "error": str(err)}, [], EXIT_DOMAIN)
    bundle.document = {
        "schema_version": 1,
        "command": command,
        "seed": cfg.seed,
        **bundle.document,
        "config": cfg.model_dump(mode="json"),
    }
    return bundle


# --------------------------------------------------------------------------- entry point


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="torusmfg", description=__doc__.split("\n\n")[0].strip())
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", "-c", help="YAML run config (defaults if omitted)")
    ap.add_argument("--out", "-o", help=f"output directory (default ${OUTPUT_ENV} or ./torusmfg-out)")
    ap.add_argument("--seed", type=int, help="override the config seed")
    ap.add_argument("--stem", help="file stem for the report (default: the command name)")
    ap.add_argument("--verbose", "-v", action="store_true")
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = parse_config({**cfg.model_dump(mode="json"), "seed": args.seed})
        bundle = run_command(args.command, cfg)
    except ConfigError as err:
        for path, msg in err.issues:
            print(f"config error at {path}: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    stem = args.stem or cfg.output.stem or args.command
    doc, tab = emit_report(bundle, output_dir(cfg, args.out), stem)
    if args.command == "verify":
        for c in bundle.document["checks"]:
            mark = "PASS" if c["passed"] else "FAIL"
            print(f"{mark} {c['name']:<22} value={c['value']:.3e} threshold={c['threshold']:.1e} margin={c['margin']:.3e}")
        if bundle.exit_code:
            print("failed checks: " + ", ".join(bundle.document["failed"]), file=sys.stderr)
    else:
        print(f"{args.command}: {bundle.document.get('status')} -> {doc}, {tab}")
    return bundle.exit_code


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(main())
