"""Command-line experiments: ``weak-type``, ``sparse-verify``, ``riesz-mc`` and ``bounds-sweep``.

Each command reads one JSON config, writes ``report.csv`` (plus auxiliary
tables), ``summary.txt`` with verdicts and ``timing.json``, and exits with
0 (pass), 2 (config error), 3 (structural warning: truncation or censoring)
or 4 (a statistical or numerical gate failed).  Only ``timing.json``
depends on the machine; every other file is a function of the config.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from pathlib import Path
from typing import Annotated, List, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .bellman import validate_hypotheses, weak_type_table
from .errors import RejectedInstanceError
from .ensemble import EnsembleSpec, structural_invariants
from .paths import DEFAULT_SPEED, TimeGrid
from .riesz_mc import (DEFAULT_CENSOR_BOUND, DEFAULT_MAX_STEPS, DEFAULT_SKIP_HEIGHT,
                       DEFAULT_T_MAX, mc_riesz_many, weighted_background)
from .sparse import (RESIDUAL_MASS_LIMIT, WeightedSample, check_domination, check_sparsity,
                     eval_sparse_operator, filtration_characteristic_estimate,
                     weighted_maximal_check)
from .torus import (TorusGrid, builtin_function, builtin_weight, check_bounds,
                    flow_characteristic, read_grid_csv)

EXIT_PASS, EXIT_CONFIG, EXIT_STRUCTURAL, EXIT_GATE = 0, 2, 3, 4

PosFloat = Annotated[float, Field(gt=0)]
PosInt = Annotated[int, Field(gt=0)]
TWO_PI = 2 * math.pi


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class EnsembleConfig(_Strict):
    d: PosInt = 1
    x0: PosFloat = 1.0
    transform: Literal["constant-unit", "rotating", "random-ball"] = "constant-unit"
    v_kind: Literal["zero", "scaled-identity", "random-gram"] = "zero"
    c: Annotated[float, Field(le=0)] = -1.0
    v_scale: PosFloat = 1.0
    v_omega: float = TWO_PI
    omega: float = TWO_PI
    speed: PosFloat = DEFAULT_SPEED

    def spec(self, grid: TimeGrid, **kw) -> EnsembleSpec:
        return EnsembleSpec(grid, self.d, self.x0, self.transform, self.v_kind, self.c,
                            self.v_scale, self.v_omega, self.omega, self.speed, **kw)

    @property
    def label(self) -> str:
        return f"d{self.d}-{self.transform}-{self.v_kind}"


DEFAULT_ENSEMBLES = (
    EnsembleConfig(d=1, transform="constant-unit", v_kind="zero"),
    EnsembleConfig(d=1, transform="rotating", v_kind="scaled-identity", c=-1.0),
    EnsembleConfig(d=3, transform="rotating", v_kind="scaled-identity", c=-1.0),
    EnsembleConfig(d=3, transform="random-ball", v_kind="random-gram"),
)


class _Base(_Strict):
    seed: Annotated[int, Field(ge=0)]


class _EnsembleRun(_Base):
    n_paths: PosInt = 100_000
    t_max: PosFloat = 16.0
    n_steps: PosInt = 10_000
    ensembles: Annotated[List[EnsembleConfig], Field(min_length=1)] = list(DEFAULT_ENSEMBLES)
    n_sigma: PosFloat = 3.0

    @field_validator("ensembles")
    @classmethod
    def _unique(cls, v):
        labels = [e.label for e in v]
        if len(set(labels)) != len(labels):
            raise ValueError("ensembles must differ in (d, transform, v_kind)")
        return v


class WeakTypeConfig(_EnsembleRun):
    lambdas: Annotated[List[PosFloat], Field(min_length=1)] = [0.5, 1.0, 2.0, 4.0, 8.0]


class SparseConfig(_EnsembleRun):
    threshold: PosFloat = 4.0
    domination_constant: PosFloat = 8.0
    max_levels: PosInt = 64
    slack: PosFloat = 0.05
    refine: bool = True
    refined_slack: PosFloat = 0.02
    levels: Annotated[List[Annotated[int, Field(ge=-1)]], Field(min_length=1)] = list(range(-1, 7))


class BuiltinRef(_Strict):
    builtin: str
    seed: Annotated[int, Field(ge=0)] = 0


class CsvRef(_Strict):
    csv: str


FunctionRef = Union[str, BuiltinRef, CsvRef]


class RieszConfig(_Base):
    n_dims: Literal[1, 2] = 1
    m_cells: PosInt = 64
    grid_m: PosInt = 64
    y0_ladder: Annotated[List[PosFloat], Field(min_length=1)] = [1.0, 2.0, 4.0]
    n_paths: PosInt = 1_000_000
    dt: Optional[PosFloat] = None
    functions: Annotated[List[FunctionRef], Field(min_length=1)] = ["cos", "sin"]
    tolerance: PosFloat = 0.1
    gate_factor: PosFloat = 2.0
    censor_bound: PosFloat = DEFAULT_CENSOR_BOUND
    t_max: PosFloat = DEFAULT_T_MAX
    skip_height: PosFloat = DEFAULT_SKIP_HEIGHT
    max_steps: PosInt = DEFAULT_MAX_STEPS
    bridge: bool = False


class WeightRef(_Strict):
    kind: Literal["unit", "cos-weight", "gaussian-bump"] = "unit"
    a: float = 0.5
    width: PosFloat = 0.5

    @property
    def label(self) -> str:
        return {"unit": "1", "cos-weight": f"1+{self.a:g}cos",
                "gaussian-bump": f"1+bump({self.width:g})"}[self.kind]

    def build(self, grid: TorusGrid):
        return builtin_weight(self.kind, grid, a=self.a, width=self.width)


PGrid = Annotated[List[Annotated[float, Field(gt=1)]], Field(min_length=1)]


class WeightedZConfig(_Strict):
    enabled: bool = True
    n_paths: PosInt = 20_000
    y0: PosFloat = 1.0
    dt: Optional[PosFloat] = None
    p_grid: PGrid = [1.5, 2.0, 3.0]
    g: WeightRef = WeightRef(kind="gaussian-bump")
    C: Optional[PosFloat] = None
    stability_tol: PosFloat = 0.1
    # the grid sup can sit slightly below the sup over visited states
    filtration_rtol: PosFloat = 0.01


class BoundsConfig(_Base):
    p_grid: PGrid = [1.25, 1.5, 2.0, 3.0, 6.0]
    functions: Annotated[List[FunctionRef], Field(min_length=1)] = ["cos", "mix3", "random-band"]
    weights: Annotated[List[WeightRef], Field(min_length=1)] = [
        WeightRef(kind="unit"), WeightRef(kind="cos-weight", a=0.5),
        WeightRef(kind="cos-weight", a=0.9)]
    n_dims: Annotated[List[Literal[1, 2]], Field(min_length=1)] = [1, 2]
    m: PosInt = 64
    weighted_z: WeightedZConfig = WeightedZConfig()


CONFIGS = {"weak-type": WeakTypeConfig, "sparse-verify": SparseConfig,
           "riesz-mc": RieszConfig, "bounds-sweep": BoundsConfig}


class ConfigError(Exception):
    pass


def load_config(command: str, path) -> BaseModel:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    try:
        return CONFIGS[command].model_validate(raw)
    except ValidationError as e:
        raise ConfigError(str(e)) from e


# -- reports ---------------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return "%.17g" % float(v)
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def write_table(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


class Report:
    """Verdicts plus timing; ``kind`` is ``gate`` or ``structural``."""

    def __init__(self, command: str, config: BaseModel):
        self.command = command
        self.config = config
        self.verdicts: list = []
        self.notes: list = []
        self.t0 = time.perf_counter()
        self.work: dict = {}

    def verdict(self, name: str, passed: bool, detail: str = "", kind: str = "gate"):
        self.verdicts.append((name, bool(passed), detail, kind))

    @property
    def exit_code(self) -> int:
        if any(not ok and kind == "structural" for _, ok, _, kind in self.verdicts):
            return EXIT_STRUCTURAL
        if any(not ok for _, ok, _, _ in self.verdicts):
            return EXIT_GATE
        return EXIT_PASS

    def write(self, out: Path) -> int:
        code = self.exit_code
        lines = [f"command: {self.command}",
                 "config: " + json.dumps(self.config.model_dump(mode="json"), sort_keys=True)]
        lines += [f"note: {n}" for n in self.notes]
        for name, ok, detail, kind in self.verdicts:
            tag = "PASS" if ok else ("WARN" if kind == "structural" else "FAIL")
            lines.append(f"{tag} {name}" + (f": {detail}" if detail else ""))
        lines.append(f"exit: {code}")
        (out / "summary.txt").write_text("\n".join(lines) + "\n")
        wall = time.perf_counter() - self.t0
        timing = {"wall_seconds": wall, **self.work}
        if "paths" in self.work and wall > 0:
            timing["paths_per_second"] = self.work["paths"] / wall
        (out / "timing.json").write_text(json.dumps(timing, indent=2, sort_keys=True) + "\n")
        return code


# -- commands ----------------------------------------------------------------------------

def run_weak_type(cfg: WeakTypeConfig, out: Path, threads: int = 1) -> Report:
    rep = Report("weak-type", cfg)
    grid = TimeGrid(cfg.t_max, cfg.n_steps)
    rows = []
    for e in cfg.ensembles:
        res = e.spec(grid).run(cfg.n_paths, cfg.seed, threads)
        try:
            validate_hypotheses(res)
        except RejectedInstanceError as err:
            rep.verdict(f"{e.label} hypotheses", False, str(err))
            continue
        for r in weak_type_table(res, cfg.lambdas, cfg.n_sigma):
            rows.append((e.label, r.lam, r.empirical, r.bound, r.n_paths, r.stderr, r.passes))
            rep.verdict(f"{e.label} lambda={r.lam:g}", r.passes,
                        f"empirical {r.empirical:.6g} <= bound {r.bound:.6g} + {cfg.n_sigma:g}*{r.stderr:.3g}")
    write_table(out / "report.csv",
                ["ensemble", "lambda", "empirical", "bound", "n_paths", "stderr", "passes"], rows)
    rep.work["paths"] = cfg.n_paths * len(cfg.ensembles)
    return rep


def sparse_checks(res, cfg: SparseConfig, label: str, slack: float, rep: Report, rows, tag=""):
    dec = res.decomposition
    dom = check_domination(res.z_max, dec, slack)
    measured = max(0.0, dom.worst_ratio / dec.domination_constant - 1.0)
    rows.append((label, f"domination{tag}", dom.worst_ratio, dec.domination_constant * (1 + slack),
                 dom.holds))
    rows.append((label, f"domination_slack{tag}", measured, slack, measured <= slack))
    rep.verdict(f"{label} domination{tag}", dom.holds and measured <= slack,
                f"worst Z*/S(X) {dom.worst_ratio:.6g}, slack used {measured:.3g} <= {slack:g}, "
                f"{dom.n_violations} violations")
    nested = dec.check_nesting()
    rows.append((label, f"nesting{tag}", float(nested), 1.0, nested))
    rep.verdict(f"{label} nesting{tag}", nested)
    for inv in structural_invariants(res):
        rows.append((label, f"invariant_{inv.name}{tag}", inv.worst, 0.0, inv.holds))
        rep.verdict(f"{label} {inv.name}{tag}", inv.holds,
                    f"worst excess {inv.worst:.3g}, {inv.n_violations} violating paths")
    resid = dec.residual_mass()
    ok = resid <= RESIDUAL_MASS_LIMIT
    rows.append((label, f"residual_mass{tag}", resid, RESIDUAL_MASS_LIMIT, ok))
    rep.verdict(f"{label} residual mass{tag}", ok, f"{resid:.3g} in the deepest level",
                kind="structural")


def run_sparse_verify(cfg: SparseConfig, out: Path, threads: int = 1) -> Report:
    rep = Report("sparse-verify", cfg)
    grid = TimeGrid(cfg.t_max, cfg.n_steps)
    rows, srows, orows = [], [], []
    kw = dict(threshold=cfg.threshold, domination_constant=cfg.domination_constant,
              max_levels=cfg.max_levels)
    for e in cfg.ensembles:
        res = e.spec(grid, **kw).run(cfg.n_paths, cfg.seed, threads)
        sparse_checks(res, cfg, e.label, cfg.slack, rep, rows)
        dec = res.decomposition
        occ = dec.in_E.sum(axis=0)
        for j, c in enumerate(occ):
            if c == 0 and j > 0 and occ[j - 1] == 0:
                break
            orows.append((e.label, j - 1, int(c), c / dec.n_paths))
        levels = [j for j in cfg.levels if j < dec.max_levels - 1]
        for r in check_sparsity(dec, levels=levels, n_sigma=cfg.n_sigma):
            srows.append((e.label, r.level, r.selector, r.n_A, r.n_A_next, r.ratio, r.sigma, r.passes))
            rep.verdict(f"{e.label} sparsity level {r.level} {r.selector}", r.passes,
                        f"{r.n_A_next}/{r.n_A} = {r.ratio:.4g} <= 0.5 + {cfg.n_sigma:g}*{r.sigma:.3g}")
        s = eval_sparse_operator(dec)
        rows.append((e.label, "mean_S", float(s.mean()), float("nan"), True))
        if cfg.refine:
            fine = e.spec(grid.refined(2), **kw).run(cfg.n_paths, cfg.seed, threads)
            sparse_checks(fine, cfg, e.label, cfg.refined_slack, rep, rows, tag="_dt/2")
    write_table(out / "report.csv", ["ensemble", "check", "value", "limit", "passes"], rows)
    write_table(out / "sparsity.csv", ["ensemble", "level", "selector", "n_A", "n_A_next", "ratio",
                                       "sigma", "passes"], srows)
    write_table(out / "occupancy.csv", ["ensemble", "level", "count", "fraction"], orows)
    rep.work["paths"] = cfg.n_paths * len(cfg.ensembles) * (2 if cfg.refine else 1)
    return rep


def _resolve_function(ref, grid: TorusGrid):
    if isinstance(ref, str):
        return builtin_function(ref, grid)
    if isinstance(ref, BuiltinRef):
        return builtin_function(ref.builtin, grid, seed=ref.seed)
    return read_grid_csv(ref.csv, grid)


def _function_label(ref) -> str:
    if isinstance(ref, str):
        return ref
    if isinstance(ref, BuiltinRef):
        return f"{ref.builtin}[{ref.seed}]"
    return Path(ref.csv).name


def run_riesz_mc(cfg: RieszConfig, out: Path, threads: int = 1) -> Report:
    rep = Report("riesz-mc", cfg)
    try:
        fgrid = TorusGrid(cfg.n_dims, cfg.grid_m)
        cells = TorusGrid(cfg.n_dims, cfg.m_cells)
        funcs = [_resolve_function(r, fgrid) for r in cfg.functions]
    except (ValueError, OSError) as e:
        raise ConfigError(str(e)) from e
    labels = [_function_label(r) for r in cfg.functions]
    if len(set(labels)) != len(labels):
        raise ConfigError("functions must be distinct")
    results = mc_riesz_many(funcs, cells, cfg.n_paths, cfg.seed, cfg.y0_ladder, dt=cfg.dt,
                            threads=threads, censor_bound=cfg.censor_bound,
                            gate_factor=cfg.gate_factor, error_tolerance=cfg.tolerance,
                            strict_censoring=False, skip_height=cfg.skip_height,
                            t_max=cfg.t_max, max_steps=cfg.max_steps, bridge=cfg.bridge)
    n = cfg.n_dims
    centres = cells.coords(0.5).reshape(-1, n)
    rows = []
    for lab, r in zip(labels, results):
        est, se, cnt = r.estimate, r.stderr, r.estimates[-1].counts
        for c in range(cells.size):
            rows.append((lab, c, *centres[c], *est[c], *r.oracle[c], *se[c], int(cnt[c])))
        for y0, cf in zip(r.ladder, r.censored):
            rep.verdict(f"{lab} censoring y0={y0:g}", cf <= cfg.censor_bound,
                        f"censored fraction {cf:.3g} <= {cfg.censor_bound:g}", kind="structural")
        errs = ", ".join(f"y0={y:g}: {e:.4g}" for y, e in zip(r.ladder, r.rel_errors))
        rep.notes.append(f"{lab} relative L2 error by rung: {errs}")
        rep.verdict(f"{lab} relative L2 error", r.rel_l2_error <= cfg.tolerance,
                    f"{r.rel_l2_error:.4g} <= {cfg.tolerance:g} at y0={r.ladder[-1]:g}")
        st = r.stabilization
        if len(r.ladder) > 1:
            diffs = ", ".join(f"{d:.4g}/{s:.4g}" for d, s in zip(st.diff_rms, st.noise_rms))
            rep.verdict(f"{lab} ladder stabilization", st.passes,
                        f"rms change/noise by consecutive rungs {diffs}; last <= {st.factor:g}x noise")
    cols = ["function", "cell"] + [f"x{j + 1}" for j in range(n)] + \
        [f"estimate{j + 1}" for j in range(n)] + [f"oracle{j + 1}" for j in range(n)] + \
        [f"stderr{j + 1}" for j in range(n)] + ["count"]
    write_table(out / "report.csv", cols, rows)
    rep.work["paths"] = cfg.n_paths * len(cfg.y0_ladder)
    return rep


def run_bounds_sweep(cfg: BoundsConfig, out: Path, threads: int = 1) -> Report:
    rep = Report("bounds-sweep", cfg)
    rows = []
    by_dim: dict = {}
    chars: dict = {}
    for n in cfg.n_dims:
        try:
            grid = TorusGrid(n, cfg.m)
            funcs = [(_function_label(r), _resolve_function(r, grid)) for r in cfg.functions]
        except (ValueError, OSError) as e:
            raise ConfigError(str(e)) from e
        for wref in cfg.weights:
            try:
                w = wref.build(grid)
            except ValueError as e:
                raise ConfigError(str(e)) from e
            for p in cfg.p_grid:
                key = (wref.label, p)
                if key not in chars:
                    # the built-in weights depend on x1 only, so the characteristic
                    # does not depend on the dimension
                    chars[key] = flow_characteristic(w, p).value
                q = chars[key]
                for flab, f in funcs:
                    b = check_bounds(f, None if wref.kind == "unit" else w, p,
                                     characteristic=1.0 if wref.kind == "unit" else q)
                    rows.append((n, flab, wref.label, p, b.lhs, b.f_norm, b.constant,
                                 b.characteristic, b.exponent, b.rhs, b.ratio, b.holds))
                    by_dim[(flab, wref.label, p, n)] = b.ratio
                    rep.verdict(f"n={n} f={flab} w={wref.label} p={p:g}", b.holds,
                                f"ratio {b.ratio:.6g} <= 1")
    write_table(out / "report.csv", ["n_dims", "function", "weight", "p", "lhs", "f_norm",
                                     "constant", "characteristic", "exponent", "rhs", "ratio",
                                     "passes"], rows)
    if 1 in cfg.n_dims and 2 in cfg.n_dims:
        drows = []
        for (flab, wl, p, n), r1 in by_dim.items():
            if n == 1 and (flab, wl, p, 2) in by_dim:
                r2 = by_dim[(flab, wl, p, 2)]
                drows.append((flab, wl, p, r1, r2, r2 / r1 if r1 > 0 else float("nan")))
        write_table(out / "dimensions.csv",
                    ["function", "weight", "p", "ratio_n1", "ratio_n2", "n2_over_n1"], drows)
    if cfg.weighted_z.enabled:
        _weighted_sweep(cfg, out, rep, threads)
    return rep


def default_weighted_constant(p: float) -> float:
    return 16.0 * p * p / (p - 1.0)


def _weighted_sweep(cfg: BoundsConfig, out: Path, rep: Report, threads: int):
    wz = cfg.weighted_z
    grid = TorusGrid(1, cfg.m)
    try:
        g = wz.g.build(grid)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    rows = []
    for wref in cfg.weights:
        w = wref.build(grid)
        full = weighted_background(g, w, wz.y0, 2 * wz.n_paths, cfg.seed, dt=wz.dt,
                                   threads=threads)
        for p in wz.p_grid:
            C = wz.C if wz.C is not None else default_weighted_constant(p)
            q = flow_characteristic(w, p).value
            lower = filtration_characteristic_estimate(full, w, p)
            ratios = []
            for n in (wz.n_paths, 2 * wz.n_paths):
                sub = full.prefix(n)
                r = weighted_maximal_check(sub, WeightedSample(sub.weights, p), q, C)
                ratios.append(r.ratio)
                rows.append((wref.label, p, n, r.z_norm, r.x_norm, q, lower, r.phi, r.ratio, C,
                             r.holds))
            change = abs(ratios[1] - ratios[0]) / ratios[0]
            rep.verdict(f"weighted Z* w={wref.label} p={p:g}",
                        all(x <= C for x in ratios) and change <= wz.stability_tol,
                        f"ratio {ratios[0]:.4g} -> {ratios[1]:.4g} (change {change:.3g} <= "
                        f"{wz.stability_tol:g}), C={C:.4g}; characteristic {q:.6g}, "
                        f"filtration lower estimate {lower:.6g}")
            rep.verdict(f"filtration estimate <= flow characteristic w={wref.label} p={p:g}",
                        lower <= q * (1 + wz.filtration_rtol),
                        f"{lower:.6g} <= {q:.6g} (1 + {wz.filtration_rtol:g})")
    write_table(out / "weighted.csv", ["weight", "p", "n_paths", "z_norm", "x_norm",
                                       "characteristic", "filtration_lower", "phi", "ratio", "C",
                                       "passes"], rows)
    rep.work["paths"] = 2 * wz.n_paths * len(cfg.weights)


COMMANDS = {"weak-type": run_weak_type, "sparse-verify": run_sparse_verify,
            "riesz-mc": run_riesz_mc, "bounds-sweep": run_bounds_sweep}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="riesz-sparse", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="JSON config file")
        s.add_argument("--out", required=True, help="output directory")
        s.add_argument("--threads", type=int, default=1,
                       help="worker threads (changes speed only, never results)")
    return ap


def run(command: str, config_path, out_dir, threads: int = 1) -> int:
    try:
        if threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = load_config(command, config_path)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        rep = COMMANDS[command](cfg, out, threads)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    code = rep.write(out)
    print((out / "summary.txt").read_text(), end="")
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return run(args.command, args.config, args.out, args.threads)


if __name__ == "__main__":
    sys.exit(main())
