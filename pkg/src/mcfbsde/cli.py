"""Batch front door: config-driven simulation, solving, checking, oracle runs.

    mcfbsde simulate|solve|solve-linear|check|oracle --config FILE
            [--paths K] [--samples K] [--flavor literal|sufficient]
            [--seed S] [--out DIR]

Configs are single JSON documents; matrices are row-major with explicit
dimensions so goldens stay bit-exact.  Outputs are deterministic functions
of (config bytes, seed) and written atomically (temp file + rename).

Exit codes: 0 success, 1 config/validation error, 2 solver non-convergence,
3 internal error.  MCFBSDE_NODE_BUDGET overrides the tree node budget.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import tempfile

import numpy as np

from . import exprdsl
from .algebra import CoefficientSet, GStructure, RankError
from .chain import (ChainModel, GeneratorError, NodeBudgetError,
                    StepConstraintError, build_tree, simulate_paths,
                    validate_generator)
from .fields import Forcing
from .linear_fbsde import (LinearFBSDEProblem, LinearResidualError,
                           SingularSystemError, linear_residual, solve_linear)
from .oracle import (OracleBudgetError, OracleDivergenceError,
                     brute_force_solve, global_residual)
from .problems import BUILTIN_NAMES, get_builtin
from .solver import (CoefficientError, ContinuationConfig, ContinuationError,
                     FBSDEProblem, InnerFixedPointError, MaxSweepsError,
                     ResidualError, solution_residual, solve_continuation)
from .verify import (LITERAL, PROOF_SUFFICIENT, check_lipschitz,
                     check_monotonicity)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_SOLVER = 2
EXIT_INTERNAL = 3


class ConfigError(ValueError):
    """Bad or inconsistent run configuration; message carries the field path."""


@dataclasses.dataclass
class RunConfig:
    model: ChainModel
    T: float
    steps: int
    root_state: int                 # 0-based
    n: int
    m: int
    g: GStructure
    x0: np.ndarray
    mode: str
    c2: float
    c2p: float
    coeffs: CoefficientSet
    solver: ContinuationConfig
    seed: int
    lam: float = 0.0
    forcing: Forcing | None = None
    builtin: str | None = None
    raw: dict | None = None


def _need(block: dict, key: str, path: str):
    if key not in block:
        raise ConfigError(f"missing field {path}.{key}")
    return block[key]


def _matrix(value, rows, cols, path) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.shape != (rows, cols):
        raise ConfigError(f"{path}: expected {rows}x{cols} matrix, got "
                          f"shape {list(arr.shape)}")
    return arr


def _compile_exprs(entries, count, dims, path, allowed):
    if len(entries) != count:
        raise ConfigError(f"{path}: expected {count} expressions, got "
                          f"{len(entries)}")
    out = []
    for i, src in enumerate(entries):
        try:
            ast = exprdsl.parse(src, dims)
        except exprdsl.ParseError as err:
            raise ConfigError(f"{path}[{i}]: {err}") from err
        _check_vocabulary(ast, allowed, f"{path}[{i}]")
        out.append(ast)
    return out


def _check_vocabulary(ast, allowed, path):
    if isinstance(ast, exprdsl.Var) and ast.name not in allowed:
        raise ConfigError(f"{path}: variable '{ast.name}' not allowed here")
    for child in getattr(ast, "args", ()) or ():
        _check_vocabulary(child, allowed, path)
    for attr in ("operand", "left", "right"):
        child = getattr(ast, attr, None)
        if child is not None:
            _check_vocabulary(child, allowed, path)


def _expr_coefficients(block: dict, n: int, m: int, d: int) -> CoefficientSet:
    dims = (n, m, d)
    b_ast = _compile_exprs(_need(block, "b", "problem.coefficients"),
                           n, dims, "problem.coefficients.b",
                           {"t", "s", "x", "y", "z"})
    sig_rows = _need(block, "sigma", "problem.coefficients")
    if len(sig_rows) != n:
        raise ConfigError(f"problem.coefficients.sigma: expected {n} rows")
    sig_ast = [
        _compile_exprs(row, d, dims, f"problem.coefficients.sigma[{i}]",
                       {"t", "s", "x", "y", "z"})
        for i, row in enumerate(sig_rows)
    ]
    f_ast = _compile_exprs(_need(block, "f", "problem.coefficients"),
                           m, dims, "problem.coefficients.f",
                           {"t", "s", "x", "y", "z"})
    phi_ast = _compile_exprs(_need(block, "phi", "problem.coefficients"),
                             m, dims, "problem.coefficients.phi",
                             {"s", "x"})

    def _ctx(t, state, x, y, z):
        return exprdsl.EvalContext(t=t, state=state + 1, x=np.asarray(x),
                                   y=np.asarray(y), z=np.asarray(z),
                                   n=n, m=m, d=d)

    def b(t, state, x, y, z):
        ctx = _ctx(t, state, x, y, z)
        cols = [np.broadcast_to(exprdsl.evaluate(e, ctx),
                                np.shape(x)[:-1]) for e in b_ast]
        return np.stack(cols, axis=-1)

    def sigma(t, state, x, y, z):
        ctx = _ctx(t, state, x, y, z)
        rows = [np.stack([np.broadcast_to(exprdsl.evaluate(e, ctx),
                                          np.shape(x)[:-1]) for e in row],
                         axis=-1)
                for row in sig_ast]
        return np.stack(rows, axis=-2)

    def f(t, state, x, y, z):
        ctx = _ctx(t, state, x, y, z)
        cols = [np.broadcast_to(exprdsl.evaluate(e, ctx),
                                np.shape(x)[:-1]) for e in f_ast]
        return np.stack(cols, axis=-1)

    def phi(state, x):
        x = np.asarray(x)
        ctx = exprdsl.EvalContext(t=0.0, state=state + 1, x=x,
                                  y=np.zeros(x.shape[:-1] + (m,)),
                                  z=np.zeros(x.shape[:-1] + (m, d)),
                                  n=n, m=m, d=d)
        cols = [np.broadcast_to(exprdsl.evaluate(e, ctx), x.shape[:-1])
                for e in phi_ast]
        return np.stack(cols, axis=-1)

    return CoefficientSet(n=n, m=m, d=d, b=b, sigma=sigma, f=f, phi=phi,
                          name="config-exprs")


def _expr_forcing(block: dict, n: int, m: int, d: int) -> Forcing:
    dims = (n, m, d)
    allowed = {"t", "s"}

    def compile_list(key, count):
        if key not in block:
            return None
        return _compile_exprs(block[key], count, dims, f"linear.{key}", allowed)

    phi_ast = compile_list("phi", n)
    gam_ast = compile_list("gamma", m)
    xi_ast = compile_list("xi", m)
    psi_rows = block.get("psi")
    psi_ast = None
    if psi_rows is not None:
        if len(psi_rows) != n:
            raise ConfigError(f"linear.psi: expected {n} rows")
        psi_ast = [
            _compile_exprs(row, d, dims, f"linear.psi[{i}]", allowed)
            for i, row in enumerate(psi_rows)
        ]

    def ctx(t, state):
        return exprdsl.EvalContext(t=t, state=state + 1, x=np.zeros(n),
                                   y=np.zeros(m), z=np.zeros((m, d)),
                                   n=n, m=m, d=d)

    def phi(t, s):
        if phi_ast is None:
            return np.zeros(n)
        return np.array([exprdsl.evaluate(e, ctx(t, s)) for e in phi_ast])

    def psi(t, s):
        if psi_ast is None:
            return np.zeros((n, d))
        return np.array([[exprdsl.evaluate(e, ctx(t, s)) for e in row]
                         for row in psi_ast])

    def gamma(t, s):
        if gam_ast is None:
            return np.zeros(m)
        return np.array([exprdsl.evaluate(e, ctx(t, s)) for e in gam_ast])

    def xi(s):
        if xi_ast is None:
            return np.zeros(m)
        return np.array([exprdsl.evaluate(e, ctx(0.0, s)) for e in xi_ast])

    return Forcing(phi=phi, psi=psi, gamma=gamma, xi=xi)


def load_config(path: str) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as err:
        raise ConfigError(f"cannot read config: {err}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"config is not valid JSON: {err}") from err

    chain = _need(raw, "chain", "")
    d = int(_need(chain, "d", "chain"))
    a = _matrix(_need(chain, "A", "chain"), d, d, "chain.A")
    verdict = validate_generator([a])
    if not verdict.ok:
        raise ConfigError(f"chain.A: {verdict.message}")
    T = float(_need(chain, "T", "chain"))
    steps = int(_need(chain, "steps", "chain"))
    root = int(chain.get("root_state", 1))
    if not 1 <= root <= d:
        raise ConfigError(f"chain.root_state: {root} out of range 1..{d}")
    try:
        model = ChainModel(d, a)
    except GeneratorError as err:
        raise ConfigError(f"chain.A: {err}") from err

    problem = _need(raw, "problem", "")
    seed = int(raw.get("seed", 0))
    builtin = problem.get("builtin")
    if builtin is not None:
        if builtin not in BUILTIN_NAMES:
            raise ConfigError(
                f"problem.builtin: unknown builtin '{builtin}'; have "
                f"{', '.join(BUILTIN_NAMES)}")
        bp = get_builtin(builtin, d, seed=int(problem.get("params", {})
                                              .get("seed", 7)))
        n, m = bp.n, bp.m
        gmat = bp.G
        mode, c2, c2p = bp.mode, bp.c2, bp.c2p
        coeffs = bp.coeffs
        x0 = np.asarray(problem.get("x0", bp.x0), dtype=float)
    else:
        n = int(_need(problem, "n", "problem"))
        m = int(_need(problem, "m", "problem"))
        gmat = _matrix(_need(problem, "G", "problem"), m, n, "problem.G")
        mode = str(_need(problem, "mode", "problem"))
        c2 = float(_need(problem, "c2", "problem"))
        c2p = float(_need(problem, "c2p", "problem"))
        coeffs = _expr_coefficients(_need(problem, "coefficients", "problem"),
                                    n, m, d)
        x0 = np.asarray(_need(problem, "x0", "problem"), dtype=float)
    if mode not in ("THM2", "THM3"):
        raise ConfigError(f"problem.mode: expected THM2 or THM3, got {mode!r}")
    if x0.shape != (n,):
        raise ConfigError(f"problem.x0: expected {n} entries")
    try:
        g = GStructure(gmat)
    except RankError as err:
        raise ConfigError(f"problem.G: {err}") from err

    solver_block = raw.get("solver", {})
    allowed = {f.name for f in dataclasses.fields(ContinuationConfig)}
    unknown = set(solver_block) - allowed
    if unknown:
        raise ConfigError(f"solver: unknown fields {sorted(unknown)}")
    try:
        solver_cfg = ContinuationConfig(**solver_block)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"solver: {err}") from err

    lam = 0.0
    forcing = None
    if "linear" in raw:
        lin = raw["linear"]
        lam = float(lin.get("lambda", 0.0))
        if lam < 0:
            raise ConfigError("linear.lambda: must be nonnegative")
        forcing = _expr_forcing(lin, n, m, d)

    return RunConfig(model=model, T=T, steps=steps, root_state=root - 1,
                     n=n, m=m, g=g, x0=x0, mode=mode, c2=c2, c2p=c2p,
                     coeffs=coeffs, solver=solver_cfg, seed=seed, lam=lam,
                     forcing=forcing, builtin=builtin, raw=raw)


# -- output helpers ---------------------------------------------------------------


def _atomic_write(path: str, text: str) -> None:
    directory = os.path.dirname(path) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_json(path: str, payload: dict) -> None:
    _atomic_write(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _fmt(x: float) -> str:
    return f"{float(x):.17g}"


def _field_csv(tree, field) -> str:
    import hashlib

    n = field.n
    m = field.m
    d = tree.d
    header = (["node_id", "level", "state_path_hash", "time"]
              + [f"X_{i + 1}" for i in range(n)]
              + [f"Y_{j + 1}" for j in range(m)]
              + [f"Z_{j + 1}{k + 1}" for j in range(m) for k in range(d)])
    lines = [",".join(header)]
    for k in range(tree.N + 1):
        states = tree.states[k]
        for v in range(tree.n_nodes(k)):
            path_states = _path_states(tree, k, v)
            digest = hashlib.sha256(
                ",".join(str(s + 1) for s in path_states).encode()
            ).hexdigest()[:12]
            row = [str(v), str(k), digest, _fmt(tree.times[k])]
            row += [_fmt(x) for x in field.X[k][v]]
            row += [_fmt(y) for y in field.Y[k][v]]
            if k < tree.N:
                row += [_fmt(z) for z in field.Z[k][v].ravel()]
            else:
                row += [_fmt(0.0)] * (m * d)
            lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def _path_states(tree, level, node):
    out = []
    v = node
    for _ in range(level):
        out.append(v % tree.d)
        v //= tree.d
    out.append(tree.root_state)
    return list(reversed(out))


# -- commands ---------------------------------------------------------------------


def cmd_simulate(cfg: RunConfig, paths: int, out: str) -> int:
    bundle = simulate_paths(cfg.model, cfg.T, cfg.steps, cfg.root_state,
                            paths, cfg.seed)
    d = cfg.model.d
    header = ["path_id", "step", "time", "state"] + \
        [f"dM_{i + 1}" for i in range(d)]
    lines = [",".join(header)]
    for p in range(bundle.count):
        path = bundle.path(p)
        dm = path.increments()
        for k in range(cfg.steps + 1):
            row = [str(p), str(k), _fmt(bundle.times[k]),
                   str(int(path.states[k]) + 1)]
            row += [_fmt(x) for x in (dm[k - 1] if k > 0 else np.zeros(d))]
            lines.append(",".join(row))
    _atomic_write(os.path.join(out, "paths.csv"), "\n".join(lines) + "\n")

    from .chain import exact_predictable_qv_mean
    exact = exact_predictable_qv_mean(cfg.model, cfg.T, cfg.steps,
                                      cfg.root_state)
    mc = bundle.mean_optional_qv()
    scale = float(np.linalg.norm(exact))
    rel = float(np.linalg.norm(mc - exact)) / scale if scale else \
        float(np.linalg.norm(mc))
    _write_json(os.path.join(out, "qv_summary.json"), {
        "paths": paths, "T": cfg.T, "N": cfg.steps, "seed": cfg.seed,
        "mean_optional_qv": mc.tolist(),
        "exact_predictable_qv": exact.tolist(),
        "frobenius_rel_error": rel,
    })
    return EXIT_OK


def _build_problem(cfg: RunConfig) -> FBSDEProblem:
    tree = build_tree(cfg.model, cfg.T, cfg.steps, cfg.root_state)
    return FBSDEProblem(coeffs=cfg.coeffs, g=cfg.g, x0=cfg.x0, mode=cfg.mode,
                        c2=cfg.c2, c2p=cfg.c2p, tree=tree,
                        forcing=cfg.forcing)


def cmd_solve(cfg: RunConfig, out: str) -> int:
    problem = _build_problem(cfg)
    field, report = solve_continuation(problem, cfg.solver)
    _atomic_write(os.path.join(out, "solution.csv"),
                  _field_csv(problem.tree, field))
    payload = report.to_dict()
    payload["residual"] = solution_residual(field, problem, 1.0)
    _write_json(os.path.join(out, "report.json"), payload)
    return EXIT_OK


def cmd_solve_linear(cfg: RunConfig, out: str) -> int:
    tree = build_tree(cfg.model, cfg.T, cfg.steps, cfg.root_state)
    forcing = cfg.forcing or Forcing.zero(cfg.n, cfg.m, cfg.model.d)
    problem = LinearFBSDEProblem(mode=cfg.mode, c2=cfg.c2, c2p=cfg.c2p,
                                 lam=cfg.lam, g=cfg.g, x0=cfg.x0,
                                 forcing=forcing, tree=tree)
    sol = solve_linear(problem)
    _atomic_write(os.path.join(out, "linear_solution.csv"),
                  _field_csv(tree, sol.field))
    _write_json(os.path.join(out, "linear_report.json"), {
        "case": sol.case,
        "lambda": cfg.lam,
        "residual": linear_residual(sol),
        "gauge_fixed": sol.gauge_fixed,
        "ktab_vs_continuous": sol.ktab_vs_continuous(),
        "printed_formula_gap": sol.printed_formula_gap,
    })
    return EXIT_OK


def cmd_check(cfg: RunConfig, samples: int, flavor: str, out: str) -> int:
    flavor_name = LITERAL if flavor == "literal" else PROOF_SUFFICIENT
    mono = check_monotonicity(cfg.coeffs, cfg.g, cfg.model, cfg.mode,
                              flavor_name, samples=samples, seed=cfg.seed)
    lip = check_lipschitz(cfg.coeffs, cfg.g, cfg.model,
                          samples=samples, seed=cfg.seed)
    _write_json(os.path.join(out, "check_report.json"), {
        "monotonicity": mono.to_dict(),
        "lipschitz": lip.to_dict(),
    })
    return EXIT_OK


def cmd_oracle(cfg: RunConfig, out: str) -> int:
    problem = _build_problem(cfg)
    field, report = solve_continuation(problem, cfg.solver)
    oracle_field = brute_force_solve(problem, 1.0)
    sup = field.sup_distance(oracle_field)
    from .solver import contraction_metric
    norm = contraction_metric(field - oracle_field, problem.tree)
    _write_json(os.path.join(out, "oracle_report.json"), {
        "sup_difference": sup,
        "norm_difference": norm,
        "solver_residual": solution_residual(field, problem, 1.0),
        "oracle_residual": global_residual(oracle_field, problem, 1.0)["max"],
        "solver_converged": report.converged,
    })
    return EXIT_OK


# -- entry point ------------------------------------------------------------------


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mcfbsde",
        description="Markov-chain FBSDE solver and identity checkers",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("simulate", "solve", "solve-linear", "check", "oracle"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--out", default=".",
                       help="output directory (default: current)")
        if name == "simulate":
            p.add_argument("--paths", type=int, default=1000)
        if name == "check":
            p.add_argument("--samples", type=int, default=10_000)
            p.add_argument("--flavor", choices=("literal", "sufficient"),
                           default="sufficient")
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = dataclasses.replace(cfg, seed=args.seed)
        if args.command == "simulate":
            return cmd_simulate(cfg, args.paths, args.out)
        if args.command == "solve":
            return cmd_solve(cfg, args.out)
        if args.command == "solve-linear":
            return cmd_solve_linear(cfg, args.out)
        if args.command == "check":
            return cmd_check(cfg, args.samples, args.flavor, args.out)
        if args.command == "oracle":
            return cmd_oracle(cfg, args.out)
        raise AssertionError(f"unhandled command {args.command}")
    except (ConfigError, GeneratorError, StepConstraintError, NodeBudgetError,
            OracleBudgetError, RankError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (MaxSweepsError, ContinuationError, ResidualError,
            InnerFixedPointError, OracleDivergenceError,
            SingularSystemError, CoefficientError, LinearResidualError) as err:
        print(f"solver error: {err}", file=sys.stderr)
        return EXIT_SOLVER
    except Exception as err:  # noqa: BLE001
        print(f"internal error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
