"""Command-line front end.

    lqgdelay validate     --model scalar_delayed
    lqgdelay rate-scan    --model case1_scalar --n-list 4,8,16,32,64 --reps 2000 --out runs/rates

Every run writes its tables, a ``manifest.json`` (spec hash, seed, grid,
versions, effective config, output hashes) and ``summary.txt`` into ``--out``.
Passing a manifest back through ``--config`` repeats the run.

Exit status: 0 ok, 2 bad config or model file, 3 validation failure,
4 solver non-convergence, 5 a requested check failed.
"""

from __future__ import annotations

import argparse
import hashlib
import io
import json
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__, rng
from .det_solvers import ConvergenceError, DivergenceError, phi_from_forcing, solve_riccati
from .experiments import limit_strategy, nash_scan, rate_scan
from .model import (AssumptionViolation, ModelSpec, SpecStructureError, load_spec,
                    shipped_models, validate_spec)
from .nce import compute_m0_case1, compute_m0_general
from .oracle import (SolvabilityError, brute_force_optimize, decomposition_check,
                     stationarity_residuals, tree_solve_hamiltonian)
from .population_sim import (NoiseConfig, control_average_error, path_costs,
                             simulate_population)
from .strategies import case2_closed_form, case2_solve, feedback_json
from .svgplot import loglog_svg
from .timegrid import DivisibilityError, write_table

COMMANDS = ("validate", "nce", "case1", "case2", "simulate", "oracle-check", "rate-scan", "nash-scan")
DEFAULT_MODEL = {"validate": "scalar_delayed", "nce": "scalar_delayed", "case1": "case1_scalar",
                 "case2": "case2_constant", "simulate": "case1_scalar",
                 "oracle-check": "scalar_delayed", "rate-scan": "case1_scalar",
                 "nash-scan": "case1_scalar"}
DEFAULTS = {"grid_h": None, "seed": 0, "out": "lqgdelay-out", "n_list": [4, 8, 16, 32, 64],
            "reps": 2000, "depth": 4, "form": "discrete", "plot": True}
CONFIG_KEYS = ("model", "grid_h", "seed", "out", "n_list", "reps", "depth", "form", "plot")

EXIT_OK, EXIT_CONFIG, EXIT_INVALID, EXIT_SOLVER, EXIT_CHECK = 0, 2, 3, 4, 5


class ConfigError(ValueError):
    pass


def _n_list(text) -> list[int]:
    vals = [int(v) for v in str(text).split(",") if v.strip()] if isinstance(text, str) else [int(v) for v in text]
    if len(vals) < 3 or any(b <= a for a, b in zip(vals, vals[1:])) or vals[0] < 2:
        raise ConfigError("n-list must be strictly increasing with at least 3 entries, all >= 2")
    return vals


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lqgdelay", description=__doc__.split("\n")[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", help="JSON config (or a previous manifest.json); flags win")
    ap.add_argument("--model", help="model JSON file or name of a shipped model")
    ap.add_argument("--grid-h", dest="grid_h", type=float)
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out")
    ap.add_argument("--n-list", dest="n_list")
    ap.add_argument("--reps", type=int)
    ap.add_argument("--depth", type=int, help="scenario tree depth for oracle-check")
    ap.add_argument("--form", choices=("discrete", "continuous"), help="Case I feedback form")
    ap.add_argument("--no-plot", dest="plot", action="store_const", const=False)
    return ap


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS)
    cfg["model"] = DEFAULT_MODEL[args.command]
    if args.config:
        try:
            with open(args.config) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if "config" in data and "spec_sha256" in data:
            data = data["config"]
        unknown = set(data) - set(CONFIG_KEYS) - {"command"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg.update({k: v for k, v in data.items() if k != "command"})
    for k in CONFIG_KEYS:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    cfg["n_list"] = _n_list(cfg["n_list"])
    if cfg["reps"] < 2:
        raise ConfigError("reps must be at least 2")
    if not 0 <= int(cfg["seed"]) < 2 ** 64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    cfg["command"] = args.command
    return cfg


def load_model(name: str) -> tuple[ModelSpec, str]:
    shipped = shipped_models()
    path = shipped[name] if name in shipped else Path(name)
    try:
        return load_spec(path), str(path)
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"cannot load model {name}: {exc}") from exc


class Run:
    """Collects outputs in memory; written by a single writer at the end."""

    def __init__(self, cfg: dict, spec: ModelSpec, model_path: str):
        self.cfg, self.spec, self.model_path = cfg, spec, model_path
        self.files: dict[str, str] = {}
        self.lines: list[str] = []
        self.checks: dict[str, bool] = {}
        self.grid = None

    def table(self, name: str, header, rows) -> None:
        buf = io.StringIO()
        write_table(buf, header, rows)
        self.files[name] = buf.getvalue()

    def text(self, name: str, content: str) -> None:
        self.files[name] = content

    def say(self, line: str) -> None:
        self.lines.append(line)

    def check(self, name: str, ok: bool) -> None:
        self.checks[name] = bool(ok)
        self.say(f"[{'PASS' if ok else 'FAIL'}] {name}")

    def finish(self) -> int:
        out = Path(self.cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        for name, content in self.files.items():
            (out / name).write_text(content)
        manifest = {
            "command": self.cfg["command"],
            "spec_name": self.spec.name,
            "spec_sha256": self.spec.digest(),
            "model_path": self.model_path,
            "seed": int(self.cfg["seed"]),
            "grid": self.grid.to_dict() if self.grid is not None else None,
            "rng": rng.ALGORITHM,
            "versions": {"lqgdelay": __version__, "python": platform.python_version(),
                         "numpy": np.__version__, "scipy": scipy.__version__},
            "config": {k: self.cfg[k] for k in CONFIG_KEYS},
            "outputs": {n: hashlib.sha256(c.encode()).hexdigest() for n, c in sorted(self.files.items())},
            "checks": self.checks,
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
        summary = "\n".join(self.lines) + "\n"
        (out / "summary.txt").write_text(summary)
        sys.stdout.write(summary)
        return EXIT_OK if all(self.checks.values()) else EXIT_CHECK


def _grid(run: Run, default_div: int = 4):
    spec, h = run.spec, run.cfg["grid_h"]
    if h is None:
        h = min(spec.delta, spec.theta) / default_div
    run.grid = spec.grid(h)
    return run.grid


# --- subcommands ---------------------------------------------------------------

def cmd_validate(run: Run) -> None:
    g = _grid(run, 2)
    rep = validate_spec(run.spec, g)
    for line in rep.lines():
        run.say(line)
    run.text("validation.txt", "\n".join(rep.lines()) + "\n")
    if not rep.ok:
        raise AssumptionViolation("; ".join(rep.lines()))


def cmd_nce(run: Run) -> None:
    g = _grid(run)
    sm = run.spec.sample(g)
    f = compute_m0_general(sm)
    buf = io.StringIO()
    f.to_csv(buf)
    run.text("m0.csv", buf.getvalue())
    run.text("picard.json", json.dumps([r.to_json() for r in f.reports], indent=2) + "\n")
    for name, r in zip(("idiosyncratic", "common"), f.reports):
        run.say(f"{name} part: {r.iterations} Picard iterations, residual {r.residual:.3e}")
    run.check("picard converged", all(r.converged for r in f.reports))
    if sm.is_case1():
        f1 = compute_m0_case1(sm)
        diff = float(np.max(np.abs(f1.m0 - f.m0)))
        run.say(f"Riccati route vs general route: max |difference| {diff:.3e}")
        run.check("routes agree to 1e-8", diff <= 1e-8)


def cmd_case1(run: Run) -> None:
    g = _grid(run)
    sm = run.spec.sample(g)
    if not sm.is_case1():
        raise SpecStructureError("case1 needs Atil = Btil = 0")
    st, f = limit_strategy(sm, run.cfg["form"])
    P = solve_riccati(sm)
    phi = phi_from_forcing(sm, P, f.m0)
    n = sm.dims.n
    rows = []
    for s in range(g.K + 1):
        rows.append([s * g.h] + list(P.P[s].ravel()) + list(phi.phi[s]))
    run.table("riccati.csv", ["t"] + [f"P_{i}{j}" for i in range(n) for j in range(n)]
              + [f"phi_{i}" for i in range(n)], rows)
    run.text("feedback.json", feedback_json(st, P, phi) + "\n")
    run.say(f"Case I feedback ({run.cfg['form']} form) on K = {g.K} steps; P(0) = {P.P[0].ravel().tolist()}")


def cmd_case2(run: Run) -> None:
    g = _grid(run)
    sm = run.spec.sample(g)
    cs = case2_solve(sm)
    const = all(np.ptp(getattr(sm, c)[:g.K], axis=0).max() == 0 for c in ("Atil", "Btil", "Nc", "Nctil"))
    At = float(sm.Atil[0, 0, 0])
    rows, worst = [], 0.0
    for s in range(g.K + 1):
        t = s * g.h
        shifted = cs.at_time(t + g.delta)
        cf = case2_closed_form(t + g.delta, g.T, g.delta, At) if const and float(sm.M[0, 0]) == 1.0 else None
        if cf is not None:
            worst = max(worst, abs(cf - shifted))
        rows.append([t, cs.ybar[s], shifted, "" if cf is None else cf])
    run.table("case2.csv", ["t", "ybar", "ybar_shift_delta", "closed_form_shift_delta"], rows)
    if const and float(sm.M[0, 0]) == 1.0:
        run.say(f"max |recursion - closed form| over nodes covered by the closed forms: {worst:.3e}")
        run.check("closed forms reproduced to 1e-8", worst <= 1e-8)
    else:
        run.say("closed-form comparison needs constant coefficients and M = 1; skipped")


def cmd_simulate(run: Run) -> None:
    g = _grid(run)
    sm = run.spec.sample(g)
    st, f = limit_strategy(sm, run.cfg["form"])
    N = run.cfg["n_list"][-1]
    nz = NoiseConfig(int(run.cfg["seed"]), N, run.cfg["reps"])
    cent = simulate_population(sm, g, st, nz, "centralized")
    dec = simulate_population(sm, g, st, nz, "decentralized", f)
    ae = control_average_error(cent, f)
    p = g.p
    mc = cent.states[:, :, p:, 0].mean(axis=(0, 1))
    md = dec.states[:, :, p:, 0].mean(axis=(0, 1))
    err = np.append(ae.per_node, np.nan)
    run.table("simulate.csv", ["t", "mean_x0_centralized", "mean_x0_decentralized", "ctrl_avg_mse"],
              [[s * g.h, mc[s], md[s], err[s]] for s in range(g.K + 1)])
    cc = path_costs(sm, g, cent.states, cent.controls).mean()
    cd = path_costs(sm, g, dec.states, dec.controls).mean()
    run.say(f"N = {N}, {nz.replications} replications: mean cost centralized {cc:.6f}, "
            f"decentralized {cd:.6f}; sup-node control-average MSE {ae.value:.3e} (se {ae.stderr:.1e})")


def cmd_oracle(run: Run) -> None:
    depth = int(run.cfg["depth"])
    spec = run.spec
    sm = spec.sample(spec.grid(spec.T / depth))
    run.grid = sm.grid
    f = compute_m0_general(sm)
    sol = tree_solve_hamiltonian(sm, depth, f)
    bf = brute_force_optimize(sm, depth, f)
    du = max(float(np.max(np.abs(a - b))) for a, b in zip(sol.u, bf.u))
    stat = float(stationarity_residuals(sol, sm).max())
    half = (0.5 * sm.a, 0.5 * sm.a, 0.5 * sm.xi, 0.5 * sm.xi)
    dec = decomposition_check(sm, depth, f, half)
    run.text("tree.json", sol.to_json() + "\n")
    run.say(f"tree depth {depth}: {sol.tree.node_count()} nodes, max assembled residual {sol.max_residual():.2e}")
    run.say(f"stationarity residual {stat:.2e}; tree vs brute force controls {du:.2e}; decomposition {dec:.2e}")
    run.check("stationarity <= 1e-10", stat <= 1e-10)
    run.check("tree and brute force agree to 1e-9", du <= 1e-9)
    run.check("decomposition <= 1e-9", dec <= 1e-9)


def _svg(run: Run, name: str, Ns, cols: dict, fits: dict, title: str) -> None:
    if run.cfg["plot"]:
        series = {k: (Ns, list(v)) for k, v in cols.items() if np.all(np.asarray(v) > 0)}
        if series:
            run.text(name, loglog_svg(series, {k: fits[k][:2] for k in series if k in fits}, title))


def cmd_rate_scan(run: Run) -> None:
    g = _grid(run)
    res = rate_scan(run.spec.sample(g), None, run.cfg["n_list"], run.cfg["reps"], int(run.cfg["seed"]),
                    run.cfg["form"])
    run.table("rates.csv", res.columns, res.rows)
    run.table("slopes.csv", ["statistic", "slope", "intercept", "r2"],
              [[k, *v] for k, v in res.slopes.items()])
    _svg(run, "rates.svg", res.Ns, {k: res.column(k) for k in ("ctrl_mse", "state_gap", "dev_gap",
                                                                "cost_gap_path", "cost_gap_exact")},
         res.slopes, "sup-node statistics vs N")
    for k, (b, _, r2) in res.slopes.items():
        run.say(f"slope {k:16s} {b:+.3f}  (r2 {r2:.3f})")
    for k, ok in res.checks.items():
        run.check(f"{k} slope in [-1.3, -0.7]", ok)
    run.say(f"cost-gap slope inside [-0.8, -0.3]: Monte Carlo {res.extra['cost_gap_in_window']}, "
            f"exact {res.extra['cost_gap_exact_in_window']}")


def cmd_nash_scan(run: Run) -> None:
    g = _grid(run)
    res = nash_scan(run.spec.sample(g), None, run.cfg["n_list"], run.cfg["reps"], int(run.cfg["seed"]),
                    run.cfg["form"])
    env = res.extra["envelope"]
    run.table("nash.csv", res.columns + ["best_gain_raw", "envelope"],
              [r + [raw, e] for r, raw, e in zip(res.rows, res.extra["raw_best"], env)])
    _svg(run, "nash.svg", res.Ns, {"certificate": res.column("certificate").astype(float),
                                   "envelope": np.asarray(env)},
         {"certificate": res.slopes["certificate"]}, "epsilon-Nash certificate vs N")
    run.say(f"C_hat = {res.extra['C_hat']:.4f}")
    for r, e in zip(res.rows, env):
        run.say(f"N = {r[0]:4d}: eps_obs {r[1]:.3e} (best {r[4]}), envelope {e:.3e}")
    run.check("eps_obs non-increasing in N", res.checks["non_increasing"])
    run.check("eps_obs within C_hat/sqrt(N)", res.checks["bounded"])


HANDLERS = {"validate": cmd_validate, "nce": cmd_nce, "case1": cmd_case1, "case2": cmd_case2,
            "simulate": cmd_simulate, "oracle-check": cmd_oracle, "rate-scan": cmd_rate_scan,
            "nash-scan": cmd_nash_scan}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        spec, path = load_model(cfg["model"])
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    run = Run(cfg, spec, path)
    try:
        if args.command != "validate":
            rep = validate_spec(spec)
            if not rep.ok:
                raise AssumptionViolation("; ".join(rep.lines()))
        HANDLERS[args.command](run)
    except (DivisibilityError, SpecStructureError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AssumptionViolation as exc:
        run.finish()
        print(f"validation failed: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ConvergenceError, DivergenceError, SolvabilityError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    return run.finish()


if __name__ == "__main__":
    sys.exit(main())
