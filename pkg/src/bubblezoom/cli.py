"""Command-line experiment runner: `bubblezoom run <example|custom> ...`."""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import export
from .analysis import (
    NormSpec,
    Sampler,
    eoc,
    error_norm,
    rotation_peak_oracle,
)
from .bubbles import StabCache
from .linalg import export_matrix_market
from .problem import (
    EXAMPLES,
    BoundaryData,
    Coefficients,
    ExampleProblem,
    InitialData,
    get_example,
)
from .solve import _assemble, crank_nicolson, solve_steady
from .assembly import apply_dirichlet

_SCHEMES = ("galerkin", "supg", "rfb", "bmz")
_EXPORTS = ("csv", "vtk", "matrix-market")
_NORMS = ("l1", "l2", "h1", "stability")

# config-file keys mirror the CLI flag destinations
_CONFIG_KEYS = {
    "example": str,
    "scheme": str,
    "N": str,
    "M": int,
    "eps": float,
    "c": float,
    "f": float,
    "g": float,
    "velocity": str,
    "dt": float,
    "T": float,
    "out": str,
    "export": str,
    "tau": str,
    "patch_velocity": str,
    "norms": str,
    "subdomain": str,
    "fine_sample": int,
}


class ConfigError(ValueError):
    pass


def _parse_config_file(path):
    """Flat 'key = value' file; '#' comments; unknown keys rejected."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, val = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            values[key] = _CONFIG_KEYS[key](val)
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}")
    return values


def _build_parser():
    p = argparse.ArgumentParser(
        prog="bubblezoom",
        description="Stabilized Q1 solvers for advection-dominated "
        "advection-reaction-diffusion problems.",
    )
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run one experiment")
    run.add_argument("example", nargs="?", default=None,
                     help="catalog example name or 'custom'")
    run.add_argument("--config", default=None,
                     help="flat key=value config file (CLI flags override)")
    run.add_argument("--scheme", "--schemes", dest="scheme", default=None,
                     help="comma-separated schemes: galerkin,supg,rfb,bmz")
    run.add_argument("--N", default=None,
                     help="elements per unit length; comma list for sweeps")
    run.add_argument("--M", type=int, default=None,
                     help="fine subdivisions per bubble level (default 20)")
    run.add_argument("--eps", type=float, default=None, help="diffusion")
    run.add_argument("--c", type=float, default=None, help="reaction")
    run.add_argument("--f", type=float, default=None, help="constant source")
    run.add_argument("--g", type=float, default=None,
                     help="constant Dirichlet value (custom problems)")
    run.add_argument("--velocity", default=None,
                     help="constant velocity 'a1,a2' (custom problems)")
    run.add_argument("--dt", type=float, default=None, help="time step")
    run.add_argument("--T", type=float, default=None, help="final time")
    run.add_argument("--out", default=None, help="output directory")
    run.add_argument("--export", dest="export", default=None,
                     help="comma list of csv,vtk,matrix-market")
    run.add_argument("--tau", choices=("classic", "rfb-integral"),
                     default=None, help="SUPG stabilization parameter rule")
    run.add_argument("--patch-velocity", dest="patch_velocity",
                     choices=("mean", "element"), default=None,
                     help="velocity sampling for patch tables")
    run.add_argument("--norms", default=None,
                     help="comma list of l1,l2,h1,stability")
    run.add_argument("--subdomain", choices=("full", "interior"),
                     default=None, help="norm subdomain")
    run.add_argument("--fine-sample", dest="fine_sample", type=int,
                     default=None, help="VTK samples per element axis")
    return p


def _merge_config(args):
    """Config-file values overridden by explicitly given CLI flags."""
    cfg = dict(_parse_config_file(args.config)) if args.config else {}
    for key in _CONFIG_KEYS:
        cli_val = getattr(args, key, None)
        if cli_val is not None:
            cfg[key] = cli_val
    defaults = {
        "scheme": "bmz",
        "M": 20,
        "out": "out",
        "export": "csv",
        "tau": "classic",
        "patch_velocity": "element",
        "subdomain": "full",
        "fine_sample": 4,
    }
    for key, val in defaults.items():
        cfg.setdefault(key, val)
    if "example" not in cfg:
        raise ConfigError("no example given (argument or config key)")
    return cfg


def _split_list(text, allowed, what):
    items = [s.strip() for s in str(text).split(",") if s.strip()]
    for item in items:
        if allowed is not None and item not in allowed:
            raise ConfigError(f"unknown {what} {item!r}")
    if not items:
        raise ConfigError(f"empty {what} list")
    return items


def _make_problem(cfg):
    name = cfg["example"].lower()
    if name in EXAMPLES:
        return get_example(
            name, eps=cfg.get("eps"), c=cfg.get("c"), f=cfg.get("f")
        )
    if name != "custom":
        raise ConfigError(
            f"unknown example {cfg['example']!r}; "
            f"have {sorted(EXAMPLES)} or 'custom'"
        )
    if "velocity" not in cfg:
        raise ConfigError("custom problems need --velocity 'a1,a2'")
    try:
        a1, a2 = (float(s) for s in str(cfg["velocity"]).split(","))
    except ValueError:
        raise ConfigError("velocity must be 'a1,a2'")
    coeffs = Coefficients(
        epsilon=cfg.get("eps", 1e-6),
        velocity=(a1, a2),
        reaction=cfg.get("c", 0.0),
        source=cfg.get("f", 0.0),
    )
    transient = "dt" in cfg or "T" in cfg
    return ExampleProblem(
        name="custom",
        origin=(0.0, 0.0), extent=(1.0, 1.0), mask=None,
        coeffs=coeffs,
        boundary=BoundaryData(cfg.get("g", 0.0)),
        initial=InitialData(0.0) if transient else None,
        transient=transient,
        default_N=50, default_dt=cfg.get("dt", 0.01),
        default_T=cfg.get("T", 1.0),
    )


def _trace_observer(problem, fine_sample):
    """Per-step (t, max, argmax, [oracle distance]) recorder."""
    state = {}

    def obs(step, t, sol):
        sampler = state.get("sampler")
        if sampler is None:
            sampler = Sampler(sol, m=fine_sample)
            state["sampler"] = sampler
        _, mx, (px, py) = sampler.extrema_of(sol.values)
        row = [t, mx, px, py]
        if problem.name == "example4":
            ox, oy = rotation_peak_oracle(t)
            row.append(float(np.hypot(px - ox, py - oy)))
        return row

    return obs


def run_experiment(cfg):
    """Execute one configured experiment; returns the manifest dict."""
    schemes = _split_list(cfg["scheme"], _SCHEMES, "scheme")
    exports = _split_list(cfg["export"], _EXPORTS, "export flag")
    problem = _make_problem(cfg)
    Ns = [int(s) for s in _split_list(cfg.get("N", problem.default_N),
                                      None, "N")]
    norms = None
    if "norms" in cfg:
        norms = _split_list(cfg["norms"], _NORMS, "norm")
    elif problem.exact is not None:
        norms = ["l2"]
    outdir = Path(cfg["out"])
    outdir.mkdir(parents=True, exist_ok=True)
    cache = StabCache()
    manifest = {
        "example": problem.name,
        "schemes": ",".join(schemes),
        "N": ",".join(str(n) for n in Ns),
        "M": cfg["M"],
        "eps": problem.coeffs.epsilon,
        "c": problem.coeffs.reaction,
        "tau": cfg["tau"],
        "patch_velocity": cfg["patch_velocity"],
        "export": ",".join(exports),
        "fine_sample": cfg["fine_sample"],
        "transient": problem.transient,
    }
    if problem.transient:
        manifest["dt"] = cfg.get("dt", problem.default_dt)
        manifest["T"] = cfg.get("T", problem.default_T)

    error_rows = []
    for scheme in schemes:
        errs = {kind: [] for kind in (norms or ())}
        for N in Ns:
            grid = problem.grid(N)
            t0 = time.perf_counter()
            if problem.transient:
                traj = crank_nicolson(
                    grid, problem.coeffs, problem.boundary, problem.initial,
                    scheme, dt=manifest["dt"], T=manifest["T"],
                    M=cfg["M"], cache=cache,
                    observers=(_trace_observer(problem, cfg["fine_sample"]),),
                    patch_velocity=cfg["patch_velocity"],
                    tau_rule=cfg["tau"],
                )
                sol = traj.final
                if "csv" in exports:
                    cols = ["t", "max", "argmax_x", "argmax_y"]
                    if problem.name == "example4":
                        cols.append("oracle_distance")
                    export.write_csv(
                        outdir / f"{problem.name}_{scheme}_N{N}_trace.csv",
                        cols, traj.observed[0],
                        comments=[
                            f"example={problem.name} scheme={scheme} N={N}",
                            f"dt={manifest['dt']:g} T={manifest['T']:g} "
                            f"M={cfg['M']}",
                        ],
                    )
            else:
                sol = solve_steady(
                    grid, problem.coeffs, problem.boundary, scheme,
                    M=cfg["M"], cache=cache,
                    patch_velocity=cfg["patch_velocity"],
                    tau_rule=cfg["tau"],
                )
                if sol.report is not None:
                    manifest[f"residual_{scheme}_N{N}"] = sol.report.residual
            manifest[f"walltime_{scheme}_N{N}"] = round(
                time.perf_counter() - t0, 3
            )
            if norms and problem.exact is not None and not problem.transient:
                for kind in norms:
                    spec = NormSpec(kind=kind, subdomain=cfg["subdomain"])
                    errs[kind].append(
                        error_norm(sol, problem.exact, spec)
                    )
            if "vtk" in exports:
                export.write_vtk(
                    outdir / f"{problem.name}_{scheme}_N{N}.vtk",
                    sol, m=cfg["fine_sample"],
                    title=f"{problem.name} {scheme} N={N}",
                )
            if "matrix-market" in exports:
                dofs, A, rhs, _ = _assemble(
                    grid, problem.coeffs, problem.boundary, scheme,
                    cfg["M"], cache, cfg["patch_velocity"], cfg["tau"],
                )
                system = apply_dirichlet(A, rhs, grid, dofs, problem.boundary)
                export_matrix_market(
                    outdir / f"{problem.name}_{scheme}_N{N}.mtx", system.A
                )
        for kind in errs:
            rates = eoc(errs[kind], Ns)
            for i, N in enumerate(Ns):
                error_rows.append(
                    [scheme, N, kind, errs[kind][i],
                     "" if i == 0 else rates[i - 1]]
                )

    if error_rows and "csv" in exports:
        export.write_csv(
            outdir / f"{problem.name}_errors.csv",
            ["scheme", "N", "norm", "error", "eoc"],
            error_rows,
            comments=[
                f"example={problem.name} subdomain={cfg['subdomain']} "
                f"M={cfg['M']}",
            ],
        )
    stats = cache.stats()
    manifest["recursion_depth"] = stats["max_depth"]
    manifest["bubble_solves"] = stats["bubble_solves"]
    manifest["tables_computed"] = stats["tables_computed"]
    export.write_manifest(outdir / "manifest.txt", manifest)
    return manifest


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _merge_config(args)
        run_experiment(cfg)
    except (ConfigError, KeyError, ValueError) as exc:
        print(f"bubblezoom: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # solver failures
        print(f"bubblezoom: run failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
