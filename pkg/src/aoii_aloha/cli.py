"""Command line driver: ``optimize``, ``simulate``, ``sweep``, ``heatmap``, ``check``.

Every config key can be given as ``--key=value`` (or ``--section.key=value``
when the bare name is ambiguous) after the subcommand. Output goes to
``--output-dir``, else the config's ``[output] dir``, else ``$AOII_OUTPUT_DIR``,
else ``./aoii_out``.

Exit codes: 0 success, 1 validation error, 2 solver non-convergence,
3 partial sweep failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .chain import ConvergenceError, build_state_space
from .checks import run_all
from .files import (
    ExperimentConfig,
    FileFormatError,
    GridFile,
    digest,
    dump_config,
    fmt,
    load_config,
    read_grid,
    write_table,
)
from .optimizer import OptimizationError
from .pipeline import optimize_policy
from .simulator import SimConfig, TablePolicy, benchmark_pt1, benchmark_pte, pte_budget_for_load, run

EXIT_OK, EXIT_INVALID, EXIT_SOLVER, EXIT_PARTIAL = 0, 1, 2, 3

SIM_COLUMNS = ["policy", "N", "p_t", "seed", "horizon", "avg_aoii", "avg_truncated_aoii", "avg_load",
               "success_rate", "collision_rate", "idle_rate"]
TRACE_COLUMNS = ["step", "U", "J", "c1", "c2", "c3", "c4", "ell"]

logger = logging.getLogger("aoii_aloha")


def cell_tag(N, p_t) -> str:
    return f"N{N}_pt{fmt(p_t)}"


def grid_file(kind, values, params, cfg: ExperimentConfig, **extra) -> GridFile:
    space = build_state_space(params)
    meta = {"ell_includes_sync_state": fmt(cfg.include_sync_state), **cfg.provenance()}
    meta.update({k: str(v) for k, v in extra.items()})
    return GridFile(kind, params.F, params.G, params.N, params.p_t, space.to_grid(values, fill=np.nan), meta)


def policy_vector(gf: GridFile) -> np.ndarray:
    return build_state_space(gf.params).from_grid(gf.grid)


def write_trace(path, trace, cfg):
    rows = zip(trace.step, trace.U, trace.J, *trace.c.T, trace.ell)
    return write_table(path, TRACE_COLUMNS, rows, cfg.provenance())


# ---------------------------------------------------------------- optimize


def optimize_cell(cfg: ExperimentConfig, N, p_t, out: Path) -> dict:
    """Run the pipeline for one cell and write its files; returns their paths."""
    params = cfg.params(N, p_t)
    tag = cell_tag(N, p_t)
    try:
        res = optimize_policy(params, cfg.optim, cfg.pipeline, record_every=100)
    except OptimizationError as e:
        if e.trace is not None:
            write_trace(out / f"trace_{tag}.csv", e.trace, cfg)
        raise
    paths = {
        "policy": grid_file("policy", res.policy, params, cfg, tau=fmt(res.init.tau), p=fmt(res.init.p),
                            chosen_step=res.chosen_step).write(out / f"policy_{tag}.csv"),
        "phi": grid_file("phi", res.phi, params, cfg, ell=fmt(res.ell)).write(out / f"phi_{tag}.csv"),
        "trace": write_trace(out / f"trace_{tag}.csv", res.trace, cfg),
    }
    rows = [("tau_scan", t, "", a, l) for t, a, l in res.tau_scan]
    rows += [("checkpoint", "", c.step, c.avg_aoii, c.avg_load) for c in res.checkpoints]
    paths["selection"] = write_table(out / f"selection_{tag}.csv", ["stage", "tau", "step", "avg_aoii", "avg_load"],
                                     rows, {**cfg.provenance(), "chosen_step": res.chosen_step})
    return paths


def cmd_optimize(args, cfg: ExperimentConfig) -> int:
    out = cfg.resolved_output_dir()
    for N, p_t in cfg.cells():
        paths = optimize_cell(cfg, N, p_t, out)
        print(f"{cell_tag(N, p_t)}: wrote {paths['policy']}")
    return EXIT_OK


# ---------------------------------------------------------------- simulate


def sim_row(name, params, seed, rep):
    return [name, params.N, params.p_t, seed, rep.horizon, rep.avg_aoii, rep.avg_truncated_aoii, rep.avg_load,
            rep.success_rate, rep.collision_rate, rep.idle_rate]


def resolve_policy(spec: str, params, reference, seed, horizon):
    """Policy object for ``pt1``, ``pte:E``, ``pte:auto`` or ``pte:match`` on ``params``.

    ``pte:auto`` sets ``E`` to the reference policy's measured load;
    ``pte:match`` picks ``E`` so that the PTE load itself equals it.
    """
    if spec == "pt1":
        return benchmark_pt1(params)
    if spec.startswith("pte:"):
        arg = spec[4:]
        if arg in ("auto", "match"):
            if reference is None:
                raise ValueError(f"pte:{arg} needs --reference POLICY_FILE to measure the load to match")
            ref = read_grid(reference)
            if ref.params != params:
                raise ValueError("reference policy was optimized for different parameters")
            rep = run(SimConfig(params, TablePolicy(np.nan_to_num(ref.grid)), horizon, seed))
            if arg == "match":
                return benchmark_pte(params, pte_budget_for_load(params, rep.avg_load))
            return benchmark_pte(params, rep.avg_load)
        try:
            E = float(arg)
        except ValueError:
            raise ValueError(f"bad PTE budget {arg!r}") from None
        return benchmark_pte(params, E)
    raise ValueError(f"unknown benchmark {spec!r}")


def cmd_simulate(args, cfg: ExperimentConfig) -> int:
    out = cfg.resolved_output_dir()
    spec = args.policy
    rows = []
    traces = []
    if spec == "pt1" or spec.startswith("pte:"):
        name = spec.replace(":", "_")
        for N, p_t in cfg.cells():
            params = cfg.params(N, p_t)
            for seed in cfg.seeds:
                pol = resolve_policy(spec, params, args.reference, seed, cfg.horizon)
                rep = run(SimConfig(params, pol, cfg.horizon, seed, record_trace=args.trace))
                rows.append(sim_row(spec, params, seed, rep))
                traces.append((params, seed, rep.trace))
    else:
        gf = read_grid(spec)
        if gf.kind != "policy":
            raise FileFormatError("expected a policy file, got a phi file", spec)
        params = gf.params
        name = Path(spec).stem
        for seed in cfg.seeds:
            rep = run(SimConfig(params, TablePolicy(np.nan_to_num(gf.grid)), cfg.horizon, seed, record_trace=args.trace))
            rows.append(sim_row(name, params, seed, rep))
            traces.append((params, seed, rep.trace))
    path = write_table(out / f"sim_{name}.csv", SIM_COLUMNS, rows, cfg.provenance())
    if args.trace:
        trows = [(p.N, p.p_t, s, t, v) for p, s, tr in traces for t, v in enumerate(tr)]
        write_table(out / f"simtrace_{name}.csv", ["N", "p_t", "seed", "slot", "mean_aoii"], trows, cfg.provenance())
    for r in rows:
        print(f"{r[0]} N={r[1]} p_t={r[2]} seed={r[3]}: avg_aoii={r[5]:.3f} avg_load={r[7]:.4f}")
    print(f"wrote {path}")
    return EXIT_OK


# ---------------------------------------------------------------- sweep


def cache_key(cfg: ExperimentConfig, N, p_t) -> str:
    d = cfg.to_dict()
    return digest({"F": cfg.F, "G": cfg.G, "N": N, "p_t": p_t, "optim": d["optim"], "pipeline": d["pipeline"]})


def sweep_cell(cfg: ExperimentConfig, N, p_t, out: Path) -> dict:
    """Optimize (or reuse the cached policy) and simulate dual, PT1 and PTE for one cell."""
    params = cfg.params(N, p_t)
    cache = out / "cache" / f"policy_{cell_tag(N, p_t)}_{cache_key(cfg, N, p_t)}.csv"
    if cache.exists():
        gf = read_grid(cache)
        cached = True
    else:
        res = optimize_policy(params, cfg.optim, cfg.pipeline, record_every=1000)
        gf = grid_file("policy", res.policy, params, cfg, tau=fmt(res.init.tau), p=fmt(res.init.p),
                       chosen_step=res.chosen_step)
        gf.write(cache)
        cached = False
    policy = TablePolicy(np.nan_to_num(gf.grid))
    acc = {"dual": [], "load": [], "pt1": [], "pte": [], "pte_match": []}
    for seed in cfg.seeds:
        dual = run(SimConfig(params, policy, cfg.horizon, seed))
        pt1 = run(SimConfig(params, benchmark_pt1(params), cfg.horizon, seed))
        pte = run(SimConfig(params, benchmark_pte(params, dual.avg_load), cfg.horizon, seed))
        acc["dual"].append(dual.avg_aoii)
        acc["load"].append(dual.avg_load)
        acc["pt1"].append(pt1.avg_aoii)
        acc["pte"].append(pte.avg_aoii)
        try:
            E = pte_budget_for_load(params, dual.avg_load, cfg.include_sync_state)
        except ValueError:  # dual load beyond any PTE budget
            acc["pte_match"].append(np.nan)
        else:
            acc["pte_match"].append(run(SimConfig(params, benchmark_pte(params, E), cfg.horizon, seed)).avg_aoii)
    m = {k: float(np.mean(v)) for k, v in acc.items()}
    return {
        "N": N, "p_t": p_t, "aoii": m["dual"], "load": m["load"], "pt1_aoii": m["pt1"], "pte_aoii": m["pte"],
        "pt1_reduction": 100.0 * (1.0 - m["dual"] / m["pt1"]),
        "pte_reduction": 100.0 * (1.0 - m["dual"] / m["pte"]),
        "pte_match_aoii": m["pte_match"],
        "pte_match_reduction": 100.0 * (1.0 - m["dual"] / m["pte_match"]),
        "cached": cached,
    }


SUMMARY_COLUMNS = ["N", "p_t", "aoii", "load", "pt1_aoii", "pte_aoii", "pte_match_aoii", "pt1_reduction",
                   "pte_reduction", "pte_match_reduction"]


def _sweep_job(job):
    cfg, N, p_t, out = job
    try:
        return sweep_cell(cfg, N, p_t, out), None
    except (ValueError, ArithmeticError, ConvergenceError, OptimizationError) as e:
        return {"N": N, "p_t": p_t}, f"{type(e).__name__}: {e}"


def cmd_sweep(args, cfg: ExperimentConfig) -> int:
    out = cfg.resolved_output_dir()
    jobs = [(cfg, N, p_t, out) for N, p_t in cfg.cells()]
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_sweep_job, jobs))
    else:
        results = [_sweep_job(j) for j in jobs]
    ok = [r for r, err in results if err is None]
    failed = [(r, err) for r, err in results if err is not None]
    meta = cfg.provenance()
    for name, col in (("fig3_aoii", "aoii"), ("fig4_load", "load"), ("fig7_pt1", "pt1_reduction"),
                      ("fig8_pte", "pte_reduction")):
        write_table(out / f"{name}.csv", ["N", "p_t", col], [(r["N"], r["p_t"], r[col]) for r in ok], meta)
    write_table(out / "sweep_summary.csv",
                SUMMARY_COLUMNS, [tuple(r[c] for c in SUMMARY_COLUMNS) for r in ok], meta)
    write_table(out / "sweep_failures.csv", ["N", "p_t", "error"], [(r["N"], r["p_t"], e) for r, e in failed], meta)
    for r in ok:
        print(f"{cell_tag(r['N'], r['p_t'])}: aoii={r['aoii']:.2f} load={r['load']:.3f} "
              f"vs PT1 {r['pt1_reduction']:.1f}% vs PTE {r['pte_reduction']:.1f}%" + (" (cached)" if r["cached"] else ""))
    for r, e in failed:
        print(f"{cell_tag(r['N'], r['p_t'])}: FAILED {e}", file=sys.stderr)
    return EXIT_PARTIAL if failed else EXIT_OK


# ---------------------------------------------------------------- heatmap

# viridis, sampled at 9 points
_CMAP = np.array([
    [68, 1, 84], [71, 44, 122], [59, 81, 139], [44, 113, 142], [33, 144, 141],
    [39, 173, 129], [92, 200, 99], [170, 220, 50], [253, 231, 37],
], dtype=float)


def colour(t: float) -> str:
    t = min(max(t, 0.0), 1.0) * (len(_CMAP) - 1)
    i = min(int(t), len(_CMAP) - 2)
    rgb = _CMAP[i] + (t - i) * (_CMAP[i + 1] - _CMAP[i])
    return "#%02x%02x%02x" % tuple(int(round(v)) for v in rgb)


def render_svg(gf: GridFile, log=False, cell=6, floor=1e-12) -> str:
    """Standalone SVG of the grid: f to the right, g upwards, invalid states blank."""
    values = gf.grid.copy()
    valid = ~np.isnan(values)
    if log:
        values = np.log10(np.maximum(values, floor))
    lo, hi = (float(values[valid].min()), float(values[valid].max())) if valid.any() else (0.0, 1.0)
    span = hi - lo or 1.0
    F, G = gf.F, gf.G
    left, top, bar = 50, 30, 40
    w, h = (F + 1) * cell, (G + 1) * cell
    label = ("log10 " if log else "") + ("pi" if gf.kind == "policy" else "phi")
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{left + w + bar + 60}" height="{top + h + 50}">',
        f'<text x="{left}" y="18" font-family="sans-serif" font-size="12">{label} over (f, g), '
        f'N={gf.N}, p_t={fmt(gf.p_t)}</text>',
    ]
    for f in range(F + 1):
        for g in range(G + 1):
            if valid[f, g]:
                x, y = left + f * cell, top + (G - g) * cell
                parts.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" '
                             f'fill="{colour((values[f, g] - lo) / span)}"/>')
    parts.append(f'<rect x="{left}" y="{top}" width="{w}" height="{h}" fill="none" stroke="black"/>')
    parts.append(f'<text x="{left + w / 2}" y="{top + h + 20}" font-family="sans-serif" font-size="12">f</text>')
    parts.append(f'<text x="{left - 20}" y="{top + h / 2}" font-family="sans-serif" font-size="12">g</text>')
    bx = left + w + 15
    for k in range(20):
        parts.append(f'<rect x="{bx}" y="{top + h - (k + 1) * h / 20}" width="12" height="{h / 20 + 0.5}" '
                     f'fill="{colour((k + 0.5) / 20)}"/>')
    parts.append(f'<text x="{bx + 16}" y="{top + 10}" font-family="sans-serif" font-size="10">{hi:.3g}</text>')
    parts.append(f'<text x="{bx + 16}" y="{top + h}" font-family="sans-serif" font-size="10">{lo:.3g}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_heatmap(args, cfg: ExperimentConfig) -> int:
    gf = read_grid(args.file)
    out = cfg.resolved_output_dir()
    stem = args.name or Path(args.file).stem
    svg = out / f"{stem}.svg"
    svg.parent.mkdir(parents=True, exist_ok=True)
    svg.write_text(render_svg(gf, log=args.log))
    csv_path = gf.write(out / f"{stem}_grid.csv")
    print(f"wrote {svg} and {csv_path}")
    return EXIT_OK


# ---------------------------------------------------------------- check


def cmd_check(args, cfg: ExperimentConfig) -> int:
    results = run_all(quick=args.quick)
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_INVALID


# ---------------------------------------------------------------- entry


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, allow_abbrev=False)
    common.add_argument("--config", help="INI config file")
    common.add_argument("--output-dir", help="output directory (overrides config and $AOII_OUTPUT_DIR)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="aoii-aloha", description=__doc__.split("\n")[0], allow_abbrev=False)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("optimize", parents=[common], allow_abbrev=False,
                   help="optimize a policy for every grid cell")
    s = sub.add_parser("simulate", parents=[common], allow_abbrev=False, help="simulate a policy file or benchmark")
    s.add_argument("policy", help="policy file, or pt1 | pte:E | pte:auto | pte:match")
    s.add_argument("--reference", help="dual policy file whose load pte:auto and pte:match use")
    s.add_argument("--trace", action="store_true", help="also write the per-slot mean AoII")
    sub.add_parser("sweep", parents=[common], allow_abbrev=False, help="optimize and simulate the whole grid")
    h = sub.add_parser("heatmap", parents=[common], allow_abbrev=False, help="render a policy or phi file as SVG")
    h.add_argument("file")
    h.add_argument("--log", action="store_true", help="log10 colour scale")
    h.add_argument("--name", help="output file stem")
    c = sub.add_parser("check", parents=[common], allow_abbrev=False, help="run the invariant suites")
    c.add_argument("--quick", action="store_true", help="smaller instance counts")
    sub.add_parser("show-config", parents=[common], allow_abbrev=False, help="print the resolved config")
    return p


COMMANDS = {
    "optimize": cmd_optimize,
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
    "heatmap": cmd_heatmap,
    "check": cmd_check,
    "show-config": lambda args, cfg: print(dump_config(cfg), end="") or EXIT_OK,
}


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = []
    for item in extra:
        if not (item.startswith("--") and "=" in item):
            print(f"aoii-aloha: unrecognized argument {item!r} (config overrides look like --key=value)",
                  file=sys.stderr)
            return EXIT_INVALID
        overrides.append(item[2:])
    if args.output_dir:
        overrides.append(f"output.dir={args.output_dir}")
    try:
        cfg = load_config(args.config, overrides)
        return COMMANDS[args.command](args, cfg)
    except (ConvergenceError, OptimizationError) as e:
        print(f"aoii-aloha: solver failure: {e}", file=sys.stderr)
        return EXIT_SOLVER
    except (FileFormatError, ValueError) as e:
        print(f"aoii-aloha: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
