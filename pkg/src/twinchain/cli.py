"""Experiment driver: relax interface states, sweep sizes, estimate layers.

Subcommands
    minimize   relax the kinked chain for each n and write full reports
    scan       tabulate total and rescaled energies across n
    layers     boundary/internal layer estimates and the K=3 composition
    diagnose   threshold census and good-row selection on relaxed states
    fit-decay  exponential fit of the deviation between two snapshots

Every output file embeds the resolved configuration, values are written
with 17 significant digits, and identical configurations produce
bit-identical files.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .analysis import (GoodLines, classify, deviation_profile, find_good_lines,
                       fit_exponential, interface_positions,
                       save_classification, save_profile)
from .energy import (chain_energy, default_jump_threshold,
                     local_energy_threshold_census, save_breakdown)
from .gamma import LayerSpec, estimate_EK, estimate_layer, save_layer_estimates
from .lattice import load_chain, reconstruct, save_chain
from .minimize import (MinimizeOptions, newton_minimize, preoptimize_middle,
                       twin_chain)
from .wells import boundary_gradient, build_wells

G17 = "%.17g"


def _default_workers():
    env = os.environ.get("TWINCHAIN_WORKERS", "").strip()
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


@dataclass(frozen=True)
class ExperimentConfig:
    a: float = math.sqrt(2.0)
    lam: float = 0.5
    n_list: tuple = (40, 100, 200)
    alpha: float = 0.4
    delta: float = 0.1
    seed: int = 0
    variable_tau: bool = False
    quick: bool = False
    svg: bool = False
    out: Path = Path("runs")
    workers: int = 1

    def header(self):
        ns = " ".join(str(n) for n in self.n_list)
        return (f"config a={G17 % self.a} lambda={G17 % self.lam} n=[{ns}] "
                f"alpha={G17 % self.alpha} delta={G17 % self.delta} "
                f"seed={self.seed} variable_tau={int(self.variable_tau)} "
                f"quick={int(self.quick)}")


def _interface_column(cfg: ExperimentConfig, n: int) -> int:
    """Volume fraction mapped to the kink column: lam=1/2 centres it."""
    col = int(round((2.0 * cfg.lam - 1.0) * n))
    return max(-(n - 1), min(n - 1, col))


# ---------------------------------------------------------------------------
# plumbing


def _write(path: Path, lines):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def write_svg_polyline(path, xs, ys, title=""):
    """Minimal static line plot; axes span the data range exactly."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    w, h, pad = 640, 400, 50
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(ys.min()), float(ys.max())
    sx = (w - 2 * pad) / (x1 - x0 if x1 > x0 else 1.0)
    sy = (h - 2 * pad) / (y1 - y0 if y1 > y0 else 1.0)
    pts = " ".join(f"{pad + (x - x0) * sx:.2f},{h - pad - (y - y0) * sy:.2f}"
                   for x, y in zip(xs, ys))
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">',
        f'<rect width="{w}" height="{h}" fill="white"/>',
        f'<text x="{w // 2}" y="20" text-anchor="middle">{title}</text>',
        f'<line x1="{pad}" y1="{h - pad}" x2="{w - pad}" y2="{h - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{h - pad}" stroke="black"/>',
        f'<text x="{pad}" y="{h - pad + 16}" font-size="10">{x0:.6g}</text>',
        f'<text x="{w - pad}" y="{h - pad + 16}" text-anchor="end" font-size="10">{x1:.6g}</text>',
        f'<text x="{pad - 4}" y="{h - pad}" text-anchor="end" font-size="10">{y0:.6g}</text>',
        f'<text x="{pad - 4}" y="{pad}" text-anchor="end" font-size="10">{y1:.6g}</text>',
        f'<polyline points="{pts}" fill="none" stroke="steelblue" stroke-width="1.5"/>',
        "</svg>",
    ]
    _write(Path(path), lines)


def _relax(cfg: ExperimentConfig, n: int):
    """Shared pipeline: kinked chain, middle-atom warm start, full Newton."""
    wells = build_wells(cfg.a)
    chain = twin_chain(n, wells, interface_column=_interface_column(cfg, n))
    warm = preoptimize_middle(chain)
    opts = MinimizeOptions(variable_tau=cfg.variable_tau)
    report = newton_minimize(warm, opts)
    return wells, warm, report


def _map_runs(cfg: ExperimentConfig, fn):
    """Per-n dispatch; results come back in n_list order regardless of pool."""
    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            return list(pool.map(fn, cfg.n_list))
    return [fn(n) for n in cfg.n_list]


# ---------------------------------------------------------------------------
# subcommands


def cmd_minimize(cfg: ExperimentConfig) -> int:
    head = cfg.header()
    failures = []
    for n, (wells, warm, report) in zip(cfg.n_list, _map_runs(cfg, lambda n: _relax(cfg, n))):
        final = report.final_chain
        bd = chain_energy(final)
        out = cfg.out
        save_chain(final, out / f"chain-n{n}.txt", header=head)
        save_chain(warm, out / f"reference-n{n}.txt", header=head)
        save_breakdown(bd, out / f"breakdown-n{n}.csv", header=head)
        cls = classify(reconstruct(final), wells)
        save_classification(cls, out / f"classification-n{n}.csv", header=head)
        profile = deviation_profile(final, warm)
        for side, lo, hi in (("right", 2, n - 2), ("left", -(n - 2), -2)):
            fit = fit_exponential(profile, window=(lo, hi))
            save_profile(fit, out / f"profile-{side}-n{n}.csv", header=head)
        interfaces = interface_positions(cls, tol=0.2)
        lines = [
            f"# {head}",
            "# minimize-report v1",
            f"n={n}",
            f"converged={int(report.converged)}",
            f"stop_reason={report.stop_reason}",
            f"iterations={report.iterations}",
            f"final_gradient_norm={G17 % report.grad_norm_history[-1]}",
            f"total_energy={G17 % bd.total}",
            f"rescaled_energy={G17 % bd.rescaled}",
            f"admissibility_violations={report.admissibility_violations}",
            f"interfaces={len(interfaces)}",
        ]
        _write(out / f"report-n{n}.txt", lines)
        if not report.converged:
            failures.append(n)
    if failures:
        print("minimize failed to converge for n = "
              + ", ".join(map(str, failures)), file=sys.stderr)
        return 1
    return 0


def cmd_scan(cfg: ExperimentConfig) -> int:
    head = cfg.header()
    rows = []
    failures = []
    for n, (wells, warm, report) in zip(cfg.n_list, _map_runs(cfg, lambda n: _relax(cfg, n))):
        bd = chain_energy(report.final_chain)
        rows.append((n, report.final_chain.lam, bd.total, bd.rescaled,
                     report.iterations, int(report.converged)))
        if not report.converged:
            failures.append(n)
    lines = [f"# {head}", "# scan v1",
             "n,lambda_n,total_energy,rescaled_energy,iterations,converged"]
    for n, lam, total, resc, iters, conv in rows:
        lines.append(f"{n},{G17 % lam},{G17 % total},{G17 % resc},{iters},{conv}")
    _write(cfg.out / "scan.csv", lines)

    plot = [f"# {head}", "# log10(n) log10(total_energy)"]
    for n, _, total, _, _, _ in rows:
        plot.append(f"{G17 % math.log10(n)} {G17 % math.log10(total)}")
    _write(cfg.out / "scan-loglog.dat", plot)
    if cfg.svg:
        write_svg_polyline(cfg.out / "scan.svg",
                           [r[0] for r in rows], [r[3] for r in rows],
                           title="rescaled energy vs n")
    if failures:
        print("scan failed to converge for n = "
              + ", ".join(map(str, failures)), file=sys.stderr)
        return 1
    return 0


def cmd_layers(cfg: ExperimentConfig) -> int:
    head = cfg.header()
    wells = build_wells(cfg.a)
    F = boundary_gradient(wells, cfg.lam).F
    height = 6 if cfg.quick else 16
    L = 3 * height
    seq = (4, 6) if cfg.quick else (8, 12, 16)

    specs = [
        LayerSpec("C", wells.U0, wells.U0, (0.0, 0.0), L, height),
        LayerSpec("C", wells.U0, wells.QU1, (0.0, 0.0), L, height),
        LayerSpec("B_plus", F, wells.U0, (0.0, 0.0), L, height),
        LayerSpec("B_minus", wells.QU1, F, (0.0, 0.0), L, height),
    ]
    entries = [(spec, estimate_layer(spec, wells, n_sequence=seq))
               for spec in specs]
    save_layer_estimates(entries, cfg.out / "layers.csv", header=head)

    first = estimate_EK([F, wells.U0, wells.QU1, F], wells,
                        n=height, n_sequence=seq, search_offset=False)
    second = estimate_EK([F, wells.QU1, wells.U0, F], wells,
                         n=height, n_sequence=seq, search_offset=False)
    n_ref = 20 if cfg.quick else 40
    ref = newton_minimize(twin_chain(n_ref, wells,
                                     interface_column=_interface_column(cfg, n_ref)))
    h1 = chain_energy(ref.final_chain).rescaled
    best = min(first, second)
    lines = [
        f"# {head}",
        "# layer-composition v1",
        f"ek_first_ordering={G17 % first}",
        f"ek_second_ordering={G17 % second}",
        f"ek_min={G17 % best}",
        f"reference_n={n_ref}",
        f"reference_rescaled_energy={G17 % h1}",
        f"relative_gap={G17 % (abs(best - h1) / h1)}",
    ]
    _write(cfg.out / "composition.txt", lines)
    return 0


def cmd_diagnose(cfg: ExperimentConfig) -> int:
    head = cfg.header()
    rows = []
    failures = []
    for n, (wells, warm, report) in zip(cfg.n_list, _map_runs(cfg, lambda n: _relax(cfg, n))):
        bd = chain_energy(report.final_chain)
        census = local_energy_threshold_census(bd, default_jump_threshold(wells))
        found = find_good_lines(bd, alpha=cfg.alpha, delta=cfg.delta,
                                max_hard_sites=None)
        if isinstance(found, GoodLines):
            jm, j0, jp, status = found.j_minus, found.j_zero, found.j_plus, "ok"
        else:
            jm = j0 = jp = ""
            status = found.reason.replace(",", ";")
        rows.append((n, census.threshold, census.site_count, census.row_count,
                     jm, j0, jp, status))
        if not report.converged:
            failures.append(n)
    lines = [f"# {head}", "# diagnose v1",
             "n,threshold,sites_above,rows_above,j_minus,j_zero,j_plus,status"]
    for n, thr, sites, nrows, jm, j0, jp, status in rows:
        lines.append(f"{n},{G17 % thr},{sites},{nrows},{jm},{j0},{jp},{status}")
    _write(cfg.out / "diagnose.csv", lines)
    if failures:
        print("diagnose: relaxation did not converge for n = "
              + ", ".join(map(str, failures)), file=sys.stderr)
        return 1
    return 0


def cmd_fit_decay(cfg: ExperimentConfig, chain_path, reference_path, lo, hi) -> int:
    chain = load_chain(chain_path)
    reference = load_chain(reference_path)
    profile = deviation_profile(chain, reference)
    fit = fit_exponential(profile, window=(lo, hi))
    save_profile(fit, cfg.out / "fit-decay.csv", header=cfg.header())
    print(f"rate={G17 % fit.rate} amplitude={G17 % fit.amplitude} "
          f"r_squared={G17 % fit.r_squared}")
    return 0


# ---------------------------------------------------------------------------
# argument handling


def _build_parser():
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--a", type=float, default=None,
                        help="primary stretch (default sqrt 2)")
    shared.add_argument("--lambda", dest="lam", type=float, default=None,
                        help="volume fraction in (0, 1)")
    shared.add_argument("--n", type=int, action="append", default=None,
                        help="chain half-width; repeatable")
    shared.add_argument("--alpha", type=float, default=None)
    shared.add_argument("--delta", type=float, default=None)
    shared.add_argument("--seed", type=int, default=None)
    shared.add_argument("--variable-tau", action="store_true", default=None)
    shared.add_argument("--quick", action="store_true", default=None,
                        help="small sizes for smoke runs")
    shared.add_argument("--svg", action="store_true", default=None)
    shared.add_argument("--out", type=Path, default=None,
                        help="output directory (default runs/)")
    shared.add_argument("--config", type=Path, default=None,
                        help="JSON file with the same keys; flags override")

    parser = argparse.ArgumentParser(
        prog="twinchain",
        description="two-well chain experiments: relaxation, scaling, layers")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("minimize", parents=[shared])
    sub.add_parser("scan", parents=[shared])
    sub.add_parser("layers", parents=[shared])
    sub.add_parser("diagnose", parents=[shared])
    fit = sub.add_parser("fit-decay", parents=[shared])
    fit.add_argument("--chain", type=Path, required=True)
    fit.add_argument("--reference", type=Path, required=True)
    fit.add_argument("--lo", type=int, required=True)
    fit.add_argument("--hi", type=int, required=True)
    return parser


_CONFIG_KEYS = {"a": "a", "lambda": "lam", "n": "n_list", "alpha": "alpha",
                "delta": "delta", "seed": "seed", "variable_tau": "variable_tau",
                "quick": "quick", "svg": "svg", "out": "out"}


def _resolve_config(args, parser) -> ExperimentConfig:
    cfg = ExperimentConfig(workers=_default_workers())
    raw = {}
    if args.config is not None:
        try:
            raw = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as exc:
            parser.error(f"cannot read config file: {exc}")
        unknown = set(raw) - set(_CONFIG_KEYS)
        if unknown:
            parser.error(f"unknown config keys: {sorted(unknown)}")
        fields = {}
        for key, value in raw.items():
            name = _CONFIG_KEYS[key]
            if name == "n_list":
                value = tuple(int(v) for v in value)
            if name == "out":
                value = Path(value)
            fields[name] = value
        cfg = replace(cfg, **fields)

    overrides = {}
    for flag, name in (("a", "a"), ("lam", "lam"), ("alpha", "alpha"),
                       ("delta", "delta"), ("seed", "seed"),
                       ("variable_tau", "variable_tau"), ("quick", "quick"),
                       ("svg", "svg"), ("out", "out")):
        value = getattr(args, flag)
        if value is not None:
            overrides[name] = value
    if args.n is not None:
        overrides["n_list"] = tuple(args.n)
    cfg = replace(cfg, **overrides)
    if cfg.quick and args.n is None and "n" not in raw:
        cfg = replace(cfg, n_list=(8,))

    if not (cfg.a > 0 and math.isfinite(cfg.a)) or cfg.a == 1.0:
        parser.error("--a must be positive, finite and different from 1")
    if not 0.0 < cfg.lam < 1.0:
        parser.error("--lambda must lie strictly inside (0, 1)")
    if not cfg.n_list:
        parser.error("at least one --n is required")
    if any(n < 8 for n in cfg.n_list):
        parser.error("--n must be at least 8 (per-side decay fits need room)")
    if not 0.0 < cfg.alpha < 1.0:
        parser.error("--alpha must lie in (0, 1)")
    if not 0.0 < cfg.delta < 0.25:
        parser.error("--delta must lie in (0, 1/4)")
    return cfg


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    cfg = _resolve_config(args, parser)
    cfg.out.mkdir(parents=True, exist_ok=True)
    if args.command == "minimize":
        return cmd_minimize(cfg)
    if args.command == "scan":
        return cmd_scan(cfg)
    if args.command == "layers":
        return cmd_layers(cfg)
    if args.command == "diagnose":
        return cmd_diagnose(cfg)
    return cmd_fit_decay(cfg, args.chain, args.reference, args.lo, args.hi)


if __name__ == "__main__":
    sys.exit(main())
