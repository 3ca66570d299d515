"""Command line front end.

Every run writes ``resolved_config.ini`` (all defaults expanded), a
``summary.json`` and the result table as ``<command>.csv`` or
``<command>.json`` into ``--out``.  Errors print a JSON object on stderr,
are also written to ``error.json`` and set the exit code: 2 config,
3 precision, 4 resource cap, 5 invariant violation.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig, as_dynamics, as_fiber, build_system, parameter_values
from .errors import ConfigError, LabError
from .skewprod import Section3Blender
from .thermo import fmt

COMMANDS = ("dimension", "pressure", "scan", "transversality", "density-integral", "jets", "blender-demo")


@dataclass
class Result:
    columns: list
    rows: list
    summary: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for row in self.rows:
            w.writerow([_cell(v) for v in row])
        return buf.getvalue()

    def to_json(self) -> str:
        rows = [dict(zip(self.columns, (_jsonable(v) for v in row))) for row in self.rows]
        return _dumps({"columns": self.columns, "rows": rows})


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (list, tuple, np.ndarray)):
        return " ".join(_cell(x) for x in v)
    if v is None:
        return ""
    return fmt(v)


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple, np.ndarray)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else str(v)
    return v


def _dumps(obj) -> str:
    return json.dumps(_jsonable(obj), sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def _pmap(fn, items, threads: int) -> list:
    """Map in order; results are merged by index regardless of thread timing."""
    items = list(items)
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(threads) as pool:
        return list(pool.map(fn, items))


# commands ----------------------------------------------------------------------


def cmd_dimension(cfg: RunConfig) -> Result:
    from .thermo import similarity_dimension

    system = as_dynamics(build_system(cfg))
    P = parameter_values(cfg, system)
    tol = cfg.getfloat("dimension", "tol")
    depths = cfg.ints("dimension", "depths") or None
    dims = _pmap(lambda p: similarity_dimension(system, p, tol, depths), P, cfg.threads)
    rows = [[list(p), d] for p, d in zip(P, dims)]
    summary = {"system": system.name, "n_parameters": len(P), "tol": tol, "min": min(dims), "max": max(dims)}
    return Result(["p", "dimension"], rows, summary)


def cmd_pressure(cfg: RunConfig) -> Result:
    from .thermo import pressure_curve

    system = as_dynamics(build_system(cfg))
    P = parameter_values(cfg, system)
    s_grid = np.linspace(cfg.getfloat("pressure", "s_min"), cfg.getfloat("pressure", "s_max"), cfg.getint("pressure", "s_count"))
    depths = cfg.ints("pressure", "depths") or None
    curves = _pmap(lambda p: pressure_curve(system, p, s_grid, depths), P, cfg.threads)
    used = curves[0].depths
    rows = []
    for p, cur in zip(P, curves):
        for j, s in enumerate(cur.s_grid):
            rows.append([list(p), s] + [cur.values[i, j] for i in range(len(used))] + [cur.extrapolated[j], cur.spread[j]])
    cols = ["p", "s"] + [f"depth_{n}" for n in used] + ["extrapolated", "spread"]
    return Result(cols, rows, {"system": system.name, "depths": list(used), "n_parameters": len(P)})


def cmd_scan(cfg: RunConfig) -> Result:
    from .measure_lab import ScanSpec, parameter_scan

    system = as_dynamics(build_system(cfg))
    P = parameter_values(cfg, system, default="random")
    spec = ScanSpec(
        cover_depths=tuple(cfg.ints("scan", "cover_depths")),
        n_atoms=cfg.getint("scan", "n_atoms"),
        n_eval=cfg.getint("scan", "n_eval"),
        radii=tuple(cfg.floats("scan", "radii")),
        gibbs_depth=cfg.getint("scan", "gibbs_depth"),
        positive_fraction_of_X=cfg.getfloat("scan", "positive_fraction_of_x"),
        seed=cfg.seed,
        threads=cfg.threads,
    )
    table = parameter_scan(system, P, spec)
    depths = list(spec.cover_depths)
    cols = ["index", "p", "dimension"] + [f"cover_{d}" for d in depths] + ["cover_decay_rate", "density_ratio", "density_stable", "positive"]
    rows = [
        [r["index"], r["p"], r["dimension"]] + list(r["cover"]) + [r["cover_decay_rate"], r.get("density_ratio"), r.get("density_stable"), r["positive"]]
        for r in table.rows
    ]
    return Result(cols, rows, dict(table.summary(), system=system.name))


def cmd_transversality(cfg: RunConfig) -> Result:
    from .transversality import PairSpec, Sampler, scan_transversality

    system = as_dynamics(build_system(cfg))
    last = cfg.ints("transversality", "last_letters")
    if last and len(last) != 2:
        raise ConfigError("last_letters takes two letters")
    spec = PairSpec(
        n_pairs=cfg.getint("transversality", "n_pairs"),
        seed=cfg.seed,
        coding_depth=cfg.getint("transversality", "coding_depth") or None,
        last_letters=tuple(last) or None,
    )
    sampler = Sampler(cfg.get("transversality", "sampler"), cfg.getint("transversality", "count") or None, cfg.seed)
    scan = scan_transversality(system, spec, cfg.floats("transversality", "radii"), sampler)
    rows = [[i, r, scan.measure_estimates[i, j]] for i in range(len(scan.pairs)) for j, r in enumerate(scan.radii)]
    return Result(["pair", "r", "estimate"], rows, dict(scan.to_dict(), system=system.name, seed=cfg.seed))


def cmd_density_integral(cfg: RunConfig) -> Result:
    from .thermo import gibbs_weights
    from .transversality import density_integral

    system = as_dynamics(build_system(cfg))
    box = system.parameter_box
    p0 = cfg.floats("density-integral", "p0") or list(box.mean(axis=1))
    delta = cfg.getfloat("density-integral", "delta") or 0.4 * float((box[:, 1] - box[:, 0]).min())
    gibbs = gibbs_weights(system, p0, cfg.getint("density-integral", "gibbs_depth"))
    rep = density_integral(
        system,
        p0,
        delta,
        gibbs,
        cfg.floats("density-integral", "radii"),
        pair_samples=cfg.getint("density-integral", "pair_samples"),
        p_per_pair=cfg.getint("density-integral", "p_per_pair"),
        seed=cfg.seed,
    )
    rows = [[r, v, e, ok] for r, v, e, ok in zip(rep.radii, rep.values, rep.std_errors, rep.reliable)]
    summary = {k: v for k, v in rep.to_dict().items() if k not in ("radii", "values", "std_errors", "reliable")}
    return Result(["r", "value", "std_error", "reliable"], rows, dict(summary, system=system.name))


def cmd_jets(cfg: RunConfig) -> Result:
    from .jets import induced_jet_system, induced_structure_report, jet_dimension
    from .skewprod import SampleSpec
    from .thermo import similarity_dimension

    sec = cfg.sections["system"]
    if sec["kind"] == "induced-jets":
        base = as_fiber(build_system(cfg, sec["base"]))
        orders = [int(sec["jet_order"])]
    else:
        base = as_fiber(build_system(cfg))
        orders = cfg.ints("jets", "jet_orders")
    n_samples = cfg.getint("jets", "n_samples")
    p = base.parameter_box.mean(axis=1)
    dim_base = similarity_dimension(base, p)

    def one(s):
        induced = induced_jet_system(base, s, check=SampleSpec(n=n_samples, seed=cfg.seed))
        rep = induced_structure_report(induced, SampleSpec(n=n_samples, seed=cfg.seed))
        return [s, jet_dimension(base.param_dim, s), list(induced.meta["radii"]), rep["max_upper"], rep["diag_spread"], rep["diag_vs_base"], dim_base, similarity_dimension(induced, p)]

    rows = _pmap(one, orders, cfg.threads)
    cols = ["jet_order", "jet_dimension", "radii", "max_upper", "diag_spread", "diag_vs_base", "dimension_base", "dimension_induced"]
    return Result(cols, rows, {"system": base.name, "p": list(p), "n_samples": n_samples, "seed": cfg.seed})


def cmd_blender_demo(cfg: RunConfig) -> Result:
    from .measure_lab import cover_measure
    from .thermo import similarity_dimension

    blender = build_system(cfg)
    if not isinstance(blender, Section3Blender):
        raise ConfigError("blender-demo needs [system] kind = section3")
    fiber = blender.fiber
    p = fiber.parameter_box.mean(axis=1)
    ent = blender.entropy()
    dim = similarity_dimension(fiber, p)
    cover = cover_measure(fiber, p, (), cfg.ints("blender-demo", "cover_depths"))
    occ_depths = cfg.ints("blender-demo", "occupancy_depths")
    occ = blender.unstable_occupancy(occ_depths, cfg.getint("blender-demo", "occupancy_grid"))
    rows = [["cover", d, v] for d, v in zip(cover.depths, cover.union_measure)]
    rows += [["occupancy", d, v] for d, v in zip(occ_depths, occ)]
    summary = {
        "entropy": ent,
        "fiber_dimension": dim,
        "p": list(p),
        "occupancy_nondecreasing": bool(all(a <= b for a, b in zip(occ, occ[1:]))),
        "occupancy_above_one_percent": bool(occ[-1] > 0.01),
    }
    return Result(["quantity", "depth", "value"], rows, summary)


HANDLERS = {
    "dimension": cmd_dimension,
    "pressure": cmd_pressure,
    "scan": cmd_scan,
    "transversality": cmd_transversality,
    "density-integral": cmd_density_integral,
    "jets": cmd_jets,
    "blender-demo": cmd_blender_demo,
}


# entry point -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="blenderlab", description="Numerical laboratory for parameterized IFS and unipotent skew-products.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, help=HANDLERS[name].__name__.replace("cmd_", "").replace("_", " "))
        sp.add_argument("--config", required=True, help="INI run configuration")
        sp.add_argument("--seed", type=int, help="override [run] seed")
        sp.add_argument("--out", default=".", help="output directory (default: current)")
        sp.add_argument("--threads", type=int, help="override [run] threads")
        sp.add_argument("--format", choices=("csv", "json"), help="override [run] format")
    return parser


def run(command: str, cfg: RunConfig, out: Path) -> Result:
    out.mkdir(parents=True, exist_ok=True)
    if cfg.get("run", "format") not in ("csv", "json"):
        raise ConfigError("format must be csv or json")
    _ = cfg.seed, cfg.threads  # validate before any work
    (out / "resolved_config.ini").write_text(cfg.to_text(), encoding="utf-8")
    result = HANDLERS[command](cfg)
    stem = command.replace("-", "_")
    if cfg.get("run", "format") == "csv":
        (out / f"{stem}.csv").write_text(result.to_csv(), encoding="utf-8")
    else:
        (out / f"{stem}.json").write_text(result.to_json(), encoding="utf-8")
    summary = dict(result.summary, command=command, seed=cfg.seed)
    (out / "summary.json").write_text(_dumps(summary), encoding="utf-8")
    return result


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    try:
        cfg = RunConfig.from_file(args.config)
        for key in ("seed", "threads", "format"):
            val = getattr(args, key)
            if val is not None:
                cfg.set("run", key, val)
        run(args.command, cfg, out)
    except LabError as exc:
        payload = _dumps(exc.to_dict())
        sys.stderr.write(payload)
        try:
            out.mkdir(parents=True, exist_ok=True)
            (out / "error.json").write_text(payload, encoding="utf-8")
        except OSError:
            pass
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
