"""Command-line entry point: run, sweep, mesh-info, validate-config.

Exit codes: 0 success, 1 solver failure, 2 configuration error.  Thread
count comes from --threads or the CHNS_THREADS environment variable and
must be applied before numpy loads, so heavy imports stay inside main().
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from typing import List, Optional

__all__ = ["main", "entry"]


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="chns",
        description="Adaptive-mesh two-phase flow benchmark runner")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="TOML scenario file")
        sp.add_argument("--set", dest="overrides", action="append",
                        default=[], metavar="KEY=VALUE",
                        help="override a scenario key (repeatable)")
        sp.add_argument("--out", default=None, help="output directory")
        sp.add_argument("--threads", type=int, default=None,
                        help="BLAS thread count (default: CHNS_THREADS)")

    common(sub.add_parser("run", help="run one scenario"))
    sw = sub.add_parser("sweep", help="run a dt or mesh series")
    common(sw)
    sw.add_argument("--series", required=True, metavar="KEY=V1,V2,...",
                    help="the key and values to sweep")
    common(sub.add_parser("mesh-info", help="build the mesh and print stats"))
    common(sub.add_parser("validate-config",
                          help="parse and echo the resolved scenario"))
    return p


def _apply_threads(threads: Optional[int]) -> None:
    n = threads if threads is not None else os.environ.get("CHNS_THREADS")
    if n is None:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(int(n))


def _parse_overrides(pairs: List[str]) -> dict:
    out = {}
    for item in pairs:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not KEY=VALUE")
        k, v = item.split("=", 1)
        out[k.strip()] = _coerce(v.strip())
    return out


def _coerce(v: str):
    low = v.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(v)
    except ValueError:
        pass
    return v            # scenario parsing handles floats and pi-expressions


def _write_resolved(sc, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "resolved_config.json"), "w") as fh:
        json.dump(sc.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def main(argv: Optional[List[str]] = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    _apply_threads(args.threads)

    from . import harness
    from .harness import ConfigError
    from .solver import SolverError

    try:
        overrides = _parse_overrides(args.overrides)
        if args.out is not None:
            overrides["out_dir"] = args.out
        if args.verb == "sweep":
            key, _, vals = args.series.partition("=")
            if not vals:
                raise ConfigError("--series must look like KEY=V1,V2,...")
            series = [v.strip() for v in vals.split(",") if v.strip()]
            if len(series) < 2:
                raise ConfigError("--series needs at least two values")
            base = harness.scenario_from_toml(args.config, overrides)
            return _sweep(harness, base, args.config, overrides,
                          key.strip(), series)
        sc = harness.scenario_from_toml(args.config, overrides)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    if args.verb == "validate-config":
        json.dump(sc.to_dict(), sys.stdout, indent=2, sort_keys=True)
        print()
        return 0
    if args.verb == "mesh-info":
        return _mesh_info(harness, sc)
    # run
    try:
        _write_resolved(sc, sc.out_dir)
        harness.run(sc)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 1
    return 0


def _mesh_info(harness, sc) -> int:
    import numpy as np
    topo = harness.build_mesh(sc)
    levels, counts = np.unique(topo.elem_levels, return_counts=True)
    print(f"elements: {topo.n_elements}")
    print(f"nodes: {topo.n_nodes}")
    print(f"hanging slots: {topo.n_hanging}")
    for lev, cnt in zip(levels, counts):
        print(f"level {lev}: {cnt} octants")
    parts, loads = np.unique(topo.partition_of, return_counts=True)
    for pt, ld in zip(parts, loads):
        print(f"partition {pt}: {ld} elements")
    return 0


def _sweep(harness, base, config, overrides, key, series) -> int:
    """Run a series over one scenario key and fit convergence orders."""
    import csv as _csv

    from .diagnostics import convergence_order
    from .solver import SolverError

    rows = []
    for val in series:
        ov = dict(overrides)
        ov[key] = _coerce(val)
        try:
            sc = harness.scenario_from_toml(config, ov)
        except harness.ConfigError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return 2
        run_dir = os.path.join(sc.out_dir, f"{key}_{val.replace('/', '_')}")
        sc = dataclasses.replace(sc, out_dir=run_dir)
        _write_resolved(sc, run_dir)
        try:
            log = harness.run(sc)
        except SolverError as exc:
            print(f"solver failure: {exc}", file=sys.stderr)
            return 1
        err_v, err_phi = harness.mms_errors(log.final_state)
        spacing = sc.dt if key == "dt" else \
            max(sc.domain) / 2 ** sc.level / sc.order
        rows.append((spacing, err_v, err_phi))

    order_v = convergence_order([r[1] for r in rows], [r[0] for r in rows]) \
        if len(rows) >= 3 else float("nan")
    order_phi = convergence_order([r[2] for r in rows], [r[0] for r in rows]) \
        if len(rows) >= 3 else float("nan")
    out = os.path.join(base.out_dir, "sweep_summary.csv")
    os.makedirs(base.out_dir, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = _csv.writer(fh)
        w.writerow(["spacing", "error_v", "error_phi", "order_v",
                    "order_phi"])
        for spacing, ev, ep in rows:
            w.writerow([repr(spacing), repr(ev), repr(ep), repr(order_v),
                        repr(order_phi)])
    print(f"sweep summary written to {out}")
    print(f"fitted order v: {order_v}")
    print(f"fitted order phi: {order_phi}")
    return 0


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
