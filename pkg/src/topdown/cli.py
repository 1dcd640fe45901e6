"""Command-line entry point: ``topdown run|synthesize|report|audit``."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import __version__
from .config import RunConfig, load_config
from .engine import block_by_block_run, default_workers, mdf_emit, topdown_run, validate
from .evaluation import (
    MetricReport,
    TabulationQuery,
    abs_error_by_level,
    blau_quintile_bias,
    largest_group_criterion,
    signed_quantiles,
)
from .io import read_microdata, write_measurements, write_records, hist_records
from .spine import Spine
from .privacy import epsilon_of_rho, privacy_report, sensitivity_audit
from .synth import synthesize

log = logging.getLogger("topdown")


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


def _stage(name: str, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except StageError:
        raise
    except Exception as e:  # every failure is reported with the stage it happened in
        raise StageError(name, f"{type(e).__name__}: {e}") from e


def _fraction_map(m):
    return {k: str(v) for k, v in m.items()}


def build_metrics(cfg: RunConfig, mdf_leaves, cef_leaves) -> tuple[MetricReport, bool]:
    """Metrics on the tabulation geography (the spine as read, before any transformation)."""
    spine = Spine.from_csv(cfg.spine_path)
    report = MetricReport()
    passed = True
    rs = cfg.report
    strategy = cfg.strategy
    levels = rs.levels or list(dict.fromkeys(n.level_name for n in spine.iter_nodes()))
    for level in levels:
        units_m = TabulationQuery(strategy.group("TOTAL"), level).units(spine, mdf_leaves)
        units_c = TabulationQuery(strategy.group("TOTAL"), level).units(spine, cef_leaves)
        if not units_c:
            continue
        for qname in rs.queries:
            report.add(level, qname, "mean_abs_error", abs_error_by_level(units_m, units_c, strategy.group(qname)))
        for row in signed_quantiles(units_m, units_c, strategy.group("TOTAL"), rs.buckets) if rs.buckets else []:
            lo, hi = row.bucket
            tag = f"pop[{lo},{'inf' if hi is None else hi})"
            if row.empty:
                report.add(level, "TOTAL", f"{tag}.empty", 1)
                continue
            report.add(level, "TOTAL", f"{tag}.mean_L1", row.mean_abs)
            for q, v in zip((0.005, 0.025, 0.25, 0.5, 0.75, 0.975, 0.995), row.quantiles):
                report.add(level, "TOTAL", f"{tag}.q{q}", v)
        if rs.categories:
            cats = strategy.group(rs.categories)
            populated = sum(1 for u in units_c.values() if u.sum() > 0)
            if populated >= 5:
                rows, _ = blau_quintile_bias(units_m, units_c, cats)
                for r in rows:
                    if not r.empty:
                        report.add(level, "TOTAL", f"blau_q{r.quintile}.mean_signed_error", r.mean_signed_error)
    if rs.categories:
        cats = strategy.group(rs.categories)
        entities = cfg.entities()
        if entities:
            from .evaluation import tabulate_entities
            em, ec = tabulate_entities(mdf_leaves, entities), tabulate_entities(cef_leaves, entities)
            geo = "entities"
        else:
            em = TabulationQuery(cats, levels[-1]).units(spine, mdf_leaves)
            ec = TabulationQuery(cats, levels[-1]).units(spine, cef_leaves)
            geo = levels[-1]
        res = largest_group_criterion(em, ec, cats, threshold=rs.threshold, min_pop=rs.min_pop, required=rs.required)
        report.add(geo, rs.categories, "largest_group_pass_fraction", res.fraction)
        report.add(geo, rs.categories, "largest_group_evaluated", res.evaluated)
        passed = res.passed
    return report, passed


def _write_text(path: Path, text: str):
    path.write_text(text, encoding="utf-8")


def cmd_run(args) -> int:
    cert = None
    config_path = args.config
    if args.certificate:
        cert = json.loads(Path(args.certificate).read_text())
        config_path = config_path or cert["config_path"]
    if not config_path:
        raise StageError("config", "run needs --config or --certificate")
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    elif cert is not None:
        overrides["seed"] = str(cert["seed"])
    if args.workers is not None:
        overrides["workers"] = str(args.workers)
    cfg = _stage("config", load_config, config_path, overrides)
    if cert is not None and cert["config_sha256"] != cfg.digest:
        raise StageError("config", "config file differs from the one recorded in the certificate")
    spine, alloc = _stage("allocation", cfg.build_plan)
    if cfg.microdata is None:
        raise StageError("reader", "[run] microdata path is not set")
    t_start = time.perf_counter()
    cef = _stage("reader", read_microdata, cfg.microdata, cfg.schema, spine)
    t_read = time.perf_counter() - t_start
    workers = cfg.workers if cfg.workers > 0 else default_workers()
    runner = topdown_run if cfg.engine == "topdown" else block_by_block_run
    t0 = time.perf_counter()
    out, measurements = _stage("engine", runner, spine, cfg.schema, cfg.strategy, alloc, cef, cfg.seed,
                               invariants=cfg.invariants, zeros=cfg.zeros, workers=workers)
    t_engine = time.perf_counter() - t0
    problems = _stage("validator", validate, out, cfg.invariants, cfg.zeros, cef)
    if problems:
        raise StageError("validator", f"{len(problems)} problem(s); first: {problems[0]}")

    out_dir = Path(args.out or cfg.output_dir or ".")
    def write():
        out_dir.mkdir(parents=True, exist_ok=True)
        write_records(out_dir / "mdf.csv", mdf_emit(out), cfg.schema)
        write_measurements(out_dir / "measurements.csv", measurements)
        leaves_m = {l: out.solutions[l] for l in spine.leaves()}
        report, _ = build_metrics(cfg, leaves_m, cef)
        _write_text(out_dir / "metrics.csv", report.to_csv())
        _write_text(out_dir / "metrics.txt", report.to_text())
        _write_text(out_dir / "privacy.txt", privacy_report(alloc, spine, cfg.deltas))
        rho = alloc.rho
        certificate = {
            "version": __version__,
            "config_path": str(Path(config_path).resolve()),
            "config_sha256": cfg.digest,
            "seed": cfg.seed,
            "engine": cfg.engine,
            "rho": str(rho),
            "rho_float": float(rho),
            "psi_squared": str(alloc.psi_squared),
            "level_shares": _fraction_map(alloc.level_shares),
            "query_shares": {k: _fraction_map(v) for k, v in alloc.query_shares_by_level.items()},
            "node_shares": _fraction_map(alloc.node_shares),
            "node_query_shares": {k: _fraction_map(v) for k, v in alloc.node_query_shares.items()},
            "epsilon": [{"delta": d, "epsilon": epsilon_of_rho(rho, d)} for d in cfg.deltas],
            "timings": {"read": t_read, "engine": t_engine, **dict(out.timings)},
            "outputs": {
                name: hashlib.sha256((out_dir / name).read_bytes()).hexdigest()
                for name in ("mdf.csv", "measurements.csv")
            },
        }
        _write_text(out_dir / "certificate.json", json.dumps(certificate, indent=2) + "\n")
    _stage("writer", write)
    log.info("run complete: %s", out_dir)
    return 0


def cmd_synthesize(args) -> int:
    cfg = _stage("config", load_config, args.config)
    spine, _ = _stage("allocation", cfg.build_plan)
    seed = cfg.seed if args.seed is None else args.seed
    hists = _stage("synthesize", synthesize, cfg.schema, spine, seed, cfg.synth.leaf_mean,
                   cfg.synth.weights, cfg.invariants, cfg.zeros, cfg.synth.gq_extra)
    out = args.out or cfg.synth.out or cfg.microdata
    if out is None:
        raise StageError("writer", "no output path (use --out)")
    _stage("writer", write_records, out, hist_records(hists, cfg.schema), cfg.schema)
    return 0


def cmd_report(args) -> int:
    cfg = _stage("config", load_config, args.config)
    spine, _ = _stage("allocation", cfg.build_plan)
    mdf = _stage("reader", read_microdata, args.mdf, cfg.schema, spine)
    cef = _stage("reader", read_microdata, args.cef, cfg.schema, spine)
    report, passed = _stage("report", build_metrics, cfg, mdf, cef)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_text(out_dir / "metrics.csv", report.to_csv())
    _write_text(out_dir / "metrics.txt", report.to_text())
    sys.stdout.write(report.to_text())
    return 0 if passed else 1


def cmd_audit(args) -> int:
    cfg = _stage("config", load_config, args.config)
    spine, alloc = _stage("allocation", cfg.build_plan)
    rep = _stage("audit", sensitivity_audit, cfg.strategy.groups, alloc, spine, cfg.schema)
    print(f"pairs checked  {rep.pairs_checked}")
    print(f"max loss       {rep.max_loss}  (bound 2*rho = {rep.bound})")
    print(f"witness        {rep.witness}")
    return 0


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="topdown", description="Hierarchical discrete-Gaussian tabulation engine")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="measure, estimate, validate and write outputs")
    r.add_argument("--config")
    r.add_argument("--seed", type=int)
    r.add_argument("--workers", type=int)
    r.add_argument("--out", help="output directory (overrides [run] output_dir)")
    r.add_argument("--certificate", help="reproduce the run recorded in a certificate")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("synthesize", help="write synthetic microdata")
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synthesize)

    m = sub.add_parser("report", help="compare protected and confidential microdata")
    m.add_argument("--mdf", required=True)
    m.add_argument("--cef", required=True)
    m.add_argument("--config", required=True)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_report)

    a = sub.add_parser("audit", help="brute-force privacy-loss audit of a small configuration")
    a.add_argument("--config", required=True)
    a.set_defaults(func=cmd_audit)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("TOPDOWN_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = make_parser().parse_args(argv)
    try:
        return args.func(args)
    except StageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
