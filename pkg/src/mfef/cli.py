"""``mfef train | ablate | report``.

Exit codes: 0 success, 2 invalid configuration, 3 non-finite loss.
"""
from __future__ import annotations

import argparse
import json
import logging
import statistics
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .config import ExperimentConfig, bundled_config
from .core_types import ConfigError
from .data import load_dataset
from .losses import NonFiniteLossError
from .trainer import ABLATION_CASES, CASE_LABELS, SCHEMA_VERSION, train

log = logging.getLogger("mfef")

EXIT_OK, EXIT_CONFIG, EXIT_NONFINITE = 0, 2, 3


def _load_config(args) -> ExperimentConfig:
    if args.config.startswith("builtin:"):
        cfg = ExperimentConfig.loads(bundled_config(args.config[len("builtin:"):]))
    else:
        cfg = ExperimentConfig.load(args.config)
    if args.seed is not None:
        cfg.seeds = [args.seed]
    if args.out is not None:
        cfg.out_dir = args.out
    return cfg


def _run_one(cfg: ExperimentConfig, seed: int, out: Path, resume: bool, case: str | None) -> dict:
    """Train one seed; ``case=None`` is the configured cohort, else an ablation case."""
    train_set, test_set = load_dataset(cfg.dataset, seed)
    cohort = cfg.cohort
    extra = {"network": "+".join(cfg.archs)}
    if case is not None:
        cohort = cohort.with_case(case)
        extra.update(case=case, component=CASE_LABELS[case])
    report = train(cohort, cfg.archs, train_set, test_set, seed=seed, policy=cfg.augment, out_dir=out,
                   resume=resume, checkpoint_every=cfg.checkpoint_every, eval_every=cfg.eval_every,
                   extra_summary=extra)
    return report.summary


def _jobs(cfg: ExperimentConfig, cases) -> list[tuple]:
    root = Path(cfg.out_dir)
    jobs = []
    for case in cases:
        for seed in cfg.seeds:
            if case is None:
                out = root / f"seed_{seed}"
            elif case == "baseline":
                out = root / "baseline" / f"seed_{seed}"
            else:
                out = root / f"case_{case}" / f"seed_{seed}"
            jobs.append((case, seed, out))
    return jobs


def _execute(cfg: ExperimentConfig, jobs: list[tuple], resume: bool, n_jobs: int) -> list[dict]:
    jobs = [("A" if case == "baseline" else case, seed, out) for case, seed, out in jobs]
    if n_jobs > 1:
        with ProcessPoolExecutor(n_jobs) as pool:
            futs = [pool.submit(_run_one, cfg, seed, out, resume, case) for case, seed, out in jobs]
            return [f.result() for f in futs]
    return [_run_one(cfg, seed, out, resume, case) for case, seed, out in jobs]


def _guard(fn):
    def wrapped(args):
        try:
            return fn(args)
        except (ConfigError, FileNotFoundError) as e:
            print(f"error: {e}", file=sys.stderr)
            return EXIT_CONFIG
        except NonFiniteLossError as e:
            print(f"error: {e}", file=sys.stderr)
            out = Path(getattr(args, "out", None) or ".")
            out.mkdir(parents=True, exist_ok=True)
            (out / "diagnostic.json").write_text(json.dumps(
                {"term": e.term, "value": repr(e.value), "traceback": traceback.format_exc()}, indent=2))
            return EXIT_NONFINITE
    return wrapped


@_guard
def cmd_train(args) -> int:
    cfg = _load_config(args)
    root = Path(cfg.out_dir)
    root.mkdir(parents=True, exist_ok=True)
    (root / "config.yaml").write_text(cfg.dumps())
    cases = (None, "baseline") if cfg.baseline else (None,)
    summaries = _execute(cfg, _jobs(cfg, cases), args.resume, args.jobs)
    for s in summaries:
        print(json.dumps(s, sort_keys=True))
    return EXIT_OK


@_guard
def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    root = Path(cfg.out_dir)
    root.mkdir(parents=True, exist_ok=True)
    (root / "config.yaml").write_text(cfg.dumps())
    summaries = _execute(cfg, _jobs(cfg, tuple(ABLATION_CASES)), args.resume, args.jobs)
    table = ablation_table(summaries)
    print(render_ablation(table))
    with open(root / "ablation.jsonl", "w") as f:
        for row in table:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    return EXIT_OK


# ------------------------------------------------------------------ reporting

def _stats(values: list[float]) -> dict:
    values = [v for v in values if v is not None]
    if not values:
        return {"median": None, "best": None, "runs": 0}
    return {"median": statistics.median(values), "best": min(values), "runs": len(values)}


def ablation_table(summaries: list[dict]) -> list[dict]:
    rows = []
    for case in ABLATION_CASES:
        runs = [s for s in summaries if s.get("case") == case]
        if not runs:
            continue
        msfe, da, okd = ABLATION_CASES[case]
        rows.append({
            "schema": SCHEMA_VERSION,
            "case": case,
            "component": CASE_LABELS[case],
            "flags": {"use_msfe": msfe, "use_dual_attention": da, "use_okd": okd},
            "student": _stats([s.get("best_student_test_error") for s in runs]),
            "fused": _stats([s.get("test_error_fusion") for s in runs]),
        })
    return rows


def _fmt(x) -> str:
    return "-" if x is None else f"{x:.2f}"


def render_ablation(rows: list[dict]) -> str:
    lines = [f"{'Case':<5}{'Component':<24}{'Student med':>12}{'best':>8}{'Fused med':>11}{'best':>8}"]
    for r in rows:
        lines.append(f"{r['case']:<5}{r['component']:<24}{_fmt(r['student']['median']):>12}"
                     f"{_fmt(r['student']['best']):>8}{_fmt(r['fused']['median']):>11}{_fmt(r['fused']['best']):>8}")
    return "\n".join(lines)


@dataclass
class ResultsTable:
    """One row per network: baseline, best-student (MFEF-S) and fused (MFEF) top-1 errors."""

    rows: list[dict] = field(default_factory=list)

    def render(self) -> str:
        head = f"{'Network':<22}{'Baseline':>16}{'MFEF-S':>16}{'MFEF':>16}"
        sub = f"{'':<22}" + f"{'med / best':>16}" * 3
        lines = [head, sub]
        for r in self.rows:
            cells = [f"{_fmt(r[k]['median'])} / {_fmt(r[k]['best'])}" if r[k]["runs"] else "(missing)"
                     for k in ("baseline", "mfef_s", "mfef")]
            lines.append(f"{r['network']:<22}" + "".join(f"{c:>16}" for c in cells))
        return "\n".join(lines)

    def records(self) -> list[dict]:
        return [{"schema": SCHEMA_VERSION, **r} for r in self.rows]


def collect_summaries(results_dir) -> list[dict]:
    out = []
    for path in sorted(Path(results_dir).rglob("summary.json")):
        s = json.loads(path.read_text())
        s["_path"] = str(path.relative_to(results_dir))
        out.append(s)
    return out


def results_table(summaries: list[dict]) -> ResultsTable:
    by_net: dict[str, dict[str, list]] = {}
    for s in summaries:
        net = s.get("network") or "+".join(s.get("archs", []))
        flags = s.get("flags", {})
        slot = by_net.setdefault(net, {"baseline": [], "mfef_s": [], "mfef": []})
        if s.get("case") == "A" or not any(flags.values()):
            # students are independent here; student 0 stands in for a single network
            slot["baseline"].append(s["test_error_students"][0] if s.get("test_error_students") else None)
        elif all(flags.values()):
            slot["mfef_s"].append(s.get("best_student_test_error"))
            slot["mfef"].append(s.get("test_error_fusion"))
    rows = [{"network": net, **{k: _stats(v) for k, v in slots.items()}} for net, slots in sorted(by_net.items())]
    return ResultsTable(rows)


def cmd_report(args) -> int:
    root = Path(args.results_dir)
    summaries = collect_summaries(root) if root.is_dir() else []
    if not summaries:
        print(f"warning: no completed runs under {root}", file=sys.stderr)
    table = results_table(summaries)
    print(table.render())
    abl = ablation_table(summaries)
    if abl:
        print()
        print(render_ablation(abl))
    if args.json:
        with open(args.json, "w") as f:
            for rec in table.records():
                f.write(json.dumps(rec, sort_keys=True) + "\n")
            for rec in abl:
                f.write(json.dumps(rec, sort_keys=True) + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mfef", description="Multi-scale feature extraction and fusion for online distillation")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn in (("train", cmd_train), ("ablate", cmd_ablate)):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="YAML path, or builtin:<name>")
        sp.add_argument("--seed", type=int, default=None, help="run only this seed")
        sp.add_argument("--resume", action="store_true", help="continue from checkpoints in the output dir")
        sp.add_argument("--out", default=None, help="override out_dir")
        sp.add_argument("--jobs", type=int, default=1, help="parallel seed processes")
        sp.set_defaults(func=fn)
    sp = sub.add_parser("report")
    sp.add_argument("results_dir")
    sp.add_argument("--json", default=None, help="also write line-delimited records here")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
