"""Command-line entry points.

Verbs: gen, pretrain, finetune, unlearn, eval, sweep, report. Every verb
takes --config <path> and --out <dir>; --seed overrides the config seed.
Exit codes: 0 success, 2 config error, 3 runtime failure.

The pipeline verbs build on each other inside one output directory:

    unlearnkit gen      --config c.json --out run/   # datasets
    unlearnkit pretrain --config c.json --out run/   # trains target + ideal
    unlearnkit finetune --config c.json --out run/   # alias of pretrain
    unlearnkit unlearn  --config c.json --out run/   # one unlearning run
    unlearnkit eval     --config c.json --out run/   # test-split reports
    unlearnkit sweep    --config c.json --out run/   # grid + best + report
    unlearnkit report   --config c.json --out run/   # ratio summary tables

`pretrain` and `finetune` are aliases: the stage list in the config
describes the whole training pipeline (pre-forget trunk plus the stage
that introduces the forget data), and one command executes it for the
target and ideal runs. Rerunning any verb with the same config and seed
reproduces its outputs byte for byte.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import ckpt as ckpt_mod
from . import harness, metrics
from .harness import ConfigError, PipelineError
from .lm import ConfigError as LmConfigError
from .synthbench import BenchError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _load(args) -> harness.ExperimentConfig:
    return harness.load_config(args.config, seed_override=args.seed)


def cmd_gen(args) -> int:
    config = _load(args)
    harness.generate(config, args.out)
    print(f"datasets written to {Path(args.out) / 'data'}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _load(args)
    manifest = harness.run_pipeline(config, args.out)
    print(f"target/ideal trained; pre-forget checkpoint at {manifest['pre_forget_tokens']} tokens")
    return EXIT_OK


def cmd_unlearn(args) -> int:
    config = _load(args)
    art = harness.load_artifacts(config, args.out)
    params = harness.run_unlearn(art)
    u = config.unlearn
    name = f"{u.get('method', 'msa')}_a{u.get('alpha', 1.0):g}_b{u.get('beta', 0.0):g}"
    out_path = Path(args.out) / "unlearn" / f"{name}.msck"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    ckpt_mod.save(
        ckpt_mod.CheckpointRecord(params=params, run_id=name, stage_tag="unlearn",
                                  created_at=harness.CREATED_AT),
        out_path,
    )
    print(f"unlearned checkpoint: {out_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    config = _load(args)
    art = harness.load_artifacts(config, args.out)
    rows = [("target", art.target), ("ideal", art.ideal)]
    for p in sorted((Path(args.out) / "unlearn").glob("*.msck")):
        rows.append((p.stem, ckpt_mod.load(p).params))
    reports_dir = Path(args.out) / "reports"
    reports_dir.mkdir(parents=True, exist_ok=True)
    reports = []
    for model_id, params in rows:
        rep = harness.evaluate_model(params, config, art.bundle, "test", model_id)
        (reports_dir / f"eval_{model_id}.json").write_text(rep.to_json() + "\n")
        reports.append(rep)
    metrics.write_reports_csv(reports, reports_dir / "eval_all.csv")
    print(f"{len(reports)} reports in {reports_dir}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    config = _load(args)
    art = harness.load_artifacts(config, args.out)
    method = config.unlearn.get("method", "msa")
    result = harness.sweep(art, method=method)
    sweep_dir = Path(args.out) / "sweep"
    sweep_dir.mkdir(parents=True, exist_ok=True)

    rows = result["leaderboard"]
    cols = sorted({k for r in rows for k in r})
    import csv

    with open(sweep_dir / "leaderboard.csv", "w", newline="") as fh:
        w = csv.writer(fh, quoting=csv.QUOTE_MINIMAL)
        w.writerow(cols)
        for r in rows:
            w.writerow([_cell(r.get(c)) for c in cols])
    ckpt_mod.save(
        ckpt_mod.CheckpointRecord(params=result["best_params"], run_id=f"{method}_swept",
                                  stage_tag="unlearn", created_at=harness.CREATED_AT),
        sweep_dir / "best.msck",
    )
    reports_dir = Path(args.out) / "reports"
    reports_dir.mkdir(parents=True, exist_ok=True)
    (reports_dir / f"eval_{method}_swept.json").write_text(result["test_report"].to_json() + "\n")
    print(f"best alpha={result['best_alpha']:g} beta={result['best_beta']:g} "
          f"score={result['best_score']:.6f}; leaderboard rows={len(rows)}")
    return EXIT_OK


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def cmd_report(args) -> int:
    config = _load(args)
    del config
    reports_dir = Path(args.out) / "reports"
    files = sorted(reports_dir.glob("eval_*.json"))
    if not files:
        raise PipelineError(f"no eval reports under {reports_dir}")
    reports = [metrics.EvalReport.from_json(p.read_text()) for p in files]
    order = {"target": 0, "ideal": 1}
    reports.sort(key=lambda r: (order.get(r.model_id, 2), r.model_id))
    csv_path, md_path = harness.write_report_files(reports, reports_dir)
    print(f"wrote {csv_path} and {md_path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="unlearnkit",
                                     description="desk-scale unlearning laboratory")
    sub = parser.add_subparsers(dest="command", required=True)
    handlers = {
        "gen": cmd_gen,
        "pretrain": cmd_train,
        "finetune": cmd_train,
        "unlearn": cmd_unlearn,
        "eval": cmd_eval,
        "sweep": cmd_sweep,
        "report": cmd_report,
    }
    for name, fn in handlers.items():
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.set_defaults(handler=fn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except (ConfigError, BenchError, LmConfigError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
