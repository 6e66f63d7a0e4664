"""``mosabench`` command line: generate | pretrain | adapt | eval | report.

Exit codes: 0 ok, 1 runtime or I/O failure, 2 configuration or input error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from . import bench, storage
from .metrics import evaluate
from .mosa import merge
from .storage import FormatError

log = logging.getLogger("mosabench")

EVAL_COLUMNS = ("checkpoint", "dataset", "ade", "fde", "topk_ade", "topk_fde", "n_samples", "k")


def _config(args) -> bench.ExperimentConfig:
    return bench.load_config(args.config, out=args.out, seed_override=args.seed_override)


def cmd_generate(args) -> int:
    cfg = _config(args)
    counts = bench.generate(cfg)
    for split, n in counts.items():
        print(f"{split}: {n} samples")
    print(f"wrote {len(counts) + 1} files to {bench.data_dir(cfg)}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    _, res = bench.run_pretrain(cfg)
    print(f"pretrained {res.epochs_run} epochs; best epoch {res.best_epoch}, "
          f"val Top-K FDE {res.best_val_fde:.6f}")
    print(f"checkpoint: {bench.checkpoint_path(cfg)}")
    return 0


def cmd_adapt(args) -> int:
    cfg = _config(args)

    def progress(row):
        print(",".join(bench._cell_str(x) for x in row), flush=True)

    print(",".join(bench.RESULT_COLUMNS))
    rows = bench.run_adapt(cfg, jobs=args.jobs, progress=progress)
    print(f"{len(rows)} rows -> {cfg.out / 'adapt' / 'results.csv'}")
    return 0


def cmd_eval(args) -> int:
    try:
        model = storage.load_checkpoint(args.checkpoint)
        ds = storage.load_dataset(args.dataset, args.scenes)
    except (KeyError, TypeError) as e:
        raise FormatError(f"malformed input: {e}") from None
    if args.merge and hasattr(model, "adapters"):
        model = merge(model)
    rep = evaluate(model, ds)
    row = (str(args.checkpoint), str(args.dataset), rep.ade, rep.fde, rep.topk_ade, rep.topk_fde,
           rep.n_samples, rep.k)
    print(",".join(EVAL_COLUMNS))
    print(",".join(bench._cell_str(x) for x in row))
    if args.csv:
        path = Path(args.csv)
        new = not path.exists()
        with open(path, "a", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if new:
                w.writerow(EVAL_COLUMNS)
            w.writerow([bench._cell_str(x) for x in row])
    return 0


def cmd_report(args) -> int:
    path = bench.report(args.results, args.out)
    print(f"summary: {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mosabench", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="TOML experiment config (defaults apply when omitted)")
        sp.add_argument("--out", help="output directory (overrides experiment.out and $%s)" % bench.OUT_ENV)
        sp.add_argument("--seed-override", type=int, help="replace every seed in the config")

    common(sub.add_parser("generate", help="write the scenario's dataset files"))
    common(sub.add_parser("pretrain", help="train a source checkpoint"))
    sp = sub.add_parser("adapt", help="run every adaptation cell and write results.csv")
    common(sp)
    sp.add_argument("--jobs", type=int, default=1, help="parallel cells (default 1)")

    sp = sub.add_parser("eval", help="evaluate a checkpoint on a dataset file")
    sp.add_argument("checkpoint")
    sp.add_argument("dataset")
    sp.add_argument("--scenes", help="scenes file (default: scenes.json next to the dataset)")
    sp.add_argument("--merge", action="store_true", help="fold adapters into the weights first")
    sp.add_argument("--csv", help="append the report row to this CSV")

    sp = sub.add_parser("report", help="aggregate results.csv over seeds")
    sp.add_argument("results")
    sp.add_argument("--out", help="summary CSV path (default: summary.csv beside the input)")
    return p


_COMMANDS = {"generate": cmd_generate, "pretrain": cmd_pretrain, "adapt": cmd_adapt,
             "eval": cmd_eval, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be at least 1", file=sys.stderr)
        return 2
    try:
        return _COMMANDS[args.command](args)
    except (bench.ConfigError, bench.ReportError, FormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (OSError, bench.CellFailure, RuntimeError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
