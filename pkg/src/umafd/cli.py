"""Command-line entry point: ``umafd {synth,train,eval,ablate,export-embeddings}``.

Exit codes: 0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from umafd.config import load_config
from umafd.data import ClipDataset, synth_generate
from umafd.errors import UMAFDError
from umafd.evaluation import (
    Protocol,
    ProtocolResult,
    ablation,
    depth_test_scores,
    export_embeddings,
    metrics,
    run_protocol,
    write_ablation,
    write_report,
)
from umafd.trainer import load_checkpoint, read_meta

log = logging.getLogger("umafd")


def _seeds(raw: str | None, default: int) -> list[int]:
    if raw is None:
        return [default]
    try:
        seeds = [int(s) for s in raw.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"--seeds expects comma-separated integers, got {raw!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("--seeds is empty")
    return seeds


def _dataset(data, run_cfg) -> ClipDataset:
    T, H, W = run_cfg.dims
    return ClipDataset.from_root(data, T, H, W)


def cmd_synth(args) -> int:
    cfg = load_config(args.config)
    root = synth_generate(cfg.synth, args.out)
    print(root / "manifest.csv")
    return 0


def _plot_run(out_dir: Path, report: Path, runs: list[Path]) -> None:
    from umafd.plotting import plot_report, plot_training_log

    plot_report(report, report.with_suffix(".png"))
    for run in runs:
        log_csv = run / "train_log.csv"
        if log_csv.exists():
            plot_training_log(log_csv, run / "train_log.png")


def cmd_train(args) -> int:
    base = load_config(args.config)
    seeds = _seeds(args.seeds, base.seed)
    protocol = Protocol(args.protocol)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results, runs = [], []
    for seed in seeds:
        cfg = base.with_seed(seed)
        dataset = _dataset(args.data, cfg)
        run_dir = out / protocol.value if len(seeds) == 1 else out / protocol.value / f"seed_{seed}"
        res = run_protocol(protocol, dataset, cfg, run_dir, init_from=args.init_from, resume=not args.no_resume)
        log.info("%s seed %d: %s", protocol.value, seed, res.metrics.table_row())
        results.append(res)
        runs.append(run_dir)
    report = write_report(out / f"report_{protocol.value}.csv", results)
    if not args.no_plots:
        _plot_run(out, report, runs)
    print(report)
    return 0


def _infer_protocol(meta: dict) -> Protocol:
    train = meta.get("train", {})
    if train.get("depth_supervised"):
        return Protocol.SUPERVISED_TARGET
    if sorted(train.get("enabled_losses", [])) == ["cls"]:
        return Protocol.BASELINE
    return Protocol.UMAFD


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    meta = read_meta(args.ckpt)
    protocol = Protocol(args.protocol) if args.protocol else _infer_protocol(meta)
    state = load_checkpoint(args.ckpt)
    dataset = _dataset(args.data, cfg)
    scores, labels = depth_test_scores(state.model, dataset)
    res = ProtocolResult(protocol, metrics(scores, labels), int(meta.get("seed", cfg.seed)), meta.get("train", {}), Path(args.ckpt), scores)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = write_report(out / f"report_{protocol.value}.csv", [res], with_median=False)
    if not args.no_plots:
        from umafd.plotting import plot_report

        plot_report(report, report.with_suffix(".png"))
    print(report)
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    dataset = _dataset(args.data, cfg)
    out = Path(args.out)
    rows = ablation(dataset, cfg, out)
    path = write_ablation(out / "ablation.csv", rows)
    if not args.no_plots:
        from umafd.plotting import plot_ablation

        plot_ablation(path, path.with_suffix(".png"))
    print(path)
    return 0


def cmd_export(args) -> int:
    cfg = load_config(args.config)
    dataset = _dataset(args.data, cfg)
    print(export_embeddings(args.ckpt, dataset, args.out))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="umafd", description="RGB-to-depth modality adaptation for fall detection.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="render a synthetic paired RGB/depth dataset")
    s.add_argument("--out", required=True, help="dataset root to write")
    s.add_argument("--config", help="key=value config file")
    s.set_defaults(func=cmd_synth)

    def common(q, need_out=True):
        q.add_argument("--data", required=True, help="dataset root holding manifest.csv")
        q.add_argument("--config", help="key=value config file")
        if need_out:
            q.add_argument("--out", required=True, help="output directory")
        q.add_argument("--no-plots", action="store_true", help="skip the PNG figures")

    t = sub.add_parser("train", help="train under one protocol and evaluate on the depth test split")
    common(t)
    t.add_argument("--protocol", required=True, choices=[p.value for p in Protocol])
    t.add_argument("--seeds", help="comma-separated seeds; a median row is added when more than one")
    t.add_argument("--init-from", help="checkpoint (.bin) to initialise weights from")
    t.add_argument("--no-resume", action="store_true", help="ignore existing epoch checkpoints")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate an existing checkpoint on the depth test split")
    common(e)
    e.add_argument("--ckpt", required=True, help="checkpoint (.bin)")
    e.add_argument("--protocol", choices=[p.value for p in Protocol], help="report label (default: from checkpoint)")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run the V-01..V-06 ablation ladder")
    common(a)
    a.set_defaults(func=cmd_ablate)

    x = sub.add_parser("export-embeddings", help="write pooled embeddings of the test clips to CSV")
    x.add_argument("--ckpt", required=True, help="checkpoint (.bin)")
    x.add_argument("--data", required=True, help="dataset root holding manifest.csv")
    x.add_argument("--config", help="key=value config file")
    x.add_argument("--out", required=True, help="CSV file to write")
    x.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except argparse.ArgumentTypeError as exc:
        parser.print_usage(sys.stderr)
        print(f"umafd: error: {exc}", file=sys.stderr)
        return 2
    except UMAFDError as exc:
        print(f"umafd: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except (OSError, RuntimeError, ValueError) as exc:
        print(f"umafd: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
