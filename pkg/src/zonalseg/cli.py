"""Command-line entry point: ``zonalseg <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import trainer
from .checkpoint import load_checkpoint, save_checkpoint
from .data_pipeline import load_dataset, write_phantom_dataset
from .losses_metrics import SUBSETS, ZONES, SegReport, format_cell

log = logging.getLogger("zonalseg")


def _thread_cap():
    value = os.environ.get("ZONALNET_THREADS")
    if not value:
        return None
    n = int(value)
    if n < 1:
        raise SystemExit("ZONALNET_THREADS must be a positive integer")
    return n


def _load_config(args) -> trainer.TrainConfig:
    cfg = trainer.TrainConfig.load(args.config) if args.config else trainer.desk_profile()
    if getattr(args, "data", None):
        cfg.dataset = args.data
    if getattr(args, "folds", None):
        cfg.folds = args.folds
    if not cfg.dataset:
        raise SystemExit("no dataset: pass --data or set 'dataset' in the config")
    return cfg.validate()


def cmd_phantoms(args):
    ids = write_phantom_dataset(args.out, args.count, args.seed, args.slices, args.size,
                                reader2=args.reader2, start=args.start)
    print(f"wrote {len(ids)} phantom cases to {args.out}")


def cmd_train(args):
    cfg = _load_config(args)
    cases = load_dataset(cfg.dataset)
    val = load_dataset(args.val_data) if args.val_data else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    res = trainer.train(cfg, trainer.slices_from_cases(cases, cfg), validation=val,
                        out_dir=out, resume=args.resume,
                        progress=lambda e, loss: print(f"epoch {e + 1}/{cfg.epochs} loss {loss:.5f}",
                                                       flush=True))
    (out / "history.json").write_text(json.dumps({"loss": res.history,
                                                  "validation": res.validation_history}))
    print(f"final checkpoint: {res.final_model_path}")
    print(f"best checkpoint: {res.best_model_path}")


def cmd_cv(args):
    cfg = _load_config(args)
    cases = load_dataset(cfg.dataset)
    candidates = json.loads(Path(args.candidates).read_text()) if args.candidates else None
    res = trainer.cross_validate(cfg, cases, candidates, out_dir=args.out)
    for ci, scores in res.fold_scores.items():
        print(f"candidate {ci}: " + " ".join(f"{s:.4f}" for s in scores))
    print(f"selected candidate {res.best_candidate}, fold {res.best_fold}")
    if args.out:
        path = save_checkpoint(Path(args.out) / "selected", res.best_model,
                               metadata={"train_config": res.best_config.to_dict(),
                                         "fold_scores": res.fold_scores})
        print(f"selected checkpoint: {path}")


def _print_summary(report: SegReport):
    summary = report.summary()
    print(f"{report.label or 'report'}:")
    for subset in SUBSETS:
        cells = "  ".join(f"{z} {format_cell(summary[z][subset]) or '-':>11}" for z in ZONES)
        print(f"  {subset:<16} {cells}")


def cmd_eval(args):
    model, _, meta = load_checkpoint(args.ckpt)
    crop_mm = args.crop_mm
    if crop_mm is None:
        crop_mm = meta.get("train_config", {}).get("crop_mm", 93.0)
    cases = load_dataset(args.data, args.reader2)
    result = trainer.evaluate_model(model.eval(), cases, crop_mm)
    _print_summary(result.report)
    if result.inter_reader is not None:
        _print_summary(result.inter_reader)
        for (zone, subset), t in result.tests.items():
            if t is not None:
                print(f"  signed-rank {zone}/{subset}: p={t.p_value:.4g} ({t.method})")
    if result.skipped:
        print(f"skipped {len(result.skipped)} case(s) without masks")
    out = Path(args.report)
    out.parent.mkdir(parents=True, exist_ok=True)
    if out.suffix == ".csv":
        text = result.report.to_csv()
        if result.inter_reader is not None:
            out.with_name(out.stem + "_inter_reader.csv").write_text(result.inter_reader.to_csv())
        out.write_text(text)
    else:
        out.write_text(json.dumps(result.to_dict(), indent=2, sort_keys=True))


def cmd_predict(args):
    mask = trainer.predict_file(args.ckpt, args.inp, args.out)
    print(f"wrote {mask.n_slices}-slice mask to {args.out}")


def _read_report(path) -> SegReport:
    d = json.loads(Path(path).read_text())
    return SegReport.from_dict(d["model"] if "model" in d else d)


def cmd_stats(args):
    if len(args.report) != 2:
        raise SystemExit("stats needs exactly two --report arguments")
    a, b = (_read_report(p) for p in args.report)
    tests = trainer.compare_reports(a, b, paired=args.test == "signedrank")
    rows = {}
    for (zone, subset), t in tests.items():
        rows[f"{zone}/{subset}"] = t.to_dict() if t is not None else None
        if t is not None:
            print(f"{zone:<3} {subset:<16} stat={t.statistic:<8g} p={t.p_value:.4g} ({t.method})")
        else:
            print(f"{zone:<3} {subset:<16} n/a")
    if args.out:
        Path(args.out).write_text(json.dumps(rows, indent=2))


def cmd_ablation(args):
    cfg = _load_config(args)
    train_cases = load_dataset(cfg.dataset)
    test_cases = load_dataset(args.test_data)
    res = trainer.ablation_study(cfg, train_cases, test_cases)
    for report in res["reports"].values():
        _print_summary(report)
    out = {name: r.to_dict() for name, r in res["reports"].items()}
    out["signed_rank"] = {f"{z}/{s}": (t.to_dict() if t is not None else None)
                          for (z, s), t in res["tests"].items()}
    if args.report:
        Path(args.report).write_text(json.dumps(out, indent=2, sort_keys=True))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="zonalseg", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantoms", help="write a synthetic phantom dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--start", type=int, default=0, help="first case number")
    s.add_argument("--slices", type=int, default=12)
    s.add_argument("--size", type=int, default=192)
    s.add_argument("--reader2", action="store_true", help="also write a second reader's masks")
    s.set_defaults(func=cmd_phantoms)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--config", help="JSON TrainConfig (default: desk profile)")
    s.add_argument("--out", required=True)
    s.add_argument("--data")
    s.add_argument("--val-data")
    s.add_argument("--resume")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("cv", help="patient-level k-fold cross-validation")
    s.add_argument("--config")
    s.add_argument("--folds", type=int, default=5)
    s.add_argument("--data")
    s.add_argument("--candidates", help="JSON list of config overrides to compare")
    s.add_argument("--out")
    s.set_defaults(func=cmd_cv)

    s = sub.add_parser("eval", help="stratified DSC report for a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--reader2")
    s.add_argument("--report", required=True, help="output .csv or .json")
    s.add_argument("--crop-mm", type=float, help="default: the crop used in training")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("predict", help="segment one image volume")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("stats", help="compare two JSON reports")
    s.add_argument("--report", action="append", required=True)
    s.add_argument("--test", choices=("ranksum", "signedrank"), required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("ablation", help="train with and without the stem max-pool")
    s.add_argument("--config")
    s.add_argument("--data")
    s.add_argument("--test-data", required=True)
    s.add_argument("--report")
    s.set_defaults(func=cmd_ablation)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    with threadpool_limits(limits=_thread_cap()):
        args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
