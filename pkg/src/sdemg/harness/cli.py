"""Command-line entry point: ``sdemg {synth,prepare,train,denoise,evaluate,report}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from ..errors import SdemgError
from ..ingest import read_segments
from . import pipeline
from .config import PROFILES, load_config
from .plotting import render_report

log = logging.getLogger("sdemg")


def _common(parser):
    parser.add_argument("--config", type=Path, help="plain-text key = value configuration file")
    parser.add_argument("--profile", choices=PROFILES, default="desk")
    parser.add_argument("--seed", type=int, help="global seed (overrides the configuration)")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one configuration key; repeatable")


def _config(args):
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise SdemgError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
        overrides.setdefault("optimizer.seed", str(args.seed))
    return load_config(args.config, args.profile, overrides)


def _method_paths(items):
    out = {}
    for item in items:
        method, sep, path = item.partition("=")
        if not sep:
            raise SdemgError(f"--method expects NAME=PATH, got {item!r}")
        out[method] = path
    return out


def build_parser():
    parser = argparse.ArgumentParser(prog="sdemg", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a surrogate sEMG/ECG corpus")
    _common(p)
    p.add_argument("--out", type=Path, help="corpus directory (default paths.corpus_dir)")

    p = sub.add_parser("prepare", help="mix train/val/test pairs from a corpus")
    _common(p)
    p.add_argument("--corpus", type=Path)

    p = sub.add_parser("train", help="fit the noise-prediction network")
    _common(p)
    p.add_argument("--checkpoint", type=Path)

    p = sub.add_parser("denoise", help="denoise a segment file")
    _common(p)
    p.add_argument("--method", choices=pipeline.METHODS, default="sdemg")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--in", dest="in_path", type=Path, required=True)
    p.add_argument("--out", dest="out_path", type=Path, required=True)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--sigma-mode", choices=("beta_tilde", "beta", "zero"))

    p = sub.add_parser("evaluate", help="score denoised outputs against a prepared split")
    _common(p)
    p.add_argument("--split", type=Path, help="prepared split directory (default paths.test_dir)")
    p.add_argument("--method", action="append", default=[], metavar="NAME=PATH",
                   help="denoised segment file for a method; repeatable")
    p.add_argument("--out", type=Path, help="report directory (default paths.report)")

    p = sub.add_parser("report", help="render figures and the summary table from evaluation results")
    _common(p)
    p.add_argument("--results", type=Path, help="directory holding results.csv (default paths.report)")
    p.add_argument("--split", type=Path, help="prepared split for the waveform example")
    p.add_argument("--denoised", type=Path, help="sdemg output for the waveform example")
    p.add_argument("--index", type=int, default=0, help="segment shown in the waveform example")
    return parser


def summary_table(table) -> str:
    lines = [f"{'method':<10}{'n':>6}{'SNR_imp dB':>12}{'RMSE':>12}{'RMSE_ARV':>12}{'RMSE_MF Hz':>12}"]
    for e in table:
        if e["input_snr_db"] == "all":
            lines.append(f"{e['method']:<10}{e['n']:>6}{e['snr_imp_db']:>12.3f}{e['rmse']:>12.4e}"
                         f"{e['rmse_arv']:>12.3e}{e['rmse_mf_hz']:>12.3f}")
    return "\n".join(lines)


def run(args) -> int:
    config = _config(args)
    paths = config.paths
    if args.command == "synth":
        out = pipeline.cmd_synth(config, args.out)
        print(f"corpus written to {out}")
    elif args.command == "prepare":
        counts = pipeline.cmd_prepare(config, args.corpus)
        print(" ".join(f"{k}={v}" for k, v in counts.items()))
    elif args.command == "train":
        pipeline.save_config(config, Path(paths.report) / "config.txt")
        result = pipeline.cmd_train(config, args.checkpoint)
        print(f"best validation loss {result.best_val_loss:.6f} at epoch {result.best_epoch}; "
              f"checkpoint {result.checkpoint}")
    elif args.command == "denoise":
        checkpoint = args.checkpoint or (paths.checkpoint if args.method == "sdemg" else None)
        seed = config.seed if args.seed is None else args.seed
        errors = pipeline.cmd_denoise(checkpoint, args.in_path, args.out_path, seed, args.method,
                                      args.batch_size, args.sigma_mode)
        for k, msg in sorted(errors.items()):
            log.error("segment %d: %s", k, msg)
        if errors:
            return 1
    elif args.command == "evaluate":
        out = args.out or Path(paths.report)
        pipeline.cmd_evaluate(args.split or paths.test_dir, _method_paths(args.method), out)
        table = pipeline.aggregate(pipeline.read_results(out / "results.csv"))
        print(summary_table(table))
    elif args.command == "report":
        results_dir = args.results or Path(paths.report)
        table = pipeline.aggregate(pipeline.read_results(results_dir / "results.csv"))
        example = None
        if args.split and args.denoised:
            split = pipeline.load_split(args.split)
            den = read_segments(args.denoised)
            k = args.index
            example = dict(clean=split.clean[k].samples, noisy=split.noisy[k].samples,
                           denoised=den[k].samples, fs=split.clean[k].fs,
                           title=f"{split.ids[k]} at {split.target_snrs[k]:g} dB input SNR")
        text = summary_table(table)
        (results_dir / "summary.txt").write_text(text + "\n")
        for path in render_report(table, results_dir, results_dir / "train_log.csv", example):
            print(f"wrote {path}")
        print(text)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except (SdemgError, OSError) as exc:
        print(f"sdemg {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
