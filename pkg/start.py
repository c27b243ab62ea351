#!/usr/bin/env python3
"""
Vertebra Locator Command Line
Runs one pipeline stage: synth, train, learn-kernels, infer, refine or eval
"""

import argparse
import logging
import sys

from vertebra_locator import FORMAT_VERSIONS, __version__
from vertebra_locator.config import load_config, parse_set_options
from vertebra_locator.errors import VertebraLocatorError
from vertebra_locator import pipeline


def version_text():
    lines = [f"vertebra-locator {__version__}"]
    lines += [f"  {name}: format {number}" for name, number in FORMAT_VERSIONS.items()]
    return "\n".join(lines)


def build_parser():
    parser = argparse.ArgumentParser(prog="start.py", description="Vertebra centroid localization pipeline")
    parser.add_argument("--config", help="KEY=value config file (see config_template.txt)")
    parser.add_argument("--seed", type=int, help="override SEED")
    parser.add_argument("--out", help="override OUTPUT_DIR")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key (repeatable)")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    parser.add_argument("--version", action="version", version=version_text())
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", help="generate the synthetic training and evaluation sets")
    sub.add_parser("train", help="train the heatmap network")
    sub.add_parser("learn-kernels", help="learn message passing kernels and the shape dictionary")
    infer = sub.add_parser("infer", help="heatmaps and landmarks for one volume")
    infer.add_argument("volume", help="path to a .svh volume header")
    infer.add_argument("--to", help="output folder (default OUTPUT_DIR/infer/<volume>)")
    refine = sub.add_parser("refine", help="sparse shape refinement of a landmark CSV")
    refine.add_argument("landmarks", help="path to a landmark CSV")
    refine.add_argument("--to", help="output CSV (default OUTPUT_DIR/refined/<name>_refined.csv)")
    sub.add_parser("eval", help="evaluate every stage on the evaluation set")
    return parser


def resolve_config(args):
    overrides = parse_set_options(args.set)
    if args.seed is not None:
        overrides["SEED"] = str(args.seed)
    if args.out is not None:
        overrides["OUTPUT_DIR"] = args.out
    return load_config(args.config, overrides=overrides)


def report(command, result):
    """Stage summary lines."""
    if command == "synth":
        print(f"✅ Training set: {result['train_manifest']}")
        print(f"✅ Evaluation set: {result['test_manifest']}")
    elif command == "train":
        losses = result["losses"]
        if losses:
            print(f"📉 Loss {losses[0]:.6g} -> {losses[-1]:.6g} over {len(losses)} epochs")
        print(f"✅ Model saved to {result['model']}")
        for size, log in result["subset_logs"].items():
            print(f"✅ Network on the first {size} cases trained, log at {log}")
    elif command == "learn-kernels":
        print(f"✅ {result['edges']} kernels saved to {result['kernels']}")
        print(f"✅ Shape dictionary saved to {result['dictionary']}")
    elif command == "infer":
        present = int(result.net_landmarks.present.sum())
        print(f"✅ Network found {present}/{len(result.net_landmarks)} vertebrae")
        if result.passed_landmarks is None:
            print("⚠️ No kernel bundle found, message passing skipped")
        else:
            print(f"✅ After message passing: {int(result.passed_landmarks.present.sum())} vertebrae")
        for name, path in result.paths.items():
            print(f"📁 {name}: {path}")
    elif command == "refine":
        refined, path = result
        if refined.skipped:
            print("⚠️ Fewer than two landmarks present, refinement skipped")
        else:
            print(f"✅ Refined using {len(refined.subset)} ordered landmarks (lambda {refined.lam:.4g})")
        print(f"📁 refined: {path}")
    elif command == "eval":
        for r in result.reports:
            overall = r.region("All")
            mean = "n/a" if overall.mean is None else f"{overall.mean:.2f} mm"
            rate = "n/a" if overall.id_rate is None else f"{overall.id_rate:.1%}"
            print(f"📊 {r.method:<18} mean error {mean}, Id.Rate {rate}")
        print(f"✅ Report saved to {result.paths['report']}")


def run(command, config, args):
    if command == "synth":
        return pipeline.cmd_synth(config)
    if command == "train":
        return pipeline.cmd_train(config)
    if command == "learn-kernels":
        return pipeline.cmd_learn_kernels(config)
    if command == "infer":
        return pipeline.cmd_infer(config, args.volume, args.to)
    if command == "refine":
        return pipeline.cmd_refine(config, args.landmarks, args.to)
    return pipeline.cmd_eval(config)


def main(argv=None):
    """Main entry point; returns the process exit code"""
    args = build_parser().parse_args(argv)
    print(f"🚀 Vertebra Locator: {args.command}")
    try:
        config = resolve_config(args)
    except VertebraLocatorError as e:
        print(f"❌ Configuration: {e}")
        return e.exit_code
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else getattr(logging, config.log_level),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        result = run(args.command, config, args)
    except VertebraLocatorError as e:
        print(f"❌ {args.command}: {e}")
        return e.exit_code
    except Exception as e:
        logging.getLogger(__name__).exception("unexpected failure")
        print(f"❌ {args.command}: unexpected error: {e}")
        return 1
    report(args.command, result)
    return 0


if __name__ == '__main__':
    sys.exit(main())
