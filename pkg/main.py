"""Command-line entry point"""

import argparse
import sys
from pathlib import Path

# Ensure the project root is in the Python path
sys.path.insert(0, str(Path(__file__).parent))

from src.logic import experiments
from src.models.config import ABLATION_VARIANTS, ExperimentConfig
from src.utils.errors import ConfigError, RelocError
from src.utils.logger import log

DEFAULT_CONFIG = Path(__file__).parent / "default_experiment.json"
VERBS = ("gen-data", "train-joint", "train-separate", "generalize", "evaluate", "ablate", "report")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reloc", description="Multi-scene camera relocalization experiments")
    parser.add_argument("verb", choices=VERBS)
    parser.add_argument("--config", default=str(DEFAULT_CONFIG), help="experiment JSON file")
    parser.add_argument("--out", default=None, help="output directory (overrides the config)")
    parser.add_argument("--seed", type=int, default=None, help="global seed (overrides the config)")
    parser.add_argument("--variant", default="full", choices=ABLATION_VARIANTS, help="ablation variant")
    parser.add_argument("--force", action="store_true", help="evaluate despite a config hash mismatch")
    parser.add_argument("--data", default=None, help="dataset directory written by gen-data")
    parser.add_argument("--checkpoint", default=None, help="checkpoint for generalize/evaluate")
    parser.add_argument("--scene", default=None, help="scene name for generalize/evaluate")
    parser.add_argument("--split", default="test", choices=("train", "test"))
    return parser


def load_config(args) -> ExperimentConfig:
    # only the shipped default may be absent; an explicit --config must exist
    if Path(args.config) == DEFAULT_CONFIG and not DEFAULT_CONFIG.exists():
        config = ExperimentConfig()
    else:
        config = ExperimentConfig.load(args.config)
    if args.seed is not None:
        config.set_seed(args.seed)
    if args.out is not None:
        config.out_dir = args.out
    return config


def _require(value, flag: str, verb: str):
    if value is None:
        raise ConfigError(f"'{verb}' needs {flag}")
    return value


def run(args) -> int:
    config = load_config(args)
    out = Path(config.out_dir)
    data = experiments.prepare_datasets
    if args.verb == "gen-data":
        written = experiments.generate_data(config, args.data or out / "data")
        log.info(f"Wrote {len(written)} scene datasets")
    elif args.verb == "train-joint":
        experiments.run_joint(config, data(config, data_dir=args.data), out / "joint")
    elif args.verb == "train-separate":
        experiments.run_separate(config, data(config, data_dir=args.data), out / "separate")
    elif args.verb == "generalize":
        checkpoint = _require(args.checkpoint, "--checkpoint", args.verb)
        scene = config.scene(_require(args.scene, "--scene", args.verb))
        experiments.run_generalize(checkpoint, scene, config, data(config, data_dir=args.data), out / "generalize")
    elif args.verb == "evaluate":
        checkpoint = _require(args.checkpoint, "--checkpoint", args.verb)
        scene = _require(args.scene, "--scene", args.verb)
        datasets = data(config, [config.scene(scene)], data_dir=args.data)
        experiments.evaluate(checkpoint, scene, args.split, config, args.force, datasets, out)
    elif args.verb == "ablate":
        experiments.ablate(config, args.variant, data(config, data_dir=args.data), out / f"ablate_{args.variant}")
    elif args.verb == "report":
        table = experiments.report(out)
        log.info(f"Report over {len(table)} runs written to {out / 'report.csv'}")
    return 0


def main(argv=None) -> int:
    """Run one verb; errors print a single ``error: <category>: <message>`` line"""
    args = build_parser().parse_args(argv)
    log.info(f"reloc {args.verb} starting...")
    try:
        return run(args)
    except RelocError as e:
        print(f"error: {e.one_line()}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
