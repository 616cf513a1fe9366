import argparse
import json
import sys

from app.cli.commands import (
    cmd_ablate_order, cmd_eval, cmd_gen_data, cmd_report, cmd_train_wsod, cmd_warmup,
)
from app.cli.run_config import RunConfig
from app.errors import InternalError, PipelineError
from app.utils.logger import logger

COMMANDS = ("gen-data", "warmup", "train-wsod", "eval", "ablate-order", "report")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dual-domain-wsod",
        description="Dual-domain warm-up and weakly-supervised detection on a synthetic world"
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="YAML run config; defaults apply to every missing field")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out", help="run output directory")
    parser.add_argument("--stage", help="warm-up checkpoint tag to evaluate, e.g. FSOD-5")
    parser.add_argument("--checkpoint", help="detector or WSOD checkpoint to evaluate")
    parser.add_argument("--variant", choices=("oicr", "casd"))
    parser.add_argument("--no-fe", action="store_true", help="do not initialize WSOD layers from the detector")
    parser.add_argument("--no-op", action="store_true", help="use a dense grid instead of detector proposals")
    parser.add_argument("--skip-g2", action="store_true", help="drop the copy-paste fine-tuning stage")
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = RunConfig.load(args.config).with_overrides(
            seed=args.seed, out=args.out, variant=args.variant,
            no_fe=args.no_fe, no_op=args.no_op, skip_g2=args.skip_g2
        )
        logger.info(f"Running {args.command} (seed={config.seed}, out={config.output_dir})")
        if args.command == "gen-data":
            cmd_gen_data(config)
        elif args.command == "warmup":
            cmd_warmup(config)
        elif args.command == "train-wsod":
            cmd_train_wsod(config)
        elif args.command == "eval":
            cmd_eval(config, checkpoint=args.checkpoint, stage=args.stage)
        elif args.command == "ablate-order":
            cmd_ablate_order(config)
        else:
            cmd_report(config)
    except PipelineError as e:
        logger.error(f"{args.command} failed: {str(e)}")
        return report_error(e)
    except Exception as e:
        logger.exception(f"{args.command} failed unexpectedly")
        return report_error(InternalError(e))
    return 0


def report_error(error: PipelineError) -> int:
    print(json.dumps(error.to_record()), file=sys.stderr)
    return error.exit_code


if __name__ == "__main__":
    sys.exit(run())
