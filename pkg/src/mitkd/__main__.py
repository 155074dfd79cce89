"""Command-line front end running the experiment stages."""
import argparse
import logging
import sys

from mitkd import ConfigError, MissingPrerequisiteError, MitkdError
from mitkd.pipeline import Experiment, load_config

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mitkd",
        description="Pretrain, prepare, distil and evaluate teacher variants.",
    )
    parser.add_argument(
        "-v", "--verbose", action="store_true", help="log every training step"
    )
    commands = parser.add_subparsers(dest="command", required=True)

    def command(name, help_text, variant=False, jobs=False):
        sub = commands.add_parser(name, help=help_text)
        sub.add_argument("--config", required=True, help="experiment JSON file")
        if variant:
            sub.add_argument(
                "--variant",
                required=name != "pretrain",
                help="configured variant name (vanilla, single-task, mtl, ...)",
            )
        if jobs:
            sub.add_argument(
                "--jobs", type=int, default=1, help="parallel evaluation cells"
            )
        return sub

    command("pretrain", "masked-token pretraining of the teacher shapes", variant=True)
    command(
        "prepare-teacher", "vanilla, single-task or multi-task teacher", variant=True
    )
    command("distill", "relation distillation into the student", variant=True)
    command("evaluate", "finetune and score every student", jobs=True)
    command("report", "render the comparison report")
    command("run-all", "every stage in order", jobs=True)
    return parser


def run(args: argparse.Namespace) -> None:
    experiment = Experiment(load_config(args.config))
    variant = getattr(args, "variant", None)
    if variant is not None:
        experiment.config.variant(variant)
    jobs = getattr(args, "jobs", 1)
    if jobs < 1:
        raise ConfigError(f"--jobs must be at least 1, got {jobs!r}")

    if args.command == "pretrain":
        for teacher in experiment.teacher_keys([variant] if variant else None):
            experiment.run_pretrain(teacher)
    elif args.command == "prepare-teacher":
        experiment.run_prepare_teacher(variant)
    elif args.command == "distill":
        experiment.run_distill(variant)
    elif args.command == "evaluate":
        experiment.run_evaluate(jobs)
    elif args.command == "report":
        for path in experiment.run_report():
            print(path)
    else:
        for path in experiment.run_all(jobs):
            print(path)


def main(argv=None) -> int:
    """Run one stage; returns the process exit code."""
    args = _parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        run(args)
    except ConfigError as err:
        print(f"invalid config: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingPrerequisiteError as err:
        print(f"missing prerequisite: {err.path or err}", file=sys.stderr)
        return EXIT_MISSING
    except MitkdError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
