#!/usr/bin/env python3
#
# This is the CLI entrypoint. It parses arguments and runs the various
# subcommands. Exit status: 0 on success, 1 on usage errors, 2 on data errors
# and 3 when a gradient check fails.

import argparse
import dacite
import enum
import json
import opera.configuration
import opera.corpus
import opera.corpus.synthetic
import opera.derivations
import opera.errors
import opera.evaluation
import opera.evaluation.analysis
import opera.logging
import opera.model
import opera.rules
import opera.training
import opera.training.checkpoint
import opera.utility
import pathlib
import sys
import typing
import yaml

logger = opera.logging.get_logger(__name__)

EXIT_SUCCESS = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_GRADCHECK = 3

SYNTHETIC_TRAIN_SIZE = 200
SYNTHETIC_DEV_SIZE = 50


class Action(enum.Enum):
    "Enumerates the things this CLI tool can do."
    SYNTHESIZE = enum.auto()
    INGEST = enum.auto()
    LABEL = enum.auto()
    TRAIN = enum.auto()
    EVAL = enum.auto()
    PREDICT = enum.auto()
    ANALYZE = enum.auto()
    GRADCHECK = enum.auto()


class UsageError(Exception):
    pass


class _ArgumentParser(argparse.ArgumentParser):
    "Exits with the usage status instead of argparse's default of 2"

    def error(self, message: str) -> typing.NoReturn:
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_configuration_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=pathlib.Path, help="YAML configuration file")
    parser.add_argument(
        "--profile",
        default="desk",
        choices=sorted(opera.configuration.PROFILES),
        help="Configuration preset the file is applied on top of",
    )


def _add_training_arguments(parser: argparse.ArgumentParser) -> None:
    _add_configuration_arguments(parser)
    parser.add_argument("--seed", type=int, help="Seed for shuffling and initialization")
    parser.add_argument(
        "--lambda", dest="lambda_op", type=float, help="Weight of the operation loss"
    )


def _add_rules_argument(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--rules",
        type=pathlib.Path,
        default=opera.rules.default_rules_path(),
        help="Operation rule file (default: the bundled rules)",
    )


def _parse_arguments(argv: typing.Optional[typing.Sequence[str]]) -> argparse.Namespace:
    parser = _ArgumentParser(
        prog="opera",
        description="Operation-pivoted discrete reasoning over paragraphs",
    )

    subparsers = parser.add_subparsers(required=True)

    synthesize_parser = subparsers.add_parser(
        "synthesize", help="Generate synthetic train and dev corpora"
    )
    synthesize_parser.add_argument("--out", type=pathlib.Path, required=True)
    synthesize_parser.add_argument("--seed", type=int, default=13)
    synthesize_parser.set_defaults(action=Action.SYNTHESIZE)

    ingest_parser = subparsers.add_parser(
        "ingest", help="Tokenize a DROP file and dump the prepared instances"
    )
    ingest_parser.add_argument("--data", type=pathlib.Path, required=True)
    ingest_parser.add_argument("--out", type=pathlib.Path, required=True)
    _add_configuration_arguments(ingest_parser)
    ingest_parser.set_defaults(action=Action.INGEST)

    label_parser = subparsers.add_parser(
        "label", help="Derive operation labels and derivations for a DROP file"
    )
    label_parser.add_argument("--data", type=pathlib.Path, required=True)
    label_parser.add_argument("--out", type=pathlib.Path, required=True)
    _add_rules_argument(label_parser)
    _add_configuration_arguments(label_parser)
    label_parser.set_defaults(action=Action.LABEL)

    train_parser = subparsers.add_parser("train", help="Train a model")
    train_parser.add_argument("--data", type=pathlib.Path, required=True)
    train_parser.add_argument(
        "--ckpt", type=pathlib.Path, required=True, help="Checkpoint to write"
    )
    train_parser.add_argument(
        "--out", type=pathlib.Path, help="Per-epoch metrics CSV (default: beside --ckpt)"
    )
    train_parser.add_argument(
        "--ablate-op", action="store_true", help="Remove the operation path"
    )
    _add_rules_argument(train_parser)
    _add_training_arguments(train_parser)
    train_parser.set_defaults(action=Action.TRAIN)

    eval_parser = subparsers.add_parser("eval", help="Score a checkpoint with EM and F1")
    eval_parser.add_argument("--data", type=pathlib.Path, required=True)
    eval_parser.add_argument("--ckpt", type=pathlib.Path, required=True)
    eval_parser.add_argument(
        "--out", type=pathlib.Path, help="Metrics JSON (default: stdout)"
    )
    eval_parser.set_defaults(action=Action.EVAL)

    predict_parser = subparsers.add_parser("predict", help="Write predictions as JSONL")
    predict_parser.add_argument("--data", type=pathlib.Path, required=True)
    predict_parser.add_argument("--ckpt", type=pathlib.Path, required=True)
    predict_parser.add_argument(
        "--out", type=pathlib.Path, help="Predictions JSONL (default: stdout)"
    )
    predict_parser.set_defaults(action=Action.PREDICT)

    analyze_parser = subparsers.add_parser(
        "analyze", help="Operation diagnostics, or the paired ablation with --ablate-op"
    )
    analyze_parser.add_argument("--data", type=pathlib.Path, required=True)
    analyze_parser.add_argument("--out", type=pathlib.Path, required=True)
    analyze_parser.add_argument("--ckpt", type=pathlib.Path)
    analyze_parser.add_argument(
        "--ablate-op",
        action="store_true",
        help="Train full, w/o operation loss and w/o operations from the same seed",
    )
    analyze_parser.add_argument(
        "--eval-data", type=pathlib.Path, help="Held-out DROP file for --ablate-op"
    )
    _add_rules_argument(analyze_parser)
    _add_training_arguments(analyze_parser)
    analyze_parser.set_defaults(action=Action.ANALYZE)

    gradcheck_parser = subparsers.add_parser(
        "gradcheck", help="Check the joint loss gradient on a toy instance"
    )
    gradcheck_parser.add_argument("--dh", type=int, default=16)
    gradcheck_parser.add_argument("--seed", type=int, default=13)
    gradcheck_parser.add_argument(
        "--max-coordinates",
        type=int,
        default=200,
        help="Coordinates sampled per parameter",
    )
    gradcheck_parser.add_argument(
        "--out", type=pathlib.Path, help="Report CSV (default: stdout)"
    )
    gradcheck_parser.set_defaults(action=Action.GRADCHECK)

    arguments = parser.parse_args(argv)
    if arguments.action == Action.ANALYZE:
        if arguments.ablate_op and arguments.eval_data is None:
            parser.error("analyze --ablate-op requires --eval-data")
        if not arguments.ablate_op and arguments.ckpt is None:
            parser.error("analyze requires --ckpt unless --ablate-op is given")
    if arguments.action == Action.GRADCHECK and (
        arguments.dh <= 0 or arguments.dh % 4 != 0
    ):
        parser.error("--dh must be a positive multiple of 4")
    return arguments


def _load_configuration(
    arguments: argparse.Namespace,
) -> opera.configuration.TrainingConfiguration:
    overrides: dict = {}
    if getattr(arguments, "seed", None) is not None:
        overrides = opera.utility.merge_complex_dictionaries(
            overrides, {"seed": arguments.seed, "model": {"seed": arguments.seed}}
        )
    if getattr(arguments, "lambda_op", None) is not None:
        overrides["lambda_op"] = arguments.lambda_op
    if getattr(arguments, "action", None) == Action.TRAIN and arguments.ablate_op:
        overrides = opera.utility.merge_complex_dictionaries(
            overrides, {"model": {"ablate_op": True}}
        )

    try:
        if arguments.config is None:
            return opera.configuration.load_training_configuration(
                profile=arguments.profile, overrides=overrides
            )
        logger.info(f"Loading configuration from {arguments.config}...")
        with open(arguments.config) as f:
            return opera.configuration.load_training_configuration(
                f, profile=arguments.profile, overrides=overrides
            )
    except (OSError, AssertionError, dacite.DaciteError, yaml.YAMLError) as e:
        raise UsageError(f"invalid configuration: {e}") from e


def _open_output(path: typing.Optional[pathlib.Path]) -> typing.TextIO:
    if path is None:
        return sys.stdout
    path.parent.mkdir(parents=True, exist_ok=True)
    return open(path, "w", encoding="utf-8")


def _close_output(f: typing.TextIO) -> None:
    if f is not sys.stdout:
        f.close()


def _labelled_corpus(
    path: pathlib.Path,
    rules: opera.rules.RuleSet,
    configuration: opera.configuration.TrainingConfiguration,
    vocabulary: typing.Optional[opera.corpus.Vocabulary] = None,
) -> typing.Tuple[typing.List[opera.derivations.LabeledInstance], opera.corpus.Vocabulary]:
    raw = opera.corpus.load_drop_json(path)
    if vocabulary is None:
        vocabulary = opera.corpus.build_vocabulary(
            raw, min_count=configuration.vocab_min_count
        )
    prepared = opera.corpus.prepare_dataset(
        raw, vocabulary, configuration.model.max_seq_len
    )
    labelled = opera.derivations.label_dataset(
        prepared, rules, max_terms=configuration.max_terms
    )
    return labelled, vocabulary


def _restore(
    path: pathlib.Path,
) -> typing.Tuple[
    opera.model.OperaModel, opera.corpus.Vocabulary, opera.training.checkpoint.Checkpoint
]:
    checkpoint = opera.training.checkpoint.load_checkpoint(path)
    model, vocabulary = opera.training.checkpoint.restore(checkpoint)
    return model, vocabulary, checkpoint


def _prepared_for_model(
    path: pathlib.Path, model: opera.model.OperaModel, vocabulary: opera.corpus.Vocabulary
) -> typing.List[opera.corpus.PreparedInstance]:
    return opera.corpus.prepare_dataset(
        opera.corpus.load_drop_json(path), vocabulary, model.config.max_seq_len
    )


def _synthesize(arguments: argparse.Namespace) -> None:
    arguments.out.mkdir(parents=True, exist_ok=True)
    splits = [
        ("train.json", SYNTHETIC_TRAIN_SIZE, arguments.seed, "train"),
        ("dev.json", SYNTHETIC_DEV_SIZE, arguments.seed + 1, "dev"),
    ]
    for name, size, seed, prefix in splits:
        corpus = opera.corpus.synthetic.generate_synthetic_corpus(
            size, seed=seed, prefix=prefix
        )
        with open(arguments.out / name, "w", encoding="utf-8") as f:
            json.dump(corpus, f, indent=2)
        logger.info(f"Wrote {size} passages to {arguments.out / name}")


def _ingest(arguments: argparse.Namespace) -> None:
    configuration = _load_configuration(arguments)
    raw, report = opera.corpus.read_drop_json(arguments.data)
    vocabulary = opera.corpus.build_vocabulary(
        raw, min_count=configuration.vocab_min_count
    )
    prepared = opera.corpus.prepare_dataset(
        raw, vocabulary, configuration.model.max_seq_len
    )
    opera.corpus.dump_dataset(prepared, arguments.out)
    logger.info(
        f"Ingested {report.instances} instances ({len(report.skipped)} qa_pairs "
        f"skipped, vocabulary of {len(vocabulary)} tokens)"
    )


def _label(arguments: argparse.Namespace) -> None:
    configuration = _load_configuration(arguments)
    rules = opera.rules.compile_ruleset(arguments.rules)
    labelled, _ = _labelled_corpus(arguments.data, rules, configuration)
    arguments.out.parent.mkdir(parents=True, exist_ok=True)
    with open(arguments.out, "w", encoding="utf-8") as f:
        for instance in labelled:
            f.write(json.dumps(instance.to_json(), sort_keys=True) + "\n")
    logger.info(f"Wrote {len(labelled)} labelled instances to {arguments.out}")


def _train(arguments: argparse.Namespace) -> None:
    configuration = _load_configuration(arguments)
    rules = opera.rules.compile_ruleset(arguments.rules)
    labelled, vocabulary = _labelled_corpus(arguments.data, rules, configuration)
    result = opera.training.train(labelled, configuration, vocabulary)

    arguments.ckpt.parent.mkdir(parents=True, exist_ok=True)
    opera.training.checkpoint.save_checkpoint(
        opera.training.checkpoint.checkpoint_from_result(result), arguments.ckpt
    )
    metrics_path = arguments.out or arguments.ckpt.with_name(
        f"{arguments.ckpt.stem}.metrics.csv"
    )
    with _open_output(metrics_path) as f:
        opera.training.write_metrics_csv(result.metrics, f)
    logger.info(f"Wrote training metrics to {metrics_path}")


def _eval(arguments: argparse.Namespace) -> None:
    model, vocabulary, _ = _restore(arguments.ckpt)
    prepared = _prepared_for_model(arguments.data, model, vocabulary)
    report = opera.evaluation.evaluate(model, prepared)
    if arguments.out is None:
        json.dump(report.to_json(), sys.stdout, indent=2, sort_keys=True)
        sys.stdout.write("\n\n")
        opera.evaluation.write_kind_table(report, sys.stdout)
    else:
        arguments.out.parent.mkdir(parents=True, exist_ok=True)
        opera.evaluation.write_metrics(report, arguments.out)


def _predict(arguments: argparse.Namespace) -> None:
    model, vocabulary, _ = _restore(arguments.ckpt)
    prepared = _prepared_for_model(arguments.data, model, vocabulary)
    predictions = opera.evaluation.predict(model, prepared)
    f = _open_output(arguments.out)
    try:
        opera.evaluation.write_predictions(predictions, f)
    finally:
        _close_output(f)
    logger.info(f"Predicted {len(predictions)} instances")


def _analyze(arguments: argparse.Namespace) -> None:
    rules = opera.rules.compile_ruleset(arguments.rules)
    arguments.out.mkdir(parents=True, exist_ok=True)
    analysis = opera.evaluation.analysis

    if arguments.ablate_op:
        configuration = _load_configuration(arguments)
        train_instances, vocabulary = _labelled_corpus(arguments.data, rules, configuration)
        eval_instances, _ = _labelled_corpus(
            arguments.eval_data, rules, configuration, vocabulary
        )
        results = analysis.run_ablation(
            train_instances, eval_instances, configuration, vocabulary
        )
        with open(arguments.out / "ablation.csv", "w", encoding="utf-8") as f:
            analysis.write_ablation_csv(results, f)
        with open(arguments.out / "ablation_by_operation.csv", "w", encoding="utf-8") as f:
            analysis.write_ablation_by_operation_csv(results, f)
        logger.info(f"Wrote ablation tables to {arguments.out}")
        return

    model, vocabulary, checkpoint = _restore(arguments.ckpt)
    labelled, _ = _labelled_corpus(
        arguments.data, rules, checkpoint.configuration, vocabulary
    )
    predictions = opera.evaluation.predict(model, [i.prepared for i in labelled])
    gold = [i.operations for i in labelled]
    with open(arguments.out / "p_at_n.csv", "w", encoding="utf-8") as f:
        analysis.write_p_at_n_csv(predictions, gold, f)
    with open(arguments.out / "correlation.csv", "w", encoding="utf-8") as f:
        analysis.write_correlation_csv(analysis.correlation_matrix(predictions), f)
    distribution = opera.rules.operation_distribution((i.id, i.operations) for i in labelled)
    if distribution.empty:
        logger.warning("No instance matched any rule; the distribution is all zeros")
    with open(arguments.out / "operation_distribution.csv", "w", encoding="utf-8") as f:
        analysis.write_distribution_csv(distribution, f)
    logger.info(f"Wrote operation diagnostics to {arguments.out}")


def _gradcheck(arguments: argparse.Namespace) -> bool:
    logger.info(f"Checking gradients with d_h={arguments.dh}...")
    report = opera.training.check_joint_gradients(
        d_h=arguments.dh, seed=arguments.seed, max_coordinates=arguments.max_coordinates
    )
    f = _open_output(arguments.out)
    try:
        f.write(report.to_csv())
    finally:
        _close_output(f)
    if report.passed:
        logger.info(f"Gradient check passed, max relative error {report.max_rel_err:.3e}")
    else:
        failed = [c.name for c in report.checks if not c.passed]
        logger.error(f"Gradient check failed for {', '.join(failed)}")
    return report.passed


def main(argv: typing.Optional[typing.Sequence[str]] = None) -> int:
    arguments = _parse_arguments(argv)

    try:
        if arguments.action == Action.SYNTHESIZE:
            _synthesize(arguments)
        elif arguments.action == Action.INGEST:
            _ingest(arguments)
        elif arguments.action == Action.LABEL:
            _label(arguments)
        elif arguments.action == Action.TRAIN:
            _train(arguments)
        elif arguments.action == Action.EVAL:
            _eval(arguments)
        elif arguments.action == Action.PREDICT:
            _predict(arguments)
        elif arguments.action == Action.ANALYZE:
            _analyze(arguments)
        elif arguments.action == Action.GRADCHECK:
            if not _gradcheck(arguments):
                return EXIT_GRADCHECK
        else:
            logger.error(f"{arguments.action} is not a valid command")
            return EXIT_USAGE
    except UsageError as e:
        logger.error(str(e))
        return EXIT_USAGE
    except opera.errors.DataError as e:
        logger.error(str(e))
        return EXIT_DATA

    return EXIT_SUCCESS


if __name__ == "__main__":
    sys.exit(main())
