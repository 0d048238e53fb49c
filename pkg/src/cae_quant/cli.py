"""``cae-quant`` command line: gen, run, compare, oracle-check.

Reports go to stdout (or ``--output``) as JSON; structured logs go to stderr.
Flags mirror :class:`~cae_quant.models.RunConfig` field names, in dashed and
underscored spelling. Exit status is 0 on success, 2 on usage or config
errors and the failing error's ``exit_code`` otherwise. Report files are
written only once every layer has succeeded.

    cae-quant gen --seed 42 --m 8 --n 16 --k 64 --noise-level 0.05 --output layer.qb
    cae-quant run layer.qb --use-p1 --use-p2 --bits 3 --group-size 8
    cae-quant compare layer.qb --bits 3 --group-size 8 --output report.json
    cae-quant oracle-check --instances 20
"""

from __future__ import annotations

import argparse
import json
import sys
from collections.abc import Callable, Sequence
from pathlib import Path

from aws_lambda_powertools import Logger
from aws_lambda_powertools.logging.utils import copy_config_to_registered_loggers
from pydantic import BaseModel, ValidationError

from cae_quant import __version__
from cae_quant.bundle import (
    TensorBundle,
    bundle_checksum,
    gen_synthetic,
    load_bundle,
    save_bundle,
    serialize,
    write_atomic,
)
from cae_quant.checks import run_oracle_checks
from cae_quant.engine import run_layer
from cae_quant.errors import LayerError, QuantError
from cae_quant.methods import available_methods, comparison_order, get_method
from cae_quant.models import (
    BundleInfo,
    Command,
    LayerReport,
    MethodSpec,
    OracleCheckReport,
    OrderingEntry,
    RunConfig,
    RunReport,
)

logger = Logger(service="cae-quant", stream=sys.stderr)

USAGE_EXIT = 2


# --------------------------------------------------------------------------- #
# Commands
# --------------------------------------------------------------------------- #
def resolve_methods(config: RunConfig, command: Command) -> list[MethodSpec]:
    """Method specs a command runs: named presets, or one ``custom`` spec from the flags."""
    names = list(config.methods)
    if not names and command == "compare":
        names = comparison_order()
    if not names:
        return [config.method_spec()]
    specs: list[MethodSpec] = []
    for name in names:
        preset = get_method(name)
        specs.append(config.method_spec(name, use_p1=preset.use_p1, use_p2=preset.use_p2))
    return specs


def run_command(
    config: RunConfig,
    bundle: TensorBundle,
    *,
    command: Command = "run",
    bundle_path: str = "",
) -> RunReport:
    """Quantize every bundle layer with every resolved method and build the report.

    Failures are re-raised as :class:`~cae_quant.errors.LayerError` naming the layer.
    """
    specs = resolve_methods(config, command)
    layers: list[LayerReport] = []
    ordering: list[OrderingEntry] = []
    for layer in range(bundle.layers):
        problem = bundle.problem(layer)
        per_layer: list[LayerReport] = []
        for spec in specs:
            try:
                _, report = run_layer(
                    problem, spec, layer=layer, workers=config.workers, row_tile=config.row_tile
                )
            except QuantError as exc:
                raise LayerError(layer, exc) from exc
            per_layer.append(report)
        layers.extend(per_layer)
        if command == "compare":
            ranked = [r.method for r in sorted(per_layer, key=lambda r: (r.asym_err, r.method))]
            ordering.append(OrderingEntry(layer=layer, methods=ranked))
            logger.info("method ordering", extra={"layer": layer, "methods": ranked})

    return RunReport(
        version=__version__,
        command=command,
        bundle=BundleInfo(
            path=bundle_path, checksum=bundle_checksum(serialize(bundle)), layers=bundle.layers
        ),
        config=config,
        layers=layers,
        ordering=ordering if command == "compare" else None,
    )


def emit(report: BaseModel, output: Path | None) -> None:
    """Write ``report`` as JSON to ``output`` (atomically) or stdout."""
    text = report.model_dump_json(by_alias=True, indent=2) + "\n"
    if output is None:
        sys.stdout.write(text)
    else:
        write_atomic(output, text.encode("utf-8"))


def _config_from(args: argparse.Namespace) -> RunConfig:
    given = {name: getattr(args, name) for name in RunConfig.model_fields if hasattr(args, name)}
    return RunConfig(**given)


def _cmd_gen(args: argparse.Namespace) -> int:
    bundle = gen_synthetic(args.seed, args.m, args.n, args.k, args.noise_level)
    checksum = save_bundle(bundle, args.output)
    logger.info("bundle written", extra={"path": str(args.output), "checksum": checksum})
    sys.stdout.write(json.dumps({"path": str(args.output), "checksum": checksum}) + "\n")
    return 0


def _cmd_quantize(args: argparse.Namespace) -> int:
    config = _config_from(args)
    bundle = load_bundle(args.bundle)
    report = run_command(config, bundle, command=args.command, bundle_path=str(args.bundle))
    emit(report, config.output)
    methods = [spec.name for spec in resolve_methods(config, args.command)]
    logger.info(f"{args.command} complete", extra={"layers": bundle.layers, "methods": methods})
    return 0


def _cmd_oracle_check(args: argparse.Namespace) -> int:
    checks = run_oracle_checks(seed=args.seed, instances=args.instances)
    passed = all(c.passed for c in checks)
    emit(OracleCheckReport(version=__version__, checks=checks, passed=passed), args.output)
    return 0 if passed else QuantError.exit_code


# --------------------------------------------------------------------------- #
# Parser
# --------------------------------------------------------------------------- #
def _flag(name: str) -> list[str]:
    """``--use-p1`` plus the field-name spelling ``--use_p1`` when they differ."""
    dashed = "--" + name.replace("_", "-")
    return [dashed] if "_" not in name else [dashed, f"--{name}"]


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    bool_flag = argparse.BooleanOptionalAction
    p.add_argument(*_flag("use_p1"), dest="use_p1", action=bool_flag,
                   help="asymmetric calibration (GPTAQ term)")
    p.add_argument(*_flag("use_p2"), dest="use_p2", action=bool_flag,
                   help="compensation-aware error term")
    p.add_argument(*_flag("bits"), dest="bits", type=int)
    p.add_argument(*_flag("group_size"), dest="group_size", type=int)
    p.add_argument(*_flag("block_size"), dest="block_size", type=int)
    p.add_argument(*_flag("act_order"), dest="act_order", action=bool_flag)
    p.add_argument(*_flag("lambda_frac"), dest="lambda_frac", type=float)
    p.add_argument(*_flag("clip_grid"), dest="clip_grid", type=float, nargs="+")
    p.add_argument(*_flag("group_order"), dest="group_order", choices=["permuted", "original"])
    p.add_argument(*_flag("scale_source"), dest="scale_source", choices=["current", "initial"])
    p.add_argument(*_flag("flush"), dest="flush", choices=["exact", "entry"])
    p.add_argument(*_flag("seed"), dest="seed", type=int)
    p.add_argument(*_flag("output"), dest="output", type=Path)
    p.add_argument(*_flag("workers"), dest="workers", type=int)
    p.add_argument(*_flag("row_tile"), dest="row_tile", type=int)
    p.add_argument(*_flag("methods"), dest="methods", nargs="+", choices=available_methods())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cae-quant", description="GPTQ-family post-training quantization"
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument(
        "--log-level",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="overrides POWERTOOLS_LOG_LEVEL",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="write a seeded synthetic single-layer bundle")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--m", type=int, required=True)
    gen.add_argument("--n", type=int, required=True)
    gen.add_argument("--k", type=int, required=True)
    gen.add_argument("--noise-level", "--noise_level", dest="noise_level", type=float, default=0.0)
    gen.add_argument("--output", type=Path, required=True)
    gen.set_defaults(handler=_cmd_gen)

    for verb, help_text in (
        ("run", "quantize a bundle with one method (flags) or the named --methods"),
        ("compare", "quantize a bundle with several methods and rank them per layer"),
    ):
        cmd = sub.add_parser(verb, help=help_text, argument_default=argparse.SUPPRESS)
        cmd.add_argument("bundle", type=Path)
        _add_config_flags(cmd)
        cmd.set_defaults(handler=_cmd_quantize)

    check = sub.add_parser(
        "oracle-check", help="compare the engine against the brute-force oracle"
    )
    check.add_argument("--seed", type=int, default=0)
    check.add_argument("--instances", type=int, default=20)
    check.add_argument("--output", type=Path, default=None)
    check.set_defaults(handler=_cmd_oracle_check)
    return parser


def _configure_logging(level: str | None) -> None:
    if level is not None:
        logger.setLevel(level)
    copy_config_to_registered_loggers(source_logger=logger, include={"cae_quant"})


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _configure_logging(args.log_level)
    handler: Callable[[argparse.Namespace], int] = args.handler
    try:
        return handler(args)
    except ValidationError as exc:
        sys.stderr.write(f"cae-quant: invalid configuration\n{exc}\n")
        return USAGE_EXIT
    except KeyError as exc:
        sys.stderr.write(f"cae-quant: {exc.args[0]}\n")
        return USAGE_EXIT
    except QuantError as exc:
        logger.error("command failed", extra={"code": exc.code, "exit_code": exc.exit_code})
        sys.stderr.write(f"cae-quant: error [{exc.code}]: {exc}\n")
        return exc.exit_code
    except OSError as exc:
        sys.stderr.write(f"cae-quant: {exc}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
