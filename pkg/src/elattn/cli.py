"""Command-line interface for the elattn application."""

import argparse
import logging
import sys
from dataclasses import replace
from typing import List, Optional, Sequence

from elattn.check import random_inputs, run_attention_suite, run_end_to_end_suite
from elattn.checkpoint import load_checkpoint, save_checkpoint
from elattn.config import GenConfig, RunConfig, get_version, load_run_config
from elattn.decoding import search
from elattn.errors import (
    ElAttnError,
    InputError,
    LengthError,
    ModeError,
    ParameterError,
)
from elattn.model import AttentionMode, Model, init_model
from elattn.perf.accounting import CONVENTIONS, WorkloadSpec, cache_bytes, to_gib
from elattn.perf.bench import measure, sweep
from elattn.perf.report import (
    FORMATS,
    Table,
    bench_table,
    provenance,
    render,
    write_output,
)
from elattn.tensor_core import set_precision

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_IO = 3

MEM_BATCHES = "32,64,320"
MEM_LENGTHS = "256,1024"


def setup_logging(verbose=False):
    """Set up logging configuration.

    Logs go to stderr so that reports on stdout stay machine-readable.

    Args:
        verbose: Whether to enable verbose logging.
    """
    log_level = logging.DEBUG if verbose else logging.INFO

    logging.basicConfig(
        level=log_level,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=[logging.StreamHandler(sys.stderr)],
    )


def parse_int_list(text: str) -> List[int]:
    """Parse "1,2,4" (or whitespace separated) into a list of ints."""
    try:
        values = [int(v) for v in text.replace(",", " ").split()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected integers, got '{text}'") from e
    if not values:
        raise argparse.ArgumentTypeError("expected at least one integer")
    return values


def parse_token_ids(text: str) -> List[int]:
    """Parse whitespace-separated token ids.

    Raises:
        InputError: If a field is not an integer or the line is empty.
    """
    try:
        ids = [int(v) for v in text.split()]
    except ValueError as e:
        raise InputError(f"malformed token ids: '{text.strip()}'") from e
    if not ids:
        raise InputError("empty token sequence")
    return ids


def read_inputs(args) -> List[List[int]]:
    if args.input_file:
        with open(args.input_file) as f:
            lines = [line for line in f if line.strip()]
        if not lines:
            raise InputError(f"{args.input_file} holds no sequences")
        return [parse_token_ids(line) for line in lines]
    if args.input:
        return [parse_token_ids(args.input)]
    raise ParameterError("generate needs --input or --input-file")


def parse_modes(text: str) -> List[AttentionMode]:
    if text == "all":
        return list(AttentionMode)
    return [AttentionMode.parse(m.strip()) for m in text.split(",") if m.strip()]


def build_run_config(args) -> RunConfig:
    """Load the YAML configuration and apply command-line overrides."""
    config = load_run_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        config.model = replace(config.model, seed=args.seed)
    if args.precision:
        config.precision = args.precision
    return config


def gen_config_from_args(args, base: GenConfig) -> GenConfig:
    overrides = {
        "beam": args.beam,
        "max_out_len": args.max_len,
        "min_out_len": args.min_len,
        "length_penalty": args.length_penalty,
        "no_repeat_ngram": args.no_repeat_ngram,
        "diverse_groups": args.diverse_groups,
        "diverse_strength": args.diverse_strength,
    }
    return replace(base, **{k: v for k, v in overrides.items() if v is not None})


def load_model(args, config: RunConfig) -> Model:
    if getattr(args, "model", None):
        return load_checkpoint(args.model)
    return init_model(config.model)


def emit(args, table: Table, seed: int, precision: str) -> None:
    meta = provenance(seed, precision)
    write_output(render(table, args.format, meta), args.out, sys.stdout)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_check(args, config: RunConfig) -> int:
    """Run the attention-level and end-to-end equivalence suites."""
    logger = logging.getLogger(__name__)
    if config.precision == "f32":
        logger.warning("Equivalence tolerances assume f64; running in f32")
    seed = args.seed if args.seed is not None else 0
    logger.info(f"Running check with {args.cases} cases and {args.inputs} inputs")
    results = [run_attention_suite(args.cases, seed, perturb=args.perturb)]
    if args.inputs > 0:
        model = init_model(config.model)
        results.append(run_end_to_end_suite(model, args.inputs, seed))
    table = Table(
        title="Equivalence check",
        columns=("suite", "cases", "max_deviation", "passed", "first_failing_seed"),
        rows=[r.to_dict() for r in results],
        notes=("attention tolerance 1e-10; end-to-end requires identical tokens",),
    )
    emit(args, table, seed, config.precision)
    failed = [r for r in results if not r.passed]
    for result in failed:
        logger.error(f"{result.name} failed; failing case seed {result.failures[0]}")
    return EXIT_CHECK_FAILED if failed else EXIT_OK


def cmd_generate(args, config: RunConfig) -> int:
    """Generate from token ids and print the hypotheses."""
    logger = logging.getLogger(__name__)
    model = load_model(args, config)
    cfg = gen_config_from_args(args, config.generation).validate()
    mode = AttentionMode.parse(args.mode)
    logger.info(f"Generating in {mode.value} mode")
    rows = []
    for index, source in enumerate(read_inputs(args)):
        for rank, hyp in enumerate(search(model, source, cfg, mode, args.greedy)):
            rows.append(
                {
                    "input": index,
                    "rank": rank,
                    "tokens": " ".join(str(t) for t in hyp.tokens),
                    "score": hyp.score,
                    "logprob_sum": hyp.logprob_sum,
                }
            )
    table = Table(
        title=f"Generation ({mode.value})",
        columns=("input", "rank", "tokens", "score", "logprob_sum"),
        rows=rows,
        notes=(f"settings: {cfg.to_dict()}", f"greedy: {args.greedy}"),
    )
    emit(args, table, model.config.seed, config.precision)
    return EXIT_OK


def cmd_mem(args, config: RunConfig) -> int:
    """Print input-related cache sizes for multi-head and EL-attention."""
    rows = []
    for batch in args.batch:
        for n in args.n:
            spec = WorkloadSpec(
                n=n,
                d_m=args.d_model,
                h=1,
                x=args.beam,
                batch=batch,
                L=args.layers,
                bytes_per_value=args.bytes,
            )
            mha, el = cache_bytes(spec)
            rows.append(
                {
                    "batch": batch,
                    "n": n,
                    "mha_gib": to_gib(mha),
                    "el_gib": to_gib(el),
                    "ratio": mha // el,
                }
            )
    table = Table(
        title="Input-related cache size",
        columns=("batch", "n", "mha_gib", "el_gib", "ratio"),
        rows=rows,
        notes=(
            f"L={args.layers} d_m={args.d_model} beam={args.beam} "
            f"bytes_per_value={args.bytes}",
            "mha = 2*L*B*x*n*d_m*bytes; el = B*n*d_m*bytes; sizes in GiB",
        ),
    )
    emit(args, table, config.model.seed, config.precision)
    return EXIT_OK


def cmd_bench(args, config: RunConfig) -> int:
    """Run the attention sweep, optionally with generation timings."""
    logger = logging.getLogger(__name__)
    hw = replace(
        config.hardware,
        **{
            k: v
            for k, v in (("peak_gflops", args.peak_gflops), ("peak_gbs", args.peak_gbs))
            if v is not None
        },
    ).validate()
    modes = parse_modes(args.modes)
    seed = config.model.seed
    report = sweep(
        config.model, args.sweep_n, args.sweep_beam, modes, hw, args.repeats, seed
    )
    if args.generate_inputs > 0:
        model = init_model(config.model)
        inputs = random_inputs(model, args.generate_inputs, seed)
        for mode in modes:
            report.rows.append(
                measure(model, inputs, config.generation, mode, args.repeats, hw)
            )
    logger.info(f"Benchmark finished with {len(report.rows)} rows")
    table = bench_table(report)
    table.notes = (
        *CONVENTIONS,
        f"peak {hw.peak_gflops} GFLOP/s, {hw.peak_gbs} GB/s; predictions advisory",
    )
    emit(args, table, seed, config.precision)
    return EXIT_OK


def cmd_init(args, config: RunConfig) -> int:
    """Write a freshly initialised checkpoint."""
    if not args.out:
        raise ParameterError("init needs --out <checkpoint path>")
    save_checkpoint(init_model(config.model), args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, help="Path to a YAML run configuration")
    common.add_argument("--seed", type=int, help="Seed (unsigned 64-bit integer)")
    common.add_argument(
        "--format", choices=FORMATS, default="md", help="Report format"
    )
    common.add_argument(
        "--precision", choices=("f64", "f32"), help="Floating-point precision"
    )
    common.add_argument("--out", type=str, help="Write the output to this file")
    common.add_argument(
        "--verbose", action="store_true", help="Enable verbose logging"
    )
    return common


def _add_generation_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--beam", type=int, help="Beam size")
    parser.add_argument("--max-len", type=int, help="Maximum output length")
    parser.add_argument("--min-len", type=int, help="Minimum output length")
    parser.add_argument("--length-penalty", type=float, help="Length penalty alpha")
    parser.add_argument(
        "--no-repeat-ngram", type=int, help="Block repeated n-grams of this size"
    )
    parser.add_argument("--diverse-groups", type=int, help="Diverse beam groups")
    parser.add_argument(
        "--diverse-strength", type=float, help="Diversity penalty strength"
    )


def build_parser() -> argparse.ArgumentParser:
    """Create the argument parser with all subcommands."""
    common = _common_parser()
    parser = argparse.ArgumentParser(description="EL-attention inference engine")
    parser.add_argument("--version", action="version", version=get_version())
    subparsers = parser.add_subparsers(dest="command", help="Command to run")

    check_parser = subparsers.add_parser(
        "check", parents=[common], help="Run the equivalence suites"
    )
    check_parser.add_argument(
        "--cases", type=int, default=200, help="Random attention configurations"
    )
    check_parser.add_argument(
        "--inputs", type=int, default=20, help="Random inputs for the end-to-end suite"
    )
    check_parser.add_argument("--perturb", action="store_true", help=argparse.SUPPRESS)
    check_parser.set_defaults(func=cmd_check)

    generate_parser = subparsers.add_parser(
        "generate", parents=[common], help="Generate tokens from input ids"
    )
    generate_parser.add_argument("--model", type=str, help="Checkpoint to load")
    generate_parser.add_argument("--input", type=str, help='Token ids, e.g. "5 17 9"')
    generate_parser.add_argument(
        "--input-file", type=str, help="File with one sequence of ids per line"
    )
    generate_parser.add_argument(
        "--mode",
        choices=[m.value for m in AttentionMode],
        default=AttentionMode.EL.value,
        help="Attention mode",
    )
    generate_parser.add_argument(
        "--greedy", action="store_true", help="Use greedy search"
    )
    _add_generation_flags(generate_parser)
    generate_parser.set_defaults(func=cmd_generate)

    mem_parser = subparsers.add_parser(
        "mem", parents=[common], help="Report input-related cache sizes"
    )
    mem_parser.add_argument("--batch", type=parse_int_list, default=MEM_BATCHES)
    mem_parser.add_argument("--n", type=parse_int_list, default=MEM_LENGTHS)
    mem_parser.add_argument("--layers", type=int, default=12)
    mem_parser.add_argument("--d-model", type=int, default=1024)
    mem_parser.add_argument("--beam", type=int, default=4)
    mem_parser.add_argument("--bytes", type=int, default=2, choices=(2, 4, 8))
    mem_parser.set_defaults(func=cmd_mem)

    bench_parser = subparsers.add_parser(
        "bench", parents=[common], help="Benchmark attention modes"
    )
    bench_parser.add_argument(
        "--sweep-n", type=parse_int_list, default="64,128,256,512,1024"
    )
    bench_parser.add_argument("--sweep-beam", type=parse_int_list, default="4")
    bench_parser.add_argument("--modes", type=str, default="all")
    bench_parser.add_argument("--repeats", type=int, default=3)
    bench_parser.add_argument("--peak-gflops", type=float)
    bench_parser.add_argument("--peak-gbs", type=float)
    bench_parser.add_argument(
        "--generate-inputs",
        type=int,
        default=0,
        help="Also time full generation on this many random inputs",
    )
    bench_parser.set_defaults(func=cmd_bench)

    init_parser = subparsers.add_parser(
        "init", parents=[common], help="Write a freshly initialised checkpoint"
    )
    init_parser.set_defaults(func=cmd_init)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point for the command-line interface.

    Returns:
        The process exit status.
    """
    parser = build_parser()
    args = parser.parse_args(argv)

    if not hasattr(args, "func"):
        parser.print_help()
        return EXIT_USAGE

    setup_logging(args.verbose)
    logger = logging.getLogger(__name__)
    try:
        config = build_run_config(args)
        set_precision(config.precision)
        return args.func(args, config)
    except (ParameterError, InputError, ModeError, LengthError) as e:
        logger.error(f"{e}")
        return EXIT_USAGE
    except OSError as e:
        logger.error(f"I/O error: {e}")
        return EXIT_IO
    except ElAttnError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
