"""tinfer command-line interface.

Exit codes: 0 success, 1 usage/input errors, 2 correctness-oracle failure
(speed figures are never emitted for wrong outputs).
"""

from __future__ import annotations

import argparse
import sys
import warnings
from pathlib import Path

from . import bench, graphopt
from .errors import CorrectnessError, TinferError
from .model import (
    ModelConfig,
    cast_model,
    init_random,
    load_model,
    reference_config,
    save_model,
)
from .pipeline import (
    PipelineSettings,
    read_jsonl_texts,
    run_pipeline,
    run_sequential,
    write_results_jsonl,
)
from .pruning import write_vocab_map
from .tensor import DType
from .tokenizer import build, read_vocab, write_vocab

USAGE_EXIT = 1
CORRECTNESS_EXIT = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(USAGE_EXIT)


def _build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tinfer",
                description="desk-scale transformer inference engine and "
                            "ablation benchmark")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-vocab", help="write a synthetic vocabulary TSV")
    g.add_argument("--size", type=int, required=True)
    g.add_argument("--seed", type=int, default=42)
    g.add_argument("--out", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic JSON-lines dataset")
    g.add_argument("--vocab", required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=42)
    g.add_argument("--mean", type=int, default=60)
    g.add_argument("--max", type=int, default=96, dest="max_len")
    g.add_argument("--out", required=True)

    g = sub.add_parser("init-model", help="create a random model (TINF + JSON)")
    g.add_argument("--config", required=True,
                   help="path to a config JSON, or 'reference' / "
                        "'reference-f16'")
    g.add_argument("--seed", type=int, default=42)
    g.add_argument("--out", required=True, help="output .tinf path")

    g = sub.add_parser("prune", help="frequency-prune a model and vocabulary")
    g.add_argument("--model", required=True)
    g.add_argument("--vocab", required=True)
    g.add_argument("--corpus", required=True, help="JSON-lines corpus")
    g.add_argument("--keep-count", type=int, default=None)
    g.add_argument("--max-position", type=int, default=None)
    g.add_argument("--out-model", required=True)
    g.add_argument("--out-vocab", required=True)
    g.add_argument("--out-map", default=None)

    g = sub.add_parser("graph-opt",
                       help="fuse and plan the demo operator graph")
    g.add_argument("--graph", default=None,
                   help="graph JSON to optimize (default: built-in demo)")
    g.add_argument("--out", default=None, help="write the optimized graph")

    g = sub.add_parser("run", help="run one ladder stage over a dataset")
    g.add_argument("--model", required=True)
    g.add_argument("--vocab", required=True)
    g.add_argument("--data", required=True)
    g.add_argument("--stage", required=True, choices=bench.LADDER)
    g.add_argument("--out", required=True)
    g.add_argument("--max-new", type=int, default=32)
    g.add_argument("--batch-size", type=int, default=8)

    g = sub.add_parser("bench", help="run the ablation ladder")
    g.add_argument("--model", required=True)
    g.add_argument("--vocab", required=True)
    g.add_argument("--data", required=True)
    g.add_argument("--stages", default=",".join(bench.LADDER))
    g.add_argument("--format", default="table", choices=("table", "json"))
    g.add_argument("--max-new", type=int, default=32)
    g.add_argument("--batch-size", type=int, default=8)
    g.add_argument("--repeats", type=int, default=3)
    g.add_argument("--fp32-ladder", action="store_true")
    g.add_argument("--keep-count", type=int, default=None)
    g.add_argument("--out", default=None)
    g.add_argument("--inject-fault", default=None, help=argparse.SUPPRESS)
    return p


def _load_config(spec: str) -> ModelConfig:
    if spec == "reference":
        return reference_config(DType.F32)
    if spec == "reference-f16":
        return reference_config(DType.F16)
    return ModelConfig.from_json(Path(spec).read_text(encoding="utf-8"))


def _cmd_gen_vocab(args) -> int:
    vocab = bench.gen_vocab(args.size, args.seed)
    write_vocab(args.out, vocab)
    print(f"wrote {len(vocab)} tokens to {args.out}")
    return 0


def _cmd_gen_data(args) -> int:
    vocab = read_vocab(args.vocab)
    texts = bench.gen_dataset(args.n, args.seed, args.mean, args.max_len, vocab)
    bench.write_dataset_jsonl(args.out, texts)
    print(f"wrote {len(texts)} samples to {args.out}")
    return 0


def _cmd_init_model(args) -> int:
    config = _load_config(args.config)
    model = init_random(config, args.seed)
    save_model(model, args.out)
    print(f"wrote model ({config.num_layers} layers, hidden "
          f"{config.hidden_size}, vocab {config.vocab_size}, "
          f"{config.dtype.value}) to {args.out}")
    return 0


def _cmd_prune(args) -> int:
    model = load_model(args.model)
    vocab = read_vocab(args.vocab)
    texts = read_jsonl_texts(args.corpus)
    opts = bench.BenchOptions(keep_count=args.keep_count,
                              trim_positions=args.max_position)
    pruned, pruned_tok, vmap, trim = bench.build_pruned_stage(
        model, vocab, texts, opts)
    save_model(pruned, args.out_model)
    write_vocab(args.out_vocab, pruned_tok.vocab)
    if args.out_map:
        write_vocab_map(args.out_map, vmap)
    print(f"kept {vmap.keep_count}/{len(vocab)} tokens, positions "
          f"{model.config.max_position} -> {trim}")
    return 0


def _cmd_graph_opt(args) -> int:
    if args.graph:
        g = graphopt.load_graph(args.graph)
    else:
        g = graphopt.reference_block_graph()
    bindings = graphopt.demo_bindings(g, seed=7)
    _, base_stats = graphopt.execute(g, None, bindings)
    fused = graphopt.optimize(g)
    plan = graphopt.plan_memory(fused, graphopt.analyze_lifetimes(fused))
    _, fused_stats = graphopt.execute(fused, plan, bindings)
    print(f"nodes:        {len(g.nodes)} -> {len(fused.nodes)}")
    print(f"launches:     {base_stats.launch_count} -> {fused_stats.launch_count}")
    print(f"peak bytes:   {base_stats.peak_bytes} -> {fused_stats.peak_bytes} "
          f"({plan.buffer_count} buffers)")
    if args.out:
        graphopt.save_graph(args.out, fused)
        print(f"wrote optimized graph to {args.out}")
    return 0


def _cmd_run(args) -> int:
    model = load_model(args.model)
    vocab = read_vocab(args.vocab)
    texts = read_jsonl_texts(args.data)
    opts = bench.BenchOptions(max_new_tokens=args.max_new,
                              max_batch_size=args.batch_size)
    stage = args.stage
    m = cast_model(model, DType.F32)
    tok = build(vocab)
    if stage in ("fast_transformer", "pruning", "pipeline"):
        m = cast_model(m, DType.F16)
    if stage in ("pruning", "pipeline"):
        m, tok, _, _ = bench.build_pruned_stage(m, vocab, texts, opts)
    settings = bench._stage_settings(stage, opts)
    if stage == "pipeline":
        items, _ = run_pipeline(texts, m, tok, settings, watchdog_seconds=600.0)
    else:
        items, _ = run_sequential(texts, m, tok, settings)
    write_results_jsonl(args.out, items)
    print(f"wrote {len(items)} results to {args.out}")
    return 0


def _cmd_bench(args) -> int:
    model = load_model(args.model)
    vocab = read_vocab(args.vocab)
    texts = read_jsonl_texts(args.data)
    stages = [s for s in args.stages.split(",") if s]
    opts = bench.BenchOptions(
        max_new_tokens=args.max_new, max_batch_size=args.batch_size,
        repeats=args.repeats, fp32_ladder=args.fp32_ladder,
        keep_count=args.keep_count, inject_fault=args.inject_fault)
    reports = bench.run_ablation(model, vocab, texts, stages, opts)
    text = bench.emit_report(reports, args.format)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


_COMMANDS = {
    "gen-vocab": _cmd_gen_vocab,
    "gen-data": _cmd_gen_data,
    "init-model": _cmd_init_model,
    "prune": _cmd_prune,
    "graph-opt": _cmd_graph_opt,
    "run": _cmd_run,
    "bench": _cmd_bench,
}


def main(argv: list[str] | None = None) -> int:
    # the TBB version probe warning is environmental noise; numba falls back
    # to OpenMP or its builtin workqueue either way
    warnings.filterwarnings("ignore", message=".*TBB.*")
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except CorrectnessError as e:
        print(f"correctness failure: {e}", file=sys.stderr)
        return CORRECTNESS_EXIT
    except TinferError as e:
        print(f"error: {e}", file=sys.stderr)
        return USAGE_EXIT
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return USAGE_EXIT


if __name__ == "__main__":
    sys.exit(main())
