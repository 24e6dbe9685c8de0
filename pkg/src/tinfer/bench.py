"""Ablation benchmark harness.

Runs the cumulative optimization ladder over a synthetic corpus, timing
each stage as the median of repeated runs after a warmup pass: baseline
(sequential, uncached, f32, unfused), fast_transformer (KV cache + f16 +
fused kernels + arena planning), pruning (vocabulary keep-count +
position trim), pipeline (concurrent stages + dynamic batching).

Correctness before speed: every stage's equivalence oracle (cache vs
recompute, fused vs unfused graph execution, restricted-logit equality
for pruning, pipeline vs sequential) must pass before anything is timed,
and a failure raises CorrectnessError instead of producing a report.

Speed is samples/sec over wall time including tokenization and
detokenization; tokens/sec counts generated tokens. The published
reference ladder for this stack (16.11 / 98.46 / 125.32 / 144.45, about
8.96x end to end) ships in the report metadata as provenance; absolute
numbers are not comparable across hardware and are not a target.
"""

from __future__ import annotations

import hashlib
import json
import math
import statistics
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import graphopt
from .errors import CorrectnessError, ParameterError
from .model import (
    Model,
    cast_model,
    forward_full,
    greedy_decode,
)
from .pipeline import (
    PipelineSettings,
    WorkItem,
    run_pipeline,
    run_sequential,
)
from .pruning import (
    PrunedVocabMap,
    build_pruned_vocab,
    prune_position_embedding,
    prune_token_embedding,
    prune_vocab,
    scan_frequencies,
)
from .rng import SplitMix64, derive_seed
from .tensor import DType
from .tokenizer import Tokenizer, Vocab, build

LADDER = ("baseline", "fast_transformer", "pruning", "pipeline")

# Published reference speeds for this four-stage ladder (informational
# only; measured on different hardware with an unspecified unit).
REFERENCE_LADDER = {
    "baseline": 16.11,
    "fast_transformer": 98.46,
    "pruning": 125.32,
    "pipeline": 144.45,
}

DEFAULT_TRIM_POSITIONS = 128
DEFAULT_COVERAGE = 0.99


@dataclass
class BenchReport:
    stage_name: str
    samples_per_sec: float
    tokens_per_sec: float
    wall_seconds: float
    peak_arena_bytes: int
    speedup_vs_baseline: float
    config_fingerprint: str


@dataclass
class BenchOptions:
    max_new_tokens: int = 32
    max_batch_size: int = 8
    bucket_width: int = 16
    queue_capacity: int = 8
    repeats: int = 3
    warmup_samples: int = 32
    fp32_ladder: bool = False
    keep_count: int | None = None  # None: smallest count covering 99%
    trim_positions: int | None = None  # None: max(128, needed)
    oracle_samples: int = 4
    inject_fault: str | None = None  # test hook: cache|fusion|pruning|pipeline


# ---------------------------------------------------------------------------
# synthetic vocabulary and dataset
# ---------------------------------------------------------------------------

def gen_vocab(size: int, seed: int) -> Vocab:
    """Synthetic subword vocabulary: specials plus unique space-terminated
    lowercase words. The trailing space makes greedy longest-match
    segmentation of concatenated tokens lossless, so generated corpora
    re-encode to exactly the ids they were built from."""
    if size < 4:
        raise ParameterError("vocab size must be at least 4")
    stream = SplitMix64(derive_seed(seed, "vocab"))
    words: list[str] = []
    seen = set()
    while len(words) < size - 3:
        length = 2 + int(stream.randint(1, 6)[0])
        letters = stream.randint(length, 26)
        word = "".join(chr(97 + int(c)) for c in letters) + " "
        if word not in seen:
            seen.add(word)
            words.append(word)
    tokens = ("<unk>", "<eos>", "<pad>", *words)
    return Vocab(tokens=tokens, unk=0, eos=1, pad=2)


def _zipf_cumulative(n: int, s: float = 1.7) -> np.ndarray:
    # exponent picked so a 99%-coverage cut keeps a few hundred of 4096
    # tokens: concentrated enough that pruning pays, spread enough that the
    # kept set is not degenerate
    w = 1.0 / np.power(np.arange(1, n + 1, dtype=np.float64), s)
    c = np.cumsum(w)
    return c / c[-1]


def sample_lengths(n: int, stream: SplitMix64, mean: int, max_len: int
                   ) -> list[int]:
    """Geometric-like lengths: 1 + a sum of twelve geometric draws (so the
    mass sits near the mean instead of piling onto the cap), clamped to
    [1, max_len]."""
    shape = 12
    m = max(0.125, (mean - 1) / shape)
    p = 1.0 / (m + 1.0)
    u = stream.uniform(n * shape, 0.0, 1.0).reshape(n, shape)
    geo = np.floor(np.log1p(-u) / math.log(1.0 - p))
    lengths = 1 + geo.sum(axis=1).astype(np.int64)
    return [int(min(max(x, 1), max_len)) for x in lengths]


def gen_dataset(n: int, seed: int, mean: int, max_len: int, vocab: Vocab
                ) -> list[str]:
    """n texts of concatenated vocab tokens; token ids follow a Zipf-like
    rank distribution over the non-special entries, lengths follow the
    truncated geometric-like law above. Deterministic per seed."""
    if n < 1:
        raise ParameterError("n must be >= 1")
    if not 1 <= mean <= max_len:
        raise ParameterError("need 1 <= mean <= max")
    specials = vocab.special_ids
    regular = [i for i in range(len(vocab)) if i not in specials]
    if not regular:
        raise ParameterError("vocabulary has no regular tokens")
    cum = _zipf_cumulative(len(regular))
    stream = SplitMix64(derive_seed(seed, "dataset"))
    lengths = sample_lengths(n, stream, mean, max_len)
    texts = []
    for length in lengths:
        u = stream.uniform(length, 0.0, 1.0)
        ranks = np.searchsorted(cum, u, side="right")
        texts.append("".join(vocab.tokens[regular[int(r)]] for r in ranks))
    return texts


def write_dataset_jsonl(path: str | Path, texts: Sequence[str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in texts:
            fh.write(json.dumps({"content": t}, ensure_ascii=False,
                                sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# equivalence oracles (run before any timing)
# ---------------------------------------------------------------------------

def _oracle_cache(model_f32: Model, tok: Tokenizer, texts: Sequence[str],
                  opts: BenchOptions) -> None:
    budget = min(32, model_f32.config.max_position - 8)
    for text in texts[:opts.oracle_samples]:
        prompt = tok.encode(text)[:budget]
        if not prompt:
            continue
        cached = greedy_decode(model_f32, prompt, 8, use_cache=True)
        plain = greedy_decode(model_f32, prompt, 8, use_cache=False)
        if opts.inject_fault == "cache":
            plain = plain[:-1] + [plain[-1] ^ 1]
        if cached != plain:
            raise CorrectnessError(
                "KV-cache oracle failed: cached and uncached decode disagree")


def _oracle_fusion_arena(opts: BenchOptions) -> tuple[int, int]:
    """Fused+planned execution must match unfused fresh execution
    bit-exactly. Returns (fresh peak bytes, planned peak bytes)."""
    g = graphopt.reference_block_graph()
    bindings = graphopt.demo_bindings(g, seed=7)
    base_out, base_stats = graphopt.execute(g, None, bindings)
    fused = graphopt.optimize(g)
    lifetimes = graphopt.analyze_lifetimes(fused)
    plan = graphopt.plan_memory(fused, lifetimes)
    graphopt.check_plan(plan)
    fused_out, fused_stats = graphopt.execute(fused, plan, bindings)
    if opts.inject_fault == "fusion":
        fused_out = {k: v + 1.0 for k, v in fused_out.items()}
    for tid, ref in base_out.items():
        if not np.array_equal(ref, fused_out[tid]):
            raise CorrectnessError(
                f"fusion oracle failed: output {tid!r} changed value")
    if fused_stats.launch_count >= base_stats.launch_count:
        raise CorrectnessError("fusion oracle failed: launches did not drop")
    if plan.peak_bytes >= base_stats.peak_bytes:
        raise CorrectnessError("arena oracle failed: no memory reuse")
    return base_stats.peak_bytes, plan.peak_bytes


def _oracle_pruning(model: Model, pruned: Model, vmap: PrunedVocabMap,
                    tok: Tokenizer, texts: Sequence[str],
                    opts: BenchOptions) -> None:
    """Pruned-model logits over kept ids must equal the original model's
    logits at those ids exactly (pruning is row/column selection)."""
    kept = np.asarray(vmap.kept_old_ids, dtype=np.int64)
    o2n = vmap.old_to_new
    checked = 0
    budget = min(48, pruned.config.max_position - 1)
    for text in texts:
        if checked >= opts.oracle_samples:
            break
        ids = tok.encode(text)[:budget]
        if not ids or any(i not in o2n for i in ids):
            continue
        checked += 1
        orig = forward_full(model, ids).array[-1][kept]
        new = forward_full(pruned, vmap.remap(ids)).array[-1]
        if opts.inject_fault == "pruning":
            new = new + 1.0
        if not np.array_equal(orig, new):
            raise CorrectnessError(
                "pruning oracle failed: restricted logits differ")
    if checked == 0:
        raise CorrectnessError(
            "pruning oracle failed: no fully-covered sample to check")


def _oracle_pipeline(model: Model, tok: Tokenizer, texts: Sequence[str],
                     settings: PipelineSettings, opts: BenchOptions) -> None:
    subset = list(texts[:max(2 * settings.max_batch_size, 16)])
    seq_items, _ = run_sequential(subset, model, tok, settings)
    pipe_items, _ = run_pipeline(subset, model, tok, settings,
                                 watchdog_seconds=60.0)
    seq_out = [w.output_text for w in seq_items]
    pipe_out = [w.output_text for w in pipe_items]
    if opts.inject_fault == "pipeline":
        pipe_out = list(reversed(pipe_out))
    if seq_out != pipe_out:
        raise CorrectnessError(
            "pipeline oracle failed: concurrent and sequential outputs differ")


def _oracle_f16(model_f32: Model, model_f16: Model, tok: Tokenizer,
                texts: Sequence[str], threshold: float = 0.999) -> None:
    budget = min(32, model_f32.config.max_position - 9)
    prompt = tok.encode(texts[0])[:budget]
    seq = list(prompt)
    for _ in range(8):
        lo32 = forward_full(model_f32, seq).array[-1].astype(np.float64)
        lo16 = forward_full(model_f16, seq).array[-1].astype(np.float64)
        cos = float(np.dot(lo32, lo16) /
                    (np.linalg.norm(lo32) * np.linalg.norm(lo16)))
        if cos < threshold:
            raise CorrectnessError(
                f"half-precision oracle failed: logits cosine {cos:.6f} "
                f"< {threshold}")
        seq.append(int(np.argmax(lo32)))


# ---------------------------------------------------------------------------
# ladder construction and timing
# ---------------------------------------------------------------------------

def _fingerprint(model: Model, n: int, opts: BenchOptions) -> str:
    h = hashlib.sha256()
    h.update(model.config.to_json().encode())
    for name, t in model.named_tensors():
        h.update(name.encode())
        h.update(t.array.tobytes())
    h.update(f"|n={n}|max_new={opts.max_new_tokens}".encode())
    return h.hexdigest()[:16]


def _stage_settings(stage: str, opts: BenchOptions) -> PipelineSettings:
    if stage == "baseline":
        return PipelineSettings(
            queue_capacity=opts.queue_capacity, max_batch_size=1,
            bucket_width=0, max_new_tokens=opts.max_new_tokens,
            fused=False, use_cache=False)
    if stage in ("fast_transformer", "pruning"):
        return PipelineSettings(
            queue_capacity=opts.queue_capacity, max_batch_size=1,
            bucket_width=0, max_new_tokens=opts.max_new_tokens,
            fused=True, use_cache=True)
    if stage == "pipeline":
        return PipelineSettings(
            queue_capacity=opts.queue_capacity,
            max_batch_size=opts.max_batch_size,
            bucket_width=opts.bucket_width,
            max_new_tokens=opts.max_new_tokens,
            fused=True, use_cache=True)
    raise ParameterError(f"unknown stage {stage!r}")


def choose_keep_count(counts: np.ndarray, coverage: float,
                      specials: Sequence[int]) -> int:
    """Smallest keep-count whose kept ids carry >= coverage of all token
    occurrences (specials always included)."""
    total = int(counts.sum())
    if total == 0:
        return max(len(specials), 1)
    order = np.argsort(-counts, kind="stable")
    running = 0
    kept = set(int(s) for s in specials)
    for tid in order:
        if running / total >= coverage and len(kept) >= len(specials) + 1:
            break
        kept.add(int(tid))
        running += int(counts[tid])
    return len(kept)


def build_pruned_stage(model: Model, vocab: Vocab, texts: Sequence[str],
                       opts: BenchOptions
                       ) -> tuple[Model, Tokenizer, PrunedVocabMap, int]:
    """Scan the corpus, choose the kept set, prune embeddings and trim the
    position table so the re-encoded corpus still fits."""
    tok = build(vocab)
    counts = scan_frequencies(texts, tok)
    specials = sorted(vocab.special_ids)
    keep = opts.keep_count
    if keep is None:
        keep = choose_keep_count(counts, DEFAULT_COVERAGE, specials)
    vmap = build_pruned_vocab(counts, keep, specials)
    pruned_vocab = prune_vocab(vocab, vmap)
    pruned_tok = build(pruned_vocab)
    pruned = prune_token_embedding(model, vmap)
    needed = max((len(pruned_tok.encode(t)) for t in texts), default=1)
    trim = opts.trim_positions
    if trim is None:
        trim = max(DEFAULT_TRIM_POSITIONS, needed + opts.max_new_tokens)
    trim = min(trim, model.config.max_position)
    if needed + opts.max_new_tokens > trim:
        raise ParameterError(
            f"trim_positions={trim} cannot hold the re-encoded corpus "
            f"(needs {needed + opts.max_new_tokens})")
    pruned = prune_position_embedding(pruned, trim)
    return pruned, pruned_tok, vmap, trim


def _run_stage_once(stage: str, model: Model, tok: Tokenizer,
                    texts: Sequence[str], settings: PipelineSettings
                    ) -> tuple[list[WorkItem], float, int]:
    if stage == "pipeline":
        items, stats = run_pipeline(texts, model, tok, settings,
                                    watchdog_seconds=600.0)
    else:
        items, stats = run_sequential(texts, model, tok, settings)
    gen_tokens = sum(len(w.generated_ids) for w in items)
    return items, stats.wall_seconds, gen_tokens


def run_ablation(model: Model, vocab: Vocab, texts: Sequence[str],
                 stages: Sequence[str], opts: BenchOptions | None = None
                 ) -> list[BenchReport]:
    """Time the cumulative ladder on one dataset and model.

    Oracles gate every optimization before it is timed; a failure raises
    CorrectnessError and no reports are produced.
    """
    opts = opts or BenchOptions()
    stages = list(stages)
    if not stages or tuple(stages) != LADDER[:len(stages)]:
        raise ParameterError(
            f"stages must be a prefix of {'/'.join(LADDER)}, got {stages}")
    if not texts:
        raise ParameterError("dataset is empty")

    base_f32 = cast_model(model, DType.F32)
    fast_model = base_f32 if opts.fp32_ladder else cast_model(base_f32, DType.F16)
    tok = build(vocab)
    fingerprint = _fingerprint(base_f32, len(texts), opts)

    # --- correctness gates -------------------------------------------------
    fresh_peak, planned_peak = _oracle_fusion_arena(opts)
    if len(stages) >= 2:
        _oracle_cache(base_f32, tok, texts, opts)
        if not opts.fp32_ladder:
            _oracle_f16(base_f32, fast_model, tok, texts)

    pruned_model = pruned_tok = None
    if len(stages) >= 3:
        pruned_model, pruned_tok, vmap, _ = build_pruned_stage(
            fast_model, vocab, texts, opts)
        _oracle_pruning(fast_model, pruned_model, vmap, tok, texts, opts)

    if len(stages) >= 4:
        _oracle_pipeline(pruned_model, pruned_tok,
                         texts, _stage_settings("pipeline", opts), opts)

    # --- timed runs ----------------------------------------------------------
    stage_model = {
        "baseline": (base_f32, tok),
        "fast_transformer": (fast_model, tok),
        "pruning": (pruned_model, pruned_tok),
        "pipeline": (pruned_model, pruned_tok),
    }
    reports: list[BenchReport] = []
    outputs_by_stage: dict[str, list[str]] = {}
    baseline_sps = None
    for stage in stages:
        m, t = stage_model[stage]
        settings = _stage_settings(stage, opts)
        warm = list(texts[:min(opts.warmup_samples, len(texts))])
        _run_stage_once(stage, m, t, warm, settings)  # untimed warmup
        walls = []
        tokens = 0
        outputs: list[str] | None = None
        for _ in range(opts.repeats):
            items, wall, gen_tokens = _run_stage_once(stage, m, t, texts,
                                                      settings)
            out = [w.output_text for w in items]
            if outputs is None:
                outputs = out
                tokens = gen_tokens
            elif out != outputs:
                raise CorrectnessError(
                    f"stage {stage!r} produced non-deterministic outputs")
            walls.append(wall)
        outputs_by_stage[stage] = outputs
        wall = statistics.median(walls)
        sps = len(texts) / wall
        if baseline_sps is None:
            baseline_sps = sps
        reports.append(BenchReport(
            stage_name=stage,
            samples_per_sec=sps,
            tokens_per_sec=tokens / wall,
            wall_seconds=wall,
            peak_arena_bytes=fresh_peak if stage == "baseline" else planned_peak,
            speedup_vs_baseline=sps / baseline_sps,
            config_fingerprint=fingerprint))

    # --- cross-stage output identity where exactness is guaranteed ---------
    if opts.fp32_ladder and "fast_transformer" in outputs_by_stage:
        if outputs_by_stage["fast_transformer"] != outputs_by_stage["baseline"]:
            raise CorrectnessError(
                "f32 ladder violation: cached stage outputs differ from baseline")
    if "pipeline" in outputs_by_stage:
        if outputs_by_stage["pipeline"] != outputs_by_stage["pruning"]:
            raise CorrectnessError(
                "ladder violation: pipeline outputs differ from the same "
                "model's sequential outputs")
    return reports


# ---------------------------------------------------------------------------
# report rendering
# ---------------------------------------------------------------------------

def emit_report(reports: Sequence[BenchReport], fmt: str = "table") -> str:
    if not reports:
        raise ParameterError("no reports to emit")
    if fmt == "json":
        doc = {
            "config_fingerprint": reports[0].config_fingerprint,
            "reference_ladder": REFERENCE_LADDER,
            "reference_note": ("published ladder for this stack; measured "
                               "elsewhere, informational only"),
            "reports": [asdict(r) for r in reports],
        }
        return json.dumps(doc, indent=2, sort_keys=True)
    if fmt != "table":
        raise ParameterError(f"unknown report format {fmt!r}")
    header = (f"{'stage':<18} {'samples/s':>10} {'tokens/s':>11} "
              f"{'speedup':>8} {'wall_s':>9} {'arena_bytes':>12}")
    lines = [header, "-" * len(header)]
    for r in reports:
        lines.append(
            f"{r.stage_name:<18} {r.samples_per_sec:>10.2f} "
            f"{r.tokens_per_sec:>11.1f} {r.speedup_vs_baseline:>8.2f} "
            f"{r.wall_seconds:>9.3f} {r.peak_arena_bytes:>12d}")
    lines.append(f"config fingerprint: {reports[0].config_fingerprint}")
    return "\n".join(lines)


def reports_from_json(text: str) -> list[BenchReport]:
    doc = json.loads(text)
    names = {f.name for f in fields(BenchReport)}
    out = []
    for r in doc["reports"]:
        if set(r) != names:
            raise ParameterError("report JSON fields do not match")
        out.append(BenchReport(**r))
    return out
