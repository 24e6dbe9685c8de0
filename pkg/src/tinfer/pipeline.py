"""Four-stage concurrent batch-inference pipeline.

A main orchestrator plus three workers — preprocessing (tokenize +
dynamic batching), inference (batched KV-cached generation), and
postprocessing (detokenize) — communicate over bounded FIFO queues and
share no mutable state. Producers block on full queues; any stage failure
aborts the run, drains, and re-raises without deadlocking.

``run_sequential`` executes the same stages one at a time and is both the
equivalence oracle and the throughput baseline. Outputs are exactly equal
in either mode: group membership only changes padding, and padded slots
are masked out of attention, so every sample's generation is
bit-identical to its standalone decode regardless of how it was batched.
"""

from __future__ import annotations

import json
import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from .errors import ConfigError, FormatError, ParameterError, TinferError
from .model import Model, batched_greedy_decode, greedy_decode
from .tokenizer import Tokenizer

_DONE = object()


@dataclass
class WorkItem:
    sample_index: int
    text: str
    token_ids: list[int] | None = None
    generated_ids: list[int] | None = None
    output_text: str | None = None
    timestamps: dict[str, tuple[float, float]] = field(default_factory=dict)


@dataclass
class BatchPlan:
    groups: list[list[int]]
    max_batch_size: int
    bucket_width: int
    group_pad: list[int]  # per group: the padded (max) prompt length

    def __post_init__(self):
        if len(self.groups) != len(self.group_pad):
            raise ParameterError("groups and group_pad must align")
        for g in self.groups:
            if not g:
                raise ParameterError("empty batch group")
            if len(g) > self.max_batch_size:
                raise ParameterError("group exceeds max_batch_size")


def plan_batches(lengths: Sequence[int], max_batch_size: int,
                 bucket_width: int) -> BatchPlan:
    """Stable descending-length sort, then greedy chunking: a group closes
    at max_batch_size or when the gap to the group head exceeds
    bucket_width."""
    if max_batch_size < 1:
        raise ParameterError("max_batch_size must be >= 1")
    if bucket_width < 0:
        raise ParameterError("bucket_width must be >= 0")
    order = sorted(range(len(lengths)), key=lambda i: -lengths[i])
    groups: list[list[int]] = []
    pads: list[int] = []
    cur: list[int] = []
    head_len = 0
    for idx in order:
        if cur and (len(cur) == max_batch_size
                    or head_len - lengths[idx] > bucket_width):
            groups.append(cur)
            pads.append(head_len)
            cur = []
        if not cur:
            head_len = lengths[idx]
        cur.append(idx)
    if cur:
        groups.append(cur)
        pads.append(head_len)
    return BatchPlan(groups=groups, max_batch_size=max_batch_size,
                     bucket_width=bucket_width, group_pad=pads)


def padding_waste(plan: BatchPlan, lengths: Sequence[int]) -> int:
    return sum(plan.group_pad[gi] - lengths[i]
               for gi, g in enumerate(plan.groups) for i in g)


@dataclass
class PipelineSettings:
    queue_capacity: int = 8
    max_batch_size: int = 8
    bucket_width: int = 16
    max_new_tokens: int = 32
    fused: bool = True
    use_cache: bool = True  # False: full-recompute decode (ladder baseline)
    # test hook: extra per-item preprocessing work (e.g. to weight the stage)
    preprocess_hook: Callable[[WorkItem], None] | None = None

    def validate(self) -> None:
        if self.queue_capacity < 1:
            raise ParameterError("queue_capacity must be >= 1")
        if self.max_batch_size < 1:
            raise ParameterError("max_batch_size must be >= 1")
        if self.bucket_width < 0:
            raise ParameterError("bucket_width must be >= 0")
        if self.max_new_tokens < 0:
            raise ParameterError("max_new_tokens must be >= 0")


@dataclass
class StageTiming:
    busy_seconds: float = 0.0
    queue_wait_seconds: float = 0.0
    items: int = 0


@dataclass
class StageStats:
    stages: dict[str, StageTiming]
    wall_seconds: float


STAGE_NAMES = ("preprocess", "inference", "postprocess")


def _check_compatible(model: Model, tokenizer: Tokenizer) -> None:
    if len(tokenizer.vocab) != model.config.vocab_size:
        raise ConfigError(
            f"tokenizer vocab size {len(tokenizer.vocab)} != model vocab "
            f"size {model.config.vocab_size}")
    if (tokenizer.vocab.eos != model.config.eos_token
            or tokenizer.vocab.pad != model.config.pad_token):
        raise ConfigError("tokenizer specials do not match the model config")


def _preprocess_item(item: WorkItem, tokenizer: Tokenizer,
                     settings: PipelineSettings) -> None:
    t0 = time.perf_counter()
    if settings.preprocess_hook is not None:
        settings.preprocess_hook(item)
    item.token_ids = tokenizer.encode(item.text)
    item.timestamps["preprocess"] = (t0, time.perf_counter())


def _infer_group(group: list[WorkItem], model: Model,
                 settings: PipelineSettings) -> None:
    t0 = time.perf_counter()
    prompts = [item.token_ids for item in group]
    if settings.use_cache:
        seqs = batched_greedy_decode(model, prompts, settings.max_new_tokens,
                                     fused=settings.fused)
    else:
        seqs = [greedy_decode(model, p, settings.max_new_tokens,
                              use_cache=False, fused=settings.fused)
                for p in prompts]
    t1 = time.perf_counter()
    for item, seq in zip(group, seqs):
        item.generated_ids = seq[len(item.token_ids):]
        item.timestamps["inference"] = (t0, t1)


def _postprocess_item(item: WorkItem, tokenizer: Tokenizer) -> None:
    t0 = time.perf_counter()
    gen = list(item.generated_ids)
    if gen and gen[-1] == tokenizer.vocab.eos:
        gen.pop()
    item.output_text = tokenizer.decode(gen)
    item.timestamps["postprocess"] = (t0, time.perf_counter())


def run_sequential(items: Sequence[str], model: Model, tokenizer: Tokenizer,
                   settings: PipelineSettings) -> tuple[list[WorkItem], StageStats]:
    """One stage at a time over the whole input; deterministic."""
    settings.validate()
    _check_compatible(model, tokenizer)
    wall0 = time.perf_counter()
    work = [WorkItem(sample_index=i, text=t) for i, t in enumerate(items)]
    timing = {name: StageTiming() for name in STAGE_NAMES}

    t0 = time.perf_counter()
    for item in work:
        _preprocess_item(item, tokenizer, settings)
    plan = plan_batches([len(w.token_ids) for w in work],
                        settings.max_batch_size, settings.bucket_width)
    timing["preprocess"].busy_seconds = time.perf_counter() - t0
    timing["preprocess"].items = len(work)

    t0 = time.perf_counter()
    for group_idx in plan.groups:
        _infer_group([work[i] for i in group_idx], model, settings)
    timing["inference"].busy_seconds = time.perf_counter() - t0
    timing["inference"].items = len(work)

    t0 = time.perf_counter()
    for item in work:
        _postprocess_item(item, tokenizer)
    timing["postprocess"].busy_seconds = time.perf_counter() - t0
    timing["postprocess"].items = len(work)

    stats = StageStats(stages=timing,
                       wall_seconds=time.perf_counter() - wall0)
    return work, stats


class _Abort:
    """First failure wins; everyone else drains and exits. A deadline makes
    every queue-wait loop double as the watchdog."""

    def __init__(self, deadline: float | None = None):
        self.event = threading.Event()
        self.lock = threading.Lock()
        self.error: BaseException | None = None
        self.stage: str | None = None
        self.deadline = deadline

    def fail(self, stage: str, exc: BaseException) -> None:
        with self.lock:
            if self.error is None:
                self.error = exc
                self.stage = stage
        self.event.set()

    def aborted(self) -> bool:
        if self.event.is_set():
            return True
        if self.deadline is not None and time.perf_counter() > self.deadline:
            self.fail("watchdog", TinferError("pipeline watchdog expired"))
            return True
        return False


def _put(q: queue.Queue, obj, abort: _Abort, timing: StageTiming | None) -> bool:
    t0 = time.perf_counter()
    while not abort.aborted():
        try:
            q.put(obj, timeout=0.05)
            if timing is not None:
                timing.queue_wait_seconds += time.perf_counter() - t0
            return True
        except queue.Full:
            continue
    return False


def _get(q: queue.Queue, abort: _Abort, timing: StageTiming | None):
    t0 = time.perf_counter()
    while not abort.aborted():
        try:
            obj = q.get(timeout=0.05)
            if timing is not None:
                timing.queue_wait_seconds += time.perf_counter() - t0
            return obj
        except queue.Empty:
            continue
    return _DONE


def run_pipeline(items: Sequence[str], model: Model, tokenizer: Tokenizer,
                 settings: PipelineSettings,
                 watchdog_seconds: float | None = None
                 ) -> tuple[list[WorkItem], StageStats]:
    """Concurrent stages over bounded queues; results in original order.

    The preprocess worker batches dynamically: tokenized items accumulate
    in per-length-bucket bins and a bin flushes downstream as soon as it
    holds max_batch_size items (leftovers are planned with plan_batches at
    end of input). Group membership never changes output values, so this
    is exactly equivalent to run_sequential.
    """
    settings.validate()
    _check_compatible(model, tokenizer)
    wall0 = time.perf_counter()
    n = len(items)
    q_pre: queue.Queue = queue.Queue(settings.queue_capacity)
    q_inf: queue.Queue = queue.Queue(settings.queue_capacity)
    q_post: queue.Queue = queue.Queue(settings.queue_capacity)
    q_out: queue.Queue = queue.Queue()  # unbounded: collection never blocks
    deadline = None if watchdog_seconds is None else wall0 + watchdog_seconds
    abort = _Abort(deadline)
    timing = {name: StageTiming() for name in STAGE_NAMES}

    def preprocess_worker():
        tm = timing["preprocess"]
        bins: dict[int, list[WorkItem]] = {}
        bin_span = settings.bucket_width + 1
        try:
            while True:
                obj = _get(q_pre, abort, tm)
                if obj is _DONE:
                    break
                t0 = time.perf_counter()
                _preprocess_item(obj, tokenizer, settings)
                tm.busy_seconds += time.perf_counter() - t0
                tm.items += 1
                bins.setdefault(len(obj.token_ids) // bin_span, []).append(obj)
                full = bins[len(obj.token_ids) // bin_span]
                if len(full) == settings.max_batch_size:
                    del bins[len(obj.token_ids) // bin_span]
                    if not _put(q_inf, full, abort, tm):
                        return
            # flush leftovers, longest groups first
            leftovers = [w for b in bins.values() for w in b]
            if leftovers:
                plan = plan_batches([len(w.token_ids) for w in leftovers],
                                    settings.max_batch_size,
                                    settings.bucket_width)
                for group in plan.groups:
                    if not _put(q_inf, [leftovers[i] for i in group], abort, tm):
                        return
            _put(q_inf, _DONE, abort, None)
        except BaseException as exc:  # propagate to the orchestrator
            abort.fail("preprocess", exc)

    def inference_worker():
        tm = timing["inference"]
        try:
            while True:
                obj = _get(q_inf, abort, tm)
                if obj is _DONE:
                    break
                t0 = time.perf_counter()
                _infer_group(obj, model, settings)
                tm.busy_seconds += time.perf_counter() - t0
                tm.items += len(obj)
                if not _put(q_post, obj, abort, tm):
                    return
            _put(q_post, _DONE, abort, None)
        except BaseException as exc:
            abort.fail("inference", exc)

    def postprocess_worker():
        tm = timing["postprocess"]
        try:
            while True:
                obj = _get(q_post, abort, tm)
                if obj is _DONE:
                    break
                t0 = time.perf_counter()
                for item in obj:
                    _postprocess_item(item, tokenizer)
                tm.busy_seconds += time.perf_counter() - t0
                tm.items += len(obj)
                for item in obj:
                    if not _put(q_out, item, abort, None):
                        return
            _put(q_out, _DONE, abort, None)
        except BaseException as exc:
            abort.fail("postprocess", exc)

    workers = [threading.Thread(target=f, daemon=True, name=name)
               for f, name in ((preprocess_worker, "preprocess"),
                               (inference_worker, "inference"),
                               (postprocess_worker, "postprocess"))]
    for w in workers:
        w.start()

    results: dict[int, WorkItem] = {}
    feed = [WorkItem(sample_index=i, text=t) for i, t in enumerate(items)]
    fed = 0
    finished = n == 0
    try:
        while not finished and not abort.aborted():
            if fed < n:
                if not _put(q_pre, feed[fed], abort, None):
                    break
                fed += 1
                if fed == n:
                    _put(q_pre, _DONE, abort, None)
            else:
                obj = _get(q_out, abort, None)
                if obj is _DONE:
                    break
                results[obj.sample_index] = obj
                if len(results) == n:
                    finished = True
    finally:
        if not finished and not abort.event.is_set():
            abort.fail("orchestrator", TinferError("pipeline ended early"))
        if finished:
            abort.event.set()  # release workers blocked in _get/_put loops
        for w in workers:
            w.join(timeout=10.0)
    if abort.error is not None and not finished:
        raise TinferError(f"pipeline stage {abort.stage!r} failed") from abort.error
    ordered = [results[i] for i in range(n)]
    stats = StageStats(stages=timing, wall_seconds=time.perf_counter() - wall0)
    return ordered, stats


# ---------------------------------------------------------------------------
# JSON-lines dataset IO: input objects carry "content"; outputs add
# "summary" and "sample_index"
# ---------------------------------------------------------------------------

def read_jsonl_texts(path: str | Path) -> list[str]:
    texts = []
    with open(path, "r", encoding="utf-8") as fh:
        for ln, line in enumerate(fh):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise FormatError(f"line {ln}: bad JSON: {e}") from None
            if not isinstance(obj, dict) or "content" not in obj:
                raise FormatError(f"line {ln}: expected an object with 'content'")
            texts.append(obj["content"])
    return texts


def write_results_jsonl(path: str | Path, items: Sequence[WorkItem]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for item in items:
            fh.write(json.dumps(
                {"content": item.text, "summary": item.output_text,
                 "sample_index": item.sample_index},
                ensure_ascii=False, sort_keys=True) + "\n")
