"""Operator-graph optimizations: horizontal/vertical fusion and
lifetime-based memory-reuse planning, with an executor that proves value
equivalence and reports launch counts and peak bytes.

Fusion is deliberately narrow — Add chains (horizontal) and the
Add->Mul / MatMul->Add->[Gelu] patterns (vertical) — and every fused
kernel evaluates the exact expression order of the nodes it replaces, so
f32 results are bit-identical before and after rewriting. An intermediate
feeding more than one consumer is never fused away.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import (
    BindingError,
    DimensionError,
    GraphError,
    PlanError,
)
from .tensor import DType, layer_norm_f32

log = logging.getLogger(__name__)

KINDS = frozenset({
    "MatMul", "Add", "Mul", "Gelu", "Softmax", "LayerNorm",
    "FusedAddN", "FusedAffine", "FusedMatMulBiasAct",
})
CLASSES = frozenset({"input", "weight", "intermediate", "output"})


@dataclass(frozen=True)
class TensorInfo:
    id: str
    shape: tuple[int, ...]
    dtype: DType = DType.F32
    klass: str = "intermediate"

    @property
    def nbytes(self) -> int:
        n = 1
        for e in self.shape:
            n *= e
        return n * self.dtype.itemsize


@dataclass
class Node:
    id: str
    kind: str
    inputs: list[str]
    output: str
    attrs: dict = field(default_factory=dict)


@dataclass
class OpGraph:
    tensors: dict[str, TensorInfo]
    nodes: list[Node]

    def copy(self) -> "OpGraph":
        return OpGraph(dict(self.tensors),
                       [Node(n.id, n.kind, list(n.inputs), n.output,
                             dict(n.attrs)) for n in self.nodes])

    def consumers(self) -> dict[str, list[int]]:
        out: dict[str, list[int]] = {tid: [] for tid in self.tensors}
        for i, n in enumerate(self.nodes):
            for tid in n.inputs:
                out[tid].append(i)
        return out


def validate(g: OpGraph) -> None:
    """Raise GraphError unless the node list is a valid topological order
    with single-producer intermediates."""
    seen_nodes: set[str] = set()
    produced: set[str] = set()
    for t in g.tensors.values():
        if t.klass not in CLASSES:
            raise GraphError(f"tensor {t.id}: unknown class {t.klass!r}")
        if not t.shape or any(e < 1 for e in t.shape):
            raise GraphError(f"tensor {t.id}: bad shape {t.shape}")
    for n in g.nodes:
        if n.id in seen_nodes:
            raise GraphError(f"duplicate node id {n.id!r}")
        seen_nodes.add(n.id)
        if n.kind not in KINDS:
            raise GraphError(f"node {n.id}: unknown kind {n.kind!r}")
        for tid in n.inputs:
            info = g.tensors.get(tid)
            if info is None:
                raise GraphError(f"node {n.id}: unknown input tensor {tid!r}")
            if info.klass in ("intermediate", "output") and tid not in produced:
                raise GraphError(
                    f"node {n.id}: input {tid!r} used before it is produced "
                    "(node order must be topological)")
        info = g.tensors.get(n.output)
        if info is None:
            raise GraphError(f"node {n.id}: unknown output tensor {n.output!r}")
        if info.klass in ("input", "weight"):
            raise GraphError(f"node {n.id}: cannot write {info.klass} tensor")
        if n.output in produced:
            raise GraphError(f"tensor {n.output!r} has two producers")
        produced.add(n.output)


# ---------------------------------------------------------------------------
# fusion passes
# ---------------------------------------------------------------------------

def _single_use(g: OpGraph, cons: dict[str, list[int]], tid: str,
                by_node: int) -> bool:
    """True when tid is an intermediate consumed exactly once, by by_node."""
    info = g.tensors[tid]
    if info.klass != "intermediate":
        return False
    uses = cons[tid]
    if len(uses) != 1 or uses[0] != by_node:
        return False
    return g.nodes[by_node].inputs.count(tid) == 1


def fuse_horizontal(g: OpGraph) -> OpGraph:
    """Collapse maximal linear chains of Add nodes into FusedAddN.

    The flattened operand list preserves the chain's evaluation order
    (IEEE addition is commutative but not associative, so only the linear
    spine is flattened; side operands stay as leaves).
    """
    validate(g)
    g = g.copy()
    cons = g.consumers()
    nodes = g.nodes
    producer = {n.output: i for i, n in enumerate(nodes)}
    absorbed: set[int] = set()
    replace_at: dict[int, Node] = {}
    fused_n = 0
    for i, head in enumerate(nodes):
        if head.kind != "Add" or i in absorbed or i in replace_at:
            continue
        # skip if this Add extends an earlier Add (not a chain head)
        extends = any(
            tid in producer and nodes[producer[tid]].kind == "Add"
            and _single_use(g, cons, tid, i)
            for tid in head.inputs
        )
        if extends:
            continue
        spine = [i]
        leaves = list(head.inputs)
        cur = i
        while True:
            out = nodes[cur].output
            uses = cons[out]
            if g.tensors[out].klass != "intermediate" or len(uses) != 1:
                break
            nxt = uses[0]
            if nodes[nxt].kind != "Add" or nxt in absorbed:
                break
            if nodes[nxt].inputs.count(out) != 1:
                break
            other = [tid for tid in nodes[nxt].inputs if tid != out]
            leaves += other
            spine.append(nxt)
            cur = nxt
        if len(spine) < 2:
            continue
        for j in spine[:-1]:
            absorbed.add(j)
            del g.tensors[nodes[j].output]
        fused_n += 1
        replace_at[spine[-1]] = Node(
            id=f"fused_addn_{fused_n}", kind="FusedAddN", inputs=leaves,
            output=nodes[spine[-1]].output)
    g.nodes = [replace_at.get(i, n) for i, n in enumerate(nodes)
               if i not in absorbed]
    validate(g)
    return g


def fuse_vertical(g: OpGraph) -> OpGraph:
    """Rewrite Add->Mul into FusedAffine and MatMul->Add(bias)->[Gelu]
    into FusedMatMulBiasAct, when every absorbed intermediate has a single
    consumer."""
    validate(g)
    g = g.copy()
    cons = g.consumers()
    nodes = g.nodes
    absorbed: set[int] = set()
    replace_at: dict[int, Node] = {}
    fused_n = 0

    def sole_consumer(idx: int) -> int | None:
        out = nodes[idx].output
        uses = cons[out]
        if _single_use(g, cons, out, uses[0]) if uses else False:
            return uses[0]
        return None

    for i, n in enumerate(nodes):
        if i in absorbed:
            continue
        if n.kind == "MatMul":
            j = sole_consumer(i)
            if (j is None or nodes[j].kind != "Add" or j in absorbed
                    or j in replace_at):
                continue
            bias = [t for t in nodes[j].inputs if t != n.output]
            if len(bias) != 1 or len(g.tensors[bias[0]].shape) != 1:
                continue
            last = j
            act = "none"
            k = sole_consumer(j)
            if k is not None and nodes[k].kind == "Gelu" and k not in absorbed:
                last = k
                act = "gelu"
            for idx in ([i, j] if last == j else [i, j, k]):
                if idx != last:
                    absorbed.add(idx)
                    del g.tensors[nodes[idx].output]
            fused_n += 1
            replace_at[last] = Node(
                id=f"fused_mmba_{fused_n}", kind="FusedMatMulBiasAct",
                inputs=[n.inputs[0], n.inputs[1], bias[0]],
                output=nodes[last].output, attrs={"act": act})
        elif n.kind == "Add" and i not in replace_at:
            j = sole_consumer(i)
            if (j is None or nodes[j].kind != "Mul" or j in absorbed
                    or j in replace_at):
                continue
            factor = [t for t in nodes[j].inputs if t != n.output]
            if len(factor) != 1:
                continue
            absorbed.add(i)
            del g.tensors[n.output]
            fused_n += 1
            replace_at[j] = Node(
                id=f"fused_affine_{fused_n}", kind="FusedAffine",
                inputs=[n.inputs[0], n.inputs[1], factor[0]],
                output=nodes[j].output)
    g.nodes = [replace_at.get(i, nd) for i, nd in enumerate(nodes)
               if i not in absorbed]
    validate(g)
    return g


def optimize(g: OpGraph) -> OpGraph:
    """Standard pass order: vertical first (absorbs bias adds into their
    producers), then horizontal over the remaining Add chains."""
    return fuse_horizontal(fuse_vertical(g))


# ---------------------------------------------------------------------------
# lifetimes and arena planning
# ---------------------------------------------------------------------------

def analyze_lifetimes(g: OpGraph) -> dict[str, tuple[int, int]]:
    """(producer index, last consumer index) per intermediate tensor."""
    validate(g)
    cons = g.consumers()
    out: dict[str, tuple[int, int]] = {}
    for i, n in enumerate(g.nodes):
        info = g.tensors[n.output]
        if info.klass != "intermediate":
            continue
        uses = cons[n.output]
        if not uses:
            log.warning("dead intermediate tensor %r (no consumer)", n.output)
            out[n.output] = (i, i)
        else:
            out[n.output] = (i, max(uses))
    return out


@dataclass
class ArenaPlan:
    buffer_sizes: list[int]
    assignment: dict[str, int]  # tensor id -> buffer index (offset always 0)
    tensor_bytes: dict[str, int]
    lifetimes: dict[str, tuple[int, int]]

    @property
    def buffer_count(self) -> int:
        return len(self.buffer_sizes)

    @property
    def peak_bytes(self) -> int:
        return sum(self.buffer_sizes)


def _overlap(a: tuple[int, int], b: tuple[int, int]) -> bool:
    return not (a[1] < b[0] or b[1] < a[0])


def plan_memory(g: OpGraph, lifetimes: dict[str, tuple[int, int]]) -> ArenaPlan:
    """Greedy first-fit in definition order: the lowest-index buffer that
    is large enough and lifetime-disjoint wins, else a new buffer opens."""
    sizes = {tid: g.tensors[tid].nbytes for tid in lifetimes}
    order = sorted(lifetimes, key=lambda tid: lifetimes[tid][0])
    buffer_sizes: list[int] = []
    members: list[list[str]] = []
    assignment: dict[str, int] = {}
    for tid in order:
        placed = False
        for bi in range(len(buffer_sizes)):
            if buffer_sizes[bi] < sizes[tid]:
                continue
            if any(_overlap(lifetimes[tid], lifetimes[other])
                   for other in members[bi]):
                continue
            assignment[tid] = bi
            members[bi].append(tid)
            placed = True
            break
        if not placed:
            buffer_sizes.append(sizes[tid])
            members.append([tid])
            assignment[tid] = len(buffer_sizes) - 1
    return ArenaPlan(buffer_sizes=buffer_sizes, assignment=assignment,
                     tensor_bytes=sizes, lifetimes=dict(lifetimes))


def check_plan(plan: ArenaPlan) -> None:
    """Raise PlanError on any same-buffer lifetime overlap or undersized
    buffer."""
    by_buffer: dict[int, list[str]] = {}
    for tid, bi in plan.assignment.items():
        by_buffer.setdefault(bi, []).append(tid)
        if plan.tensor_bytes[tid] > plan.buffer_sizes[bi]:
            raise PlanError(f"tensor {tid!r} does not fit its buffer")
    for bi, tids in by_buffer.items():
        for i in range(len(tids)):
            for j in range(i + 1, len(tids)):
                a, b = tids[i], tids[j]
                if _overlap(plan.lifetimes[a], plan.lifetimes[b]):
                    raise PlanError(
                        f"tensors {a!r} and {b!r} share buffer {bi} with "
                        f"overlapping lifetimes")


# ---------------------------------------------------------------------------
# execution
# ---------------------------------------------------------------------------

@dataclass
class ExecStats:
    launch_count: int
    peak_bytes: int


def _broadcastable(a: np.ndarray, b: np.ndarray) -> bool:
    if a.shape == b.shape:
        return True
    # row-broadcast: a rank-1 operand against the last axis, either side
    if b.ndim == 1 and a.ndim > 1 and a.shape[-1] == b.shape[0]:
        return True
    return a.ndim == 1 and b.ndim > 1 and b.shape[-1] == a.shape[0]


def _eval_node(n: Node, val: dict[str, np.ndarray]) -> np.ndarray:
    ins = [val[t] for t in n.inputs]
    if n.kind == "MatMul":
        a, w = ins
        if a.ndim != 2 or w.ndim != 2 or a.shape[1] != w.shape[0]:
            raise DimensionError(f"node {n.id}: MatMul shapes {a.shape} x {w.shape}")
        return kernels.gemm_f32(a, w)
    if n.kind == "FusedMatMulBiasAct":
        a, w, bias = ins
        act = kernels.ACT_GELU if n.attrs.get("act") == "gelu" else kernels.ACT_NONE
        return kernels.gemm_f32(a, w, bias, act)
    if n.kind in ("Add", "Mul"):
        a, b = ins
        if not _broadcastable(a, b):
            raise DimensionError(f"node {n.id}: shapes {a.shape}, {b.shape}")
        return a + b if n.kind == "Add" else a * b
    if n.kind == "FusedAddN":
        acc = ins[0] + ins[1]
        for x in ins[2:]:
            acc = acc + x
        return acc
    if n.kind == "FusedAffine":
        x, b, m = ins
        return (x + b) * m
    if n.kind == "Gelu":
        (x,) = ins
        out = np.empty_like(x)
        kernels.gelu(x, out)
        return out
    if n.kind == "Softmax":
        (x,) = ins
        if x.ndim != 2:
            raise DimensionError(f"node {n.id}: Softmax expects 2-D input")
        out = np.empty_like(x)
        kernels.softmax_rows_kernel(x, out)
        return out
    if n.kind == "LayerNorm":
        x, gamma, beta = ins
        return layer_norm_f32(x, gamma, beta, float(n.attrs.get("eps", 1e-5)))
    raise GraphError(f"node {n.id}: unknown kind {n.kind!r}")


def execute(g: OpGraph, plan: ArenaPlan | None, bindings: dict[str, np.ndarray]
            ) -> tuple[dict[str, np.ndarray], ExecStats]:
    """Run the graph in node order.

    With a plan, intermediates live in shared arena buffers (validated
    against the plan's lifetimes — aliasing raises PlanError); without
    one, every intermediate gets a fresh allocation that is retained for
    the whole run, which is the no-reuse peak the plan is measured
    against. Results are bit-identical either way.
    """
    validate(g)
    val: dict[str, np.ndarray] = {}
    for tid, info in g.tensors.items():
        if info.klass in ("input", "weight"):
            if tid not in bindings:
                raise BindingError(f"missing binding for {info.klass} {tid!r}")
            arr = np.asarray(bindings[tid], dtype=np.float32)
            if arr.shape != info.shape:
                raise BindingError(
                    f"binding {tid!r} has shape {arr.shape}, expected {info.shape}")
            val[tid] = arr

    buffers: list[np.ndarray] = []
    views: dict[str, np.ndarray] = {}
    if plan is not None:
        check_plan(plan)
        buffers = [np.empty(sz, dtype=np.uint8) for sz in plan.buffer_sizes]
        for tid, bi in plan.assignment.items():
            info = g.tensors[tid]
            nbytes = info.nbytes
            views[tid] = buffers[bi][:nbytes].view(np.float32).reshape(info.shape)

    fresh_bytes = 0
    launches = 0
    outputs: dict[str, np.ndarray] = {}
    for idx, n in enumerate(g.nodes):
        if plan is not None:
            # runtime aliasing guard: inputs to this node must not share a
            # buffer with its output
            out_buf = plan.assignment.get(n.output)
            if out_buf is not None:
                for tid in n.inputs:
                    if plan.assignment.get(tid) == out_buf:
                        raise PlanError(
                            f"node {n.id}: output {n.output!r} aliases input "
                            f"{tid!r} in buffer {out_buf}")
        result = _eval_node(n, val)
        launches += 1
        info = g.tensors[n.output]
        if info.klass == "intermediate":
            if plan is not None and n.output in views:
                np.copyto(views[n.output], result)
                val[n.output] = views[n.output]
            else:
                fresh_bytes += info.nbytes
                val[n.output] = result
        else:
            outputs[n.output] = result
            val[n.output] = result
    peak = plan.peak_bytes if plan is not None else fresh_bytes
    return outputs, ExecStats(launch_count=launches, peak_bytes=peak)


# ---------------------------------------------------------------------------
# JSON dump/load
# ---------------------------------------------------------------------------

def to_json(g: OpGraph) -> str:
    doc = {
        "tensors": [
            {"id": t.id, "shape": list(t.shape), "dtype": t.dtype.value,
             "class": t.klass}
            for t in g.tensors.values()
        ],
        "nodes": [
            {"id": n.id, "kind": n.kind, "inputs": list(n.inputs),
             "output": n.output, "attrs": n.attrs}
            for n in g.nodes
        ],
    }
    return json.dumps(doc, indent=2, sort_keys=True)


def from_json(text: str) -> OpGraph:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise GraphError(f"bad graph JSON: {e}") from None
    try:
        tensors = {
            t["id"]: TensorInfo(t["id"], tuple(t["shape"]),
                                DType.from_name(t["dtype"]), t["class"])
            for t in doc["tensors"]
        }
        nodes = [Node(n["id"], n["kind"], list(n["inputs"]), n["output"],
                      dict(n.get("attrs", {})))
                 for n in doc["nodes"]]
    except (KeyError, TypeError) as e:
        raise GraphError(f"bad graph JSON structure: {e}") from None
    g = OpGraph(tensors, nodes)
    validate(g)
    return g


def save_graph(path: str | Path, g: OpGraph) -> None:
    Path(path).write_text(to_json(g) + "\n", encoding="utf-8")


def load_graph(path: str | Path) -> OpGraph:
    return from_json(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# reference block graph (one decoder sub-block's dataflow at desk scale)
# ---------------------------------------------------------------------------

def reference_block_graph(seq: int = 64, hidden: int = 128, ffn: int = 512,
                          out_width: int = 128) -> OpGraph:
    T, H, F, V = seq, hidden, ffn, out_width

    def t(tid, shape, klass="intermediate"):
        return TensorInfo(tid, shape, DType.F32, klass)

    tensors = {x.id: x for x in [
        t("x", (T, H), "input"), t("skip", (T, H), "input"),
        t("ln1_g", (H,), "weight"), t("ln1_b", (H,), "weight"),
        t("w1", (H, F), "weight"), t("bias1", (F,), "weight"),
        t("w2", (F, H), "weight"), t("bias2", (H,), "weight"),
        t("ln2_g", (H,), "weight"), t("ln2_b", (H,), "weight"),
        t("shift", (H,), "weight"), t("scale", (H,), "weight"),
        t("w_out", (H, V), "weight"),
        t("t_ln", (T, H)), t("t_mm1", (T, F)), t("t_b1", (T, F)),
        t("t_act", (T, F)), t("t_mm2", (T, H)), t("t_b2", (T, H)),
        t("t_res", (T, H)), t("t_res2", (T, H)), t("t_ln2", (T, H)),
        t("t_sh", (T, H)), t("t_sc", (T, H)), t("t_logits", (T, V)),
        t("probs", (T, V), "output"),
    ]}
    nodes = [
        Node("ln1", "LayerNorm", ["x", "ln1_g", "ln1_b"], "t_ln", {"eps": 1e-5}),
        Node("mm1", "MatMul", ["t_ln", "w1"], "t_mm1"),
        Node("badd1", "Add", ["t_mm1", "bias1"], "t_b1"),
        Node("act", "Gelu", ["t_b1"], "t_act"),
        Node("mm2", "MatMul", ["t_act", "w2"], "t_mm2"),
        Node("badd2", "Add", ["t_mm2", "bias2"], "t_b2"),
        Node("res1", "Add", ["t_b2", "x"], "t_res"),
        Node("res2", "Add", ["t_res", "skip"], "t_res2"),
        Node("ln2", "LayerNorm", ["t_res2", "ln2_g", "ln2_b"], "t_ln2",
             {"eps": 1e-5}),
        Node("shift", "Add", ["t_ln2", "shift"], "t_sh"),
        Node("scalemul", "Mul", ["t_sh", "scale"], "t_sc"),
        Node("proj", "MatMul", ["t_sc", "w_out"], "t_logits"),
        Node("probs", "Softmax", ["t_logits"], "probs"),
    ]
    g = OpGraph(tensors, nodes)
    validate(g)
    return g


def demo_bindings(g: OpGraph, seed: int = 0) -> dict[str, np.ndarray]:
    """Deterministic random bindings for every input/weight tensor."""
    from .rng import SplitMix64
    stream = SplitMix64(seed)
    out = {}
    for tid, info in g.tensors.items():
        if info.klass in ("input", "weight"):
            n = 1
            for e in info.shape:
                n *= e
            out[tid] = stream.uniform(n, -1.0, 1.0).astype(np.float32).reshape(
                info.shape)
    return out
