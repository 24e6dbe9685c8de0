import json

import numpy as np
import pytest

from tinfer.errors import BindingError, GraphError, PlanError
from tinfer.graphopt import (
    ArenaPlan,
    Node,
    OpGraph,
    TensorInfo,
    analyze_lifetimes,
    check_plan,
    demo_bindings,
    execute,
    from_json,
    fuse_horizontal,
    fuse_vertical,
    optimize,
    plan_memory,
    reference_block_graph,
    to_json,
    validate,
)
from tinfer.tensor import DType


def ti(tid, shape, klass="intermediate"):
    return TensorInfo(tid, tuple(shape), DType.F32, klass)


def graph_of(tensors, nodes):
    g = OpGraph({t.id: t for t in tensors}, nodes)
    validate(g)
    return g


def add_chain_graph():
    """((a+b)+c)+d with the final value as output."""
    tensors = [ti("a", (2, 2), "input"), ti("b", (2, 2), "input"),
               ti("c", (2, 2), "input"), ti("d", (2, 2), "input"),
               ti("t1", (2, 2)), ti("t2", (2, 2)), ti("out", (2, 2), "output")]
    nodes = [Node("n1", "Add", ["a", "b"], "t1"),
             Node("n2", "Add", ["t1", "c"], "t2"),
             Node("n3", "Add", ["t2", "d"], "out")]
    return graph_of(tensors, nodes)


class TestValidate:
    def test_unknown_kind(self):
        with pytest.raises(GraphError):
            graph_of([ti("a", (1,), "input"), ti("o", (1,), "output")],
                     [Node("n", "Frobnicate", ["a"], "o")])

    def test_use_before_def(self):
        with pytest.raises(GraphError):
            graph_of([ti("a", (1,), "input"), ti("t", (1,)),
                      ti("o", (1,), "output")],
                     [Node("n1", "Gelu", ["t"], "o"),
                      Node("n2", "Gelu", ["a"], "t")])

    def test_double_producer(self):
        with pytest.raises(GraphError):
            graph_of([ti("a", (1,), "input"), ti("t", (1,)),
                      ti("o", (1,), "output")],
                     [Node("n1", "Gelu", ["a"], "t"),
                      Node("n2", "Gelu", ["a"], "t"),
                      Node("n3", "Gelu", ["t"], "o")])


class TestFuseHorizontal:
    def test_add_chain_collapses(self):
        g = fuse_horizontal(add_chain_graph())
        assert len(g.nodes) == 1
        node = g.nodes[0]
        assert node.kind == "FusedAddN"
        assert node.inputs == ["a", "b", "c", "d"]
        assert node.output == "out"

    def test_single_add_unchanged(self):
        tensors = [ti("a", (2, 2), "input"), ti("b", (2, 2), "input"),
                   ti("o", (2, 2), "output")]
        g = graph_of(tensors, [Node("n", "Add", ["a", "b"], "o")])
        assert [n.kind for n in fuse_horizontal(g).nodes] == ["Add"]

    def test_multi_consumer_guard(self):
        tensors = [ti("a", (2, 2), "input"), ti("b", (2, 2), "input"),
                   ti("c", (2, 2), "input"), ti("t1", (2, 2)),
                   ti("o1", (2, 2), "output"), ti("o2", (2, 2), "output")]
        nodes = [Node("n1", "Add", ["a", "b"], "t1"),
                 Node("n2", "Add", ["t1", "c"], "o1"),
                 Node("n3", "Softmax", ["t1"], "o2")]
        g = fuse_horizontal(graph_of(tensors, nodes))
        assert sorted(n.kind for n in g.nodes) == ["Add", "Add", "Softmax"]

    def test_values_preserved(self):
        g0 = add_chain_graph()
        bindings = demo_bindings(g0, seed=1)
        out0, stats0 = execute(g0, None, bindings)
        g1 = fuse_horizontal(g0)
        out1, stats1 = execute(g1, None, bindings)
        assert np.array_equal(out0["out"], out1["out"])
        assert stats1.launch_count == 1
        assert stats0.launch_count == 3


class TestFuseVertical:
    def test_affine_pattern(self):
        tensors = [ti("x", (3, 4), "input"), ti("b", (4,), "weight"),
                   ti("m", (4,), "weight"), ti("t", (3, 4)),
                   ti("o", (3, 4), "output")]
        nodes = [Node("n1", "Add", ["x", "b"], "t"),
                 Node("n2", "Mul", ["t", "m"], "o")]
        g = fuse_vertical(graph_of(tensors, nodes))
        assert [n.kind for n in g.nodes] == ["FusedAffine"]
        assert g.nodes[0].inputs == ["x", "b", "m"]

    def test_matmul_bias_gelu_pattern(self):
        tensors = [ti("x", (3, 4), "input"), ti("w", (4, 5), "weight"),
                   ti("b", (5,), "weight"), ti("t1", (3, 5)), ti("t2", (3, 5)),
                   ti("o", (3, 5), "output")]
        nodes = [Node("n1", "MatMul", ["x", "w"], "t1"),
                 Node("n2", "Add", ["t1", "b"], "t2"),
                 Node("n3", "Gelu", ["t2"], "o")]
        g = fuse_vertical(graph_of(tensors, nodes))
        assert [n.kind for n in g.nodes] == ["FusedMatMulBiasAct"]
        assert g.nodes[0].attrs["act"] == "gelu"

    def test_matmul_bias_without_act(self):
        tensors = [ti("x", (3, 4), "input"), ti("w", (4, 5), "weight"),
                   ti("b", (5,), "weight"), ti("t1", (3, 5)),
                   ti("o", (3, 5), "output")]
        nodes = [Node("n1", "MatMul", ["x", "w"], "t1"),
                 Node("n2", "Add", ["t1", "b"], "o")]
        g = fuse_vertical(graph_of(tensors, nodes))
        assert [n.kind for n in g.nodes] == ["FusedMatMulBiasAct"]
        assert g.nodes[0].attrs["act"] == "none"

    def test_multi_consumer_guard(self):
        tensors = [ti("x", (3, 4), "input"), ti("w", (4, 4), "weight"),
                   ti("b", (4,), "weight"), ti("t1", (3, 4)),
                   ti("o1", (3, 4), "output"), ti("o2", (3, 4), "output")]
        nodes = [Node("n1", "MatMul", ["x", "w"], "t1"),
                 Node("n2", "Add", ["t1", "b"], "o1"),
                 Node("n3", "Gelu", ["t1"], "o2")]
        g = fuse_vertical(graph_of(tensors, nodes))
        assert sorted(n.kind for n in g.nodes) == ["Add", "Gelu", "MatMul"]

    def test_values_preserved_bitwise(self):
        g0 = reference_block_graph(seq=16, hidden=32, ffn=64, out_width=48)
        bindings = demo_bindings(g0, seed=2)
        out0, _ = execute(g0, None, bindings)
        g1 = optimize(g0)
        out1, _ = execute(g1, None, bindings)
        for tid, ref in out0.items():
            assert np.array_equal(ref, out1[tid])


# ---------------------------------------------------------------------------
# random DAGs: fusion soundness and planning validity
# ---------------------------------------------------------------------------

def random_graph(seed: int) -> OpGraph:
    g = np.random.default_rng(seed)
    tensors = {}
    nodes = []
    pool = []  # (tid, shape) of produced or input tensors

    def new_tensor(shape, klass):
        tid = f"t{len(tensors)}"
        tensors[tid] = ti(tid, shape, klass)
        if klass != "output":
            pool.append((tid, shape))
        return tid

    for _ in range(int(g.integers(2, 4))):
        shape = (int(g.integers(1, 16)), int(g.integers(1, 16)))
        new_tensor(shape, "input")
    n_nodes = int(g.integers(3, 13))
    for i in range(n_nodes):
        kind = str(g.choice(["Add", "Add", "Mul", "MatMul", "Gelu"]))
        src, shape = pool[int(g.integers(len(pool)))]
        if kind == "MatMul":
            if len(shape) != 2:
                kind = "Gelu"
            else:
                n = int(g.integers(1, 16))
                w = new_tensor((shape[1], n), "weight")
                out = new_tensor((shape[0], n), "intermediate")
                nodes.append(Node(f"n{i}", "MatMul", [src, w], out))
                continue
        if kind in ("Add", "Mul"):
            if g.random() < 0.3 and len(shape) == 2:
                other = new_tensor((shape[-1],), "weight")
            else:
                same = [t for t, s in pool if s == shape]
                other = str(g.choice(same))
            out = new_tensor(shape, "intermediate")
            ins = [src, other] if g.random() < 0.5 else [other, src]
            nodes.append(Node(f"n{i}", kind, ins, out))
            continue
        out = new_tensor(shape, "intermediate")
        nodes.append(Node(f"n{i}", "Gelu", [src], out))

    # everything unconsumed becomes an output so no value goes unobserved
    consumed = {tid for n in nodes for tid in n.inputs}
    produced = {n.output for n in nodes}
    graph = OpGraph(tensors, nodes)
    for n in nodes:
        if n.output not in consumed and n.output in produced:
            info = tensors[n.output]
            tensors[n.output] = TensorInfo(info.id, info.shape, info.dtype,
                                           "output")
    validate(graph)
    return graph


class TestFusionSoundnessRandom:
    def test_fifty_random_dags(self):
        fused_any = 0
        for seed in range(50):
            g0 = random_graph(seed)
            bindings = demo_bindings(g0, seed=seed + 1000)
            out0, stats0 = execute(g0, None, bindings)
            g1 = optimize(g0)
            out1, stats1 = execute(g1, None, bindings)
            assert set(out0) == set(out1), seed
            for tid, ref in out0.items():
                assert np.array_equal(ref, out1[tid]), (seed, tid)
            assert stats1.launch_count <= stats0.launch_count, seed
            if len(g1.nodes) < len(g0.nodes):
                fused_any += 1
                assert stats1.launch_count < stats0.launch_count, seed
            # planning must be valid on every graph
            plan = plan_memory(g1, analyze_lifetimes(g1))
            check_plan(plan)
        assert fused_any > 10  # the generator must actually exercise fusion


# ---------------------------------------------------------------------------
# lifetimes
# ---------------------------------------------------------------------------

def brute_force_lifetimes(g: OpGraph) -> dict[str, tuple[int, int]]:
    """Oracle: for each intermediate, rescan every node for uses."""
    out = {}
    for i, n in enumerate(g.nodes):
        if g.tensors[n.output].klass != "intermediate":
            continue
        last = i
        for j, m in enumerate(g.nodes):
            if n.output in m.inputs:
                last = max(last, j)
        out[n.output] = (i, last)
    return out


class TestLifetimes:
    def test_linear_chain(self):
        tensors = [ti("a", (2, 2), "input"), ti("t1", (2, 2)), ti("t2", (2, 2)),
                   ti("o", (2, 2), "output")]
        nodes = [Node("n0", "Gelu", ["a"], "t1"),
                 Node("n1", "Gelu", ["t1"], "t2"),
                 Node("n2", "Gelu", ["t2"], "o")]
        lt = analyze_lifetimes(graph_of(tensors, nodes))
        assert lt == {"t1": (0, 1), "t2": (1, 2)}

    def test_diamond_takes_later_consumer(self):
        tensors = [ti("a", (2, 2), "input"), ti("t", (2, 2)),
                   ti("o1", (2, 2), "output"), ti("o2", (2, 2), "output")]
        nodes = [Node("n0", "Gelu", ["a"], "t"),
                 Node("n1", "Gelu", ["t"], "o1"),
                 Node("n2", "Softmax", ["t"], "o2")]
        lt = analyze_lifetimes(graph_of(tensors, nodes))
        assert lt["t"] == (0, 2)

    def test_dead_tensor_warns(self, caplog):
        tensors = [ti("a", (2, 2), "input"), ti("t", (2, 2)),
                   ti("o", (2, 2), "output")]
        nodes = [Node("n0", "Gelu", ["a"], "t"),
                 Node("n1", "Softmax", ["a"], "o")]
        with caplog.at_level("WARNING"):
            lt = analyze_lifetimes(graph_of(tensors, nodes))
        assert lt["t"] == (0, 0)
        assert any("dead" in r.message for r in caplog.records)

    def test_random_dags_match_rescan_oracle(self):
        for seed in range(30):
            g = random_graph(seed + 500)
            assert analyze_lifetimes(g) == brute_force_lifetimes(g), seed


# ---------------------------------------------------------------------------
# arena planning
# ---------------------------------------------------------------------------

def min_total_buffer_bytes(sizes: list[int],
                           lifetimes: list[tuple[int, int]]) -> int:
    """Exhaustive branch-and-bound over all lifetime-disjoint groupings
    (buffer cost = max member size); the planner's optimality oracle."""
    order = sorted(range(len(sizes)), key=lambda i: lifetimes[i][0])
    best = [sum(sizes)]

    def overlap(a, b):
        return not (a[1] < b[0] or b[1] < a[0])

    def rec(idx, buffers):
        cost = sum(b[0] for b in buffers)
        if cost >= best[0]:
            return
        if idx == len(order):
            best[0] = cost
            return
        t = order[idx]
        for b in buffers:
            if all(not overlap(lifetimes[t], lifetimes[m]) for m in b[1]):
                old_size = b[0]
                b[0] = max(old_size, sizes[t])
                b[1].append(t)
                rec(idx + 1, buffers)
                b[1].pop()
                b[0] = old_size
        buffers.append([sizes[t], [t]])
        rec(idx + 1, buffers)
        buffers.pop()

    rec(0, [])
    return best[0]


class TestPlanMemory:
    def _plan(self, g):
        lt = analyze_lifetimes(g)
        plan = plan_memory(g, lt)
        check_plan(plan)
        return plan

    def test_chain_needs_two_buffers(self):
        tensors = [ti("a", (4, 4), "input")]
        nodes = []
        prev = "a"
        for i in range(6):
            tid = f"t{i}"
            tensors.append(ti(tid, (4, 4)))
            nodes.append(Node(f"n{i}", "Gelu", [prev], tid))
            prev = tid
        tensors.append(ti("o", (4, 4), "output"))
        nodes.append(Node("last", "Gelu", [prev], "o"))
        plan = self._plan(graph_of(tensors, nodes))
        assert plan.buffer_count == 2

    def test_all_overlapping_needs_n_buffers(self):
        # one producer each, all consumed by the final node
        tensors = [ti("a", (2, 2), "input"), ti("o", (2, 2), "output")]
        nodes = []
        for i in range(4):
            tensors.append(ti(f"t{i}", (2, 2)))
            nodes.append(Node(f"n{i}", "Gelu", ["a"], f"t{i}"))
        nodes.append(Node("s1", "Add", ["t0", "t1"], "s1t"))
        tensors.append(ti("s1t", (2, 2)))
        nodes.append(Node("s2", "Add", ["s1t", "t2"], "s2t"))
        tensors.append(ti("s2t", (2, 2)))
        nodes.append(Node("s3", "Add", ["s2t", "t3"], "o"))
        g = graph_of(tensors, nodes)
        plan = self._plan(g)
        # t0..t3 all alive at node s1; they need distinct buffers
        buffers = {plan.assignment[f"t{i}"] for i in range(4)}
        assert len(buffers) == 4

    def test_reference_block_near_optimal(self):
        g = optimize(reference_block_graph())
        lt = analyze_lifetimes(g)
        plan = plan_memory(g, lt)
        check_plan(plan)
        ids = list(lt)
        opt = min_total_buffer_bytes([g.tensors[t].nbytes for t in ids],
                                     [lt[t] for t in ids])
        assert plan.peak_bytes <= 1.25 * opt
        total = sum(g.tensors[t].nbytes for t in ids)
        assert plan.peak_bytes < total
        # reuse effectiveness on the reference block (measured, then frozen)
        assert plan.peak_bytes <= 0.6 * total

    def test_plan_never_exceeds_fresh(self):
        for seed in range(20):
            g = optimize(random_graph(seed + 300))
            plan = self._plan(g)
            bindings = demo_bindings(g, seed)
            _, fresh = execute(g, None, bindings)
            _, planned = execute(g, plan, bindings)
            assert planned.peak_bytes <= fresh.peak_bytes, seed
            assert planned.peak_bytes == plan.peak_bytes


class TestExecute:
    def test_planned_matches_fresh_bitwise(self):
        g = optimize(reference_block_graph(seq=8, hidden=16, ffn=32,
                                           out_width=24))
        bindings = demo_bindings(g, seed=5)
        out_fresh, _ = execute(g, None, bindings)
        plan = plan_memory(g, analyze_lifetimes(g))
        out_planned, stats = execute(g, plan, bindings)
        for tid in out_fresh:
            assert np.array_equal(out_fresh[tid], out_planned[tid])
        assert stats.launch_count == len(g.nodes)

    def test_missing_binding(self):
        g = add_chain_graph()
        bindings = demo_bindings(g, seed=1)
        del bindings["c"]
        with pytest.raises(BindingError):
            execute(g, None, bindings)

    def test_bad_plan_detected(self):
        g = add_chain_graph()
        lt = analyze_lifetimes(g)
        plan = plan_memory(g, lt)
        # force both intermediates into one buffer although they overlap
        bad = ArenaPlan(buffer_sizes=[max(plan.buffer_sizes)],
                        assignment={tid: 0 for tid in plan.assignment},
                        tensor_bytes=plan.tensor_bytes,
                        lifetimes=plan.lifetimes)
        with pytest.raises(PlanError):
            execute(g, bad, demo_bindings(g, seed=1))


class TestGraphJson:
    def test_roundtrip(self):
        g = reference_block_graph()
        text = to_json(g)
        g2 = from_json(text)
        assert to_json(g2) == text
        assert json.loads(text)["nodes"][0]["kind"] == "LayerNorm"

    def test_bad_json_rejected(self):
        with pytest.raises(GraphError):
            from_json("{not json")

    def test_structurally_bad_rejected(self):
        with pytest.raises(GraphError):
            from_json(json.dumps({"tensors": [], "nodes": [
                {"id": "n", "kind": "Add", "inputs": ["x", "y"],
                 "output": "z"}]}))
