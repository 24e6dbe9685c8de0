import time

import numpy as np
import pytest

from tinfer.bench import gen_dataset, gen_vocab
from tinfer.errors import ConfigError, ParameterError, TinferError
from tinfer.model import init_random
from tinfer.pipeline import (
    PipelineSettings,
    plan_batches,
    padding_waste,
    read_jsonl_texts,
    run_pipeline,
    run_sequential,
    write_results_jsonl,
)
from tinfer.tokenizer import build

from conftest import small_config


@pytest.fixture(scope="module")
def setup():
    model = init_random(small_config(), seed=7)
    vocab = gen_vocab(64, seed=3)
    tok = build(vocab)
    texts = gen_dataset(60, seed=5, mean=10, max_len=30, vocab=vocab)
    return model, tok, texts


def settings(**kw):
    base = dict(queue_capacity=4, max_batch_size=4, bucket_width=4,
                max_new_tokens=6)
    base.update(kw)
    return PipelineSettings(**base)


class TestPlanBatches:
    def test_stated_example(self):
        plan = plan_batches([3, 9, 4, 9], max_batch_size=2, bucket_width=0)
        assert plan.groups == [[1, 3], [2], [0]]

    def test_equal_lengths_chunk_in_index_order(self):
        plan = plan_batches([5] * 10, max_batch_size=4, bucket_width=0)
        assert plan.groups == [[0, 1, 2, 3], [4, 5, 6, 7], [8, 9]]

    def test_batch_one_gives_singletons_desc(self):
        plan = plan_batches([2, 7, 5], max_batch_size=1, bucket_width=99)
        assert plan.groups == [[1], [2], [0]]

    def test_empty_input(self):
        assert plan_batches([], 4, 2).groups == []

    def test_partition_and_width_invariants(self):
        g = np.random.default_rng(0)
        for _ in range(25):
            lengths = [int(x) for x in g.integers(1, 100, g.integers(1, 60))]
            bs = int(g.integers(1, 9))
            bw = int(g.integers(0, 20))
            plan = plan_batches(lengths, bs, bw)
            seen = sorted(i for grp in plan.groups for i in grp)
            assert seen == list(range(len(lengths)))
            for gi, grp in enumerate(plan.groups):
                assert len(grp) <= bs
                mx = plan.group_pad[gi]
                assert mx == max(lengths[i] for i in grp)
                assert all(mx - lengths[i] <= bw for i in grp)

    def test_waste_not_worse_than_identity_chunking(self):
        g = np.random.default_rng(1)
        for _ in range(25):
            # mimic the short-text length profile: most under 100
            lengths = [int(min(99, 1 + x)) for x in
                       g.gamma(2.0, 25.0, g.integers(5, 80))]
            bs = int(g.integers(2, 9))
            plan = plan_batches(lengths, bs, bucket_width=8)
            ident_waste = 0
            for i in range(0, len(lengths), bs):
                chunk = lengths[i:i + bs]
                ident_waste += sum(max(chunk) - x for x in chunk)
            assert padding_waste(plan, lengths) <= ident_waste

    def test_parameter_validation(self):
        with pytest.raises(ParameterError):
            plan_batches([1], 0, 0)
        with pytest.raises(ParameterError):
            plan_batches([1], 1, -1)


class TestRunSequential:
    def test_empty_input(self, setup):
        model, tok, _ = setup
        items, stats = run_sequential([], model, tok, settings())
        assert items == []

    def test_deterministic(self, setup):
        model, tok, texts = setup
        a, _ = run_sequential(texts[:20], model, tok, settings())
        b, _ = run_sequential(texts[:20], model, tok, settings())
        assert [w.output_text for w in a] == [w.output_text for w in b]

    def test_busy_time_accounts_for_wall(self, setup):
        model, tok, texts = setup
        _, stats = run_sequential(texts, model, tok, settings())
        busy = sum(t.busy_seconds for t in stats.stages.values())
        assert busy <= stats.wall_seconds
        assert busy >= 0.95 * stats.wall_seconds

    def test_incompatible_tokenizer_rejected(self, setup):
        model, _, texts = setup
        other = build(gen_vocab(32, seed=1))
        with pytest.raises(ConfigError):
            run_sequential(texts[:2], model, other, settings())


class TestRunPipeline:
    def test_single_item(self, setup):
        model, tok, texts = setup
        seq, _ = run_sequential(texts[:1], model, tok, settings())
        pipe, _ = run_pipeline(texts[:1], model, tok, settings(),
                               watchdog_seconds=30)
        assert [w.output_text for w in pipe] == [w.output_text for w in seq]

    def test_matches_sequential_and_preserves_order(self, setup):
        model, tok, texts = setup
        st = settings()
        seq, _ = run_sequential(texts, model, tok, st)
        pipe, _ = run_pipeline(texts, model, tok, st, watchdog_seconds=30)
        assert [w.sample_index for w in pipe] == list(range(len(texts)))
        assert [w.output_text for w in pipe] == [w.output_text for w in seq]
        assert [w.generated_ids for w in pipe] == [w.generated_ids for w in seq]

    @pytest.mark.parametrize("capacity", [1, 2, 8])
    def test_no_deadlock_across_capacities(self, setup, capacity):
        model, tok, texts = setup
        st = settings(queue_capacity=capacity)
        pipe, _ = run_pipeline(texts, model, tok, st, watchdog_seconds=30)
        assert len(pipe) == len(texts)

    def test_zero_queue_capacity_rejected(self, setup):
        model, tok, texts = setup
        with pytest.raises(ParameterError):
            run_pipeline(texts[:2], model, tok, settings(queue_capacity=0))

    def test_poisoned_item_terminates_with_error(self, setup):
        model, tok, texts = setup
        poisoned = list(texts[:10])
        poisoned[4] = None  # tokenizer will raise on a non-string
        t0 = time.monotonic()
        with pytest.raises(TinferError) as err:
            run_pipeline(poisoned, model, tok, settings(),
                         watchdog_seconds=30)
        assert time.monotonic() - t0 < 30
        assert "preprocess" in str(err.value)

    def test_empty_input(self, setup):
        model, tok, _ = setup
        items, _ = run_pipeline([], model, tok, settings(),
                                watchdog_seconds=30)
        assert items == []

    def test_overlaps_weighted_preprocess(self, setup):
        # weight preprocessing to a meaningful fraction of inference, then
        # require real overlap (sleep releases the GIL, as numba kernels do)
        model, tok, texts = setup
        work = texts * 2  # 120 items
        st0 = settings()
        seq0, base = run_sequential(work, model, tok, st0)
        per_item = base.stages["inference"].busy_seconds / len(work)
        delay = 0.3 * per_item

        def hook(item):
            time.sleep(delay)

        st = settings(preprocess_hook=hook)
        _, seq_stats = run_sequential(work, model, tok, st)
        _, pipe_stats = run_pipeline(work, model, tok, st,
                                     watchdog_seconds=60)
        assert pipe_stats.wall_seconds <= 0.9 * seq_stats.wall_seconds


class TestJsonl:
    def test_roundtrip_byte_exact(self, setup, tmp_path):
        _, _, texts = setup
        from tinfer.bench import write_dataset_jsonl
        p1, p2 = tmp_path / "d1.jsonl", tmp_path / "d2.jsonl"
        write_dataset_jsonl(p1, texts)
        again = read_jsonl_texts(p1)
        assert again == texts
        write_dataset_jsonl(p2, again)
        assert p1.read_bytes() == p2.read_bytes()

    def test_results_format(self, setup, tmp_path):
        model, tok, texts = setup
        items, _ = run_sequential(texts[:3], model, tok, settings())
        p = tmp_path / "out.jsonl"
        write_results_jsonl(p, items)
        import json
        rows = [json.loads(line) for line in p.read_text().splitlines()]
        assert [r["sample_index"] for r in rows] == [0, 1, 2]
        assert all(set(r) == {"content", "summary", "sample_index"}
                   for r in rows)

    def test_bad_lines_rejected(self, tmp_path):
        from tinfer.errors import FormatError
        p = tmp_path / "bad.jsonl"
        p.write_text('{"nope": 1}\n', encoding="utf-8")
        with pytest.raises(FormatError):
            read_jsonl_texts(p)
