import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from cetta import nn
from cetta.edge import EdgeConfig, EdgeRuntime, UploadQueue
from cetta.filtration import FiltrationConfig
from cetta.samples import Sample


def mk_sample(i, dim=4):
    rng = np.random.default_rng(1000 + i)
    return Sample(sample_id=i, features=rng.normal(size=dim).astype(np.float32))


def mk_runtime(queue_capacity=8, batch_size=4, update_interval=1,
               upload_enabled=True, track_stats=False, e_max_factor=0.9,
               e_min_factor=0.0, dim=4, c=4, seed=0):
    spec = nn.ModelSpec(dim, (6,), c)
    params = nn.init_params(spec, np.random.default_rng(seed))
    config = EdgeConfig(batch_size=batch_size, update_interval=update_interval,
                        queue_capacity=queue_capacity, track_stats=track_stats)
    filt_cfg = FiltrationConfig(num_classes=c, e_max_factor=e_max_factor,
                                e_min_factor=e_min_factor)
    return EdgeRuntime(spec, params, filt_cfg, config, upload_enabled=upload_enabled)


def oracle_queue(pushes, capacity):
    """Independent replay of the bounded-queue policy: on overflow, drop
    the highest-entropy element counting the incoming one; ties drop the
    earliest."""
    items, drops = [], []
    for sid, ent in pushes:
        items.append((sid, ent))
        if len(items) > capacity:
            worst = max(range(len(items)), key=lambda i: items[i][1])
            drops.append(items.pop(worst)[0])
    return [sid for sid, _ in items], drops


class TestUploadQueue:
    def test_overflow_drops_current_maximum(self):
        q = UploadQueue(capacity=2)
        assert q.push(mk_sample(0), 0.5) is None
        assert q.push(mk_sample(1), 0.9) is None
        dropped = q.push(mk_sample(2), 0.7)
        assert dropped[0].sample_id == 1
        assert [s.sample_id for s, _ in q.snapshot()] == [0, 2]

    def test_incoming_element_can_be_the_drop(self):
        q = UploadQueue(capacity=2)
        q.push(mk_sample(0), 0.5)
        q.push(mk_sample(1), 0.6)
        dropped = q.push(mk_sample(2), 0.99)
        assert dropped[0].sample_id == 2
        assert [s.sample_id for s, _ in q.snapshot()] == [0, 1]

    def test_tie_drops_earliest(self):
        q = UploadQueue(capacity=2)
        q.push(mk_sample(0), 0.7)
        q.push(mk_sample(1), 0.7)
        dropped = q.push(mk_sample(2), 0.7)
        assert dropped[0].sample_id == 0

    def test_drain_preserves_fifo_order(self):
        q = UploadQueue(capacity=4)
        for i in range(4):
            q.push(mk_sample(i), 0.1 * i)
        assert [s.sample_id for s, _ in q.drain()] == [0, 1, 2, 3]
        assert len(q) == 0

    @settings(max_examples=150, deadline=None)
    @given(st.lists(st.floats(0.0, 2.3), max_size=60),
           st.integers(min_value=1, max_value=10))
    def test_matches_oracle_replay(self, entropies, capacity):
        q = UploadQueue(capacity=capacity)
        drops = []
        for i, ent in enumerate(entropies):
            out = q.push(mk_sample(i), ent)
            if out is not None:
                drops.append(out[0].sample_id)
        expect_items, expect_drops = oracle_queue(list(enumerate(entropies)), capacity)
        assert [s.sample_id for s, _ in q.snapshot()] == expect_items
        assert drops == expect_drops


class TestApplyUpdate:
    def test_stale_version_is_noop(self):
        rt = mk_runtime()
        aset = nn.extract_affine(rt.params, version=2)
        for layer in aset.layers:
            layer.gamma *= 3.0
        assert rt.apply_update(aset) is True
        assert rt.stats.current_version == 2
        stale = nn.extract_affine(rt.params, version=1)
        assert rt.apply_update(stale) is False
        assert rt.stats.updates_applied == 1

    def test_valid_update_changes_next_logits(self):
        rt = mk_runtime()
        batch = [mk_sample(i) for i in range(4)]
        p1 = rt.process_batch(batch)
        aset = nn.extract_affine(rt.params, version=1)
        for layer in aset.layers:
            layer.gamma *= 2.0
            layer.beta += 1.0
        rt.on_param_update(aset)
        p2 = rt.process_batch(batch)
        assert [p.version for p in p1] == [0] * 4
        assert [p.version for p in p2] == [1] * 4
        assert any(a.confidence != b.confidence for a, b in zip(p1, p2))

    def test_width_mismatch_keeps_old_params(self):
        rt = mk_runtime()
        gamma_before = rt.params.blocks[0].gamma.copy()
        bad = nn.AffineParamSet(version=5, layers=[
            nn.AffineLayer(0, np.ones(3, dtype=np.float32), np.zeros(3, dtype=np.float32))])
        assert rt.apply_update(bad) is False
        assert rt.stats.updates_rejected == 1
        assert rt.stats.current_version == 0
        assert np.array_equal(rt.params.blocks[0].gamma, gamma_before)

    def test_update_mid_batch_applies_to_next_batch(self):
        rt = mk_runtime()
        batch = [mk_sample(i) for i in range(4)]
        preds = rt.process_batch(batch)
        assert all(p.version == 0 for p in preds)
        # arrives "mid-stream": before the next batch starts
        rt.on_param_update(nn.extract_affine(rt.params, version=1))
        preds2 = rt.process_batch(batch)
        assert all(p.version == 1 for p in preds2)


class TestUpdateInterval:
    def test_every_kth_received_update_applies(self):
        rt = mk_runtime(update_interval=3)
        batch = [mk_sample(i) for i in range(4)]
        for v in (1, 2):
            rt.on_param_update(nn.extract_affine(rt.params, version=v))
            rt.process_batch(batch)
        assert rt.stats.updates_applied == 0
        rt.on_param_update(nn.extract_affine(rt.params, version=3))
        rt.process_batch(batch)
        assert rt.stats.updates_applied == 1
        assert rt.stats.versions_applied == [3]

    def test_k5_vs_k1_same_first_batch_fewer_applications(self):
        stream = [mk_sample(i) for i in range(40)]

        def run(k):
            rt = mk_runtime(update_interval=k, queue_capacity=64)
            first_decisions = None
            for start in range(0, 40, 4):
                rt.process_batch(stream[start:start + 4])
                if start == 0:
                    first_decisions = [s.sample_id for s, _ in rt.queue.snapshot()]
                rt.on_param_update(nn.extract_affine(rt.params,
                                                     version=start // 4 + 1))
            return rt, first_decisions

        rt1, first1 = run(1)
        rt5, first5 = run(5)
        assert first1 == first5
        assert rt5.stats.updates_applied < rt1.stats.updates_applied


class TestRunStream:
    def test_every_sample_predicted_exactly_once(self):
        rt = mk_runtime(queue_capacity=4)
        stream = [mk_sample(i) for i in range(37)]
        preds = rt.run_stream(stream)
        assert [p.sample_id for p in preds] == list(range(37))
        assert rt.stats.samples == 37

    def test_accounting_accepted_equals_queue_plus_drops_plus_sent(self):
        rt = mk_runtime(queue_capacity=3)
        stream = [mk_sample(i) for i in range(60)]
        sent = []

        def after_batch(r):
            if len(sent) < 2:  # drain only the first two batches, then stall
                sent.extend(r.take_uploads())

        rt.run_stream(stream, after_batch)
        assert rt.stats.accepted == (rt.stats.uploads_sent + len(rt.queue)
                                     + rt.stats.queue_drops)

    def test_offline_mode_scores_but_never_uploads(self):
        rt = mk_runtime(upload_enabled=False)
        stream = [mk_sample(i) for i in range(20)]
        rt.run_stream(stream)
        assert rt.stats.accepted > 0
        assert len(rt.queue) == 0
        assert rt.stats.uploads_sent == 0

    def test_stalled_transport_never_blocks_inference(self):
        rt = mk_runtime(queue_capacity=5)
        stream = [mk_sample(i) for i in range(200)]
        preds = rt.run_stream(stream)  # no drain at all
        assert len(preds) == 200
        assert len(rt.queue) == 5
        assert rt.stats.queue_drops == rt.stats.accepted - 5

    def test_version_seen_by_inference_is_monotone(self):
        rt = mk_runtime(queue_capacity=64)
        stream = [mk_sample(i) for i in range(48)]
        versions = []
        step = [0]

        def after_batch(r):
            r.take_uploads()
            step[0] += 1
            if step[0] % 2 == 0:
                r.on_param_update(nn.extract_affine(r.params, version=step[0]))

        preds = rt.run_stream(stream, after_batch)
        versions = [p.version for p in preds]
        assert all(a <= b for a, b in zip(versions, versions[1:]))

    def test_track_stats_refreshes_running_statistics(self):
        rt = mk_runtime(track_stats=True)
        before = rt.params.blocks[0].run_mean.copy()
        rt.run_stream([mk_sample(i) for i in range(16)])
        assert not np.array_equal(rt.params.blocks[0].run_mean, before)

    def test_frozen_stats_stay_bit_identical(self):
        rt = mk_runtime(track_stats=False)
        before = rt.params.blocks[0].run_mean.copy()
        rt.run_stream([mk_sample(i) for i in range(16)])
        assert np.array_equal(rt.params.blocks[0].run_mean, before)
