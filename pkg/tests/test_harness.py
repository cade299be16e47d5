import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cetta import metrics, nn, streams
from cetta.experiment import default_specs
from cetta.pretrain import PretrainError, clean_training_set, evaluate, pretrain, pretrain_pair
from cetta.samples import stack_features


class TestStreamGeneration:
    def test_same_seed_is_bit_identical(self):
        spec = streams.StreamSpec(num_samples=200, corruption="gaussian",
                                  severity=2, seed=5)
        a = streams.gen_stream(spec)
        b = streams.gen_stream(spec)
        for s1, s2 in zip(a, b):
            assert s1.sample_id == s2.sample_id
            assert s1.label == s2.label
            assert np.array_equal(s1.features, s2.features)

    def test_zero_sigma_equals_clean_stream(self):
        base = dict(num_samples=100, seed=9)
        clean = streams.gen_stream(streams.StreamSpec(corruption=None, **base))
        zero = streams.gen_stream(streams.StreamSpec(corruption="gaussian", **base))
        zero_spec = streams.StreamSpec(corruption="gaussian", **base)
        noisy = streams.apply_corruption(
            stack_features(clean), streams.AdditiveGaussian(0.0), np.random.default_rng(0))
        assert np.array_equal(noisy, stack_features(clean))
        # severity path with sigma>0 must differ
        sev = streams.gen_stream(zero_spec)
        assert not np.array_equal(stack_features(sev), stack_features(clean))

    def test_labels_are_hidden_from_features(self):
        spec = streams.StreamSpec(num_samples=50, seed=3)
        data = streams.gen_stream(spec)
        assert all(s.label is not None for s in data)
        assert all(0 <= s.label < spec.num_classes for s in data)

    def test_mixed_segments_apply_in_order(self):
        spec = streams.StreamSpec(num_samples=100, seed=4,
                                  mixed=(("affine", 5), ("none", 1)))
        clean = streams.StreamSpec(num_samples=100, seed=4, corruption=None)
        mixed = streams.gen_stream(spec)
        base = streams.gen_stream(clean)
        first = slice(0, 50)
        second = slice(50, 100)
        assert not np.array_equal(stack_features(mixed)[first],
                                  stack_features(base)[first])
        assert np.array_equal(stack_features(mixed)[second],
                              stack_features(base)[second])

    def test_rings_generator_has_radial_structure(self):
        spec = streams.StreamSpec(generator="rings", num_samples=400,
                                  input_dim=8, num_classes=4, seed=6)
        data = streams.gen_stream(spec)
        x = stack_features(data)
        radii = np.hypot(x[:, 0], x[:, 1])
        labels = np.array([s.label for s in data])
        means = [radii[labels == c].mean() for c in range(4)]
        assert all(a < b for a, b in zip(means, means[1:]))

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            streams.corruption_for("fog", 3)
        with pytest.raises(ValueError):
            streams.corruption_for("gaussian", 6)


class TestStreamFiles:
    def test_round_trip_bit_exact(self, tmp_path):
        spec = streams.StreamSpec(num_samples=64, input_dim=16, corruption="dropout",
                                  severity=4, seed=11)
        data = streams.gen_stream(spec)
        path = tmp_path / "stream.bin"
        streams.write_stream(path, data, spec.num_classes, spec.input_dim)
        back, c, d = streams.read_stream(path)
        assert (c, d) == (spec.num_classes, spec.input_dim)
        for s1, s2 in zip(data, back):
            assert s1.sample_id == s2.sample_id
            assert s1.label == s2.label
            assert np.array_equal(s1.features, s2.features)

    def test_header_magic_and_corruption_detect(self, tmp_path):
        spec = streams.StreamSpec(num_samples=4, input_dim=3, seed=0)
        data = streams.gen_stream(spec)
        path = tmp_path / "stream.bin"
        streams.write_stream(path, data, spec.num_classes, spec.input_dim)
        raw = path.read_bytes()
        assert raw[:4] == b"CEMS"
        (tmp_path / "bad.bin").write_bytes(raw[:-2])
        with pytest.raises(ValueError):
            streams.read_stream(tmp_path / "bad.bin")


class TestEce:
    def test_perfectly_calibrated_and_correct(self):
        probs = np.eye(4)[[0, 1, 2, 3]]
        labels = np.array([0, 1, 2, 3])
        assert metrics.compute_ece(probs, labels) == 0.0

    def test_confident_and_wrong_is_one(self):
        probs = np.eye(4)[[0, 1, 2, 3]]
        labels = np.array([1, 2, 3, 0])
        assert metrics.compute_ece(probs, labels) == 1.0

    @settings(max_examples=150, deadline=None)
    @given(st.integers(1, 30), st.integers(0, 10_000), st.integers(1, 20))
    def test_matches_brute_force_oracle(self, n, seed, bins):
        rng = np.random.default_rng(seed)
        probs = rng.dirichlet(np.ones(3), size=n)
        labels = rng.integers(0, 3, size=n)
        got = metrics.compute_ece(probs, labels, bins=bins)

        pred = probs.argmax(axis=1)
        conf = probs[np.arange(n), pred]
        correct = (pred == labels).astype(float)
        total = 0.0
        for b in range(bins):
            lo, hi = b / bins, (b + 1) / bins
            if b == bins - 1:
                mask = (conf >= lo) & (conf <= hi)
            else:
                mask = (conf >= lo) & (conf < hi)
            if mask.sum() == 0:
                continue
            total += (mask.sum() / n) * abs(correct[mask].mean() - conf[mask].mean())
        assert got == pytest.approx(total, abs=1e-9)


class TestPretrain:
    def test_zero_epochs_gives_chance_level(self):
        spec = nn.ModelSpec(16, (8,), 4)
        x, y = clean_training_set("blobs", 4, 16, 2000, seed=1)
        result = pretrain(spec, x, y, epochs=0, seed=0)
        assert abs(result.holdout_accuracy - 0.25) < 0.15

    def test_same_seed_identical_checkpoints(self):
        spec = nn.ModelSpec(16, (8,), 4)
        x, y = clean_training_set("blobs", 4, 16, 1500, seed=2)
        a = pretrain(spec, x, y, epochs=2, seed=3, min_accuracy=0.0)
        b = pretrain(spec, x, y, epochs=2, seed=3, min_accuracy=0.0)
        assert nn.checkpoint_bytes(spec, a.params) == nn.checkpoint_bytes(spec, b.params)

    def test_below_minimum_accuracy_aborts(self):
        spec = nn.ModelSpec(16, (8,), 4)
        x, y = clean_training_set("blobs", 4, 16, 1500, seed=4)
        y = np.random.default_rng(0).permutation(y)  # destroy the signal
        with pytest.raises(PretrainError):
            pretrain(spec, x, y, epochs=2, seed=5)

    def test_default_pair_reaches_95_percent(self, desk_models):
        assert desk_models["foundation"].holdout_accuracy >= 0.95
        assert desk_models["edge"].holdout_accuracy >= 0.95

    def test_foundation_beats_edge_on_average_over_seeds(self):
        f_spec, e_spec = default_specs()
        diffs = []
        for seed in range(5):
            f_res, e_res = pretrain_pair(f_spec, e_spec, seed=seed)
            diffs.append(f_res.holdout_accuracy - e_res.holdout_accuracy)
        assert np.mean(diffs) >= 0.0


class TestSeverityMonotonicity:
    def test_frozen_accuracy_nonincreasing_in_severity(self, desk_models):
        e_spec = desk_models["edge_spec"]
        params = desk_models["edge"].params
        mean_acc = []
        for severity in range(1, 6):
            accs = []
            for seed in range(5):
                spec = streams.StreamSpec(corruption="gaussian", severity=severity,
                                          num_samples=2000, seed=300 + seed)
                data = streams.gen_stream(spec)
                x = stack_features(data)
                y = np.array([s.label for s in data])
                accs.append(evaluate(params, e_spec, x, y))
            mean_acc.append(np.mean(accs))
        assert all(a >= b for a, b in zip(mean_acc, mean_acc[1:])), mean_acc


class TestReports:
    def test_schema_stable_json_and_csv(self, tmp_path):
        report = metrics.RunReport(
            scenario="cema", stream_seed=1, accuracy=0.5, uploads=10,
            upload_fraction=0.1, queue_drops=0, ece=0.05,
            param_payload_bytes=1062, steps=3, wall_time_s=0.1)
        metrics.write_reports(tmp_path, [report])
        data = json.loads((tmp_path / "report.json").read_text())
        assert set(data[0]) == set(metrics.REPORT_FIELDS) | {"extra"}
        header = (tmp_path / "runs.csv").read_text().splitlines()[0]
        assert header.split(",") == metrics.REPORT_FIELDS
