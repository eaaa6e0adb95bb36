"""
Tests for representation sets, mutual-KNN alignment and linear probes
"""

import json

import numpy as np
import pytest

from fusion_lab.analysis.alignment import (
    AlignmentHeatmap,
    alignment_heatmap_from_sets,
    export_heatmap,
    knn_indices,
    mutual_knn_alignment,
)
from fusion_lab.analysis.probe import layer_target_sweep, probe_regress, save_probe_report, standardize_targets
from fusion_lab.analysis.representations import (
    RepresentationSet,
    decode_activations,
    encode_activations,
    load_activations,
    save_activations,
)
from fusion_lab.errors import ContractError, FormatError, RangeError, ShapeError
from fusion_lab.tensor.rng import Rng

LR = 0.1
EPOCHS = 500


def _points(seed: int, n: int, dim: int) -> np.ndarray:
    return Rng(seed).normal((n, dim), dtype=np.float64)


def _orthogonal(seed: int, dim: int) -> np.ndarray:
    q, _ = np.linalg.qr(_points(seed, dim, dim))
    return q


class TestRepresentationSet:
    """Validation and the ACTV format"""

    def test_must_be_two_dimensional(self):
        with pytest.raises(ShapeError):
            RepresentationSet(np.zeros(4))

    def test_needs_two_samples(self):
        with pytest.raises(ContractError):
            RepresentationSet(np.zeros((1, 3)))

    def test_rejects_non_finite(self):
        points = np.ones((3, 2))
        points[1, 1] = np.nan
        with pytest.raises(ContractError):
            RepresentationSet(points)

    def test_file_round_trip(self, tmp_path):
        rep = RepresentationSet(_points(1, 5, 3), "lm layer 2 aggregate")
        loaded = load_activations(save_activations(rep, tmp_path / "a.actv"))
        assert loaded.label == rep.label
        assert np.array_equal(loaded.points, rep.points)

    def test_bad_magic(self):
        payload = bytearray(encode_activations(RepresentationSet(_points(1, 3, 2))))
        payload[:4] = b"NOPE"
        with pytest.raises(FormatError) as info:
            decode_activations(bytes(payload))
        assert info.value.offset == 0

    def test_truncated(self):
        payload = encode_activations(RepresentationSet(_points(1, 3, 2)))
        with pytest.raises(FormatError):
            decode_activations(payload[:-3])
        with pytest.raises(FormatError):
            decode_activations(payload[:10])


class TestKnn:
    """Neighbor search"""

    def test_matches_brute_force(self):
        x = _points(2, 12, 5)
        expected = []
        for i in range(12):
            others = [j for j in range(12) if j != i]
            expected.append(sorted(others, key=lambda j: (np.sum((x[i] - x[j]) ** 2), j))[:4])
        assert knn_indices(x, 4, "euclidean").tolist() == expected

    def test_ties_broken_by_index(self):
        x = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 0.0], [5.0, 0.0]])
        neighbors = knn_indices(x, 2, "euclidean")
        assert neighbors[0].tolist() == [1, 2]
        assert neighbors[3].tolist() == [1, 2]

    def test_k_range(self):
        with pytest.raises(ContractError):
            knn_indices(_points(2, 5, 3), 5)
        with pytest.raises(ContractError):
            knn_indices(_points(2, 5, 3), 0)

    def test_zero_norm_rejected_for_cosine(self):
        x = _points(2, 4, 3)
        x[2] = 0.0
        with pytest.raises(ContractError):
            knn_indices(x, 2, "cosine")

    def test_unknown_metric(self):
        with pytest.raises(ContractError):
            knn_indices(_points(2, 4, 3), 2, "manhattan")


class TestMutualKnnAlignment:
    """Alignment scores"""

    def test_rotation_and_scale_invariant(self):
        a = RepresentationSet(_points(3, 30, 6))
        b = RepresentationSet(a.points @ _orthogonal(4, 6) * 3.0)
        assert mutual_knn_alignment(a, b, 5) == 1.0
        assert mutual_knn_alignment(a, b, 5, "euclidean") == 1.0

    def test_symmetric_and_bounded(self):
        a = RepresentationSet(_points(3, 30, 6))
        b = RepresentationSet(_points(5, 30, 4))
        score = mutual_knn_alignment(a, b, 5)
        assert 0.0 <= score < 1.0
        assert score == mutual_knn_alignment(b, a, 5)

    def test_sample_count_mismatch(self):
        with pytest.raises(ContractError):
            mutual_knn_alignment(RepresentationSet(_points(3, 10, 2)), RepresentationSet(_points(3, 11, 2)), 3)


class TestHeatmap:
    """Cross-layer alignment heatmaps"""

    @pytest.fixture
    def heatmap(self):
        lm = [RepresentationSet(_points(10 + i, 30, 6), f"lm layer {i} aggregate") for i in range(3)]
        vision = [
            RepresentationSet(lm[0].points * 2.0, "vision layer 0 aggregate"),
            RepresentationSet(lm[1].points @ _orthogonal(7, 6), "vision layer 1 aggregate"),
        ]
        return alignment_heatmap_from_sets(lm, vision, k=3)

    def test_diagonal_and_argmax(self, heatmap):
        assert heatmap.scores.shape == (3, 2)
        assert heatmap.scores[0, 0] == 1.0
        assert heatmap.scores[1, 1] == 1.0
        assert heatmap.scores[2].max() < 1.0
        assert heatmap.argmax_cell == (0, 0)

    def test_first_maximum_wins(self):
        assert AlignmentHeatmap(np.array([[0.2, 0.5], [0.5, 0.1]]), k=1).argmax_cell == (0, 1)

    def test_frame_labels(self, heatmap):
        frame = heatmap.to_frame()
        assert list(frame.index) == ["lm layer 0 aggregate", "lm layer 1 aggregate", "lm layer 2 aggregate"]
        assert frame.shape == (3, 2)

    def test_export(self, heatmap, tmp_path):
        csv_path, json_path = export_heatmap(heatmap, tmp_path / "alignment")
        assert csv_path.exists()
        meta = json.loads(json_path.read_text())
        assert meta["argmax"] == [0, 0]
        assert meta["k"] == 3

    def test_sample_counts_must_agree(self):
        with pytest.raises(ContractError):
            alignment_heatmap_from_sets([RepresentationSet(_points(1, 8, 2))], [RepresentationSet(_points(1, 9, 2))], 2)


class TestStandardization:
    """Per-dimension standardization with a variance floor"""

    def test_zero_mean_unit_variance(self):
        rep, stats = standardize_targets(RepresentationSet(_points(6, 50, 4) * 5.0 + 2.0))
        assert np.abs(rep.points.mean(axis=0)).max() < 1e-6
        assert np.allclose(rep.points.std(axis=0), 1.0)
        assert stats.floored_dims == []

    def test_idempotent(self):
        once, _ = standardize_targets(RepresentationSet(_points(6, 50, 4) * 5.0))
        twice, _ = standardize_targets(once)
        assert np.allclose(once.points, twice.points)

    def test_constant_dimension_is_floored(self):
        points = _points(6, 20, 3)
        points[:, 1] = 4.0
        rep, stats = standardize_targets(RepresentationSet(points, "target"))
        assert stats.floored_dims == [1]
        assert len(stats.warnings) == 1
        assert np.all(rep.points[:, 1] == 0.0)


class TestProbe:
    """Linear probe regression"""

    def test_realizable_target(self):
        x = _points(20, 200, 4)
        y = x @ _points(21, 4, 3) + 0.5
        entry = probe_regress(RepresentationSet(x), RepresentationSet(y, "linear"), EPOCHS, LR, Rng(0))
        assert entry.final_loss < 1e-3
        assert len(entry.losses) == EPOCHS + 1

    def test_noise_target(self):
        x = _points(22, 400, 4)
        y = _points(23, 400, 4)
        entry = probe_regress(RepresentationSet(x), RepresentationSet(y, "noise"), EPOCHS, LR, Rng(0))
        assert entry.final_loss == pytest.approx(1.0, rel=0.05)

    def test_loss_rises_with_noise(self):
        x = _points(24, 300, 4)
        signal = x @ _points(25, 4, 2)
        noise = _points(26, 300, 2)
        finals = [
            probe_regress(RepresentationSet(x), RepresentationSet(signal + level * noise), EPOCHS, LR, Rng(0)).final_loss
            for level in (0.1, 0.5, 1.0, 2.0, 4.0)
        ]
        assert all(a < b for a, b in zip(finals, finals[1:]))

    def test_zero_epochs(self):
        entry = probe_regress(RepresentationSet(_points(1, 10, 2)), RepresentationSet(_points(2, 10, 2)), 0, LR, Rng(0))
        assert len(entry.losses) == 1
        assert entry.epochs == 0

    def test_sample_count_mismatch(self):
        with pytest.raises(ContractError):
            probe_regress(RepresentationSet(_points(1, 10, 2)), RepresentationSet(_points(2, 11, 2)), 1, LR)


class TestLayerSweep:
    """Probing one source onto several layers"""

    @pytest.fixture
    def layers(self):
        return [RepresentationSet(_points(30 + i, 40, 3), f"layer {i}") for i in range(3)]

    def test_report_ordered_by_layer(self, layers, tmp_path):
        source = RepresentationSet(_points(29, 40, 4), "queries")
        report = layer_target_sweep(source, layers, [2, 0], epochs=20, lr=LR, rng=Rng(1))
        assert [e.layer for e in report.entries] == [0, 2]
        assert len(report.final_losses()) == 2
        saved = json.loads(save_probe_report(report, tmp_path / "probe" / "report.json").read_text())
        assert saved["source"] == "queries"
        assert [t["layer"] for t in saved["targets"]] == [0, 2]

    def test_layer_out_of_range(self, layers):
        with pytest.raises(RangeError):
            layer_target_sweep(RepresentationSet(_points(29, 40, 4)), layers, [3], epochs=1, lr=LR)

    def test_empty_layer_list(self, layers):
        report = layer_target_sweep(RepresentationSet(_points(29, 40, 4)), layers, [], epochs=1, lr=LR)
        assert len(report) == 0
