import numpy as np
import pytest

from promptseg.checkpoint import (
    load_checkpoint,
    pack_u64,
    save_checkpoint,
    unpack_u64,
)
from promptseg.errors import FormatError, KindMismatchError
from promptseg.metrics import DomainMetrics, MetricsReport, confusion, miou


class TestMiou:
    def test_perfect_prediction_is_one(self, rng):
        gt = rng.integers(0, 6, size=(4, 8, 8))
        iou, mean = miou(gt, gt, 6)
        assert mean == 1.0
        assert np.all(iou[~np.isnan(iou)] == 1.0)

    def test_disjoint_single_classes_score_zero(self):
        pred = np.zeros((4, 4), np.int64)
        gt = np.ones((4, 4), np.int64)
        iou, mean = miou(pred, gt, 3)
        assert iou[0] == 0.0 and iou[1] == 0.0
        assert np.isnan(iou[2])
        assert mean == 0.0

    def test_two_of_six_example(self):
        # pred covers 2 of the 4 gt pixels of class 1 and adds 2 false positives
        gt = np.zeros((4, 4), np.int64)
        gt[0, :4] = 1
        pred = np.zeros((4, 4), np.int64)
        pred[0, :2] = 1
        pred[2, :2] = 1
        iou, _ = miou(pred, gt, 2)
        assert iou[1] == pytest.approx(2.0 / 6.0)

    def test_brute_force_agreement(self, rng):
        pred = rng.integers(0, 5, size=(6, 6))
        gt = rng.integers(0, 5, size=(6, 6))
        iou, mean = miou(pred, gt, 5)
        for c in range(5):
            inter = np.logical_and(pred == c, gt == c).sum()
            union = np.logical_or(pred == c, gt == c).sum()
            if union == 0:
                assert np.isnan(iou[c])
            else:
                assert iou[c] == pytest.approx(inter / union)
        present = ~np.isnan(iou)
        assert mean == pytest.approx(float(iou[present].mean()))

    def test_symmetry(self, rng):
        pred = rng.integers(0, 4, size=(5, 5))
        gt = rng.integers(0, 4, size=(5, 5))
        _, a = miou(pred, gt, 4)
        _, b = miou(gt, pred, 4)
        assert a == pytest.approx(b)

    def test_label_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            miou(np.array([[7]]), np.array([[0]]), 3)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            confusion(np.zeros((2, 2)), np.zeros((3, 3)), 4)


class TestReport:
    def _report(self):
        return MetricsReport(
            config_hash="abc123",
            seed=7,
            domains=[
                DomainMetrics("source_val", 0.91, 0.92, [1.0, 0.8, None, 0.9], [0.2, 0.3]),
                DomainMetrics("dusk", 0.5, 0.6, [0.9, 0.4, 0.2, None], [0.4, 0.1]),
            ],
            wall_clock_s=12.5,
        )

    def test_csv_is_deterministic_and_excludes_timing(self):
        a, b = self._report(), self._report()
        b.wall_clock_s = 999.0
        assert a.to_csv() == b.to_csv()
        assert "12.5" not in a.to_csv()

    def test_csv_row_per_domain(self):
        lines = self._report().to_csv().strip().split("\n")
        assert len(lines) == 3
        assert lines[1].startswith("abc123,7,source_val,")

    def test_meta_sidecar_carries_timing(self):
        assert "12.5" in self._report().to_meta_json()


class TestCheckpointIo:
    def _tensors(self, rng):
        return {
            "enc.conv.weight": rng.normal(size=(4, 3, 5, 5)).astype(np.float32),
            "enc.conv.bias": rng.normal(size=(4,)).astype(np.float32),
            "meta/scalar": np.float32(3.0),
        }

    def test_round_trip_bitwise(self, tmp_path, rng):
        path = tmp_path / "m.ckpt"
        tensors = self._tensors(rng)
        save_checkpoint(path, "ORCL", tensors)
        kind, back = load_checkpoint(path)
        assert kind == "ORCL"
        assert list(back) == list(tensors)
        for name in tensors:
            assert np.asarray(tensors[name], np.float32).tobytes() == back[name].tobytes()

    def test_flipped_byte_fails_crc(self, tmp_path, rng):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, "ORCL", self._tensors(rng))
        blob = bytearray(path.read_bytes())
        blob[30] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_kind_mismatch(self, tmp_path, rng):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, "SPGN", self._tensors(rng))
        with pytest.raises(KindMismatchError):
            load_checkpoint(path, expect_kind="APFH")

    def test_truncated_file(self, tmp_path, rng):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, "ORCL", self._tensors(rng))
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) - 9])
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.ckpt"
        path.write_bytes(b"JUNKJUNKJUNKJUNKJUNK")
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_duplicate_name_rejected_on_save(self, tmp_path):
        class Sneaky(dict):
            def items(self):
                yield "a", np.zeros(1, np.float32)
                yield "a", np.zeros(1, np.float32)

        with pytest.raises(ValueError):
            save_checkpoint(tmp_path / "m.ckpt", "ORCL", Sneaky())

    def test_save_is_byte_stable(self, tmp_path, rng):
        tensors = self._tensors(rng)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(p1, "ORCL", tensors)
        save_checkpoint(p2, "ORCL", tensors)
        assert p1.read_bytes() == p2.read_bytes()

    def test_u64_fingerprint_pack_round_trip(self):
        for value in (0, 1, 2**63 + 12345, 2**64 - 1):
            assert unpack_u64(pack_u64(value)) == value
