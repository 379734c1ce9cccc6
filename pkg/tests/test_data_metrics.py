import itertools

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sartm.data import (
    SceneSpec,
    decode_raster,
    encode_raster,
    gen_embeddings,
    generate_scene,
    load_dataset,
    read_embeddings,
    read_raster,
    write_dataset,
    write_embeddings,
    write_raster,
)
from sartm.errors import ConfigError, RasterFormatError, ShapeError
from sartm.metrics import confusion_matrix, evaluate

LUMA = np.array([0.299, 0.587, 0.114])


def class_means(thermal, label, num_classes):
    return np.array([thermal[0][label == k].mean() if np.any(label == k) else np.nan for k in range(num_classes)])


class TestGenerator:
    def test_deterministic(self):
        spec = SceneSpec()
        a, b = generate_scene(spec, 17), generate_scene(spec, 17)
        for field in ("rgb", "thermal", "label"):
            npt.assert_array_equal(getattr(a, field), getattr(b, field))
        assert a.condition == b.condition

    def test_different_seeds_differ(self):
        spec = SceneSpec()
        assert not np.array_equal(generate_scene(spec, 1).label, generate_scene(spec, 2).label)

    def test_shapes_and_ranges(self):
        s = generate_scene(SceneSpec(height=48, width=32), 0)
        assert s.rgb.shape == (3, 48, 32) and s.thermal.shape == (1, 48, 32) and s.label.shape == (48, 32)
        assert s.rgb.min() >= 0 and s.rgb.max() <= 1
        assert s.thermal.min() >= 0 and s.thermal.max() <= 1

    @pytest.mark.parametrize("c", [2, 4, 9, 16])
    def test_labels_only_configured_classes_and_border(self, c):
        spec = SceneSpec(num_classes=c)
        seen = set()
        for seed in range(20):
            seen |= set(np.unique(generate_scene(spec, seed).label).tolist())
        assert seen <= set(range(c)) | {255}
        assert 255 in seen

    def test_night_darkens_rgb_and_keeps_thermal_separable(self):
        spec = SceneSpec()
        gaps_day, gaps_night = [], []
        for seed in range(100):
            day = generate_scene(spec, seed, "day")
            night = generate_scene(spec, seed, "night")
            luma = np.tensordot(LUMA, night.rgb, axes=1).mean()
            assert luma < 0.15, (seed, luma)
            npt.assert_array_equal(day.thermal, night.thermal)
            npt.assert_array_equal(day.label, night.label)
            gaps_day.append(np.diff(class_means(day.thermal, day.label, spec.num_classes)))
            gaps_night.append(np.diff(class_means(night.thermal, night.label, spec.num_classes)))
        gd, gn = np.nanmean(gaps_day, axis=0), np.nanmean(gaps_night, axis=0)
        npt.assert_array_equal(gd, gn)
        # the generator's own thermal means are the oracle for the gap
        npt.assert_allclose(gn, np.diff(spec.thermal_means), atol=0.02)

    def test_day_rgb_is_brighter_than_night(self):
        spec = SceneSpec()
        day = generate_scene(spec, 5, "day").rgb.mean()
        night = generate_scene(spec, 5, "night").rgb.mean()
        assert day > 3 * night

    def test_both_conditions_drawn(self):
        spec = SceneSpec()
        conds = {generate_scene(spec, s).condition for s in range(40)}
        assert conds == {"day", "night"}

    @pytest.mark.parametrize("c", [1, 17])
    def test_class_count_bounds(self, c):
        with pytest.raises(ConfigError):
            SceneSpec(num_classes=c)

    def test_bad_condition(self):
        with pytest.raises(ConfigError):
            generate_scene(SceneSpec(), 0, "dusk")


class TestRaster:
    def test_pgm_exact_bytes(self):
        buf = encode_raster(np.array([[0, 1], [2, 255]], dtype=np.uint8))
        assert buf == b"P5\n2 2\n255\n" + bytes([0, 1, 2, 255])

    def test_ppm_layout_is_interleaved(self):
        a = np.arange(12, dtype=np.uint8).reshape(2, 2, 3)
        buf = encode_raster(a)
        assert buf.startswith(b"P6\n2 2\n255\n")
        assert buf.endswith(bytes(range(12)))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 9), st.integers(1, 9), st.booleans(), st.integers(0, 2**31 - 1))
    def test_round_trip(self, h, w, color, seed):
        shape = (h, w, 3) if color else (h, w)
        a = np.random.default_rng(seed).integers(0, 256, shape).astype(np.uint8)
        npt.assert_array_equal(decode_raster(encode_raster(a)), a)

    def test_file_round_trip(self, tmp_path):
        a = np.random.default_rng(0).integers(0, 256, (5, 7, 3)).astype(np.uint8)
        write_raster(tmp_path / "x.ppm", a)
        npt.assert_array_equal(read_raster(tmp_path / "x.ppm"), a)

    def test_comments_in_header(self):
        buf = b"P5\n# made by hand\n2 1\n255\n" + bytes([7, 9])
        npt.assert_array_equal(decode_raster(buf), [[7, 9]])

    def test_truncated_payload(self):
        buf = encode_raster(np.zeros((3, 3), dtype=np.uint8))[:-2]
        with pytest.raises(RasterFormatError, match="expected 9 bytes, got 7") as exc:
            decode_raster(buf)
        assert exc.value.offset == len(b"P5\n3 3\n255\n")

    @pytest.mark.parametrize(
        "buf,offset",
        [(b"P3\n1 1\n255\n\x00", 0), (b"P5\nx 1\n255\n\x00", 3), (b"P5\n1 1\n65535\n\x00\x00", 7), (b"P5\n0 1\n255\n", 3)],
    )
    def test_malformed_header_offset(self, buf, offset):
        with pytest.raises(RasterFormatError) as exc:
            decode_raster(buf)
        assert exc.value.offset == offset

    def test_non_uint8_rejected(self):
        with pytest.raises(ValueError):
            encode_raster(np.zeros((2, 2), dtype=np.float32))


class TestEmbeddings:
    NAMES = ["background", "car", "person", "bike", "cone"]

    def test_shape(self):
        assert gen_embeddings(self.NAMES, 64, seed=0).shape == (5, 64)

    def test_unit_norm(self):
        v = gen_embeddings(self.NAMES, 64, seed=3).vectors
        npt.assert_allclose(np.linalg.norm(v, axis=1), 1.0, atol=1e-6)

    def test_deterministic(self):
        a = gen_embeddings(self.NAMES, 32, seed=1).vectors
        b = gen_embeddings(self.NAMES, 32, seed=1).vectors
        npt.assert_array_equal(a, b)

    def test_row_depends_only_on_name(self):
        a = gen_embeddings(["car", "person"], 16, seed=0).vectors
        b = gen_embeddings(["person", "car", "sky"], 16, seed=0).vectors
        npt.assert_array_equal(a[0], b[1])
        npt.assert_array_equal(a[1], b[0])

    def test_seed_changes_vectors(self):
        a = gen_embeddings(self.NAMES, 16, seed=0).vectors
        b = gen_embeddings(self.NAMES, 16, seed=1).vectors
        assert not np.allclose(a, b)

    def test_duplicates_rejected(self):
        with pytest.raises(ConfigError, match="car"):
            gen_embeddings(["car", "person", "car"], 8)

    def test_file_round_trip(self, tmp_path):
        table = gen_embeddings(self.NAMES, 12, seed=2)
        write_embeddings(tmp_path / "e.bin", table)
        raw = (tmp_path / "e.bin").read_bytes()
        assert raw.startswith(b"SARTM-EMB v1 5 12\n")
        back = read_embeddings(tmp_path / "e.bin", self.NAMES)
        npt.assert_array_equal(back.vectors, table.vectors)
        assert back.names == self.NAMES


class TestDatasetDirectory:
    def test_write_and_load(self, tmp_path):
        write_dataset(tmp_path, 12, num_classes=3, seed=4, size=32)
        ds = load_dataset(tmp_path)
        assert ds.num_classes == 3
        assert len(ds.splits["train"]) == 10 and len(ds.splits["val"]) == 2
        assert ds.rgb.shape == (12, 3, 32, 32) and ds.labels.shape == (12, 32, 32)
        assert set(np.unique(ds.labels)) <= {0, 1, 2, 255}

    def test_regeneration_is_byte_identical(self, tmp_path):
        write_dataset(tmp_path / "a", 4, seed=9, size=32)
        write_dataset(tmp_path / "b", 4, seed=9, size=32)
        for f in sorted((tmp_path / "a").rglob("*.p?m")):
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()

    def test_missing_files(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path)


def loop_confusion(pred, truth, c, ignore=255):
    cm = np.zeros((c, c), dtype=np.int64)
    for p, t in zip(pred.ravel().tolist(), truth.ravel().tolist()):
        if t != ignore:
            cm[t, p] += 1
    return cm


def loop_metrics(cm):
    c = cm.shape[0]
    iou, acc, f1 = [], [], []
    for k in range(c):
        tp = cm[k, k]
        fn = sum(cm[k, j] for j in range(c) if j != k)
        fp = sum(cm[i, k] for i in range(c) if i != k)
        if tp + fn == 0:
            continue
        iou.append(tp / (tp + fp + fn))
        acc.append(tp / (tp + fn))
        f1.append(2 * tp / (2 * tp + fp + fn))
    return np.mean(iou), np.mean(acc), np.mean(f1)


class TestMetrics:
    def test_matches_pixel_loop_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            c = int(rng.integers(2, 7))
            shape = tuple(rng.integers(1, 12, size=2))
            truth = rng.integers(0, c, shape)
            truth[rng.random(shape) < 0.1] = 255
            # bias predictions towards truth so IoUs are not all tiny
            pred = np.where(rng.random(shape) < 0.6, np.where(truth == 255, 0, truth), rng.integers(0, c, shape))
            cm = loop_confusion(pred, truth, c)
            r = evaluate(pred, truth, c)
            npt.assert_array_equal(r.confusion, cm)
            if cm.sum():
                miou, macc, mf1 = loop_metrics(cm)
                assert r.miou == miou and r.macc == macc and r.mf1 == mf1

    def test_perfect_prediction(self):
        truth = np.random.default_rng(1).integers(0, 4, (16, 16))
        truth[0] = 255
        r = evaluate(np.where(truth == 255, 0, truth), truth, 4)
        assert r.miou == r.macc == r.mf1 == r.pixel_acc == 1.0
        npt.assert_array_equal(r.iou, 1.0)

    def test_one_third_iou(self):
        truth = np.zeros((2, 3), dtype=np.int64)
        pred = truth.copy()
        truth[0, 0] = truth[0, 1] = 1
        pred[0, 1] = pred[0, 2] = 1
        r = evaluate(pred, truth, 2)
        npt.assert_allclose(r.iou[1], 1 / 3)
        npt.assert_allclose(r.acc[1], 1 / 2)

    def test_absent_class_excluded(self):
        truth = np.array([[0, 0, 1, 1]])
        pred = np.array([[0, 0, 1, 1]])
        r = evaluate(pred, truth, 3)
        assert np.isnan(r.iou[2])
        assert r.miou == 1.0
        assert evaluate(pred, truth, 3, absent="zero").miou == pytest.approx(2 / 3)

    def test_ignored_pixels_skipped_everywhere(self):
        truth = np.array([[0, 255, 1]])
        a = evaluate(np.array([[0, 1, 1]]), truth, 2)
        b = evaluate(np.array([[0, 0, 1]]), truth, 2)
        npt.assert_array_equal(a.confusion, b.confusion)
        assert a.miou == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            evaluate(np.zeros((2, 2), int), np.zeros((2, 3), int), 2)

    def test_batch_equals_summed_confusions(self):
        rng = np.random.default_rng(3)
        pred, truth = rng.integers(0, 3, (4, 5, 5)), rng.integers(0, 3, (4, 5, 5))
        total = sum(confusion_matrix(p, t, 3) for p, t in zip(pred, truth))
        npt.assert_array_equal(evaluate(pred, truth, 3).confusion, total)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 6), st.integers(0, 2**31 - 1))
    def test_permutation_equivariance(self, c, seed):
        rng = np.random.default_rng(seed)
        truth, pred = rng.integers(0, c, (6, 6)), rng.integers(0, c, (6, 6))
        perm = rng.permutation(c)
        a, b = evaluate(pred, truth, c), evaluate(perm[pred], perm[truth], c)
        npt.assert_allclose(b.iou[perm], a.iou)
        npt.assert_allclose(b.acc[perm], a.acc)
        assert a.miou == pytest.approx(b.miou) and a.mf1 == pytest.approx(b.mf1)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 6), st.integers(0, 2**31 - 1))
    def test_bounds_and_row_sums(self, c, seed):
        rng = np.random.default_rng(seed)
        truth, pred = rng.integers(0, c, (7, 5)), rng.integers(0, c, (7, 5))
        truth[rng.random((7, 5)) < 0.2] = 255
        r = evaluate(pred, truth, c)
        counts = np.array([(truth == k).sum() for k in range(c)])
        npt.assert_array_equal(r.confusion.sum(axis=1), counts)
        for v in itertools.chain(r.iou, r.acc, r.f1, [r.miou, r.macc, r.mf1, r.pixel_acc]):
            assert np.isnan(v) or 0.0 <= v <= 1.0
