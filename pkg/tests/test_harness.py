import logging
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import brute_evaluate, brute_nms, evaluator_matches_oracle, micro_instance, nms_instance
from yoloppa import cli
from yoloppa.harness.config import ConfigFileError, parse_config_text
from yoloppa.harness.dataset import (
    LoadReport,
    MissingImagesError,
    Sample,
    TruncatedImageError,
    UnsupportedMagicError,
    UnsupportedMaxvalError,
    coarse_mapping,
    decode_ppm,
    encode_ppm,
    load_dataset,
    load_gtsdb,
    parse_index,
    split_dataset,
    write_dataset,
)
from yoloppa.harness.evaluate import all_point_ap, evaluate, match_detections
from yoloppa.harness.postprocess import PAD_VALUE, letterbox, letterbox_transform, nms
from yoloppa.harness.synthetic import (
    GenerationStats,
    SyntheticConfig,
    SyntheticConfigError,
    class_histogram,
    generate_synthetic,
)
from yoloppa.harness.train import NonFiniteLossError, TrainConfig, TrainConfigError, cosine_lr, train
from yoloppa.model import ModelConfig, build
from yoloppa.tensor import Tensor
from yoloppa.types import BoxXYXY, Detection, GroundTruthBox


def ppm(w, h, payload: bytes, header_extra=b"") -> bytes:
    return b"P6\n" + header_extra + f"{w} {h}\n255\n".encode() + payload


class TestPPM:
    def test_white_pixel(self):
        img = decode_ppm(ppm(1, 1, b"\xff\xff\xff"))
        assert img.shape == (3, 1, 1)
        np.testing.assert_array_equal(img.data, 1.0)

    def test_comment_line_ignored(self):
        a = decode_ppm(ppm(2, 1, bytes([0, 51, 255, 10, 20, 30])))
        b = decode_ppm(ppm(2, 1, bytes([0, 51, 255, 10, 20, 30]), b"# made by hand\n"))
        np.testing.assert_array_equal(a.data, b.data)
        assert a.data[1, 0, 0] == pytest.approx(51 / 255)

    def test_channel_planar_layout(self):
        img = decode_ppm(ppm(2, 1, bytes([255, 0, 0, 0, 0, 255])))
        np.testing.assert_array_equal(img.data[:, 0, 0], [1, 0, 0])
        np.testing.assert_array_equal(img.data[:, 0, 1], [0, 0, 1])

    def test_p3_rejected(self):
        with pytest.raises(UnsupportedMagicError, match="unsupported magic"):
            decode_ppm(b"P3\n1 1\n255\n255 255 255\n")

    def test_maxval(self):
        with pytest.raises(UnsupportedMaxvalError):
            decode_ppm(b"P6\n1 1\n65535\n" + b"\x00" * 6)

    def test_truncated(self):
        with pytest.raises(TruncatedImageError):
            decode_ppm(ppm(2, 2, b"\x00" * 5))

    @given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2 ** 31))
    def test_round_trip(self, w, h, seed):
        levels = np.random.default_rng(seed).integers(0, 256, size=(3, h, w))
        img = Tensor((levels / 255.0).astype(np.float32))
        np.testing.assert_array_equal(decode_ppm(encode_ppm(img)).data, img.data)


GTSDB_LINE = "00000.ppm;774;411;815;446;11"


class TestIndexParser:
    def test_reference_line(self):
        (rec,) = parse_index(GTSDB_LINE)
        assert rec.filename == "00000.ppm" and rec.cls == 11
        assert rec.box.as_array().tolist() == [774, 411, 815, 446]

    def test_five_fields_rejected_with_line_number(self):
        rep = LoadReport()
        recs = parse_index(GTSDB_LINE + "\n00001.ppm;1;2;3;4\n", rep)
        assert len(recs) == 1
        assert [(r.line_no, r.reason) for r in rep.rejects] == [(2, "expected 6 fields, got 5")]

    @pytest.mark.parametrize("line", ["a.ppm;x;1;2;3;4", ";1;2;3;4;0", "a.ppm;5;5;1;1;0", "a.ppm;1;1;2;2;-1"])
    def test_bad_lines(self, line):
        rep = LoadReport()
        assert parse_index(line, rep) == [] and len(rep.rejects) == 1

    @given(st.lists(st.sampled_from([GTSDB_LINE, "b.ppm;1;1;2", "c.ppm;3;4;9;9;2", "d.ppm;9;9;3;3;1", ""]),
                    max_size=20))
    def test_counts_add_up(self, lines):
        rep = LoadReport()
        recs = parse_index("\n".join(lines), rep)
        assert rep.accepted + len(rep.rejects) == rep.total_lines == sum(1 for l in lines if l)
        assert len(recs) == rep.accepted
        assert all(r.box.x1 < r.box.x2 and r.box.y1 < r.box.y2 for r in recs)

    def test_coarse_table(self):
        mapping, names = coarse_mapping()
        assert names == ["prohibitory", "danger", "mandatory", "other"]
        assert sorted(mapping) == list(range(43))
        assert mapping[11] == 1 and mapping[14] == 3 and mapping[38] == 2 and mapping[1] == 0


def write_gtsdb(tmp_path, lines, images):
    for name, (w, h) in images.items():
        (tmp_path / name).write_bytes(ppm(w, h, b"\x80" * (w * h * 3)))
    (tmp_path / "gt.txt").write_text("\n".join(lines) + "\n")
    return tmp_path


class TestLoadGTSDB:
    def test_coarse_and_fine(self, tmp_path):
        d = write_gtsdb(tmp_path, [GTSDB_LINE, "00000.ppm;10;10;40;40;38"], {"00000.ppm": (1360, 800)})
        (s,) = load_gtsdb(d, "coarse")
        assert [g.cls for g in s.gts] == [1, 2] and s.hw == (800, 1360)
        (s,) = load_gtsdb(d, "fine")
        assert [g.cls for g in s.gts] == [11, 38]

    def test_missing_images_listed(self, tmp_path):
        d = write_gtsdb(tmp_path, [GTSDB_LINE, "00007.ppm;1;1;5;5;1"], {})
        with pytest.raises(MissingImagesError, match="00000.ppm.*00007.ppm"):
            load_gtsdb(d)

    def test_empty_index_warns(self, tmp_path, caplog):
        (tmp_path / "gt.txt").write_text("")
        with caplog.at_level(logging.WARNING):
            assert load_gtsdb(tmp_path) == []
        assert "empty" in caplog.text

    def test_out_of_bounds_box_becomes_reject(self, tmp_path):
        d = write_gtsdb(tmp_path, ["a.ppm;1;1;5;5;1", "a.ppm;1;1;50;5;1"], {"a.ppm": (10, 10)})
        rep = LoadReport()
        (s,) = load_gtsdb(d, "fine", report=rep)
        assert len(s.gts) == 1 and rep.accepted == 1 and rep.rejects[0].line_no == 2

    def test_synthetic_round_trip_and_split(self, tmp_path):
        samples = generate_synthetic(SyntheticConfig(num_images=10, image_size=32, size_range=(8, 12)))
        write_dataset(samples, tmp_path, ["a", "b", "c", "d"])
        back = load_dataset(tmp_path)
        assert [s.source for s in back] == sorted(s.source for s in samples)
        by = {s.source: s for s in samples}
        for s in back:
            np.testing.assert_array_equal(s.image.data, by[s.source].image.data)
            assert [(g.cls, g.box) for g in s.gts] == [(g.cls, g.box) for g in by[s.source].gts]
        tr, va, boundary = split_dataset(tmp_path, load_dataset)
        assert len(tr) == 8 and len(va) == 2 and boundary == va[0].source


class TestLetterbox:
    def test_square_is_pure_scale(self):
        t = letterbox_transform(320, 320, 640)
        assert (t.scale, t.pad_x, t.pad_y) == (2.0, 0, 0)

    def test_gtsdb_frame(self):
        t = letterbox_transform(800, 1360, 640)
        assert t.scale == 640 / 1360
        assert t.pad_x == 0 and t.pad_y == math.floor((640 - 800 * 640 / 1360) / 2) == 131

    def test_padding_is_gray(self):
        out, t = letterbox(np.ones((3, 50, 100), dtype=np.float32), 64)
        assert out.shape == (3, 64, 64)
        assert (out[:, :t.pad_y] == PAD_VALUE).all() and (out[:, -t.pad_y:] == PAD_VALUE).all()
        assert np.allclose(out[:, 32, :], 1.0)

    def test_target_multiple_of_32(self):
        with pytest.raises(ValueError):
            letterbox_transform(10, 10, 100)

    @given(st.integers(16, 2000), st.integers(16, 2000), st.sampled_from([64, 128, 640]),
           st.floats(0, 0.9), st.floats(0, 0.9))
    def test_box_round_trip(self, h, w, target, fx, fy):
        t = letterbox_transform(h, w, target)
        b = BoxXYXY(fx * w, fy * h, fx * w + 0.1 * w, fy * h + 0.1 * h)
        back = t.inverse_box(t.forward_box(b))
        np.testing.assert_allclose(back.as_array(), b.as_array(), atol=1e-6, rtol=0)

    def test_constant_image_preserved(self):
        out, _ = letterbox(np.full((3, 40, 40), 0.25, dtype=np.float32), 128)
        np.testing.assert_allclose(out, 0.25)


def det(cls, conf, *xyxy):
    return Detection(cls, conf, BoxXYXY(*map(float, xyxy)))


class TestNMS:
    def test_identical_boxes(self):
        out = nms([det(0, 0.8, 0, 0, 10, 10), det(0, 0.9, 0, 0, 10, 10)])
        assert [d.confidence for d in out] == [0.9]

    def test_disjoint_survive(self):
        ds = [det(0, 0.5, 0, 0, 5, 5), det(0, 0.6, 10, 10, 15, 15), det(0, 0.7, 20, 0, 25, 5)]
        assert len(nms(ds)) == 3

    def test_classwise(self):
        assert len(nms([det(0, 0.9, 0, 0, 10, 10), det(1, 0.8, 0, 0, 10, 10)])) == 2

    def test_ties_keep_lower_index(self):
        a, b = det(0, 0.5, 0, 0, 10, 10), det(0, 0.5, 1, 0, 11, 10)
        assert nms([a, b]) == [a] and nms([b, a]) == [b]

    @given(st.integers(0, 2 ** 32 - 1), st.sampled_from([0.3, 0.45, 0.5, 0.7]))
    def test_matches_brute_force(self, seed, thr):
        dets = nms_instance(seed)
        assert nms(dets, thr) == brute_nms(dets, thr)


def gtb(cls, *xyxy):
    return GroundTruthBox(cls, BoxXYXY(*map(float, xyxy)))


class TestEvaluator:
    def test_single_perfect(self):
        rep = evaluate([[det(0, 0.9, 0, 0, 10, 8)]], [[gtb(0, 0, 0, 10, 10)]])
        assert rep.ap(0) == 1.0 and rep.precision == 1.0 and rep.recall == 1.0

    def test_fp_then_tp(self):
        g = gtb(0, 0, 0, 10, 10)
        fp = det(0, 0.9, 8, 8, 18, 18)
        tp = det(0, 0.8, 0, 0, 10, 8)
        rep = evaluate([[fp, tp]], [[g]])
        assert rep.ap(0) == pytest.approx(0.5)

    def test_all_point_envelope(self):
        assert all_point_ap([True, False, True], 2) == pytest.approx(0.5 + 0.5 * 2 / 3)
        assert all_point_ap([], 3) == 0.0

    def test_map_over_classes_with_gt(self):
        rep = evaluate([[det(0, 0.9, 0, 0, 10, 10), det(2, 0.5, 0, 0, 3, 3)]], [[gtb(0, 0, 0, 10, 10)]],
                       num_classes=3)
        assert rep.ap(1) is None and rep.ap(2) is None and rep.mAP == 1.0

    def test_table_and_delimited(self):
        rep = evaluate([[det(0, 0.9, 0, 0, 10, 10)], []], [[gtb(0, 0, 0, 10, 10)], [gtb(1, 1, 1, 4, 4)]],
                       num_classes=2, class_names=["circle", "triangle"], split_boundary="val_0.ppm")
        assert "circle" in rep.table() and "val_0.ppm" in rep.to_delimited()
        assert rep.recall_of(1) == 0.0

    @given(st.integers(0, 2 ** 32 - 1))
    def test_matches_exhaustive_oracle(self, seed):
        dets, gts = micro_instance(seed)
        rep = evaluate(dets, gts, 0.5, num_classes=3)
        assert evaluator_matches_oracle(rep, brute_evaluate(dets, gts, 3), 3) == []

    @given(st.integers(0, 2 ** 32 - 1))
    def test_fp_to_tp_never_lowers_ap(self, seed):
        dets, gts = micro_instance(seed)
        base = evaluate(dets, gts, 0.5, num_classes=3)
        for c in range(3):
            ranked = match_detections(dets, gts, c, 0.5)
            matched = {(r.image, k) for r in ranked if r.tp
                       for k, g in enumerate(gts[r.image]) if g.box == dets[r.image][r.index].box}
            for r in ranked:
                if r.tp:
                    continue
                free = [g for k, g in enumerate(gts[r.image]) if g.cls == c and (r.image, k) not in matched]
                if not free:
                    continue
                fixed = [list(img) for img in dets]
                fixed[r.image][r.index] = Detection(c, r.conf, free[0].box)  # same confidence, exact box
                after = evaluate(fixed, gts, 0.5, num_classes=3)
                assert after.ap(c) >= base.ap(c) - 1e-12


class TestSynthetic:
    def test_histogram_close_to_target(self):
        cfg = SyntheticConfig(num_images=300)
        hist = class_histogram(generate_synthetic(cfg), 4)
        frac = hist / hist.sum()
        assert np.all(np.abs(frac - np.array(cfg.frequencies)) <= 0.05)

    def test_deterministic(self):
        cfg = SyntheticConfig(num_images=5, image_size=64, size_range=(8, 20), seed=3)
        a, b = generate_synthetic(cfg), generate_synthetic(cfg)
        for x, y in zip(a, b):
            assert x.image.data.tobytes() == y.image.data.tobytes() and x.gts == y.gts

    @given(st.integers(0, 10_000))
    def test_boxes_inside(self, seed):
        cfg = SyntheticConfig(num_images=3, image_size=64, size_range=(8, 30), seed=seed)
        for s in generate_synthetic(cfg):
            for g in s.gts:
                b = g.box
                assert 0 < b.x1 < b.x2 < 64 and 0 < b.y1 < b.y2 < 64

    def test_skips_are_counted(self):
        stats = GenerationStats()
        cfg = SyntheticConfig(num_images=3, image_size=32, objects_per_image=(6, 6), size_range=(14, 16))
        generate_synthetic(cfg, stats)
        assert stats.skipped > 0 and stats.placed + stats.skipped == 18

    @pytest.mark.parametrize("bad", [dict(frequencies=(0.5, 0.2, 0.2, 0.2)), dict(size_range=(4, 10)),
                                     dict(num_classes=9, frequencies=(1 / 9,) * 9)])
    def test_invalid(self, bad):
        with pytest.raises(SyntheticConfigError):
            SyntheticConfig(**bad)

    def test_sample_rejects_outside_box(self):
        with pytest.raises(ValueError):
            Sample(Tensor(np.zeros((3, 8, 8), np.float32)), [gtb(0, 0, 0, 9, 4)], "x")


class TestTraining:
    @pytest.mark.parametrize("t,expect", [(0, 0.001), (50, 0.000505), (100, 0.00001)])
    def test_cosine_schedule(self, t, expect):
        assert cosine_lr(t, 100, 1e-3, 1e-5) == pytest.approx(expect, rel=1e-12)

    def test_config_validation(self):
        with pytest.raises(TrainConfigError):
            TrainConfig(lr=0)
        with pytest.raises(TrainConfigError):
            TrainConfig(batch_size=0)

    @staticmethod
    def _run(seed=0, **kw):
        samples = generate_synthetic(SyntheticConfig(num_images=4, image_size=64, size_range=(8, 20), seed=1))
        m = build(ModelConfig(input_size=64, width_scale=0.0625, seed=seed))
        return m, train(m, samples, TrainConfig(epochs=2, batch_size=2, seed=seed, **kw), samples[:2])

    def test_bit_identical_histories(self):
        _, a = self._run()
        _, b = self._run()
        assert a.step_losses == b.step_losses and a.lrs == b.lrs
        assert [e.row() for e in a.epochs] != [] and a.final_val is not None
        assert a.lrs[0] == 1e-3

    def test_mode_after_training(self):
        m, h = self._run(max_steps=1)
        assert not m.training and len(h.step_losses) == 1

    def test_non_finite_reports_batch(self):
        samples = generate_synthetic(SyntheticConfig(num_images=2, image_size=64, size_range=(8, 20)))
        m = build(ModelConfig(input_size=64, width_scale=0.0625))
        m.head8.box_out.bias.data[...] = np.inf
        with pytest.raises(NonFiniteLossError, match="epoch 1 batch 0"):
            train(m, samples, TrainConfig(epochs=1, batch_size=2))


class TestConfigFile:
    def test_routes_keys(self):
        model_kw, train_kw = parse_config_text("# toy\ninput_size = 128\nlr=0.002\nseed = 4\n"
                                               "base_repeats = 1,1,1,1\nppa_enabled = off\n")
        assert model_kw == {"input_size": 128, "seed": 4, "base_repeats": (1, 1, 1, 1), "ppa_enabled": False}
        assert train_kw == {"lr": 0.002, "seed": 4}

    def test_unknown_key(self):
        with pytest.raises(ConfigFileError, match=":2: unknown key 'depth'"):
            parse_config_text("lr = 0.1\ndepth = 3\n")

    def test_bad_value(self):
        with pytest.raises(ConfigFileError, match="epochs"):
            parse_config_text("epochs = many")


class TestCLI:
    def test_usage_error_exit_code(self):
        with pytest.raises(SystemExit) as ei:
            cli.main(["train"])
        assert ei.value.code == cli.EXIT_USAGE

    def test_missing_checkpoint_is_io_error(self, tmp_path):
        assert cli.main(["inspect", "--ckpt", str(tmp_path / "none.ckpt")]) == cli.EXIT_IO

    def test_bad_config_is_usage_error(self, tmp_path):
        cfg = tmp_path / "c.txt"
        cfg.write_text("nonsense = 1\n")
        assert cli.main(["bench", "--config", str(cfg), "--input", "64"]) == cli.EXIT_USAGE

    def test_pipeline(self, tmp_path, capsys):
        data, run = tmp_path / "data", tmp_path / "run"
        cfg = tmp_path / "tiny.txt"
        cfg.write_text("width_scale = 0.0625\nbatch_size = 4\n")
        assert cli.main(["gen-data", "--out", str(data), "--images", "8", "--val-images", "4",
                         "--size", "64"]) == 0
        ckpt = tmp_path / "m.ckpt"
        assert cli.main(["train", "--data", str(data), "--config", str(cfg), "--input", "64",
                         "--epochs", "1", "--out", str(ckpt), "--report", str(run)]) == 0
        assert (run / "history.csv").exists() and (run / "loss_curve.png").stat().st_size > 0
        assert cli.main(["eval", "--ckpt", str(ckpt), "--data", str(data), "--out",
                         str(tmp_path / "e.csv")]) == 0
        assert (tmp_path / "e.csv").read_text().splitlines()[0].startswith("class")
        assert cli.main(["inspect", "--ckpt", str(ckpt)]) == 0
        img = sorted((data / "val").glob("*.ppm"))[0]
        assert cli.main(["attention", "--ckpt", str(ckpt), "--image", str(img), "--out",
                         str(tmp_path / "att.txt")]) == 0
        assert (tmp_path / "att.txt").read_text().startswith("# patch_weights P=2")
        assert cli.main(["bench", "--config", str(cfg), "--input", "64", "--out", str(run)]) == 0
        out = capsys.readouterr().out
        assert "reduction" in out and (run / "bench.csv").exists() and (run / "bench.png").exists()
