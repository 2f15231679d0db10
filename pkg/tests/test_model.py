import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from yoloppa.blocks import PConv
from yoloppa.losses import encode_box
from yoloppa.model import (
    BadMagicError,
    ConfigError,
    ManifestMismatchError,
    ModelConfig,
    TruncatedPayloadError,
    VersionMismatchError,
    ablation_grid,
    build,
    count_flops,
    count_params,
    decode_predictions,
    encode_targets,
    load_checkpoint,
    read_manifest,
    save_checkpoint,
)
from yoloppa.nn import Conv2d, Linear
from yoloppa.tensor import Tensor, TensorError, no_grad
from yoloppa.types import BoxXYXY


def toy(**kw):
    base = dict(num_classes=4, input_size=128)
    base.update(kw)
    return ModelConfig(**base)


def small(**kw):
    """Narrow and shallow enough for quick forward passes."""
    base = dict(num_classes=3, input_size=64, width_scale=0.0625)
    base.update(kw)
    return ModelConfig(**base)


def enumerate_params(model) -> int:
    return sum(int(p.data.size) for p in model.parameters())


@pytest.fixture(scope="module")
def toy_model():
    m = build(toy())
    m.eval()
    return m


class TestConfig:
    def test_n_scale_widths(self):
        cfg = ModelConfig()
        assert cfg.channels == [16, 32, 64, 128, 256]
        assert cfg.repeats == [1, 2, 2, 1] and cfg.neck_depth == 1

    @pytest.mark.parametrize("bad", [dict(input_size=100), dict(num_classes=0), dict(c2f_kind="x"),
                                     dict(pconv_ratio=0.0), dict(ap_pool="cell")])
    def test_invalid(self, bad):
        with pytest.raises(ConfigError):
            ModelConfig(**bad)

    def test_dict_round_trip(self):
        cfg = toy(seed=7, ppa_enabled=False)
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg
        with pytest.raises(ConfigError, match="unknown"):
            ModelConfig.from_dict({"depth": 1})


class TestForward:
    @pytest.mark.parametrize("s", [64, 128, 640])
    def test_stride_covenant(self, s):
        assert [lv[1:] for lv in ModelConfig(input_size=s).levels()] == [(s // 8,) * 2, (s // 16,) * 2,
                                                                        (s // 32,) * 2]

    def test_toy_shapes(self, toy_model):
        with no_grad():
            outs = toy_model(Tensor(np.random.default_rng(0).random((2, 3, 128, 128)).astype(np.float32)))
        assert [o.shape for o in outs] == [(2, 8, 16, 16), (2, 8, 8, 8), (2, 8, 4, 4)]

    def test_zero_input_finite(self, toy_model):
        with no_grad():
            outs = toy_model(Tensor(np.zeros((1, 3, 128, 128), dtype=np.float32)))
        assert all(np.isfinite(o.data).all() for o in outs)

    def test_wrong_size(self, toy_model):
        with pytest.raises(TensorError, match="expects 128px"):
            toy_model(Tensor(np.zeros((1, 3, 96, 96), dtype=np.float32)))

    def test_determinism(self):
        x = Tensor(np.random.default_rng(3).random((1, 3, 64, 64)).astype(np.float32))
        a, b = build(small(seed=5)), build(small(seed=5))
        for (_, pa, _), (_, pb, _) in zip(a.state_items(), b.state_items()):
            assert np.array_equal(pa, pb)
        a.eval()
        b.eval()
        with no_grad():
            for oa, ob in zip(a(x), b(x)):
                assert np.array_equal(oa.data, ob.data)
        assert not np.array_equal(build(small(seed=6)).stem.conv.weight.data, a.stem.conv.weight.data)

    def test_n_scale_640_grids(self):
        m = build(ModelConfig())
        assert m.levels == [(8, 80, 80), (16, 40, 40), (32, 20, 20)]


class TestAccounting:
    def test_single_conv(self):
        assert Conv2d(16, 16, 3).num_params() == 2304

    @pytest.mark.parametrize("kw", [dict(), dict(c2f_kind="bottleneck"), dict(ppa_enabled=False),
                                    dict(ppa_fusion="concat")])
    def test_params_match_enumeration(self, kw):
        m = build(toy(**kw))
        assert count_params(m) == enumerate_params(m)

    def test_flops_match_closed_forms(self):
        """Record each conv/linear's output shape and re-derive its cost by formula."""
        m = build(small())
        expected = []

        def wrap(mod):
            inner = mod.forward

            def forward(x, *a, **k):
                y = inner(x, *a, **k)
                if isinstance(mod, PConv):
                    expected.append(2 * 9 * mod.c_p * mod.c_p * y.shape[0] * y.shape[2] * y.shape[3])
                elif isinstance(mod, Conv2d):
                    expected.append(2 * mod.k * mod.k * mod.c_in * mod.c_out * y.shape[0] * y.shape[2] * y.shape[3])
                else:
                    expected.append(2 * mod.d_in * mod.d_out * int(np.prod(y.shape[:-1])))
                return y
            mod.forward = forward

        for _, mod in m.named_modules():
            if isinstance(mod, (Conv2d, PConv, Linear)):
                wrap(mod)
        rep = count_flops(m, with_counterpart=False)
        t = rep.totals
        assert t["conv_flops"] + t["linear_flops"] == sum(expected)
        assert rep.total_flops == sum(l.total for l in rep.layers)

    def test_delimited_report(self):
        rep = count_flops(build(small()))
        lines = rep.to_delimited().splitlines()
        assert lines[0].split(",")[0] == "layer" and lines[-1].startswith("TOTAL,")
        assert int(lines[-1].split(",")[-1]) == rep.total_flops
        assert len(lines) == len(rep.layers) + 2
        assert rep.delta()["counterpart_kind"] == "bottleneck" and rep.delta()["params"] < 0

    def test_n_scale_faster_is_smaller(self):
        fast = count_params(build(ModelConfig(c2f_kind="faster")))
        slow = count_params(build(ModelConfig(c2f_kind="bottleneck")))
        assert fast < slow
        assert 0.05 <= (slow - fast) / slow <= 0.35

    def test_ablation_lattice(self):
        rows = {(r["c2f_kind"], r["ppa"]): r for r in ablation_grid(small())}
        assert len(rows) == 4
        for ppa in (False, True):
            assert rows[("faster", ppa)]["params"] < rows[("bottleneck", ppa)]["params"]
        for kind in ("faster", "bottleneck"):
            assert rows[(kind, True)]["params"] > rows[(kind, False)]["params"]

    def test_buffers_reported_separately(self):
        m = build(small())
        from yoloppa.model import count_buffers
        assert count_buffers(m) > 0
        assert count_params(m) == enumerate_params(m)


class TestDecode:
    def test_all_negative_logits_empty(self):
        raw = [np.full((1, 7, g, g), -10.0) for g in (8, 4, 2)]
        assert decode_predictions(raw, 0.25) == [[]]

    def test_encode_decode_single(self):
        box = BoxXYXY(10.0, 12.5, 30.0, 21.0)
        raw8 = encode_targets([box], [(2, 2)], 8, 3, [1], (8, 8))
        raws = [raw8, np.full((1, 7, 4, 4), -20.0), np.full((1, 7, 2, 2), -20.0)]
        (dets,) = decode_predictions(raws, 0.25)
        assert len(dets) == 1 and dets[0].cls == 1
        np.testing.assert_allclose(dets[0].box.as_array(), box.as_array(), atol=1e-4)

    @given(st.integers(0, 10_000))
    def test_inverse_property(self, seed):
        # cells whose centre lies strictly inside the box, and boxes up to a few strides wide
        rng = np.random.default_rng(seed)
        stride, g = 16, 8
        row, col = rng.integers(0, g, size=2)
        cx, cy = (col + 0.5) * stride, (row + 0.5) * stride
        l, t, r, b = rng.uniform(0.05, 4, size=4) * stride
        box = BoxXYXY(cx - l, cy - t, cx + r, cy + b)
        raw = np.full((1, 6, g, g), -20.0)
        raw[0, :4, row, col] = encode_box(box, row, col, stride)
        raw[0, 4, row, col] = 20.0
        (dets,) = decode_predictions([raw], 0.5, strides=[stride])
        np.testing.assert_allclose(dets[0].box.as_array(), box.as_array(), atol=1e-4)


class TestCheckpoint:
    @pytest.fixture
    def saved(self, tmp_path):
        m = build(small(seed=11))
        # make buffers non-trivial before saving
        m.train()
        with no_grad():
            m(Tensor(np.random.default_rng(0).random((2, 3, 64, 64)).astype(np.float32)))
        path = tmp_path / "m.ckpt"
        save_checkpoint(m, path)
        return m, path

    def test_round_trip_bit_exact(self, saved):
        m, path = saved
        back = load_checkpoint(path)
        a, b = m.state_items(), back.state_items()
        assert [n for n, _, _ in a] == [n for n, _, _ in b]
        for (_, x, _), (_, y, _) in zip(a, b):
            assert x.dtype == y.dtype and x.tobytes() == y.tobytes()
        assert back.config == m.config

    def test_manifest_order_is_graph_order(self, saved):
        m, path = saved
        assert [t["name"] for t in read_manifest(path)["tensors"]] == [n for n, _, _ in m.state_items()]

    def test_truncated(self, saved, tmp_path):
        _, path = saved
        cut = tmp_path / "cut.ckpt"
        cut.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(TruncatedPayloadError, match="truncated payload") as ei:
            load_checkpoint(cut)
        assert ei.value.code == "truncated_payload"

    def test_bad_magic(self, saved, tmp_path):
        _, path = saved
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"XXXX" + path.read_bytes()[4:])
        with pytest.raises(BadMagicError):
            load_checkpoint(bad)

    def test_version(self, saved, tmp_path):
        _, path = saved
        blob = bytearray(path.read_bytes())
        blob[4:8] = (99).to_bytes(4, "little")
        v = tmp_path / "v.ckpt"
        v.write_bytes(bytes(blob))
        with pytest.raises(VersionMismatchError) as ei:
            load_checkpoint(v)
        assert ei.value.code == "version_mismatch"

    def test_mismatched_num_classes_names_tensor(self, saved):
        m, path = saved
        with pytest.raises(ManifestMismatchError, match="head8.cls_out.weight") as ei:
            load_checkpoint(path, m.config.replace(num_classes=5))
        assert ei.value.code == "manifest_mismatch"

    def test_distinct_codes(self):
        codes = {e.code for e in (BadMagicError, VersionMismatchError, ManifestMismatchError,
                                  TruncatedPayloadError)}
        assert len(codes) == 4
