import numpy as np
import pytest

from dronefuse.net import (
    Checkpoint,
    CheckpointError,
    FeaturePyramid,
    NetworkConfig,
    SegMap,
    c3_forward,
    cbs_forward,
    decode_checkpoint,
    encode_checkpoint,
    feder_stub,
    full_forward,
    head_forward,
    load_checkpoint,
    neck_forward,
    save_checkpoint,
    sppf_forward,
    yolo_backbone_stub,
)
from dronefuse.net.blocks import init_c3, init_cbs, init_sppf
from dronefuse.net.model import default_anchors, init_params
from dronefuse.numeric import (
    ShapeError,
    Tensor,
    batch_norm_inference,
    concat_channels,
    conv2d,
    relative_error,
    silu,
)


def T(a):
    return Tensor(np.asarray(a, dtype=float))


def identity_cbs(params, prefix, c):
    params[f"{prefix}.weight"] = T(np.eye(c).reshape(1, 1, c, c))
    params[f"{prefix}.bias"] = T(np.zeros(c))
    params[f"{prefix}.bn_mean"] = T(np.zeros(c))
    params[f"{prefix}.bn_var"] = T(np.full(c, 1.0 - 1e-5))  # var + eps = 1
    params[f"{prefix}.bn_gamma"] = T(np.ones(c))
    params[f"{prefix}.bn_beta"] = T(np.zeros(c))


def np_silu(v):
    return v / (1 + np.exp(-v))


class TestCBS:
    def test_identity(self, rng):
        p = {}
        identity_cbs(p, "b", 3)
        x = rng.normal(size=(4, 4, 3))
        assert np.allclose(cbs_forward(T(x), p, "b").data, np_silu(x), rtol=1e-15, atol=1e-15)

    def test_zero_weights(self, rng):
        p = {}
        init_cbs(p, "b", 3, 2, 3, None)
        assert np.all(cbs_forward(T(rng.normal(size=(5, 5, 3))), p, "b").data == 0)

    def test_composition(self, rng):
        p = {}
        init_cbs(p, "b", 3, 4, 3, rng)
        x = T(rng.normal(size=(5, 5, 3)))
        ref = silu(batch_norm_inference(conv2d(x, p["b.weight"], p["b.bias"], 1, 1), p["b.bn_mean"],
                                        p["b.bn_var"], p["b.bn_gamma"], p["b.bn_beta"], eps=1e-5))
        assert np.array_equal(cbs_forward(x, p, "b").data, ref.data)


class TestC3:
    def test_identity_kernels_without_cbam(self, rng):
        c = 4
        h = c // 2
        p = {}
        # cv1, cv2: pick first/second half of the channels; bottleneck 1x1 then 3x3 centre-only
        w1 = np.zeros((1, 1, c, h))
        w1[0, 0, :h, :] = np.eye(h)
        w2 = np.zeros((1, 1, c, h))
        w2[0, 0, h:, :] = np.eye(h)
        for name, w in (("c.cv1", w1), ("c.cv2", w2)):
            identity_cbs(p, name, h)
            p[f"{name}.weight"] = T(w)
        identity_cbs(p, "c.m0.cv1", h)
        identity_cbs(p, "c.m0.cv2", h)
        k = np.zeros((3, 3, h, h))
        k[1, 1] = np.eye(h)
        p["c.m0.cv2.weight"] = T(k)
        identity_cbs(p, "c.cv3", c)
        x = rng.normal(size=(3, 3, c))
        a = np_silu(x[..., :h])
        a = a + np_silu(np_silu(a))
        b = np_silu(x[..., h:])
        ref = np_silu(np.concatenate([a, b], axis=2))
        assert relative_error(c3_forward(T(x), p, "c", with_cbam=False).data, ref) <= 1e-12

    def test_zero_input_zero_bias(self, rng):
        p = {}
        init_c3(p, "c", 4, 4, rng, with_cbam=True, reduction=2)
        for name in list(p):
            if name.endswith((".bias", "bn_beta", "bn_mean")):
                p[name] = T(np.zeros(p[name].shape))
        assert np.all(c3_forward(T(np.zeros((4, 4, 4))), p, "c", with_cbam=True).data == 0)

    def test_saturated_cbam_is_identity(self, rng):
        p = {}
        init_c3(p, "c", 4, 4, rng, with_cbam=True, reduction=2)
        for name in list(p):
            if ".cbam." in name:
                p[name] = T(np.zeros(p[name].shape))
        p["c.m0.cbam.channel.mlp_b2"] = T(np.full(p["c.m0.cbam.channel.mlp_b2"].shape, 20.0))
        p["c.m0.cbam.spatial.bias"] = T([40.0])
        x = T(rng.normal(size=(5, 5, 4)))
        with_att = c3_forward(x, p, "c", with_cbam=True).data
        without = c3_forward(x, p, "c", with_cbam=False).data
        assert np.max(np.abs(with_att - without)) <= 1e-9


class TestSPPF:
    def test_constant_input(self):
        p = {}
        init_sppf(p, "s", 2, 2, None)
        p["s.cv1.weight"] = T(np.ones((1, 1, 2, 1)))
        p["s.cv2.weight"] = T(np.ones((1, 1, 4, 2)) / 4)
        out = sppf_forward(T(np.full((6, 6, 2), 0.5)), p, "s")
        assert out.shape == (6, 6, 2)
        assert np.allclose(out.data, out.data[0, 0, 0], rtol=0, atol=1e-15)


class TestModel:
    cfg = NetworkConfig(input_size=64, base_channels=8)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            NetworkConfig(input_size=48)
        assert NetworkConfig(anchors_per_scale=1, class_count=1).head_channels == 6

    def test_backbone_shapes_and_determinism(self, rng):
        params = init_params(self.cfg, seed=3)
        x = T(rng.uniform(size=(64, 64, 3)))
        pyr = yolo_backbone_stub(x, params, self.cfg)
        assert (pyr.p3.shape, pyr.p4.shape, pyr.p5.shape) == ((8, 8, 16), (4, 4, 32), (2, 2, 64))
        again = yolo_backbone_stub(x, init_params(self.cfg, seed=3), self.cfg)
        assert np.array_equal(pyr.p5.data, again.p5.data)

    def test_zero_input_zero_bias_pyramid(self):
        params = init_params(self.cfg, seed=1)
        for name in list(params):
            if name.endswith((".bias", "bn_beta", "bn_mean")):
                params[name] = T(np.zeros(params[name].shape))
        pyr = yolo_backbone_stub(T(np.zeros((64, 64, 3))), params, self.cfg)
        assert all(np.all(t.data == 0) for t in (pyr.p3, pyr.p4, pyr.p5))

    def test_bad_input_rejected(self):
        with pytest.raises(ShapeError):
            yolo_backbone_stub(T(np.zeros((32, 32, 3))), init_params(self.cfg), self.cfg)

    def test_feder(self, rng):
        x = T(rng.uniform(size=(64, 64, 3)))
        seg = feder_stub(x, init_params(self.cfg, zero=True), self.cfg)
        assert np.all(seg.map.data == 0.5)
        a = feder_stub(x, init_params(self.cfg, seed=2), self.cfg).map.data
        b = feder_stub(x, init_params(self.cfg, seed=2), self.cfg).map.data
        assert np.array_equal(a, b) and a.min() >= 0 and a.max() <= 1

    def test_segmap_validation(self):
        with pytest.raises(ValueError):
            SegMap(T(np.full((4, 4, 1), -0.1)))
        with pytest.raises(ShapeError):
            SegMap(T(np.zeros((4, 4, 2))))

    def test_neck_shapes_and_liveness(self, rng):
        params = init_params(self.cfg, seed=5)
        pyr = yolo_backbone_stub(T(rng.uniform(size=(64, 64, 3))), params, self.cfg)
        zeros = neck_forward(pyr, SegMap(T(np.zeros((64, 64, 1)))), params, self.cfg)
        ones = neck_forward(pyr, SegMap(T(np.ones((64, 64, 1)))), params, self.cfg)
        assert [zeros[s].shape for s in (8, 16, 32)] == [(8, 8, 16), (4, 4, 32), (2, 2, 64)]
        assert any(np.linalg.norm(zeros[s].data) != np.linalg.norm(ones[s].data) for s in zeros)

    def test_neck_error_names_fusion_point(self, rng):
        params = init_params(self.cfg, seed=5)
        del params["neck.fuse16.mlp_w1"]
        params["neck.fuse16.mlp_w1"] = T(np.zeros((7, 8)))
        params["neck.fuse16.mlp_w2"] = T(np.zeros((8, 7)))
        params["neck.fuse16.mlp_b1"] = T(np.zeros(8))
        params["neck.fuse16.mlp_b2"] = T(np.zeros(7))
        pyr = yolo_backbone_stub(T(rng.uniform(size=(64, 64, 3))), params, self.cfg)
        with pytest.raises(ShapeError, match="fuse16"):
            neck_forward(pyr, SegMap(T(np.zeros((64, 64, 1)))), params, self.cfg)

    def test_head(self):
        cfg = NetworkConfig(anchors_per_scale=1, class_count=1)
        params = init_params(cfg, zero=True)
        fused = {s: T(np.ones((64 // s, 64 // s, cfg.widths[s]))) for s in (8, 16, 32)}
        out = head_forward(fused, params, cfg)
        assert all(out[s].shape[2] == 6 and np.all(out[s].data == 0) for s in out)

    def test_full_forward_shapes_and_determinism(self, rng):
        ck = Checkpoint.initialise(self.cfg, seed=9)
        x = T(rng.uniform(size=(64, 64, 3)))
        a, b = full_forward(x, ck), full_forward(x, ck)
        assert {s: a[s].shape for s in a} == {8: (8, 8, 18), 16: (4, 4, 18), 32: (2, 2, 18)}
        assert all(np.array_equal(a[s].data, b[s].data) for s in a)

    def test_full_forward_tags_stage(self):
        ck = Checkpoint.initialise(self.cfg)
        del ck.params["neck.lat5.weight"]
        with pytest.raises(KeyError, match="neck"):
            full_forward(T(np.zeros((64, 64, 3))), ck)

    def test_default_anchors_scale(self):
        a = default_anchors(NetworkConfig(input_size=640))
        assert a.shape == (3, 3, 2)
        assert tuple(a[0, 0]) == (10.0, 13.0) and tuple(a[2, 2]) == (373.0, 326.0)


class TestCheckpoint:
    def test_round_trip_bytes(self, tmp_path):
        ck = Checkpoint.initialise(NetworkConfig(input_size=32, base_channels=4), seed=1)
        save_checkpoint(ck, tmp_path / "a.bin")
        loaded = load_checkpoint(tmp_path / "a.bin")
        save_checkpoint(loaded, tmp_path / "b.bin")
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
        assert loaded.config == ck.config
        assert all(np.array_equal(loaded.params[k].data, ck.params[k].data) for k in ck.params)

    def test_truncated_reports_offset(self):
        blob = encode_checkpoint(Checkpoint.initialise(NetworkConfig(input_size=32, base_channels=4)))
        with pytest.raises(CheckpointError) as err:
            decode_checkpoint(blob[:100])
        assert "offset" in str(err.value)

    def test_bad_crc(self):
        blob = bytearray(encode_checkpoint(Checkpoint.initialise(NetworkConfig(input_size=32, base_channels=4))))
        blob[-1] ^= 0xFF
        with pytest.raises(CheckpointError, match="CRC"):
            decode_checkpoint(bytes(blob))

    def test_bad_magic_with_valid_crc(self):
        import zlib
        import struct
        blob = encode_checkpoint(Checkpoint.initialise(NetworkConfig(input_size=32, base_channels=4)))
        body = b"XXXX" + blob[4:-4]
        with pytest.raises(CheckpointError, match="magic") as err:
            decode_checkpoint(body + struct.pack("<I", zlib.crc32(body)))
        assert err.value.offset == 0
