import numpy as np
import pytest

from acnn import engine as E
from acnn import models as M


class TestAutoencoderBuilder:
    def test_full_scale_matches_layer_table(self):
        enc, dec = M.build_autoencoder((120, 120, 60), 1.0, 3, 3, seed=1)
        assert [l.channels for l in enc.spec.layers] == [16, 16, 32, 32, 64, 64, 1, 64]
        assert enc.spec.shapes[-2] == (1, 5, 5, 5)  # 125-unit seed before FC
        assert enc.spec.shapes[-1] == (64,)
        assert dec.spec.shapes[0] == (125,)
        assert dec.spec.shapes[-1] == (3, 60, 120, 120)

    def test_desk_round_trip_shape(self):
        enc, dec = M.build_autoencoder((24, 24, 12), 0.25, 3, 3, seed=1)
        assert enc.spec.shapes[-1] == (64,)
        assert dec.spec.shapes[-1] == (3, 12, 24, 24)

    def test_unreachable_grid_raises(self):
        with pytest.raises(M.SpecError):
            M.build_autoencoder((22, 22, 10), 0.25, 3, 3, seed=1)

    def test_class_count_validation(self):
        with pytest.raises(ValueError):
            M.build_autoencoder((24, 24, 12), 0.25, 3, 1, seed=1)

    def test_encode_decode_composition_shape(self):
        enc, dec = M.build_autoencoder((24, 24, 12), 0.25, 3, 3, seed=5)
        y = np.random.default_rng(0).integers(0, 3, (12, 24, 24))
        code = M.encode(enc, M.one_hot(y, 3))
        rec = M.decode(dec, code)
        code2 = M.encode(enc, E.softmax(rec, axis=0))
        assert code.shape == code2.shape == (64,)

    def test_encode_deterministic(self):
        enc, _ = M.build_autoencoder((24, 24, 12), 0.25, 3, 3, seed=5)
        y = np.random.default_rng(1).integers(0, 3, (12, 24, 24))
        c1 = M.encode(enc, M.one_hot(y, 3))
        c2 = M.encode(enc, M.one_hot(y, 3))
        assert np.array_equal(c1, c2)
        assert E.l2_distance(E.Tensor(c1), E.Tensor(c2)).item() == 0.0


class TestPredictorBuilder:
    def test_full_scale_channels(self):
        p = M.build_predictor((120, 120, 60), 1.0, 3, seed=2)
        convs = [l.channels for l in p.spec.layers if l.kind == "conv"]
        assert convs == [32, 32, 64, 64, 128, 128, 256, 1]
        assert p.spec.layers[-1].channels == 64
        assert p.spec.layers[-1].activation == "none"

    def test_desk_code_and_finiteness(self):
        p = M.build_predictor((24, 24, 12), 0.25, 3, seed=2)
        vol = np.random.default_rng(3).random((12, 24, 24)).astype(np.float32)
        code = M.predict_code(p, vol)
        assert code.shape == (64,)
        assert np.isfinite(code).all()


class TestTrunkBuilders:
    def test_segnet_full_scale_k5(self):
        net = M.build_segnet((120, 120, 12), 1.0, 3, 3, upsample_factor=5, seed=3)
        assert net.spec.shapes[-1] == (3, 60, 120, 120)

    def test_segnet_k1_identity_spatial(self):
        net = M.build_segnet((24, 24, 4), 0.5, 3, 3, upsample_factor=1, seed=3)
        assert net.spec.shapes[-1][1:] == (4, 24, 24)

    def test_segnet_desk_k3(self):
        net = M.build_segnet((24, 24, 4), 0.25, 3, 3, upsample_factor=3, seed=3)
        assert net.spec.shapes[-1] == (3, 12, 24, 24)

    def test_srnet_single_channel_and_capacity(self):
        seg = M.build_segnet((120, 120, 12), 1.0, 3, 3, upsample_factor=5, seed=3)
        sr = M.build_srnet((120, 120, 12), 1.0, 3, upsample_factor=5, seed=3)
        assert sr.spec.shapes[-1] == (1, 60, 120, 120)
        ratio = sr.param_count() / seg.param_count()
        assert 0.8 <= ratio <= 1.2

    def test_srnet_zero_head_constant_output(self):
        net = M.build_srnet((24, 24, 4), 0.25, 3, upsample_factor=1, seed=4)
        head = len(net.spec.layers) - 1
        net.params[f"l{head:02d}.kernel"].data[:] = 0
        net.params[f"l{head:02d}.bias"].data[:] = 0.75
        x = E.Tensor(np.random.default_rng(0).standard_normal((1, 1, 4, 24, 24)).astype(np.float32))
        out = net.forward(x)
        assert np.allclose(out.data, 0.75, atol=1e-6)

    def test_indivisible_inplane_raises(self):
        with pytest.raises(M.SpecError):
            M.build_segnet((22, 22, 4), 0.25, 3, 3, upsample_factor=1, seed=3)


class TestShapeContract:
    @pytest.mark.parametrize("mult", [0.25, 0.5, 1.0])
    @pytest.mark.parametrize("rank", [2, 3])
    def test_forward_shape_matches_resolved(self, mult, rank):
        grid = (24, 24, 12)[: rank - 1] + (12,) if rank == 2 else (24, 24, 12)
        if rank == 2:
            grid = (24, 12)
        enc, dec = M.build_autoencoder(grid, mult, rank, 3, seed=9)
        sp = tuple(reversed(grid))
        x = E.Tensor(np.random.default_rng(0).random((2, 3) + sp).astype(np.float32))
        out = enc.forward(x)
        assert out.shape == (2,) + enc.spec.shapes[-1]
        rec = dec.forward(E.Tensor(out.data))
        assert rec.shape == (2,) + dec.spec.shapes[-1]

    @pytest.mark.parametrize("mult,rank,ups", [(0.25, 3, 2), (0.5, 3, 3), (0.25, 2, 4)])
    def test_trunk_shapes(self, mult, rank, ups):
        grid = (24, 24, 4) if rank == 3 else (24, 4)
        net = M.build_segnet(grid, mult, rank, 3, upsample_factor=ups, seed=9)
        sp = tuple(reversed(grid))
        x = E.Tensor(np.random.default_rng(1).random((1, 1) + sp).astype(np.float32))
        out = net.forward(x)
        assert out.shape == (1,) + net.spec.shapes[-1]
        assert out.shape[2] == sp[0] * ups

    def test_code_dim_fixed_across_multipliers(self):
        for mult in (0.25, 0.5, 1.0, 2.0):
            enc, _ = M.build_autoencoder((24, 24, 12), mult, 3, 3, seed=1)
            assert enc.spec.shapes[-1] == (64,)
            p = M.build_predictor((24, 24, 12), mult, 3, seed=1)
            assert p.spec.shapes[-1] == (64,)

    def test_build_and_forward_bitwise_reproducible(self):
        def run():
            net = M.build_segnet((24, 24, 4), 0.25, 3, 3, upsample_factor=2, seed=77)
            x = E.Tensor(
                np.random.default_rng(7).standard_normal((1, 1, 4, 24, 24)).astype(np.float32)
            )
            return net.forward(x).data.tobytes()

        assert run() == run()

    def test_softmax_of_logits_sums_to_one(self):
        net = M.build_segnet((24, 24, 4), 0.25, 3, 3, upsample_factor=2, seed=8)
        x = E.Tensor(np.random.default_rng(2).random((1, 1, 4, 24, 24)).astype(np.float32))
        probs = E.softmax(net.forward(x), axis=1)
        assert np.abs(probs.data.sum(axis=1) - 1.0).max() < 1e-5


class TestOneHot:
    def test_known_values(self):
        out = M.one_hot(np.array([0, 2]), 3)
        assert out.data.tolist() == [[1.0, 0.0], [0.0, 0.0], [0.0, 1.0]]

    def test_round_trip(self):
        rng = np.random.default_rng(6)
        y = rng.integers(0, 3, (4, 5, 6))
        assert np.array_equal(M.labels_from_logits(M.one_hot(y, 3)), y)

    def test_channel_sum_is_one(self):
        y = np.random.default_rng(7).integers(0, 4, (3, 3, 3))
        hot = M.one_hot(y, 4)
        assert np.array_equal(hot.data.sum(axis=0), np.ones((3, 3, 3), dtype=np.float32))

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            M.one_hot(np.array([0, 3]), 3)


class TestCheckpoints:
    def test_save_load_round_trip(self, tmp_path):
        args = dict(
            grid_xyz=(24, 24, 12), width_multiplier=0.25, spatial_rank=3,
            class_count=3, seed=11,
        )
        nets = M.build_from_args("autoencoder", args)
        # perturb away from init so loading is meaningful
        for net in nets.values():
            for p in net.params.values():
                p.data += 0.01
        M.save_checkpoint(tmp_path / "ck", "autoencoder", args, nets)
        kind, args2, loaded = M.load_checkpoint(tmp_path / "ck")
        assert kind == "autoencoder"
        assert loaded.keys() == nets.keys()
        for name in nets:
            assert loaded[name].param_hash() == nets[name].param_hash()

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            M.load_checkpoint(tmp_path / "nothing")
