import numpy as np
import pytest

from acnn import engine as E
from acnn import models as M
from acnn import phantom as P
from acnn import training as T

GRID = (24, 24, 12)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    spec = P.DatasetSpec(n_train=6, grid_xyz=GRID, decimation=3)
    out = tmp_path_factory.mktemp("data") / "ds"
    P.make_dataset(spec, seed=21, out_dir=out)
    return P.load_dataset(out)


def fresh_ae(seed=13):
    return M.build_autoencoder(GRID, 0.25, 3, 3, seed=seed)


def small_cfg(**kw):
    base = dict(iterations=3, batch_size=2, seed=5, learning_rate=0.01)
    base.update(kw)
    return T.TrainConfig(**base)


class TestConfig:
    def test_defaults_match_contract(self):
        cfg = T.TrainConfig()
        assert cfg.lambda1 == 0.01
        assert cfg.lambda2 == 5e-6
        assert cfg.learning_rate == 0.001
        assert cfg.batch_size == 8
        assert cfg.loss_scaling == 0.99
        assert cfg.swap_prob == 0.1

    def test_validation(self):
        with pytest.raises(ValueError):
            T.TrainConfig(lambda1=-1)
        with pytest.raises(ValueError):
            T.TrainConfig(batch_size=0)


class TestLossAcnnSeg:
    def _setup(self, dataset, lambda1=0.01):
        segnet = M.build_segnet(GRID[:2] + (4,), 0.25, 3, 3, upsample_factor=3, seed=2)
        encoder, _ = fresh_ae()
        encoder.set_trainable(False)
        samples = dataset.split("train")[:2]
        x = E.Tensor(np.stack([s.lr.data for s in samples])[:, None])
        y = np.stack([s.labels.data for s in samples]).astype(np.int64)
        cfg = small_cfg(lambda1=lambda1)
        return segnet, encoder, x, y, cfg

    def test_lambda1_zero_equals_skipped_term_bitwise(self, dataset):
        segnet, encoder, x, y, cfg = self._setup(dataset, lambda1=0.0)
        with E.Tape():
            total_reg, comps_reg = T.loss_acnn_seg(segnet, encoder, x, y, cfg)
        with E.Tape():
            total_base, comps_base = T.loss_acnn_seg(segnet, None, x, y, cfg)
        assert comps_reg["total"] == comps_base["total"]
        assert comps_reg["latent"] == 0.0
        assert total_reg.data.tobytes() == total_base.data.tobytes()

    def test_identical_prediction_zero_latent_term(self, dataset):
        _, encoder, _, y, cfg = self._setup(dataset)
        hot = M.one_hot_batch(list(y), 3)
        c1 = encoder.forward(hot, training=False)
        c2 = encoder.forward(M.one_hot_batch(list(y), 3), training=False)
        assert E.l2_distance(c1, c2).item() == 0.0

    def test_component_audit(self, dataset):
        segnet, encoder, x, y, cfg = self._setup(dataset, lambda1=0.037)
        with E.Tape():
            total, comps = T.loss_acnn_seg(segnet, encoder, x, y, cfg)
        # recompute the latent term independently
        logits = segnet.forward(x, training=True)
        prob = E.softmax(logits, axis=1)
        code_pred = encoder.forward(prob, training=False)
        code_true = encoder.forward(M.one_hot_batch(list(y), 3), training=False)
        lhe = E.l2_distance(code_pred, E.Tensor(code_true.data)).item() / x.shape[0]
        residual = comps["total"] - comps["primary"] - comps["decay"]
        assert residual == pytest.approx(0.037 * lhe, rel=1e-6, abs=1e-9)

    def test_gradients_reach_only_segnet(self, dataset):
        segnet, encoder, x, y, cfg = self._setup(dataset)
        with E.Tape() as tape:
            total, _ = T.loss_acnn_seg(segnet, encoder, x, y, cfg)
            tape.backward(total)
        assert all(p.grad is not None for p in segnet.parameters())
        assert all(p.grad is None for p in encoder.parameters())

    def test_grid_mismatch_raises(self, dataset):
        segnet, encoder, x, y, cfg = self._setup(dataset)
        with pytest.raises(E.ShapeError):
            T.loss_acnn_seg(segnet, encoder, x, y[:, :-1], cfg)


class TestLossAcnnSr:
    def _setup(self, dataset, lambda1=0.01):
        srnet = M.build_srnet(GRID[:2] + (4,), 0.25, 3, upsample_factor=3, seed=4)
        predictor = M.build_predictor(GRID, 0.25, 3, seed=4)
        predictor.set_trainable(False)
        samples = dataset.split("train")[:2]
        x = E.Tensor(np.stack([s.lr.data for s in samples])[:, None])
        y = E.Tensor(np.stack([s.hr.data for s in samples])[:, None])
        return srnet, predictor, x, y, small_cfg(lambda1=lambda1)

    def test_perfect_prediction_zero_terms(self, dataset):
        _, predictor, _, y, cfg = self._setup(dataset)
        hub = E.huber_loss(y, E.Tensor(y.data.copy()))
        assert hub.item() == 0.0
        c1 = predictor.forward(y, training=False)
        c2 = predictor.forward(E.Tensor(y.data.copy()), training=False)
        assert E.l2_distance(c1, c2).item() == 0.0

    def test_lambda1_zero_reduces_to_huber(self, dataset):
        srnet, predictor, x, y, cfg = self._setup(dataset, lambda1=0.0)
        with E.Tape():
            total, comps = T.loss_acnn_sr(srnet, predictor, x, y, cfg)
        assert comps["latent"] == 0.0
        assert comps["total"] == pytest.approx(
            comps["primary"] + comps["decay"], rel=1e-12
        )

    def test_component_audit(self, dataset):
        srnet, predictor, x, y, cfg = self._setup(dataset, lambda1=0.02)
        with E.Tape():
            total, comps = T.loss_acnn_sr(srnet, predictor, x, y, cfg)
        pred = srnet.forward(x, training=True)
        code_pred = predictor.forward(pred, training=False)
        code_true = predictor.forward(E.Tensor(y.data), training=False)
        lhp = E.l2_distance(code_pred, E.Tensor(code_true.data)).item() / x.shape[0]
        residual = comps["total"] - comps["primary"] - comps["decay"]
        assert residual == pytest.approx(0.02 * lhp, rel=1e-6, abs=1e-9)


class TestStage1AE:
    def test_zero_iterations_params_unchanged(self, dataset):
        enc, dec = fresh_ae()
        before = enc.param_hash() + dec.param_hash()
        report = T.train_ae_stage1(
            enc, dec, [s.labels for s in dataset.samples], small_cfg(iterations=0)
        )
        assert enc.param_hash() + dec.param_hash() == before
        assert report.rows == []

    def test_same_seed_identical_report(self, dataset):
        maps = [s.labels for s in dataset.samples]

        def run():
            enc, dec = fresh_ae()
            return T.train_ae_stage1(enc, dec, maps, small_cfg(iterations=4))

        r1, r2 = run(), run()
        assert r1.rows == r2.rows

    def test_component_sum_matches_total(self, dataset):
        enc, dec = fresh_ae()
        report = T.train_ae_stage1(
            enc, dec, [s.labels for s in dataset.samples], small_cfg(iterations=4)
        )
        for _, total, primary, latent, decay in report.rows:
            assert total == pytest.approx(primary + latent + decay, rel=1e-5)

    def test_empty_dataset_rejected(self):
        enc, dec = fresh_ae()
        with pytest.raises(ValueError):
            T.train_ae_stage1(enc, dec, [], small_cfg())

    def test_report_round_trip(self, dataset, tmp_path):
        enc, dec = fresh_ae()
        report = T.train_ae_stage1(
            enc, dec, [s.labels for s in dataset.samples], small_cfg(iterations=2)
        )
        report.final_metrics["recon_dice"] = 0.5
        report.save(tmp_path / "r.txt")
        text = (tmp_path / "r.txt").read_text()
        assert "# iteration total primary latent decay" in text
        assert "recon_dice" in text


class TestStage1Predictor:
    def test_loss_decreases_and_metrics_recorded(self, dataset):
        enc, dec = fresh_ae()
        predictor = M.build_predictor(GRID, 0.25, 3, seed=6)
        pairs = [(s.hr, s.labels) for s in dataset.samples]
        cfg = small_cfg(iterations=10, learning_rate=0.001)
        report = T.train_predictor_stage1(predictor, enc, pairs, cfg)
        assert "latent_mse_initial" in report.final_metrics
        assert "latent_mse_final" in report.final_metrics
        assert report.final_metrics["latent_mse_final"] <= report.final_metrics[
            "latent_mse_initial"
        ]

    def test_degenerate_pair_loss_floor(self, dataset):
        # two different label maps share one intensity volume: the summed
        # squared distance cannot go below the code-variance floor
        enc, _ = fresh_ae()
        s0, s1 = dataset.samples[0], dataset.samples[1]
        targets = T.latent_targets(enc, [s0.labels, s1.labels])
        floor = 0.5 * float(((targets[0] - targets[1]) ** 2).sum())
        # best single prediction for both targets is their mean
        best = targets.mean(axis=0)
        achieved = float(((targets - best) ** 2).sum())
        assert achieved == pytest.approx(floor, rel=1e-5)
        assert floor > 0

    def test_determinism(self, dataset):
        pairs = [(s.hr, s.labels) for s in dataset.samples]

        def run():
            enc, _ = fresh_ae()
            predictor = M.build_predictor(GRID, 0.25, 3, seed=6)
            rep = T.train_predictor_stage1(predictor, enc, pairs, small_cfg(iterations=3))
            return rep.rows, predictor.param_hash()

        assert run() == run()


class TestStage2Joint:
    def _nets(self):
        enc, dec = fresh_ae(seed=30)
        predictor = M.build_predictor(GRID, 0.25, 3, seed=31)
        return enc, dec, predictor

    def test_latent_weight_zero_is_ae_finetune(self, dataset):
        enc, dec, predictor = self._nets()
        pred_hash = predictor.param_hash()
        pairs = [(s.hr, s.labels) for s in dataset.samples]
        report = T.train_tl_joint_stage2(
            enc, dec, predictor, pairs, small_cfg(iterations=3), latent_weight=0.0
        )
        assert predictor.param_hash() == pred_hash
        assert all(row[3] == 0.0 for row in report.rows)  # latent column

    def test_ema_normalisers_positive_finite(self, dataset):
        enc, dec, predictor = self._nets()
        pairs = [(s.hr, s.labels) for s in dataset.samples]
        report = T.train_tl_joint_stage2(enc, dec, predictor, pairs,
                                         small_cfg(iterations=5))
        for ax, ah in zip(report.column("alpha_x"), report.column("alpha_h")):
            assert np.isfinite(ax) and ax > 0
            assert np.isfinite(ah) and ah > 0

    def test_all_three_networks_update(self, dataset):
        enc, dec, predictor = self._nets()
        hashes = (enc.param_hash(), dec.param_hash(), predictor.param_hash())
        pairs = [(s.hr, s.labels) for s in dataset.samples]
        T.train_tl_joint_stage2(enc, dec, predictor, pairs, small_cfg(iterations=2))
        assert enc.param_hash() != hashes[0]
        assert dec.param_hash() != hashes[1]
        assert predictor.param_hash() != hashes[2]

    def test_determinism(self, dataset):
        pairs = [(s.hr, s.labels) for s in dataset.samples]

        def run():
            enc, dec, predictor = self._nets()
            rep = T.train_tl_joint_stage2(enc, dec, predictor, pairs,
                                          small_cfg(iterations=3))
            return rep.rows

        assert run() == run()


class TestTaskTraining:
    def test_baseline_vs_acnn_lambda_zero_bitwise(self, dataset):
        samples = dataset.split("train")
        grid_lr = GRID[:2] + (4,)

        def run(with_encoder):
            segnet = M.build_segnet(grid_lr, 0.25, 3, 3, upsample_factor=3, seed=40)
            encoder = None
            if with_encoder:
                encoder, _ = fresh_ae()
                encoder.set_trainable(False)
            cfg = small_cfg(iterations=3, lambda1=0.0)
            rep = T.train_segmentation(segnet, encoder, samples, cfg)
            return rep.rows, segnet.param_hash()

        assert run(True) == run(False)

    def test_regulariser_untouched_during_seg(self, dataset):
        samples = dataset.split("train")
        segnet = M.build_segnet(GRID[:2] + (4,), 0.25, 3, 3, upsample_factor=3, seed=41)
        encoder, _ = fresh_ae()
        encoder.set_trainable(False)
        before = encoder.param_hash()
        T.train_segmentation(segnet, encoder, samples,
                             small_cfg(iterations=3, lambda1=0.05))
        assert encoder.param_hash() == before

    def test_sr_loop_runs_and_logs(self, dataset):
        samples = dataset.split("train")
        srnet = M.build_srnet(GRID[:2] + (4,), 0.25, 3, upsample_factor=3, seed=42)
        predictor = M.build_predictor(GRID, 0.25, 3, seed=43)
        predictor.set_trainable(False)
        before = predictor.param_hash()
        rep = T.train_sr(srnet, predictor, samples, small_cfg(iterations=3, lambda1=0.01))
        assert len(rep.rows) == 3
        assert predictor.param_hash() == before
        for _, total, primary, latent, decay in rep.rows:
            assert total == pytest.approx(primary + 0.01 * latent + decay, rel=1e-5)
