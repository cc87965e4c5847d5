"""Model shapes, weight sharing, projection norms, MNC/segmentation
contracts, config fingerprints and the checkpoint format."""

import dataclasses

import numpy as np
import pytest

import biview.autograd as ag
from biview.autograd import Tensor
from biview.checkpoint import load_tensors, save_tensors
from biview.contrastive import ContrastiveConfig, ViewLatents, batch_loss
from biview.errors import CheckpointError, ConfigError, DataError, ShapeError
from biview.models import (ClassifierHead, EncoderConfig, EncoderSet, ProjectionHead,
                           build_segmentation_net, classify, encode, mnc_forward, project)
from biview.optim import SGD

CFG = EncoderConfig()


@pytest.fixture(scope="module")
def encoder_set():
    return EncoderSet.build(CFG, seed=0)


def images(n, seed=0, size=32):
    rng = np.random.default_rng(seed)
    return Tensor(rng.normal(size=(n, 1, size, size)).astype(np.float32))


class TestEncoderConfig:
    def test_fingerprint_changes_iff_fields_change(self):
        base = EncoderConfig()
        assert base.fingerprint() == EncoderConfig().fingerprint()
        for change in [dict(input_size=64), dict(stage_widths=(32, 64, 256)),
                       dict(blocks_per_stage=3), dict(proj_hidden=128), dict(proj_dim=16),
                       dict(in_channels=3)]:
            assert dataclasses.replace(base, **change).fingerprint() != base.fingerprint()

    def test_round_trip(self):
        cfg = EncoderConfig(input_size=64, stage_widths=(16, 32))
        assert EncoderConfig.from_dict(cfg.to_dict()) == cfg

    def test_projection_dim_floor(self):
        with pytest.raises(ConfigError):
            EncoderConfig(proj_dim=1)

    def test_paper_scale_dims(self):
        cfg = EncoderConfig.paper_scale()
        assert cfg.input_size == 256 and cfg.pooled_dim == 2048
        assert cfg.proj_hidden == 512 and cfg.proj_dim == 128


class TestEncode:
    def test_stage_map_shapes(self, encoder_set):
        maps, pooled = encode(encoder_set.f_q.backbone, images(2))
        assert [m.shape for m in maps] == [(2, 32, 32, 32), (2, 32, 16, 16), (2, 64, 8, 8), (2, 128, 4, 4)]
        assert pooled.shape == (2, 128)

    def test_all_zero_image_is_finite(self, encoder_set):
        maps, pooled = encode(encoder_set.f_q.backbone, Tensor(np.zeros((1, 1, 32, 32), np.float32)))
        assert np.isfinite(pooled.numpy()).all()
        assert all(np.isfinite(m.numpy()).all() for m in maps)

    def test_eval_mode_determinism_bitwise(self, encoder_set):
        encoder_set.f_q.eval()
        try:
            x = images(3, seed=1)
            _, p1 = encode(encoder_set.f_q.backbone, x)
            _, p2 = encode(encoder_set.f_q.backbone, x)
            assert np.array_equal(p1.numpy(), p2.numpy())
        finally:
            encoder_set.f_q.train()

    def test_wrong_size_rejected_before_compute(self, encoder_set):
        with pytest.raises(ShapeError):
            encode(encoder_set.f_q.backbone, images(1, size=16))


class TestProjection:
    def test_unit_norm_for_nonzero_inputs(self, encoder_set):
        lat = encoder_set.f_q.latents(images(4, seed=2))
        np.testing.assert_allclose(np.linalg.norm(lat.numpy(), axis=1), 1.0, atol=1e-5)

    def test_desk_dims(self):
        rng = np.random.default_rng(0)
        head = ProjectionHead(128, 64, 32, rng)
        out = project(head, Tensor(rng.normal(size=(3, 128)).astype(np.float32)))
        assert out.shape == (3, 32)
        np.testing.assert_allclose(np.linalg.norm(out.numpy(), axis=1), 1.0, atol=1e-5)

    def test_paper_scale_dims(self):
        rng = np.random.default_rng(1)
        head = ProjectionHead(2048, 512, 128, rng)
        out = project(head, Tensor(rng.normal(size=(2, 2048)).astype(np.float32)))
        assert out.shape == (2, 128)
        np.testing.assert_allclose(np.linalg.norm(out.numpy(), axis=1), 1.0, atol=1e-5)

    def test_degenerate_zero_latent_flagged(self, caplog):
        rng = np.random.default_rng(2)
        head = ProjectionHead(8, 4, 4, rng)
        # zero weights and biases force a zero pre-normalization vector
        for p in head.named_parameters().values():
            p.data = np.zeros_like(p.data)
        with caplog.at_level("WARNING", logger="biview.autograd"):
            out = project(head, Tensor(np.ones((1, 8), np.float32)))
        np.testing.assert_array_equal(out.numpy(), np.zeros((1, 4), np.float32))
        assert any("zero" in r.message for r in caplog.records)


class TestWeightSharing:
    def test_shared_objects_are_identical(self, encoder_set):
        assert encoder_set.f_q is encoder_set.g_q
        assert encoder_set.f_m is encoder_set.g_m

    def test_four_encoders_start_identical(self):
        es = EncoderSet.build(CFG, seed=3, share_query=False, share_momentum=False)
        assert es.f_q is not es.g_q and es.f_m is not es.g_m
        pf = es.f_q.named_parameters()
        for other in (es.g_q, es.f_m, es.g_m):
            po = other.named_parameters()
            assert all(np.array_equal(pf[k].data, po[k].data) for k in pf)

    def test_momentum_gets_no_gradient(self, encoder_set):
        es = encoder_set
        x = images(2, seed=4)
        lat_q = es.f_q.latents(x)
        with ag.no_grad():
            lat_m = es.f_m.latents(x)
        pats = [ViewLatents(y_f1=lat_q[0], y_f2=lat_m.numpy()[0],
                            y_g1=lat_q[1], y_g2=lat_m.numpy()[1], check=False)]
        loss = batch_loss(pats, np.zeros((0, 32), np.float32), ContrastiveConfig())
        loss.backward()
        assert all(p.grad is None for p in es.f_m.named_parameters().values())
        assert any(p.grad is not None for p in es.f_q.named_parameters().values())
        for p in es.f_q.named_parameters().values():
            p.grad = None

    def test_unshared_queries_stay_bitwise_equal_under_identical_updates(self):
        # identical architecture/init and identical gradients keep the two
        # query encoders in lockstep
        es = EncoderSet.build(CFG, seed=5, share_query=False)
        pf = es.f_q.named_parameters()
        pg = es.g_q.named_parameters()
        opt_f = SGD(pf, lr0=0.05, momentum=0.9, weight_decay=1e-4)
        opt_g = SGD(pg, lr0=0.05, momentum=0.9, weight_decay=1e-4)
        rng = np.random.default_rng(6)
        for _ in range(3):
            grads = {k: rng.normal(size=p.data.shape).astype(np.float32) for k, p in pf.items()}
            for k in pf:
                pf[k].grad = grads[k].copy()
                pg[k].grad = grads[k].copy()
            opt_f.step(0.05)
            opt_g.step(0.05)
        assert all(np.array_equal(pf[k].data, pg[k].data) for k in pf)


class TestClassify:
    def test_zero_head_gives_zero_logits(self):
        rng = np.random.default_rng(7)
        head = ClassifierHead(4, rng)
        head.fc.weight.data = np.zeros_like(head.fc.weight.data)
        head.fc.bias.data = np.zeros_like(head.fc.bias.data)
        out = classify(head, Tensor(np.ones((1, 4), np.float32)))
        np.testing.assert_array_equal(out.numpy(), [[0.0, 0.0]])

    def test_identity_weights(self):
        rng = np.random.default_rng(8)
        head = ClassifierHead(2, rng)
        head.fc.weight.data = np.eye(2, dtype=np.float32)
        head.fc.bias.data = np.zeros(2, np.float32)
        out = classify(head, Tensor(np.array([[1.0, 0.0]], np.float32)))
        np.testing.assert_array_equal(out.numpy(), [[1.0, 0.0]])

    def test_softmax_of_zero_logits(self):
        z = np.zeros(2)
        soft = np.exp(z) / np.exp(z).sum()
        np.testing.assert_allclose(soft, [0.5, 0.5])


class TestMnc:
    def test_identical_views_agree(self, encoder_set):
        rng = np.random.default_rng(9)
        head = ClassifierHead(CFG.pooled_dim, rng)
        x = images(2, seed=10)
        lt, ll, lavg = mnc_forward(encoder_set.f_q.backbone, head, x, x)
        np.testing.assert_array_equal(lt.numpy(), ll.numpy())
        np.testing.assert_array_equal(lavg.numpy(), lt.numpy())

    def test_average_is_arithmetic_mean(self, encoder_set):
        rng = np.random.default_rng(11)
        head = ClassifierHead(CFG.pooled_dim, rng)
        lt, ll, lavg = mnc_forward(encoder_set.f_q.backbone, head, images(2, 12), images(2, 13))
        np.testing.assert_allclose(lavg.numpy(), (lt.numpy() + ll.numpy()) / 2, rtol=1e-6)

    def test_swap_invariance_eval_bitwise(self, encoder_set):
        rng = np.random.default_rng(14)
        head = ClassifierHead(CFG.pooled_dim, rng)
        encoder_set.f_q.eval()
        try:
            xt, xl = images(2, 15), images(2, 16)
            _, _, avg1 = mnc_forward(encoder_set.f_q.backbone, head, xt, xl)
            _, _, avg2 = mnc_forward(encoder_set.f_q.backbone, head, xl, xt)
            assert np.array_equal(avg1.numpy(), avg2.numpy())
        finally:
            encoder_set.f_q.train()

    def test_swap_invariance_train_mode(self, encoder_set):
        rng = np.random.default_rng(17)
        head = ClassifierHead(CFG.pooled_dim, rng)
        xt, xl = images(2, 18), images(2, 19)
        _, _, avg1 = mnc_forward(encoder_set.f_q.backbone, head, xt, xl)
        _, _, avg2 = mnc_forward(encoder_set.f_q.backbone, head, xl, xt)
        np.testing.assert_allclose(avg1.numpy(), avg2.numpy(), rtol=1e-4, atol=1e-5)

    def test_missing_view_rejected(self, encoder_set):
        rng = np.random.default_rng(20)
        head = ClassifierHead(CFG.pooled_dim, rng)
        with pytest.raises(DataError):
            mnc_forward(encoder_set.f_q.backbone, head, images(1), None)


class TestSegmentation:
    def test_output_matches_input_spatial_shape(self, encoder_set):
        net = build_segmentation_net(encoder_set.f_q.backbone, np.random.default_rng(21))
        x = images(2, 22)
        logits = net(x)
        assert logits.shape == (2, 1, 32, 32)

    def test_sigmoid_in_unit_interval(self, encoder_set):
        net = build_segmentation_net(encoder_set.f_q.backbone, np.random.default_rng(23))
        probs = ag.sigmoid(net(images(1, 24))).numpy()
        assert probs.min() > 0.0 and probs.max() < 1.0

    def test_single_stage_config_rejected(self):
        es = EncoderSet.build(EncoderConfig(stage_widths=(16,), input_size=8, proj_hidden=8, proj_dim=4), seed=0)
        with pytest.raises(ShapeError):
            build_segmentation_net(es.f_q.backbone, np.random.default_rng(25))


class TestCheckpointFormat:
    def test_round_trip_bitwise(self, tmp_path, encoder_set):
        state = encoder_set.f_q.state_dict()
        path = tmp_path / "enc.ckpt"
        save_tensors(path, state, CFG.fingerprint())
        loaded, fp = load_tensors(path, expect_fingerprint=CFG.fingerprint())
        assert fp == CFG.fingerprint()
        assert set(loaded) == set(state)
        for k in state:
            np.testing.assert_array_equal(loaded[k], state[k])

    def test_fingerprint_mismatch_rejected_unless_overridden(self, tmp_path):
        path = tmp_path / "x.ckpt"
        save_tensors(path, {"w": np.ones(3, np.float32)}, "aaaa")
        with pytest.raises(CheckpointError):
            load_tensors(path, expect_fingerprint="bbbb")
        loaded, fp = load_tensors(path, expect_fingerprint="bbbb", override_fingerprint=True)
        assert fp == "aaaa" and "w" in loaded

    def test_magic_and_truncation_detected(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(CheckpointError):
            load_tensors(path)
        good = tmp_path / "good.ckpt"
        save_tensors(good, {"w": np.ones((2, 2), np.float32)}, "fp")
        blob = good.read_bytes()
        trunc = tmp_path / "trunc.ckpt"
        trunc.write_bytes(blob[:-5])
        with pytest.raises(CheckpointError):
            load_tensors(trunc)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_tensors(tmp_path / "absent.ckpt")

    def test_scalar_and_empty_name_tensors(self, tmp_path):
        path = tmp_path / "s.ckpt"
        save_tensors(path, {"scalar": np.float32(3.5), "empty": np.zeros((0, 4), np.float32)}, "fp")
        loaded, _ = load_tensors(path)
        assert loaded["scalar"].shape == () and float(loaded["scalar"]) == 3.5
        assert loaded["empty"].shape == (0, 4)
