import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import minmax_group, model_params, straight_line_forward
from rotquant import autodiff as ad
from rotquant.experiments import build_model, build_setup
from rotquant.linalg import make_rng, random_orthogonal, sylvester_hadamard
from rotquant.metrics import snr_db
from rotquant.model import (
    CalibrationSet,
    FrozenNoise,
    ModelConfig,
    ModelError,
    NoiseRecorder,
    QuantSites,
    Rotations,
    calibration_loss,
    fold_rmsnorm,
    forward,
    init_model,
    kv_cache_quant_forward,
    loss_and_grad_rotations,
    plant_key_outliers,
    site_names,
)
from rotquant.quant import QuantSpec, quant_dequant
from rotquant.rotate import RotationSet, make_rotation_set, merge_rotations


def tokens_for(cfg, seed, batch=3, length=None):
    return make_rng(seed, 9).integers(0, cfg.vocab, (batch, length or cfg.max_seq))


def random_rms(model, rng):
    m = model.copy()
    for layer in m.layers:
        layer.rms1 = rng.uniform(0.5, 2.0, layer.rms1.shape)
        layer.rms2 = rng.uniform(0.5, 2.0, layer.rms2.shape)
    m.final_rms = rng.uniform(0.5, 2.0, m.final_rms.shape)
    return m


class TestConfig:
    def test_non_power_of_two_rejected(self):
        with pytest.raises(ModelError, match="power of two"):
            ModelConfig(d_model=48, n_heads=4)

    def test_heads_must_divide(self):
        with pytest.raises(ModelError, match="divisible"):
            ModelConfig(d_model=64, n_heads=3)

    def test_d_head(self):
        assert ModelConfig(d_model=64, n_heads=4).d_head == 16


class TestForward:
    def test_shapes_and_capture(self, tiny_config, rng):
        model = init_model(tiny_config, rng)
        logits, cap = forward(model, tokens_for(tiny_config, 0), capture=["layers.0.attn_in", "layers.1.k"])
        assert logits.shape == (3, tiny_config.max_seq, tiny_config.vocab)
        assert cap["layers.0.attn_in"].shape == (3, tiny_config.max_seq, tiny_config.d_model)
        assert cap["layers.1.k"].shape == (3, tiny_config.n_heads, tiny_config.max_seq, tiny_config.d_head)

    def test_unknown_capture_rejected(self, tiny_config, rng):
        with pytest.raises(ModelError, match="capture"):
            forward(init_model(tiny_config, rng), tokens_for(tiny_config, 0), capture=["layers.9.nope"])

    def test_bad_tokens_rejected(self, tiny_config, rng):
        model = init_model(tiny_config, rng)
        with pytest.raises(ModelError):
            forward(model, np.array([[tiny_config.vocab]]))
        with pytest.raises(ModelError, match="max_seq"):
            forward(model, np.zeros((1, tiny_config.max_seq + 1), dtype=int))

    def test_sites_cover_every_layer(self, tiny_config):
        names = site_names(tiny_config)
        assert len(names) == tiny_config.n_layers * 13
        assert "layers.1.down_in" in names

    def test_off_sites_are_exact_noop(self, tiny_config, rng):
        model = init_model(tiny_config, rng)
        toks = tokens_for(tiny_config, 1)
        assert np.array_equal(forward(model, toks)[0], forward(model, toks, QuantSites.off())[0])

    @pytest.mark.parametrize("seed", range(5))
    def test_causality(self, tiny_config, seed):
        model = init_model(tiny_config, make_rng(seed), embed_std=1.0)
        toks = tokens_for(tiny_config, seed, batch=1)
        t = tiny_config.max_seq // 2
        edited = toks.copy()
        edited[0, t + 1:] = (edited[0, t + 1:] + 1) % tiny_config.vocab
        sites = QuantSites.wakv(4, 4, 4)
        a, b = forward(model, toks, sites)[0], forward(model, edited, sites)[0]
        assert np.array_equal(a[:, : t + 1], b[:, : t + 1])

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_straight_line_oracle_w4a4(self, seed):
        cfg = ModelConfig(vocab=16, d_model=16, n_layers=1, n_heads=2, d_ffn=32, max_seq=8)
        model = random_rms(init_model(cfg, make_rng(seed), embed_std=1.0), make_rng(seed, 1))
        toks = tokens_for(cfg, seed, batch=1)[0]
        got = forward(model, toks[None], QuantSites.wakv(4, 4, None))[0][0]
        want = straight_line_forward(model_params(model), toks, cfg.to_dict(), wbits=4, abits=4)
        assert np.max(np.abs(got - want)) < 1e-9

    def test_matches_straight_line_oracle_full_precision_two_layers(self):
        cfg = ModelConfig(vocab=16, d_model=16, n_layers=2, n_heads=4, d_ffn=32, max_seq=8)
        model = random_rms(init_model(cfg, make_rng(3), embed_std=1.0), make_rng(4))
        toks = tokens_for(cfg, 3, batch=1)[0]
        want = straight_line_forward(model_params(model), toks, cfg.to_dict())
        assert np.max(np.abs(forward(model, toks[None])[0][0] - want)) < 1e-9


class TestInvariance:
    @given(st.integers(0, 2**31), st.sampled_from(["random_orthogonal", "random_hadamard"]))
    @settings(max_examples=15)
    def test_merged_rotation_preserves_logits(self, seed, kind):
        cfg = ModelConfig(vocab=32, d_model=16, n_layers=2, n_heads=2, d_ffn=32, max_seq=8)
        model = fold_rmsnorm(random_rms(init_model(cfg, make_rng(seed), embed_std=1.0), make_rng(seed, 1)))
        rot = make_rotation_set(cfg, kind, make_rng(seed, 2))
        toks = tokens_for(cfg, seed)
        base = forward(model, toks)[0]
        assert np.max(np.abs(forward(merge_rotations(model, rot), toks)[0] - base)) < 1e-9

    @pytest.mark.parametrize("r3,r4", [(True, False), (False, True), (True, True)])
    def test_online_rotations_preserve_logits(self, tiny_config, rng, r3, r4):
        model = init_model(tiny_config, rng, embed_std=1.0)
        toks = tokens_for(tiny_config, 2)
        rot = RotationSet(np.eye(tiny_config.d_model), [], r3, r4)
        merged = merge_rotations(model, rot)
        assert np.max(np.abs(forward(merged, toks)[0] - forward(model, toks)[0])) < 1e-9

    def test_on_the_fly_equals_merged(self, tiny_config):
        model = fold_rmsnorm(random_rms(init_model(tiny_config, make_rng(0), embed_std=1.0), make_rng(1)))
        rot = make_rotation_set(tiny_config, "random_hadamard", make_rng(2), r3=True, r4=True)
        toks = tokens_for(tiny_config, 0)
        sites = QuantSites.wakv(None, 4, 4)
        merged = forward(merge_rotations(model, rot), toks, sites)[0]
        fly = forward(model, toks, sites, rot)[0]
        assert np.max(np.abs(merged - fly)) < 1e-9


class TestCalibrationLoss:
    def test_untrained_near_log_vocab(self):
        cfg = ModelConfig(vocab=64, d_model=32, n_layers=2, n_heads=2, d_ffn=64, max_seq=16)
        model = init_model(cfg, make_rng(0))
        calib = CalibrationSet(list(make_rng(0, 1).integers(0, 64, (8, 16))))
        assert abs(calibration_loss(model, calib) - math.log(64)) < 0.1 * math.log(64)

    def test_mean_over_positions_of_mixed_lengths(self, tiny_config, rng):
        model = init_model(tiny_config, rng, embed_std=1.0)
        seqs = [rng.integers(0, tiny_config.vocab, n) for n in (5, 9, 9, 16)]
        total, count = 0.0, 0
        for s in seqs:
            logits = forward(model, s[None, :-1])[0][0]
            logp = logits - np.log(np.sum(np.exp(logits - logits.max(-1, keepdims=True)), -1, keepdims=True)) \
                - logits.max(-1, keepdims=True)
            total += -np.sum(logp[np.arange(len(s) - 1), s[1:]])
            count += len(s) - 1
        assert abs(calibration_loss(model, CalibrationSet(seqs)) - total / count) < 1e-12

    def test_empty_rejected(self, tiny_config, rng):
        with pytest.raises(ModelError):
            calibration_loss(init_model(tiny_config, rng), CalibrationSet([]))

    def test_invariant_under_merged_rotation(self, tiny_config):
        st_ = build_setup(tiny_config, 0, 4, 4, 16)
        rot = make_rotation_set(tiny_config, "random_orthogonal", make_rng(1))
        a = calibration_loss(st_.model, st_.calib)
        b = calibration_loss(merge_rotations(st_.model, rot), st_.calib)
        assert abs(a - b) < 1e-9

    @pytest.mark.slow
    def test_quantized_loss_exceeds_full_precision(self):
        # lightly trained: an untrained model sits at the uniform-loss floor where quantization noise is unbiased
        cfg = ModelConfig(vocab=32, d_model=16, n_layers=2, n_heads=2, d_ffn=32, max_seq=16)
        sites = QuantSites.wakv(4, 4, None)
        wins = 0
        for seed in range(50):
            s = build_setup(cfg, seed, 8, 8, 16, pretrain_steps=30)
            wins += calibration_loss(s.model, s.evalset, sites) >= calibration_loss(s.model, s.evalset)
        assert wins >= 45


class TestKvCache:
    def test_requires_kv_site(self, tiny_config, rng):
        with pytest.raises(ModelError):
            kv_cache_quant_forward(init_model(tiny_config, rng), tokens_for(tiny_config, 0), QuantSites())

    def test_sixteen_bits_close_to_off(self, tiny_config, rng):
        model = init_model(tiny_config, rng, embed_std=1.0)
        toks = tokens_for(tiny_config, 0)
        q = kv_cache_quant_forward(model, toks, QuantSites.wakv(None, None, 16))
        assert np.max(np.abs(q - forward(model, toks)[0])) < 1e-3

    def test_single_head_single_token_hand_oracle(self):
        cfg = ModelConfig(vocab=8, d_model=8, n_layers=1, n_heads=1, d_ffn=16, max_seq=4)
        model = init_model(cfg, make_rng(5), embed_std=1.0)
        tok = 3
        layer = model.layers[0]
        x = model.embedding[tok].copy()
        a = x / math.sqrt(np.mean(x * x) + cfg.rms_eps)
        v = np.array(minmax_group(layer.wv @ a, 4, False))
        # one key only: softmax weight 1, so attention returns the quantized value; RoPE at position 0 is identity
        x = x + layer.wo @ v
        m = x / math.sqrt(np.mean(x * x) + cfg.rms_eps)
        g, u = layer.wgate @ m, layer.wup @ m
        x = x + layer.wdown @ (g / (1 + np.exp(-g)) * u)
        want = model.head_weight @ (x / math.sqrt(np.mean(x * x) + cfg.rms_eps))
        got = kv_cache_quant_forward(model, np.array([[tok]]), QuantSites.wakv(None, None, 4))[0, 0]
        assert np.max(np.abs(got - want)) < 1e-9

    def test_kv_matches_oracle_multi_token(self):
        cfg = ModelConfig(vocab=16, d_model=16, n_layers=1, n_heads=2, d_ffn=32, max_seq=8)
        model = init_model(cfg, make_rng(6), embed_std=1.0)
        toks = tokens_for(cfg, 6, batch=1)[0]
        want = straight_line_forward(model_params(model), toks, cfg.to_dict(), kvbits=4)
        got = kv_cache_quant_forward(model, toks[None], QuantSites.wakv(None, None, 4))[0]
        assert np.max(np.abs(got - want)) < 1e-9

    def test_r3_improves_kv4_snr_on_key_outliers(self):
        cfg = ModelConfig(vocab=32, d_model=32, n_layers=1, n_heads=2, d_ffn=64, max_seq=16)
        sites = QuantSites.wakv(None, None, 4)
        wins = 0
        for seed in range(25):
            model = plant_key_outliers(build_model(cfg, seed), make_rng(seed, 3), scale=10.0)
            toks = tokens_for(cfg, seed, batch=4)
            fp = forward(model, toks)[0]
            plain = kv_cache_quant_forward(model, toks, sites)
            with_r3 = kv_cache_quant_forward(model, toks, sites, RotationSet(np.eye(32), [], True, False))
            wins += snr_db(fp, with_r3) > snr_db(fp, plain)
        assert wins >= 20


class TestFoldRmsnorm:
    def test_all_ones_bit_identical(self, tiny_config, rng):
        model = init_model(tiny_config, rng)
        folded = fold_rmsnorm(model)
        for k, v in model.tensors().items():
            assert np.array_equal(folded.tensors()[k], v)

    def test_constant_two_doubles_columns(self, tiny_config, rng):
        model = init_model(tiny_config, rng, embed_std=1.0)
        model.layers[0].rms1 = np.full(tiny_config.d_model, 2.0)
        folded = fold_rmsnorm(model)
        assert np.array_equal(folded.layers[0].wq, 2 * model.layers[0].wq)
        toks = tokens_for(tiny_config, 0)
        assert np.max(np.abs(forward(folded, toks)[0] - forward(model, toks)[0])) < 1e-10

    @pytest.mark.parametrize("seed", range(10))
    def test_random_scales_preserve_logits(self, tiny_config, seed):
        model = random_rms(init_model(tiny_config, make_rng(seed), embed_std=1.0), make_rng(seed, 1))
        folded = fold_rmsnorm(model)
        assert folded.is_folded()
        toks = tokens_for(tiny_config, seed)
        assert np.max(np.abs(forward(folded, toks)[0] - forward(model, toks)[0])) < 1e-10

    def test_idempotent(self, tiny_config, rng):
        once = fold_rmsnorm(random_rms(init_model(tiny_config, rng), rng))
        twice = fold_rmsnorm(once)
        for k, v in once.tensors().items():
            assert np.array_equal(twice.tensors()[k], v)


def _rotations(cfg, seed):
    return make_rotation_set(cfg, "random_orthogonal", make_rng(seed, 2))


class TestGradients:
    @pytest.mark.parametrize("seed", range(3))
    def test_zero_without_quantization(self, tiny_config, seed):
        s = build_setup(tiny_config, seed, 4, 4, 16)
        rot = _rotations(tiny_config, seed)
        rot.r3_enabled = rot.r4_enabled = True
        _, g1, g2 = loss_and_grad_rotations(s.model, s.calib, QuantSites.off(), rot)
        assert np.max(np.abs(g1)) < 1e-8
        assert max(np.max(np.abs(g)) for g in g2) < 1e-8

    def test_nonzero_with_quantization(self, tiny_config):
        s = build_setup(tiny_config, 0, 4, 4, 16)
        _, g1, g2 = loss_and_grad_rotations(s.model, s.calib, QuantSites.wakv(4, 4, 4), _rotations(tiny_config, 0))
        assert np.max(np.abs(g1)) > 1e-4 and max(np.max(np.abs(g)) for g in g2) > 1e-6

    def test_requires_rotations(self, tiny_config, rng):
        with pytest.raises(ModelError):
            loss_and_grad_rotations(init_model(tiny_config, rng), CalibrationSet([np.arange(4)]), QuantSites(), None)

    @given(st.integers(0, 2**31), st.integers(2, 8))
    @settings(max_examples=25)
    def test_single_linear_closed_form(self, seed, bits):
        r = np.random.default_rng(seed)
        n_out, n_in, n_tok = 5, 8, 6
        w = r.standard_normal((n_out, n_in))
        x = r.standard_normal((n_in, n_tok))  # column layout: one token per column
        rot = random_orthogonal(n_in, r)
        spec = QuantSpec(bits, "symmetric", "per_tensor")

        rv = ad.Var(rot)
        wr = ad.matmul(w, ad.inv(rv))
        qw = ad.straight_through(wr, quant_dequant(ad.value(wr), spec))
        rx = ad.matmul(rv, x)
        qx = ad.straight_through(rx, quant_dequant(ad.value(rx), spec))
        out = ad.matmul(qw, qx)
        ad.backward(out, seed=np.ones(out.shape))

        r_inv = np.linalg.inv(rot)
        qwr = quant_dequant(w @ r_inv, spec)
        qrx = quant_dequant(rot @ x, spec)
        closed = (-np.outer((w @ r_inv).sum(axis=0), (r_inv @ qrx).sum(axis=1))
                  + np.outer(qwr.sum(axis=0), x.sum(axis=1)))
        assert np.max(np.abs(rv.grad - closed)) < 1e-8

    def test_closed_form_vanishes_without_quantizers(self, rng):
        w, x = rng.standard_normal((4, 8)), rng.standard_normal((8, 5))
        rot = random_orthogonal(8, rng)
        r_inv = np.linalg.inv(rot)
        closed = -np.outer((w @ r_inv).sum(0), (r_inv @ rot @ x).sum(1)) + np.outer((w @ r_inv).sum(0), x.sum(1))
        assert np.max(np.abs(closed)) < 1e-12

    @pytest.mark.parametrize("seed", range(2))
    def test_directional_derivative_matches_finite_differences(self, seed):
        cfg = ModelConfig(vocab=32, d_model=16, n_layers=1, n_heads=2, d_ffn=32, max_seq=16)
        s = build_setup(cfg, seed, 4, 4, 16, outlier_channels=1)
        rot = _rotations(cfg, seed)
        sites = QuantSites.wakv(4, 4, None)
        rec = NoiseRecorder()
        calibration_loss(s.model, s.calib, sites, rot, quantizer=rec)
        frozen = FrozenNoise(rec.noise)
        _, g1, g2 = loss_and_grad_rotations(s.model, s.calib, sites, rot, quantizer=frozen)
        r = make_rng(seed, 11)
        eps = 1e-4
        for _ in range(5):
            a1 = r.standard_normal(g1.shape)
            a1 = a1 - a1.T
            a2 = [(lambda z: z - z.T)(r.standard_normal(g.shape)) for g in g2]
            d1 = a1 @ rot.r1
            d2 = [a @ m for a, m in zip(a2, rot.r2)]

            def at(t):
                moved = Rotations(rot.r1 + t * d1, [m + t * d for m, d in zip(rot.r2, d2)])
                return calibration_loss(s.model, s.calib, sites, moved, quantizer=frozen)

            fd = (at(eps) - at(-eps)) / (2 * eps)
            an = np.sum(g1 * d1) + sum(np.sum(g * d) for g, d in zip(g2, d2))
            assert abs(fd - an) <= 0.05 * abs(an) + 1e-10


def test_r4_weight_half_is_wdown_times_hadamard(tiny_config, rng):
    model = fold_rmsnorm(init_model(tiny_config, rng))
    merged = merge_rotations(model, RotationSet(np.eye(tiny_config.d_model), [], False, True))
    h = sylvester_hadamard(tiny_config.d_ffn)
    assert np.allclose(merged.layers[0].wdown, model.layers[0].wdown @ h, atol=1e-15)
    assert merged.online_r4
