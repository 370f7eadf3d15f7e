import math

import numpy as np
import pytest

import mettle.backbone as bb
from mettle.backbone import (
    AdapterConfig,
    AdapterSet,
    Backbone,
    BackboneConfig,
    LayerParams,
    ModalityInput,
    Tower,
    encoder_layer,
    patchify,
)
from mettle.tensorcore import (
    ComputeGraph,
    Rng,
    ShapeError,
    Tensor,
    constant,
    parameter,
    reduce_mean,
    zeros,
)

TINY = BackboneConfig(
    stages=2, layers_per_stage=(1, 1), base_dim=8, heads=2, mlp_ratio=2,
    visual=ModalityInput(16, 16, 3, 4), audio=ModalityInput(8, 8, 1, 4),
)


def zero_layer_params(d, hidden):
    z = lambda *s: constant(np.zeros(s))
    return LayerParams(
        ln1_g=z(d), ln1_b=z(d), wq=z(d, d), wk=z(d, d), wv=z(d, d),
        wo=z(d, d), bo=z(d), ln2_g=z(d), ln2_b=z(d),
        w1=z(d, hidden), b1=z(hidden), w2=z(hidden, d), b2=z(d),
    )


def rand_layer_params(rng, d, hidden, tag="backbone"):
    def w(key, shape):
        return Tensor(rng.derive(key).xavier_uniform(shape), tag=tag)
    return LayerParams(
        ln1_g=Tensor(np.ones(d)), ln1_b=w("l1b", (d,)),
        wq=w("wq", (d, d)), wk=w("wk", (d, d)), wv=w("wv", (d, d)),
        wo=w("wo", (d, d)), bo=w("bo", (d,)),
        ln2_g=Tensor(np.ones(d)), ln2_b=w("l2b", (d,)),
        w1=w("w1", (d, hidden)), b1=w("b1", (hidden,)),
        w2=w("w2", (hidden, d)), b2=w("b2", (d,)),
    )


class TestPatchify:
    def test_token_count(self):
        x = constant(np.ones((8, 8, 1)))
        w = constant(np.eye(16))
        out = patchify(x, 4, w)
        assert out.shape == (4, 16)

    def test_zero_input_zero_tokens(self):
        x = zeros((8, 8, 2))
        w = constant(Rng(0).xavier_uniform((32, 5)))
        assert np.array_equal(patchify(x, 4, w).data, np.zeros((4, 5)))

    def test_matches_manual_patch_extraction(self):
        rng = Rng(0)
        x = rng.normal((8, 8, 2))
        w = rng.xavier_uniform((2 * 4 * 4, 3))
        out = patchify(constant(x), 4, constant(w))
        # oracle: explicit loops over the four patches
        expect = np.zeros((4, 3))
        i = 0
        for pi in range(2):
            for pj in range(2):
                patch = x[pi * 4:(pi + 1) * 4, pj * 4:(pj + 1) * 4, :].reshape(-1)
                expect[i] = patch @ w
                i += 1
        assert np.allclose(out.data, expect, atol=1e-12)

    def test_divisibility_error(self):
        with pytest.raises(ShapeError):
            patchify(zeros((9, 8, 1)), 4, constant(np.eye(16)))


class TestEncoderLayer:
    def test_zero_weights_is_identity(self):
        x = constant(Rng(1).normal((5, 4)))
        out = encoder_layer(x, zero_layer_params(4, 8), heads=2)
        assert np.array_equal(out.data, x.data)

    def test_single_token_attention_weight_is_one(self):
        # with N=1 the softmax weight is exactly 1: attn output == v row
        d = 4
        rng = Rng(2)
        p = rand_layer_params(rng, d, 8)
        x = constant(rng.normal((1, d)))
        out = encoder_layer(x, p, heads=1)
        xd = x.data
        mu = xd.mean(-1, keepdims=True)
        xc = xd - mu
        h = (xc / np.sqrt((xc ** 2).mean(-1, keepdims=True) + 1e-5)) + p.ln1_b.data
        v = h @ p.wv.data  # probs == [[1.0]]
        x1 = xd + v @ p.wo.data + p.bo.data
        mu2 = x1.mean(-1, keepdims=True)
        xc2 = x1 - mu2
        h2 = (xc2 / np.sqrt((xc2 ** 2).mean(-1, keepdims=True) + 1e-5)) + p.ln2_b.data
        pre = h2 @ p.w1.data + p.b1.data
        act = pre * 0.5 * (1 + np.vectorize(math.erf)(pre / math.sqrt(2)))
        expect = x1 + act @ p.w2.data + p.b2.data
        assert np.allclose(out.data, expect, atol=1e-10)

    def test_matches_straight_line_oracle(self):
        d, n = 4, 3
        rng = Rng(3)
        p = rand_layer_params(rng, d, 8)
        x = rng.normal((n, d))
        out = encoder_layer(constant(x), p, heads=1)

        def ln(a, g, b):
            mu = a.mean(-1, keepdims=True)
            ac = a - mu
            return g * (ac / np.sqrt((ac ** 2).mean(-1, keepdims=True) + 1e-5)) + b

        h = ln(x, p.ln1_g.data, p.ln1_b.data)
        q, k, v = h @ p.wq.data, h @ p.wk.data, h @ p.wv.data
        logits = q @ k.T / math.sqrt(d)
        e = np.exp(logits - logits.max(-1, keepdims=True))
        probs = e / e.sum(-1, keepdims=True)
        x1 = x + (probs @ v) @ p.wo.data + p.bo.data
        h2 = ln(x1, p.ln2_g.data, p.ln2_b.data)
        pre = h2 @ p.w1.data + p.b1.data
        act = pre * 0.5 * (1 + np.vectorize(math.erf)(pre / math.sqrt(2)))
        expect = x1 + act @ p.w2.data + p.b2.data
        assert np.allclose(out.data, expect, atol=1e-10)

    def test_dim_heads_mismatch(self):
        with pytest.raises(ShapeError):
            encoder_layer(zeros((2, 5)), zero_layer_params(5, 10), heads=2)


class TestFrozenForward:
    def test_shapes_follow_schedule(self):
        b = Backbone(TINY, Rng(0))
        x = constant(Rng(1).normal((2, 16, 16, 3)))
        a = constant(Rng(2).normal((2, 8, 8, 1)))
        fv, fa = b.forward_frozen(x, a)
        assert len(fv.layers) == TINY.num_layers
        assert fv.layers[0].shape == (2, 16, 8)
        assert fv.layers[1].shape == (2, 4, 16)
        assert fa.layers[0].shape == (2, 4, 8)
        assert fa.layers[1].shape == (2, 1, 16)
        assert [t.shape[-1] for t in fv.stages] == [8, 16]

    def test_default_config_dims(self):
        cfg = BackboneConfig()
        assert [cfg.dim(s) for s in range(4)] == [32, 64, 128, 256]
        assert cfg.num_layers == 8
        # token counts drop 4x per merge
        ns = [cfg.tokens_at(cfg.visual, s) for s in range(4)]
        assert ns == [256, 64, 16, 4]

    def test_pure_function_of_seed_and_input(self):
        x = Rng(5).normal((1, 16, 16, 3))
        a = Rng(6).normal((1, 8, 8, 1))
        outs = []
        for _ in range(2):
            b = Backbone(TINY, Rng(42))
            fv, fa = b.forward_frozen(constant(x), constant(a))
            outs.append((fv.layers[-1].data, fa.layers[-1].data))
        assert np.array_equal(outs[0][0], outs[1][0])
        assert np.array_equal(outs[0][1], outs[1][1])

    def test_frozen_retains_nothing_and_gets_no_gradient(self):
        b = Backbone(TINY, Rng(0))
        x = constant(Rng(1).normal((1, 16, 16, 3)))
        w = parameter(Rng(2).xavier_uniform((16, 2)), tag="adaptation")
        with ComputeGraph() as g:
            fv = b.visual.forward_frozen(x)
            loss = reduce_mean(bbmm(fv.layers[-1], w), axes=(0, 1, 2))
        grads = g.backward(loss)
        assert g.ledger_report().retained_bytes["backbone"] == 0
        backbone_ids = {t.tid for t in b.named_params().values()}
        assert backbone_ids.isdisjoint(grads.tensor_ids())
        assert all(t.tag == "data" and not t.requires_grad for t in fv.layers)

    def test_shared_weights_share_layer_tensors(self):
        cfg = BackboneConfig(
            stages=2, layers_per_stage=(1, 1), base_dim=8, heads=2,
            visual=ModalityInput(16, 16, 3, 4), audio=ModalityInput(8, 8, 1, 4),
            shared_weights=True)
        b = Backbone(cfg, Rng(0))
        assert b.visual.layers[0].wq is b.audio.layers[0].wq
        assert b.visual.embed is not b.audio.embed


def bbmm(x, w):
    from mettle.tensorcore import matmul
    return matmul(x, w)


class TestAdapters:
    def _setup(self, cfg=TINY, seed=0):
        b = Backbone(cfg, Rng(seed))
        adapters = AdapterSet(cfg, AdapterConfig(bottleneck_rank=4), Rng(seed + 1), "visual")
        x = constant(Rng(7).normal((1,) + (cfg.visual.height, cfg.visual.width,
                                           cfg.visual.channels)))
        return b, adapters, x

    def test_zero_init_up_matches_frozen_values_but_retains(self):
        b, adapters, x = self._setup()
        frozen = b.visual.forward_frozen(x)
        with ComputeGraph() as g:
            feats = b.visual.forward_with_adapters(x, adapters)
            loss = reduce_mean(feats.layers[-1], axes=(0, 1, 2))
        for got, want in zip(feats.layers, frozen.layers):
            assert np.allclose(got.data, want.data, atol=1e-12)
        assert g.ledger_report().retained_bytes["backbone"] > 0
        grads = g.backward(loss)
        for name, p in adapters.named_params().items():
            assert grads.get(p) is not None, name

    def test_retention_grows_with_depth(self):
        retained = {}
        for depth, lps in ((2, (1, 1)), (4, (2, 2))):
            cfg = BackboneConfig(
                stages=2, layers_per_stage=lps, base_dim=8, heads=2,
                visual=ModalityInput(16, 16, 3, 4), audio=ModalityInput(8, 8, 1, 4))
            b = Backbone(cfg, Rng(0))
            adapters = AdapterSet(cfg, AdapterConfig(4), Rng(1), "visual")
            x = constant(Rng(7).normal((1, 16, 16, 3)))
            with ComputeGraph() as g:
                feats = b.visual.forward_with_adapters(x, adapters)
                reduce_mean(feats.layers[-1], axes=(0, 1, 2))
            retained[depth] = g.ledger_report().retained_bytes["backbone"]
        assert retained[4] > retained[2] > 0

    def test_single_layer_retention_hand_count(self):
        # one layer, one adapter, input without grad: the only backbone-tagged
        # tensor any backward needs is the LN2 output consumed by the adapter
        d, r, n = 8, 4, 4
        rng = Rng(9)
        p = rand_layer_params(rng, d, 2 * d)
        down_w = parameter(rng.xavier_uniform((d, r)), tag="adaptation")
        down_b = parameter(np.zeros(r), tag="adaptation")
        up_w = parameter(np.zeros((r, d)), tag="adaptation")
        up_b = parameter(np.zeros(d), tag="adaptation")
        x = constant(rng.normal((n, d)))

        from mettle.tensorcore import linear, relu

        with ComputeGraph() as g:
            with g.tag("backbone"):
                def adapter(h):
                    with g.tag("adaptation"):
                        return linear(relu(linear(h, down_w, down_b)), up_w, up_b)
                out = encoder_layer(x, p, heads=1, adapter=adapter)
            loss = reduce_mean(out, axes=(0, 1))
        led = g.ledger_report()
        width = 8
        assert led.retained_bytes["backbone"] == n * d * width          # LN2 output
        expected_adapt = n * r * width + n * r * width + r * d * width  # down, relu, up_w
        assert led.retained_bytes["adaptation"] == expected_adapt
        g.backward(loss)

    def test_negative_control_unfrozen_layer_is_recorded(self):
        b, _, x = self._setup()
        b.visual.unfreeze_layer(1)
        w = parameter(Rng(3).xavier_uniform((16, 2)), tag="adaptation")
        with ComputeGraph() as g:
            fv = b.visual.forward_frozen(x)
            loss = reduce_mean(bbmm(fv.layers[-1], w), axes=(0, 1, 2))
        grads = g.backward(loss)
        assert g.ledger_report().retained_bytes["backbone"] > 0
        thawed = [t for t in b.visual.named_params().values() if t.requires_grad]
        assert thawed and any(grads.get(t) is not None for t in thawed)


class TestWeightFile:
    def test_round_trip_preserves_frozen_forward(self, tmp_path):
        b = Backbone(TINY, Rng(0))
        path = tmp_path / "weights.mtlw"
        b.save_weights(path)
        x = constant(Rng(1).normal((1, 16, 16, 3)))
        want = b.visual.forward_frozen(x).layers[-1].data

        b2 = Backbone(TINY, Rng(999))
        b2.load_weights(path)
        got = b2.visual.forward_frozen(x).layers[-1].data
        # stored as float32 interchange, so agreement is float32-level
        assert np.allclose(got, want, atol=1e-5)

    def test_shape_mismatch_rejected(self, tmp_path):
        b = Backbone(TINY, Rng(0))
        path = tmp_path / "weights.mtlw"
        b.save_weights(path)
        other = BackboneConfig(
            stages=2, layers_per_stage=(1, 1), base_dim=16, heads=2,
            visual=ModalityInput(16, 16, 3, 4), audio=ModalityInput(8, 8, 1, 4))
        with pytest.raises(Exception):
            Backbone(other, Rng(0)).load_weights(path)


class TestConfigValidation:
    def test_grid_divisibility(self):
        with pytest.raises(ValueError):
            BackboneConfig(stages=4, layers_per_stage=(1, 1, 1, 1), base_dim=32,
                           visual=ModalityInput(16, 16, 3, 4),
                           audio=ModalityInput(8, 8, 1, 4))  # audio grid 2x2 < 8

    def test_heads_divide_dims(self):
        with pytest.raises(ValueError):
            BackboneConfig(stages=2, layers_per_stage=(1, 1), base_dim=6, heads=4,
                           visual=ModalityInput(16, 16, 3, 4),
                           audio=ModalityInput(16, 16, 1, 4))
