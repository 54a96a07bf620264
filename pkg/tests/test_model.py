import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from psdp import autodiff as ad
from psdp.autodiff import Tape, Tensor
from psdp.model import (
    ConfigError,
    LayerParams,
    Model,
    ModelConfig,
    SequenceLengthError,
    additive_mask,
    causal_mask,
    count_parameters,
    decoder_layer_forward,
    init_params,
    psdp_decoder_outputs,
    psdp_fuse,
    stacked_counterpart,
)
from conftest import randomize
from oracles import central_difference, layer_norm_ref, gelu_ref, relative_error, single_head_attention

TABLE1 = dict(embed_size=768, num_heads=12, head_size=64, hidden_size=768, ffn_size=3072)


def storage_walk(model: Model) -> int:
    """Count allocated float elements by visiting every distinct array once."""
    seen = {}
    for _, t in model.named_parameters():
        seen[id(t.data)] = t.data.size
    return sum(seen.values())


class TestConfig:
    def test_head_product(self):
        with pytest.raises(ConfigError, match="num_heads \\* head_size"):
            ModelConfig(embed_size=8, num_heads=3, head_size=2, hidden_size=8)

    def test_positive_fields(self):
        with pytest.raises(ConfigError):
            ModelConfig(embed_size=8, num_heads=2, head_size=4, hidden_size=8, ffn_size=0)
        with pytest.raises(ConfigError):
            ModelConfig(embed_size=8, num_heads=2, head_size=4, hidden_size=8, max_seq_len=1)


class TestMask:
    def test_single(self):
        assert causal_mask(1).tolist() == [[True]]

    def test_three(self):
        m = causal_mask(3)
        assert [set(np.flatnonzero(row)) for row in m] == [{0}, {0, 1}, {0, 1, 2}]

    def test_masked_weight_vanishes(self):
        scores = np.random.default_rng(0).normal(size=(4, 4)) * 10 + additive_mask(4)
        w = ad.softmax(Tensor(scores)).data
        assert w[~causal_mask(4)].max() < 1e-30

    def test_invalid(self):
        with pytest.raises(ValueError):
            causal_mask(0)


def _layer(cfg, seed) -> LayerParams:
    return randomize(Model(cfg.replace(variant="stacked", num_layers=1), seed=seed), seed).params.layers[0]


class TestDecoderLayer:
    def test_shape(self, tiny_cfg):
        p = _layer(tiny_cfg, 0)
        x = Tensor(np.random.default_rng(1).normal(size=(3, 4, 8)))
        assert decoder_layer_forward(x, p, 2).shape == (3, 4, 8)

    def test_causality(self, tiny_cfg):
        p = _layer(tiny_cfg, 2)
        rng = np.random.default_rng(3)
        x = rng.normal(size=(1, 5, 8))
        base = decoder_layer_forward(Tensor(x), p, 2).data
        for t in range(5):
            y = x.copy()
            y[0, t] += rng.normal(size=8)
            out = decoder_layer_forward(Tensor(y), p, 2).data
            assert np.abs(out[0, :t] - base[0, :t]).max(initial=0) < 1e-12
            assert np.abs(out[0, t:] - base[0, t:]).max() > 1e-6

    def test_single_head_matches_hand_rolled(self):
        cfg = ModelConfig(embed_size=6, num_heads=1, head_size=6, hidden_size=6, ffn_size=10,
                          num_layers=1, max_seq_len=5, vocab_size=7, variant="stacked")
        p = _layer(cfg, 4)
        x = np.random.default_rng(5).normal(size=(5, 6))
        d = {k: v.data for k, v in vars(p).items()}
        attn = single_head_attention(x, d["w_q"], d["b_q"], d["w_k"], d["b_k"], d["w_v"], d["b_v"], d["w_o"], d["b_o"])
        a = layer_norm_ref(x + attn, d["ln1_g"], d["ln1_b"])
        ffn = gelu_ref(a @ d["w_1"] + d["b_1"]) @ d["w_2"] + d["b_2"]
        expected = layer_norm_ref(a + ffn, d["ln2_g"], d["ln2_b"])
        got = decoder_layer_forward(Tensor(x[None]), p, 1).data[0]
        assert np.abs(got - expected).max() < 1e-10

    def test_shape_mismatch(self, tiny_cfg):
        with pytest.raises(ad.ShapeError):
            decoder_layer_forward(Tensor(np.zeros((1, 3, 6))), _layer(tiny_cfg, 0), 2)


class TestForward:
    @pytest.mark.parametrize("variant", ["psdp", "stacked"])
    def test_shape(self, tiny_cfg, variant):
        model = Model(tiny_cfg.replace(variant=variant), seed=0)
        ids = np.random.default_rng(0).integers(0, 11, size=(2, 5))
        assert model(ids).shape == (2, 5, 11)

    @pytest.mark.parametrize("variant", ["psdp", "stacked"])
    def test_too_long(self, tiny_cfg, variant):
        with pytest.raises(SequenceLengthError):
            Model(tiny_cfg.replace(variant=variant))(np.zeros((1, 6), dtype=int))

    @pytest.mark.parametrize("variant", ["psdp", "stacked"])
    def test_causality(self, tiny_cfg, variant):
        model = randomize(Model(tiny_cfg.replace(variant=variant)), 7)
        rng = np.random.default_rng(8)
        ids = rng.integers(0, 11, size=(1, 5))
        base = model.logits(ids)
        for t in range(5):
            other = ids.copy()
            other[0, t] = (other[0, t] + 1 + rng.integers(0, 10)) % 11
            diff = np.abs(model.logits(other) - base)[0]
            assert diff[:t].max(initial=0) < 1e-12
            assert diff[t].max() > 0

    def test_symmetric_pair(self, tiny_cfg):
        model = randomize(Model(tiny_cfg), 9)
        p = model.params
        for (_, a), (_, b) in zip(p.decoder_a.named("a"), p.decoder_b.named("b")):
            b.data = a.data.copy()
        p.w_p.data = np.vstack([np.eye(8), np.eye(8)]) / 2
        p.b_p.data = np.zeros(8)
        ids = np.random.default_rng(10).integers(0, 11, size=(2, 5))
        out_a, out_b = psdp_decoder_outputs(ids, p, tiny_cfg)
        np.testing.assert_array_equal(out_a.data, out_b.data)
        fused = ad.concat([out_a, out_b]).data @ p.w_p.data
        np.testing.assert_allclose(fused, out_a.data, atol=1e-15)
        expected = layer_norm_ref(2 * out_a.data, p.lnf_g.data, p.lnf_b.data)
        np.testing.assert_allclose(psdp_fuse(out_a, out_b, p).data, expected, atol=1e-12)

    def test_single_layer_stack_is_layer_plus_head(self, tiny_cfg):
        cfg = tiny_cfg.replace(variant="stacked", num_layers=1)
        model = randomize(Model(cfg), 11)
        p = model.params
        ids = np.random.default_rng(12).integers(0, 11, size=(2, 4))
        x = p.tok_emb.data[ids] + p.pos_emb.data[:4]
        h = decoder_layer_forward(Tensor(x), p.layers[0], cfg.num_heads).data
        assert np.abs(model.logits(ids) - h @ p.tok_emb.data.T).max() < 1e-12

    def test_no_dropout(self, tiny_cfg):
        model = randomize(Model(tiny_cfg), 13)
        ids = np.random.default_rng(14).integers(0, 11, size=(2, 5))
        assert np.array_equal(model.logits(ids), model.logits(ids))

    def test_tied_head(self, tiny_cfg):
        model = randomize(Model(tiny_cfg), 15)
        ids = np.array([[1, 2, 3]])
        base = model.logits(ids)
        model.params.tok_emb.data[3] += 0.5
        changed = model.logits(ids)
        # column 3 changes at position 0, which never sees token 3 as input
        assert np.abs(changed[0, 0, 3] - base[0, 0, 3]) > 1e-6
        assert np.abs(np.delete(changed[0, 0], 3) - np.delete(base[0, 0], 3)).max() < 1e-12
        # position 2 reads token 3, so its whole representation moves
        assert np.abs(np.delete(changed[0, 2], 3) - np.delete(base[0, 2], 3)).max() > 1e-6


class TestSharing:
    def test_decoders_have_distinct_storage(self, tiny_cfg):
        p = init_params(tiny_cfg, 0)
        for (_, a), (_, b) in zip(p.decoder_a.named("a"), p.decoder_b.named("b")):
            assert a is not b and not np.shares_memory(a.data, b.data)

    def test_one_layer_set_per_decoder(self, tiny_cfg):
        for n in (1, 3, 6):
            assert Model(tiny_cfg.replace(num_layers=n)).num_parameters() == count_parameters(tiny_cfg)["total"]

    def test_shared_weight_gradient_sums_applications(self, tiny_cfg):
        cfg = tiny_cfg.replace(num_layers=3)
        model = randomize(Model(cfg), 16)
        ids = np.random.default_rng(17).integers(0, 11, size=(2, 5))
        targets = np.random.default_rng(18).integers(0, 11, size=(2, 5))
        w = model.params.decoder_a.w_q
        with Tape() as tape:
            loss = ad.cross_entropy(model(ids), targets)
        ad.backward(tape, loss)
        tape_grad = w.grad[2, 5]
        numeric = central_difference(lambda: float(ad.cross_entropy(model(ids), targets).data),
                                     w.data, indices=[(2, 5)])[2, 5]
        assert relative_error(tape_grad, numeric) < 1e-4


class TestCounts:
    def test_table1_stacked(self):
        c = count_parameters(ModelConfig(**TABLE1, num_layers=12, variant="stacked"))
        assert c["per_layer"] == 7_087_872
        assert c["total_excluding_embeddings"] == 85_054_464

    def test_table1_psdp(self):
        cfg = ModelConfig(**TABLE1, num_layers=6, variant="psdp")
        c = count_parameters(cfg)
        assert c["decoders"] == 14_175_744
        assert c["mapping_weight"] == 1_179_648
        stacked = count_parameters(stacked_counterpart(cfg))["decoders"]
        assert round(100 * c["decoders"] / stacked, 2) == 16.67

    def test_degenerate_config_storage_walk(self):
        for variant in ("psdp", "stacked"):
            cfg = ModelConfig(embed_size=2, num_heads=1, head_size=2, hidden_size=2, ffn_size=4,
                              num_layers=1, max_seq_len=2, vocab_size=3, variant=variant)
            assert count_parameters(cfg)["total"] == storage_walk(Model(cfg))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 9), st.integers(1, 4),
           st.integers(2, 6), st.integers(1, 12), st.sampled_from(["psdp", "stacked"]))
    def test_storage_agreement(self, heads, head_size, ffn, layers, seq, vocab, variant):
        e = heads * head_size
        cfg = ModelConfig(embed_size=e, num_heads=heads, head_size=head_size, hidden_size=e, ffn_size=ffn,
                          num_layers=layers, max_seq_len=seq, vocab_size=vocab, variant=variant)
        assert count_parameters(cfg)["total"] == storage_walk(Model(cfg))


class TestInit:
    def test_deterministic(self, tiny_cfg):
        a, b = Model(tiny_cfg, seed=3), Model(tiny_cfg, seed=3)
        for (_, x), (_, y) in zip(a.named_parameters(), b.named_parameters()):
            assert np.array_equal(x.data, y.data)

    def test_norm_gains_and_biases(self, tiny_cfg):
        for name, t in Model(tiny_cfg).named_parameters():
            if name.endswith("_g"):
                assert np.all(t.data == 1.0)
            elif name.endswith(("b_q", "b_k", "b_v", "b_o", "b_1", "b_2", "b_p")) or name.endswith("_b"):
                assert np.all(t.data == 0.0)

    def test_weight_statistics(self):
        cfg = ModelConfig(embed_size=768, num_heads=12, head_size=64, hidden_size=768, ffn_size=4,
                          num_layers=1, max_seq_len=2, vocab_size=2)
        w = init_params(cfg, seed=0).decoder_a.w_q.data
        assert w.shape == (768, 768)
        assert abs(w.mean()) < 0.002
        assert abs(w.std() - 0.02) < 0.002
