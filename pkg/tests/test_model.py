import numpy as np
import pytest

from easwin.attention import TemporalAttention
from easwin.model import (
    ConfigError,
    EASwin,
    EmbeddingBatch,
    HeadConfig,
    SwinBlock,
    pool_tokens,
    predict,
    tubelets,
)
from easwin.tensor import ContractError, DimensionError, Tensor, verification_mode

TINY = dict(d_model=8, heads=2, w_t=2, w_s=2, depth_t=1, depth_s=1, frames=4)


def batch(b=2, t=4, s=4, d=6, seed=0, valid=None):
    rng = np.random.default_rng(seed)
    return EmbeddingBatch(z=rng.standard_normal((b, t, s, d)), valid_t=valid, labels=np.arange(b) % 2)


def zero_blocks(model):
    for name, p in model.named_parameters():
        if name.startswith("blocks.") and (".attn.attn.w_" in name or ".mlp." in name):
            p.data[...] = 0


# -- config -----------------------------------------------------------------

def test_base_config_defaults():
    cfg = HeadConfig()
    assert (cfg.d_model, cfg.heads, cfg.w_t, cfg.w_s, cfg.depth_t, cfg.depth_s, cfg.frames) == (512, 8, 4, 4, 2, 2, 16)


@pytest.mark.parametrize(
    "bad",
    [dict(d_model=10, heads=4), dict(w_t=0), dict(pool="max"), dict(head_kind="cnn"), dict(tubelet=0), dict(depth_s=-1)],
)
def test_invalid_config_rejected(bad):
    with pytest.raises(ConfigError):
        HeadConfig(**bad).validate()


def test_tubelet_must_divide_frames():
    model = EASwin(HeadConfig(**TINY, tubelet=3), 6, 4)
    with pytest.raises(ConfigError):
        model(batch())


def test_tubelets_concatenate_consecutive_frames():
    z = np.arange(4 * 1 * 2).reshape(1, 4, 1, 2).astype(float)
    out = tubelets(z, 2)
    assert out.shape == (1, 2, 1, 4)
    np.testing.assert_array_equal(out[0, 0, 0], [0, 1, 2, 3])
    np.testing.assert_array_equal(out[0, 1, 0], [4, 5, 6, 7])


def test_batch_validation():
    with pytest.raises(DimensionError):
        EmbeddingBatch(z=np.ones((2, 4, 4)))
    with pytest.raises(ContractError):
        EmbeddingBatch(z=np.ones((2, 4, 4, 3)), valid_t=np.array([5, 4]))
    with pytest.raises(ContractError):
        EmbeddingBatch(z=np.ones((2, 4, 4, 3)), labels=[0, 2])


# -- forward shapes and determinism -----------------------------------------

def test_base_config_logit_shape():
    model = EASwin(HeadConfig(d_model=64, heads=8), 64, 16, seed=0)
    out = model(batch(2, 16, 16, 64))
    assert out.shape == (2,) and np.isfinite(out.data).all()


def test_same_seed_gives_bit_identical_logits():
    a = EASwin(HeadConfig(**TINY), 6, 4, seed=3)(batch()).data
    b = EASwin(HeadConfig(**TINY), 6, 4, seed=3)(batch()).data
    np.testing.assert_array_equal(a, b)


def test_accepts_every_frame_count_without_reconfiguration():
    model = EASwin(HeadConfig(**TINY), 6, 4)
    for t in (16, 8, 4, 2):
        assert model(batch(t=t)).shape == (2,)


def test_non_square_tokens_use_1d_fallback():
    model = EASwin(HeadConfig(**TINY), 6, 6)
    assert model.blocks.s0.attn.fallback_1d
    assert model(batch(s=6)).shape == (2,)


def test_rejects_mismatched_token_count():
    with pytest.raises(DimensionError):
        EASwin(HeadConfig(**TINY), 6, 4)(batch(s=9))


def test_parameter_names_follow_block_layout():
    names = [n for n, _ in EASwin(HeadConfig(**TINY), 6, 4).named_parameters()]
    assert "blocks.t0.attn.bias.table" in names and "blocks.s0.attn.attn.w_q" in names
    assert "head.query" in names and names[0] == "proj.weight"
    assert len(names) == len(set(names))


def test_shift_alternates_across_blocks():
    model = EASwin(HeadConfig(**TINY, use_shift=True), 6, 4)
    assert [model._shifted(i) for i in range(4)] == [False, True, False, True]
    model = EASwin(HeadConfig(**TINY, use_shift=False), 6, 4)
    assert not any(model._shifted(i) for i in range(4))


# -- identities and equivalences --------------------------------------------

def test_zero_weight_block_is_identity():
    rng = np.random.default_rng(0)
    with verification_mode():
        attn = TemporalAttention(8, 2, 2, rng)
        block = SwinBlock(attn, 8, rng)
        for p in [attn.attn.w_q, attn.attn.w_k, attn.attn.w_v, attn.attn.w_o, *block.mlp.parameters()]:
            p.data[...] = 0
        x = rng.standard_normal((3, 5, 8))
        np.testing.assert_array_equal(block(Tensor(x), True).data, x)


def test_zero_blocks_reduce_model_to_pool_of_projection():
    with verification_mode():
        model = EASwin(HeadConfig(**TINY), 6, 4, seed=1)
        zero_blocks(model)
        b = batch()
        got = model(b).data
        x = model.proj(Tensor(b.z)).reshape(2, 16, 8)
        want = model.head(x, np.ones((2, 16), dtype=bool)).reshape(2).data
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_zero_query_attention_pooling_equals_mean_pooling():
    rng = np.random.default_rng(2)
    tokens = Tensor(rng.standard_normal((3, 7, 4)), dtype=np.float64)
    valid = np.arange(7)[None, :] < np.array([[7], [3], [1]])
    att = pool_tokens(tokens, valid, "attention", Tensor(np.zeros(4), dtype=np.float64)).data
    avg = pool_tokens(tokens, valid, "mean").data
    np.testing.assert_allclose(att, avg, atol=1e-12)


def test_invalid_frames_do_not_affect_logits():
    model = EASwin(HeadConfig(**TINY), 6, 4, seed=0)
    b = batch(valid=np.array([4, 2]))
    z2 = b.z.copy()
    z2[1, 2:] = 123.0
    a = model(b).data
    c = model(EmbeddingBatch(z=z2, valid_t=b.valid_t, labels=b.labels)).data
    np.testing.assert_allclose(a, c, atol=1e-5)


def test_mlp_baseline_equals_masked_mean_then_mlp():
    with verification_mode():
        model = EASwin(HeadConfig(**TINY, head_kind="mlp_baseline"), 6, 4, seed=0)
        b = batch()
        x = model.proj(Tensor(b.z)).data.reshape(2, 16, 8).mean(axis=1)
        want = model.mlp(Tensor(x)).data.reshape(2)
        np.testing.assert_allclose(model(b).data, want, atol=1e-12)
    assert not hasattr(model, "blocks")


def test_joint_attention_variant_runs_and_has_no_bias_tables():
    model = EASwin(HeadConfig(**TINY, joint_attention=True), 6, 4)
    assert model.blocks.order == ["j0", "j1"]
    assert not any(n.endswith(".table") for n, _ in model.named_parameters())
    assert model(batch()).shape == (2,)


# -- prediction -------------------------------------------------------------

def test_predict_probability_and_threshold():
    p, c = predict(np.array([2.0, 0.0, -1.0]))
    assert p[0] == pytest.approx(0.8808, abs=1e-4)
    assert p[1] == 0.5 and c.tolist() == [1, 1, 0]


def test_predict_is_stable_for_extreme_logits():
    p, _ = predict(np.array([1000.0, -1000.0]))
    assert p.tolist() == [1.0, 0.0]
