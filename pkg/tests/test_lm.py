import numpy as np
import pytest
from hypothesis import given, strategies as st

from pemb import tensor as T
from pemb.errors import ConfigError, ContractError, LengthError, ShapeError
from pemb.lm import (InputSeq, LmConfig, LoraAdapter, decode, decode_batch, init_lm, last_token_pool,
                     lm_head)
from pemb.tensor import Tensor

CFG = LmConfig(vocab_size=16, d_model=8, n_layers=2, n_heads=2, d_ff=16, max_len=12, seed=3)


@pytest.fixture(scope="module")
def params():
    return init_lm(CFG, dtype=np.float32)


def test_init_is_deterministic():
    a, b = init_lm(CFG), init_lm(CFG)
    for name in a:
        assert a[name].data.tobytes() == b[name].data.tobytes()


def test_seeds_differ():
    a = init_lm(CFG)
    b = init_lm(LmConfig(**{**CFG.to_dict(), "seed": 4}))
    assert not np.array_equal(a.E.data, b.E.data)


def test_init_shapes_and_gains(params):
    d, v, h = CFG.d_model, CFG.vocab_size, CFG.d_ff
    assert params.E.shape == (v, d) and params.head.shape == (d, v)
    assert params["pos_emb"].shape == (CFG.max_len, d)
    assert params["blocks.1.w1"].shape == (d, h) and params["blocks.1.w2"].shape == (h, d)
    for name in ("blocks.0.ln1", "blocks.1.ln2", "ln_f"):
        assert np.all(params[name].data == 1.0)


def test_longer_position_table_keeps_other_weights():
    a = init_lm(CFG)
    b = init_lm(LmConfig(**{**CFG.to_dict(), "max_len": 20}))
    assert np.array_equal(a["pos_emb"].data, b["pos_emb"].data[:CFG.max_len])
    assert np.array_equal(a["blocks.0.wq"].data, b["blocks.0.wq"].data)


def test_config_errors():
    with pytest.raises(ConfigError):
        LmConfig(max_len=0)
    with pytest.raises(ConfigError):
        LmConfig(d_model=10, n_heads=4)


def test_single_token_forward_is_finite(params):
    H = decode(params, InputSeq.of([5]))
    assert H.shape == (1, CFG.d_model) and np.isfinite(H.data).all()


@given(st.lists(st.integers(0, 15), min_size=2, max_size=12), st.data())
def test_prefix_property(params, toks, data):
    j = data.draw(st.integers(1, len(toks)))
    full = decode(params, InputSeq.of(toks)).data
    pre = decode(params, InputSeq.of(toks[:j])).data
    np.testing.assert_allclose(pre, full[:j], atol=1e-5)


def test_prefix_property_with_vector_positions(params, rng):
    vec = Tensor(rng.standard_normal((3, CFG.d_model)).astype(np.float32))
    full = decode(params, InputSeq.of([1, 2], vec, [7, 8])).data
    pre = decode(params, InputSeq.of([1, 2], Tensor(vec.data[:2]))).data
    np.testing.assert_allclose(pre, full[:4], atol=1e-5)


def test_zero_vectors_reduce_to_positional_input():
    cfg = LmConfig(**{**CFG.to_dict(), "n_layers": 1})
    p = init_lm(cfg, dtype=np.float64)
    n = 5
    H = decode(p, InputSeq.of(Tensor(np.zeros((n, cfg.d_model))))).data
    from pemb.lm import decode_embedded

    ref = decode_embedded(p, Tensor(p["pos_emb"].data[:n].copy())).data
    np.testing.assert_array_equal(H, ref)


def test_vector_positions_optional():
    cfg = LmConfig(**{**CFG.to_dict(), "vector_positions": False})
    p = init_lm(cfg, dtype=np.float64)
    v = Tensor(np.ones((1, cfg.d_model)))
    from pemb.lm import embed_inputs

    x = embed_inputs(p, InputSeq.of([3], v)).data
    np.testing.assert_array_equal(x[1], v.data[0])
    np.testing.assert_array_equal(x[0], p.E.data[3] + p["pos_emb"].data[0])


@pytest.mark.parametrize("rank", [1, 2, 5])
def test_lora_zero_b_is_bit_exact_noop(params, rank):
    lora = LoraAdapter.create(params, rank=rank, alpha=16.0, seed=rank)
    seq = InputSeq.of([1, 4, 9, 2])
    assert decode(params, seq, lora).data.tobytes() == decode(params, seq).data.tobytes()


def test_lora_targets_q_and_v_only(params):
    lora = LoraAdapter.create(params, rank=2)
    assert sorted(lora.factors) == ["blocks.0.wq", "blocks.0.wv", "blocks.1.wq", "blocks.1.wv"]
    A, B = lora.factors["blocks.0.wq"]
    assert A.shape == (2, CFG.d_model) and B.shape == (CFG.d_model, 2)
    assert A.requires_grad and B.requires_grad and not np.any(B.data)


def test_lora_effective_weight(rng):
    p = init_lm(CFG, dtype=np.float64)
    lora = LoraAdapter.create(p, rank=2, alpha=4.0, dtype=np.float64)
    for A, B in lora.factors.values():
        B.data[:] = rng.standard_normal(B.shape)
    merged = init_lm(CFG, dtype=np.float64)
    for name, (A, B) in lora.factors.items():
        merged[name].data = merged[name].data + (4.0 / 2) * B.data @ A.data
    seq = InputSeq.of([3, 1, 4, 1, 5])
    np.testing.assert_allclose(decode(p, seq, lora).data, decode(merged, seq).data, atol=1e-12)


def test_frozen_params_refuse_training(params):
    assert params.frozen and not any(t.requires_grad for _, t in params.named_tensors())
    with pytest.raises(ContractError):
        params.set_trainable()


def test_length_and_shape_errors(params):
    with pytest.raises(LengthError):
        decode(params, InputSeq.of(list(range(13))))
    with pytest.raises(ShapeError):
        decode(params, InputSeq.of([1], Tensor(np.zeros((2, CFG.d_model + 1)))))


def test_batch_decode_matches_single(params, rng):
    seqs = [InputSeq.of(rng.integers(0, 16, 3), Tensor(rng.standard_normal((2, 8)).astype(np.float32)),
                        rng.integers(0, 16, 2)) for _ in range(3)]
    Hb = decode_batch(params, seqs).data
    for i, s in enumerate(seqs):
        np.testing.assert_allclose(Hb[i], decode(params, s).data, atol=1e-6)


def test_lm_head_cases(rng):
    cfg = LmConfig(vocab_size=8, d_model=8, n_heads=2, d_ff=8, max_len=4)
    p = init_lm(cfg, dtype=np.float64)
    h = rng.standard_normal(8)
    p["head"].data = np.eye(8)
    np.testing.assert_array_equal(lm_head(p, Tensor(h)).data, h)
    np.testing.assert_array_equal(lm_head(p, Tensor(np.zeros(8))).data, np.zeros(8))
    W = rng.standard_normal((8, 8))
    p["head"].data = W
    oracle = np.array([sum(h[i] * W[i, j] for i in range(8)) for j in range(8)])
    np.testing.assert_allclose(lm_head(p, Tensor(h)).data, oracle, atol=1e-12)


def test_last_token_pool():
    H = Tensor(np.arange(15.0).reshape(5, 3))
    np.testing.assert_array_equal(last_token_pool(H).data, [12, 13, 14])
    np.testing.assert_array_equal(last_token_pool(Tensor(np.ones((1, 3)))).data, [1, 1, 1])
    H2 = T.concat_rows(H, Tensor([[7.0, 8.0, 9.0]]))
    np.testing.assert_array_equal(last_token_pool(H2).data, [7, 8, 9])
    with pytest.raises(ContractError):
        last_token_pool(Tensor(np.zeros((0, 3))))
