import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pemb import tensor as T
from pemb.errors import ContractError, LengthError
from pemb.gradcheck import check_gradients
from pemb.lm import InputSeq, LmConfig, LoraAdapter, decode, init_lm, last_token_pool
from pemb.softprompt import encode_instruction, generate_prompts, generate_prompts_batch, soft_token
from pemb.tensor import Tensor

CFG = LmConfig(vocab_size=16, d_model=8, n_layers=2, n_heads=2, d_ff=16, max_len=16, seed=5)


def system(dtype=np.float64, b_scale=0.0, seed=0):
    p = init_lm(CFG, dtype=dtype)
    lora = LoraAdapter.create(p, rank=2, alpha=4.0, seed=seed, dtype=dtype)
    if b_scale:
        r = np.random.default_rng(seed + 100)
        for _, B in lora.factors.values():
            B.data[:] = (r.standard_normal(B.shape) * b_scale).astype(dtype)
    return p, lora


def test_encode_instruction_definitions():
    p, lora = system()
    np.testing.assert_array_equal(encode_instruction(p, lora, [7]).data, decode(p, InputSeq.of([7]), lora).data[0])
    t = [1, 4, 2]
    g0 = encode_instruction(p, lora, t).data
    assert g0.tobytes() == last_token_pool(decode(p, InputSeq.of(t), lora)).data.tobytes()
    assert g0.tobytes() == encode_instruction(*system(), t).data.tobytes()
    with pytest.raises(ContractError):
        encode_instruction(p, lora, [])


def test_uniform_logits_give_column_mean(rng):
    p, _ = system()
    p["head"].data = np.zeros_like(p["head"].data)
    alpha, e = soft_token(p, Tensor(rng.standard_normal(8)))
    np.testing.assert_allclose(alpha.data, 1 / 16, atol=1e-15)
    np.testing.assert_allclose(e.data, p.E.data.mean(axis=0), atol=1e-12)


def test_saturated_logit_recovers_row():
    p, _ = system()
    cfg = CFG
    # head = identity-like so logit j = g[j]; vocab is larger than d, pad with zeros
    head = np.zeros((cfg.d_model, cfg.vocab_size))
    head[3, 3] = 1.0
    p["head"].data = head
    g = np.zeros(cfg.d_model)
    g[3] = 1e4
    _, e = soft_token(p, Tensor(g))
    np.testing.assert_allclose(e.data, p.E.data[3], atol=1e-4)


def test_soft_token_gradient_wrt_state(rng):
    p, _ = system()
    g = Tensor(rng.standard_normal(8), requires_grad=True)
    w = Tensor(rng.standard_normal(8))
    errs = check_gradients(lambda: T.tsum(soft_token(p, g)[1] * w), [g])
    assert errs[0].max() < 1e-4


def test_temperature_knob(rng):
    p, _ = system()
    g = Tensor(rng.standard_normal(8))
    a1, _ = soft_token(p, g)
    a2, _ = soft_token(p, Tensor(g.data * 0.5), temperature=0.5)
    np.testing.assert_allclose(a1.data, a2.data, atol=1e-12)
    with pytest.raises(ContractError):
        soft_token(p, g, temperature=0.0)


def test_k_zero_and_k_one():
    p, lora = system(b_scale=0.3)
    t = [1, 3, 6]
    assert generate_prompts(p, lora, t, 0).P.shape == (0, 8)
    out = generate_prompts(p, lora, t, 1)
    # independent oracle: build e_1 from g0 by hand, re-run the forward
    g0 = decode(p, InputSeq.of(t), lora).data[-1]
    logits = g0 @ p.head.data
    a = np.exp(logits - logits.max())
    a /= a.sum()
    e1 = a @ p.E.data
    H = decode(p, InputSeq.of(t, Tensor(e1[None])), lora).data
    np.testing.assert_allclose(out.P.data[0], H[len(t)], atol=1e-12)


def test_trace_invariants():
    p, lora = system(b_scale=0.3)
    seq = generate_prompts(p, lora, [2, 5], 4)
    tr = seq.trace
    assert len(tr.alphas) == len(tr.soft_tokens) == len(tr.states) == 4
    for a, e in zip(tr.alphas, tr.soft_tokens):
        assert (a.data >= 0).all() and abs(a.data.sum() - 1) < 1e-6
        np.testing.assert_allclose(e.data, a.data @ p.E.data, atol=1e-6)
    assert tr.g is tr.states[-1]
    np.testing.assert_array_equal(seq.P.data[2], tr.states[2].data)


def test_end_to_end_gradient_wrt_lora_a():
    p, lora = system(b_scale=0.5, seed=1)
    tensors = [A for A, _ in lora.factors.values()]
    errs = check_gradients(lambda: T.tsum(generate_prompts(p, lora, [1, 4, 6], 3).P), tensors)
    assert max(float(e.max()) for e in errs) < 1e-4


@settings(max_examples=8)
@given(st.lists(st.integers(0, 15), min_size=1, max_size=4), st.sampled_from([1, 2, 3, 5]), st.integers(0, 50))
def test_gradients_reach_every_lora_tensor(t, K, seed):
    p, lora = system(b_scale=0.5, seed=seed)
    tensors = [x for pair in lora.factors.values() for x in pair]
    w = Tensor(np.random.default_rng(seed).standard_normal((K, 8)))
    f = lambda: T.tsum(generate_prompts(p, lora, t, K).P * w)  # noqa: E731
    with T.Tape():
        T.backward(f())
    assert all(x.grad is not None and np.any(x.grad) for x in tensors)
    for x in tensors:
        x.grad = None
    errs = check_gradients(f, tensors[:2])
    assert max(float(e.max()) for e in errs) < 1e-4


@given(st.lists(st.integers(0, 15), min_size=1, max_size=5), st.integers(1, 6))
def test_convexity_and_prefix_consistency(t, K):
    p, lora = system(dtype=np.float32, b_scale=0.3)
    full = generate_prompts(p, lora, t, K)
    lo, hi = p.E.data.min(axis=0), p.E.data.max(axis=0)
    for e in full.trace.soft_tokens:
        assert np.all(e.data >= lo - 1e-6) and np.all(e.data <= hi + 1e-6)
    i = max(1, K - 2)
    short = generate_prompts(p, lora, t, i)
    np.testing.assert_allclose(short.P.data, full.P.data[:i], atol=1e-5)


def test_bit_identical_repeats():
    p, lora = system(b_scale=0.3)
    a = generate_prompts(p, lora, [3, 3, 1], 5).P.data.tobytes()
    b = generate_prompts(p, lora, [3, 3, 1], 5).P.data.tobytes()
    assert a == b


def test_batched_matches_single():
    p, lora = system(b_scale=0.3)
    toks = np.array([[1, 2, 6], [1, 3, 6], [9, 9, 9]])
    Pb = generate_prompts_batch(p, lora, toks, 4).data
    for row, t in zip(Pb, toks):
        np.testing.assert_allclose(row, generate_prompts(p, lora, t, 4).P.data, atol=1e-12)


def test_length_budget():
    p, lora = system()
    with pytest.raises(LengthError):
        generate_prompts(p, lora, [1] * 10, 7)
    with pytest.raises(ContractError):
        generate_prompts(p, lora, [1], -1)
