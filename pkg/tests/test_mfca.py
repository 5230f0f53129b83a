import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from mcld import oracles
from mcld.embedders import EmbeddingSet
from mcld.mfca import ABLATION_ROUTING, MFCA, Routing, StageId, attention, mfca_forward, select_condition
from mcld.persistence import RunConfig


def test_single_key_returns_value():
    Q = torch.randn(4, 3)
    K = torch.randn(1, 3)
    V = torch.randn(1, 3)
    assert torch.allclose(attention(Q, K, V), V.expand(4, 3))


def test_equal_logits_average_values():
    Q = torch.tensor([[1.0, 0.0, 0.0]])
    K = torch.tensor([[0.0, 1.0, 0.0], [0.0, 1.0, 0.0]])
    V = torch.tensor([[1.0, 2.0, 3.0], [3.0, 6.0, 9.0]])
    assert torch.allclose(attention(Q, K, V), V.mean(0, keepdim=True))


def test_random_3x4_against_loops():
    rng = np.random.default_rng(0)
    Q, K, V = rng.standard_normal((3, 4)), rng.standard_normal((5, 4)), rng.standard_normal((5, 4))
    got = attention(*(torch.tensor(a, dtype=torch.float32) for a in (Q, K, V))).double().numpy()
    assert np.abs(got - oracles.attention_loops(Q, K, V)).max() <= 1e-6


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31))
def test_attention_oracle_f64(n, m, d, seed):
    rng = np.random.default_rng(seed)
    Q, K, V = rng.standard_normal((n, d)), rng.standard_normal((m, d)), rng.standard_normal((m, d))
    got = attention(*(torch.tensor(a) for a in (Q, K, V))).numpy()
    assert np.abs(got - oracles.attention_loops(Q, K, V)).max() <= 1e-12


def test_attention_large_logits_stable():
    Q = torch.full((2, 4), 100.0)
    K = torch.full((3, 4), 100.0)
    out = attention(Q, K, torch.randn(3, 4))
    assert torch.isfinite(out).all()


def test_attention_shape_errors():
    with pytest.raises(ValueError):
        attention(torch.randn(2, 3), torch.randn(0, 3), torch.randn(0, 3))
    with pytest.raises(ValueError):
        attention(torch.randn(2, 3), torch.randn(4, 2), torch.randn(4, 2))


def test_select_condition():
    I = torch.tensor([[[1.0, 2.0]]])
    A = torch.tensor([[[3.0, 4.0]]])
    assert select_condition(StageId.Encoder, I, A) is I
    assert select_condition(StageId.Decoder, I, A) is A
    mid = select_condition(StageId.Mid, I, A)
    assert mid.shape == (1, 2, 2)
    assert torch.equal(mid[0, 0], I[0, 0]) and torch.equal(mid[0, 1], A[0, 0])


def emb_set(b=2, n=1, d=8, seed=0):
    g = torch.Generator().manual_seed(seed)
    return EmbeddingSet(*(torch.randn(b, n, d, generator=g) for _ in range(3)))


def test_zero_lambdas_identity():
    torch.manual_seed(0)
    block = MFCA(16, 8, lambda_s=0.0, lambda_f=0.0)
    z = torch.randn(2, 5, 16)
    for stage in StageId:
        assert torch.equal(mfca_forward(z, stage, emb_set(), block), z)


def test_default_lambdas():
    cfg = RunConfig()
    assert (cfg.lambda_s, cfg.lambda_f) == (1.0, 0.5)
    block = MFCA(16, 8)
    assert float(block.lambda_s) == 1.0 and float(block.lambda_F) == 0.5


@pytest.mark.parametrize("stage,field,changes", [
    (StageId.Encoder, "A_emb", False),
    (StageId.Encoder, "I_emb", True),
    (StageId.Mid, "A_emb", True),
    (StageId.Mid, "I_emb", True),
    (StageId.Decoder, "I_emb", False),
    (StageId.Decoder, "A_emb", True),
    (StageId.Encoder, "F_emb", True),
    (StageId.Mid, "F_emb", True),
    (StageId.Decoder, "F_emb", True),
])
def test_routing_probe(stage, field, changes):
    torch.manual_seed(1)
    block = MFCA(16, 8)
    z = torch.randn(2, 5, 16)
    emb = emb_set()
    noisy = emb.replace(**{field: torch.randn_like(getattr(emb, field))})
    same = torch.equal(block(z, stage, emb), block(z, stage, noisy))
    assert same is not changes


def test_mfca_matches_manual_formula():
    torch.manual_seed(2)
    block = MFCA(6, 4).double()
    z = torch.randn(1, 3, 6, dtype=torch.float64)
    emb = EmbeddingSet(*(torch.randn(1, 1, 4, dtype=torch.float64) for _ in range(3)))
    with torch.no_grad():
        for stage, s in ((StageId.Encoder, emb.I_emb), (StageId.Decoder, emb.A_emb),
                         (StageId.Mid, torch.cat([emb.I_emb, emb.A_emb], 1))):
            Q = (z @ block.W_q.weight.T)[0].numpy()
            att_s = oracles.attention_loops(Q, (s @ block.W_k_s.weight.T)[0].numpy(), (s @ block.W_v_s.weight.T)[0].numpy())
            f = emb.F_emb
            att_f = oracles.attention_loops(Q, (f @ block.W_k_F.weight.T)[0].numpy(), (f @ block.W_v_F.weight.T)[0].numpy())
            expected = z[0].numpy() + (1.0 * att_s + 0.5 * att_f) @ block.proj.weight.detach().numpy().T
            assert np.allclose(block(z, stage, emb)[0].numpy(), expected, atol=1e-12)


def test_multihead_shapes():
    block = MFCA(16, 8, heads=4)
    assert block(torch.randn(2, 5, 16), StageId.Mid, emb_set()).shape == (2, 5, 16)
    with pytest.raises(ValueError):
        MFCA(16, 8, d_a=10, heads=4)


def test_width_errors():
    block = MFCA(16, 8)
    with pytest.raises(ValueError):
        block(torch.randn(2, 5, 15), StageId.Encoder, emb_set())
    with pytest.raises(ValueError):
        block(torch.randn(2, 5, 16), StageId.Encoder, emb_set(d=7))


def test_ablation_table():
    assert ABLATION_ROUTING["B1"] == Routing(True, False, False, "concat")
    assert ABLATION_ROUTING["B2"] == Routing(True, True, False, "concat")
    assert ABLATION_ROUTING["B3"] == Routing(True, True, True, "concat")
    assert ABLATION_ROUTING["B4"] == Routing(False, True, True, "mfca")
    assert ABLATION_ROUTING["B5"] == Routing(True, True, False, "mfca")
    assert ABLATION_ROUTING["full"] == Routing() == Routing(True, True, True, "mfca")


def test_b1_single_image_attention():
    torch.manual_seed(3)
    block = MFCA(16, 8, routing=ABLATION_ROUTING["B1"])
    z = torch.randn(2, 5, 16)
    emb = emb_set()
    noisy = emb.replace(A_emb=torch.randn(2, 1, 8), F_emb=torch.randn(2, 1, 8))
    for stage in StageId:
        s, f = block.branch_conditions(stage, emb)
        assert s is emb.I_emb and f is None
        assert torch.equal(block(z, stage, emb), block(z, stage, noisy))
