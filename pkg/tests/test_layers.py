import numpy as np
import pytest

from mmfusion.layers import (
    Conv1dStack,
    Dropout,
    GruLayer,
    LayerNorm,
    Linear,
    LstmLayer,
    ModalityAttention,
    MultiHeadAttention,
    PositionalEncoding,
    attention,
    conv_embed,
    dropout,
    gru_forward,
    linear,
    lstm_forward,
    mma,
    positional_encode,
    tma,
)
from mmfusion.tensor import DimensionError, Rng, Tensor, grad_check


def zero_params(module):
    for p in module.parameters():
        p.data[...] = 0.0


# -- conv embedding ---------------------------------------------------------


def test_conv_hand_value():
    conv = Conv1dStack(1, 1, Rng(0), num_layers=1, kernel_size=3)
    conv.weights[0].data[...] = 1.0
    conv.biases[0].data[...] = 0.0
    out = conv_embed(np.ones((3, 1)), conv)
    assert np.array_equal(out.data.ravel(), [2.0, 3.0, 2.0])


def test_conv_identity_kernel():
    conv = Conv1dStack(2, 2, Rng(0), num_layers=1, kernel_size=3)
    conv.weights[0].data[...] = 0.0
    conv.weights[0].data[1] = np.eye(2)
    conv.biases[0].data[...] = 0.0
    x = np.random.default_rng(0).normal(size=(5, 2))
    assert np.allclose(conv(x).data, x, atol=0)


def test_conv_shapes_and_errors():
    conv = Conv1dStack(4, 8, Rng(0))
    assert conv(np.ones((1, 4))).shape == (1, 8)
    assert conv(np.ones((2, 7, 4))).shape == (2, 7, 8)
    with pytest.raises(DimensionError):
        conv(np.ones((3, 5)))
    with pytest.raises(ValueError):
        Conv1dStack(4, 8, Rng(0), kernel_size=2)


# -- positional encoding ----------------------------------------------------


def test_positional_encoding_values():
    pe = positional_encode(50, 8)
    assert np.array_equal(pe[0, 0::2], np.zeros(4))
    assert np.array_equal(pe[0, 1::2], np.ones(4))
    assert np.all(np.abs(pe) <= 1.0)
    assert np.isclose(pe[3, 2], np.sin(3 / 10000 ** (2 / 8)))
    assert np.isclose(pe[3, 3], np.cos(3 / 10000 ** (2 / 8)))


def test_positional_encoding_odd_dim_and_limit():
    assert positional_encode(4, 5).shape == (4, 5)
    table = PositionalEncoding(10, 4)
    assert np.array_equal(table(3), table.table[:3])
    with pytest.raises(DimensionError):
        table(11)


# -- attention ----------------------------------------------------------------


def test_attention_single_position():
    rng = np.random.default_rng(0)
    mha = MultiHeadAttention(8, 4, Rng(1))
    x = rng.normal(size=(1, 8))
    out, w = attention(x, x, x, mha)
    assert np.array_equal(w.data, np.ones((4, 1, 1)))
    expected = (x @ mha.w_v.data + mha.b_v.data) @ mha.w_o.data + mha.b_o.data
    assert np.allclose(out.data, expected, atol=1e-12)


def test_attention_rows_sum_to_one():
    x = np.random.default_rng(0).normal(size=(3, 6, 8))
    _, w = MultiHeadAttention(8, 2, Rng(0))(x, x, x)
    assert w.shape == (3, 2, 6, 6)
    assert np.all(w.data >= 0)
    assert np.allclose(w.data.sum(-1), 1.0, atol=1e-9)


def test_zero_query_gives_uniform_weights():
    mha = MultiHeadAttention(4, 2, Rng(0))
    mha.w_q.data[...] = 0.0
    mha.b_q.data[...] = 0.0
    x = np.random.default_rng(0).normal(size=(5, 4))
    _, w = mha(x, x, x)
    assert np.allclose(w.data, 1 / 5, atol=1e-15)


def test_attention_errors():
    mha = MultiHeadAttention(4, 2, Rng(0))
    with pytest.raises(DimensionError):
        mha(np.ones((3, 5)), np.ones((3, 5)), np.ones((3, 5)))
    with pytest.raises(ValueError):
        MultiHeadAttention(6, 4, Rng(0))


def test_tma_single_step_and_shape():
    mha = MultiHeadAttention(8, 4, Rng(0))
    out, w = tma(np.ones((1, 8)), mha, return_weights=True)
    assert np.array_equal(w.data, np.ones((4, 1, 1)))
    assert tma(np.ones((13, 8)), mha).shape == (13, 8)


def test_tma_sees_order_through_positional_encoding():
    rng = np.random.default_rng(3)
    mha = MultiHeadAttention(8, 4, Rng(0))
    x = rng.normal(size=(6, 8))
    perm = np.array([3, 0, 5, 1, 4, 2])
    pe = positional_encode(6, 8)
    a = tma(x + pe, mha).data
    b = tma(x[perm] + pe, mha).data
    # without positions attention is permutation-equivariant ...
    assert np.allclose(tma(x[perm], mha).data, tma(x, mha).data[perm], atol=1e-12)
    # ... with them, reordering the inputs changes the outputs
    assert not np.allclose(b, a[perm], atol=1e-6)


def test_mma_single_modality():
    mod = ModalityAttention(1, 8, 4, Rng(0))
    x = np.random.default_rng(0).normal(size=(7, 1, 8))
    out, w = mma(x, mod, return_weights=True)
    assert np.array_equal(w.data, np.ones((7, 4, 1, 1)))
    v = x[:, 0] @ mod.w_v.data[0] + mod.b_v.data[0]
    assert np.allclose(out.data[:, 0], v @ mod.w_o.data + mod.b_o.data, atol=1e-12)


def test_mma_three_modalities_weights():
    mod = ModalityAttention(3, 8, 2, Rng(0))
    x = np.random.default_rng(0).normal(size=(2, 5, 3, 8))
    out, w = mod(x)
    assert out.shape == (2, 5, 3, 8)
    assert w.shape == (2, 5, 2, 3, 3)
    assert np.allclose(w.data.sum(-1), 1.0, atol=1e-9)


def test_mma_duplicated_modalities_symmetric():
    mod = ModalityAttention(2, 8, 2, Rng(0))
    for name in ("w_q", "w_k", "w_v", "b_q", "b_k", "b_v"):
        p = getattr(mod, name)
        p.data[1] = p.data[0]
    row = np.random.default_rng(1).normal(size=(4, 1, 8))
    _, w = mod(np.concatenate([row, row], axis=1))
    assert np.allclose(w.data, np.swapaxes(w.data, -1, -2), atol=1e-12)


def test_mma_modality_count_mismatch():
    with pytest.raises(DimensionError):
        ModalityAttention(3, 8, 2, Rng(0))(np.ones((4, 2, 8)))


def test_mma_projections_are_per_modality():
    mod = ModalityAttention(2, 4, 1, Rng(0))
    x = np.random.default_rng(0).normal(size=(2, 4))
    before = mod(x)[0].data
    mod.w_v.data[1] += 1.0
    after = mod(x)[0].data
    assert not np.allclose(before, after)


# -- recurrent ------------------------------------------------------------


def test_gru_zero_weights_halves_state():
    gru = GruLayer(3, 4, Rng(0), bidirectional=False)
    zero_params(gru)
    c = np.array([1.0, -2.0, 0.5, 4.0])
    h = gru_forward(np.random.default_rng(0).normal(size=(5, 3)), gru, h0=c).data
    for t in range(5):
        assert np.allclose(h[t], c / 2 ** (t + 1), atol=1e-15)


def test_gru_zero_everything_stays_zero():
    gru = GruLayer(3, 4, Rng(0), bidirectional=False)
    zero_params(gru)
    assert np.array_equal(gru(np.ones((6, 3))).data, np.zeros((6, 4)))


def test_gru_bidirectional_shape_and_reverse_pass():
    gru = GruLayer(3, 4, Rng(0), bidirectional=True)
    x = np.random.default_rng(0).normal(size=(2, 6, 3))
    out = gru(x).data
    assert out.shape == (2, 6, 8)
    # the backward direction at t=T-1 has seen only the last input
    single = gru(x[:, -1:]).data
    assert np.allclose(out[:, -1, 4:], single[:, 0, 4:], atol=1e-12)


def test_gru_errors():
    with pytest.raises(DimensionError):
        GruLayer(3, 4, Rng(0))(np.ones((5, 2)))


def test_lstm_zero_weights_zero_output():
    lstm = LstmLayer(3, 6, Rng(0))
    zero_params(lstm)
    assert np.array_equal(lstm_forward(np.ones((4, 3)), lstm).data, np.zeros((4, 12)))


def test_lstm_fusion_shape_and_bounds():
    lstm = LstmLayer(3, 6, Rng(0), bidirectional=True)
    y = lstm(np.random.default_rng(0).normal(size=(20, 3)) * 50).data
    assert y.shape == (20, 12)
    assert np.all(np.abs(y) < 1.0)


def test_recurrent_outputs_finite_for_large_inputs():
    x = np.random.default_rng(0).uniform(-1e3, 1e3, size=(2, 30, 3))
    assert np.isfinite(GruLayer(3, 5, Rng(0))(x).data).all()
    assert np.abs(LstmLayer(3, 5, Rng(0))(x).data).max() <= 1.0


# -- norm / dropout / linear ------------------------------------------------


def test_layer_norm_constant_input_maps_to_bias():
    ln = LayerNorm(4)
    ln.gain.data[...] = [1.0, 2.0, 3.0, 4.0]
    ln.bias.data[...] = [0.5, -0.5, 1.0, 0.0]
    assert np.allclose(ln(np.full((2, 4), 7.0)).data, [[0.5, -0.5, 1.0, 0.0]] * 2, atol=0)


def test_layer_norm_standardizes():
    x = np.random.default_rng(0).normal(3.0, 5.0, size=(6, 16))
    y = LayerNorm(16)(x).data
    assert np.allclose(y.mean(-1), 0.0, atol=1e-12)
    assert np.allclose(y.var(-1), 1.0, atol=1e-5)


def test_dropout_eval_is_identity_and_rejects_p_one():
    x = Tensor(np.arange(5.0))
    assert dropout(x, 0.5, training=False, rng=None) is x
    with pytest.raises(ValueError):
        dropout(x, 1.0, True, Rng(0))
    with pytest.raises(ValueError):
        Dropout(1.5, Rng(0))


def test_dropout_inverted_scaling_preserves_mean():
    p, n_trials, width = 0.2, 10_000, 5
    drop = Dropout(p, Rng(4))
    x = np.ones(width)
    total = sum(drop(x).data.sum() for _ in range(n_trials))
    mean = total / (n_trials * width)
    se = np.sqrt(p / (1 - p) / (n_trials * width))
    assert abs(mean - 1.0) < 3 * se


def test_linear_example():
    out = linear(Tensor([1.0, 2.0]), Tensor(np.eye(2)), Tensor([1.0, 1.0]))
    assert np.array_equal(out.data, [2.0, 3.0])
    lin = Linear(3, 2, Rng(0))
    assert lin(np.ones((4, 3))).shape == (4, 2)
    with pytest.raises(DimensionError):
        lin(np.ones(4))


# -- gradient checks --------------------------------------------------------

TOL = 1e-3


def _probe(shape, seed=7):
    return np.random.default_rng(seed).normal(size=shape)


def test_grad_conv_stack():
    conv = Conv1dStack(3, 4, Rng(0), num_layers=2)
    x = Tensor(_probe((2, 5, 3)), requires_grad=True)
    w = _probe((2, 5, 4))
    assert grad_check(lambda: (conv(x) * w).sum(), conv.parameters() + [x]) < TOL


def test_grad_positional_add():
    x = Tensor(_probe((5, 4)), requires_grad=True)
    pe = positional_encode(5, 4)
    w = _probe((5, 4))
    assert grad_check(lambda: ((x + pe) * (x + pe) * w).sum(), [x]) < TOL


def test_grad_attention_and_tma():
    mha = MultiHeadAttention(4, 2, Rng(0))
    q = Tensor(_probe((2, 3, 4), 1), requires_grad=True)
    kv = Tensor(_probe((2, 5, 4), 2), requires_grad=True)
    w = _probe((2, 3, 4))
    assert grad_check(lambda: (mha(q, kv, kv)[0] * w).sum(), mha.parameters() + [q, kv]) < TOL
    x = Tensor(_probe((4, 4), 3), requires_grad=True)
    w2 = _probe((4, 4))
    assert grad_check(lambda: (tma(x, mha) * w2).sum(), mha.parameters() + [x]) < TOL


def test_grad_mma():
    mod = ModalityAttention(3, 4, 2, Rng(0))
    x = Tensor(_probe((2, 3, 4)), requires_grad=True)
    w = _probe((2, 3, 4), 1)
    assert grad_check(lambda: (mod(x)[0] * w).sum(), mod.parameters() + [x]) < TOL


def test_grad_gru():
    gru = GruLayer(3, 2, Rng(0), bidirectional=True)
    x = Tensor(_probe((2, 4, 3)), requires_grad=True)
    h0 = Tensor(_probe((2,), 5), requires_grad=True)
    w = _probe((2, 4, 4), 1)
    assert grad_check(lambda: (gru(x, h0) * w).sum(), gru.parameters() + [x, h0]) < TOL


def test_grad_lstm():
    lstm = LstmLayer(3, 2, Rng(0), bidirectional=True)
    x = Tensor(_probe((2, 4, 3)), requires_grad=True)
    w = _probe((2, 4, 4), 1)
    assert grad_check(lambda: (lstm(x) * w).sum(), lstm.parameters() + [x]) < TOL


def test_grad_layer_norm_and_linear():
    ln, lin = LayerNorm(5), Linear(5, 3, Rng(0))
    ln.gain.data[...] = _probe((5,), 2)
    x = Tensor(_probe((4, 5)), requires_grad=True)
    w = _probe((4, 3), 1)
    params = ln.parameters() + lin.parameters() + [x]
    assert grad_check(lambda: (lin(ln(x)) * w).sum(), params) < TOL
