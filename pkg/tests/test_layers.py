"""LSTM cell and friends against independent numpy oracles."""

from __future__ import annotations

import numpy as np

from caplab.layers import Dense, Embedding, LstmCell, glorot_uniform
from caplab.tensor import Tensor, backward


def lstm_oracle(w, b, x, h, c):
    """Plain numpy single step with packed (input, forget, cell, output) gates."""
    hdim = h.shape[0]
    z = w @ np.concatenate([x, h]) + b

    def sig(v):
        return 1.0 / (1.0 + np.exp(-v))

    i = sig(z[0:hdim])
    f = sig(z[hdim:2 * hdim])
    g = np.tanh(z[2 * hdim:3 * hdim])
    o = sig(z[3 * hdim:4 * hdim])
    c2 = f * c + i * g
    h2 = o * np.tanh(c2)
    return h2, c2


def test_lstm_step_matches_oracle():
    rng = np.random.default_rng(7)
    cell = LstmCell(5, 4, rng)
    x = rng.normal(size=5)
    h = rng.normal(size=4)
    c = rng.normal(size=4)
    ht, ct = cell.step(Tensor(x), Tensor(h), Tensor(c))
    h_ref, c_ref = lstm_oracle(cell.w.data, cell.b.data, x, h, c)
    assert np.max(np.abs(ht.data - h_ref)) < 1e-12
    assert np.max(np.abs(ct.data - c_ref)) < 1e-12


def test_lstm_forget_bias_starts_at_one():
    cell = LstmCell(3, 6, np.random.default_rng(0))
    b = cell.b.data
    assert np.all(b[6:12] == 1.0)
    assert np.all(b[:6] == 0.0) and np.all(b[12:] == 0.0)


def test_lstm_packed_weight_shape():
    cell = LstmCell(9, 4, np.random.default_rng(1))
    assert cell.w.shape == (16, 13)
    assert cell.b.shape == (16,)


def test_zero_state_and_unroll_gradient_reaches_weights():
    rng = np.random.default_rng(3)
    cell = LstmCell(2, 3, rng)
    h, c = cell.zero_state()
    for t in range(4):
        h, c = cell.step(Tensor(rng.normal(size=2)), h, c)
    backward((h * h).sum())
    assert cell.w.grad is not None and np.any(cell.w.grad != 0)
    assert cell.b.grad is not None


def test_glorot_uniform_bounds_and_determinism():
    a = np.sqrt(6.0 / (40 + 30))
    w1 = glorot_uniform(np.random.default_rng(5), (40, 30))
    w2 = glorot_uniform(np.random.default_rng(5), (40, 30))
    assert np.array_equal(w1, w2)
    assert np.max(np.abs(w1)) <= a
    # snapped to float32 grid for lossless narrow-store round trips
    assert np.array_equal(w1, w1.astype(np.float32).astype(np.float64))


def test_dense_applies_to_vector_and_matrix_rows():
    rng = np.random.default_rng(11)
    d = Dense(4, 2, rng)
    v = rng.normal(size=4)
    m = rng.normal(size=(3, 4))
    out_v = d(Tensor(v))
    out_m = d(Tensor(m))
    assert np.allclose(out_v.data, v @ d.w.data + d.b.data)
    assert np.allclose(out_m.data, m @ d.w.data + d.b.data)


def test_embedding_lookup_returns_table_row():
    e = Embedding(6, 3, np.random.default_rng(13))
    assert np.array_equal(e(4).data, e.table.data[4])
