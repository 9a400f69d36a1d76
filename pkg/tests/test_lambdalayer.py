import math

import numpy as np
import pytest

from synthprobe.config import ConfigError, ENCODINGS
from synthprobe.lambdalayer import (LambdaConfig, LambdaWeights, Layer,
    build_encoding, circular_shift, coordinates, enumerate_shifts,
    equivariance_probe, lambda_forward, lambda_tt_forward, random_weights)
from synthprobe.tensor import Tensor, Tape, UsageError, backward, gradcheck, \
    reduce_sum, mul

def layer(encoding, geometry = (16,), channels = 8, m = 8, c_pe = 8,
          tt = False, seed = 0):
    cfg = LambdaConfig(c_in = channels, c_out = channels, m = m, c_pe = c_pe,
                       encoding = encoding, tt = tt, geometry = geometry)
    return Layer(cfg, random_weights(cfg, seed))

@pytest.mark.parametrize("encoding", ENCODINGS)
@pytest.mark.parametrize("tt", [False, True])
def test_output_shape(rng, encoding, tt):
    f = layer(encoding, geometry = (4, 4), tt = tt)
    x = rng.standard_normal((8, 16)).astype(np.float32)
    y = f(x)
    assert y.shape == (8, 16)
    assert y.dtype == np.float32

def test_parameter_shapes():
    cfg = LambdaConfig(c_in = 6, c_out = 5, m = 3, c_pe = 4,
                       encoding = "cosine_sum_qv", geometry = (10,))
    shapes = cfg.shapes()
    assert shapes["K"] == (3, 6) and shapes["V"] == (5, 6)
    assert shapes["proj"] == (6, 4)
    assert "A" not in shapes
    decor = LambdaConfig(c_in = 6, c_out = 5, m = 3, c_pe = 4, tt = True,
                         encoding = "fourier_decor", geometry = (10,))
    assert decor.shapes()["A"] == (5, 3)
    assert decor.shapes()["V2"] == (18, 6)
    seq = LambdaConfig(c_in = 6, c_out = 5, m = 3, encoding = "coordconv",
                       geometry = (10,))
    grid = LambdaConfig(c_in = 6, c_out = 5, m = 3, encoding = "coordconv",
                        geometry = (2, 5))
    assert seq.c_k == 7 and grid.c_k == 8
    assert grid.shapes()["Q"] == (3, 8)

def test_config_errors():
    with pytest.raises(ConfigError):
        LambdaConfig(c_in = 4, c_out = 4, m = 4, c_pe = 5,
                     encoding = "fourier_decor", geometry = (8,))
    with pytest.raises(ConfigError):
        LambdaConfig(c_in = 4, c_out = 4, m = 4, c_pe = 6,
                     encoding = "cosine_decor", geometry = (4, 4))
    with pytest.raises(ConfigError):
        LambdaConfig(c_in = 4, c_out = 4, m = 4, encoding = "rope")

def test_input_shape_mismatch(rng):
    f = layer("none")
    with pytest.raises(UsageError):
        f(rng.standard_normal((8, 15)))
    cfg = LambdaConfig(c_in = 8, c_out = 8, m = 8, geometry = (16,))
    with pytest.raises(UsageError):
        lambda_tt_forward(np.zeros((8, 16)), random_weights(cfg, 0), None, cfg)
    with pytest.raises(UsageError):
        lambda_forward(np.zeros((8, 16)), LambdaWeights(K = np.zeros((8, 8))),
                       None, cfg)

def test_content_path_matches_formula(rng):
    f = layer("none", geometry = (6,), channels = 3, m = 2)
    x = rng.standard_normal((3, 6))
    w = f.weights
    K, V, Q = (w.K.data.astype(np.float64), w.V.data.astype(np.float64),
               w.Q.data.astype(np.float64))
    keys = K @ x
    kbar = np.exp(keys - keys.max(axis = 1, keepdims = True))
    kbar /= kbar.sum(axis = 1, keepdims = True)
    expected = (kbar @ (V @ x).T).T @ (Q @ x)
    assert np.allclose(f(x.astype(np.float32)).data, expected, atol = 1e-4)

def test_fourier_frequencies():
    pe = build_encoding("fourier", 8, (16,))
    assert np.allclose(pe.frequencies, [2 * math.pi * c / 16 for c in (1, 2, 3, 4)])
    assert pe.P.shape == (8, 16)
    assert np.allclose(pe.P[0], np.cos(pe.frequencies[0] * np.arange(16)))
    assert np.allclose(pe.P[1], np.sin(pe.frequencies[0] * np.arange(16)))

def test_grid_encoding_splits_rows_and_columns():
    pe = build_encoding("cosine", 8, (3, 5))
    rows = pe.P[:4].reshape(4, 3, 5)
    cols = pe.P[4:].reshape(4, 3, 5)
    assert np.allclose(rows, rows[:, :, :1])
    assert np.allclose(cols, cols[:, :1, :])
    with pytest.raises(ConfigError):
        build_encoding("cosine", 6, (3, 5))

def test_fourier_gram_is_stationary():
    pe = build_encoding("fourier", 16, (32,))
    G = pe.gram()
    N = 32
    worst = 0.0
    for m in range(N):
        for n in range(N):
            for s in range(N):
                worst = max(worst, abs(G[m, n] - G[(m + s) % N, (n + s) % N]))
    assert worst <= 1e-5

def test_coordinates():
    assert np.allclose(coordinates((3,)), [[-1.0, 0.0, 1.0]])
    grid = coordinates((2, 3))
    assert grid.shape == (2, 6)
    assert np.allclose(grid[0], [-1, -1, -1, 1, 1, 1])
    assert np.allclose(grid[1], [-1, 0, 1, -1, 0, 1])

def test_circular_shift_on_grid():
    x = np.arange(12, dtype = np.float32).reshape(1, 12)
    shifted = circular_shift(x, (1, 2), (3, 4)).reshape(3, 4)
    assert np.array_equal(shifted, np.roll(np.arange(12).reshape(3, 4),
                                           (1, 2), axis = (0, 1)))
    assert len(enumerate_shifts((16,))) == 16
    assert len(enumerate_shifts((3, 4))) == 12

def test_fourier_decor_is_shift_equivariant_on_a_sequence(rng):
    f = layer("fourier_decor", geometry = (16,), c_pe = 8)
    x = rng.standard_normal((8, 16)).astype(np.float32)
    worst = max(equivariance_probe(f, x, s, (16,)) for s in range(16))
    assert worst <= 1e-4

def test_fourier_decor_is_shift_equivariant_on_a_grid(rng):
    f = layer("fourier_decor", geometry = (16, 16), c_pe = 16)
    x = rng.standard_normal((8, 256)).astype(np.float32)
    shifts = rng.integers(0, 16, size = (64, 2))
    worst = max(equivariance_probe(f, x, tuple(s), (16, 16)) for s in shifts)
    assert worst <= 1e-4

def test_content_layer_is_permutation_equivariant(rng):
    f = layer("none", geometry = (16,))
    x = rng.standard_normal((8, 16)).astype(np.float32)
    worst = max(equivariance_probe(f, x, rng.permutation(16))
                for _ in range(100))
    assert worst <= 1e-5

def test_summed_encoding_leaks_absolute_position(rng):
    f = layer("cosine_sum_qkv", geometry = (16,))
    x = rng.standard_normal((8, 16)).astype(np.float32)
    worst = max(equivariance_probe(f, x, s, (16,)) for s in range(16))
    assert worst > 0.01

@pytest.mark.parametrize("encoding", ENCODINGS)
@pytest.mark.parametrize("tt", [False, True])
def test_layer_gradients(rng, encoding, tt):
    cfg = LambdaConfig(c_in = 3, c_out = 2, m = 2, c_pe = 4, encoding = encoding,
                       tt = tt, geometry = (2, 3))
    x = rng.standard_normal((3, 6))
    weights = random_weights(cfg, 7)
    params = dict((k, v.data) for k, v in weights.params().items())
    params["x"] = x
    probe = rng.standard_normal((2, 6))

    def fn(p):
        w = LambdaWeights(**dict((k, v) for k, v in p.items() if k != "x"))
        y = lambda_tt_forward(p["x"], w, Layer(cfg, weights).pe, cfg) if tt \
            else lambda_forward(p["x"], w, Layer(cfg, weights).pe, cfg)
        return reduce_sum(mul(y, probe))

    result = gradcheck(fn, params)
    assert result.ok(), result

def test_save_and_load(tmp_path, rng):
    f = layer("cosine_decor", geometry = (4, 4), tt = True)
    f.save(str(tmp_path / "layer"))
    g = Layer.load(str(tmp_path / "layer"))
    assert g.cfg == f.cfg
    x = rng.standard_normal((8, 16)).astype(np.float32)
    assert np.array_equal(f(x).data, g(x).data)

def softmax_rows(keys):
    out = np.zeros_like(keys)
    for m in range(keys.shape[0]):
        e = [math.exp(v) for v in keys[m]]
        for n in range(keys.shape[1]):
            out[m, n] = e[n] / sum(e)
    return out

def content_loop(kbar, V, Q, x):
    M, N = kbar.shape
    vx, qx = V @ x, Q @ x
    lam = np.zeros((M, V.shape[0]))
    for m in range(M):
        for o in range(V.shape[0]):
            lam[m, o] = sum(kbar[m, n] * vx[o, n] for n in range(N))
    y = np.zeros((V.shape[0], N))
    for o in range(V.shape[0]):
        for n in range(N):
            y[o, n] = sum(lam[m, o] * qx[m, n] for m in range(M))
    return y

def weights64(f):
    return dict((k, v.data.astype(np.float64))
                for k, v in f.weights.params().items())

def test_decor_layer_matches_loops(rng):
    cfg = LambdaConfig(c_in = 2, c_out = 1, m = 2, c_pe = 4,
                       encoding = "fourier_decor", geometry = (3,))
    f = Layer(cfg, random_weights(cfg, 5))
    w = weights64(f)
    x = rng.standard_normal((2, 3))
    P = f.pe.P.astype(np.float64)
    kbar = softmax_rows(w["K"] @ x)
    expected = content_loop(kbar, w["V"], w["Q"], x)
    for n in range(3):
        for c in range(4):
            lam = sum(w["A"][0, m] * kbar[m, k] * P[c, k]
                      for m in range(2) for k in range(3))
            expected[0, n] += lam * P[c, n]
    assert np.allclose(f(x.astype(np.float32)).data, expected, atol = 1e-4)

def test_tt_layer_matches_loops(rng):
    f = layer("none", geometry = (3,), channels = 2, m = 2, tt = True, seed = 4)
    w = weights64(f)
    x = rng.standard_normal((2, 3))
    attention = softmax_rows(w["K2"] @ x)
    values = w["V2"] @ x
    keys = np.zeros((2, 2))
    for m in range(2):
        for c in range(2):
            keys[m, c] = sum(attention[m, n] * values[m * 2 + c, n]
                             for n in range(3))
    expected = content_loop(softmax_rows(keys @ x), w["V"], w["Q"], x)
    assert np.allclose(f(x.astype(np.float32)).data, expected, atol = 1e-4)

def test_zero_values_and_positions_give_zero_output(rng):
    f = layer("cosine_decor", geometry = (4, 4), c_pe = 8)
    w = f.weights.params()
    zeroed = dict((k, v.data) for k, v in w.items())
    zeroed["V"] = np.zeros_like(zeroed["V"])
    zeroed["A"] = np.zeros_like(zeroed["A"])
    g = Layer(f.cfg, LambdaWeights(**zeroed))
    y = g(rng.standard_normal((8, 16)).astype(np.float32))
    assert np.array_equal(y.data, np.zeros((8, 16), dtype = np.float32))

def test_single_position_ignores_keys(rng):
    cfg = LambdaConfig(c_in = 3, c_out = 3, m = 4, geometry = (1,))
    x = rng.standard_normal((3, 1)).astype(np.float32)
    a = random_weights(cfg, 0)
    b = LambdaWeights(K = random_weights(cfg, 1).K.data, V = a.V.data,
                      Q = a.Q.data)
    ya, yb = Layer(cfg, a)(x).data, Layer(cfg, b)(x).data
    assert np.allclose(ya, yb, atol = 1e-6)
    expected = (a.V.data @ x) * (a.Q.data @ x).sum()
    assert np.allclose(ya, expected, atol = 1e-5)

def test_zero_tt_values_give_uniform_keys(rng):
    f = layer("none", geometry = (5,), channels = 2, m = 3, tt = True)
    weights = dict((k, v.data) for k, v in f.weights.params().items())
    weights["V2"] = np.zeros_like(weights["V2"])
    g = Layer(f.cfg, LambdaWeights(**weights))
    w = weights64(g)
    x = rng.standard_normal((2, 5))
    expected = content_loop(np.full((3, 5), 0.2), w["V"], w["Q"], x)
    assert np.allclose(g(x.astype(np.float32)).data, expected, atol = 1e-5)

def test_key_rows_sum_to_one(rng):
    # identical columns make V x constant, so the output factors through the
    # row sums of the normalized keys
    f = layer("none", geometry = (6,), channels = 3, m = 4)
    column = rng.standard_normal((3, 1))
    x = np.repeat(column, 6, axis = 1)
    w = weights64(f)
    expected = np.outer(w["V"] @ column[:, 0], np.ones(4) @ (w["Q"] @ x))
    assert np.allclose(f(x.astype(np.float32)).data, expected, atol = 1e-5)

@pytest.mark.parametrize("encoding", ["fourier_decor", "cosine_sum_qv"])
def test_forward_on_a_tape_matches_plain_forward(rng, encoding):
    f = layer(encoding, geometry = (4, 4), tt = True)
    x = rng.standard_normal((8, 16)).astype(np.float32)
    tape = Tape()
    watched = LambdaWeights(**dict((k, tape.watch(v.data))
                                   for k, v in f.weights.params().items()))
    y = lambda_tt_forward(tape.watch(x), watched, f.pe, f.cfg)
    assert np.array_equal(y.data, f(x).data)
