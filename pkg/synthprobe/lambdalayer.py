"""
The Lambda layer family with its positional encodings.

The content path is

    K̄ = softmax_N(Kx),  λ_content = K̄ (Vx)^T,  y_content = λ_content^T Qx

and the decorrelated ("decor") variants add a separate bilinear positional
path

    λ_pos = A K̄ P^T,    y_pos = λ_pos P,          y = y_content + y_pos.

The "sum" variants add the encoding to the feature map instead, coordconv
appends coordinate channels, and the TT variant computes K from the input
with a first pass before running the layer.
"""

import logging
import math
from dataclasses import dataclass, asdict

import numpy as np

from synthprobe import codec
from synthprobe.config import ConfigError, ENCODINGS
from synthprobe.tensor import (Tensor, UsageError, add, concat_rows,
    contract_positions, matmul, reshape, softmax_axis, stage, transpose)

logger = logging.getLogger("synthprobe.lambdalayer")

DECOR = ("cosine_decor", "fourier_decor")
SUMMED = ("cosine_sum_qkv", "cosine_sum_qv")

@dataclass
class LambdaConfig:
    c_in: int
    c_out: int
    m: int
    c_pe: int = 0
    encoding: str = "fourier_decor"
    tt: bool = False
    geometry: tuple = (16,)

    def __post_init__(self):
        self.geometry = tuple(int(x) for x in self.geometry)
        self.validate()

    def validate(self):
        if self.encoding not in ENCODINGS:
            raise ConfigError("Unknown encoding {0!r}".format(self.encoding))
        if min(self.c_in, self.c_out, self.m) <= 0:
            raise ConfigError("c_in, c_out and m must be positive")
        if len(self.geometry) not in (1, 2) or min(self.geometry) <= 0:
            raise ConfigError("Bad geometry {0}".format(self.geometry))
        if self.usespe:
            if self.c_pe <= 0 or self.c_pe % 2:
                raise ConfigError("c_pe must be a positive even number, "
                                  "got {0}".format(self.c_pe))
            if self.grid and self.c_pe % 4:
                raise ConfigError("c_pe must be divisible by 4 on a grid, "
                                  "got {0}".format(self.c_pe))

    @property
    def grid(self):
        return len(self.geometry) == 2

    @property
    def positions(self):
        return int(np.prod(self.geometry))

    @property
    def decor(self):
        return self.encoding in DECOR

    @property
    def summed(self):
        return self.encoding in SUMMED

    @property
    def usespe(self):
        return self.decor or self.summed

    @property
    def c_k(self):
        """
        Width of the feature map entering the K, Q and V projections.
        """
        if self.encoding == "coordconv":
            return self.c_in + len(self.geometry)
        return self.c_in

    def shapes(self):
        shapes = {"K": (self.m, self.c_k),
                  "V": (self.c_out, self.c_k),
                  "Q": (self.m, self.c_k)}
        if self.decor:
            shapes["A"] = (self.c_out, self.m)
        if self.summed and self.c_pe != self.c_in:
            shapes["proj"] = (self.c_in, self.c_pe)
        if self.tt:
            shapes["K2"] = (self.m, self.c_k)
            shapes["V2"] = (self.m * self.c_k, self.c_k)
        return shapes

    def fanin(self, name):
        return self.shapes()[name][1]

    def todict(self):
        data = asdict(self)
        data["geometry"] = list(self.geometry)
        return data

    @classmethod
    def fromdict(cls, data):
        return cls(**data)

class LambdaWeights(object):
    """
    The learnable matrices of one layer, as Tensors.
    """
    NAMES = ("K", "V", "Q", "A", "proj", "K2", "V2")

    def __init__(self, **tensors):
        for name in self.NAMES:
            value = tensors.pop(name, None)
            if value is not None and not isinstance(value, Tensor):
                value = Tensor(value)
            setattr(self, name, value)
        if tensors:
            raise UsageError("Unknown weights {0}".format(sorted(tensors)))

    def check(self, cfg):
        for name, shape in cfg.shapes().items():
            value = getattr(self, name)
            if value is None:
                raise UsageError("Missing weight {0} for {1}".format(
                    name, cfg.encoding))
            if tuple(value.shape) != tuple(shape):
                raise UsageError("Weight {0} has shape {1}, expected {2}".format(
                    name, list(value.shape), list(shape)))
        return self

    def params(self):
        return dict((n, getattr(self, n)) for n in self.NAMES
                    if getattr(self, n) is not None)

class PositionalEncoding(object):
    def __init__(self, P, frequencies, method):
        self.P = np.asarray(P, dtype = np.float32)
        self.frequencies = list(frequencies)
        self.method = method

    def tensor(self, dtype = np.float32):
        return Tensor(self.P.astype(dtype), dtype = dtype)

    def gram(self):
        P = self.P.astype(np.float64)
        return P.T @ P

def _frequencies(method, channels):
    pairs = channels // 2
    if method == "fourier":
        return [2 * math.pi * c / (2 * channels) for c in range(1, pairs + 1)]
    return [1.0 / 10000 ** (2.0 * k / channels) for k in range(pairs)]

def _axis_encoding(method, channels, length):
    freqs = _frequencies(method, channels)
    n = np.arange(length, dtype = np.float64)
    P = np.empty((channels, length), dtype = np.float64)
    for k, w in enumerate(freqs):
        P[2 * k] = np.cos(w * n)
        P[2 * k + 1] = np.sin(w * n)
    return P, freqs

def build_encoding(method, c_pe, geometry):
    """
    Builds the C x N encoding matrix. method is "cosine" or "fourier" (an
    encoding tag such as "fourier_decor" is accepted as well). On a grid the
    first half of the channels encodes rows and the second half columns.
    """
    method = "fourier" if method.startswith("fourier") else \
             "cosine" if method.startswith("cosine") else method
    if method not in ("cosine", "fourier"):
        raise ConfigError("No positional encoding for {0!r}".format(method))
    if c_pe <= 0 or c_pe % 2:
        raise ConfigError("c_pe must be a positive even number, got "
                          "{0}".format(c_pe))
    geometry = tuple(geometry)
    if len(geometry) == 1:
        P, freqs = _axis_encoding(method, c_pe, geometry[0])
        return PositionalEncoding(P, freqs, method)
    if c_pe % 4:
        raise ConfigError("c_pe must be divisible by 4 on a grid, got "
                          "{0}".format(c_pe))
    height, width = geometry
    rows, rowfreqs = _axis_encoding(method, c_pe // 2, height)
    cols, colfreqs = _axis_encoding(method, c_pe // 2, width)
    P = np.concatenate([np.repeat(rows, width, axis = 1),
                        np.tile(cols, (1, height))])
    return PositionalEncoding(P, rowfreqs + colfreqs, method)

def coordinates(geometry):
    """
    Normalized coordinates in [-1, 1], one row per axis.
    """
    def axis(length):
        if length == 1:
            return np.zeros(1)
        return np.linspace(-1.0, 1.0, length)
    if len(geometry) == 1:
        return axis(geometry[0])[None, :]
    height, width = geometry
    return np.stack([np.repeat(axis(height), width),
                     np.tile(axis(width), height)])

def _inputs(x, w, pe, cfg):
    """
    Returns the feature maps seen by the K projection and by Q/V.
    """
    if cfg.encoding == "coordconv":
        coords = Tensor(coordinates(cfg.geometry).astype(x.dtype),
                        dtype = x.dtype)
        augmented = concat_rows([x, coords])
        return augmented, augmented
    if cfg.summed:
        with stage("x + P"):
            P = pe.tensor(x.dtype)
            if w.proj is not None:
                P = matmul(w.proj, P)
            summed = add(x, P)
        if cfg.encoding == "cosine_sum_qkv":
            return summed, summed
        return x, summed
    return x, x

def _lambda(xk, xqv, keys, w, pe, cfg):
    with stage("K̄ = softmax_N(Kx)"):
        kbar = softmax_axis(matmul(keys, xk), 1)
    with stage("λ_content = K̄ (Vx)^T"):
        content = matmul(kbar, transpose(matmul(w.V, xqv)))
    with stage("y_content = λ_content^T Qx"):
        y = matmul(transpose(content), matmul(w.Q, xqv))
    if cfg.decor:
        P = pe.tensor(xk.dtype)
        with stage("λ_pos = A K̄ P^T"):
            position = matmul(matmul(w.A, kbar), transpose(P))
        with stage("y = y_content + λ_pos P"):
            y = add(y, matmul(position, P))
    return y

def _checkinput(x, cfg, pe):
    if tuple(x.shape) != (cfg.c_in, cfg.positions):
        raise UsageError("Input {0} does not match c_in={1}, N={2}".format(
            list(x.shape), cfg.c_in, cfg.positions))
    if cfg.usespe and (pe is None or pe.P.shape != (cfg.c_pe, cfg.positions)):
        raise UsageError("{0} needs a {1}x{2} positional encoding".format(
            cfg.encoding, cfg.c_pe, cfg.positions))

def lambda_forward(x, w, pe, cfg):
    """
    One Lambda layer: C_in x N -> C_out x N.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    _checkinput(x, cfg, pe)
    w.check(cfg)
    xk, xqv = _inputs(x, w, pe, cfg)
    return _lambda(xk, xqv, w.K, w, pe, cfg)

def lambda_tt_forward(x, w, pe, cfg):
    """
    Two passes: the first one computes the key matrix from the input,

        K̂[m, c] = sum_n softmax_N(K2 x)[m, n] (V2 x)[m * c_k + c, n],

    the second one is lambda_forward with K replaced by K̂.
    """
    if not cfg.tt:
        raise UsageError("lambda_tt_forward needs cfg.tt = True")
    x = x if isinstance(x, Tensor) else Tensor(x)
    _checkinput(x, cfg, pe)
    w.check(cfg)
    xk, xqv = _inputs(x, w, pe, cfg)
    n = cfg.positions
    with stage("TT: softmax_N(K2 x)"):
        attention = softmax_axis(matmul(w.K2, xk), 1)
    with stage("TT: K̂ = Λ"):
        values = reshape(matmul(w.V2, xk), (cfg.m, cfg.c_k, n))
        keys = contract_positions(attention, values)
    return _lambda(xk, xqv, keys, w, pe, cfg)

def layer_forward(x, w, pe, cfg):
    if cfg.tt:
        return lambda_tt_forward(x, w, pe, cfg)
    return lambda_forward(x, w, pe, cfg)

def init_uniform(rng, shape, fanin):
    """
    Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization.
    """
    bound = 1.0 / math.sqrt(fanin)
    return rng.uniform(-bound, bound, size = shape).astype(np.float32)

def random_weights(cfg, seed):
    rng = np.random.default_rng(seed)
    shapes = cfg.shapes()
    return LambdaWeights(**dict((name, init_uniform(rng, shapes[name],
        shapes[name][1])) for name in LambdaWeights.NAMES if name in shapes))

def encoding_for(cfg):
    if not cfg.usespe:
        return None
    return build_encoding(cfg.encoding, cfg.c_pe, cfg.geometry)

class Layer(object):
    """
    A layer bound to its weights and encoding, callable on C_in x N input.
    """
    def __init__(self, cfg, weights, pe = None):
        self.cfg = cfg
        self.weights = weights.check(cfg)
        self.pe = pe if pe is not None else encoding_for(cfg)

    def __call__(self, x):
        return layer_forward(x, self.weights, self.pe, self.cfg)

    def save(self, directory):
        params = dict((k, v.data) for k, v in self.weights.params().items())
        codec.save_params(directory, params, {"kind": "lambda",
                                              "lambda": self.cfg.todict()})

    @classmethod
    def load(cls, directory):
        params, header = codec.load_params(directory)
        if header.get("kind") != "lambda":
            raise UsageError("{0} does not hold a single Lambda layer".format(
                directory))
        cfg = LambdaConfig.fromdict(header["lambda"])
        return cls(cfg, LambdaWeights(**params))

def circular_shift(x, shift, geometry):
    """
    Rolls the position axis of a C x N array; shift is an int on a sequence
    and a (rows, cols) pair on a grid.
    """
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    if len(geometry) == 1:
        return np.roll(data, int(shift), axis = 1)
    height, width = geometry
    di, dj = shift
    cube = data.reshape(data.shape[0], height, width)
    return np.roll(cube, (int(di), int(dj)), axis = (1, 2)).reshape(data.shape)

def permute(x, permutation):
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    return data[:, np.asarray(permutation)]

def enumerate_shifts(geometry):
    if len(geometry) == 1:
        return list(range(geometry[0]))
    return [(i, j) for i in range(geometry[0]) for j in range(geometry[1])]

def equivariance_probe(layer, x, shift, geometry = None):
    """
    max |layer(shift(x)) - shift(layer(x))|. shift is a circular offset, or a
    permutation array when geometry is None.
    """
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype = np.float32)
    if geometry is None:
        move = lambda a: permute(a, shift)
    else:
        move = lambda a: circular_shift(a, shift, geometry)
    shifted = layer(Tensor(move(data), dtype = data.dtype)).data
    expected = move(layer(Tensor(data, dtype = data.dtype)).data)
    return float(np.max(np.abs(shifted.astype(np.float64) - expected)))
