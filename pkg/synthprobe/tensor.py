"""
A minimal dense tensor with reverse-mode automatic differentiation.

Only the operations the probe networks need are provided. A Tensor created
through a Tape is a leaf; any op whose inputs live on a tape records itself
there, and backward() walks the recording in reverse:

>>> from synthprobe.tensor import Tape, matmul, reduce_sum, backward
>>> tape = Tape()
>>> w = tape.watch([[1.0, 2.0]])
>>> x = tape.watch([[3.0], [4.0]])
>>> grads = backward(reduce_sum(matmul(w, x)))
>>> grads[w]
array([[3., 4.]], dtype=float32)

Tensors without a tape record nothing, which is how evaluation runs.
"""

import contextlib
import logging
import threading

import numpy as np

logger = logging.getLogger("synthprobe.tensor")

DTYPE = np.float32

class TensorError(Exception):
    """
    Base class for tensor-core failures.
    """

class DimensionError(TensorError):
    """
    Operand shapes do not agree.
    """

class NumericError(TensorError):
    """
    A forward op produced NaN or Inf.
    """
    def __init__(self, stage, message):
        TensorError.__init__(self, "{0}: {1}".format(stage, message))
        self.stage = stage

class UsageError(TensorError):
    """
    The API was called in a way it does not support.
    """

class DataError(TensorError):
    """
    Input data is malformed (bad class index, missing file, ...).
    """

_local = threading.local()

@contextlib.contextmanager
def stage(name):
    """
    Names the computation stage reported by NumericError.
    """
    previous = getattr(_local, "stage", None)
    _local.stage = name
    try:
        yield
    finally:
        _local.stage = previous

def _checkfinite(data, op):
    if not np.all(np.isfinite(data)):
        where = getattr(_local, "stage", None) or op
        raise NumericError(where, "non-finite output of {0}".format(op))

class Node(object):
    __slots__ = ("index", "parents", "vjp", "op")

    def __init__(self, index, parents, vjp, op):
        self.index = index
        self.parents = parents
        self.vjp = vjp
        self.op = op

class Tensor(object):
    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape = None, node = None, dtype = None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype == np.float64:
                dtype = np.float64
            else:
                dtype = DTYPE
        array = np.array(data, dtype = dtype, order = "C")
        array.setflags(write = False)
        self.data = array
        self.tape = tape
        self.node = node

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return np.array(self.data)

    def item(self):
        if self.data.size != 1:
            raise UsageError("item() needs a single-element tensor, "
                             "got shape {0}".format(self.shape))
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return "Tensor(shape={0}, tracked={1})".format(
            list(self.shape), self.tape is not None)

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

class Tape(object):
    """
    Records operations in forward order. A tape belongs to one thread.
    """
    def __init__(self):
        self.nodes = []

    def watch(self, data):
        """
        Registers a leaf (a parameter or an input to differentiate).
        """
        if isinstance(data, Tensor):
            data = data.data
        node = Node(len(self.nodes), (), None, "leaf")
        self.nodes.append(node)
        return Tensor(data, self, node)

    def record(self, data, parents, vjp, op):
        node = Node(len(self.nodes), parents, vjp, op)
        self.nodes.append(node)
        return Tensor(data, self, node, dtype = data.dtype)

    def backward(self, loss):
        if loss.tape is not self:
            raise UsageError("loss was not recorded on this tape")
        if loss.data.size != 1:
            raise UsageError("backward() needs a scalar loss, got shape "
                             "{0}".format(list(loss.shape)))
        grads = [None] * len(self.nodes)
        grads[loss.node.index] = np.ones_like(loss.data)
        for index in range(loss.node.index, -1, -1):
            node = self.nodes[index]
            grad = grads[index]
            if grad is None or node.vjp is None:
                continue
            for parent, pgrad in zip(node.parents, node.vjp(grad)):
                if pgrad is None or parent.node is None:
                    continue
                i = parent.node.index
                if grads[i] is None:
                    grads[i] = np.array(pgrad, dtype = parent.dtype)
                else:
                    grads[i] += pgrad
        logger.debug("Backward pass over {0} nodes".format(loss.node.index + 1))
        return Gradients(self, grads)

class Gradients(object):
    """
    Gradient map keyed by leaf tensor.
    """
    def __init__(self, tape, grads):
        self.tape = tape
        self.grads = grads

    def __getitem__(self, tensor):
        if tensor.tape is not self.tape:
            raise UsageError("tensor is not on the differentiated tape")
        grad = self.grads[tensor.node.index]
        if grad is None:
            return np.zeros_like(tensor.data)
        return grad

def astensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(value)

def _apply(op, data, parents, vjp):
    _checkfinite(data, op)
    tapes = set(p.tape for p in parents if p.tape is not None)
    if not tapes:
        return Tensor(data, dtype = data.dtype)
    if len(tapes) > 1:
        raise UsageError("{0} mixes tensors from different tapes".format(op))
    return tapes.pop().record(data, parents, vjp, op)

def _sameshape(op, a, b):
    if a.shape != b.shape:
        raise DimensionError("{0}: shapes {1} and {2} are not "
                             "elementwise-compatible".format(
                             op, list(a.shape), list(b.shape)))

def matmul(a, b):
    a, b = astensor(a), astensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError("matmul: cannot multiply {0} by {1}".format(
            list(a.shape), list(b.shape)))
    A, B = a.data, b.data
    def vjp(g):
        return g @ B.T, A.T @ g
    return _apply("matmul", A @ B, (a, b), vjp)

def transpose(x):
    x = astensor(x)
    if x.data.ndim != 2:
        raise DimensionError("transpose needs a matrix, got {0}".format(
            list(x.shape)))
    return _apply("transpose", np.ascontiguousarray(x.data.T), (x,),
                  lambda g: (g.T,))

def reshape(x, shape):
    x = astensor(x)
    shape = tuple(shape)
    if int(np.prod(shape)) != x.data.size:
        raise DimensionError("reshape: {0} does not fit {1}".format(
            list(x.shape), list(shape)))
    original = x.shape
    return _apply("reshape", x.data.reshape(shape), (x,),
                  lambda g: (g.reshape(original),))

def concat_rows(tensors):
    tensors = [astensor(t) for t in tensors]
    widths = set(t.shape[1:] for t in tensors)
    if len(widths) != 1:
        raise DimensionError("concat_rows: trailing shapes differ: {0}".format(
            [list(t.shape) for t in tensors]))
    splits = np.cumsum([t.shape[0] for t in tensors])[:-1]
    def vjp(g):
        return tuple(np.split(g, splits, axis = 0))
    return _apply("concat_rows", np.concatenate([t.data for t in tensors]),
                  tuple(tensors), vjp)

def softmax_axis(x, axis):
    """
    Exp-normalizes x along axis with max-subtraction.
    """
    x = astensor(x)
    if not 0 <= axis < x.data.ndim:
        raise DimensionError("softmax_axis: axis {0} out of range for "
                             "shape {1}".format(axis, list(x.shape)))
    shifted = x.data - x.data.max(axis = axis, keepdims = True)
    e = np.exp(shifted)
    y = e / e.sum(axis = axis, keepdims = True)
    def vjp(g):
        return (y * (g - (g * y).sum(axis = axis, keepdims = True)),)
    return _apply("softmax", y, (x,), vjp)

def relu(x):
    x = astensor(x)
    mask = x.data > 0
    return _apply("relu", np.where(mask, x.data, 0).astype(x.dtype), (x,),
                  lambda g: (g * mask,))

def sigmoid(x):
    x = astensor(x)
    y = _sigmoid(x.data)
    return _apply("sigmoid", y, (x,), lambda g: (g * y * (1 - y),))

def _sigmoid(z):
    out = np.empty_like(z)
    positive = z >= 0
    out[positive] = 1 / (1 + np.exp(-z[positive]))
    e = np.exp(z[~positive])
    out[~positive] = e / (1 + e)
    return out

def add(a, b):
    a, b = astensor(a), astensor(b)
    _sameshape("add", a, b)
    return _apply("add", a.data + b.data, (a, b), lambda g: (g, g))

def sub(a, b):
    a, b = astensor(a), astensor(b)
    _sameshape("sub", a, b)
    return _apply("sub", a.data - b.data, (a, b), lambda g: (g, -g))

def mul(a, b):
    a, b = astensor(a), astensor(b)
    _sameshape("mul", a, b)
    A, B = a.data, b.data
    return _apply("mul", A * B, (a, b), lambda g: (g * B, g * A))

def scale(x, factor):
    x = astensor(x)
    factor = float(factor)
    return _apply("scale", (x.data * factor).astype(x.dtype), (x,),
                  lambda g: (g * factor,))

POINTWISE = {"relu": relu, "sigmoid": sigmoid, "add": add, "mul": mul,
             "sub": sub, "scale": scale}

def pointwise(x, fn, other = None):
    """
    Dispatches an elementwise op by name; binary ops take other, scale takes
    a number.
    """
    try:
        op = POINTWISE[fn]
    except KeyError:
        raise UsageError("Unknown pointwise op {0!r}".format(fn))
    if fn in ("relu", "sigmoid"):
        return op(x)
    if other is None:
        raise UsageError("{0} needs a second operand".format(fn))
    return op(x, other)

def add_bias(x, b):
    """
    Adds b[c] to every position of row c. The only broadcast supported.
    """
    x, b = astensor(x), astensor(b)
    if x.data.ndim != 2 or b.data.ndim != 1 or b.shape[0] != x.shape[0]:
        raise DimensionError("add_bias: bias {0} does not match {1}".format(
            list(b.shape), list(x.shape)))
    return _apply("add_bias", x.data + b.data[:, None], (x, b),
                  lambda g: (g, g.sum(axis = 1)))

def conv1x1(x, w, b):
    """
    y[:, n] = w x[:, n] + b for every position n.
    """
    x, w, b = astensor(x), astensor(w), astensor(b)
    if w.data.ndim != 2 or x.data.ndim != 2 or w.shape[1] != x.shape[0]:
        raise DimensionError("conv1x1: weights {0} do not match input "
                             "{1}".format(list(w.shape), list(x.shape)))
    return add_bias(matmul(w, x), b)

def reduce_sum(x):
    x = astensor(x)
    shape = x.shape
    return _apply("reduce_sum", np.asarray(x.data.sum(), dtype = x.dtype),
                  (x,), lambda g: (np.full(shape, g, dtype = g.dtype),))

def contract_positions(s, t):
    """
    out[m, c] = sum_n s[m, n] t[m, c, n].
    """
    s, t = astensor(s), astensor(t)
    if (s.data.ndim != 2 or t.data.ndim != 3 or t.shape[0] != s.shape[0]
            or t.shape[2] != s.shape[1]):
        raise DimensionError("contract_positions: {0} and {1} disagree".format(
            list(s.shape), list(t.shape)))
    S, T = s.data, t.data
    def vjp(g):
        return (np.einsum("mc,mcn->mn", g, T),
                np.einsum("mc,mn->mcn", g, S))
    return _apply("contract_positions", np.einsum("mn,mcn->mc", S, T),
                  (s, t), vjp)

def _target(target, dtype):
    if isinstance(target, Tensor):
        target = target.data
    return np.asarray(target, dtype = dtype)

def mse(pred, target):
    pred = astensor(pred)
    t = _target(target, pred.dtype)
    if t.shape != pred.shape:
        raise DimensionError("mse: {0} vs target {1}".format(
            list(pred.shape), list(t.shape)))
    diff = pred.data - t
    n = diff.size
    return _apply("mse", np.asarray((diff * diff).sum() / n, dtype = pred.dtype),
                  (pred,), lambda g: (g * 2 * diff / n,))

def bce_with_logits(pred, target):
    pred = astensor(pred)
    t = _target(target, pred.dtype)
    if t.shape != pred.shape:
        raise DimensionError("bce_with_logits: {0} vs target {1}".format(
            list(pred.shape), list(t.shape)))
    z = pred.data
    n = z.size
    terms = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    grad = (_sigmoid(z) - t) / n
    return _apply("bce_with_logits", np.asarray(terms.sum() / n, dtype = z.dtype),
                  (pred,), lambda g: (g * grad,))

def softmax_cross_entropy(pred, target):
    """
    pred holds class logits along axis 0 and positions along axis 1; target
    holds one class index per position.
    """
    pred = astensor(pred)
    if pred.data.ndim != 2:
        raise DimensionError("softmax_cross_entropy needs classes x positions, "
                             "got {0}".format(list(pred.shape)))
    k, n = pred.shape
    idx = np.asarray(target.data if isinstance(target, Tensor) else target)
    if idx.shape != (n,):
        raise DimensionError("softmax_cross_entropy: target {0} for {1} "
                             "positions".format(list(idx.shape), n))
    idx = idx.astype(np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= k):
        raise DataError("class index out of range [0, {0})".format(k))
    z = pred.data
    shifted = z - z.max(axis = 0, keepdims = True)
    logsum = np.log(np.exp(shifted).sum(axis = 0))
    picked = shifted[idx, np.arange(n)]
    loss = (logsum - picked).sum() / n
    probs = np.exp(shifted - logsum)
    probs[idx, np.arange(n)] -= 1
    grad = probs / n
    return _apply("softmax_cross_entropy", np.asarray(loss, dtype = z.dtype),
                  (pred,), lambda g: (g * grad,))

LOSSES = {"mse": mse, "bce_with_logits": bce_with_logits,
          "softmax_cross_entropy": softmax_cross_entropy}

def losses(pred, target, kind):
    """
    Mean-reduced training objectives, differentiable w.r.t. pred.
    """
    try:
        return LOSSES[kind](pred, target)
    except KeyError:
        raise UsageError("Unknown loss {0!r}".format(kind))

def backward(loss):
    """
    Populates gradients of every leaf reachable from the scalar loss.
    """
    if not isinstance(loss, Tensor) or loss.tape is None:
        raise UsageError("backward() called on a tensor that is not on a tape")
    return loss.tape.backward(loss)

class GradcheckResult(object):
    def __init__(self, max_error, worst, numeric, analytic):
        self.max_error = max_error
        self.worst = worst
        self.numeric = numeric
        self.analytic = analytic

    def ok(self, rtol = 1e-3):
        return self.max_error <= rtol

    def __repr__(self):
        return "GradcheckResult(max_error={0:.3g}, worst={1})".format(
            self.max_error, self.worst)

def gradcheck(fn, params, h = 1e-3, floor = 1e-2):
    """
    Compares tape gradients with central finite differences.

    fn maps a dict of name -> Tensor to a scalar loss Tensor. Both passes run
    in float64. The error of an entry is |a - b| / max(|a|, |b|, floor).
    """
    params = dict((k, np.array(v, dtype = np.float64)) for k, v in params.items())
    tape = Tape()
    leaves = dict((k, tape.watch(v)) for k, v in params.items())
    grads = backward(fn(leaves))

    def evaluate(values):
        return float(fn(dict((k, Tensor(v)) for k, v in values.items())).item())

    numeric, analytic = {}, {}
    worst, max_error = None, 0.0
    for name in sorted(params):
        value = params[name]
        estimate = np.zeros_like(value)
        for i in range(value.size):
            flat = value.reshape(-1)
            original = flat[i]
            flat[i] = original + h
            plus = evaluate(params)
            flat[i] = original - h
            minus = evaluate(params)
            flat[i] = original
            estimate.reshape(-1)[i] = (plus - minus) / (2 * h)
        exact = np.asarray(grads[leaves[name]], dtype = np.float64)
        scale = np.maximum(np.maximum(np.abs(exact), np.abs(estimate)), floor)
        error = float(np.max(np.abs(exact - estimate) / scale)) if value.size else 0.0
        numeric[name], analytic[name] = estimate, exact
        if error >= max_error:
            worst, max_error = name, error
    return GradcheckResult(max_error, worst, numeric, analytic)
