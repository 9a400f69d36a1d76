"""
Evaluation metrics: depth metrics (RMSE, delta 1.25, ordinal error), IOU of
binary maps and the accuracy of masked codes. All metrics are pure functions
of numpy arrays.
"""

import json
import logging
import math
from collections import namedtuple
from dataclasses import dataclass, field, asdict

import numpy as np

from synthprobe.tensor import DimensionError, UsageError, DataError

logger = logging.getLogger("synthprobe.metrics")

EPS = 1e-6
TAU = 0.03
PAIRS = 50000

METRICS = ("iou", "masked_accuracy", "loss", "rmse", "delta_125", "ord",
           "generalization_gap")
HIGHER_IS_BETTER = ("iou", "masked_accuracy")

def _pair(pred, gt, op):
    pred = np.asarray(pred, dtype = np.float64)
    gt = np.asarray(gt, dtype = np.float64)
    if pred.shape != gt.shape:
        raise DimensionError("{0}: prediction {1} vs ground truth {2}".format(
            op, list(pred.shape), list(gt.shape)))
    return pred, gt

def rmse(pred, gt):
    pred, gt = _pair(pred, gt, "rmse")
    return float(np.sqrt(np.mean((pred - gt) ** 2)))

def delta_125(pred, gt, eps = EPS):
    """
    Fraction of pixels with max(pred/gt, gt/pred) > 1.25; lower is better.
    """
    pred, gt = _pair(pred, gt, "delta_125")
    pred = np.maximum(pred, eps)
    ratio = np.maximum(pred / gt, gt / pred)
    return float(np.mean(ratio > 1.25))

class PairSet(object):
    """
    A fixed set of pixel pairs, shared by every evaluated model. pairs is a
    count x 4 array of (i1, j1, i2, j2).
    """
    def __init__(self, seed, pairs, dims):
        self.seed = seed
        self.pairs = np.asarray(pairs, dtype = np.int64).reshape(-1, 4)
        self.dims = tuple(dims)

    def __len__(self):
        return len(self.pairs)

    @classmethod
    def sample(cls, seed, height, width, count = PAIRS):
        total = height * width
        if total < 2:
            raise UsageError("Cannot draw distinct pairs on a {0}x{1} "
                             "image".format(height, width))
        rng = np.random.default_rng(seed)
        first = rng.integers(0, total, size = count)
        second = rng.integers(0, total, size = count)
        same = first == second
        while np.any(same):
            second[same] = rng.integers(0, total, size = int(same.sum()))
            same = first == second
        pairs = np.stack([first // width, first % width,
                          second // width, second % width], axis = 1)
        return cls(seed, pairs, (height, width))

    def todict(self):
        return {"seed": self.seed, "dims": list(self.dims),
                "pairs": self.pairs.tolist()}

    @classmethod
    def fromdict(cls, data):
        return cls(data["seed"], data["pairs"], data["dims"])

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.todict(), f)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.fromdict(json.load(f))

def _ordinal(a, b, tau):
    ratio = a / b
    return np.where(ratio >= 1 + tau, 1, np.where(ratio <= 1 / (1 + tau), -1, 0))

def ordinal_error(pred, gt, pairs, tau = TAU, eps = EPS):
    """
    Fraction of pairs whose depth-order label under pred differs from the
    label under gt. Pairs with label 0 are counted.
    """
    pred, gt = _pair(pred, gt, "ordinal_error")
    p = pairs.pairs
    if pred.ndim != 2:
        raise DimensionError("ordinal_error needs H x W maps, got {0}".format(
            list(pred.shape)))
    if len(p) == 0:
        raise UsageError("ordinal_error needs at least one pair")
    height, width = pred.shape
    if (p.min() < 0 or p[:, [0, 2]].max() >= height
            or p[:, [1, 3]].max() >= width):
        raise UsageError("Pair set for {0} is out of bounds for a {1}x{2} "
                         "map".format(list(pairs.dims), height, width))
    pred = np.maximum(pred, eps)
    truth = _ordinal(gt[p[:, 0], p[:, 1]], gt[p[:, 2], p[:, 3]], tau)
    guess = _ordinal(pred[p[:, 0], p[:, 1]], pred[p[:, 2], p[:, 3]], tau)
    return float(np.mean(truth != guess))

def iou(pred, gt):
    """
    |pred & gt| / |pred | gt| of binary maps; 1 when both are empty.
    """
    pred, gt = _pair(pred, gt, "iou")
    pred, gt = pred > 0.5, gt > 0.5
    union = np.count_nonzero(pred | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & gt) / float(union)

MaskedCodes = namedtuple("MaskedCodes", ["target", "mask"])

def masked_accuracy(pred, sample):
    """
    Accuracy over the positions whose code is hidden (mask False). sample is
    anything with target and mask arrays, e.g. a ColorCodeSample.
    """
    pred = np.asarray(pred)
    target = np.asarray(sample.target)
    given = np.asarray(sample.mask, dtype = bool)
    if pred.shape != target.shape or given.shape != target.shape:
        raise DimensionError("masked_accuracy: {0} predictions for {1} "
                             "positions".format(list(pred.shape),
                                                list(target.shape)))
    hidden = ~given
    if not hidden.any():
        return 1.0
    return np.count_nonzero((pred == target) & hidden) / float(hidden.sum())

def generalization_gap(test_loss, train_loss):
    return float(test_loss) - float(train_loss)

def evaluate_depth(pred, gt, pairs):
    return {"rmse": rmse(pred, gt), "delta_125": delta_125(pred, gt),
            "ord": ordinal_error(pred, gt, pairs)}

@dataclass
class EvalReport:
    values: dict = field(default_factory = dict)
    pair_seed: int = None
    count: int = 0
    split: str = "test"

    def __post_init__(self):
        for name, value in self.values.items():
            if name not in METRICS:
                raise DataError("Unknown metric {0!r}".format(name))
            if not math.isfinite(value):
                raise DataError("Metric {0} is not finite: {1}".format(
                    name, value))

    def scaled(self):
        """
        Values multiplied by 100, the convention for printed tables.
        """
        return dict((k, 100.0 * v) for k, v in self.values.items())

    def todict(self):
        return asdict(self)

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.todict(), f, indent = 2, sort_keys = True)

    @classmethod
    def fromdict(cls, data):
        return cls(values = dict(data.get("values", {})),
                   pair_seed = data.get("pair_seed"),
                   count = data.get("count", 0),
                   split = data.get("split", "test"))

    @classmethod
    def load(cls, path):
        try:
            with open(path) as f:
                return cls.fromdict(json.load(f))
        except IOError as e:
            raise DataError("Cannot read report {0}: {1}".format(path, e))
        except ValueError as e:
            raise DataError("{0} is not a report: {1}".format(path, e))
