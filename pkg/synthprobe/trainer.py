"""
Probe networks and their training loop.

A probe network is a 1x1 convolution stem, a body of Lambda layers and a 1x1
convolution head. The Centered Square net maps a 1-channel image to a logit
map through one layer; the Color Code net maps 3+Z channels to Z class
logits through a residual stack of layers.
"""

import csv
import hashlib
import json
import logging
import os

import numpy as np

from synthprobe import codec, config, datasets, metrics
from synthprobe.config import ConfigError, NetSpec
from synthprobe.lambdalayer import (LambdaConfig, LambdaWeights, encoding_for,
    init_uniform, layer_forward)
from synthprobe.tensor import (Tape, Tensor, NumericError, UsageError,
    DataError, add, backward, conv1x1, losses, scale, sigmoid, stage)

logger = logging.getLogger("synthprobe.trainer")

LOSS = {"centered_square": "bce_with_logits",
        "color_code": "softmax_cross_entropy"}

class TrainingError(Exception):
    """
    Training diverged.
    """
    def __init__(self, epoch, batch, message):
        Exception.__init__(self, "epoch {0}, batch {1}: {2}".format(
            epoch, batch, message))
        self.epoch = epoch
        self.batch = batch

def channels(spec):
    """
    (input, output) channel counts of a probe network.
    """
    if spec.task == "color_code":
        return 3 + spec.classes, spec.classes
    return 1, 1

class ProbeNet(object):
    def __init__(self, spec, params):
        self.spec = spec.validate()
        self.c_in, self.c_out = channels(spec)
        self.params = dict((k, np.asarray(v, dtype = np.float32))
                           for k, v in params.items())
        self.pe = encoding_for(self.layer)

    @property
    def layer(self):
        return LambdaConfig(c_in = self.spec.hidden, c_out = self.spec.hidden,
                            m = self.spec.m, c_pe = self.spec.c_pe,
                            encoding = self.spec.encoding, tt = self.spec.tt,
                            geometry = self.spec.geometry)

    @property
    def residual(self):
        return self.spec.task == "color_code"

    @property
    def loss_kind(self):
        return LOSS[self.spec.task]

    def shapes(self):
        hidden = self.spec.hidden
        shapes = {"stem.w": (hidden, self.c_in), "stem.b": (hidden,),
                  "head.w": (self.c_out, hidden), "head.b": (self.c_out,)}
        for i in range(self.spec.layers):
            for name, shape in self.layer.shapes().items():
                shapes["body{0}.{1}".format(i, name)] = shape
        return shapes

    def forward(self, x, params = None):
        """
        C_in x N input to C_out x N logits. params maps names to Tensors
        (on a tape while training); the stored weights are used otherwise.
        """
        if params is None:
            params = dict((k, Tensor(v)) for k, v in self.params.items())
        cfg = self.layer
        with stage("stem"):
            h = conv1x1(x, params["stem.w"], params["stem.b"])
        for i in range(self.spec.layers):
            prefix = "body{0}.".format(i)
            weights = LambdaWeights(**dict((k[len(prefix):], v)
                for k, v in params.items() if k.startswith(prefix)))
            y = layer_forward(h, weights, self.pe, cfg)
            h = add(h, y) if self.residual else y
        with stage("head"):
            return conv1x1(h, params["head.w"], params["head.b"])

    __call__ = forward

    def loss(self, params, batch):
        """
        Mean task loss over a list of (x, target) pairs.
        """
        total = None
        for x, target in batch:
            value = losses(self.forward(x, params), target, self.loss_kind)
            total = value if total is None else add(total, value)
        return scale(total, 1.0 / len(batch))

def init_params(spec, seed):
    """
    Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and zero biases,
    drawn in sorted parameter order.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    net = ProbeNet(spec, {})
    params = {}
    for name, shape in sorted(net.shapes().items()):
        if len(shape) == 1:
            params[name] = np.zeros(shape, dtype = np.float32)
        else:
            params[name] = init_uniform(rng, shape, shape[1])
    net.params = params
    return net

class Adam(object):
    def __init__(self, params, learning_rate = 1e-3, beta1 = 0.9,
                 beta2 = 0.999, eps = 1e-8):
        self.params = params
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.first = dict((k, np.zeros_like(v)) for k, v in params.items())
        self.second = dict((k, np.zeros_like(v)) for k, v in params.items())

    def step(self, grads):
        self.t += 1
        lr = self.learning_rate
        if lr == 0:
            return
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for name, grad in grads.items():
            m = self.first[name]
            v = self.second[name]
            m *= self.beta1
            m += (1 - self.beta1) * grad
            v *= self.beta2
            v += (1 - self.beta2) * grad * grad
            update = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            self.params[name] -= update.astype(np.float32)

def _load(manifest, split):
    records = manifest.split(split)
    if not records:
        raise DataError("Split {0!r} of {1} is empty".format(
            split, manifest.root))
    return [datasets.load_sample(manifest, r) for r in records]

def train(net, manifest, cfg):
    """
    Adam over seeded shuffled mini-batches of the train split. Returns the
    net and the per-epoch history [{"epoch", "loss", "metric"}].
    """
    cfg.validate()
    samples = _load(manifest, "train")
    optimizer = Adam(net.params, cfg.learning_rate, cfg.beta1, cfg.beta2,
                     cfg.eps)
    rng = np.random.default_rng(datasets.derive_seed(cfg.seed, 1))
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(samples))
        total = 0.0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = [samples[i] for i in order[start:start + cfg.batch_size]]
            tape = Tape()
            leaves = dict((k, tape.watch(v)) for k, v in net.params.items())
            try:
                loss = net.loss(leaves, batch)
            except NumericError as e:
                raise TrainingError(epoch, b, str(e))
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(epoch, b, "loss is {0}".format(value))
            grads = backward(loss)
            optimizer.step(dict((k, grads[t]) for k, t in leaves.items()))
            total += value * len(batch)
        row = {"epoch": epoch, "loss": total / len(samples), "metric": None}
        if cfg.eval_every and (epoch + 1) % cfg.eval_every == 0:
            row["metric"] = evaluate(net, manifest, "train").values[_metric(net)]
        history.append(row)
        logger.info("Epoch {0}: loss {1:.6f}".format(epoch, row["loss"]))
    return net, history

def _metric(net):
    return "iou" if net.spec.task == "centered_square" else "masked_accuracy"

def decode(net, logits):
    """
    Decoded prediction: a binary map for squares, class indices for codes.
    """
    logits = logits.data if isinstance(logits, Tensor) else logits
    if net.spec.task == "centered_square":
        return (sigmoid(logits).data > 0.5).astype(np.float32)
    return np.argmax(logits, axis = 0)

def evaluate(net, manifest, split):
    samples = _load(manifest, split)
    loss, score = 0.0, 0.0
    for x, target in samples:
        logits = net.forward(x)
        loss += losses(logits, target, net.loss_kind).item()
        prediction = decode(net, logits)
        if net.spec.task == "centered_square":
            score += metrics.iou(prediction, target)
        else:
            given = x[3:].max(axis = 0) > 0
            score += metrics.masked_accuracy(prediction,
                                             metrics.MaskedCodes(target, given))
    values = {_metric(net): score / len(samples), "loss": loss / len(samples)}
    return metrics.EvalReport(values = values, count = len(samples),
                              split = split)

def evaluate_depth_maps(manifest, split, predictions, pair_seed):
    """
    Scores stored depth predictions against the labels of an RDE split.

    predictions holds one <id>.synt H x W map per sample. Every map is
    scored against the same pair set, drawn from pair_seed.
    """
    records = manifest.split(split)
    if not records:
        raise DataError("Split {0!r} of {1} is empty".format(
            split, manifest.root))
    totals = dict((name, 0.0) for name in ("rmse", "delta_125", "ord"))
    pairs = None
    for record in records:
        if record.get("generator") != "rde":
            raise DataError("Record {0} is not an RDE scene".format(
                record["id"]))
        _, label = datasets.load_sample(manifest, record)
        path = os.path.join(predictions, "{0}.synt".format(record["id"]))
        if not os.path.exists(path):
            raise DataError("Missing prediction {0}".format(path))
        pred = codec.read_tensor(path)
        if pred.shape != label.shape:
            raise DataError("{0}: prediction {1} vs label {2}".format(
                path, list(pred.shape), list(label.shape)))
        if pairs is None or pairs.dims != label.shape:
            pairs = metrics.PairSet.sample(pair_seed, *label.shape)
        for name, value in metrics.evaluate_depth(pred, label, pairs).items():
            totals[name] += value
    values = dict((k, v / len(records)) for k, v in totals.items())
    logger.info("Depth maps of {0} {1} samples: {2}".format(
        len(records), split, values))
    return metrics.EvalReport(values = values, pair_seed = pair_seed,
                              count = len(records), split = split)

def save_net(net, directory):
    spec = dict(vars(net.spec))
    spec["geometry"] = list(net.spec.geometry)
    codec.save_params(directory, net.params, {"kind": "probe", "net": spec,
                                              "lambda": net.layer.todict()})

def load_net(directory):
    params, header = codec.load_params(directory)
    if header.get("kind") != "probe":
        raise UsageError("{0} does not hold a probe network".format(directory))
    spec = dict(header["net"])
    spec["geometry"] = tuple(spec["geometry"])
    net = ProbeNet(NetSpec(**spec), params)
    missing = set(net.shapes()) - set(params)
    if missing:
        raise DataError("{0}: missing parameters {1}".format(
            directory, sorted(missing)))
    return net

def weights_digest(net):
    """
    sha256 over the serialized parameters in name order.
    """
    digest = hashlib.sha256()
    for name in sorted(net.params):
        digest.update(name.encode("utf-8"))
        digest.update(codec.encode_tensor(net.params[name]))
    return digest.hexdigest()

def build_dataset(experiment, out):
    """
    Generates the dataset an experiment trains on.
    """
    data = dict(experiment.dataset)
    spec = experiment.net
    if spec.task == "centered_square":
        height = data.get("height", 64)
        width = data.get("width", 64)
        if tuple(spec.geometry) != (height, width):
            raise ConfigError("Net geometry {0} does not match {1}x{2} "
                              "images".format(spec.geometry, height, width))
        return datasets.build_square(out, height, width, data.get("w", 21))
    count = data.pop("count", 5000)
    test_count = data.pop("test_count", 2000)
    seed = data.pop("seed", 0)
    try:
        cfg = datasets.ColorCodeConfig(**data)
    except TypeError as e:
        raise ConfigError("Malformed color code config: {0}".format(e))
    if tuple(spec.geometry) != (cfg.n,) or spec.classes != cfg.z:
        raise ConfigError("Net geometry {0} / classes {1} do not match N={2}, "
                          "Z={3}".format(spec.geometry, spec.classes, cfg.n,
                                         cfg.z))
    return datasets.build_colorcode(out, count, test_count, seed, cfg)

def write_history(path, history):
    with open(path, "w") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "loss", "metric"])
        for row in history:
            writer.writerow([row["epoch"], repr(row["loss"]),
                             "" if row["metric"] is None else repr(row["metric"])])

def run_experiment(experiment, out):
    """
    Builds the dataset, trains, evaluates both splits and writes data/,
    weights/, report.json, loss_history.csv and run.json under out.
    """
    experiment.validate()
    if not os.path.isdir(out):
        os.makedirs(out)
    manifest = build_dataset(experiment, os.path.join(out, "data"))
    net = init_params(experiment.net, experiment.train.seed)
    net, history = train(net, manifest, experiment.train)
    reports = dict((split, evaluate(net, manifest, split))
                   for split in ("train", "test"))
    gap = metrics.generalization_gap(reports["test"].values["loss"],
                                     reports["train"].values["loss"])
    reports["test"].values["generalization_gap"] = gap
    save_net(net, os.path.join(out, "weights"))
    write_history(os.path.join(out, "loss_history.csv"), history)
    document = {"experiment": experiment.experiment,
                "variant": experiment.variant,
                "reports": dict((k, v.todict()) for k, v in reports.items())}
    with open(os.path.join(out, "report.json"), "w") as f:
        json.dump(document, f, indent = 2, sort_keys = True)
    with open(os.path.join(out, "run.json"), "w") as f:
        json.dump({"command": "train", "config": experiment.todict(),
                   "manifest": manifest.digest(),
                   "weights": weights_digest(net)}, f, indent = 2,
                  sort_keys = True)
    if config.database:
        from synthprobe import models
        models.Run.record(out, document, config.database)
    logger.info("Finished {0}/{1}: {2}".format(experiment.experiment,
        experiment.variant, dict((k, v.values) for k, v in reports.items())))
    return document
