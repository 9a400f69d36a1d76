"""
Process-wide settings and experiment configuration.

Settings are plain module globals read from the environment, so that

>>> from synthprobe import config
>>> config.processes

works anywhere. Experiment files are JSON and are parsed with
load_experiment().
"""

import hashlib
import json
import logging
import multiprocessing
import os
from dataclasses import dataclass, field, asdict

logger = logging.getLogger("synthprobe.config")

loglevel  = os.environ.get("SYNTHPROBE_LOGLEVEL", "WARNING").upper()
database  = os.environ.get("SYNTHPROBE_DATABASE") or None

# probably no need to mess below this line

def _threads():
    value = os.environ.get("SYNTHPROBE_THREADS")
    if not value:
        return multiprocessing.cpu_count()
    try:
        return max(1, int(value))
    except ValueError:
        logger.warning("Ignoring SYNTHPROBE_THREADS={0!r}".format(value))
        return multiprocessing.cpu_count()

processes = _threads()

ENCODINGS = ("none", "cosine_sum_qkv", "cosine_sum_qv", "cosine_decor",
             "fourier_decor", "coordconv")
TASKS = ("centered_square", "color_code")
EXPERIMENTS = {"centered_square_table2": "centered_square",
               "color_code_table3": "color_code"}

class ConfigError(ValueError):
    """
    Raised when a configuration value is invalid.
    """
    def __init__(self, message):
        ValueError.__init__(self, message)

def cfg_hash(cfg):
    """
    Stable short digest of a generator configuration.
    """
    canonical = json.dumps(cfg, sort_keys = True, separators = (",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]

@dataclass
class NetSpec:
    task: str = "centered_square"
    encoding: str = "fourier_decor"
    tt: bool = False
    hidden: int = 64
    m: int = 64
    c_pe: int = 64
    layers: int = 1
    geometry: tuple = (64, 64)
    classes: int = 32

    def validate(self):
        if self.task not in TASKS:
            raise ConfigError("Unknown task {0!r}".format(self.task))
        if self.encoding not in ENCODINGS:
            raise ConfigError("Unknown encoding {0!r}".format(self.encoding))
        for name in ("hidden", "m", "layers", "classes"):
            if getattr(self, name) <= 0:
                raise ConfigError("{0} must be positive".format(name))
        if self.c_pe <= 0 or self.c_pe % 2:
            raise ConfigError("c_pe must be a positive even number, "
                              "got {0}".format(self.c_pe))
        if len(self.geometry) == 2 and self.c_pe % 4:
            raise ConfigError("c_pe must be divisible by 4 on a grid, "
                              "got {0}".format(self.c_pe))
        if len(self.geometry) not in (1, 2) or min(self.geometry) <= 0:
            raise ConfigError("Bad geometry {0}".format(self.geometry))
        return self

@dataclass
class TrainConfig:
    seed: int = 0
    epochs: int = 200
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    eval_every: int = 0

    def validate(self):
        if self.epochs < 0 or self.batch_size <= 0:
            raise ConfigError("epochs and batch_size must be positive")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must not be negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.eps <= 0:
            raise ConfigError("Bad optimizer hyperparameters")
        if self.eval_every < 0:
            raise ConfigError("eval_every must not be negative")
        return self

@dataclass
class ExperimentConfig:
    experiment: str = "centered_square_table2"
    variant: str = "fourier_decor"
    dataset: dict = field(default_factory = dict)
    net: NetSpec = field(default_factory = NetSpec)
    train: TrainConfig = field(default_factory = TrainConfig)

    def validate(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError("Unknown experiment {0!r}".format(self.experiment))
        if self.net.task != EXPERIMENTS[self.experiment]:
            raise ConfigError("Experiment {0} needs task {1}".format(
                self.experiment, EXPERIMENTS[self.experiment]))
        self.net.validate()
        self.train.validate()
        return self

    def todict(self):
        data = asdict(self)
        data["net"]["geometry"] = list(self.net.geometry)
        return data

def parse_experiment(data):
    """
    Builds an ExperimentConfig from a decoded JSON document.
    """
    try:
        net = dict(data.get("net", {}))
        if "geometry" in net:
            net["geometry"] = tuple(int(x) for x in net["geometry"])
        variant = data.get("variant", "fourier_decor")
        if variant in ("lambda", "lambda_tt"):
            net["tt"] = variant == "lambda_tt"
            net.setdefault("encoding", "none")
        elif variant in ENCODINGS:
            net["encoding"] = variant
        else:
            raise ConfigError("Unknown variant {0!r}".format(variant))
        experiment = ExperimentConfig(
            experiment = data.get("experiment", "centered_square_table2"),
            variant = variant,
            dataset = dict(data.get("dataset", {})),
            net = NetSpec(**net),
            train = TrainConfig(**data.get("train", {})))
    except TypeError as e:
        raise ConfigError("Malformed experiment config: {0}".format(e))
    return experiment.validate()

def load_experiment(path):
    """
    Reads an experiment JSON file.
    """
    try:
        with open(path) as f:
            data = json.load(f)
    except ValueError as e:
        raise ConfigError("{0} is not valid JSON: {1}".format(path, e))
    logger.info("Loaded experiment config {0}".format(path))
    return parse_experiment(data)

def bundled(name):
    """
    Path of an experiment config shipped with the package.
    """
    path = os.path.join(os.path.dirname(os.path.abspath(__file__)),
                        "experiments", name + ".json")
    if not os.path.exists(path):
        raise ConfigError("No bundled experiment {0!r}".format(name))
    return path
