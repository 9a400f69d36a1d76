"""
Centered Square and Color Code generators, dataset manifests and the
emitters that write samples of all three datasets to disk.

Every generator is a pure function of (seed, cfg). Per-sample seeds are
derived from the run seed with derive_seed(), so samples can be produced in
any order, or in parallel, and still come out identical.
"""

import hashlib
import json
import logging
import multiprocessing
import os
from dataclasses import dataclass, asdict

import numpy as np

from synthprobe import codec, config, rde
from synthprobe.config import ConfigError, cfg_hash
from synthprobe.rde import GenerationError, Verdict, PASS
from synthprobe.tensor import DataError

logger = logging.getLogger("synthprobe.datasets")

MASK64 = (1 << 64) - 1

def derive_seed(seed, index):
    """
    splitmix64 of seed XOR index.
    """
    z = (int(seed) ^ int(index)) & MASK64
    z = (z + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)

class SquareSample(object):
    def __init__(self, center, height, width, w):
        self.center = center
        self.height = height
        self.width = width
        self.w = w

    @property
    def input(self):
        image = np.zeros((1, self.height, self.width), dtype = np.uint8)
        image[0, self.center[0], self.center[1]] = 1
        return image

    @property
    def target(self):
        image = np.zeros((1, self.height, self.width), dtype = np.uint8)
        h = self.w // 2
        r, c = self.center
        image[0, r - h:r + h + 1, c - h:c + h + 1] = 1
        return image

def generate_centered_square(height, width, w):
    """
    All no-crop centers, split into the central block (train) and the rest
    (test), both in row-major order.
    """
    if w % 2 == 0:
        raise ConfigError("Square width must be odd, got {0}".format(w))
    if not 0 < w < min(height, width):
        raise ConfigError("Square width {0} does not fit {1}x{2}".format(
            w, height, width))
    h = w // 2
    vr, vc = height - w + 1, width - w + 1
    tr, tc = vr // 2, vc // 2
    r0, c0 = h + (vr - tr) // 2, h + (vc - tc) // 2
    train, test = [], []
    for r in range(h, height - h):
        for c in range(h, width - h):
            sample = SquareSample((r, c), height, width, w)
            if r0 <= r < r0 + tr and c0 <= c < c0 + tc:
                train.append(sample)
            else:
                test.append(sample)
    return train, test

def verify_square(image, target, w):
    """
    Checks a stored Centered Square pair (arrays of shape H x W).
    """
    image, target = np.asarray(image) > 0, np.asarray(target) > 0
    points = np.argwhere(image)
    if len(points) != 1:
        return Verdict(False, "expected one white pixel", len(points))
    r, c = points[0]
    h = w // 2
    expected = np.zeros_like(target)
    if r < h or c < h or r + h >= image.shape[0] or c + h >= image.shape[1]:
        return Verdict(False, "cropped square", (int(r), int(c)))
    expected[r - h:r + h + 1, c - h:c + h + 1] = True
    if not np.array_equal(expected, target):
        return Verdict(False, "target is not the centered square",
                       (int(r), int(c)))
    return PASS

@dataclass
class ColorCodeConfig:
    n: int = 128
    k: int = 10
    z: int = 32
    mask_frac: float = 0.5
    min_color_dist: int = 0
    retry_budget: int = 1000
    repair: bool = True

    def validate(self):
        if self.k <= 0 or self.k > self.z:
            raise ConfigError("Need 0 < k <= Z, got k={0}, Z={1}".format(
                self.k, self.z))
        if 2 * self.k > self.n:
            raise ConfigError("Need k <= N/2, got k={0}, N={1}".format(
                self.k, self.n))
        if not 0 <= self.mask_frac <= 0.5:
            raise ConfigError("mask_frac must lie in [0, 0.5]")
        if self.min_color_dist < 0 or self.retry_budget <= 0:
            raise ConfigError("Bad min_color_dist or retry_budget")
        return self

    def todict(self):
        return asdict(self)

class ColorCodeSample(object):
    """
    mask[n] is True where the code of position n is given.
    """
    def __init__(self, colors, sigma, codes, mask, z):
        self.colors = colors
        self.sigma = sigma
        self.codes = codes
        self.mask = mask
        self.z = z

    @property
    def n(self):
        return len(self.sigma)

    @property
    def input(self):
        x = np.zeros((3 + self.z, self.n), dtype = np.float32)
        x[:3] = self.colors[self.sigma].T / 255.0
        given = np.nonzero(self.mask)[0]
        x[3 + self.codes[self.sigma[given]], given] = 1.0
        return x

    @property
    def target(self):
        return self.codes[self.sigma].astype(np.int64)

def _colors(rng, cfg):
    if cfg.min_color_dist <= 0:
        return rng.integers(0, 256, size = (cfg.k, 3))
    colors = []
    for _ in range(cfg.retry_budget):
        candidate = rng.integers(0, 256, size = 3)
        if all(np.abs(candidate - c).max() >= cfg.min_color_dist for c in colors):
            colors.append(candidate)
            if len(colors) == cfg.k:
                return np.array(colors)
    raise GenerationError("Could not draw {0} colors {1} apart".format(
        cfg.k, cfg.min_color_dist), cfg)

def _repair(rng, sigma, mask, k):
    for color in range(k):
        if np.any(mask & (sigma == color)):
            continue
        given = np.bincount(sigma[mask], minlength = k)
        donors = np.nonzero(mask & (given[sigma] >= 2))[0]
        mask[rng.choice(np.nonzero(sigma == color)[0])] = True
        mask[rng.choice(donors)] = False
    return mask

def generate_colorcode(seed, cfg = None):
    cfg = (cfg or ColorCodeConfig()).validate()
    rng = np.random.default_rng(seed)
    colors = _colors(rng, cfg)
    codes = rng.choice(cfg.z, size = cfg.k, replace = False)
    for _ in range(cfg.retry_budget):
        sigma = rng.integers(0, cfg.k, size = cfg.n)
        if len(np.unique(sigma)) == cfg.k:
            break
    else:
        raise GenerationError("No surjective assignment in {0} draws".format(
            cfg.retry_budget), cfg)
    mask = np.ones(cfg.n, dtype = bool)
    mask[rng.choice(cfg.n, size = int(cfg.n * cfg.mask_frac), replace = False)] = False
    if cfg.repair:
        mask = _repair(rng, sigma, mask, cfg.k)
    return ColorCodeSample(colors, sigma, codes, mask, cfg.z)

def verify_colorcode(x, target):
    """
    Every masked code must be readable from a given position of the same
    color, and all given positions of a color must agree.
    """
    x = np.asarray(x)
    target = np.asarray(target)
    colors = np.round(x[:3] * 255).astype(np.int64).T
    codes = x[3:]
    given = codes.max(axis = 0) > 0
    known = {}
    for n in np.nonzero(given)[0]:
        key = tuple(colors[n])
        code = int(np.argmax(codes[:, n]))
        if code != target[n]:
            return Verdict(False, "given code differs from target", int(n))
        if known.setdefault(key, code) != code:
            return Verdict(False, "conflicting codes for one color", int(n))
    for n in np.nonzero(~given)[0]:
        code = known.get(tuple(colors[n]))
        if code is None:
            return Verdict(False, "color without a given code", int(n))
        if code != target[n]:
            return Verdict(False, "target differs from the color's code", int(n))
    return PASS

class DatasetManifest(object):
    """
    JSON-lines index of a dataset. File paths are relative to the directory
    holding the manifest.
    """
    FILENAME = "manifest.jsonl"

    def __init__(self, records = None, root = "."):
        self.records = list(records or [])
        self.root = root

    def split(self, name):
        return [r for r in self.records if r["split"] == name]

    def counts(self):
        counts = {}
        for r in self.records:
            counts[r["split"]] = counts.get(r["split"], 0) + 1
        return counts

    def path(self, record, key):
        return os.path.join(self.root, record["files"][key])

    def dumps(self):
        return "".join(json.dumps(r, sort_keys = True) + "\n"
                       for r in self.records)

    def digest(self):
        return hashlib.sha256(self.dumps().encode("utf-8")).hexdigest()

    def save(self, path = None):
        path = path or os.path.join(self.root, self.FILENAME)
        with open(path, "w") as f:
            f.write(self.dumps())
        return path

    @classmethod
    def load(cls, path):
        if os.path.isdir(path):
            path = os.path.join(path, cls.FILENAME)
        records = []
        try:
            with open(path) as f:
                for number, line in enumerate(f, 1):
                    if not line.strip():
                        continue
                    try:
                        records.append(json.loads(line))
                    except ValueError:
                        raise DataError("{0}:{1}: malformed record".format(
                            path, number))
        except IOError as e:
            raise DataError("Cannot read manifest {0}: {1}".format(path, e))
        return cls(records, os.path.dirname(os.path.abspath(path)))

def _record(sampleid, split, seed, files, generator, cfg, meta = None):
    record = {"id": sampleid, "split": split, "seed": seed, "files": files,
              "generator": generator, "cfg_hash": cfg_hash(cfg)}
    if meta:
        record["meta"] = meta
    return record

def _jobs(count, test_count):
    return [("train", i) for i in range(count)] + \
           [("test", count + i) for i in range(test_count)]

def _map(fn, jobs):
    """
    Maps fn over jobs, in a process pool when allowed; order is preserved.
    """
    if config.processes > 1 and len(jobs) > 1:
        with multiprocessing.Pool(min(config.processes, len(jobs))) as pool:
            return pool.map(fn, jobs)
    return [fn(job) for job in jobs]

def _samples(out):
    directory = os.path.join(out, "samples")
    if not os.path.isdir(directory):
        os.makedirs(directory)
    return directory

class _RDEJob(object):
    def __init__(self, out, seed, cfg, image_format, label_format):
        self.out = out
        self.seed = seed
        self.cfg = cfg
        self.image_format = image_format
        self.label_format = label_format

    def __call__(self, job):
        split, index = job
        seed = derive_seed(self.seed, index)
        scene = rde.generate_rde_scene(seed, self.cfg)
        sampleid = "rde-{0}-{1:06d}".format(split, index)
        files = {"input": "samples/{0}.input.{1}".format(sampleid, self.image_format),
                 "target": "samples/{0}.target.{1}".format(sampleid, self.label_format),
                 "scene": "samples/{0}.scene.json".format(sampleid)}
        codec.write_image(os.path.join(self.out, files["input"]), scene.image)
        codec.write_image(os.path.join(self.out, files["target"]), scene.label)
        with open(os.path.join(self.out, files["scene"]), "w") as f:
            json.dump(scene.todict(), f, sort_keys = True)
        return (_record(sampleid, split, seed, files, "rde", self.cfg.todict()),
                scene.attempts, len(scene.rects),
                any(a.overlaps(b) for i, a in enumerate(scene.rects)
                    for b in scene.rects[i + 1:]))

def build_rde(out, count, test_count = 0, seed = 0, cfg = None,
              image_format = "png", label_format = "png"):
    """
    Writes an RDE dataset; returns the manifest and generation statistics.
    """
    cfg = (cfg or rde.RDEConfig()).validate()
    _samples(out)
    results = _map(_RDEJob(out, seed, cfg, image_format, label_format),
                   _jobs(count, test_count))
    manifest = DatasetManifest([r[0] for r in results], out)
    manifest.save()
    draws = sum(r[1] for r in results)
    accepted = sum(r[2] for r in results)
    stats = {"scenes": len(results), "draws": draws,
             "rejection_rate": (draws - accepted) / float(draws) if draws else 0.0,
             "occlusion_rate": (sum(1 for r in results if r[3]) / float(len(results))
                                if results else 0.0)}
    logger.info("RDE dataset in {0}: {1}".format(out, stats))
    return manifest, stats

def build_square(out, height, width, w):
    train, test = generate_centered_square(height, width, w)
    cfg = {"height": height, "width": width, "w": w}
    directory = _samples(out)
    records = []
    for split, samples in (("train", train), ("test", test)):
        for sample in samples:
            sampleid = "square-{0}-r{1:03d}-c{2:03d}".format(
                split, sample.center[0], sample.center[1])
            files = {"input": "samples/{0}.input.png".format(sampleid),
                     "target": "samples/{0}.target.png".format(sampleid)}
            codec.write_image(os.path.join(out, files["input"]),
                              sample.input[0] * 255)
            codec.write_image(os.path.join(out, files["target"]),
                              sample.target[0] * 255)
            records.append(_record(sampleid, split, 0, files, "centered_square",
                                   cfg, {"center": list(sample.center), "w": w}))
    manifest = DatasetManifest(records, out)
    manifest.save()
    logger.info("Centered Square dataset in {0}: {1}".format(
        directory, manifest.counts()))
    return manifest

class _ColorCodeJob(object):
    def __init__(self, out, seed, cfg):
        self.out = out
        self.seed = seed
        self.cfg = cfg

    def __call__(self, job):
        split, index = job
        seed = derive_seed(self.seed, index)
        sample = generate_colorcode(seed, self.cfg)
        sampleid = "colorcode-{0}-{1:06d}".format(split, index)
        files = {"input": "samples/{0}.input.synt".format(sampleid),
                 "target": "samples/{0}.target.synt".format(sampleid)}
        codec.write_tensor(os.path.join(self.out, files["input"]), sample.input)
        codec.write_tensor(os.path.join(self.out, files["target"]),
                           sample.target.astype(np.uint16))
        return _record(sampleid, split, seed, files, "color_code",
                       self.cfg.todict(), {"k": self.cfg.k})

def build_colorcode(out, count, test_count = 0, seed = 0, cfg = None):
    cfg = (cfg or ColorCodeConfig()).validate()
    _samples(out)
    manifest = DatasetManifest(_map(_ColorCodeJob(out, seed, cfg),
                                    _jobs(count, test_count)), out)
    manifest.save()
    logger.info("Color Code dataset in {0}: {1}".format(out, manifest.counts()))
    return manifest

def _checkfiles(manifest, record):
    for key in record["files"]:
        if not os.path.exists(manifest.path(record, key)):
            raise DataError("Missing file {0}".format(manifest.path(record, key)))

def load_sample(manifest, record):
    """
    Returns (x, target) arrays ready for a probe network: x is C x N float32,
    target is 1 x N float32 for binary maps, N class indices for codes, and
    the H x W label map for RDE.
    """
    generator = record.get("generator")
    _checkfiles(manifest, record)
    if generator == "centered_square":
        image = codec.read_image(manifest.path(record, "input"))
        target = codec.read_image(manifest.path(record, "target"))
        return ((image > 0).astype(np.float32).reshape(1, -1),
                (target > 0).astype(np.float32).reshape(1, -1))
    if generator == "color_code":
        return (codec.read_tensor(manifest.path(record, "input")),
                codec.read_tensor(manifest.path(record, "target")).astype(np.int64))
    if generator == "rde":
        image = codec.read_image(manifest.path(record, "input"))
        label = codec.read_image(manifest.path(record, "target"))
        x = image.reshape(-1, 3).T.astype(np.float32) / 255.0
        return x, label.astype(np.float32)
    raise DataError("Unknown generator {0!r} in record {1}".format(
        generator, record.get("id")))

def verify_record(manifest, record, min_visible_frac = 0.05):
    """
    Well-posedness check of one stored sample.
    """
    generator = record.get("generator")
    _checkfiles(manifest, record)
    if generator == "rde":
        with open(manifest.path(record, "scene")) as f:
            scene = rde.Scene.fromdict(json.load(f))
        verdict = rde.verify_unambiguous(scene, min_visible_frac)
        if not verdict:
            return verdict
        image = codec.read_image(manifest.path(record, "input"))
        label = codec.read_image(manifest.path(record, "target"))
        if not np.array_equal(image, scene.image):
            return Verdict(False, "image differs from scene rendering", None)
        rebuilt = rde.reconstruct_scene(image, scene.background)
        if not np.array_equal(rebuilt.label, label):
            return Verdict(False, "label not recoverable from image",
                int(np.count_nonzero(rebuilt.label != label)))
        return PASS
    if generator == "centered_square":
        image = codec.read_image(manifest.path(record, "input"))
        target = codec.read_image(manifest.path(record, "target"))
        return verify_square(image, target, record["meta"]["w"])
    if generator == "color_code":
        x, target = load_sample(manifest, record)
        return verify_colorcode(x, target)
    raise DataError("Unknown generator {0!r} in record {1}".format(
        generator, record.get("id")))
