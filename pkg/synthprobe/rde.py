"""
Rectangle Depth Estimation scenes.

A scene is a stack of axis-aligned, monochrome rectangles painted in
ascending z over a dark background. The label of a pixel is one plus the
number of rectangles covering it. Generated scenes are certified
unambiguous: the label map can be rebuilt from the rendered image alone,
which reconstruct_scene() does.

Rect bounds are inclusive pixel indices; the boundary lines of a rect on the
pixel lattice are x0 and x1 + 1 (vertical) and y0 and y1 + 1 (horizontal).
"""

import logging
from collections import namedtuple
from dataclasses import dataclass, field, asdict

import numpy as np
from PIL import ImageColor

from synthprobe.config import ConfigError

logger = logging.getLogger("synthprobe.rde")

BACKGROUND = (32, 32, 32)
PALETTE = [ImageColor.getrgb("hsv({0},100%,100%)".format(36 * i))
           for i in range(10)]

class GenerationError(Exception):
    """
    The retry budget ran out before an acceptable sample was drawn.
    """
    def __init__(self, message, cfg = None):
        Exception.__init__(self, message)
        self.cfg = cfg

@dataclass(frozen = True)
class Rect:
    x0: int
    y0: int
    x1: int
    y1: int
    z: int = 0
    color_idx: int = 0

    @property
    def vlines(self):
        return (self.x0, self.x1 + 1)

    @property
    def hlines(self):
        return (self.y0, self.y1 + 1)

    @property
    def area(self):
        return (self.x1 - self.x0 + 1) * (self.y1 - self.y0 + 1)

    def overlaps(self, other):
        return (self.x0 <= other.x1 and other.x0 <= self.x1 and
                self.y0 <= other.y1 and other.y0 <= self.y1)

@dataclass
class RDEConfig:
    width: int = 128
    height: int = 128
    n_rects: int = 10
    n_rects_max: int = None
    palette: list = field(default_factory = lambda: [list(c) for c in PALETTE])
    background: tuple = BACKGROUND
    min_side: int = 12
    max_side: int = 96
    min_visible_frac: float = 0.05
    retry_budget: int = 10000
    filter: bool = True

    def validate(self):
        top = self.n_rects_max if self.n_rects_max is not None else self.n_rects
        if self.n_rects < 0 or top < self.n_rects:
            raise ConfigError("Bad rectangle count range [{0}, {1}]".format(
                self.n_rects, top))
        if top > len(self.palette):
            raise ConfigError("{0} rectangles need more than the {1} palette "
                              "colors".format(top, len(self.palette)))
        colors = set(tuple(c) for c in self.palette)
        if len(colors) != len(self.palette) or tuple(self.background) in colors:
            raise ConfigError("Palette colors must be distinct and differ "
                              "from the background")
        if not 2 <= self.min_side <= self.max_side <= min(self.width, self.height):
            raise ConfigError("Side range [{0}, {1}] does not fit {2}x{3}".format(
                self.min_side, self.max_side, self.width, self.height))
        if not 0 <= self.min_visible_frac <= 1:
            raise ConfigError("min_visible_frac must lie in [0, 1]")
        if self.retry_budget <= 0:
            raise ConfigError("retry_budget must be positive")
        return self

    def todict(self):
        data = asdict(self)
        data["background"] = list(self.background)
        data["palette"] = [list(c) for c in self.palette]
        return data

class Scene(object):
    def __init__(self, rects, width, height, seed = 0, palette = None,
                 background = BACKGROUND, attempts = 0):
        self.rects = sorted(rects, key = lambda r: r.z)
        self.width = width
        self.height = height
        self.seed = seed
        self.palette = [tuple(c) for c in (palette or PALETTE)]
        self.background = tuple(background)
        self.attempts = attempts
        self._owner = None

    @property
    def owner(self):
        """
        Index into rects of the topmost rect at every pixel, -1 on background.
        """
        if self._owner is None:
            owner = np.full((self.height, self.width), -1, dtype = np.int32)
            for i, r in enumerate(self.rects):
                owner[r.y0:r.y1 + 1, r.x0:r.x1 + 1] = i
            self._owner = owner
        return self._owner

    @property
    def image(self):
        colors = np.array([self.palette[r.color_idx] for r in self.rects] +
                          [self.background], dtype = np.uint8)
        return colors[self.owner]

    @property
    def label(self):
        return coverage_label(self.rects, self.height, self.width)

    def todict(self):
        return {"width": self.width, "height": self.height, "seed": self.seed,
                "palette": [list(c) for c in self.palette],
                "background": list(self.background),
                "rects": [asdict(r) for r in self.rects]}

    @classmethod
    def fromdict(cls, data):
        return cls([Rect(**r) for r in data["rects"]], data["width"],
                   data["height"], data.get("seed", 0), data.get("palette"),
                   data.get("background", BACKGROUND))

def coverage_label(rects, height, width):
    label = np.ones((height, width), dtype = np.uint16)
    for r in rects:
        label[r.y0:r.y1 + 1, r.x0:r.x1 + 1] += 1
    return label

TJunction = namedtuple("TJunction", ["point", "upper", "lower"])

def _crossings(rects, owner):
    """
    Yields (point, upper, lower) index triples for every visible T-junction.

    At a crossing of a's vertical boundary with b's horizontal boundary the
    pixel inside both rects tells which one is on top; the pixel inside the
    lower rect only must show the lower rect for its edge to be seen
    continuing past the occluder.
    """
    height, width = owner.shape
    for a in range(len(rects)):
        for b in range(len(rects)):
            if a == b:
                continue
            ra, rb = rects[a], rects[b]
            for xa in ra.vlines:
                if not rb.x0 < xa < rb.x1 + 1:
                    continue
                xin = xa if xa == ra.x0 else xa - 1
                xout = xa - 1 if xa == ra.x0 else xa
                for yb in rb.hlines:
                    if not ra.y0 < yb < ra.y1 + 1:
                        continue
                    yin = yb if yb == rb.y0 else yb - 1
                    yout = yb - 1 if yb == rb.y0 else yb
                    if not (0 <= min(xin, xout) and max(xin, xout) < width and
                            0 <= min(yin, yout) and max(yin, yout) < height):
                        continue
                    both = owner[yin, xin]
                    if both == a and owner[yin, xout] == b:
                        yield (xa, yb), a, b
                    elif both == b and owner[yout, xin] == a:
                        yield (xa, yb), b, a

def find_tjunctions(scene):
    """
    Visible T-junctions of a scene as (point, upper_rect, lower_rect).
    """
    return [TJunction(point, scene.rects[u], scene.rects[l])
            for point, u, l in _crossings(scene.rects, scene.owner)]

def order_closure(count, pairs):
    """
    Transitive closure of the digraph upper -> lower.
    """
    closure = np.zeros((count, count), dtype = bool)
    for upper, lower in pairs:
        closure[upper, lower] = True
    for k in range(count):
        closure |= closure[:, k, None] & closure[None, k, :]
    return closure

class Verdict(namedtuple("Verdict", ["ok", "reason", "detail"])):
    def __bool__(self):
        return self.ok

PASS = Verdict(True, None, None)

def _hiddenedge(rect, index, owner):
    sides = (owner[rect.y0:rect.y1 + 1, rect.x0],
             owner[rect.y0:rect.y1 + 1, rect.x1],
             owner[rect.y0, rect.x0:rect.x1 + 1],
             owner[rect.y1, rect.x0:rect.x1 + 1])
    return not all(np.any(side == index) for side in sides)

def verify_unambiguous(scene, min_visible_frac = 0.05):
    """
    Checks that the label map of scene is recoverable from its image.

    Besides aligned sides, hidden or barely visible rectangles and pairs
    left unordered or cyclic by the T-junctions, a scene also fails when a
    side of some rectangle has no visible pixel ("hidden edge"): the extent
    of that rectangle cannot be read off the image.
    """
    rects = scene.rects
    for i in range(len(rects)):
        for j in range(i + 1, len(rects)):
            if (set(rects[i].vlines) & set(rects[j].vlines) or
                    set(rects[i].hlines) & set(rects[j].hlines)):
                return Verdict(False, "aligned sides", (i, j))
    owner = scene.owner
    visible = np.bincount(owner[owner >= 0].ravel(), minlength = len(rects))
    for i, r in enumerate(rects):
        if visible[i] == 0:
            return Verdict(False, "hidden rectangle", i)
        if visible[i] < min_visible_frac * r.area:
            return Verdict(False, "small visible area", i)
    for i, r in enumerate(rects):
        if _hiddenedge(r, i, owner):
            return Verdict(False, "hidden edge", i)
    closure = order_closure(len(rects),
                            [(u, l) for _, u, l in _crossings(rects, owner)])
    for i in range(len(rects)):
        for j in range(i + 1, len(rects)):
            if not rects[i].overlaps(rects[j]):
                continue
            if not (closure[i, j] or closure[j, i]):
                return Verdict(False, "unordered pair", (i, j))
            if closure[i, j] and closure[j, i]:
                return Verdict(False, "cyclic order", (i, j))
    return PASS

class Reconstruction(object):
    def __init__(self, rects, colors, closure, label):
        self.rects = rects
        self.colors = colors
        self.closure = closure
        self.label = label

def reconstruct_scene(image, background = BACKGROUND):
    """
    Rebuilds rect extents, depth order and label map from pixels only.

    Every non-background color is one rect whose extent is the bounding box
    of its pixels; the order comes from the T-junctions visible in the image.
    """
    image = np.asarray(image)
    height, width = image.shape[:2]
    flat = image.reshape(-1, 3)
    colors, inverse = np.unique(flat, axis = 0, return_inverse = True)
    inverse = inverse.reshape(height, width)
    rects, kept, owner = [], [], np.full((height, width), -1, dtype = np.int32)
    for k, color in enumerate(colors):
        if tuple(int(c) for c in color) == tuple(background):
            continue
        ys, xs = np.nonzero(inverse == k)
        owner[inverse == k] = len(rects)
        rects.append(Rect(int(xs.min()), int(ys.min()), int(xs.max()),
                          int(ys.max()), -1, len(rects)))
        kept.append(tuple(int(c) for c in color))
    closure = order_closure(len(rects),
                            [(u, l) for _, u, l in _crossings(rects, owner)])
    return Reconstruction(rects, kept, closure,
                          coverage_label(rects, height, width))

Audit = namedtuple("Audit", ["ok", "pixel_mismatches", "order_errors"])

def audit_scene(scene):
    """
    Compares the pixel-only reconstruction against the generated scene.
    """
    rebuilt = reconstruct_scene(scene.image, scene.background)
    mismatches = int(np.count_nonzero(rebuilt.label != scene.label))
    bycolor = dict((scene.palette[r.color_idx], r) for r in scene.rects)
    errors = 0
    for i, ri in enumerate(rebuilt.rects):
        for j, rj in enumerate(rebuilt.rects):
            if i >= j or not ri.overlaps(rj):
                continue
            truth_i = bycolor.get(rebuilt.colors[i])
            truth_j = bycolor.get(rebuilt.colors[j])
            if truth_i is None or truth_j is None:
                errors += 1
                continue
            above = rebuilt.closure[i, j] if truth_i.z > truth_j.z \
                else rebuilt.closure[j, i]
            if not above:
                errors += 1
    if len(rebuilt.rects) != len(scene.rects):
        errors += abs(len(scene.rects) - len(rebuilt.rects))
    return Audit(mismatches == 0 and errors == 0, mismatches, errors)

def _samplerect(rng, cfg, z, color):
    w = int(rng.integers(cfg.min_side, cfg.max_side + 1))
    h = int(rng.integers(cfg.min_side, cfg.max_side + 1))
    x0 = int(rng.integers(0, cfg.width - w + 1))
    y0 = int(rng.integers(0, cfg.height - h + 1))
    return Rect(x0, y0, x0 + w - 1, y0 + h - 1, z, int(color))

def generate_rde_scene(seed, cfg = None, stall = 200):
    """
    Draws a certified-unambiguous scene, deterministically from seed.

    Rects are added bottom-up; a candidate that breaks verification of the
    partial scene is redrawn, and after stall consecutive failures the scene
    restarts. Adding a rect on top never repairs a failed check, so pruning
    partial scenes rejects exactly the scenes the full check would.
    """
    cfg = (cfg or RDEConfig()).validate()
    rng = np.random.default_rng(seed)
    top = cfg.n_rects_max if cfg.n_rects_max is not None else cfg.n_rects
    count = int(rng.integers(cfg.n_rects, top + 1))
    colors = rng.permutation(len(cfg.palette))[:count]
    rects, attempts, failures = [], 0, 0
    while len(rects) < count:
        if attempts >= cfg.retry_budget:
            raise GenerationError("Retry budget of {0} exhausted for seed "
                "{1} with {2}".format(cfg.retry_budget, seed, cfg.todict()), cfg)
        attempts += 1
        candidate = _samplerect(rng, cfg, len(rects), colors[len(rects)])
        trial = Scene(rects + [candidate], cfg.width, cfg.height, seed,
                      cfg.palette, cfg.background)
        if not cfg.filter or verify_unambiguous(trial, cfg.min_visible_frac):
            rects.append(candidate)
            failures = 0
            continue
        failures += 1
        if failures >= stall:
            logger.debug("Restarting scene {0} after {1} draws".format(
                seed, attempts))
            rects, failures = [], 0
    logger.debug("Scene {0}: {1} rects in {2} draws".format(
        seed, count, attempts))
    return Scene(rects, cfg.width, cfg.height, seed, cfg.palette,
                 cfg.background, attempts)
