import json
import os

import numpy as np
import pytest

from synthprobe import codec, config
from synthprobe.rde import Rect, Scene, RDEConfig

@pytest.fixture(autouse = True)
def singleprocess(monkeypatch):
    monkeypatch.setattr(config, "processes", 1)
    monkeypatch.setattr(config, "database", None)

@pytest.fixture
def rng():
    return np.random.default_rng(1234)

@pytest.fixture
def smallrde():
    return RDEConfig(width = 64, height = 64, n_rects = 4, min_side = 8,
                     max_side = 40)

@pytest.fixture
def tjunctionscene():
    """
    B (z=1) lies over the lower-right part of A (z=0).
    """
    return Scene([Rect(10, 10, 40, 40, 0, 0), Rect(30, 20, 60, 50, 1, 1)],
                 64, 64)

def writescene(directory, sampleid, scene):
    """
    Stores a hand-made scene as a one-sample RDE dataset record.
    """
    samples = os.path.join(directory, "samples")
    if not os.path.isdir(samples):
        os.makedirs(samples)
    files = {"input": "samples/{0}.input.png".format(sampleid),
             "target": "samples/{0}.target.png".format(sampleid),
             "scene": "samples/{0}.scene.json".format(sampleid)}
    codec.write_image(os.path.join(directory, files["input"]), scene.image)
    codec.write_image(os.path.join(directory, files["target"]), scene.label)
    with open(os.path.join(directory, files["scene"]), "w") as f:
        json.dump(scene.todict(), f)
    return {"id": sampleid, "split": "train", "seed": 0, "files": files,
            "generator": "rde", "cfg_hash": "fixture"}

@pytest.fixture
def scenewriter():
    return writescene
