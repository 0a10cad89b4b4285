"""Python bindings for the multimodal subspace clustering library."""

import json as _json

from ._core import *  # noqa: F401,F403
from ._core import __version__, train_and_cluster as _train_and_cluster


def train_and_cluster(modalities, labels, height, width, model=None, clusters=0, seed=0):
    """Train on a list of (n, height*width) arrays; `model` is a dict of config keys."""
    return _train_and_cluster(modalities, list(labels), height, width, _json.dumps(model or {}), clusters, seed)
