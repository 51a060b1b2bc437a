"""Shared fixtures: one default simulated dataset per session plus gt helpers.

The default dataset (6 experiences, 60 frames, seed 42) backs the sequence
matching, graph, sampling, and training tests; generating it once keeps the
suite fast. Ground truth is loaded through the evaluation module only.
"""

from __future__ import annotations

import pytest

from seqloc.assoc import build_graph
from seqloc.evaluate import load_ground_truth
from seqloc.geometry import StereoCamera
from seqloc.simworld import SimConfig, generate_dataset


@pytest.fixture(scope="session")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("default_dataset")
    return generate_dataset(SimConfig(), seed=42, out_dir=out)


@pytest.fixture(scope="session")
def ground_truth(dataset):
    return load_ground_truth(dataset.path)


@pytest.fixture(scope="session")
def graph(dataset):
    return build_graph(dataset, k=3)


@pytest.fixture()
def example_cam():
    # the small camera used throughout the projection examples
    return StereoCamera(fu=100.0, fv=100.0, cu=64.0, cv=48.0, b=0.25,
                        width=128, height=96)
