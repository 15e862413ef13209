"""End-to-end run: train, clean up superpixels, cluster, evaluate."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .admm import affinity
from .cluster import ClusterResult, MetricReport, cluster_superpixels, evaluate
from .data import HsiCube, LabelMap, choose_superpixel_count, standardize
from .errors import ConfigError
from .superpixel import enforce_connectivity
from .train import TrainConfig, TrainResult, train


@dataclass
class PipelineResult:
    M: int
    classes: int
    training: TrainResult
    superpixel_map: np.ndarray   # dense connected superpixel ids, 0..K-1
    clusters: ClusterResult
    metrics: MetricReport | None
    timings: dict[str, float] = field(default_factory=dict)


def run_pipeline(cube: HsiCube, labels: LabelMap | None, config: TrainConfig, *,
                 classes: int | None = None, loss_csv=None, checkpoint=None,
                 connectivity: bool = True) -> PipelineResult:
    """Standardise ``cube``, train under ``config`` and cluster its superpixels.

    ``classes`` defaults to the number of classes in ``labels``; metrics are
    computed only when ``labels`` is given. Cluster labels reach pixels through
    the hard assignment; ``connectivity`` only affects the exported
    ``superpixel_map``, since merging small fragments across class borders
    costs accuracy.
    """
    if labels is not None and (labels.height, labels.width) != (cube.height, cube.width):
        raise ConfigError("label map and cube dimensions differ")
    if classes is None:
        if labels is None:
            raise ConfigError("number of classes unknown: give a label map or classes")
        classes = labels.classes
    M = choose_superpixel_count(cube, labels, override=config.M, classes=classes)
    if classes > M:
        raise ConfigError(f"more classes ({classes}) than superpixels ({M})")
    timings = {}
    clock = time.perf_counter()

    def lap(stage):
        nonlocal clock
        now = time.perf_counter()
        timings[stage] = now - clock
        clock = now

    X = standardize(cube).values
    lap("standardize")
    result = train(X, cube.height, cube.width, M, config, loss_csv=loss_csv, checkpoint=checkpoint)
    lap("train")
    hard = result.trace.assignment.hard
    segments = enforce_connectivity(hard, cube.height, cube.width, M) if connectivity else hard.copy()
    lap("connectivity")
    A = affinity(result.trace.selfrep.Z)
    clusters = cluster_superpixels(A, hard, classes, seed=config.seed)
    lap("cluster")
    metrics = evaluate(clusters.pixel_labels, labels.labels) if labels is not None else None
    lap("metrics")
    return PipelineResult(M, classes, result, segments, clusters, metrics, timings)
