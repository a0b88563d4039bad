"""Builds data and models from an ExperimentConfig and runs every (method, seed)."""
from __future__ import annotations

import logging
from typing import List, Tuple

import numpy as np

from .config import ExperimentConfig
from .data import LabeledDataset, blob_means, load_dataset, partition, sample_blobs
from .protocols import ExperimentResult, run_experiment

log = logging.getLogger(__name__)

_DATA = 2


def prepare_data(cfg: ExperimentConfig, seed: int) -> Tuple[List[LabeledDataset], LabeledDataset]:
    """Client partitions and the shared test set for one run."""
    rng = np.random.default_rng([seed, _DATA])
    d = cfg.data
    if d.source == "synth":
        s = d.synth
        means = blob_means(s["num_classes"], s["dim"], s["separation"], rng,
                           s["clusters_per_class"])
        train = sample_blobs(means, s["per_class"], rng)
        test = sample_blobs(means, s["test_per_class"], rng)
    else:
        train = load_dataset(d.train["path"], d.source, d.train["labels_path"], d.num_classes)
        ncls = d.num_classes or train.num_classes
        test = load_dataset(d.test["path"], d.source, d.test["labels_path"], ncls)
        if train.num_classes != test.num_classes:
            ncls = max(train.num_classes, test.num_classes)
            train = LabeledDataset(train.features, train.labels, ncls)
            test = LabeledDataset(test.features, test.labels, ncls)
    return partition(train, cfg.partition_spec(seed), rng), test


def run_config(cfg: ExperimentConfig, keep_messages: bool = False) -> List[ExperimentResult]:
    results = []
    for run, seed in enumerate(cfg.seeds):
        clients, test = prepare_data(cfg, seed)
        proxy_spec, private_specs = cfg.model_specs(test.dim, test.num_classes)
        for method in cfg.methods:
            log.info("run %d (seed %d): %s", run, seed, method.value)
            results.append(run_experiment(
                cfg.protocol(method), clients, test, private_specs, proxy_spec, seed,
                run=run, workers=cfg.workers, link_time_per_byte=cfg.link_time_per_byte,
                keep_messages=keep_messages))
    return results
