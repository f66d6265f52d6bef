"""Behavior-performance map generation on the intact crawler."""
from __future__ import annotations

import logging

import numpy as np

from .archive import DEFAULT_RESOLUTION, Archive, MapElites
from .crawler import SIM_VERSION, Crawler, SimConfig, SimulationFailed

logger = logging.getLogger(__name__)


def generate_map(seed: int, budget: int = 100_000, config: SimConfig | None = None, *,
                 resolution=DEFAULT_RESOLUTION, init_count: int = 2000, mutation_sigma: float = 0.05,
                 batch_size: int = 100, norm_percentile: float = 99.0,
                 threshold_percentile: float = 80.0) -> Archive:
    """Run MAP-Elites with the crawler and return the archive.

    The random initial batch fixes two constants that are frozen into the
    archive metadata: ``force_norm_max`` (the ``norm_percentile`` of its
    force values, used to scale the safety descriptor) and
    ``safety_threshold`` (the ``threshold_percentile``).
    """
    crawler = Crawler(config)
    init_seq, evo_seq = np.random.SeedSequence(seed).spawn(2)
    size = crawler.config.ranges.genotype_size
    genotypes = np.random.default_rng(init_seq).random((init_count, size))
    results = [crawler.run(g) for g in genotypes]
    forces = np.array([crawler.safety_value(r) for r in results if not r.failed])
    if forces.size == 0:
        raise RuntimeError("every initial evaluation failed; check the simulator configuration")
    crawler.force_norm_max = float(np.percentile(forces, norm_percentile))
    threshold = float(np.percentile(forces, threshold_percentile))

    initial = []
    for g, r in zip(genotypes, results):
        try:
            initial.append((g, crawler.describe(r)))
        except SimulationFailed:
            initial.append((g, None))

    est = MapElites(resolution=resolution, init_count=init_count, mutation_sigma=mutation_sigma,
                    batch_size=batch_size, genotype_size=size, random_state=evo_seq)
    est.fit(crawler, budget, initial=initial)
    archive = est.archive_
    archive.metadata = {
        "force_norm_max": crawler.force_norm_max,
        "seed": int(seed),
        "budget": int(budget),
        "safety_threshold": threshold,
        "damage": "none",
        "sim": SIM_VERSION,
    }
    logger.info("map seed %d: %d cells filled, %d failed evaluations", seed, len(archive), est.n_failed_)
    return archive
