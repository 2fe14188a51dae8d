"""Repeated runs of one base algorithm and their co-occurrence consensus."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .base_cluster import ClusterModelConfig, Partition, linkage_labels, run_algorithm


@dataclass
class HomogeneousConfig:
    base: ClusterModelConfig
    q: int = 10
    seed_stream: int = 0
    param_jitter: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if self.q < 1:
            raise ValueError("q must be >= 1")


@dataclass
class EnsembleRun:
    partitions: list[Partition]

    def __post_init__(self):
        if not self.partitions:
            raise ValueError("an ensemble needs at least one partition")
        lengths = {len(p) for p in self.partitions}
        if len(lengths) != 1:
            raise ValueError(f"partition lengths differ: {sorted(lengths)}")

    @property
    def M(self) -> int:
        return len(self.partitions)

    @property
    def T(self) -> int:
        return len(self.partitions[0])

    def label_matrix(self) -> np.ndarray:
        return np.stack([p.labels for p in self.partitions])


def run_seed(seed_stream: int, run_index: int) -> int:
    """Per-run seed; depends only on the stream and the index."""
    ss = np.random.SeedSequence([int(seed_stream) & (2**64 - 1), int(run_index)])
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


class RunError(RuntimeError):
    def __init__(self, index, cause):
        super().__init__(f"run {index} failed: {cause}")
        self.index = index
        self.cause = cause


def run_homogeneous(m, cfg: HomogeneousConfig, threads: int = 1) -> EnsembleRun:
    """Execute ``cfg.q`` seeded runs of the base algorithm."""

    def one(i):
        over = dict(cfg.param_jitter[i % len(cfg.param_jitter)]) if cfg.param_jitter else {}
        over.setdefault("seed", run_seed(cfg.seed_stream, i))
        try:
            return run_algorithm(m, cfg.base.with_(**over))
        except Exception as exc:
            raise RunError(i, exc) from exc

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(one, range(cfg.q)))
    else:
        parts = [one(i) for i in range(cfg.q)]
    return EnsembleRun(parts)


def consensus_labels(run: EnsembleRun, k: int) -> Partition:
    """Average-linkage cut of ``1 - CM`` at ``k`` clusters."""
    from .hetero_consensus import co_association

    if k < 2:
        raise ValueError("k must be >= 2")
    cm = co_association(run).data
    labels = linkage_labels(1.0 - cm, k, "average")
    tag = "consensus(" + ",".join(p.source_tag for p in run.partitions[:1]) + f",...;M={run.M})"
    return Partition(labels, k, tag)
