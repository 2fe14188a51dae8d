"""Acceptance checks, one printed PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v``; the lines are printed even
when output capture is on.
"""

import itertools
import json
import time

import numpy as np
import pytest
from sklearn.metrics import adjusted_rand_score

from stensemble import gat_autoencoder as gae
from stensemble import kernels
from stensemble.base_cluster import Partition
from stensemble.cli import PipelineConfig, main, run_pipeline, run_stability_cmd
from stensemble.hetero_consensus import co_association, nmf_consensus
from stensemble.ingest import SyntheticSpec, generate_synthetic, write_matrix_csv
from stensemble.metrics import (avg_rmse, avg_variance, calinski_harabasz, davies_bouldin,
                                inter_cluster_distance, silhouette)
from stensemble.stability import PerturbationPlan, apn, fom, ota

from . import test_metrics as refs
from .test_gat_autoencoder import _fd_grad, _fd_params, _rel_err, _tiny_graph

BENCH = SyntheticSpec(300, 20, 3, 10.0, 0.5, seed=0)


@pytest.fixture
def report(capsys):
    def emit(name, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        assert ok, detail
    return emit


@pytest.fixture(scope="module")
def bench_runs():
    """Full pipeline plus the two single-route variants on the benchmark, run once."""
    m, truth = generate_synthetic(BENCH)
    out = {}
    for ab in ("full", "nmf_only", "cooc_only"):
        t0 = time.perf_counter()
        res = run_pipeline(PipelineConfig(seed=0, ablation=ab), m)
        out[ab] = (res, time.perf_counter() - t0)
    return m, truth, out


def test_consensus_correctness(report):
    rng = np.random.default_rng(0)
    ok, elapsed = True, 0.0
    for _ in range(100):
        T, M = int(rng.integers(1, 51)), int(rng.integers(1, 11))
        labs = [rng.integers(0, int(rng.integers(1, 6)), T) for _ in range(M)]
        t0 = time.perf_counter()
        cm = co_association([Partition.from_labels(x) for x in labs]).data
        elapsed += time.perf_counter() - t0
        counts = np.zeros((T, T))
        for lab in labs:
            for i, j in itertools.product(range(T), repeat=2):
                counts[i, j] += lab[i] == lab[j]
        ok &= bool(np.array_equal(cm, counts / M) and np.array_equal(cm, cm.T)
                   and np.all(np.diag(cm) == 1) and cm.min() >= 0 and cm.max() <= 1)
    ok &= elapsed < 5.0
    report("consensus correctness", ok, f"100 ensembles exact vs pair enumeration, {elapsed:.3f} s")


def test_nmf(report):
    rng = np.random.default_rng(1)
    worst = -np.inf
    for _ in range(50):
        T = int(rng.integers(4, 30))
        parts = [Partition.from_labels(rng.integers(0, int(rng.integers(1, 6)), T))
                 for _ in range(int(rng.integers(1, 8)))]
        f, _ = nmf_consensus(parts, int(rng.integers(2, min(T, 6) + 1)), max_iter=300)
        worst = max(worst, float(np.max(np.diff(f.objective_trace), initial=-np.inf)))
    block_obj = 0.0
    for sizes in ((2, 2), (3, 4, 5), (10, 10), (5, 5, 5, 5), (20, 15, 10, 5, 8)):
        lab = np.random.default_rng(len(sizes)).permutation(np.repeat(np.arange(len(sizes)), sizes))
        f, _ = nmf_consensus([Partition.from_labels(lab)], len(sizes), max_iter=500)
        block_obj = max(block_obj, f.objective_trace[-1])
    ok = worst <= 1e-9 and block_obj <= 1e-6
    report("NMF", ok, f"max step increase {worst:.2e}, worst block objective {block_obj:.2e}")


def test_autoencoder_gradients(report):
    worst = 0.0
    for name in kernels.available_backends():
        prev = kernels.set_backend(name)
        try:
            g, rng = _tiny_graph(0)
            cfg = gae.TrainConfig(lam=0.5, pool_ratio=1.0, dims=(4, 3, 3, 2), k=2)
            P = _fd_params(g, cfg, rng)
            C = rng.normal(size=(2, 2))
            _, grads = gae.loss_and_grad(P, g, cfg, C)
            for block, arr in P.blocks.items():
                fd = _fd_grad(lambda: gae.cache_loss(gae.forward(P, g, cfg), g, C, cfg.lam), arr)
                worst = max(worst, _rel_err(grads[block], fd))
        finally:
            kernels.set_backend(prev)
    arng = np.random.default_rng(2)
    att = 0.0
    for _ in range(20):
        T = int(arng.integers(2, 25))
        A = arng.random((T, T))
        A = (A + A.T) / 2
        A[A < arng.random()] = 0
        gr = gae.build_graph(A, arng.normal(size=(T, 3)))
        lp = gae.GatLayerParams(arng.normal(size=(4, 3)), arng.normal(size=(4, 3)),
                                arng.normal(size=4) * 3)
        alpha = gae.attention_weights(gr.X, gr, lp)
        att = max(att, float(np.max(np.abs(np.add.reduceat(alpha, gr.indptr[:-1]) - 1))))
    ok = worst <= 1e-4 and att <= 1e-12
    report("autoencoder gradients", ok, f"max block relative error {worst:.2e} over "
           f"{'+'.join(kernels.available_backends())} kernels, attention row-sum error {att:.1e}")


def test_metric_oracles(report):
    pairs = [(silhouette, refs.ref_silhouette), (davies_bouldin, refs.ref_db),
             (calinski_harabasz, refs.ref_ch), (avg_rmse, refs.ref_rmse),
             (avg_variance, refs.ref_var), (inter_cluster_distance, refs.ref_icd)]
    worst, sil_ok = 0.0, True
    for X, lab in refs._instances(50):
        for fn, ref in pairs:
            want = ref(X.tolist(), lab.tolist())
            worst = max(worst, abs(fn(X, lab) - want) / max(1.0, abs(want)))
        s = silhouette(X, lab)
        sil_ok &= -1 <= s <= 1
    report("metric oracles", worst <= 1e-9 and sil_ok, f"max relative deviation {worst:.1e}")


def test_stability_identities(report):
    rng = np.random.default_rng(3)
    ok = True
    for _ in range(20):
        X = rng.normal(size=(40, 3))
        p = Partition.from_labels(np.concatenate([np.arange(4), rng.integers(0, 4, 36)]))
        q = Partition(rng.permutation(4)[p.labels], 4)
        ok &= ota(X, p, p) == 0 and fom(X, p, p) == 0 and apn(p, p) == 0
        ok &= ota(X, p, q) == 0
    flipped = apn(Partition.from_labels([0, 0, 1]), Partition(np.array([1, 1, 0]), 2))
    ok &= flipped == 1.0
    report("stability identities", ok, f"identity/permutation zeros, flipped raw APN {flipped}")


def test_end_to_end_recovery(report, bench_runs):
    m, truth, runs = bench_runs
    res, secs = runs["full"]
    ari = adjusted_rand_score(truth.labels, res.partition.labels)
    elbow_k = res.elbow.k
    ok = ari >= 0.9 and elbow_k == 3 and secs <= 120
    report("end-to-end recovery", ok, f"ARI {ari:.4f} (need >= 0.9), elbow k={elbow_k}, {secs:.1f} s")


def test_stability_direction(report):
    m, _ = generate_synthetic(SyntheticSpec(120, 20, 3, 10.0, 5.0, seed=0))
    rep = run_stability_cmd(PipelineConfig(k=3, seed=0), PerturbationPlan("reseed", runs=20),
                            features=m, baseline="kmeans")
    ours, base = rep["pipeline"]["ota"], rep["baseline_kmeans"]["ota"]
    report("stability direction", ours < base,
           f"mean OTA pipeline {ours:.4f} vs single k-means {base:.4f} over 20 reseeded runs")


def test_ablation_harness(report, bench_runs):
    _, _, runs = bench_runs
    reports = {ab: r.report.to_json_dict() for ab, (r, _) in runs.items()}
    same_schema = len({tuple(r) for r in reports.values()}) == 1
    sil = {ab: r["silhouette"] for ab, r in reports.items()}
    ok = same_schema and sil["full"] >= max(sil.values()) - 0.05
    detail = ", ".join(f"{ab} {v:.4f}" for ab, v in sil.items())
    report("ablation harness", ok, f"silhouette {detail}; schema identical: {same_schema}")


def test_determinism(report, tmp_path):
    m, _ = generate_synthetic(BENCH)
    data = tmp_path / "bench.csv"
    write_matrix_csv(m, data)
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["run", "--input", str(data), "--seed", "0", "--output-dir", str(out)]) == 0
        outs.append(out)
    same = all((outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()
               for f in ("labels.csv", "metrics.json"))
    report("determinism", same, "labels.csv and metrics.json byte-identical across two runs")
