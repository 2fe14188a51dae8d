"""End-to-end pipeline and command-line entry point.

Stages: ingest, k selection, homogeneous ensembles, heterogeneous
consensus, autoencoder training, latent clustering, validation.  Every
stage seed is derived from the single pipeline seed, so a run is fully
determined by its resolved config (echoed to ``config_echo.json``).
"""

from __future__ import annotations

import argparse
import copy
import json
import math
import shutil
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import gat_autoencoder as gae
from . import hetero_consensus as hc
from .base_cluster import ClusterModelConfig, Partition, elbow_select_k
from .homo_ensemble import (EnsembleRun, HomogeneousConfig, consensus_labels, run_homogeneous,
                            run_seed)
from .ingest import (FeatureMatrix, SyntheticSpec, generate_synthetic, load_any, prepare,
                     write_matrix_csv)
from .metrics import MetricReport, evaluate
from .stability import PerturbationPlan, StabilityReport, run_stability

ABLATIONS = ("full", "nmf_only", "cooc_only")
DEFAULT_ALGORITHMS = (
    {"algorithm": "kmeans"},
    {"algorithm": "agglomerative", "linkage": "average"},
    {"algorithm": "spectral"},
)

# seed-stream offsets for the stages; stage seeds never collide
_ALG_STREAM = 1000
_AE_STREAM = 2000


class StageError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage
        self.cause = cause


# -- config ---------------------------------------------------------------------------


@dataclass
class PipelineConfig:
    input: str | None = None
    input_format: str = "auto"
    impute_mode: str = "per_variable"
    algorithms: list = field(default_factory=lambda: [dict(a) for a in DEFAULT_ALGORITHMS])
    q: int = 10
    k: int | str = "elbow"
    elbow_range: tuple = (2, 8)
    postprocess: dict = field(default_factory=lambda: {"min_threshold": 0.3, "normalize": True})
    nmf: dict = field(default_factory=lambda: {"r": None, "max_iter": 500, "tol": 1e-12})
    merge_source: str = "q_pad"
    ablation: str = "full"
    autoencoder: dict = field(default_factory=dict)
    node_features: str = "merged"
    seed: int = 0
    threads: int = 1
    output_dir: str | None = None
    dump_matrices: bool = False
    checkpoint: bool = False

    def __post_init__(self):
        self.elbow_range = tuple(int(x) for x in self.elbow_range)
        self.validate()

    def validate(self):
        if not self.algorithms:
            raise ValueError("at least one algorithm is required")
        for a in self.algorithms:
            ClusterModelConfig(**{**a, "k": 2})
        if self.q < 1:
            raise ValueError("q must be >= 1")
        if not (self.k == "elbow" or (isinstance(self.k, int) and self.k >= 2)):
            raise ValueError("k must be an integer >= 2 or 'elbow'")
        if len(self.elbow_range) != 2 or not 2 <= self.elbow_range[0] < self.elbow_range[1]:
            raise ValueError("elbow_range must be (k_min, k_max) with 2 <= k_min < k_max")
        hc.PostProcessConfig(**self.postprocess)
        if set(self.nmf) - {"r", "max_iter", "tol"}:
            raise ValueError("nmf accepts r, max_iter and tol")
        if self.merge_source not in ("q_pad", "u_matrix"):
            raise ValueError(f"unknown merge_source {self.merge_source!r}")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}")
        if self.node_features not in ("merged", "features"):
            raise ValueError(f"unknown node_features {self.node_features!r}")
        if self.input_format not in ("auto", "grid", "csv"):
            raise ValueError(f"unknown input_format {self.input_format!r}")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        gae.TrainConfig(**self.autoencoder)

    @classmethod
    def from_dict(cls, d) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        base = cls()
        merged = {}
        for name in known:
            if name not in d:
                continue
            cur = getattr(base, name)
            if isinstance(cur, dict) and isinstance(d[name], dict):
                merged[name] = {**cur, **d[name]}
            else:
                merged[name] = copy.deepcopy(d[name])
        return cls(**merged)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["elbow_range"] = list(self.elbow_range)
        return d


def _train_config(cfg: PipelineConfig, k: int) -> gae.TrainConfig:
    over = dict(cfg.autoencoder)
    over["k"] = k
    over["seed"] = run_seed(cfg.seed, _AE_STREAM)
    return gae.TrainConfig(**over)


# -- pipeline --------------------------------------------------------------------------


@dataclass
class PipelineResult:
    partition: Partition
    report: MetricReport
    features: FeatureMatrix
    k: int
    elbow: object = None
    merged: np.ndarray | None = None
    matrices: dict = field(default_factory=dict)
    train: object = None
    train_config: object = None
    resolved: dict = field(default_factory=dict)


class _Stage:
    def __init__(self, name):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and not isinstance(exc, StageError):
            raise StageError(self.name, exc) from exc
        return False


def load_features(cfg: PipelineConfig) -> FeatureMatrix:
    if cfg.input is None:
        raise ValueError("no input path given")
    path = Path(cfg.input)
    if cfg.input_format == "auto":
        src = load_any(path)
    elif cfg.input_format == "grid":
        from .ingest import load_grid
        src = load_grid(path)
    else:
        from .ingest import load_matrix_csv
        src = load_matrix_csv(path)
    return prepare(src, cfg.impute_mode)


def run_pipeline(cfg: PipelineConfig, features: FeatureMatrix | None = None) -> PipelineResult:
    """Run every stage in memory; raises :class:`StageError` naming the failing stage."""
    with _Stage("ingest"):
        m = features if features is not None else load_features(cfg)
        if not isinstance(m, FeatureMatrix):
            m = FeatureMatrix(np.asarray(m, dtype=np.float64))

    elbow = None
    with _Stage("k_selection"):
        if cfg.k == "elbow":
            lo, hi = cfg.elbow_range
            elbow = elbow_select_k(m, lo, min(hi, m.n_rows), seed=cfg.seed)
            k = elbow.k
        else:
            k = int(cfg.k)
        if k > m.n_rows:
            raise ValueError(f"k={k} exceeds T={m.n_rows}")

    with _Stage("homo_ensemble"):
        parts = []
        for j, tmpl in enumerate(cfg.algorithms):
            base = ClusterModelConfig(**{**tmpl, "k": k, "seed": 0})
            hcfg = HomogeneousConfig(base, cfg.q, seed_stream=run_seed(cfg.seed, _ALG_STREAM + j))
            members = run_homogeneous(m, hcfg, threads=cfg.threads)
            parts.append(consensus_labels(members, k))
        # one consensus partition per algorithm feeds the heterogeneous stage
        run = EnsembleRun(parts)

    matrices = {}
    with _Stage("hetero_consensus"):
        pp = hc.PostProcessConfig(**cfg.postprocess)
        cm_raw = hc.co_association(run)
        cm = hc.post_process(cm_raw, pp)
        matrices["co_association"] = cm_raw.data
        matrices["co_association_processed"] = cm.data
        factors = None
        if cfg.ablation != "cooc_only":
            r = cfg.nmf.get("r") or k
            factors, U = hc.nmf_consensus(run, r, max_iter=cfg.nmf.get("max_iter", 500),
                                          tol=cfg.nmf.get("tol", 1e-12))
            matrices["nmf_q"] = factors.Q
            matrices["nmf_s"] = factors.S
            matrices["nmf_u"] = U.data
        merged = hc.pad_and_merge(cm, factors, cfg.merge_source,
                                  include_cm=cfg.ablation != "nmf_only").data
        matrices["merged"] = merged

    with _Stage("gat_autoencoder"):
        tcfg = _train_config(cfg, k)
        X = merged if cfg.node_features == "merged" else m.data
        graph = gae.build_graph(merged, X, tcfg.tau_edge)
        trained = gae.train(graph, tcfg)

    with _Stage("cluster_latent"):
        part = gae.cluster_latent(trained.Z_full, k, seed=cfg.seed)

    with _Stage("validation_metrics"):
        report = evaluate(m, part)

    resolved = cfg.to_dict()
    resolved["k_resolved"] = k
    resolved["autoencoder_resolved"] = asdict(tcfg)
    resolved["autoencoder_resolved"]["dims"] = list(trained.params.dims)
    return PipelineResult(part, report, m, k, elbow, merged, matrices, trained, tcfg, resolved)


# -- output ------------------------------------------------------------------------------


def _json_value(x, indent, level):
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if isinstance(x, dict):
        if not x:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {_json_value(v, indent, level + 1)}"
                 for k, v in x.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(x, (list, tuple)):
        if not x:
            return "[]"
        items = [pad + _json_value(v, indent, level + 1) for v in x]
        return "[\n" + ",\n".join(items) + "\n" + end + "]"
    if isinstance(x, (bool, np.bool_)) or x is None:
        return json.dumps(None if x is None else bool(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x):
            return '"nan"'
        if math.isinf(x):
            return '"inf"' if x > 0 else '"-inf"'
        return format(x, ".17g")
    if isinstance(x, np.ndarray):
        return _json_value(x.tolist(), indent, level)
    return json.dumps(str(x))


def dumps_json(obj, indent: int = 2) -> str:
    """JSON text with every float at 17 significant digits and infinities as ``"inf"``."""
    return _json_value(obj, indent, 0) + "\n"


def write_labels(part: Partition, path) -> None:
    with open(path, "w") as fh:
        fh.write("t,label\n")
        for t, lab in enumerate(part.labels):
            fh.write(f"{t},{int(lab)}\n")


def read_labels(path) -> np.ndarray:
    rows = Path(path).read_text().strip().splitlines()
    if not rows or rows[0].strip() != "t,label":
        raise ValueError("labels file must start with the header 't,label'")
    pairs = [tuple(int(v) for v in r.split(",")) for r in rows[1:] if r.strip()]
    ts = [p[0] for p in pairs]
    if ts != list(range(len(ts))):
        raise ValueError("labels file must list t = 0..T-1 in order")
    return np.array([p[1] for p in pairs], dtype=np.int64)


class _Outputs:
    """Tracks files written by this run so a failure can remove them."""

    def __init__(self, root):
        self.root = Path(root)
        self.created = []
        self.root_created = False

    def __enter__(self):
        if not self.root.exists():
            self.root.mkdir(parents=True)
            self.root_created = True
        return self

    def path(self, rel) -> Path:
        p = self.root / rel
        if not p.parent.exists():
            p.parent.mkdir(parents=True)
            self.created.append(p.parent)
        self.created.append(p)
        return p

    def __exit__(self, exc_type, exc, tb):
        if exc is None:
            return False
        for p in reversed(self.created):
            if p.is_dir():
                shutil.rmtree(p, ignore_errors=True)
            elif p.exists():
                p.unlink()
        if self.root_created:
            shutil.rmtree(self.root, ignore_errors=True)
        return False


def write_outputs(res: PipelineResult, cfg: PipelineConfig, out: _Outputs) -> None:
    with _Stage("write_outputs"):
        write_labels(res.partition, out.path("labels.csv"))
        out.path("metrics.json").write_text(dumps_json(res.report.to_json_dict()))
        out.path("config_echo.json").write_text(dumps_json(res.resolved))
        if cfg.dump_matrices:
            for name, mat in res.matrices.items():
                hc.dump_matrix(mat, out.path(f"matrices/{name}.csv"))
        if cfg.checkpoint:
            ck = out.path("checkpoint")
            gae.save_checkpoint(ck, res.train.params, res.train_config, res.train.epoch,
                                res.train.centroids)


def run_to_dir(cfg: PipelineConfig, features=None) -> PipelineResult:
    if cfg.output_dir is None:
        raise ValueError("output_dir is required")
    with _Outputs(cfg.output_dir) as out:
        res = run_pipeline(cfg, features)
        write_outputs(res, cfg, out)
    return res


def kmeans_pipeline(k: int):
    """Single k-means run as a ``pipeline(features, seed)`` callable, for baselines."""
    from .base_cluster import kmeans

    def pipe(m, seed):
        return kmeans(m, ClusterModelConfig("kmeans", k, seed))[0]

    return pipe


def full_pipeline(cfg: PipelineConfig):
    """``pipeline(features, seed)`` wrapper around :func:`run_pipeline`."""

    def pipe(m, seed):
        c = copy.deepcopy(cfg)
        c.seed = int(seed)
        return run_pipeline(c, m).partition

    return pipe


def run_stability_cmd(cfg: PipelineConfig, plan: PerturbationPlan, features=None,
                      baseline: str | None = None) -> dict:
    """Stability of the full pipeline (and optionally a single k-means baseline)."""
    with _Stage("ingest"):
        m = features if features is not None else load_features(cfg)
    c = copy.deepcopy(cfg)
    if c.k == "elbow":
        with _Stage("k_selection"):
            lo, hi = c.elbow_range
            c.k = elbow_select_k(m, lo, min(hi, m.n_rows), seed=c.seed).k
    with _Stage("stability"):
        out = {"k": c.k, "plan": asdict(plan),
               "pipeline": run_stability(full_pipeline(c), m, plan).to_json_dict()}
        if baseline == "kmeans":
            out["baseline_kmeans"] = run_stability(kmeans_pipeline(c.k), m, plan).to_json_dict()
    return out


# -- argument parsing ------------------------------------------------------------------------


def _add_pipeline_flags(p):
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--input", help="grid text file or numeric CSV")
    p.add_argument("--input-format", choices=("auto", "grid", "csv"))
    p.add_argument("--impute-mode", choices=("per_variable", "global"))
    p.add_argument("--algorithms", help="comma list of kmeans, agglomerative, spectral")
    p.add_argument("--q", type=int, help="runs per algorithm")
    p.add_argument("--k", help="cluster count or 'elbow'")
    p.add_argument("--elbow-range", nargs=2, type=int, metavar=("KMIN", "KMAX"))
    p.add_argument("--min-threshold", type=float)
    p.add_argument("--no-normalize", action="store_true")
    p.add_argument("--nmf-rank", type=int)
    p.add_argument("--nmf-max-iter", type=int)
    p.add_argument("--merge-source", choices=("q_pad", "u_matrix"))
    p.add_argument("--ablation", choices=ABLATIONS)
    p.add_argument("--node-features", choices=("merged", "features"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--step-size", type=float)
    p.add_argument("--pool-ratio", type=float)
    p.add_argument("--tau-edge", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--output-dir")
    p.add_argument("--dump-matrices", action="store_true")
    p.add_argument("--checkpoint", action="store_true")


def config_from_args(args) -> PipelineConfig:
    d = {}
    if args.config:
        d = json.loads(Path(args.config).read_text())
    d = {k: v for k, v in d.items() if k not in ("k_resolved", "autoencoder_resolved")}

    def put(key, val):
        if val is not None:
            d[key] = val

    def put_sub(key, sub, val):
        if val is not None:
            d.setdefault(key, {})
            d[key] = {**d[key], sub: val}

    put("input", args.input)
    put("input_format", args.input_format)
    put("impute_mode", args.impute_mode)
    if args.algorithms:
        d["algorithms"] = [{"algorithm": a.strip()} for a in args.algorithms.split(",") if a.strip()]
    put("q", args.q)
    if args.k is not None:
        d["k"] = args.k if args.k == "elbow" else int(args.k)
    put("elbow_range", args.elbow_range)
    put_sub("postprocess", "min_threshold", args.min_threshold)
    if args.no_normalize:
        put_sub("postprocess", "normalize", False)
    put_sub("nmf", "r", args.nmf_rank)
    put_sub("nmf", "max_iter", args.nmf_max_iter)
    put("merge_source", args.merge_source)
    put("ablation", args.ablation)
    put("node_features", args.node_features)
    put_sub("autoencoder", "epochs", args.epochs)
    put_sub("autoencoder", "lam", args.lam)
    put_sub("autoencoder", "step_size", args.step_size)
    put_sub("autoencoder", "pool_ratio", args.pool_ratio)
    put_sub("autoencoder", "tau_edge", args.tau_edge)
    put("seed", args.seed)
    put("threads", args.threads)
    put("output_dir", args.output_dir)
    if args.dump_matrices:
        d["dump_matrices"] = True
    if args.checkpoint:
        d["checkpoint"] = True
    return PipelineConfig.from_dict(d)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stensemble",
                                 description="Ensemble graph clustering of spatiotemporal data.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run the full pipeline")
    _add_pipeline_flags(p)

    p = sub.add_parser("stability", help="rerun the pipeline under perturbation")
    _add_pipeline_flags(p)
    p.add_argument("--mode", choices=("reseed", "subsample"), default="reseed")
    p.add_argument("--runs", type=int, default=20)
    p.add_argument("--subsample-fraction", type=float, default=0.9)
    p.add_argument("--baseline", choices=("kmeans",), help="also score a single k-means run")

    p = sub.add_parser("synth", help="write a synthetic regime dataset")
    p.add_argument("--T", type=int, required=True)
    p.add_argument("--F", type=int, required=True)
    p.add_argument("--k-true", type=int, required=True)
    p.add_argument("--separation", type=float, default=10.0)
    p.add_argument("--noise-sigma", type=float, default=0.5)
    p.add_argument("--layout", choices=("contiguous", "interleaved"), default="contiguous")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", required=True, help="CSV path for the feature matrix")
    p.add_argument("--labels-output", help="CSV path for the generator labels")

    p = sub.add_parser("metrics", help="score an existing labels file")
    p.add_argument("--input", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--impute-mode", choices=("per_variable", "global"), default="per_variable")
    p.add_argument("--output", help="write metrics JSON here instead of stdout")
    return ap


def _cmd_run(args):
    cfg = config_from_args(args)
    run_to_dir(cfg)
    return 0


def _cmd_stability(args):
    cfg = config_from_args(args)
    plan = PerturbationPlan(args.mode, args.runs, args.subsample_fraction, cfg.seed)
    if cfg.output_dir is None:
        raise ValueError("output_dir is required")
    with _Outputs(cfg.output_dir) as out:
        rep = run_stability_cmd(cfg, plan, baseline=args.baseline)
        with _Stage("write_outputs"):
            out.path("stability.json").write_text(dumps_json(rep))
            out.path("config_echo.json").write_text(dumps_json(cfg.to_dict()))
    return 0


def _cmd_synth(args):
    spec = SyntheticSpec(args.T, args.F, args.k_true, args.separation, args.noise_sigma,
                         args.layout, args.seed)
    m, truth = generate_synthetic(spec)
    write_matrix_csv(m, args.output)
    if args.labels_output:
        write_labels(truth, args.labels_output)
    return 0


def _cmd_metrics(args):
    with _Stage("ingest"):
        m = prepare(load_any(args.input), args.impute_mode)
        labels = read_labels(args.labels)
    with _Stage("validation_metrics"):
        rep = evaluate(m, labels)
    text = dumps_json(rep.to_json_dict())
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


_COMMANDS = {"run": _cmd_run, "stability": _cmd_stability, "synth": _cmd_synth,
             "metrics": _cmd_metrics}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except StageError as exc:
        print(f"error: stage {exc.stage}: {exc.cause}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"error: stage config: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
