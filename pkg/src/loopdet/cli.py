"""Command-line surface: detect, eval, synth, bench, pca-fit.

Configuration precedence is defaults < config file (flat ``key=value``
lines) < command-line flags.  Every run echoes the fully resolved parameter
set to standard error.  Exit codes: 0 success, 1 semantic failure during
detection/evaluation, 2 usage or file errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
import time
from dataclasses import dataclass

import numpy as np

from . import evaluation
from .container import (
    ContainerError,
    atomic_output,
    read_features,
    read_header,
    write_features,
)
from .descriptors import fit_pca, load_pca_model, save_pca_model
from .evaluation import (
    RevisitSegment,
    SynthConfig,
    generate_synthetic,
    pr_curve,
    read_ground_truth,
    recall_at_full_precision,
    write_ground_truth,
    write_pr_csv,
)
from .hnsw import HnswIndex, HnswParams
from .pipeline import LoopClosurePipeline, PipelineConfig

LOG_ENV = "FILDPP_LOG"
logger = logging.getLogger("loopdet")


@dataclass
class RunConfig:
    """Flat run parameters; serializes to ``key=value`` text, round-trip stable."""

    psi: float = 40.0
    phi: float | None = None  # None -> taken from the container header
    n: int = 5
    epsilon: float = 0.7
    beta: int = 2
    tau: int = 12
    delta: float = 15.0
    M: int = 48
    ef_construction: int = 40
    ef_search: int = 40
    seed: int = 0
    gt_window: int = 10
    tau_range: tuple[int, int, int] = (0, 40, 1)  # lo, hi (inclusive), step
    features: str | None = None
    gt: str | None = None
    out: str | None = None

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if value is None:
                continue
            if f.name == "tau_range":
                value = ":".join(str(v) for v in value)
            lines.append(f"{f.name}={value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected key=value, got {line!r}")
            key, _, raw = line.partition("=")
            key, raw = key.strip(), raw.strip()
            if key not in fields:
                raise ValueError(f"config line {lineno}: unknown key {key!r}")
            values[key] = _coerce(key, raw)
        return cls(**values)


def _coerce(key: str, raw: str):
    if key in ("features", "gt", "out"):
        return raw
    if key == "tau_range":
        return _parse_tau_range(raw)
    if key in ("psi", "phi", "epsilon", "delta"):
        return float(raw)
    return int(raw)


def _parse_tau_range(raw: str) -> tuple[int, int, int]:
    parts = raw.split(":")
    if len(parts) == 2:
        lo, hi, step = int(parts[0]), int(parts[1]), 1
    elif len(parts) == 3:
        lo, hi, step = (int(p) for p in parts)
    else:
        raise ValueError(f"tau range must be lo:hi or lo:hi:step, got {raw!r}")
    if step < 1 or hi < lo:
        raise ValueError(f"invalid tau range {raw!r}")
    return lo, hi, step


def _taus(cfg: RunConfig) -> list[int]:
    lo, hi, step = cfg.tau_range
    return list(range(lo, hi + 1, step))


def _pipeline_config(cfg: RunConfig, phi: float) -> PipelineConfig:
    return PipelineConfig(
        psi=cfg.psi,
        phi=phi,
        n=cfg.n,
        epsilon=cfg.epsilon,
        beta=cfg.beta,
        tau=cfg.tau,
        delta=cfg.delta,
        seed=cfg.seed,
        hnsw=HnswParams(
            M=cfg.M,
            ef_construction=cfg.ef_construction,
            ef_search=cfg.ef_search,
            rng_seed=cfg.seed,
        ),
    )


def _echo_config(cfg: RunConfig, phi: float | None, header=None) -> None:
    resolved = {
        "psi": cfg.psi,
        "phi": phi if phi is not None else cfg.phi,
        "n": cfg.n,
        "epsilon": cfg.epsilon,
        "beta": cfg.beta,
        "tau": cfg.tau,
        "delta": cfg.delta,
        "M": cfg.M,
        "ef_construction": cfg.ef_construction,
        "ef_search": cfg.ef_search,
        "seed": cfg.seed,
        "gt_window": cfg.gt_window,
    }
    if header is not None:
        resolved["s_g"] = header.s_g
        resolved["s_l"] = header.s_l
    print(
        "resolved config: " + " ".join(f"{k}={v}" for k, v in resolved.items()),
        file=sys.stderr,
    )


def _resolve(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        with open(args.config, "r", encoding="utf-8") as f:
            cfg = RunConfig.from_text(f.read())
    for f in dataclasses.fields(RunConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            setattr(cfg, f.name, value)
    return cfg


def _require(path: str | None, what: str) -> str:
    if not path:
        raise SystemExitError(2, f"missing required {what}")
    if not os.path.exists(path):
        raise SystemExitError(2, f"{what} not found: {path}")
    return path


class SystemExitError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_detect(args: argparse.Namespace) -> int:
    cfg = _resolve(args)
    features = _require(cfg.features, "feature file (--features)")
    header = read_header(features)
    phi = cfg.phi if cfg.phi is not None else header.phi
    _echo_config(cfg, phi, header)
    pipe_cfg = _pipeline_config(cfg, phi)

    pca = None
    if getattr(args, "pca", None):
        pca = load_pca_model(_require(args.pca, "PCA model (--pca)"))

    out = cfg.out or "detections.csv"
    pipeline = LoopClosurePipeline(pipe_cfg, header.dim_global, pca=pca)
    count = 0
    with atomic_output(out, "w") as f:
        f.write("query_frame,matched_frame,inliers,similarity\n")
        for frame_id, g, locals_ in read_features(features):
            det = pipeline.process_frame(frame_id, g, locals_)
            if det is not None:
                f.write(
                    f"{det.query_frame},{det.matched_frame},"
                    f"{det.inlier_count},{det.similarity:.6f}\n"
                )
                count += 1
    logger.info("processed %d frames, %d detections -> %s", pipeline.frames_processed, count, out)
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _resolve(args)
    features = _require(cfg.features, "feature file (--features)")
    gt_path = _require(cfg.gt, "ground-truth file (--gt)")
    header = read_header(features)
    phi = cfg.phi if cfg.phi is not None else header.phi
    _echo_config(cfg, phi, header)
    pipe_cfg = _pipeline_config(cfg, phi)

    frames = list(read_features(features))
    gt = read_ground_truth(gt_path, frozenset(f[0] for f in frames))
    curve = pr_curve(frames, gt, pipe_cfg, _taus(cfg), gt_window=cfg.gt_window)
    if cfg.out:
        with atomic_output(cfg.out, "w") as f:
            write_pr_csv(f, curve)
    else:
        write_pr_csv(sys.stdout, curve)
    print(f"recall_at_100_precision={recall_at_full_precision(curve):.6f}")
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    cfg = _resolve(args)
    if not cfg.out:
        raise SystemExitError(2, "missing required output path (--out)")
    phi = cfg.phi if cfg.phi is not None else 10.0
    _echo_config(cfg, phi)
    exclusion = int(round(cfg.psi * phi))
    segments = tuple(
        RevisitSegment(*(int(x) for x in part.split(":")))
        for part in args.segments.split(",")
        if part
    )
    synth_cfg = SynthConfig(
        n_frames=args.frames,
        segments=segments,
        dim_global=args.dim_global,
        dim_local=args.dim_local,
        features_per_frame=args.features_per_frame,
        outlier_fraction=args.outlier_frac,
        sigma_global=args.sigma_global,
        sigma_px=args.sigma_px,
        sigma_desc=args.sigma_desc,
        exclusion_zone=exclusion,
        seed=cfg.seed,
    )
    dataset = generate_synthetic(synth_cfg)
    write_features(
        cfg.out,
        dataset.frames,
        phi=phi,
        dim_global=synth_cfg.dim_global,
        dim_local=synth_cfg.dim_local,
    )
    if cfg.gt:
        write_ground_truth(cfg.gt, dataset.ground_truth)
    logger.info(
        "wrote %d synthetic frames (%d planted loops) -> %s",
        len(dataset.frames),
        len(dataset.planted),
        cfg.out,
    )
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    cfg = _resolve(args)
    out_dir = cfg.out or "bench"
    os.makedirs(out_dir, exist_ok=True)
    phi = cfg.phi if cfg.phi is not None else 10.0
    _echo_config(cfg, phi)
    rng = np.random.default_rng(cfg.seed)
    dim = args.bench_dim
    k = args.k

    data = rng.standard_normal((args.bench_vectors, dim))
    data /= np.linalg.norm(data, axis=1, keepdims=True)
    queries = rng.standard_normal((args.bench_queries, dim))
    queries /= np.linalg.norm(queries, axis=1, keepdims=True)
    exact = evaluation.exact_knn(data, queries, k)

    def build(params: HnswParams) -> tuple[HnswIndex, float]:
        index = HnswIndex(dim, params)
        t0 = time.perf_counter()
        for i, v in enumerate(data):
            index.insert(i, v)
        return index, (time.perf_counter() - t0) * 1e3 / len(data)

    def query_stats(index: HnswIndex, ef: int) -> tuple[float, float]:
        t0 = time.perf_counter()
        found = [index.knn_search(q, k, ef=max(ef, k)) for q in queries]
        ms = (time.perf_counter() - t0) * 1e3 / len(queries)
        ids = [[nb.frame_id for nb in row] for row in found]
        return evaluation.mean_recall(ids, exact), ms

    ef_list = [int(x) for x in args.ef_list.split(",")]
    m_list = [int(x) for x in args.m_list.split(",")]

    with atomic_output(os.path.join(out_dir, "ef_sweep.csv"), "w") as f:
        f.write("ef,recall,mean_insert_ms,mean_query_ms\n")
        for ef in ef_list:
            index, insert_ms = build(
                HnswParams(M=cfg.M, ef_construction=ef, ef_search=ef, rng_seed=cfg.seed)
            )
            recall, query_ms = query_stats(index, ef)
            f.write(f"{ef},{recall:.6f},{insert_ms:.6f},{query_ms:.6f}\n")

    with atomic_output(os.path.join(out_dir, "m_sweep.csv"), "w") as f:
        f.write("M,recall,mean_insert_ms,mean_query_ms\n")
        for m in m_list:
            index, insert_ms = build(
                HnswParams(
                    M=m,
                    ef_construction=cfg.ef_construction,
                    ef_search=cfg.ef_search,
                    rng_seed=cfg.seed,
                )
            )
            recall, query_ms = query_stats(index, cfg.ef_search)
            f.write(f"{m},{recall:.6f},{insert_ms:.6f},{query_ms:.6f}\n")

    # timing and n sweep run on a planted synthetic trajectory
    n_frames = args.bench_frames
    exclusion = int(round(cfg.psi * phi))
    seg_len = max(10, n_frames // 20)
    origin = max(1, n_frames // 10)
    revisit = origin + exclusion + seg_len
    segments = ()
    if revisit + seg_len < n_frames:
        segments = (RevisitSegment(origin, revisit, seg_len),)
    dataset = generate_synthetic(
        SynthConfig(
            n_frames=n_frames,
            segments=segments,
            dim_global=dim,
            features_per_frame=40,
            exclusion_zone=exclusion,
            seed=cfg.seed,
        )
    )
    report = evaluation.timing_harness(dataset.frames, _pipeline_config(cfg, phi))
    with atomic_output(os.path.join(out_dir, "timing.csv"), "w") as f:
        report.write_csv(f)

    n_list = [int(x) for x in args.n_list.split(",")]
    with atomic_output(os.path.join(out_dir, "n_sweep.csv"), "w") as f:
        f.write("n,recall_at_100_precision,mean_frame_ms\n")
        for n in n_list:
            pipe_cfg = dataclasses.replace(_pipeline_config(cfg, phi), n=n)
            t0 = time.perf_counter()
            curve = pr_curve(dataset.frames, dataset.ground_truth, pipe_cfg, _taus(cfg),
                             gt_window=cfg.gt_window)
            ms = (time.perf_counter() - t0) * 1e3 / len(dataset.frames)
            f.write(f"{n},{recall_at_full_precision(curve):.6f},{ms:.6f}\n")

    logger.info("benchmark tables written to %s", out_dir)
    return 0


def cmd_pca_fit(args: argparse.Namespace) -> int:
    cfg = _resolve(args)
    features = _require(cfg.features, "feature file (--features)")
    header = read_header(features)
    _echo_config(cfg, cfg.phi if cfg.phi is not None else header.phi, header)
    if not cfg.out:
        raise SystemExitError(2, "missing required output path (--out)")

    collected = []
    total = 0
    for _, _, locals_ in read_features(features):
        if len(locals_) == 0:
            continue
        collected.append(np.asarray(locals_.descriptors, dtype=np.float64))
        total += len(locals_)
        if total >= args.max_samples:
            break
    if not collected:
        raise SystemExitError(1, "no local descriptors found to fit on")
    samples = np.vstack(collected)[: args.max_samples]
    model = fit_pca(samples, args.out_dim, whiten=args.whiten)
    save_pca_model(cfg.out, model)
    logger.info(
        "fit %d-d -> %d-d PCA on %d descriptors%s -> %s",
        model.raw_dim,
        model.out_dim,
        samples.shape[0],
        " (degenerate)" if model.degenerate else "",
        cfg.out,
    )
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file; flags override it")
    p.add_argument("--features", help="input feature container (FFTC)")
    p.add_argument("--gt", help="ground-truth CSV path")
    p.add_argument("--out", help="primary output path")
    p.add_argument("--psi", type=float, help="search-area time constant, seconds")
    p.add_argument("--phi", type=float, help="camera frame rate, frames/second")
    p.add_argument("--n", type=int, help="retrieval candidates per query")
    p.add_argument("--epsilon", type=float, help="distance-ratio threshold")
    p.add_argument("--beta", type=int, help="consecutive frames for temporal consistency")
    p.add_argument("--tau", type=int, help="inlier acceptance threshold")
    p.add_argument("--delta", type=float, help="attention-score threshold")
    p.add_argument("--M", type=int, help="graph degree cap per layer")
    p.add_argument("--ef-construction", dest="ef_construction", type=int)
    p.add_argument("--ef-search", dest="ef_search", type=int)
    p.add_argument("--seed", type=int, help="base random seed")
    p.add_argument("--gt-window", dest="gt_window", type=int,
                   help="frame tolerance when matching detections to labels")
    p.add_argument("--tau-range", dest="tau_range", type=_parse_tau_range,
                   help="inlier threshold sweep as lo:hi[:step]")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="loopdet",
        description="Incremental visual loop-closure detection and evaluation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("detect", help="run the detection pipeline over a feature file")
    _add_common(p)
    p.add_argument("--pca", help="optional PCA model applied to raw local descriptors")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", help="precision-recall sweep against ground truth")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="generate a synthetic feature container")
    _add_common(p)
    p.add_argument("--frames", type=int, default=2000, help="trajectory length")
    p.add_argument("--segments", default="",
                   help="revisit segments as origin:revisit:length[,...]")
    p.add_argument("--dim-global", dest="dim_global", type=int, default=256)
    p.add_argument("--dim-local", dest="dim_local", type=int, default=40)
    p.add_argument("--features-per-frame", dest="features_per_frame", type=int, default=80)
    p.add_argument("--outlier-frac", dest="outlier_frac", type=float, default=0.0)
    p.add_argument("--sigma-global", dest="sigma_global", type=float, default=0.0)
    p.add_argument("--sigma-px", dest="sigma_px", type=float, default=0.0)
    p.add_argument("--sigma-desc", dest="sigma_desc", type=float, default=0.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("bench", help="graph sweeps and per-stage timing tables")
    _add_common(p)
    p.add_argument("--bench-vectors", dest="bench_vectors", type=int, default=2000)
    p.add_argument("--bench-queries", dest="bench_queries", type=int, default=200)
    p.add_argument("--bench-dim", dest="bench_dim", type=int, default=64)
    p.add_argument("--bench-frames", dest="bench_frames", type=int, default=1500)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--ef-list", dest="ef_list", default="20,40,80")
    p.add_argument("--m-list", dest="m_list", default="8,16,48")
    p.add_argument("--n-list", dest="n_list", default="1,3,5,10")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("pca-fit", help="fit a PCA reduction on a container's local descriptors")
    _add_common(p)
    p.add_argument("--out-dim", dest="out_dim", type=int, default=40)
    p.add_argument("--whiten", action="store_true")
    p.add_argument("--max-samples", dest="max_samples", type=int, default=50000)
    p.set_defaults(func=cmd_pca_fit)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        stream=sys.stderr,
        level=os.environ.get(LOG_ENV, "INFO").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SystemExitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ContainerError as exc:
        print(f"error: invalid feature file ({exc.category}): {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
