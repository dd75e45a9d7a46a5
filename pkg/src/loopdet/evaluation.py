"""Ground-truth scoring, precision-recall sweeps, timing and synthetic data.

The synthetic generator replaces the out-of-scope CNN front end: global
descriptors drift smoothly along a simulated trajectory, revisit segments
re-emit the origin descriptors plus bounded noise, and the local features of
each loop pair are exact projections of a random two-view scene, so the
planted fundamental matrix and inlier labels are known for every stage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence, TextIO

import numpy as np

from .descriptors import GlobalDescriptor, LocalFeatureSet, l2_normalize
from .geometry import sampson_distance
from .pipeline import (
    STAGES,
    FrameRecord,
    LoopClosurePipeline,
    PipelineConfig,
    collect_frame_records,
    replay_detections,
)

Frame = tuple[int, GlobalDescriptor, LocalFeatureSet]


# ---------------------------------------------------------------------------
# ground truth and scoring
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """Labeled loop events: per-query sets of acceptable matched frames.

    ``frames``, when given, is the universe of valid frame ids and enables
    rejection of detections that reference unknown frames.
    """

    pairs: dict[int, frozenset[int]]
    frames: frozenset[int] | None = None

    def __post_init__(self):
        if self.frames is not None:
            for q, ms in self.pairs.items():
                if q not in self.frames or not ms <= self.frames:
                    raise ValueError(f"ground-truth pair for query {q} references unknown frames")

    @property
    def positive_queries(self) -> int:
        return len(self.pairs)


def _detection_pair(det) -> tuple[int, int]:
    if isinstance(det, (tuple, list)):
        return int(det[0]), int(det[1])
    return int(det.query_frame), int(det.matched_frame)


def score(detections: Iterable, gt: GroundTruth, window: int = 10) -> tuple[int, int, int]:
    """Count (tp, fp, fn) for a detection list against labeled loops.

    A detection is a true positive iff its query is a labeled query and its
    matched frame lies within ``window`` of some labeled match for that
    query (human labels are place-level, not frame-exact).  ``fn`` counts
    labeled queries with no true-positive detection; the pipeline emits at
    most one detection per query, so tp + fn covers each labeled query once.
    """
    tp = 0
    fp = 0
    hit_queries: set[int] = set()
    for det in detections:
        q, m = _detection_pair(det)
        if gt.frames is not None and (q not in gt.frames or m not in gt.frames):
            raise ValueError(f"detection ({q}, {m}) references unknown frames")
        accepted = gt.pairs.get(q)
        if accepted is not None and any(abs(m - lab) <= window for lab in accepted):
            tp += 1
            hit_queries.add(q)
        else:
            fp += 1
    fn = sum(1 for q in gt.pairs if q not in hit_queries)
    return tp, fp, fn


def read_ground_truth(path, frames: frozenset[int] | None = None) -> GroundTruth:
    """Parse ``query_frame,matched_frame`` CSV lines; '#' starts a comment."""
    pairs: dict[int, set[int]] = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'query_frame,matched_frame'")
            q, m = int(parts[0]), int(parts[1])
            pairs.setdefault(q, set()).add(m)
    return GroundTruth({q: frozenset(ms) for q, ms in pairs.items()}, frames)


def write_ground_truth(path, gt: GroundTruth) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("# query_frame,matched_frame\n")
        for q in sorted(gt.pairs):
            for m in sorted(gt.pairs[q]):
                f.write(f"{q},{m}\n")


# ---------------------------------------------------------------------------
# precision-recall
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PrPoint:
    tau: int
    precision: float
    recall: float
    tp: int
    fp: int
    fn: int


def _pr_point(tau: int, tp: int, fp: int, fn: int) -> PrPoint:
    precision = tp / (tp + fp) if tp + fp > 0 else 1.0  # 0/0 convention: perfect
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    return PrPoint(tau, precision, recall, tp, fp, fn)


def pr_curve(
    frames: Sequence[Frame],
    gt: GroundTruth,
    config: PipelineConfig,
    tau_range: Sequence[int],
    *,
    gt_window: int = 10,
    records: Sequence[FrameRecord] | None = None,
) -> list[PrPoint]:
    """Sweep the inlier acceptance threshold over one cached pipeline pass.

    The pipeline runs once with the inlier gate disabled, caching each
    frame's best verified candidate; every ``tau`` is then replayed through
    the temporal filter, which is exact because candidate choice and inlier
    counts are independent of ``tau``.
    """
    taus = sorted(tau_range)
    if not taus:
        raise ValueError("tau_range must be non-empty")
    if records is None:
        dim = frames[0][1].dim if frames else 1
        records, _ = collect_frame_records(iter(frames), config, dim)
    points = []
    for tau in taus:
        detections = replay_detections(records, tau, config.beta, config.window)
        tp, fp, fn = score(detections, gt, window=gt_window)
        points.append(_pr_point(tau, tp, fp, fn))
    return points


def recall_at_full_precision(curve: Sequence[PrPoint]) -> float:
    """Largest recall among sweep points with precision exactly 1.0 (0 if none)."""
    if not curve:
        raise ValueError("curve must be non-empty")
    return max((p.recall for p in curve if p.precision == 1.0), default=0.0)


def write_pr_csv(fobj: TextIO, curve: Sequence[PrPoint]) -> None:
    fobj.write("tau,precision,recall,tp,fp,fn\n")
    for p in curve:
        fobj.write(f"{p.tau},{p.precision:.6f},{p.recall:.6f},{p.tp},{p.fp},{p.fn}\n")


# ---------------------------------------------------------------------------
# exact search oracle
# ---------------------------------------------------------------------------


def exact_knn(vectors: np.ndarray, queries: np.ndarray, k: int) -> np.ndarray:
    """Brute-force cosine k-NN: row indices of the k most similar vectors.

    Linear scan over unit-normalized rows; ties resolve to the smaller
    index.  Serves as the recall oracle for the graph index.
    """
    V = np.asarray(vectors, dtype=np.float64)
    V = V / np.linalg.norm(V, axis=1, keepdims=True)
    Q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    Q = Q / np.linalg.norm(Q, axis=1, keepdims=True)
    sims = Q @ V.T
    return np.argsort(-sims, axis=1, kind="stable")[:, :k]


def mean_recall(approx_ids: Sequence[Sequence[int]], exact_ids: np.ndarray) -> float:
    hits = [
        len(set(a) & set(e.tolist())) / len(e) for a, e in zip(approx_ids, exact_ids)
    ]
    return float(np.mean(hits))


# ---------------------------------------------------------------------------
# synthetic datasets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RevisitSegment:
    """``length`` frames starting at ``revisit_start`` re-observe the frames
    starting at ``origin_start``."""

    origin_start: int
    revisit_start: int
    length: int


@dataclass(frozen=True)
class SynthConfig:
    n_frames: int
    segments: tuple[RevisitSegment, ...] = ()
    dim_global: int = 256
    dim_local: int = 40
    features_per_frame: int = 80
    outlier_fraction: float = 0.0
    sigma_global: float = 0.0
    sigma_px: float = 0.0
    sigma_desc: float = 0.0
    drift: float = 0.98
    image_size: tuple[int, int] = (1280, 960)
    exclusion_zone: int = 400
    score_range: tuple[float, float] = (20.0, 100.0)
    seed: int = 0

    def __post_init__(self):
        if self.n_frames < 1:
            raise ValueError("n_frames must be >= 1")
        if not 0.0 <= self.outlier_fraction < 1.0:
            raise ValueError("outlier_fraction must be in [0, 1)")
        if not 0.0 < self.drift < 1.0:
            raise ValueError("drift must be in (0, 1)")
        spans = []
        for seg in self.segments:
            if seg.length < 1:
                raise ValueError("segment length must be >= 1")
            if seg.origin_start < 0 or seg.revisit_start + seg.length > self.n_frames:
                raise ValueError(f"segment {seg} exceeds the trajectory")
            if seg.revisit_start - seg.origin_start <= self.exclusion_zone:
                raise ValueError(
                    f"segment {seg} violates the exclusion constraint: revisit must "
                    f"start more than {self.exclusion_zone} frames after its origin"
                )
            spans.append((seg.origin_start, seg.origin_start + seg.length))
            spans.append((seg.revisit_start, seg.revisit_start + seg.length))
        spans.sort()
        for (a0, a1), (b0, b1) in zip(spans, spans[1:]):
            if b0 < a1:
                raise ValueError("revisit/origin ranges overlap")


@dataclass(frozen=True, eq=False)
class PlantedLoop:
    """Generator-side truth for one loop pair."""

    query_frame: int
    origin_frame: int
    fundamental: np.ndarray
    inlier_count: int
    outlier_count: int


@dataclass(eq=False)
class SyntheticDataset:
    frames: list[Frame]
    ground_truth: GroundTruth
    planted: dict[int, PlantedLoop]
    seed: int
    config: SynthConfig

    @property
    def dim_global(self) -> int:
        return self.config.dim_global

    @property
    def dim_local(self) -> int:
        return self.config.dim_local


class EpipolarScene:
    """Random calibrated two-view rig used to plant exact correspondences."""

    def __init__(self, rng: np.random.Generator, image_size: tuple[int, int] = (1280, 960)):
        w, h = image_size
        self.image_size = image_size
        f = 0.9 * w
        self.K = np.array([[f, 0.0, w / 2.0], [0.0, f, h / 2.0], [0.0, 0.0, 1.0]])
        angles = rng.uniform(-0.12, 0.12, size=3)
        self.R = self._rotation(angles)
        t = rng.uniform(-1.0, 1.0, size=3)
        t[0] += np.sign(t[0]) + 0.5  # keep a solid baseline so F is well defined
        self.t = t
        Kinv = np.linalg.inv(self.K)
        tx = np.array(
            [[0, -t[2], t[1]], [t[2], 0, -t[0]], [-t[1], t[0], 0]], dtype=np.float64
        )
        F = Kinv.T @ tx @ self.R @ Kinv
        F /= np.linalg.norm(F)
        if F.flat[np.abs(F).argmax()] < 0:
            F = -F
        self.F = F
        self._rng = rng

    @staticmethod
    def _rotation(angles) -> np.ndarray:
        cx, cy, cz = np.cos(angles)
        sx, sy, sz = np.sin(angles)
        Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
        Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
        Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
        return Rz @ Ry @ Rx

    def correspondences(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        """Sample n 3-D points visible in both views; returns exact pixel pairs."""
        w, h = self.image_size
        pts_a = np.empty((n, 2))
        pts_b = np.empty((n, 2))
        got = 0
        while got < n:
            batch = max(2 * (n - got), 16)
            X = np.column_stack(
                [
                    self._rng.uniform(-4.0, 4.0, batch),
                    self._rng.uniform(-3.0, 3.0, batch),
                    self._rng.uniform(4.0, 12.0, batch),
                ]
            )
            xa = (self.K @ X.T).T
            xa = xa[:, :2] / xa[:, 2:3]
            Xb = (self.R @ X.T).T + self.t
            xb = (self.K @ Xb.T).T
            ok_depth = Xb[:, 2] > 0.1
            xb = np.where(ok_depth[:, None], xb[:, :2] / np.where(ok_depth, xb[:, 2], 1.0)[:, None], -1e9)
            ok = (
                ok_depth
                & (xa[:, 0] >= 0) & (xa[:, 0] < w) & (xa[:, 1] >= 0) & (xa[:, 1] < h)
                & (xb[:, 0] >= 0) & (xb[:, 0] < w) & (xb[:, 1] >= 0) & (xb[:, 1] < h)
            )
            take = min(int(ok.sum()), n - got)
            pts_a[got : got + take] = xa[ok][:take]
            pts_b[got : got + take] = xb[ok][:take]
            got += take
        return pts_a, pts_b

    def outlier_pairs(self, n: int, min_sampson: float = 6.0) -> tuple[np.ndarray, np.ndarray]:
        """Uniform point pairs rejection-sampled away from the epipolar
        constraint, so outlier labels are geometrically meaningful."""
        w, h = self.image_size
        pts_a = np.empty((n, 2))
        pts_b = np.empty((n, 2))
        got = 0
        while got < n:
            batch = max(2 * (n - got), 16)
            xa = np.column_stack(
                [self._rng.uniform(0, w, batch), self._rng.uniform(0, h, batch)]
            )
            xb = np.column_stack(
                [self._rng.uniform(0, w, batch), self._rng.uniform(0, h, batch)]
            )
            ok = sampson_distance(self.F, xa, xb) >= min_sampson
            take = min(int(ok.sum()), n - got)
            pts_a[got : got + take] = xa[ok][:take]
            pts_b[got : got + take] = xb[ok][:take]
            got += take
        return pts_a, pts_b


def _unit_rows(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    X = rng.standard_normal((n, dim))
    return X / np.linalg.norm(X, axis=1, keepdims=True)


def generate_synthetic(config: SynthConfig) -> SyntheticDataset:
    """Build a deterministic synthetic trajectory with planted revisits.

    Global descriptors follow a smooth random walk on the unit sphere
    (adjacent-frame cosine about ``drift``); each revisit frame re-emits its
    origin descriptor plus a noise vector of norm ``sigma_global``.  Loop
    pairs share planted local correspondences generated from a random
    fundamental matrix, with ``sigma_px`` keypoint noise and an
    ``outlier_fraction`` of matchable distractor pairs at random positions.
    """
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    T, D, d = cfg.n_frames, cfg.dim_global, cfg.dim_local

    base = np.empty((T, D))
    v = _unit_rows(rng, 1, D)[0]
    step = math.sqrt(1.0 - cfg.drift**2)
    for i in range(T):
        base[i] = v
        w = _unit_rows(rng, 1, D)[0]
        v = l2_normalize(cfg.drift * v + step * w)

    role: dict[int, tuple[str, int]] = {}  # frame -> ("origin"|"revisit", partner)
    for seg in cfg.segments:
        for j in range(seg.length):
            role[seg.origin_start + j] = ("origin", seg.revisit_start + j)
            role[seg.revisit_start + j] = ("revisit", seg.origin_start + j)

    n_total = cfg.features_per_frame
    n_out = int(round(cfg.outlier_fraction * n_total))
    n_inl = n_total - n_out
    lo, hi = cfg.score_range

    globals_ = np.empty((T, D))
    locals_: dict[int, LocalFeatureSet] = {}
    planted: dict[int, PlantedLoop] = {}
    gt_pairs: dict[int, frozenset[int]] = {}

    for i in range(T):
        kind, partner = role.get(i, (None, -1))
        if kind == "revisit":
            noise = cfg.sigma_global * _unit_rows(rng, 1, D)[0]
            globals_[i] = l2_normalize(base[partner] + noise)
        else:
            globals_[i] = base[i]

        if kind == "revisit":
            scene = EpipolarScene(rng, cfg.image_size)
            pa, pb = scene.correspondences(n_inl)
            if cfg.sigma_px > 0:
                pb = pb + rng.normal(0.0, cfg.sigma_px, pb.shape)
            desc = _unit_rows(rng, n_inl, d)
            desc_b = desc
            if cfg.sigma_desc > 0:
                desc_b = desc + cfg.sigma_desc * rng.standard_normal((n_inl, d))
                desc_b /= np.linalg.norm(desc_b, axis=1, keepdims=True)
            oa, ob = scene.outlier_pairs(n_out) if n_out else (np.empty((0, 2)),) * 2
            odesc = _unit_rows(rng, n_out, d) if n_out else np.empty((0, d))

            origin_set = LocalFeatureSet(
                partner,
                np.vstack([pa, oa]).astype(np.float32),
                rng.uniform(lo, hi, n_total).astype(np.float32),
                np.vstack([desc, odesc]).astype(np.float32),
            )
            query_set = LocalFeatureSet(
                i,
                np.vstack([pb, ob]).astype(np.float32),
                rng.uniform(lo, hi, n_total).astype(np.float32),
                np.vstack([desc_b, odesc]).astype(np.float32),
            )
            locals_[partner] = origin_set
            locals_[i] = query_set
            planted[i] = PlantedLoop(i, partner, scene.F, n_inl, n_out)
            gt_pairs[i] = frozenset([partner])
        elif kind == "origin":
            pass  # filled in by the matching revisit frame above or below
        else:
            w_img, h_img = cfg.image_size
            locals_[i] = LocalFeatureSet(
                i,
                np.column_stack(
                    [rng.uniform(0, w_img, n_total), rng.uniform(0, h_img, n_total)]
                ).astype(np.float32),
                rng.uniform(lo, hi, n_total).astype(np.float32),
                _unit_rows(rng, n_total, d).astype(np.float32),
            )

    frames = [
        (i, GlobalDescriptor(i, globals_[i].astype(np.float32)), locals_[i])
        for i in range(T)
    ]
    gt = GroundTruth(gt_pairs, frozenset(range(T)))
    return SyntheticDataset(frames, gt, planted, cfg.seed, cfg)


# ---------------------------------------------------------------------------
# timing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StageStats:
    stage: str
    mean_ms: float
    std_ms: float
    max_ms: float
    min_ms: float
    count: int


@dataclass(frozen=True)
class TimingReport:
    stages: tuple[StageStats, ...]

    def stat(self, stage: str) -> StageStats | None:
        for s in self.stages:
            if s.stage == stage:
                return s
        return None

    def write_csv(self, fobj: TextIO) -> None:
        fobj.write("stage,mean_ms,std_ms,max_ms,min_ms\n")
        for s in self.stages:
            fobj.write(
                f"{s.stage},{s.mean_ms:.6f},{s.std_ms:.6f},{s.max_ms:.6f},{s.min_ms:.6f}\n"
            )


def aggregate_timings(stage_log: Sequence[dict[str, float]]) -> TimingReport:
    """Per-stage wall-clock statistics (ms) over frames where the stage ran."""
    stats = []
    for stage in STAGES:
        samples = [entry[stage] * 1e3 for entry in stage_log if entry.get(stage, 0.0) > 0.0]
        if not samples:
            continue
        arr = np.asarray(samples)
        stats.append(
            StageStats(
                stage,
                float(arr.mean()),
                float(arr.std()),
                float(arr.max()),
                float(arr.min()),
                len(samples),
            )
        )
    return TimingReport(tuple(stats))


def timing_harness(
    frames: Sequence[Frame], config: PipelineConfig, pca=None
) -> TimingReport:
    """Run the pipeline over a dataset and report per-stage wall-clock stats."""
    if not frames:
        return TimingReport(())
    pipeline = LoopClosurePipeline(config, frames[0][1].dim, pca=pca)
    for frame_id, g, locals_ in frames:
        pipeline.process_frame(frame_id, g, locals_)
    return aggregate_timings(pipeline.stage_log)
