"""Online loop-closure state machine.

Each incoming frame is score-filtered (and optionally PCA-reduced), the
oldest deferred frame is moved from the FIFO queue into the search index
once the queue reaches the exclusion size ``N_non = round(psi * phi)``, the
top ``n`` revisit candidates are retrieved and geometrically verified, and a
loop is reported only after ``beta`` consecutive frames verify against
nearby locations.  Frames inside the exclusion window are never searchable,
so a query can only ever match frames at least ``N_non`` ids behind it.
"""

from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .descriptors import (
    GlobalDescriptor,
    LocalFeatureSet,
    PcaModel,
    filter_by_score,
    l2_normalize,
    reduce_features,
)
from .geometry import FundamentalMatrix, VerificationResult, brute_force_match, ransac_fundamental
from .hnsw import HnswIndex, HnswParams, Neighbor

STAGES = (
    "feature_ingestion",
    "adding_feature",
    "graph_searching",
    "feature_matching",
    "ransac",
    "whole_system",
)


@dataclass(frozen=True)
class PipelineConfig:
    """All pipeline knobs.

    ``psi`` (seconds) times ``phi`` (frames/s) defines the exclusion zone;
    ``n`` candidates are verified per query with ratio threshold ``epsilon``
    and inlier acceptance ``tau``; ``delta`` filters local features at
    ingestion; ``beta`` consecutive verified frames are required before a
    loop is reported.  ``consistency_window`` bounds how far apart the
    matched frames of a streak may lie (default ``n * (beta + 1)``).
    """

    psi: float = 40.0
    phi: float = 10.0
    n: int = 5
    epsilon: float = 0.7
    beta: int = 2
    tau: int = 12
    delta: float = 15.0
    hnsw: HnswParams = field(default_factory=HnswParams)
    ransac_iters: int = 500
    px_thresh: float = 3.0
    refit: bool = True
    consistency_window: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.psi <= 0 or self.phi <= 0 or self.psi * self.phi < 1.0:
            raise ValueError("psi and phi must be positive with psi * phi >= 1")
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")
        if self.beta < 1:
            raise ValueError(f"beta must be >= 1, got {self.beta}")
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError(f"epsilon must be in (0, 1), got {self.epsilon}")
        if self.tau < 0:
            raise ValueError(f"tau must be >= 0, got {self.tau}")

    @property
    def n_non(self) -> int:
        return max(1, int(round(self.psi * self.phi)))

    @property
    def window(self) -> int:
        if self.consistency_window is not None:
            return self.consistency_window
        return self.n * (self.beta + 1)


@dataclass(frozen=True, eq=False)
class LoopDetection:
    """An accepted loop-closure event."""

    query_frame: int
    matched_frame: int
    inlier_count: int
    matrix: FundamentalMatrix
    similarity: float


@dataclass(frozen=True)
class FrameRecord:
    """Best verification outcome for one processed frame (before the
    temporal filter); ``matched_frame`` is None when verification failed."""

    frame_id: int
    matched_frame: int | None
    inlier_count: int
    similarity: float


class TemporalFilter:
    """Streak counter behind the beta-consecutive-frames rule.

    ``update`` is called once per processed frame with the verified match id
    (or None).  It returns True when the current frame completes a streak of
    at least ``beta`` consecutive verified frames whose matched ids stay
    within ``window`` of each other; a success outside the window starts a
    fresh streak rather than extending the old one.
    """

    def __init__(self, beta: int, window: int):
        self.beta = beta
        self.window = window
        self._streak = 0
        self._recent: deque[int] = deque(maxlen=max(beta - 1, 0))

    def update(self, matched_frame: int | None) -> bool:
        if matched_frame is None:
            self._streak = 0
            self._recent.clear()
            return False
        ids = list(self._recent) + [matched_frame]
        if self._streak > 0 and max(ids) - min(ids) <= self.window:
            self._streak += 1
        else:
            self._streak = 1
            self._recent.clear()
        self._recent.append(matched_frame)
        return self._streak >= self.beta


def _candidate_rng(seed: int, query_frame: int, candidate_frame: int) -> np.random.Generator:
    # one independent, reproducible stream per (query, candidate) pair
    return np.random.default_rng(np.random.SeedSequence([seed, query_frame, candidate_frame]))


class LoopClosurePipeline:
    """Sequential detector: feed frames in strictly increasing id order.

    ``process_frame`` is single-writer; within one call the candidate
    verifications are independent and merged deterministically in candidate
    order.  Per-frame stage timings and verification records accumulate on
    the instance for evaluation harnesses.
    """

    def __init__(self, config: PipelineConfig, dim: int, pca: PcaModel | None = None):
        self.config = config
        self.index = HnswIndex(dim, config.hnsw)
        self.pca = pca
        self.fifo: deque[tuple[int, np.ndarray]] = deque()
        self.locals_store: dict[int, LocalFeatureSet] = {}
        self.records: list[FrameRecord] = []
        self.stage_log: list[dict[str, float]] = []
        self._temporal = TemporalFilter(config.beta, config.window)
        self._last_frame_id: int | None = None
        self._frames_pushed = 0

    @property
    def frames_processed(self) -> int:
        return self._frames_pushed

    def searchable_region(self) -> tuple[int, int] | None:
        """Contiguous frame-id range currently in the index, or None."""
        ids = self.index.frame_ids
        if not ids:
            return None
        return ids[0], ids[-1]

    def process_frame(
        self, frame_id: int, g: GlobalDescriptor | np.ndarray, locals_: LocalFeatureSet
    ) -> LoopDetection | None:
        """Run one step of the detection loop; returns a loop event or None."""
        t_start = time.perf_counter()
        cfg = self.config
        if self._last_frame_id is not None and frame_id <= self._last_frame_id:
            raise ValueError(
                f"frame ids must be strictly increasing: {frame_id} after {self._last_frame_id}"
            )
        vec = np.asarray(
            g.values if isinstance(g, GlobalDescriptor) else g, dtype=np.float64
        ).reshape(-1)
        if vec.shape[0] != self.index.dim:
            raise ValueError(
                f"descriptor dimension {vec.shape[0]} does not match index dim {self.index.dim}"
            )
        stages = dict.fromkeys(STAGES, 0.0)

        t0 = time.perf_counter()
        kept = filter_by_score(locals_, cfg.delta)
        if self.pca is not None and kept.dim != self.pca.out_dim:
            kept = reduce_features(self.pca, kept)
        stages["feature_ingestion"] = time.perf_counter() - t0

        if len(self.fifo) == cfg.n_non:
            old_id, old_vec = self.fifo.popleft()
            t0 = time.perf_counter()
            self.index.insert(old_id, old_vec)
            stages["adding_feature"] = time.perf_counter() - t0

        detection = None
        record = FrameRecord(frame_id, None, -1, float("nan"))
        if len(self.index) > 0:
            t0 = time.perf_counter()
            candidates = self.index.knn_search(
                vec, k=cfg.n, ef=max(cfg.hnsw.ef_search, cfg.n)
            )
            stages["graph_searching"] = time.perf_counter() - t0
            best = self.verify_candidates(kept, candidates, stages=stages)
            if best is not None:
                matched, result, sim = best
                record = FrameRecord(frame_id, matched, result.inlier_count, sim)
                if self._temporal.update(matched):
                    if frame_id - matched < cfg.n_non:
                        raise RuntimeError(
                            "exclusion-zone invariant violated: "
                            f"{frame_id} matched {matched}"
                        )
                    detection = LoopDetection(
                        frame_id, matched, result.inlier_count, result.matrix, sim
                    )
            else:
                self._temporal.update(None)
        else:
            self._temporal.update(None)

        self.fifo.append((frame_id, l2_normalize(vec).astype(np.float32)))
        self.locals_store[frame_id] = kept
        self._last_frame_id = frame_id
        self._frames_pushed += 1
        self.records.append(record)
        stages["whole_system"] = time.perf_counter() - t_start
        self.stage_log.append(stages)
        return detection

    def verify_candidates(
        self,
        query_locals: LocalFeatureSet,
        candidates: Sequence[Neighbor],
        stages: dict[str, float] | None = None,
    ) -> tuple[int, VerificationResult, float] | None:
        """Geometrically verify retrieval candidates; keep the max-inlier one.

        Candidates arrive sorted by similarity descending with frame-id tie
        break, and only a strictly greater inlier count displaces the
        incumbent, so ties resolve to the higher-similarity candidate.
        Returns ``(frame_id, result, similarity)`` or None if every
        candidate fails.
        """
        cfg = self.config
        best: tuple[int, VerificationResult, float] | None = None
        best_inliers = -1
        for cand in candidates:
            cand_locals = self.locals_store.get(cand.frame_id)
            if cand_locals is None:
                continue
            t0 = time.perf_counter()
            matches = brute_force_match(query_locals, cand_locals, cfg.epsilon)
            if stages is not None:
                stages["feature_matching"] += time.perf_counter() - t0
            if len(matches) < 8:
                continue
            t0 = time.perf_counter()
            result = ransac_fundamental(
                matches,
                query_locals,
                cand_locals,
                cfg.tau,
                _candidate_rng(cfg.seed, query_locals.frame_id, cand.frame_id),
                cfg.ransac_iters,
                px_thresh=cfg.px_thresh,
                refit=cfg.refit,
            )
            if stages is not None:
                stages["ransac"] += time.perf_counter() - t0
            if result is not None and result.inlier_count > best_inliers:
                best = (cand.frame_id, result, cand.similarity)
                best_inliers = result.inlier_count
        return best


def run_pipeline(
    frames: Iterable[tuple[int, GlobalDescriptor | np.ndarray, LocalFeatureSet]],
    config: PipelineConfig,
    dim: int,
    pca: PcaModel | None = None,
) -> tuple[list[LoopDetection], LoopClosurePipeline]:
    """Feed a frame stream through a fresh pipeline; returns detections and state."""
    pipeline = LoopClosurePipeline(config, dim, pca=pca)
    detections = []
    for frame_id, g, locals_ in frames:
        det = pipeline.process_frame(frame_id, g, locals_)
        if det is not None:
            detections.append(det)
    return detections, pipeline


def replay_detections(
    records: Sequence[FrameRecord], tau: int, beta: int, window: int
) -> list[tuple[int, int, int]]:
    """Re-threshold cached per-frame verification records at a new ``tau``.

    Returns (query_frame, matched_frame, inlier_count) triples exactly as a
    live run with that ``tau`` would have emitted them, reusing the same
    temporal filter; valid because the per-candidate inlier counts do not
    depend on ``tau``.
    """
    temporal = TemporalFilter(beta, window)
    out = []
    for rec in records:
        hit = rec.matched_frame is not None and rec.inlier_count >= tau
        if temporal.update(rec.matched_frame if hit else None):
            out.append((rec.frame_id, rec.matched_frame, rec.inlier_count))
    return out


def collect_frame_records(
    frames: Iterable[tuple[int, GlobalDescriptor | np.ndarray, LocalFeatureSet]],
    config: PipelineConfig,
    dim: int,
    pca: PcaModel | None = None,
) -> tuple[list[FrameRecord], LoopClosurePipeline]:
    """One pipeline pass with the inlier gate disabled, for threshold sweeps."""
    permissive = replace(config, tau=0)
    _, pipeline = run_pipeline(frames, permissive, dim, pca=pca)
    return pipeline.records, pipeline
