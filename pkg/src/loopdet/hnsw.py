"""Incremental hierarchical navigable small-world graph over global descriptors.

The index is append-only: every frame descriptor is assigned a random top
layer with exponentially decaying probability, linked greedily layer by
layer, and stays searchable forever.  Similarity between frames is the
normalized scalar product (cosine); descriptors are unit-normalized once at
insertion so the inner loops reduce to dot products, and the graph
internally minimizes ``1 - cosine`` which is order-equivalent.

Queries descend from the sparse top layers with a greedy beam of one, then
run a best-first search with a dynamic candidate list of size ``ef`` on the
ground layer.  Recall is controlled by ``ef``; connectivity by ``M`` (layer
degree cap, ground layer allows ``2*M``).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from heapq import heapify, heappop, heappush, heapreplace
from typing import BinaryIO, Mapping, Sequence

import numpy as np

from .descriptors import GlobalDescriptor, l2_normalize

INDEX_MAGIC = b"FHNW"
INDEX_VERSION = 1


class IndexAuditError(RuntimeError):
    """The graph violates a structural invariant."""


@dataclass(frozen=True)
class HnswParams:
    """Graph construction and search knobs.

    ``M0`` defaults to ``2 * M`` and ``level_lambda`` to ``1 / ln(M)``,
    following the standard HNSW construction.  ``ef_construction`` below
    ``M`` is accepted (it is a common published operating point) and is
    clamped to ``M`` internally when gathering link candidates.
    """

    M: int = 48
    ef_construction: int = 40
    ef_search: int = 40
    rng_seed: int = 0
    M0: int = 0  # 0 -> resolved to 2 * M
    level_lambda: float = 0.0  # 0 -> resolved to 1 / ln(M)

    def __post_init__(self):
        if self.M < 2:
            raise ValueError(f"M must be >= 2, got {self.M}")
        if self.ef_construction < 1:
            raise ValueError(f"ef_construction must be >= 1, got {self.ef_construction}")
        if self.ef_search < 1:
            raise ValueError(f"ef_search must be >= 1, got {self.ef_search}")
        if self.rng_seed < 0:
            raise ValueError("rng_seed must be non-negative")
        if self.M0 == 0:
            object.__setattr__(self, "M0", 2 * self.M)
        if self.M0 < self.M:
            raise ValueError(f"M0 must be >= M, got {self.M0} < {self.M}")
        if self.level_lambda == 0.0:
            object.__setattr__(self, "level_lambda", 1.0 / math.log(self.M))
        if self.level_lambda < 0:
            raise ValueError("level_lambda must be non-negative")

    @property
    def ef_construction_effective(self) -> int:
        return max(self.ef_construction, self.M)


@dataclass(frozen=True)
class Neighbor:
    """One search result: frame and its cosine similarity to the query."""

    frame_id: int
    similarity: float


def similarity(p, q) -> float:
    """Cosine of the angle between two descriptors: p.q / (|p| |q|).

    Symmetric, in [-1, 1].  Raises on dimension mismatch or zero vectors.
    """
    pv = np.asarray(p.values if isinstance(p, GlobalDescriptor) else p, dtype=np.float64)
    qv = np.asarray(q.values if isinstance(q, GlobalDescriptor) else q, dtype=np.float64)
    if pv.shape != qv.shape:
        raise ValueError(f"dimension mismatch: {pv.shape} vs {qv.shape}")
    np_ = float(np.linalg.norm(pv))
    nq = float(np.linalg.norm(qv))
    if np_ == 0.0 or nq == 0.0:
        raise ValueError("similarity undefined for zero vectors")
    return float(np.dot(pv, qv) / (np_ * nq))


def assign_level(rng: np.random.Generator, level_lambda: float) -> int:
    """Draw a maximum layer: floor(-ln(U) * level_lambda), U uniform in (0, 1]."""
    u = 1.0 - rng.random()  # random() is [0, 1); map to (0, 1] so log is finite
    return int(math.floor(-math.log(u) * level_lambda))


def _keep_diverse(
    base_dists: Sequence[float],
    pair_dist,
    m: int,
    *,
    backfill: bool,
) -> list[int]:
    """Core neighbor-selection rule over candidates sorted by distance ascending.

    Position ``i`` is kept only if it is closer to the base element than to
    every already-kept position (``pair_dist(i, kept)`` strictly greater than
    ``base_dists[i]`` for all kept).  With ``backfill`` the nearest discarded
    candidates top the result up to ``m``.
    """
    kept: list[int] = []
    discarded: list[int] = []
    for i, d in enumerate(base_dists):
        if len(kept) == m:
            break
        if kept:
            if (np.asarray(pair_dist(i, kept)) <= d).any():
                discarded.append(i)
                continue
        kept.append(i)
    if backfill:
        for i in discarded:
            if len(kept) == m:
                break
            kept.append(i)
    return kept


def select_neighbors(
    base,
    candidates: Sequence[Neighbor],
    m: int,
    descriptors: Mapping[int, np.ndarray],
) -> list[Neighbor]:
    """Diversity-aware pruning of link candidates for a base descriptor.

    ``candidates`` must be sorted by similarity descending.  A candidate is
    kept only if it is closer to ``base`` than to every already-kept
    neighbor; if fewer than ``m`` survive, the nearest discarded candidates
    are backfilled.  ``descriptors`` maps frame id to descriptor (an
    :class:`HnswIndex` works directly).
    """
    if len(candidates) <= m:
        return list(candidates)
    base_v = l2_normalize(base.values if isinstance(base, GlobalDescriptor) else base)
    vecs = np.stack([l2_normalize(descriptors[c.frame_id]) for c in candidates])
    base_dists = 1.0 - vecs @ base_v
    pair = 1.0 - vecs @ vecs.T

    kept = _keep_diverse(
        base_dists.tolist(), lambda i, kept_idx: pair[i, kept_idx], m, backfill=True
    )
    chosen = [candidates[i] for i in kept]
    chosen.sort(key=lambda c: (-c.similarity, c.frame_id))
    return chosen


class HnswIndex:
    """Append-only multi-layer proximity graph with cosine k-NN search.

    Concurrency contract: any number of concurrent searchers OR a single
    inserter at a time; searches running concurrently with an insert are
    not supported.  Search results reflect the inserts completed so far.
    """

    def __init__(self, dim: int, params: HnswParams | None = None):
        if dim < 1:
            raise ValueError(f"dim must be >= 1, got {dim}")
        self.params = params if params is not None else HnswParams()
        self._dim = dim
        self._rng = np.random.default_rng(self.params.rng_seed)
        self._level_draws = 0
        self._vectors = np.zeros((256, dim), dtype=np.float32)
        self._ids: list[int] = []
        self._id_to_idx: dict[int, int] = {}
        self._levels: list[int] = []
        # _links[idx][layer] -> int64 array of neighbor idxs, layers 0..level
        self._links: list[list[np.ndarray]] = []
        self._entry: int | None = None
        self._max_level = -1

    # -- basic container protocol -------------------------------------------------

    def __len__(self) -> int:
        return len(self._ids)

    def __contains__(self, frame_id: int) -> bool:
        return frame_id in self._id_to_idx

    def __getitem__(self, frame_id: int) -> np.ndarray:
        return self.descriptor(frame_id)

    @property
    def dim(self) -> int:
        return self._dim

    @property
    def frame_ids(self) -> list[int]:
        return list(self._ids)

    def descriptor(self, frame_id: int) -> np.ndarray:
        """Stored unit-norm descriptor for a frame (float32 copy)."""
        return self._vectors[self._id_to_idx[frame_id]].copy()

    def level_of(self, frame_id: int) -> int:
        return self._levels[self._id_to_idx[frame_id]]

    # -- construction -------------------------------------------------------------

    def _append_node(self, frame_id: int, vec32: np.ndarray, level: int) -> int:
        idx = len(self._ids)
        if idx == self._vectors.shape[0]:
            grown = np.zeros((max(idx * 2, 256), self._dim), dtype=np.float32)
            grown[:idx] = self._vectors
            self._vectors = grown
        self._vectors[idx] = vec32
        self._ids.append(frame_id)
        self._id_to_idx[frame_id] = idx
        self._levels.append(level)
        empty = np.zeros(0, dtype=np.int64)
        self._links.append([empty] * (level + 1))
        return idx

    def insert(self, frame_id: int, values) -> None:
        """Insert one descriptor; the node becomes searchable immediately.

        Raises on duplicate frame ids, dimension mismatch, or zero vectors.
        """
        if frame_id in self._id_to_idx:
            raise ValueError(f"frame {frame_id} already present")
        if frame_id < 0:
            raise ValueError("frame_id must be non-negative")
        vec = values.values if isinstance(values, GlobalDescriptor) else values
        vec = np.asarray(vec, dtype=np.float64).reshape(-1)
        if vec.shape[0] != self._dim:
            raise ValueError(f"dimension mismatch: index dim {self._dim}, got {vec.shape[0]}")
        vec32 = l2_normalize(vec).astype(np.float32)

        level = assign_level(self._rng, self.params.level_lambda)
        self._level_draws += 1
        idx = self._append_node(frame_id, vec32, level)

        if self._entry is None:
            self._entry = idx
            self._max_level = level
            return

        q = vec32
        ep = [self._entry]
        for layer in range(self._max_level, level, -1):
            ep = [i for _, i in self._search_layer(q, ep, layer, 1)]

        ef = self.params.ef_construction_effective
        for layer in range(min(level, self._max_level), -1, -1):
            candidates = self._search_layer(q, ep, layer, ef)
            chosen = self._select_for_link(q, candidates, self.params.M)
            self._links[idx][layer] = np.fromiter(
                (i for _, i in chosen), dtype=np.int64, count=len(chosen)
            )
            cap = self.params.M0 if layer == 0 else self.params.M
            for _, j in chosen:
                arr = self._links[j][layer]
                if arr.shape[0] < cap:
                    self._links[j][layer] = np.append(arr, idx)
                else:
                    self._prune_links(j, layer, idx, cap)
            ep = [i for _, i in candidates]

        if level > self._max_level:
            self._entry = idx
            self._max_level = level

    def _select_for_link(
        self, q: np.ndarray, candidates: list[tuple[float, int]], m: int
    ) -> list[tuple[float, int]]:
        """Diversity heuristic with backfill over (dist, idx) sorted ascending."""
        if len(candidates) <= m:
            return candidates
        idxs = [i for _, i in candidates]
        vecs = self._vectors[idxs]
        pair = 1.0 - vecs @ vecs.T
        kept = _keep_diverse(
            [d for d, _ in candidates], lambda i, k: pair[i, k], m, backfill=True
        )
        return [candidates[i] for i in kept]

    def _prune_links(self, j: int, layer: int, new_idx: int, cap: int) -> None:
        """Re-select node j's links after a backlink would exceed the cap.

        No backfill here: leaving headroom below the cap avoids re-pruning on
        every subsequent backlink and matches the reference construction.
        """
        cand = np.append(self._links[j][layer], new_idx)
        vecs = self._vectors[cand]
        base = self._vectors[j]
        dists = 1.0 - vecs @ base
        order = np.lexsort((cand, dists))
        cand = cand[order]
        pair = 1.0 - vecs[order] @ vecs[order].T
        kept = _keep_diverse(
            dists[order].tolist(), lambda i, k: pair[i, k], cap, backfill=False
        )
        self._links[j][layer] = cand[list(kept)]

    # -- search -------------------------------------------------------------------

    def _search_layer(
        self, q: np.ndarray, entry_points: list[int], layer: int, ef: int
    ) -> list[tuple[float, int]]:
        """Best-first search on one layer; returns (dist, idx) sorted ascending."""
        visited = np.zeros(len(self._ids), dtype=bool)
        visited[entry_points] = True
        d0 = 1.0 - self._vectors[entry_points] @ q
        candidates = list(zip(d0.tolist(), entry_points))
        heapify(candidates)
        results = [(-d, i) for d, i in candidates]
        heapify(results)
        while len(results) > ef:
            heappop(results)

        while candidates:
            d, c = heappop(candidates)
            if d > -results[0][0] and len(results) >= ef:
                break
            nbrs = self._links[c][layer]
            if nbrs.shape[0] == 0:
                continue
            fresh = nbrs[~visited[nbrs]]
            if fresh.shape[0] == 0:
                continue
            visited[fresh] = True
            dd = 1.0 - self._vectors[fresh] @ q
            if len(results) >= ef:
                closer = dd < -results[0][0]
                dd, fresh = dd[closer], fresh[closer]
            for dist, i in zip(dd.tolist(), fresh.tolist()):
                if len(results) < ef:
                    heappush(results, (-dist, i))
                    heappush(candidates, (dist, i))
                elif dist < -results[0][0]:
                    heapreplace(results, (-dist, i))
                    heappush(candidates, (dist, i))
        return sorted((-nd, i) for nd, i in results)

    def knn_search(self, query, k: int, ef: int | None = None) -> list[Neighbor]:
        """Approximate k nearest frames by cosine similarity.

        Returns ``min(k, len(index))`` neighbors sorted by similarity
        descending, ties broken by smaller frame id.  ``ef`` (default
        ``params.ef_search``) controls the ground-layer beam width and must
        be at least ``k``.
        """
        if len(self._ids) == 0:
            raise ValueError("cannot search an empty index")
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        if ef is None:
            ef = self.params.ef_search
        if ef < k:
            raise ValueError(f"ef ({ef}) must be >= k ({k})")
        vec = query.values if isinstance(query, GlobalDescriptor) else query
        q64 = l2_normalize(np.asarray(vec, dtype=np.float64).reshape(-1))
        if q64.shape[0] != self._dim:
            raise ValueError(f"dimension mismatch: index dim {self._dim}, got {q64.shape[0]}")
        q = q64.astype(np.float32)

        ep = [self._entry]
        for layer in range(self._max_level, 0, -1):
            ep = [i for _, i in self._search_layer(q, ep, layer, 1)]
        found = self._search_layer(q, ep, 0, ef)[:k]

        out = []
        for _, i in found:
            sim = float(np.dot(self._vectors[i].astype(np.float64), q64))
            out.append(Neighbor(self._ids[i], min(1.0, max(-1.0, sim))))
        out.sort(key=lambda nb: (-nb.similarity, nb.frame_id))
        return out

    # -- integrity ----------------------------------------------------------------

    def audit(self) -> None:
        """Verify structural invariants; raises :class:`IndexAuditError`.

        Checks degree caps, layer containment, edge validity, per-node layer
        coverage and entry-point maximality.
        """
        n = len(self._ids)
        if n == 0:
            if self._entry is not None:
                raise IndexAuditError("empty index with an entry point")
            return
        if self._entry is None:
            raise IndexAuditError("non-empty index without entry point")
        if self._levels[self._entry] != max(self._levels):
            raise IndexAuditError("entry point is not on the globally maximal layer")
        for idx in range(n):
            level = self._levels[idx]
            if len(self._links[idx]) != level + 1:
                raise IndexAuditError(f"node {idx} lacks adjacency for layers 0..{level}")
            for layer, nbrs in enumerate(self._links[idx]):
                cap = self.params.M0 if layer == 0 else self.params.M
                if nbrs.shape[0] > cap:
                    raise IndexAuditError(
                        f"node {idx} exceeds degree cap on layer {layer}: "
                        f"{nbrs.shape[0]} > {cap}"
                    )
                for j in nbrs.tolist():
                    if not 0 <= j < n:
                        raise IndexAuditError(f"node {idx} links to missing node {j}")
                    if j == idx:
                        raise IndexAuditError(f"node {idx} links to itself")
                    if self._levels[j] < layer:
                        raise IndexAuditError(
                            f"node {idx} links to node {j} above its top layer"
                        )

    # -- snapshot -----------------------------------------------------------------

    def save(self, path) -> None:
        """Write a binary snapshot (little-endian) restorable by :meth:`load`."""
        p = self.params
        with open(path, "wb") as f:
            f.write(INDEX_MAGIC)
            f.write(
                struct.pack(
                    "<IIIIIdQIQ",
                    INDEX_VERSION,
                    p.M,
                    p.M0,
                    p.ef_construction,
                    p.ef_search,
                    p.level_lambda,
                    p.rng_seed,
                    self._dim,
                    len(self._ids),
                )
            )
            entry_id = self._ids[self._entry] if self._entry is not None else 2**64 - 1
            f.write(struct.pack("<Q", entry_id))
            for idx, fid in enumerate(self._ids):
                f.write(struct.pack("<QB", fid, self._levels[idx]))
                f.write(self._vectors[idx].astype("<f4").tobytes())
            for idx in range(len(self._ids)):
                for nbrs in self._links[idx]:
                    ids = [self._ids[j] for j in nbrs.tolist()]
                    f.write(struct.pack("<I", len(ids)))
                    if ids:
                        f.write(struct.pack(f"<{len(ids)}Q", *ids))

    @classmethod
    def load(cls, path) -> "HnswIndex":
        """Restore a snapshot; the result passes :meth:`audit` or loading fails."""

        def read(f: BinaryIO, nbytes: int, what: str) -> bytes:
            data = f.read(nbytes)
            if len(data) != nbytes:
                raise ValueError(f"truncated index snapshot while reading {what}")
            return data

        with open(path, "rb") as f:
            if read(f, 4, "magic") != INDEX_MAGIC:
                raise ValueError("bad index snapshot magic")
            (version, M, M0, ef_c, ef_s, lam, seed, dim, count) = struct.unpack(
                "<IIIIIdQIQ", read(f, struct.calcsize("<IIIIIdQIQ"), "header")
            )
            if version != INDEX_VERSION:
                raise ValueError(f"unsupported index snapshot version {version}")
            (entry_id,) = struct.unpack("<Q", read(f, 8, "entry point"))
            params = HnswParams(
                M=M, ef_construction=ef_c, ef_search=ef_s, rng_seed=seed,
                M0=M0, level_lambda=lam,
            )
            index = cls(dim, params)
            levels = []
            for k in range(count):
                fid, level = struct.unpack("<QB", read(f, 9, f"node {k} header"))
                vec = np.frombuffer(read(f, 4 * dim, f"node {k} descriptor"), dtype="<f4")
                index._append_node(fid, vec.copy(), level)
                levels.append(level)
            for idx in range(count):
                layers = []
                for layer in range(levels[idx] + 1):
                    (degree,) = struct.unpack(
                        "<I", read(f, 4, f"node {idx} layer {layer} degree")
                    )
                    ids = struct.unpack(
                        f"<{degree}Q", read(f, 8 * degree, f"node {idx} layer {layer} links")
                    )
                    try:
                        layers.append(
                            np.array([index._id_to_idx[i] for i in ids], dtype=np.int64)
                        )
                    except KeyError as exc:
                        raise ValueError(f"snapshot links reference unknown frame {exc}")
                index._links[idx] = layers
            if f.read(1):
                raise ValueError("trailing bytes after index snapshot payload")

        if count:
            index._max_level = max(levels)
            if entry_id not in index._id_to_idx:
                raise ValueError("snapshot entry point references unknown frame")
            index._entry = index._id_to_idx[entry_id]
        # fast-forward the level rng: one uniform draw was consumed per insert
        index._rng.random(count)
        index._level_draws = count
        index.audit()
        return index
