"""Exact and graph-based approximate top-K maximum inner product search."""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .. import _threads
from ..core import EmbeddingMatrix, RngStream, _check_k, as_stream, top_k
from ..errors import ConfigurationError, ParseError
from . import _graph

SLMI_MAGIC = b"SLMI"
SLMI_VERSION = 1
# Optional trailer carrying the build/query beams (readers that stop after the
# adjacency lists simply ignore it).
SLMI_TRAILER = b"SLMQ"
ABSENT = 0xFFFFFFFF
MAX_LEVEL = 16

# Exact scoring is chunked so the (queries x P) score block stays near this many floats.
_EXACT_CHUNK = 1 << 22


class ExactIndex:
    """Brute-force MIPS; results are exactly ``core.decide``."""

    kind = "exact"

    def __init__(self, beta: EmbeddingMatrix):
        self.beta = beta

    @property
    def P(self) -> int:
        return self.beta.P

    @property
    def L(self) -> int:
        return self.beta.L

    def query(self, h, K: int) -> np.ndarray:
        _check_k(K, self.P)
        return top_k(self.beta.scores(h), K)

    def query_batch(self, H, K: int) -> np.ndarray:
        _check_k(K, self.P)
        H = np.atleast_2d(np.asarray(H, dtype=np.float64))
        rows = max(1, _EXACT_CHUNK // self.P)
        if len(H) <= rows:
            return top_k(self.beta.scores(H), K)
        return np.concatenate([top_k(self.beta.scores(H[i:i + rows]), K) for i in range(0, len(H), rows)])

    def __repr__(self):
        return f"ExactIndex(P={self.P}, L={self.L})"


def _table_size(ef: int, degree: int) -> int:
    need = max(4 * ef * degree, 64)
    return 1 << int(np.ceil(np.log2(need)))


class ApproxIndex:
    """Layered navigable small-world graph over the action embeddings.

    Immutable after construction. Queries run a greedy descent through the
    upper layers and a beam search of width ``query_beam`` on layer 0; the
    per-query scratch (an open-addressing visited table) is sized from the
    beam and the degree, never from P.
    """

    kind = "approx"

    def __init__(self, beta, levels, nbr0, cnt0, slot, nbr_up, cnt_up, entry, *,
                 max_degree, beam, query_beam, seed=None, prune=False):
        self.beta = beta
        self.levels = levels
        self.nbr0 = nbr0
        self.cnt0 = cnt0
        self.slot = slot
        self.nbr_up = nbr_up
        self.cnt_up = cnt_up
        self.entry = int(entry)
        self.top = int(levels.max()) if levels.size else 0
        self.max_degree = int(max_degree)
        self.beam = int(beam)
        self.query_beam = int(query_beam)
        self.seed = seed
        self.prune = prune
        for arr in (levels, nbr0, cnt0, slot, nbr_up, cnt_up):
            arr.setflags(write=False)

    @property
    def P(self) -> int:
        return self.beta.P

    @property
    def L(self) -> int:
        return self.beta.L

    def get_params(self):
        return {"max_degree": self.max_degree, "beam": self.beam, "query_beam": self.query_beam}

    def scratch_bytes(self, beam: Optional[int] = None, K: int = 1) -> int:
        """Bytes of visited-table scratch one query allocates."""
        ef = max(beam or self.query_beam, K)
        return 8 * _table_size(ef, self.nbr0.shape[1])

    def neighbors(self, v: int, layer: int = 0) -> np.ndarray:
        if layer == 0:
            return self.nbr0[v, :self.cnt0[v]].astype(np.int64)
        if self.levels[v] < layer:
            raise ValueError(f"node {v} is not on layer {layer}")
        s = self.slot[v]
        return self.nbr_up[s, layer - 1, :self.cnt_up[s, layer - 1]].astype(np.int64)

    def is_connected(self) -> bool:
        return bool(_graph.reachable_from(self.entry, self.nbr0, self.cnt0).all())

    def _ef(self, K, beam):
        return max(int(beam if beam is not None else self.query_beam), K)

    def query(self, h, K: int, beam: Optional[int] = None) -> np.ndarray:
        _check_k(K, self.P)
        h = np.asarray(h, dtype=np.float64)
        if h.shape != (self.L,):
            raise ConfigurationError(f"query has shape {h.shape}, expected ({self.L},)")
        ef = self._ef(K, beam)
        table = np.empty(_table_size(ef, self.nbr0.shape[1]), dtype=np.int64)
        return _graph.search_one(self.beta.items, h, K, ef, self.entry, self.top, self.nbr0, self.cnt0,
                                 self.slot, self.nbr_up, self.cnt_up, table)

    def query_batch(self, H, K: int, beam: Optional[int] = None) -> np.ndarray:
        _check_k(K, self.P)
        H = np.ascontiguousarray(np.atleast_2d(np.asarray(H, dtype=np.float64)))
        if H.shape[1] != self.L:
            raise ConfigurationError(f"queries have dimension {H.shape[1]}, expected {self.L}")
        ef = self._ef(K, beam)
        size = _table_size(ef, self.nbr0.shape[1])
        n_workers = min(_threads.get_threads(), len(H))

        def run(block):
            table = np.empty(size, dtype=np.int64)
            return _graph.search_batch(self.beta.items, block, K, ef, self.entry, self.top, self.nbr0,
                                       self.cnt0, self.slot, self.nbr_up, self.cnt_up, table)

        if n_workers <= 1:
            return run(H)
        blocks = np.array_split(H, n_workers)
        with ThreadPoolExecutor(n_workers) as pool:
            return np.concatenate(list(pool.map(run, blocks)))

    def save(self, path) -> None:
        save_index(self, path)

    def __repr__(self):
        return (f"ApproxIndex(P={self.P}, L={self.L}, max_degree={self.max_degree}, "
                f"beam={self.beam}, query_beam={self.query_beam})")


def draw_levels(P: int, max_degree: int, rng) -> np.ndarray:
    """Geometric layer assignment: level = floor(-ln U / ln max_degree), capped."""
    u = as_stream(rng).uniform(P)
    u = np.maximum(u, np.finfo(np.float64).tiny)
    return np.minimum(np.floor(-np.log(u) / np.log(max_degree)), MAX_LEVEL).astype(np.int64)


def build_approx(beta: EmbeddingMatrix, max_degree: int = 16, beam: int = 100, rng=None, *,
                 query_beam: int = 256, prune: bool = False) -> ApproxIndex:
    """Build the graph index; deterministic for a given seed.

    ``beam`` is the construction beam width, ``query_beam`` the default search
    beam. ``prune`` enables the diversity heuristic when choosing neighbours
    (off by default: for inner-product wiring it lowers recall).
    """
    if not isinstance(max_degree, (int, np.integer)) or max_degree < 2:
        raise ValueError(f"max_degree must be an integer >= 2, got {max_degree!r}")
    if beam < 1 or query_beam < 1:
        raise ValueError("beam widths must be positive")
    stream = as_stream(rng)
    levels = draw_levels(beta.P, max_degree, stream)
    nbr0, cnt0, slot, nbr_up, cnt_up, entry = _graph.build_graph(beta.items, levels, int(max_degree), int(beam),
                                                                  bool(prune))
    _graph.repair_reachability(beta.items, entry, nbr0, cnt0)
    return ApproxIndex(beta, levels, nbr0, cnt0, slot, nbr_up, cnt_up, entry, max_degree=max_degree, beam=beam,
                       query_beam=query_beam, seed=stream.seed, prune=prune)


def save_index(index: ApproxIndex, path) -> None:
    """SLMI layout: header, then for each layer and each node (count u32, ids u64 x count).

    A node absent from a layer is written with count 0xFFFFFFFF and no ids.
    """
    P = index.P
    with open(path, "wb") as fh:
        fh.write(SLMI_MAGIC)
        fh.write(struct.pack("<IQII", SLMI_VERSION, P, index.L, index.max_degree))
        fh.write(struct.pack("<I", index.top + 1))
        for layer in range(index.top + 1):
            for v in range(P):
                if index.levels[v] < layer:
                    fh.write(struct.pack("<I", ABSENT))
                    continue
                ids = index.neighbors(v, layer)
                fh.write(struct.pack("<I", ids.size))
                fh.write(ids.astype("<u8").tobytes())
        fh.write(SLMI_TRAILER)
        fh.write(struct.pack("<II", index.beam, index.query_beam))


def load_index(path, beta: EmbeddingMatrix) -> ApproxIndex:
    """Read an SLMI file; ``beta`` must be the embedding matrix the index was built on."""
    path = Path(path)
    buf = path.read_bytes()
    if buf[:4] != SLMI_MAGIC:
        raise ParseError(f"bad magic {buf[:4]!r}, expected {SLMI_MAGIC!r}", path=path)
    if len(buf) < 28:
        raise ParseError("truncated header", path=path)
    version, P, L, max_degree = struct.unpack_from("<IQII", buf, 4)
    if version != SLMI_VERSION:
        raise ParseError(f"unsupported SLMI version {version}", path=path)
    if P != beta.P or L != beta.L:
        raise ConfigurationError(f"index was built for P={P}, L={L}; embeddings have P={beta.P}, L={beta.L}")
    (n_layers,) = struct.unpack_from("<I", buf, 24)
    pos = 28
    width0 = 2 * max_degree + _graph.RESERVE
    levels = np.full(P, -1, dtype=np.int64)
    nbr0 = np.zeros((P, width0), dtype=np.int32)
    cnt0 = np.zeros(P, dtype=np.int32)
    upper = []
    try:
        for layer in range(n_layers):
            lists = {}
            for v in range(P):
                (cnt,) = struct.unpack_from("<I", buf, pos)
                pos += 4
                if cnt == ABSENT:
                    continue
                if pos + 8 * cnt > len(buf):
                    raise ParseError(f"truncated adjacency data on layer {layer}", path=path)
                ids = np.frombuffer(buf, dtype="<u8", count=cnt, offset=pos).astype(np.int64)
                pos += 8 * cnt
                if ids.size and ids.max() >= P:
                    raise ParseError(f"neighbour id out of range on layer {layer}", path=path)
                levels[v] = layer
                if layer == 0:
                    if cnt > width0:
                        raise ParseError(f"node {v} has {cnt} layer-0 neighbours, limit {width0}", path=path)
                    nbr0[v, :cnt] = ids
                    cnt0[v] = cnt
                else:
                    lists[v] = ids
            upper.append(lists)
    except struct.error:
        raise ParseError("truncated adjacency data", path=path) from None
    if (levels < 0).any():
        raise ParseError("some actions are missing from layer 0", path=path)
    beam, query_beam = 100, 256
    if buf[pos:pos + 4] == SLMI_TRAILER:
        beam, query_beam = struct.unpack_from("<II", buf, pos + 4)
    top = int(levels.max())
    slot = -np.ones(P, dtype=np.int64)
    owners = np.flatnonzero(levels >= 1)
    slot[owners] = np.arange(owners.size)
    nbr_up = np.zeros((max(owners.size, 1), max(top, 1), max_degree), dtype=np.int32)
    cnt_up = np.zeros((max(owners.size, 1), max(top, 1)), dtype=np.int32)
    for layer in range(1, top + 1):
        for v, ids in upper[layer].items():
            nbr_up[slot[v], layer - 1, :ids.size] = ids
            cnt_up[slot[v], layer - 1] = ids.size
    # Construction inserts in id order and promotes the first node reaching a new top level.
    entry = int(np.flatnonzero(levels == top)[0])
    return ApproxIndex(beta, levels, nbr0, cnt0, slot, nbr_up, cnt_up, entry, max_degree=max_degree, beam=beam,
                       query_beam=query_beam)


@dataclass(frozen=True)
class RecallReport:
    k: int
    recall: float
    query_count: int
    per_query: Optional[np.ndarray] = None

    def __post_init__(self):
        if not (0.0 <= self.recall <= 1.0):
            raise ValueError("recall must lie in [0, 1]")


def measure_recall(approx, exact, queries, K: int, beam: Optional[int] = None) -> RecallReport:
    """Mean over queries of |approx top-K intersect exact top-K| / K."""
    Q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if Q.shape[0] == 0 or Q.size == 0:
        raise ValueError("measure_recall needs at least one query")
    got = approx.query_batch(Q, K, beam=beam) if beam is not None else approx.query_batch(Q, K)
    want = exact.query_batch(Q, K)
    per = np.array([np.intersect1d(a, b).size / K for a, b in zip(got, want)], dtype=np.float64)
    return RecallReport(K, float(per.mean()), len(Q), per)


def random_queries(beta: EmbeddingMatrix, n: int, rng=None) -> np.ndarray:
    """Isotropic Gaussian query directions, the default recall workload."""
    return as_stream(rng).normal((n, beta.L))
