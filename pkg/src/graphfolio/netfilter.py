"""TMFG filtering of a dependency matrix and node centralities on the filtered graph."""
from __future__ import annotations

import csv
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .dependency import DependencyMatrix


class GraphError(ValueError):
    pass


Face = tuple[int, int, int]


@dataclass(frozen=True)
class InsertionStep:
    vertex: int
    face: Face
    gain: float


@dataclass(frozen=True)
class FilteredGraph:
    """Undirected weighted graph on nodes ``0..n-1`` aligned with ``firms``.

    ``seed`` and ``insertion_log`` are populated only for TMFG output; the
    log replays the construction (tetrahedron, then one vertex per face).
    """

    firms: list[str]
    edges: list[tuple[int, int, float]]
    faces: list[Face] = field(default_factory=list)
    seed: tuple[int, ...] = ()
    insertion_log: list[InsertionStep] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.firms)

    def neighbors(self) -> list[list[int]]:
        adj: list[list[int]] = [[] for _ in range(self.n)]
        for i, j, _ in self.edges:
            adj[i].append(j)
            adj[j].append(i)
        return [sorted(a) for a in adj]

    def adjacency(self) -> np.ndarray:
        A = np.zeros((self.n, self.n), dtype=bool)
        for i, j, _ in self.edges:
            A[i, j] = A[j, i] = True
        return A

    def total_weight(self) -> float:
        return float(sum(w for _, _, w in self.edges))

    @classmethod
    def from_edges(cls, n: int, edges: Sequence[tuple[int, int]], firms: Optional[list[str]] = None,
                   weights: Optional[np.ndarray] = None) -> "FilteredGraph":
        firms = firms if firms is not None else [str(k) for k in range(n)]
        out = []
        for i, j in edges:
            a, b = min(i, j), max(i, j)
            out.append((a, b, float(weights[a, b]) if weights is not None else 1.0))
        return cls(list(firms), sorted(set(out)))


def _check_weights(W: np.ndarray) -> np.ndarray:
    W = np.asarray(W, dtype=float)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise GraphError("weight matrix must be square")
    if W.shape[0] < 4:
        raise GraphError(f"TMFG needs at least 4 vertices, got {W.shape[0]}")
    if not np.array_equal(W, W.T):
        raise GraphError("weight matrix must be symmetric")
    if not np.all(np.isfinite(W)):
        raise GraphError("weight matrix has non-finite entries")
    return W


def _gains(W: np.ndarray, verts: np.ndarray, face: Face) -> np.ndarray:
    a, b, c = face
    return W[verts, a] + W[verts, b] + W[verts, c]


def tmfg_from_weights(W: np.ndarray, firms: Optional[list[str]] = None) -> FilteredGraph:
    """Triangulated Maximally Filtered Graph on a symmetric weight matrix.

    Seeds a tetrahedron on the four vertices of largest strength, then
    repeatedly places the (vertex, face) pair of largest gain - the sum of the
    three edge weights to the face corners - splitting the face in three.
    Each face caches its best outside vertex; only faces whose cached vertex
    was just placed are rescanned. Ties go to the lowest vertex index, then
    the lexicographically smallest face.
    """
    W = _check_weights(W)
    n = W.shape[0]
    firms = firms if firms is not None else [str(k) for k in range(n)]
    off = W.copy()
    np.fill_diagonal(off, 0.0)
    strength = off.sum(axis=1)
    order = np.lexsort((np.arange(n), -strength))
    seed = tuple(sorted(int(v) for v in order[:4]))

    edges: dict[tuple[int, int], float] = {}
    for x in range(4):
        for y in range(x + 1, 4):
            edges[(seed[x], seed[y])] = float(W[seed[x], seed[y]])
    faces: set[Face] = {tuple(sorted(f)) for f in (
        (seed[0], seed[1], seed[2]), (seed[0], seed[1], seed[3]),
        (seed[0], seed[2], seed[3]), (seed[1], seed[2], seed[3]))}
    outside = np.ones(n, dtype=bool)
    outside[list(seed)] = False

    cache: dict[Face, tuple[float, int]] = {}

    def best_for(face: Face) -> tuple[float, int]:
        verts = np.flatnonzero(outside)
        g = _gains(W, verts, face)
        k = int(np.argmax(g))  # first max = lowest vertex index
        return float(g[k]), int(verts[k])

    log: list[InsertionStep] = []
    if outside.any():
        for f in faces:
            cache[f] = best_for(f)
    while outside.any():
        face = min(cache, key=lambda f: (-cache[f][0], cache[f][1], f))
        gain, v = cache[face]
        a, b, c = face
        for u in face:
            edges[(min(u, v), max(u, v))] = float(W[u, v])
        log.append(InsertionStep(v, face, gain))
        outside[v] = False
        faces.remove(face)
        del cache[face]
        new = [tuple(sorted(f)) for f in ((a, b, v), (a, c, v), (b, c, v))]
        faces.update(new)
        if not outside.any():
            break
        for f in list(cache):
            if cache[f][1] == v:
                cache[f] = best_for(f)
        for f in new:
            cache[f] = best_for(f)

    edge_list = sorted((i, j, w) for (i, j), w in edges.items())
    return FilteredGraph(list(firms), edge_list, sorted(faces), seed, log)


def tmfg(dep: DependencyMatrix) -> FilteredGraph:
    return tmfg_from_weights(dep.values, list(dep.firms))


def dense_graph(dep: DependencyMatrix) -> FilteredGraph:
    """Unfiltered graph keeping every positive off-diagonal dependency."""
    V = dep.values
    n = dep.n
    edges = [(i, j, float(V[i, j])) for i in range(n) for j in range(i + 1, n) if V[i, j] > 0]
    return FilteredGraph(list(dep.firms), edges)


def replay_insertion_log(g: FilteredGraph) -> bool:
    """Rebuild ``g`` from its seed and log; True when every step inserts a new
    vertex into an existing face and the result matches ``g`` exactly."""
    if len(g.seed) != 4:
        return False
    s = g.seed
    faces = {tuple(sorted(f)) for f in ((s[0], s[1], s[2]), (s[0], s[1], s[3]), (s[0], s[2], s[3]), (s[1], s[2], s[3]))}
    placed = set(s)
    edges = {(min(x, y), max(x, y)) for x in s for y in s if x != y}
    for step in g.insertion_log:
        if step.face not in faces or step.vertex in placed:
            return False
        a, b, c = step.face
        v = step.vertex
        faces.remove(step.face)
        faces.update(tuple(sorted(f)) for f in ((a, b, v), (a, c, v), (b, c, v)))
        edges.update((min(u, v), max(u, v)) for u in step.face)
        placed.add(v)
    return (placed == set(range(g.n))
            and edges == {(i, j) for i, j, _ in g.edges}
            and faces == set(g.faces))


# ---------------------------------------------------------------------------
# centralities

@dataclass(frozen=True)
class CentralityScores:
    degree: np.ndarray
    betweenness: np.ndarray
    closeness: np.ndarray
    peripherality: np.ndarray


def degree_centrality(g: FilteredGraph) -> np.ndarray:
    n = g.n
    if n < 2:
        return np.zeros(n)
    deg = np.array([len(a) for a in g.neighbors()], dtype=float)
    return deg / (n - 1)


def _bfs(adj: list[list[int]], s: int):
    n = len(adj)
    dist = np.full(n, -1, dtype=np.int64)
    sigma = np.zeros(n)
    preds: list[list[int]] = [[] for _ in range(n)]
    order = []
    dist[s] = 0
    sigma[s] = 1.0
    q = deque([s])
    while q:
        v = q.popleft()
        order.append(v)
        for w in adj[v]:
            if dist[w] < 0:
                dist[w] = dist[v] + 1
                q.append(w)
            if dist[w] == dist[v] + 1:
                sigma[w] += sigma[v]
                preds[w].append(v)
    return order, dist, sigma, preds


def _source_dependency(adj: list[list[int]], s: int) -> np.ndarray:
    order, _, sigma, preds = _bfs(adj, s)
    delta = np.zeros(len(adj))
    for w in reversed(order):
        for v in preds[w]:
            delta[v] += sigma[v] / sigma[w] * (1.0 + delta[w])
    delta[s] = 0.0
    return delta


def _map_sources(fn, n: int, workers: int):
    if workers <= 1:
        return [fn(s) for s in range(n)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(n)))  # results come back in source order


def betweenness_centrality(g: FilteredGraph, workers: int = 1) -> np.ndarray:
    """Hop-count betweenness over unordered pairs, divided by (n-1)(n-2)/2."""
    n = g.n
    adj = g.neighbors()
    parts = _map_sources(lambda s: _source_dependency(adj, s), n, workers)
    total = np.zeros(n)
    for p in parts:  # fixed index order
        total += p
    total /= 2.0  # each unordered pair counted from both endpoints
    if n < 3:
        return np.zeros(n)
    return total / ((n - 1) * (n - 2) / 2.0)


def closeness_centrality(g: FilteredGraph, workers: int = 1) -> np.ndarray:
    """Reachable fraction times reciprocal mean hop distance to reachable nodes."""
    n = g.n
    adj = g.neighbors()

    def one(s):
        _, dist, _, _ = _bfs(adj, s)
        reach = dist > 0
        r = int(reach.sum())
        if r == 0:
            return 0.0
        return (r / (n - 1)) * (r / float(dist[reach].sum()))

    return np.array(_map_sources(one, n, workers), dtype=float)


def peripherality_scores(g: FilteredGraph, workers: int = 1) -> CentralityScores:
    dc = degree_centrality(g)
    bc = betweenness_centrality(g, workers)
    cc = closeness_centrality(g, workers)
    return CentralityScores(dc, bc, cc, (dc + bc + cc) / 3.0)


# ---------------------------------------------------------------------------
# exports

def write_edge_list(g: FilteredGraph, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["src_firm", "dst_firm", "weight"])
        for i, j, wt in g.edges:
            w.writerow([g.firms[i], g.firms[j], f"{wt:.12g}"])


def write_insertion_log(g: FilteredGraph, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "vertex", "face_a", "face_b", "face_c", "gain"])
        for k, st in enumerate(g.insertion_log, start=1):
            a, b, c = (g.firms[x] for x in st.face)
            w.writerow([k, g.firms[st.vertex], a, b, c, f"{st.gain:.12g}"])


def write_centrality(g: FilteredGraph, scores: CentralityScores, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["firm_id", "dc", "bc", "cc", "p"])
        for k, f in enumerate(g.firms):
            w.writerow([f, *(f"{v[k]:.12g}" for v in (scores.degree, scores.betweenness,
                                                      scores.closeness, scores.peripherality))])
