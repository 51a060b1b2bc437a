"""Odometry-validated correspondences and the experience graph.

Raw sequence matches are checked by composing odometry chains on both sides
from the last validated pair: small predicted displacement validates a
match, otherwise a windowed search proposes a replacement, otherwise the
candidate is rejected. Per-edge rejection rates become costs on a graph over
experiences, min-cost paths bridge distant experiences, and correspondences
compose along those paths.
"""

from __future__ import annotations

import csv
import heapq
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptyCorrespondences, NoPath
from .geometry import Transform
from .placerec import PlacerecParams, RawMatchList, match_experiences
from .simworld import Dataset, Experience

VALIDATED = "validated"
REPLACED = "replaced"
REJECTED = "rejected"


@dataclass
class Correspondence:
    query_frame: int
    ref_frame: int
    status: str
    sq_distance: float
    chain: int = 0


@dataclass
class CorrespondenceSet:
    query_id: int
    ref_id: int
    entries: list[Correspondence]

    def non_rejected(self) -> list[Correspondence]:
        return [e for e in self.entries if e.status != REJECTED]


def relative_vo_pose(exp: Experience, from_idx: int, to_idx: int) -> tuple[Transform, int]:
    """Odometry transform taking frame from_idx coordinates into to_idx.

    Composes the edges between the two frames (inverted when walking
    backward). Returns the transform and the chain length in edges.
    """
    if from_idx == to_idx:
        return Transform.identity(), 0
    T = Transform.identity()
    if to_idx > from_idx:
        for k in range(from_idx + 1, to_idx + 1):
            T = exp.vo_edge_into(k).compose(T)
    else:
        for k in range(to_idx + 1, from_idx + 1):
            T = exp.vo_edge_into(k).compose(T)
        T = T.inverse()
    return T, abs(to_idx - from_idx)


def validate_matches(
    query: Experience,
    ref: Experience,
    raw: RawMatchList,
    e_sq: float = 0.25,
    window: int = 10,
) -> CorrespondenceSet:
    """Validate raw matches against odometry.

    Starting from the anchored pair (0, 0), each candidate's predicted
    relative displacement is the reference chain composed with the inverse
    query chain, both rooted at the last validated pair. A squared
    translation distance within e_sq validates the candidate and advances
    the anchor. Otherwise the 2*window+1 frames around the candidate are
    searched for the minimum-distance replacement; if even that exceeds
    e_sq the candidate is rejected (keeping its own index and distance).
    """
    nq = len(query.frames)
    nr = len(ref.frames)
    if len(raw) != nq:
        raise ValueError(f"raw matches cover {len(raw)} frames, query has {nq}")

    entries = [Correspondence(0, 0, VALIDATED, 0.0, chain=0)]
    m_q, m_r = 0, 0
    for i in range(1, nq):
        cand = int(raw.ref_frames[i])
        T_q, chain_q = relative_vo_pose(query, m_q, i)
        T_q_inv = T_q.inverse()

        def predicted_sq(rj: int) -> float:
            T_r, _ = relative_vo_pose(ref, m_r, rj)
            return T_r.compose(T_q_inv).sq_translation_distance()

        d = predicted_sq(cand)
        if d <= e_sq:
            entries.append(Correspondence(i, cand, VALIDATED, d, chain=chain_q))
            m_q, m_r = i, cand
            continue

        lo = max(0, cand - window)
        hi = min(nr - 1, cand + window)
        best_j, best_d = cand, np.inf
        for rj in range(lo, hi + 1):
            dj = predicted_sq(rj)
            if dj < best_d:
                best_j, best_d = rj, dj
        if best_d <= e_sq:
            entries.append(Correspondence(i, best_j, REPLACED, best_d, chain=chain_q))
        else:
            entries.append(Correspondence(i, cand, REJECTED, d, chain=chain_q))

    return CorrespondenceSet(query_id=raw.query_id, ref_id=raw.ref_id, entries=entries)


def edge_cost(cs: CorrespondenceSet) -> float:
    """Fraction of entries that failed direct validation."""
    total = len(cs.entries)
    if total == 0:
        return 1.0
    bad = sum(1 for e in cs.entries if e.status != VALIDATED)
    return bad / total


@dataclass
class GraphEdge:
    i: int
    j: int
    cost: float
    matches: CorrespondenceSet


@dataclass
class ExperienceGraph:
    vertices: list[int]
    edges: list[GraphEdge]

    def edge_between(self, a: int, b: int) -> GraphEdge | None:
        for e in self.edges:
            if {e.i, e.j} == {a, b}:
                return e
        return None


def build_graph(
    dataset: Dataset,
    k: int = 3,
    params: PlacerecParams = PlacerecParams(),
    e_sq: float = 0.25,
    window: int = 10,
    threads: int = 1,
) -> ExperienceGraph:
    """Match every experience against its k predecessors.

    Each edge stores the validated correspondence set (query is the later
    experience) and its non-validated fraction as cost.
    """
    exps = dataset.experiences
    jobs = [(i, j) for i in range(1, len(exps)) for j in range(max(0, i - k), i)]

    def make_edge(ij: tuple[int, int]) -> GraphEdge:
        i, j = ij
        q_imgs = [f.left for f in exps[i].frames]
        r_imgs = [f.left for f in exps[j].frames]
        raw = match_experiences(q_imgs, r_imgs, params, query_id=i, ref_id=j)
        cs = validate_matches(exps[i], exps[j], raw, e_sq=e_sq, window=window)
        return GraphEdge(i=i, j=j, cost=edge_cost(cs), matches=cs)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            edges = list(pool.map(make_edge, jobs))
    else:
        edges = [make_edge(ij) for ij in jobs]
    return ExperienceGraph(vertices=[e.id for e in exps], edges=edges)


def min_cost_path(graph: ExperienceGraph, src: int, dst: int) -> tuple[list[int], float]:
    """Minimum-cost undirected path by uniform-cost search.

    Ties break on fewer edges, then on the lexicographically smallest
    vertex sequence. Raises NoPath when src and dst are disconnected.
    """
    if src not in graph.vertices or dst not in graph.vertices:
        raise NoPath(f"vertex {src if src not in graph.vertices else dst} not in graph")
    adj: dict[int, list[tuple[int, float]]] = {v: [] for v in graph.vertices}
    for e in graph.edges:
        adj[e.i].append((e.j, e.cost))
        adj[e.j].append((e.i, e.cost))

    heap: list[tuple[float, int, tuple[int, ...]]] = [(0.0, 0, (src,))]
    settled: set[int] = set()
    while heap:
        cost, nedges, path = heapq.heappop(heap)
        node = path[-1]
        if node in settled:
            continue
        settled.add(node)
        if node == dst:
            return list(path), cost
        for nxt, w in sorted(adj[node]):
            if nxt not in settled:
                heapq.heappush(heap, (cost + w, nedges + 1, path + (nxt,)))
    raise NoPath(f"no path from {src} to {dst}")


def _invert_entries(cs: CorrespondenceSet, n_frames: int) -> list[Correspondence]:
    """Frame map of ref experience -> query experience, by nearest entry.

    Exact reference hits keep their status; nearest-frame fallbacks are
    marked replaced. With nothing but rejected entries every frame is
    rejected.
    """
    usable = cs.non_rejected()
    out: list[Correspondence] = []
    if not usable:
        for f in range(n_frames):
            out.append(Correspondence(f, 0, REJECTED, np.inf))
        return out
    refs = np.array([e.ref_frame for e in usable])
    for f in range(n_frames):
        best = int(np.argmin(np.abs(refs - f)))  # ties: earlier entry
        e = usable[best]
        status = e.status if e.ref_frame == f else REPLACED
        out.append(Correspondence(f, e.query_frame, status, e.sq_distance))
    return out


def _hop_map(graph: ExperienceGraph, a: int, b: int,
             frames_a: int) -> list[Correspondence]:
    edge = graph.edge_between(a, b)
    if edge is None:
        raise NoPath(f"no edge between {a} and {b}")
    if edge.matches.query_id == a:
        return edge.matches.entries
    return _invert_entries(edge.matches, frames_a)


def compose_correspondences(
    graph: ExperienceGraph,
    path: list[int],
    frame_counts: dict[int, int] | None = None,
) -> CorrespondenceSet:
    """Chain per-edge frame maps along a path of experience ids.

    A hop through a rejected entry leaves the source frame rejected; any
    replaced hop demotes validated to replaced. Distances accumulate by
    summation. A single-edge path in the stored orientation returns the
    stored set unchanged.
    """
    if len(path) < 2:
        raise ValueError("path must contain at least two vertices")
    if len(path) == 2:
        edge = graph.edge_between(path[0], path[1])
        if edge is not None and edge.matches.query_id == path[0]:
            return edge.matches

    def frames_of(v: int) -> int:
        if frame_counts is not None:
            return frame_counts[v]
        # fall back to the largest frame index seen in any edge touching v
        hi = 0
        for e in graph.edges:
            if e.i == v:
                hi = max(hi, max(x.query_frame for x in e.matches.entries) + 1)
            if e.j == v:
                hi = max(hi, max(x.ref_frame for x in e.matches.entries) + 1)
        return hi

    current = list(_hop_map(graph, path[0], path[1], frames_of(path[0])))
    current = [Correspondence(e.query_frame, e.ref_frame, e.status, e.sq_distance)
               for e in current]
    for a, b in zip(path[1:-1], path[2:]):
        nxt = _hop_map(graph, a, b, frames_of(a))
        for e in current:
            if e.status == REJECTED:
                continue
            step = nxt[e.ref_frame]
            if step.status == REJECTED:
                e.status = REJECTED
                e.sq_distance = np.inf
                continue
            e.ref_frame = step.ref_frame
            e.sq_distance += step.sq_distance
            if step.status == REPLACED:
                e.status = REPLACED
    return CorrespondenceSet(query_id=path[0], ref_id=path[-1], entries=current)


def sample_pairs(
    sets: list[CorrespondenceSet],
    n: int,
    seed: int,
) -> list[tuple[int, int, int, int]]:
    """Uniform sample (with replacement) of non-rejected correspondences.

    Returns (exp_a, frame_a, exp_b, frame_b) tuples. Raises
    EmptyCorrespondences when every entry everywhere is rejected.
    """
    pool: list[tuple[int, int, int, int]] = []
    for cs in sets:
        for e in cs.non_rejected():
            pool.append((cs.query_id, e.query_frame, cs.ref_id, e.ref_frame))
    if not pool:
        raise EmptyCorrespondences("no non-rejected correspondences to sample")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(pool), size=n)
    return [pool[i] for i in idx]


# ---------------------------------------------------------------- file I/O

RAW_HEADER = ["query_frame", "ref_frame", "score"]
MATCH_HEADER = ["query_frame", "ref_frame", "status", "sq_distance"]
PAIR_HEADER = ["exp_a", "frame_a", "exp_b", "frame_b"]


def save_raw_matches(path: str | Path, raw: RawMatchList) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(RAW_HEADER)
        for q, (r, s) in enumerate(zip(raw.ref_frames, raw.scores)):
            wr.writerow([q, int(r), repr(float(s))])


def load_raw_matches(path: str | Path, query_id: int = 0,
                     ref_id: int = 0) -> RawMatchList:
    refs: list[int] = []
    scores: list[float] = []
    with open(path, newline="") as f:
        rd = csv.reader(f)
        header = next(rd)
        if header != RAW_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        for n, row in enumerate(rd):
            if int(row[0]) != n:
                raise ValueError(f"{path}: query frames must run 0..N-1 in order")
            refs.append(int(row[1]))
            scores.append(float(row[2]))
    return RawMatchList(query_id=query_id, ref_id=ref_id,
                        ref_frames=np.asarray(refs, dtype=int),
                        scores=np.asarray(scores))


def save_matches(path: str | Path, cs: CorrespondenceSet) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(MATCH_HEADER)
        for e in cs.entries:
            wr.writerow([e.query_frame, e.ref_frame, e.status, repr(float(e.sq_distance))])


def load_matches(path: str | Path, query_id: int = 0, ref_id: int = 0) -> CorrespondenceSet:
    entries: list[Correspondence] = []
    with open(path, newline="") as f:
        rd = csv.reader(f)
        header = next(rd)
        if header != MATCH_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        for row in rd:
            entries.append(Correspondence(
                query_frame=int(row[0]), ref_frame=int(row[1]),
                status=row[2], sq_distance=float(row[3]),
            ))
    return CorrespondenceSet(query_id=query_id, ref_id=ref_id, entries=entries)


def save_pairs(path: str | Path, pairs: list[tuple[int, int, int, int]]) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(PAIR_HEADER)
        for p in pairs:
            wr.writerow(list(p))


def load_pairs(path: str | Path) -> list[tuple[int, int, int, int]]:
    out: list[tuple[int, int, int, int]] = []
    with open(path, newline="") as f:
        rd = csv.reader(f)
        header = next(rd)
        if header != PAIR_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        for row in rd:
            out.append((int(row[0]), int(row[1]), int(row[2]), int(row[3])))
    return out


def save_graph(graph: ExperienceGraph, out_dir: str | Path) -> Path:
    """Write graph.json plus one matches CSV per edge. Returns the JSON path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    edges_json = []
    for e in graph.edges:
        name = f"matches_{e.i}_{e.j}.csv"
        save_matches(out / name, e.matches)
        edges_json.append({"i": e.i, "j": e.j, "cost": e.cost, "matches": name})
    doc = {"vertices": graph.vertices, "edges": edges_json}
    path = out / "graph.json"
    with open(path, "w") as f:
        json.dump(doc, f, sort_keys=True, indent=1)
        f.write("\n")
    return path


def load_graph(path: str | Path) -> ExperienceGraph:
    path = Path(path)
    doc = json.loads(path.read_text())
    edges = []
    for e in doc["edges"]:
        cs = load_matches(path.parent / e["matches"], query_id=e["i"], ref_id=e["j"])
        edges.append(GraphEdge(i=e["i"], j=e["j"], cost=e["cost"], matches=cs))
    return ExperienceGraph(vertices=list(doc["vertices"]), edges=edges)
