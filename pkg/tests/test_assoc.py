from __future__ import annotations

import copy

import numpy as np
import numpy.testing as npt
import pytest

from seqloc.assoc import (REJECTED, REPLACED, VALIDATED, Correspondence,
                          CorrespondenceSet, ExperienceGraph, GraphEdge,
                          build_graph, compose_correspondences, edge_cost,
                          min_cost_path, sample_pairs, validate_matches)
from seqloc.errors import EmptyCorrespondences, MissingVO, NoPath
from seqloc.evaluate import best_alignment, load_ground_truth
from seqloc.placerec import RawMatchList
from seqloc.simworld import SimConfig, generate_dataset


@pytest.fixture(scope="module")
def drift_free(tmp_path_factory):
    cfg = SimConfig(num_experiences=2, frames_per_experience=40,
                    drift=0.0, route_length_m=20.0)
    out = tmp_path_factory.mktemp("drift_free")
    return generate_dataset(cfg, seed=5, out_dir=out)


def gt_alignment(query, ref) -> np.ndarray:
    """Nearest reference frame per query frame by true camera position."""
    q = np.stack([f.gt_pose.r for f in query.frames])
    r = np.stack([f.gt_pose.r for f in ref.frames])
    d = np.linalg.norm(q[:, None, :] - r[None, :, :], axis=2)
    return np.argmin(d, axis=1)


def raw_from(alignment: np.ndarray, query_id: int, ref_id: int) -> RawMatchList:
    return RawMatchList(query_id=query_id, ref_id=ref_id,
                        ref_frames=alignment.astype(int),
                        scores=np.zeros(len(alignment)))


def test_self_match_validates_exactly(drift_free):
    exp = drift_free.experiences[0]
    raw = raw_from(np.arange(len(exp.frames)), 0, 0)
    cs = validate_matches(exp, exp, raw, e_sq=0.25)
    assert len(cs.entries) == len(exp.frames)
    for e in cs.entries:
        assert e.status == VALIDATED
        assert e.sq_distance < 1e-9
    assert [e.chain for e in cs.entries[1:]] == [1] * (len(cs.entries) - 1)


def test_true_alignment_validates(drift_free):
    query, ref = drift_free.experiences[1], drift_free.experiences[0]
    raw = raw_from(gt_alignment(query, ref), 1, 0)
    cs = validate_matches(query, ref, raw, e_sq=0.25)
    assert all(e.status == VALIDATED for e in cs.entries)


def test_perturbed_match_gets_replaced(drift_free):
    query, ref = drift_free.experiences[1], drift_free.experiences[0]
    align = gt_alignment(query, ref)
    raw_frames = align.copy()
    raw_frames[20] += 10
    cs = validate_matches(query, ref, raw_from(raw_frames, 1, 0), e_sq=0.25)
    entry = cs.entries[20]
    assert entry.status == REPLACED
    assert abs(entry.ref_frame - align[20]) <= 1
    others = [e for e in cs.entries if e.query_frame != 20]
    assert all(e.status == VALIDATED for e in others)


def test_zero_threshold_validates_nothing(drift_free):
    query, ref = drift_free.experiences[1], drift_free.experiences[0]
    raw = raw_from(gt_alignment(query, ref), 1, 0)
    cs = validate_matches(query, ref, raw, e_sq=0.0)
    assert cs.entries[0].status == VALIDATED
    assert all(e.status != VALIDATED for e in cs.entries[1:])
    assert [e.chain for e in cs.entries] == list(range(len(cs.entries)))


def test_missing_vo_edge_raises(drift_free):
    query = copy.deepcopy(drift_free.experiences[1])
    ref = drift_free.experiences[0]
    query.frames[5].vo_edge = None
    raw = raw_from(gt_alignment(query, ref), 1, 0)
    with pytest.raises(MissingVO):
        validate_matches(query, ref, raw, e_sq=0.25)


def entries_with(statuses: list[str]) -> CorrespondenceSet:
    entries = [Correspondence(i, i, s, 0.0) for i, s in enumerate(statuses)]
    return CorrespondenceSet(query_id=1, ref_id=0, entries=entries)


def test_edge_cost_definition():
    assert edge_cost(entries_with([VALIDATED] * 10)) == 0.0
    mixed = [VALIDATED] * 8 + [REPLACED, REJECTED]
    assert edge_cost(entries_with(mixed)) == pytest.approx(0.2)


def test_edge_cost_monotone_in_rejections():
    statuses = [VALIDATED] * 7 + [REPLACED]
    base = entries_with(statuses)
    grown = entries_with(statuses + [REJECTED])
    assert edge_cost(grown) >= edge_cost(base)
    assert 0.0 <= edge_cost(grown) <= 1.0


def test_graph_shape_and_costs(graph, dataset):
    assert graph.vertices == [0, 1, 2, 3, 4, 5]
    assert len(graph.edges) == 12
    pairs = {(e.i, e.j) for e in graph.edges}
    expected = {(i, j) for i in range(1, 6) for j in range(max(0, i - 3), i)}
    assert pairs == expected
    for e in graph.edges:
        assert 0.0 <= e.cost <= 1.0
        assert e.matches.query_id == e.i and e.matches.ref_id == e.j


def test_neighbor_edges_beat_skip_edges_when_stressed(tmp_path):
    cfg = SimConfig(num_experiences=4, frames_per_experience=40,
                    appearance_step=0.3, drift=0.02, route_length_m=20.0)
    ds = generate_dataset(cfg, seed=5, out_dir=tmp_path / "stressed")
    g = build_graph(ds, k=3)
    by_gap: dict[int, list[float]] = {}
    for e in g.edges:
        by_gap.setdefault(e.i - e.j, []).append(e.cost)
    assert np.mean(by_gap[1]) < np.mean(by_gap[2])


def toy_graph(costs: dict[tuple[int, int], float]) -> ExperienceGraph:
    verts = sorted({v for ij in costs for v in ij})
    edges = [GraphEdge(i=i, j=j, cost=c,
                       matches=CorrespondenceSet(i, j, []))
             for (i, j), c in costs.items()]
    return ExperienceGraph(vertices=verts, edges=edges)


def test_path_trivial_and_hand_example():
    g = toy_graph({(1, 0): 0.1, (2, 1): 0.1, (2, 0): 0.5, (3, 2): 0.1})
    assert min_cost_path(g, 2, 2) == ([2], 0.0)
    path, cost = min_cost_path(g, 0, 3)
    assert path == [0, 1, 2, 3]
    assert cost == pytest.approx(0.3)


def test_path_tie_breaks():
    fewer = toy_graph({(1, 0): 0.2, (2, 0): 0.1, (2, 1): 0.1})
    assert min_cost_path(fewer, 0, 1)[0] == [0, 1]
    lex = toy_graph({(1, 0): 0.1, (2, 0): 0.1, (3, 1): 0.1, (3, 2): 0.1})
    assert min_cost_path(lex, 0, 3)[0] == [0, 1, 3]


def test_path_disconnected_raises():
    g = toy_graph({(1, 0): 0.1, (3, 2): 0.1})
    with pytest.raises(NoPath):
        min_cost_path(g, 0, 3)
    with pytest.raises(NoPath):
        min_cost_path(g, 0, 9)


def brute_force_path(g: ExperienceGraph, src: int, dst: int):
    adj: dict[int, list[tuple[int, float]]] = {v: [] for v in g.vertices}
    for e in g.edges:
        adj[e.i].append((e.j, e.cost))
        adj[e.j].append((e.i, e.cost))
    best: tuple[float, int, list[int]] | None = None

    def walk(path: list[int], cost: float):
        nonlocal best
        node = path[-1]
        if node == dst:
            key = (cost, len(path) - 1, path)
            if best is None or key < (best[0], best[1], best[2]):
                best = (round(cost, 12), len(path) - 1, list(path))
            return
        for nxt, w in adj[node]:
            if nxt not in path:
                walk(path + [nxt], cost + w)

    walk([src], 0.0)
    return best


def test_path_matches_brute_force_on_random_graphs():
    rng = np.random.default_rng(3)
    for _ in range(40):
        n = int(rng.integers(2, 7))
        costs = {}
        for a in range(n):
            for b in range(a):
                if rng.random() < 0.55:
                    costs[(a, b)] = round(float(rng.random()), 3)
        if not costs:
            continue
        g = toy_graph(costs)
        src, dst = 0, n - 1
        expected = brute_force_path(g, src, dst)
        if expected is None:
            with pytest.raises(NoPath):
                min_cost_path(g, src, dst)
            continue
        path, cost = min_cost_path(g, src, dst)
        assert path == expected[2]
        assert cost == pytest.approx(expected[0], abs=1e-9)


def test_path_never_beats_direct_edge(graph):
    direct = graph.edge_between(5, 2)
    assert direct is not None
    _, cost = min_cost_path(graph, 2, 5)
    assert cost <= direct.cost + 1e-12


def identity_set(query_id: int, ref_id: int, n: int) -> CorrespondenceSet:
    return CorrespondenceSet(query_id, ref_id, [
        Correspondence(f, f, VALIDATED, 0.0) for f in range(n)
    ])


def test_compose_single_edge_returns_stored_set(graph):
    edge = graph.edge_between(1, 0)
    out = compose_correspondences(graph, [1, 0])
    assert out is edge.matches


def test_compose_identity_hops():
    g = ExperienceGraph(vertices=[0, 1, 2], edges=[
        GraphEdge(1, 0, 0.0, identity_set(1, 0, 5)),
        GraphEdge(2, 1, 0.0, identity_set(2, 1, 5)),
    ])
    out = compose_correspondences(g, [0, 1, 2], frame_counts={0: 5, 1: 5, 2: 5})
    assert out.query_id == 0 and out.ref_id == 2
    assert [e.ref_frame for e in out.entries] == list(range(5))
    assert all(e.status == VALIDATED for e in out.entries)


def test_compose_propagates_rejection_and_demotion():
    hop2 = identity_set(2, 1, 5)
    hop2.entries[2] = Correspondence(2, 2, REJECTED, np.inf)
    hop2.entries[3] = Correspondence(3, 4, REPLACED, 0.04)
    g = ExperienceGraph(vertices=[0, 1, 2], edges=[
        GraphEdge(1, 0, 0.0, identity_set(1, 0, 5)),
        GraphEdge(2, 1, 0.2, hop2),
    ])
    out = compose_correspondences(g, [0, 1, 2], frame_counts={0: 5, 1: 5, 2: 5})
    assert out.entries[2].status == REJECTED
    assert out.entries[2].sq_distance == np.inf
    assert out.entries[3].status == REPLACED
    assert out.entries[3].ref_frame == 4
    assert out.entries[3].sq_distance == pytest.approx(0.04)
    assert out.entries[0].status == VALIDATED


def test_compose_requires_two_vertices(graph):
    with pytest.raises(ValueError):
        compose_correspondences(graph, [0])


def test_composed_path_tracks_true_alignment(graph, dataset, ground_truth):
    path, _ = min_cost_path(graph, 0, 5)
    counts = {e.id: len(e.frames) for e in dataset.experiences}
    cs = compose_correspondences(graph, path, counts)
    align = best_alignment(ground_truth.arcs[0], ground_truth.arcs[5])
    good = 0
    for e in cs.entries:
        if e.status != REJECTED and abs(e.ref_frame - align[e.query_frame]) <= 3:
            good += 1
    assert good / len(cs.entries) >= 0.8


def test_sample_pairs_deterministic():
    cs = identity_set(1, 0, 9)
    a = sample_pairs([cs], 100, seed=11)
    b = sample_pairs([cs], 100, seed=11)
    assert a == b
    assert len(a) == 100
    assert all(pair[0] == 1 and pair[2] == 0 for pair in a)
    assert sample_pairs([cs], 100, seed=12) != a


def test_sample_pairs_skips_rejected():
    cs = identity_set(1, 0, 6)
    cs.entries[4] = Correspondence(4, 4, REJECTED, np.inf)
    drawn = sample_pairs([cs], 500, seed=0)
    assert all(pair[1] != 4 for pair in drawn)


def test_sample_pairs_empty_raises():
    cs = CorrespondenceSet(1, 0, [
        Correspondence(f, f, REJECTED, np.inf) for f in range(4)
    ])
    with pytest.raises(EmptyCorrespondences):
        sample_pairs([cs], 10, seed=0)
