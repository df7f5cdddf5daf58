"""
Tests for neighbor graphs, max-flow and Potts smoothing
"""

import itertools
import logging
import time

import numpy as np
import pytest

from acseg.core.errors import InvariantViolation, ShapeMismatch, TooFewPoints
from acseg.core.types import Grid, ProbMap
from acseg.crf import (
    EnergyModel,
    FlowNetwork,
    NeighborGraph,
    alpha_expansion,
    build_grid_graph,
    build_knn_graph,
    max_flow,
    tune_lambda,
)
from acseg.crf.graph import DIAGONAL_WEIGHT
from acseg.crf.potts import expansion_network

logger = logging.getLogger(__name__)


def _network(source, sink, edges=()):
    i = np.array([e[0] for e in edges], dtype=np.int64)
    j = np.array([e[1] for e in edges], dtype=np.int64)
    cap = np.array([e[2] for e in edges], dtype=float)
    rev = np.array([e[3] if len(e) > 3 else 0.0 for e in edges], dtype=float)
    return FlowNetwork(np.array(source, float), np.array(sink, float), i, j, cap, rev)


def _random_probmap(rng, geometry, C, concentration=1.0):
    probs = rng.dirichlet(np.full(C, concentration), size=geometry.size)
    return ProbMap(probs, geometry)


def _exact_grid_minimum(model: EnergyModel, width: int, height: int) -> float:
    """Row-by-row dynamic program over all labelings of a small 8-connected grid"""
    C = model.C
    rows = list(itertools.product(range(C), repeat=width))
    unary = model.unaries.reshape(height, width, C)
    lam = model.lam

    def within(row):
        return sum(row[x] != row[x + 1] for x in range(width - 1))

    def between(upper, lower):
        cost = sum(upper[x] != lower[x] for x in range(width))
        diagonal = sum(upper[x] != lower[x + 1] for x in range(width - 1))
        diagonal += sum(upper[x + 1] != lower[x] for x in range(width - 1))
        return cost + DIAGONAL_WEIGHT * diagonal

    local = [
        np.array([unary[y, range(width), row].sum() + lam * within(row) for row in rows])
        for y in range(height)
    ]
    pair = lam * np.array([[between(a, b) for b in rows] for a in rows])
    best = local[0]
    for y in range(1, height):
        best = (best[:, None] + pair).min(axis=0) + local[y]
    return float(best.min())


def test_grid_graph_edges():
    """8-connected grid has the expected edge count, ordering and diagonal weights"""
    graph = build_grid_graph(4, 3)
    assert graph.n == 12
    assert graph.edge_count == 3 * 3 + 4 * 2 + 2 * 3 * 2
    assert (graph.i < graph.j).all()
    pairs = set(zip(graph.i.tolist(), graph.j.tolist()))
    assert len(pairs) == graph.edge_count
    weights = dict(zip(zip(graph.i.tolist(), graph.j.tolist()), graph.weight))
    assert weights[(0, 1)] == 1.0
    assert weights[(0, 4)] == 1.0
    assert weights[(0, 5)] == pytest.approx(1.0 / np.sqrt(2.0))
    assert weights[(1, 4)] == pytest.approx(1.0 / np.sqrt(2.0))
    assert graph.degrees()[5] == 8


@pytest.mark.parametrize("width,height,edges", [(1, 1, 0), (2, 2, 6), (3, 3, 20)])
def test_grid_graph_small_counts(width, height, edges):
    assert build_grid_graph(width, height).edge_count == edges


def test_knn_graph_matches_all_pairs_scan():
    rng = np.random.default_rng(17)
    points = rng.random((50, 3))
    graph = build_knn_graph(points, k=4)
    d = ((points[:, None, :] - points[None, :, :]) ** 2).sum(axis=2)
    np.fill_diagonal(d, np.inf)
    expected = set()
    for a in range(50):
        for b in np.argsort(d[a])[:4]:
            expected.add((min(a, int(b)), max(a, int(b))))
    assert set(zip(graph.i.tolist(), graph.j.tolist())) == expected


def test_knn_graph_collinear():
    """Unevenly spaced points on a line link each point to its nearer neighbor"""
    x = np.array([0.0, 1.0, 2.1, 3.3, 4.6])
    points = np.stack([x, np.zeros(5), np.zeros(5)], axis=1)
    graph = build_knn_graph(points, k=1)
    assert set(zip(graph.i.tolist(), graph.j.tolist())) == {(0, 1), (1, 2), (2, 3), (3, 4)}
    assert (graph.weight == 1.0).all()


def test_knn_graph_needs_enough_points():
    with pytest.raises(TooFewPoints):
        build_knn_graph(np.zeros((3, 3)), k=4)


def test_knn_graph_symmetrized_degree():
    rng = np.random.default_rng(3)
    graph = build_knn_graph(rng.normal(size=(60, 3)), k=4)
    assert (graph.i < graph.j).all()
    assert graph.degrees().min() >= 4


def test_neighbor_graph_rejects_self_loops():
    with pytest.raises(ShapeMismatch):
        NeighborGraph(3, np.array([1]), np.array([1]), np.array([1.0]))


def test_max_flow_diamond():
    """Two nodes with terminal capacities and one connecting edge"""
    flow, sink_side = max_flow(_network([3.0, 2.0], [1.0, 3.0], [(0, 1, 1.0)]))
    assert flow == pytest.approx(4.0)
    assert sink_side.shape == (2,)


def test_max_flow_single_node():
    flow, _ = max_flow(_network([3.0], [2.0]))
    assert flow == pytest.approx(2.0)


def test_max_flow_matches_brute_force_min_cut():
    """Flow value equals the minimum over all 2^n cuts on small random networks"""
    rng = np.random.default_rng(11)
    for _ in range(50):
        n = int(rng.integers(1, 11))
        source = rng.integers(0, 6, size=n).astype(float)
        sink = rng.integers(0, 6, size=n).astype(float)
        edges = []
        for a, b in itertools.combinations(range(n), 2):
            if rng.random() < 0.4:
                edges.append((a, b, float(rng.integers(0, 5)), float(rng.integers(0, 5))))
        network = _network(source, sink, edges)
        flow, sink_side = max_flow(network)
        best = min(
            network.cut_capacity(np.array(bits, dtype=bool))
            for bits in itertools.product([False, True], repeat=n)
        )
        assert flow == pytest.approx(best)
        assert network.cut_capacity(sink_side) == pytest.approx(best)


def test_flow_network_rejects_negative_capacity():
    with pytest.raises(ShapeMismatch):
        _network([-1.0], [1.0])


def test_expansion_network_cut_equals_move_energy():
    """Every cut of the move network prices the corresponding labeling up to a constant"""
    rng = np.random.default_rng(5)
    graph = build_grid_graph(3, 2)
    model = EnergyModel(rng.random((6, 3)) * 3.0, 0.8, graph)
    labels = rng.integers(0, 3, size=6)
    network = expansion_network(model, labels, alpha=1)
    offsets = []
    for bits in itertools.product([False, True], repeat=6):
        switch = np.array(bits)
        candidate = np.where(switch, 1, labels)
        offsets.append(model.energy(candidate) - network.cut_capacity(switch))
    assert np.ptp(offsets) == pytest.approx(0.0, abs=1e-9)


def test_alpha_expansion_zero_lambda_is_map():
    rng = np.random.default_rng(2)
    p = _random_probmap(rng, Grid(5, 4), 4)
    model = EnergyModel.from_probmap(p, build_grid_graph(5, 4), 0.0)
    labels, trace = alpha_expansion(model)
    assert np.array_equal(labels, np.argmax(p.probs, axis=1))
    assert len(trace) == 1


def test_alpha_expansion_keeps_init_on_flat_unaries():
    """Equal unaries with a smooth start leave nothing to gain"""
    graph = build_grid_graph(4, 4)
    model = EnergyModel(np.zeros((16, 3)), 1.0, graph)
    init = np.full(16, 2)
    labels, trace = alpha_expansion(model, init=init)
    assert np.array_equal(labels, init)
    assert trace == [0.0]


def test_alpha_expansion_energy_never_increases():
    rng = np.random.default_rng(8)
    p = _random_probmap(rng, Grid(12, 10), 4, concentration=0.5)
    model = EnergyModel.from_probmap(p, build_grid_graph(12, 10), 1.5)
    labels, trace = alpha_expansion(model)
    assert all(b <= a for a, b in zip(trace, trace[1:]))
    assert trace[-1] == pytest.approx(model.energy(labels))
    assert model.energy(labels) <= model.energy(model.unary_argmin())


def test_alpha_expansion_close_to_exact_minimum():
    """Within twice the optimum always and exactly optimal on most small grids"""
    rng = np.random.default_rng(21)
    exact_hits = 0
    for _ in range(20):
        p = _random_probmap(rng, Grid(4, 4), 3)
        model = EnergyModel.from_probmap(p, build_grid_graph(4, 4), 1.0)
        labels, _ = alpha_expansion(model)
        found = model.energy(labels)
        optimum = _exact_grid_minimum(model, 4, 4)
        assert found >= optimum - 1e-9
        assert found <= 2.0 * optimum + 1e-9
        exact_hits += abs(found - optimum) <= 1e-9 * max(1.0, optimum)
    logger.info(f"Exact minimum reached on {exact_hits}/20 grids")
    assert exact_hits >= 18


def test_alpha_expansion_result_is_local_minimum():
    """A second run from the result makes no move"""
    rng = np.random.default_rng(9)
    p = _random_probmap(rng, Grid(8, 8), 3, concentration=0.7)
    model = EnergyModel.from_probmap(p, build_grid_graph(8, 8), 0.6)
    labels, _ = alpha_expansion(model)
    again, trace = alpha_expansion(model, init=labels)
    assert np.array_equal(again, labels)
    assert len(trace) == 1


def test_alpha_expansion_smooths_isolated_pixel():
    """A weakly disagreeing pixel inside a uniform region is absorbed"""
    probs = np.tile([0.8, 0.2], (25, 1))
    probs[12] = [0.4, 0.6]
    model = EnergyModel.from_probmap(ProbMap(probs, Grid(5, 5)), build_grid_graph(5, 5), 1.0)
    labels, trace = alpha_expansion(model)
    assert (labels == 0).all()
    assert len(trace) == 2


def test_alpha_expansion_rejects_bad_init():
    model = EnergyModel(np.zeros((4, 2)), 1.0, build_grid_graph(2, 2))
    with pytest.raises(ShapeMismatch):
        alpha_expansion(model, init=np.array([0, 1, 2, 0]))


def test_energy_model_rejects_negative_lambda():
    with pytest.raises(ShapeMismatch):
        EnergyModel(np.zeros((4, 2)), -1.0, build_grid_graph(2, 2))


def test_tune_lambda_prefers_smoothing_on_noisy_maps():
    """Salt noise on a two-region map is removed by a positive weight"""
    rng = np.random.default_rng(4)
    geometry = Grid(12, 12)
    truth = (np.arange(144) % 12 >= 6).astype(np.int64)
    probs = np.where(truth[:, None] == np.arange(2), 0.7, 0.3)
    flip = rng.random(144) < 0.15
    probs[flip] = probs[flip][:, ::-1]
    p = ProbMap(probs, geometry)
    graph = build_grid_graph(12, 12)
    best, accuracies = tune_lambda([p], [truth], [graph], [0.0, 0.5, 1.0])
    assert len(accuracies) == 3
    assert accuracies[0] == pytest.approx(1.0 - flip.mean())
    assert best > 0.0
    assert max(accuracies) > accuracies[0]


def test_tune_lambda_ties_pick_smallest():
    p = ProbMap(np.tile([0.9, 0.1], (4, 1)), Grid(2, 2))
    truth = np.zeros(4, dtype=np.int64)
    best, accuracies = tune_lambda([p], [truth], [build_grid_graph(2, 2)], [2.0, 0.5, 1.0])
    assert accuracies == [1.0, 1.0, 1.0]
    assert best == 0.5


def test_tune_lambda_single_pixel():
    p = ProbMap(np.array([[0.3, 0.7]]), Grid(1, 1))
    best, _ = tune_lambda([p], [np.array([1])], [build_grid_graph(1, 1)], [10.0, 0.01, 1.0])
    assert best == 0.01


def test_tune_lambda_empty_grid():
    with pytest.raises(ShapeMismatch):
        tune_lambda([], [], [], [])


def test_invariant_violation_is_internal():
    assert InvariantViolation.exit_code == 3


@pytest.mark.parametrize("seed", range(5))
def test_alpha_expansion_lowers_energy_on_noisy_maps(seed):
    rng = np.random.default_rng(seed)
    truth = (np.arange(16 * 12) % 16 >= 7).astype(np.int64)
    probs = np.where(truth[:, None] == np.arange(3), 0.6, 0.2)
    flip = rng.random(truth.size) < 0.1
    probs[flip] = probs[flip][:, [1, 0, 2]]
    model = EnergyModel.from_probmap(ProbMap(probs, Grid(16, 12)), build_grid_graph(16, 12), 1.0)
    labels, trace = alpha_expansion(model)
    assert trace[-1] < trace[0]
    assert model.energy(labels) == pytest.approx(trace[-1])


@pytest.mark.slow
def test_alpha_expansion_on_image_sized_grid_is_fast():
    rng = np.random.default_rng(12)
    p = _random_probmap(rng, Grid(64, 48), 7, concentration=0.4)
    model = EnergyModel.from_probmap(p, build_grid_graph(64, 48), 0.5)
    start = time.perf_counter()
    _, trace = alpha_expansion(model)
    elapsed = time.perf_counter() - start
    logger.info(f"48x64 expansion with 7 labels took {elapsed:.2f}s over {len(trace) - 1} moves")
    assert trace[-1] < trace[0]
    assert elapsed < 8.0
