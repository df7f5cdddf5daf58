"""
Potts energy over stage unaries and its minimization by alpha-expansion
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from acseg.core.errors import InvariantViolation, ShapeMismatch
from acseg.core.types import ProbMap
from acseg.crf.graph import NeighborGraph
from acseg.crf.maxflow_solver import FlowNetwork, max_flow

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-9
ACCEPT_TOL = 1e-12


@dataclass(frozen=True)
class EnergyModel:
    """sum_i U(i, l_i) + lam * sum_(i,j) w_ij [l_i != l_j]"""

    unaries: np.ndarray
    lam: float
    graph: NeighborGraph

    def __post_init__(self):
        if self.unaries.shape[0] != self.graph.n:
            raise ShapeMismatch("Unaries and graph disagree on the node count")
        if self.lam < 0 or not np.isfinite(self.unaries).all():
            raise ShapeMismatch("Energy terms must be finite with lam >= 0")

    @property
    def C(self) -> int:
        return int(self.unaries.shape[1])

    @classmethod
    def from_probmap(
        cls, p: ProbMap, graph: NeighborGraph, lam: float, floor: float = PROB_FLOOR
    ) -> "EnergyModel":
        return cls(-np.log(np.maximum(p.probs, floor)), float(lam), graph)

    def energy(self, labels: np.ndarray) -> float:
        unary = self.unaries[np.arange(self.graph.n), labels].sum()
        cut = labels[self.graph.i] != labels[self.graph.j]
        return float(unary + self.lam * self.graph.weight[cut].sum())

    def unary_argmin(self) -> np.ndarray:
        return np.argmin(self.unaries, axis=1)


def expansion_network(model: EnergyModel, labels: np.ndarray, alpha: int) -> FlowNetwork:
    """Binary move network: sink side means switch to alpha, source side keeps the label"""
    n = model.graph.n
    rows = np.arange(n)
    cost_switch = model.unaries[:, alpha].copy()
    cost_keep = model.unaries[rows, labels].copy()

    g = model.graph
    li, lj = labels[g.i], labels[g.j]
    w = model.lam * g.weight
    e00 = w * (li != lj)
    e01 = w * (li != alpha)
    e10 = w * (alpha != lj)
    # e11 is zero: both endpoints take alpha

    # e00 + (e10 - e00) x_i + (0 - e10) x_j + (e01 + e10 - e00)(1 - x_i) x_j
    di = e10 - e00
    dj = -e10
    np.add.at(cost_switch, g.i, np.maximum(di, 0.0))
    np.add.at(cost_keep, g.i, np.maximum(-di, 0.0))
    np.add.at(cost_switch, g.j, np.maximum(dj, 0.0))
    np.add.at(cost_keep, g.j, np.maximum(-dj, 0.0))
    pair = e01 + e10 - e00

    shift = np.minimum(cost_switch, cost_keep)
    return FlowNetwork(
        source_cap=cost_switch - shift,
        sink_cap=cost_keep - shift,
        i=g.i.astype(np.int64),
        j=g.j.astype(np.int64),
        cap=np.maximum(pair, 0.0),
        rev_cap=np.zeros_like(pair),
    )


def alpha_expansion(
    model: EnergyModel, init: Optional[np.ndarray] = None, max_cycles: int = 50
) -> Tuple[np.ndarray, List[float]]:
    """
    Minimize the Potts energy by expansion moves

    Args:
        model: energy to minimize
        init: starting labeling, unary argmin if omitted
        max_cycles: cap on full passes over the labels

    Returns:
        (labeling, energy after every accepted move starting with the initial energy)
    """
    labels = model.unary_argmin() if init is None else np.asarray(init, dtype=np.int64).copy()
    if labels.shape != (model.graph.n,) or (labels < 0).any() or (labels >= model.C).any():
        raise ShapeMismatch("Initial labeling does not fit the energy model")
    current = model.energy(labels)
    trace = [current]
    if model.graph.edge_count == 0 or model.lam == 0.0:
        # decoupled nodes: only the unary minimum can be reached by strict descent
        best = model.unary_argmin()
        candidate_energy = model.energy(best)
        if candidate_energy < current - ACCEPT_TOL * max(1.0, abs(current)):
            labels, current = best, candidate_energy
            trace.append(current)
        return labels, trace

    for cycle in range(max_cycles):
        moved = False
        for alpha in range(model.C):
            _, switch = max_flow(expansion_network(model, labels, alpha))
            candidate = np.where(switch, alpha, labels)
            energy = model.energy(candidate)
            if energy < current - ACCEPT_TOL * max(1.0, abs(current)):
                labels, current = candidate, energy
                trace.append(current)
                moved = True
        if not moved:
            break
    else:
        logger.warning(f"Alpha-expansion stopped after {max_cycles} cycles")

    if any(b > a for a, b in zip(trace, trace[1:])):
        raise InvariantViolation("Alpha-expansion increased the energy")
    return labels, trace


def tune_lambda(
    probmaps: Sequence[ProbMap],
    truths: Sequence[np.ndarray],
    graphs: Sequence[NeighborGraph],
    lambdas: Sequence[float],
) -> Tuple[float, List[float]]:
    """
    Potts weight with the best overall accuracy on labeled items

    Args:
        probmaps: stage outputs per item
        truths: flat labels per item, -1 ignored
        graphs: neighbor graph per item
        lambdas: candidate weights

    Returns:
        (best lambda, accuracy per candidate in the given order); ties go to the smallest lambda
    """
    if not lambdas:
        raise ShapeMismatch("Empty lambda grid")
    accuracies: List[float] = []
    for lam in lambdas:
        correct = total = 0
        for p, truth, graph in zip(probmaps, truths, graphs):
            labels, _ = alpha_expansion(EnergyModel.from_probmap(p, graph, lam))
            valid = np.asarray(truth) >= 0
            correct += int((labels[valid] == truth[valid]).sum())
            total += int(valid.sum())
        accuracies.append(correct / total if total else 0.0)
        logger.debug(f"lambda={lam:g}: accuracy {accuracies[-1]:.4f}")

    best_lam, best_acc = None, -1.0
    for lam, acc in sorted(zip(lambdas, accuracies), key=lambda pair: pair[0]):
        if acc > best_acc:
            best_lam, best_acc = lam, acc
    logger.info(f"Selected Potts weight {best_lam:g} (accuracy {best_acc:.4f})")
    return float(best_lam), accuracies
