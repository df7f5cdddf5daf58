"""
s-t max-flow on vision graphs via the Boykov-Kolmogorov solver
"""

import logging
from dataclasses import dataclass
from typing import Tuple

import maxflow
import numpy as np

from acseg.core.errors import InvariantViolation, ShapeMismatch

logger = logging.getLogger(__name__)

DUALITY_TOL = 1e-9


@dataclass(frozen=True)
class FlowNetwork:
    """Terminal capacities per node plus directed edge pairs (i -> j cap, j -> i rev_cap)"""

    source_cap: np.ndarray
    sink_cap: np.ndarray
    i: np.ndarray
    j: np.ndarray
    cap: np.ndarray
    rev_cap: np.ndarray

    def __post_init__(self):
        arrays = (self.source_cap, self.sink_cap, self.cap, self.rev_cap)
        if any((a < 0).any() or not np.isfinite(a).all() for a in arrays):
            raise ShapeMismatch("Capacities must be finite and >= 0")
        if self.source_cap.shape != self.sink_cap.shape:
            raise ShapeMismatch("Terminal capacity arrays differ in length")

    @property
    def n(self) -> int:
        return int(self.source_cap.size)

    def cut_capacity(self, sink_side: np.ndarray) -> float:
        """Capacity of the cut separating source-side nodes from sink-side nodes"""
        source_side = ~sink_side
        total = self.source_cap[sink_side].sum() + self.sink_cap[source_side].sum()
        forward = source_side[self.i] & sink_side[self.j]
        backward = sink_side[self.i] & source_side[self.j]
        return float(total + self.cap[forward].sum() + self.rev_cap[backward].sum())


def max_flow(network: FlowNetwork) -> Tuple[float, np.ndarray]:
    """
    Maximum flow and a minimum cut

    Returns:
        (flow value, sink-side mask per node)
    """
    graph = maxflow.Graph[float](network.n, network.i.size)
    nodes = graph.add_grid_nodes(network.n)
    graph.add_grid_tedges(nodes, network.source_cap, network.sink_cap)
    used = (network.cap > 0) | (network.rev_cap > 0)
    if used.any():
        graph.add_edges(
            nodes[network.i[used]],
            nodes[network.j[used]],
            network.cap[used].astype(np.float64),
            network.rev_cap[used].astype(np.float64),
        )
    flow = float(graph.maxflow())
    sink_side = np.asarray(graph.get_grid_segments(nodes), dtype=bool)

    cut = network.cut_capacity(sink_side)
    scale = max(1.0, abs(flow), abs(cut))
    if abs(flow - cut) > DUALITY_TOL * scale:
        raise InvariantViolation(f"Max-flow {flow} differs from cut capacity {cut}")
    return flow, sink_side
