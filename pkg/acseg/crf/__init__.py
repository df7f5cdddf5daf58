# Potts smoothing by alpha-expansion over pixel grids and point graphs
from acseg.crf.graph import NeighborGraph, build_grid_graph, build_knn_graph
from acseg.crf.maxflow_solver import FlowNetwork, max_flow
from acseg.crf.potts import EnergyModel, alpha_expansion, tune_lambda

__all__ = [
    "EnergyModel",
    "FlowNetwork",
    "NeighborGraph",
    "alpha_expansion",
    "build_grid_graph",
    "build_knn_graph",
    "max_flow",
    "tune_lambda",
]
