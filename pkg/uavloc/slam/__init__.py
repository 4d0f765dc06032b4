from uavloc.slam.graph import ResidualBlock, ResidualGraph, build_graph, evaluate_loss, linearize
from uavloc.slam.solver import IterationTrace, SolverConfig, SolverError, solve_gauss_newton
from uavloc.slam.state import StateVector
