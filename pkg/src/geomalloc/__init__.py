"""Geometric memory allocation: block trees, niche maps, virtual spaces."""

from .core import (BlockId, BlockTree, GeometryConfig, Node, StructuralError,
                   combine_niche_maps, dumps, loads, parse_rendering, render_tree)
from .rtree import (AllocError, Allocator, InvalidFree, InvalidSize, LedgePlan,
                    OutOfMemory, PlacementPolicy, ledge_decompose)
from .vtree import (AccessResult, PopulationStrategy, SpaceManager, VmError)
from .pipeline import PipelineSim, SimMetrics, parse_workload
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = [
    "BlockId", "BlockTree", "GeometryConfig", "Node", "StructuralError",
    "combine_niche_maps", "dumps", "loads", "parse_rendering", "render_tree",
    "AllocError", "Allocator", "InvalidFree", "InvalidSize", "LedgePlan", "OutOfMemory",
    "PlacementPolicy", "ledge_decompose", "AccessResult", "PopulationStrategy",
    "SpaceManager", "VmError", "PipelineSim", "SimMetrics", "parse_workload", "BACKEND",
]
