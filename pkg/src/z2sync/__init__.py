"""Z2 synchronization on the lattice by block renormalization and multiscale synchronization."""

__version__ = "0.1.0"

from .diagnostics import run_pipeline
from .geometry import BlockPartition, alpha_ratio, build_partition
from .gibbs import Hamiltonian, exact_posterior, sample_block_posterior, sample_two_block_posterior
from .model import LatticeInstance, ModelParams, beta_of, generate_instance
from .multiscale import build_hierarchy, check_scale_conditions, synchronize
from .renorm import RenormInstance, overlap_report, renormalize
from .sideinfo import BlockSideInfo, build_block_side_info, split_gaussian

__all__ = [
    "BlockPartition", "BlockSideInfo", "Hamiltonian", "LatticeInstance", "ModelParams", "RenormInstance",
    "alpha_ratio", "beta_of", "build_block_side_info", "build_hierarchy", "build_partition",
    "check_scale_conditions", "exact_posterior", "generate_instance", "overlap_report", "renormalize",
    "run_pipeline", "sample_block_posterior", "sample_two_block_posterior", "split_gaussian", "synchronize",
]
