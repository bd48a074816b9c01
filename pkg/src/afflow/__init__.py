"""Exact invariance repairs for inner flows on towers of matrix algebras.

A flow t -> Ad e^{itH} on M_N that almost leaves a tower of subalgebras
invariant is perturbed by an explicit cocycle into one that leaves every
level invariant, with the size of the cocycle controlled by the defect.
"""

from .cocycle import Cocycle, compose, resplit_small, scalar_phase
from .correction import FixConfig, fix_invariant, fix_pointwise, fix_projection, fix_tower
from .doubled import fix_prop_a
from .errors import AfflowError, InternalBoundViolation, PreconditionError
from .flowcore import BumpKernel, InnerFlow, invariance_defect, pointwise_defect, smooth
from .harness import gen_instance, run, sweep, verify
from .staralg import MatrixSubalgebra, from_block_partition

__version__ = "0.1.0"

__all__ = [
    "AfflowError",
    "BumpKernel",
    "Cocycle",
    "FixConfig",
    "InnerFlow",
    "InternalBoundViolation",
    "MatrixSubalgebra",
    "PreconditionError",
    "compose",
    "fix_invariant",
    "fix_pointwise",
    "fix_projection",
    "fix_prop_a",
    "fix_tower",
    "from_block_partition",
    "gen_instance",
    "invariance_defect",
    "pointwise_defect",
    "resplit_small",
    "run",
    "scalar_phase",
    "smooth",
    "sweep",
    "verify",
]
