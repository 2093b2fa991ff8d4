"""Shape derivatives of Dirichlet-to-Neumann / Neumann-to-Dirichlet boundary
pairings under vertex motions of polygonal conductivity inclusions.

The package provides the forward transmission solver (P1 finite elements on
interface-conforming graded meshes), discrete boundary operators, the exact
boundary-integral shape derivative and its per-vertex gradient form, rate
verification studies, and adjoint-gradient reconstruction of an inclusion
from boundary data.
"""

from .geometry import (
    ConstraintParams,
    DomainSpec,
    GeometryError,
    Polygon,
    VelocityField,
    edge_frame,
    interface_velocity,
    perturb,
    regular_polygon,
    symmetric_difference_area,
    validate_constraints,
)

__version__ = "0.1.0"

__all__ = [
    "ConstraintParams",
    "DomainSpec",
    "GeometryError",
    "Polygon",
    "VelocityField",
    "edge_frame",
    "interface_velocity",
    "perturb",
    "regular_polygon",
    "symmetric_difference_area",
    "validate_constraints",
    "__version__",
]
