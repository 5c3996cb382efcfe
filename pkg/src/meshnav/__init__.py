"""meshnav: stability-constrained sampling MPC on triangle-mesh terrain."""

__version__ = "0.1.0"

from .mesh import (  # noqa: F401
    TerrainSpec,
    TriangleMesh,
    generate_terrain,
    load_mesh,
    save_obj,
    locate_face,
    terrain_height,
    terrain_gradient,
)
