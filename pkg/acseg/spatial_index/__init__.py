# Nearest-neighbor index over point clouds
from acseg.spatial_index.point_index import PointIndex

__all__ = ["PointIndex"]
