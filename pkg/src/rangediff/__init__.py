"""Range-view lidar codec, box-conditioned masks and a small numpy diffusion toolkit."""
from .errors import RangeDiffError
from .rangeview import PointCloud, RangeView, project, reconstruct

__version__ = "0.1.0"

__all__ = ["PointCloud", "RangeView", "RangeDiffError", "project", "reconstruct", "__version__"]
