"""Two-view fan-beam CT reconstruction with anatomy-guided adversarial training."""

from .fanbeam import FanBeamGeometry, build_geometry, build_projector, project_volume
from .losses import LossBreakdown, LossWeights
from .tensor import Tensor, backward, no_grad

__version__ = "0.1.0"
