"""seqloc: self-supervised stereo localization across repeated traversals.

Sequence-based place recognition proposes image correspondences between
experiences, visual odometry validates them, an experience graph composes
them across appearance gaps, and an EM loop refines a descriptor model with
a self-supervised keypoint loss. A built-in multi-experience simulator
provides data for end-to-end verification.
"""

from .errors import SeqlocError
from .geometry import StereoCamera, Transform

__all__ = ["SeqlocError", "StereoCamera", "Transform"]
__version__ = "0.1.0"
