"""Object-centric video segmentation engine.

Slots bind to image regions per frame, relate across a clip window, merge
by similarity, and reconstruct the center frame's feature map; masks fall
out of the decoder. Runs end-to-end on synthetic sprite videos or
precomputed feature files.
"""

__version__ = "0.1.0"

from .config import RunConfig, load_config  # noqa: F401
