"""Progressive tri-plane radiance field engine.

Builds a supporting keyframe database by depth-image-based warping around an
initial view, fits a tri-plane radiance field to it, and extends the scene
online along a camera trajectory with pluggable view refinement, block
chaining for unbounded motion, and oracle-backed consistency metrics.
"""

__version__ = "0.1.0"
