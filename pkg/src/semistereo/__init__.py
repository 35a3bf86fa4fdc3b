"""Semi-supervised stereo disparity estimation at desk scale.

Alternates supervised updates on labeled synthetic pairs with self-supervised
updates on unlabeled real pairs (photometric or feature-reconstruction loss,
occlusion-masked), and ships matching-cost-curve diagnostics.
"""

__version__ = "0.1.0"
