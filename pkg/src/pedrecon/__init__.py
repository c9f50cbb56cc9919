"""Articulated pedestrian reconstruction from sparse LiDAR and 2D joints.

The package fits a scaled linear-blend-skinning body to LiDAR sweeps and 2D
keypoints, stores the fitted sequences as reusable assets, retargets them onto
new trajectories and renders multi-actor LiDAR scenes.
"""

__version__ = "0.1.0"
