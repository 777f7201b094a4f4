"""mvskit: plane-sweep multi-view stereo with adaptive depth ranges.

Library layout:

* ``geometry``      - cameras, poses, sweep correspondence, depth ranges
* ``features``      - images, census descriptors, bilinear sampling, MVSF I/O
* ``costvolume``    - depth bins, metadata, MLP scoring, view aggregation
* ``depthestimate`` - soft-argmin extraction, range cascade, MVSD I/O
* ``evaluation``    - depth losses and benchmark metrics
* ``fusion``        - TSDF integration, marching cubes, mesh metrics, PLY I/O
* ``pipeline``      - scene manifests, synthetic fixtures, tuples, CLI
"""

__version__ = "0.1.0"
