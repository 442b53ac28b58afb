"""Deterministic multi-UAV subterranean exploration simulator.

Sensing, mapping (dense voxels, sphere graphs, surfels, compact topology),
informed search, navigation, artifact reporting, and a lossy mesh-network
mission layer -- all reproducible from a scenario file and a seed.
"""

__version__ = "0.1.0"
