"""Self-evolving imitation learning at desk scale: a kinematic pick-and-place
world, a numpy neural core, BC policies, a trajectory selector and the
train-record-select-train loop."""

__version__ = "0.1.0"
