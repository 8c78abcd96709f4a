"""Chemical master equation solvers built on binary tree tensor networks."""

__version__ = "0.1.0"
