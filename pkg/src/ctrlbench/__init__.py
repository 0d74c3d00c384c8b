"""Benchmark harness for learning-by-doing control tasks.

Two tracks are provided: open-loop impulse control of a chemical reaction
network (``chem``) and closed-loop trajectory tracking with planar robot arms
(``robo``).  Baseline controllers live in :mod:`ctrlbench.controllers`.
"""

__version__ = "0.1.0"
