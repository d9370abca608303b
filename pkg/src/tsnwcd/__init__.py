"""Worst-case delay toolkit for TSN networks.

Subpackages cover exact min-plus curve algebra, credit-based-shaper delay
bounds, cyclic-queuing closed-form bounds, an event-driven shaper simulator,
a deterministic test-case generator, and a scoring harness for predicted
delays.
"""

__version__ = "0.1.0"
