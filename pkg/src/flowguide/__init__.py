"""flowguide: a 2D flow-matching laboratory for weak-to-strong guidance.

Exact optimal-velocity oracles on class-conditional Gaussian-mixture trees,
a small conditional velocity network with hand-rolled gradients, inference
time guidance (CFG / autoguidance / layer-skip / segmented), guidance
augmented training targets, and quantitative 2D sample metrics.
"""

__version__ = "0.1.0"
