"""defnet: a desk-scale deformable-part detection network.

Layers with explicit forward/backward, a deformation-constrained pooling
operator, staged training, a proposal–score–refine detection pipeline,
greedy model ensembling, and mean-AP evaluation — all on synthetic scenes.
"""

__version__ = "0.1.0"
