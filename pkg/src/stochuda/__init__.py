"""Stochastic-translation domain adaptation for semantic segmentation.

Modules: ``synth`` (benchmark generator and dataset I/O), ``translation``
(content/style translator), ``segmentation`` (networks and objectives),
``pseudo_labels``, ``metrics``, ``pipeline`` (rounds and reports),
``ablation`` and ``cli``.
"""

__version__ = "0.1.0"
