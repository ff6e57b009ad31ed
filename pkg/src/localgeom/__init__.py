"""Local geometry of statistical models.

Graphical-model tools (MAGs, m-separation, Markov equivalence), Gaussian
fitting, log-linear algebra, numerical local geometry of implicit models,
and tangent-space model selection.
"""
from __future__ import annotations

__version__ = "0.1.0"
