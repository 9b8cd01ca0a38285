"""Occupational income scores (OCCSCORE and the lasso-adjusted LIDO score)
and diagnostics for the measurement error they induce in regressions."""

__version__ = "0.1.0"
