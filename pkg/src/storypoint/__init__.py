"""Story-point estimation from issue text: a recurrent neural estimator,
classic baselines, and the statistical evaluation harness around them."""

__version__ = "0.1.0"
