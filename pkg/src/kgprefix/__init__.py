"""Two-stage prefix tuning for knowledge-grounded dialogue on a numpy autodiff core."""

__version__ = "0.1.0"
