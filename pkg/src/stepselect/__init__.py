"""Step-selection functions fitted by neural networks, conditional-logit GLMs
and penalized splines, with explainability tools and a simulation harness."""

__version__ = "0.1.0"
