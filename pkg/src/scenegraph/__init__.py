"""Scene-graph generation with recurrent object context, transformer encoders
and a bias-adapted frequency prior, plus the standard evaluation suite."""

__version__ = "0.1.0"
