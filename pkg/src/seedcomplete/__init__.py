"""Dense-sparse-dense semantic scene completion on a numpy autodiff core."""
__version__ = "0.1.0"
