"""TitaNet-LID spoken language identification on a small numpy autodiff core."""

__version__ = "0.1.0"
