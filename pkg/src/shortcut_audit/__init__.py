"""Background-patch probing for dataset bias (shortcut learning) in image datasets."""

__version__ = "0.1.0"
