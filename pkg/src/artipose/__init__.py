"""Category-level articulated object and hand pose estimation with learned
interaction priors, on a built-in procedural synthetic dataset."""

__version__ = "0.1.0"
