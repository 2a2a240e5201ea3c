"""Shape-regularised segmentation and super-resolution networks on a minimal
autodiff engine, with a synthetic cardiac-phantom benchmark harness."""

__version__ = "0.1.0"
