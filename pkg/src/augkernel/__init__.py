"""Finite augmentation graphs, their kernel operators, and the gradient-flow
dynamics of non-contrastive self-supervised losses on linear features."""

__version__ = "0.1.0"
