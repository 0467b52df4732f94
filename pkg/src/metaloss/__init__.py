"""Few-shot meta-learning lab: context adaptation, learned inner-loop
losses, and a reverse-mode autodiff core whose gradients nest."""

from .autodiff import (
    AutodiffError,
    DomainError,
    GradientMap,
    Graph,
    GraphError,
    NodeRef,
    PUBLIC_OPS,
    ShapeError,
    concat_cols,
)

__version__ = "0.1.0"
