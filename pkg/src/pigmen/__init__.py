"""Physics-informed graph-mesh networks with differentiable FEM kernels."""

__version__ = "0.1.0"
