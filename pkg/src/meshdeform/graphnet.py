"""First-order Chebyshev graph convolutions and graph residual blocks."""

from __future__ import annotations

import torch
from scipy import sparse
from torch import nn

from . import autodiff as ad
from .mesh import GraphOperator


class GraphConvLayer(nn.Module):
    """``f_out = act(theta0 @ f_in + theta1 @ (f_in @ L_scaled))`` on (d, N) feature matrices."""

    def __init__(self, d_in: int, d_out: int, activation: str = "relu",
                 generator: torch.Generator | None = None, dtype=torch.float32):
        super().__init__()
        if activation not in ("relu", "none"):
            raise ValueError(f"unknown activation {activation!r}")
        self.activation = activation
        g = generator if generator is not None else torch.Generator().manual_seed(0)
        self.theta0 = nn.Parameter(ad.glorot_uniform((d_out, d_in), d_in, d_out, g).to(dtype))
        self.theta1 = nn.Parameter(ad.glorot_uniform((d_out, d_in), d_in, d_out, g).to(dtype))

    @property
    def d_in(self) -> int:
        return self.theta0.shape[1]

    @property
    def d_out(self) -> int:
        return self.theta0.shape[0]

    def forward(self, op: GraphOperator, f_in: torch.Tensor) -> torch.Tensor:
        return graph_conv(self, op, f_in)


def graph_conv(layer: GraphConvLayer, op: GraphOperator, f_in: torch.Tensor) -> torch.Tensor:
    if f_in.dim() != 2 or f_in.shape[0] != layer.d_in:
        raise ad.ShapeError(f"graph_conv: incompatible shapes {tuple(layer.theta0.shape)} and {tuple(f_in.shape)}")
    out = ad.add(ad.matmul(layer.theta0, f_in), ad.matmul(layer.theta1, ad.sparse_dense_matmul(op, f_in)))
    return ad.relu(out) if layer.activation == "relu" else out


class GraphResidualBlock(nn.Module):
    """Two graph convolutions with a skip connection.

    ReLU follows the first convolution and the residual sum; the second
    convolution is linear.
    """

    def __init__(self, dim: int, generator: torch.Generator | None = None, dtype=torch.float32):
        super().__init__()
        self.conv_a = GraphConvLayer(dim, dim, "relu", generator, dtype)
        self.conv_b = GraphConvLayer(dim, dim, "none", generator, dtype)

    def forward(self, op: GraphOperator, f_in: torch.Tensor) -> torch.Tensor:
        return graph_residual_block(self, op, f_in)


def graph_residual_block(block: GraphResidualBlock, op: GraphOperator, f_in: torch.Tensor) -> torch.Tensor:
    if f_in.shape[0] != block.conv_a.d_in:
        raise ad.ShapeError(
            f"graph_residual_block: incompatible shapes {tuple(block.conv_a.theta0.shape)} and {tuple(f_in.shape)}"
        )
    h = graph_conv(block.conv_b, op, graph_conv(block.conv_a, op, f_in))
    return ad.relu(ad.add(f_in, h))


def chebyshev_basis(op: GraphOperator, K: int) -> list[sparse.csr_matrix]:
    """``[T_0(L), ..., T_K(L)]`` of the scaled Laplacian by the three-term recursion."""
    if K < 0:
        raise ValueError("K must be non-negative")
    n = op.n_vertices
    basis = [sparse.identity(n, format="csr")]
    if K >= 1:
        basis.append(op.laplacian_scaled.tocsr())
    for _ in range(2, K + 1):
        basis.append((2 * op.laplacian_scaled @ basis[-1] - basis[-2]).tocsr())
    return basis

