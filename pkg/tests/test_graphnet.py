import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from meshdeform.autodiff import ShapeError, gradient_error
from meshdeform.graphnet import (
    GraphConvLayer,
    GraphResidualBlock,
    chebyshev_basis,
    graph_conv,
    graph_residual_block,
)
from meshdeform.mesh import TriMesh, build_graph_operator, graph_operator_from_adjacency, icosphere

F64 = torch.float64


def dense_conv(layer, op, f):
    out = layer.theta0.detach().numpy() @ f + layer.theta1.detach().numpy() @ (f @ op.laplacian_scaled.toarray())
    return np.maximum(out, 0) if layer.activation == "relu" else out


def test_identity_weights_pass_features_through():
    op = build_graph_operator(icosphere(0))
    layer = GraphConvLayer(4, 4, "none", dtype=F64)
    with torch.no_grad():
        layer.theta0.copy_(torch.eye(4))
        layer.theta1.zero_()
    f = torch.randn(4, 12, dtype=F64)
    torch.testing.assert_close(graph_conv(layer, op, f), f)


@pytest.mark.parametrize("act", ["relu", "none"])
def test_matches_dense_oracle_on_icosahedron(act):
    op = build_graph_operator(icosphere(0))
    layer = GraphConvLayer(3, 5, act, torch.Generator().manual_seed(1), F64)
    f = np.random.default_rng(0).normal(size=(3, 12))
    out = graph_conv(layer, op, torch.tensor(f)).detach().numpy()
    np.testing.assert_allclose(out, dense_conv(layer, op, f), atol=1e-12)


def test_constant_rows_on_regular_graph():
    # icosahedron is 5-regular: L_norm annihilates constants, so L_scaled maps them to their negation
    op = build_graph_operator(icosphere(0))
    layer = GraphConvLayer(2, 2, "none", dtype=F64)
    with torch.no_grad():
        layer.theta0.zero_()
        layer.theta1.copy_(torch.eye(2))
    f = torch.tensor([[1.0] * 12, [-2.5] * 12], dtype=F64)
    torch.testing.assert_close(graph_conv(layer, op, f), -f)


def test_dimension_mismatch():
    op = build_graph_operator(icosphere(0))
    layer = GraphConvLayer(3, 2, dtype=F64)
    with pytest.raises(ShapeError):
        graph_conv(layer, op, torch.zeros(4, 12, dtype=F64))
    with pytest.raises(ShapeError):
        graph_conv(layer, op, torch.zeros(3, 11, dtype=F64))


def test_permutation_equivariance():
    m = icosphere(1)
    perm = np.random.default_rng(0).permutation(m.n_vertices)
    inv = np.argsort(perm)
    pm = TriMesh(m.vertices[perm], inv[m.faces])
    layer = GraphConvLayer(3, 4, "relu", torch.Generator().manual_seed(0), F64)
    f = torch.randn(3, m.n_vertices, dtype=F64)
    a = graph_conv(layer, build_graph_operator(m), f)
    b = graph_conv(layer, build_graph_operator(pm), f[:, perm])
    torch.testing.assert_close(b, a[:, perm])


def test_chebyshev_small_k():
    op = build_graph_operator(icosphere(0))
    (t0,) = chebyshev_basis(op, 0)
    np.testing.assert_array_equal(t0.toarray(), np.eye(12))
    b1 = chebyshev_basis(op, 1)
    assert len(b1) == 2
    np.testing.assert_array_equal(b1[1].toarray(), op.laplacian_scaled.toarray())


def test_chebyshev_k3_on_path_graph():
    a = np.diag(np.ones(3), 1)
    op = graph_operator_from_adjacency(a + a.T)
    basis = chebyshev_basis(op, 3)
    L = op.laplacian_scaled.toarray()
    T = [np.eye(4), L]
    for _ in range(2):
        T.append(2 * L @ T[-1] - T[-2])
    for got, ref in zip(basis, T):
        np.testing.assert_allclose(got.toarray(), ref, atol=1e-12)
        np.testing.assert_allclose(got.toarray(), got.toarray().T, atol=1e-12)


def test_residual_block_zero_weights_is_relu():
    op = build_graph_operator(icosphere(0))
    block = GraphResidualBlock(3, dtype=F64)
    for p in block.parameters():
        torch.nn.init.zeros_(p)
    f = torch.rand(3, 12, dtype=F64)
    torch.testing.assert_close(graph_residual_block(block, op, f), f)
    g = torch.randn(3, 12, dtype=F64)
    torch.testing.assert_close(graph_residual_block(block, op, g), g.clamp_min(0))


@given(st.integers(1, 8), st.integers(0, 2))
def test_residual_block_shape(dim, s):
    op = build_graph_operator(icosphere(s))
    block = GraphResidualBlock(dim, torch.Generator().manual_seed(dim), F64)
    f = torch.randn(dim, op.n_vertices, dtype=F64)
    assert graph_residual_block(block, op, f).shape == f.shape


def test_residual_block_gradient():
    op = build_graph_operator(icosphere(0))
    block = GraphResidualBlock(3, torch.Generator().manual_seed(0), F64)
    f = torch.randn(3, 12, dtype=F64, requires_grad=True)
    params = [f] + list(block.parameters())
    assert gradient_error(lambda: graph_residual_block(block, op, f).pow(2).sum(), params) < 1e-4


def test_residual_block_rejects_wrong_width():
    op = build_graph_operator(icosphere(0))
    with pytest.raises(ShapeError):
        graph_residual_block(GraphResidualBlock(3, dtype=F64), op, torch.zeros(4, 12, dtype=F64))
