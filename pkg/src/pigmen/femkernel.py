"""P1 finite-element operators on simplicial meshes.

Everything here reduces to sparse matrix-vector products, so each operator is
exposed as a LinearOperatorHandle whose transpose application is exact; that
is what lets the training loop differentiate through the numerical kernels.
All quadrature is exact for P1: one-point on cells (gradients are piecewise
constant), closed-form facet mass blocks on the boundary.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .autodiff import LinearOperatorHandle
from .mesh import Mesh, _bbox_scale, TAG_GAMMA1, TAG_GAMMA2

DEGENERATE_REL_VOLUME = 1e-14


class SingularElementError(ValueError):
    """An element's volume is below the degeneracy threshold."""


@dataclass(frozen=True)
class ElementGradientOperator:
    """Per-element gradients of the barycentric shape functions.

    grads[e] is the dim x (dim+1) matrix mapping nodal values on element e to
    the (constant) gradient of the P1 interpolant there; rows of shape-function
    gradients sum to zero, so constants are annihilated exactly.
    """

    mesh: Mesh
    grads: np.ndarray    # (n_elements, dim, dim+1)
    volumes: np.ndarray  # (n_elements,)
    matrix: sp.csr_matrix  # (dim * n_elements, n_nodes) stacked form


@dataclass(frozen=True)
class AssembledOperator:
    matrix: sp.csr_matrix
    symmetric: bool


def _coo_to_csr_dedup(rows, cols, vals, shape) -> sp.csr_matrix:
    """Deterministic duplicate reduction: stable lexsort, then sequential
    left-to-right sums per (row, col) run. Keeps symmetric assemblies
    bitwise symmetric."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    vals = np.asarray(vals, dtype=np.float64)
    order = np.lexsort((cols, rows))
    rows, cols, vals = rows[order], cols[order], vals[order]
    boundary = np.ones(rows.shape[0], dtype=bool)
    boundary[1:] = (rows[1:] != rows[:-1]) | (cols[1:] != cols[:-1])
    starts = np.flatnonzero(boundary)
    summed = np.add.reduceat(vals, starts)
    return sp.csr_matrix((summed, (rows[starts], cols[starts])), shape=shape)


def _shape_gradients(mesh: Mesh):
    """Gradients of all dim+1 shape functions plus signed element volumes."""
    dim = mesh.dim
    p0 = mesh.coords[mesh.elements[:, 0]]
    edges = mesh.coords[mesh.elements[:, 1:]] - p0[:, None, :]  # (n_e, dim, dim)
    dets = np.linalg.det(edges)
    factorial = 2.0 if dim == 2 else 6.0
    volumes = dets / factorial

    threshold = DEGENERATE_REL_VOLUME * _bbox_scale(mesh.coords) ** dim
    small = np.abs(volumes) <= threshold
    if small.any():
        bad = int(np.flatnonzero(small)[0])
        raise SingularElementError(
            f"element {bad} volume {volumes[bad]:.3e} below threshold {threshold:.3e}")

    # with D rows = (p_i - p0), grad(phi_i) solves D g = e_{i-1}: column i-1 of inv(D)
    inv = np.linalg.inv(edges)                     # (n_e, dim, dim)
    grads = np.empty((mesh.n_elements, dim, dim + 1))
    grads[:, :, 1:] = inv
    grads[:, :, 0] = -grads[:, :, 1:].sum(axis=2)
    return grads, volumes


def element_gradient_operator(mesh: Mesh) -> ElementGradientOperator:
    grads, volumes = _shape_gradients(mesh)
    dim = mesh.dim
    n_e = mesh.n_elements
    # stacked sparse form: row e*dim + d, col = element node
    rows = (np.arange(n_e)[:, None, None] * dim
            + np.arange(dim)[None, :, None])
    rows = np.broadcast_to(rows, (n_e, dim, dim + 1)).ravel()
    cols = np.broadcast_to(mesh.elements[:, None, :], (n_e, dim, dim + 1)).ravel()
    matrix = _coo_to_csr_dedup(rows, cols, grads.ravel(), (dim * n_e, mesh.n_nodes))
    return ElementGradientOperator(mesh=mesh, grads=grads, volumes=volumes,
                                   matrix=matrix)


def element_gradients(mesh: Mesh, u) -> np.ndarray:
    """Gradient of the P1 interpolant of nodal field u on each element."""
    op = mesh if isinstance(mesh, ElementGradientOperator) else element_gradient_operator(mesh)
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (op.mesh.n_nodes,):
        raise ValueError(f"expected nodal field of length {op.mesh.n_nodes}")
    return np.einsum("edi,ei->ed", op.grads, u[op.mesh.elements])


def assemble_stiffness(mesh: Mesh) -> AssembledOperator:
    """A_ij = integral of grad(phi_i) . grad(phi_j); symmetric PSD,
    constants in the kernel. u^T A u is the exact Dirichlet energy
    integral of the P1 interpolant (no 1/2 factor)."""
    grads, volumes = _shape_gradients(mesh)
    local = np.einsum("edi,edj->eij", grads, grads) * volumes[:, None, None]
    n_loc = mesh.dim + 1
    rows = np.repeat(mesh.elements, n_loc, axis=1).ravel()
    cols = np.tile(mesh.elements, (1, n_loc)).ravel()
    matrix = _coo_to_csr_dedup(rows, cols, local.ravel(),
                               (mesh.n_nodes, mesh.n_nodes))
    return AssembledOperator(matrix=matrix, symmetric=True)


def assemble_elastic_stiffness(mesh: Mesh, lam: float, mu: float) -> AssembledOperator:
    """Linear elasticity stiffness for the constitutive law
    sigma = lam tr(eps) I + 2 mu eps.

    u^T K u = integral of lam tr(eps)^2 + 2 mu eps:eps for the P1 interpolant.
    Dof layout is node-major interleaved: dof(node i, component a) = i*dim + a.
    """
    lam, mu = float(lam), float(mu)
    if mu <= 0.0 or lam < 0.0:
        raise ValueError(f"need mu > 0 and lam >= 0, got lam={lam}, mu={mu}")
    grads, volumes = _shape_gradients(mesh)
    dim = mesh.dim
    # K_loc[(i,a),(j,b)] = |K| (lam g_a^i g_b^j + mu (g_b^i g_a^j + delta_ab g^i.g^j))
    term_lam = lam * np.einsum("eai,ebj->eiajb", grads, grads)
    term_mu1 = mu * np.einsum("ebi,eaj->eiajb", grads, grads)
    dots = np.einsum("edi,edj->eij", grads, grads)
    eye = np.eye(dim)
    term_mu2 = mu * np.einsum("eij,ab->eiajb", dots, eye)
    local = (term_lam + term_mu1 + term_mu2) * volumes[:, None, None, None, None]

    dofs = (mesh.elements[:, :, None] * dim + np.arange(dim)[None, None, :])
    dofs = dofs.reshape(mesh.n_elements, -1)  # (n_e, (dim+1)*dim)
    n_loc = dofs.shape[1]
    rows = np.repeat(dofs, n_loc, axis=1).ravel()
    cols = np.tile(dofs, (1, n_loc)).ravel()
    n = dim * mesh.n_nodes
    matrix = _coo_to_csr_dedup(rows, cols, local.reshape(mesh.n_elements, n_loc, n_loc).ravel(),
                               (n, n))
    return AssembledOperator(matrix=matrix, symmetric=True)


# exact P1 facet mass blocks
_SEGMENT_MASS = np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0
_TRIANGLE_MASS = np.array([[2.0, 1.0, 1.0],
                           [1.0, 2.0, 1.0],
                           [1.0, 1.0, 2.0]]) / 12.0


def _facet_measures(mesh: Mesh, facets: np.ndarray) -> np.ndarray:
    pts = mesh.coords[facets]
    if mesh.dim == 2:
        return np.linalg.norm(pts[:, 1] - pts[:, 0], axis=1)
    cross = np.cross(pts[:, 1] - pts[:, 0], pts[:, 2] - pts[:, 0])
    return 0.5 * np.linalg.norm(cross, axis=1)


def assemble_boundary_mass(mesh: Mesh, tags=(TAG_GAMMA1, TAG_GAMMA2)) -> AssembledOperator:
    """B_ij = integral of phi_i phi_j over the facets carrying `tags`.

    Exact for P1 (segment block L/6 [[2,1],[1,2]], triangle block
    Area/12 [[2,1,1],[1,2,1],[1,1,2]]). Rows and columns of nodes not on a
    tagged facet are structurally zero.
    """
    if isinstance(tags, str):
        tags = (tags,)
    tags = tuple(tags)
    if not tags:
        raise ValueError("empty tag set")
    mask = np.isin(mesh.boundary_tags, list(tags))
    if not mask.any():
        raise ValueError(f"no boundary facets carry tags {tags}")
    facets = mesh.boundary_facets[mask]
    measures = _facet_measures(mesh, facets)
    block = _SEGMENT_MASS if mesh.dim == 2 else _TRIANGLE_MASS
    local = measures[:, None, None] * block[None, :, :]
    n_loc = mesh.dim
    rows = np.repeat(facets, n_loc, axis=1).ravel()
    cols = np.tile(facets, (1, n_loc)).ravel()
    matrix = _coo_to_csr_dedup(rows, cols, local.ravel(),
                               (mesh.n_nodes, mesh.n_nodes))
    return AssembledOperator(matrix=matrix, symmetric=True)


def vector_boundary_mass(scalar_op: AssembledOperator, dim: int) -> AssembledOperator:
    """Boundary mass acting per component on interleaved vector dofs."""
    matrix = sp.kron(scalar_op.matrix, sp.identity(dim, format="csr"), format="csr")
    return AssembledOperator(matrix=matrix, symmetric=scalar_op.symmetric)


def as_handle(op) -> LinearOperatorHandle:
    """Wrap an assembled or element-gradient operator as a differentiable handle."""
    if isinstance(op, ElementGradientOperator):
        matrix = op.matrix
        symmetric = False
    elif isinstance(op, AssembledOperator):
        matrix = op.matrix
        symmetric = op.symmetric
    else:
        raise TypeError(f"cannot wrap {type(op).__name__} as a linear operator")
    n_rows, n_cols = matrix.shape
    if symmetric:
        apply = lambda v: matrix @ v
        return LinearOperatorHandle(n_rows, n_cols, apply, apply)
    transpose = matrix.T.tocsr()
    return LinearOperatorHandle(n_rows, n_cols,
                                lambda v: matrix @ v,
                                lambda w: transpose @ w)


def dump_matrix(op, path) -> None:
    """Debug dump in coordinate text format: one 'row col value' per line."""
    matrix = op.matrix if isinstance(op, (AssembledOperator, ElementGradientOperator)) else op
    coo = sp.coo_matrix(matrix)
    order = np.lexsort((coo.col, coo.row))
    with open(path, "w", encoding="utf-8") as fh:
        for r, c, v in zip(coo.row[order], coo.col[order], coo.data[order]):
            fh.write(f"{r} {c} {v!r}\n")
