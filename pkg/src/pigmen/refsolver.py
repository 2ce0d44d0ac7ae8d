"""Classical FEM reference solutions and the noisy input-field generator.

The reference solver provides the ground-truth fields the models train
against: a P1 Galerkin solve with Dirichlet conditions eliminated by
row/column reduction and the reduced SPD system solved by diagonally
preconditioned conjugate gradients to a 1e-10 relative residual.

The noisy field imitates what a very coarse upstream simulation would
deliver: seeded Gaussian noise, smoothed by a few rounds of graph-neighbor
averaging (coarse-solve error is spatially correlated), rescaled to an exact
relative L1 error level, added to the true solution.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from . import femkernel as fem
from .mesh import Mesh, undirected_edges

CG_TOL = 1e-10


class ConvergenceError(RuntimeError):
    """Conjugate gradients failed to reach the target residual."""


def _pcg(matrix: sp.csr_matrix, rhs: np.ndarray, tol: float = CG_TOL,
         max_iter: int | None = None) -> np.ndarray:
    """Diagonally preconditioned CG for SPD systems; deterministic."""
    n = rhs.shape[0]
    if max_iter is None:
        max_iter = 10 * n
    rhs_norm = np.linalg.norm(rhs)
    if rhs_norm == 0.0:
        return np.zeros(n)
    diag = matrix.diagonal().copy()
    diag[diag <= 0.0] = 1.0
    x = np.zeros(n)
    r = rhs.copy()
    z = r / diag
    p = z.copy()
    rz = float(r @ z)
    for _ in range(max_iter):
        if np.linalg.norm(r) <= tol * rhs_norm:
            return x
        ap = matrix @ p
        alpha = rz / float(p @ ap)
        x += alpha * p
        r -= alpha * ap
        z = r / diag
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    if np.linalg.norm(r) <= tol * rhs_norm:
        return x
    raise ConvergenceError(
        f"CG stalled at relative residual {np.linalg.norm(r) / rhs_norm:.3e} "
        f"after {max_iter} iterations")


def _constrained_solve(matrix: sp.csr_matrix, constrained: np.ndarray,
                       values: np.ndarray) -> np.ndarray:
    """Solve matrix @ u = 0 with u fixed on `constrained` dofs (elimination)."""
    n = matrix.shape[0]
    if constrained.size == 0:
        raise ValueError("no Dirichlet dofs: the system is singular")
    free = np.setdiff1d(np.arange(n), constrained, assume_unique=False)
    u = np.zeros(n)
    u[constrained] = values
    if free.size == 0:
        return u
    a_ff = matrix[free][:, free].tocsr()
    rhs = -(matrix[free][:, constrained] @ values)
    u[free] = _pcg(a_ff, rhs)
    return u


def _dirichlet_dofs(mesh: Mesh, bc: dict, k: int):
    """Constrained dof indices and values for a per-tag boundary map."""
    dofs, values = [], []
    for tag in sorted(bc):
        nodes = mesh.nodes_with_tag(tag)
        if nodes.size == 0:
            raise ValueError(f"boundary map references tag {tag!r} with no facets")
        val = np.broadcast_to(np.asarray(bc[tag], dtype=np.float64), (k,))
        for comp in range(k):
            dofs.append(nodes * k + comp)
            values.append(np.full(nodes.shape[0], val[comp]))
    dofs = np.concatenate(dofs)
    values = np.concatenate(values)
    order = np.argsort(dofs, kind="stable")
    return dofs[order], values[order]


def solve_laplace(mesh: Mesh, bc: dict) -> np.ndarray:
    """P1 Galerkin solution of the Laplace problem with Dirichlet data `bc`
    (tag -> value) and natural conditions elsewhere."""
    stiffness = fem.assemble_stiffness(mesh)
    dofs, values = _dirichlet_dofs(mesh, bc, 1)
    return _constrained_solve(stiffness.matrix, dofs, values)


def solve_elasticity(mesh: Mesh, bc: dict, lam: float = 1.0,
                     mu: float = 1.0) -> np.ndarray:
    """P1 Galerkin solution of linear elasticity; bc maps tag -> displacement
    vector. Returns an (n_nodes, dim) field."""
    stiffness = fem.assemble_elastic_stiffness(mesh, lam, mu)
    dofs, values = _dirichlet_dofs(mesh, bc, mesh.dim)
    u = _constrained_solve(stiffness.matrix, dofs, values)
    return u.reshape(mesh.n_nodes, mesh.dim)


def system_residual(matrix: sp.csr_matrix, u: np.ndarray, constrained: np.ndarray) -> float:
    """Relative Euclidean residual of the reduced system A_ff u_f = -A_fc u_c."""
    free_mask = np.ones(matrix.shape[0], dtype=bool)
    free_mask[constrained] = False
    rhs = -(matrix @ np.where(free_mask, 0.0, u))[free_mask]
    residual = (matrix @ u)[free_mask]
    return float(np.linalg.norm(residual) / max(np.linalg.norm(rhs), 1e-300))


def make_noisy_input(mesh: Mesh, u_star: np.ndarray, level: float = 0.2,
                     smoothing_steps: int = 5, seed: int = 0) -> np.ndarray:
    """Perturb u_star with smoothed, seeded noise at an exact relative L1 level.

    The construction is: standard-normal noise per entry, `smoothing_steps`
    rounds of neighbor averaging over the mesh graph, then a rescale so that
    relative_error(phi, u_star, l1) == level up to rounding.
    """
    if level < 0.0:
        raise ValueError("noise level must be >= 0")
    u_star = np.asarray(u_star, dtype=np.float64)
    ref_norm = np.abs(u_star).sum()
    if ref_norm == 0.0:
        raise ValueError("reference field has zero norm")
    if level == 0.0:
        return u_star.copy()

    rng = np.random.default_rng(seed)
    flat = u_star.reshape(u_star.shape[0], -1)
    noise = rng.standard_normal(flat.shape)

    edges = undirected_edges(mesh)
    n = mesh.n_nodes
    ones = np.ones(edges.shape[0])
    adj = sp.csr_matrix((ones, (edges[:, 0], edges[:, 1])), shape=(n, n))
    adj = adj + adj.T
    degree = np.asarray(adj.sum(axis=1)).ravel()
    for _ in range(int(smoothing_steps)):
        noise = (noise + adj @ noise) / (1.0 + degree)[:, None]

    noise_norm = np.abs(noise).sum()
    if noise_norm == 0.0:
        raise ValueError("smoothed noise vanished; cannot calibrate level")
    phi = flat + (level * ref_norm / noise_norm) * noise
    return phi.reshape(u_star.shape)


# ---------------------------------------------------------------------------
# nodal field file format


FIELD_FORMAT_VERSION = 1


class FieldFormatError(ValueError):
    pass


def save_field(values: np.ndarray, path) -> None:
    """Write a nodal field file; full float precision, one node per line."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    if values.ndim != 2:
        raise ValueError("field must be (n_nodes,) or (n_nodes, k)")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"pigfield {FIELD_FORMAT_VERSION} {values.shape[0]} {values.shape[1]}\n")
        for row in values:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def load_field(path) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise FieldFormatError(f"{path}: empty field file")
    parts = lines[0].split()
    if len(parts) != 4 or parts[0] != "pigfield":
        raise FieldFormatError(f"{path}: expected 'pigfield <version> <n> <k>' header")
    version, n, k = int(parts[1]), int(parts[2]), int(parts[3])
    if version != FIELD_FORMAT_VERSION:
        raise FieldFormatError(f"{path}: unsupported field format version {version}")
    if len(lines) - 1 != n:
        raise FieldFormatError(f"{path}: header promises {n} rows, found {len(lines) - 1}")
    values = np.empty((n, k))
    for i, line in enumerate(lines[1:]):
        row = line.split()
        if len(row) != k:
            raise FieldFormatError(f"{path}: row {i} has {len(row)} values, expected {k}")
        values[i] = [float(v) for v in row]
    return values
