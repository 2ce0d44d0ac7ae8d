"""Energy functionals, the boundary-constrained Lagrangian, and the hybrid loss.

The Lagrangian is L(u, lambda) = E(u) + integral over Gamma_D of
lambda (u - u_D) dS with E the (unhalved) quadratic energy u^T A u. Because
the energies are quadratic, the stationarity conditions are linear-operator
expressions and are evaluated in closed form on the tape:

    dL/du      = 2 A u + B^T lambda
    dL/dlambda = B (u - u_D)

so no nested differentiation is ever needed. The training loss is the sum of
the squared Euclidean norms of both residuals plus a mean-absolute-error data
term against the reference solution.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import femkernel as fem
from .mesh import Mesh, TAG_GAMMA1, TAG_GAMMA2

KIND_ELECTROSTATIC = "electrostatic"
KIND_ELASTICITY2D = "elasticity2d"


@dataclass(frozen=True)
class PhysicsCase:
    """A PDE problem bound to a mesh with ready-to-apply operators.

    For the electrostatic case the unknown is one scalar per node; for 2D
    elasticity it is an interleaved displacement vector (dof = node*dim + comp).
    dirichlet_values is the (n_nodes, k) target field, zero off Gamma_D.
    """

    kind: str
    mesh: Mesh
    n_channels: int
    stiffness: fem.AssembledOperator
    boundary_mass: fem.AssembledOperator
    stiffness_handle: ad.LinearOperatorHandle
    boundary_handle: ad.LinearOperatorHandle
    boundary_handle_t: ad.LinearOperatorHandle
    dirichlet_values: np.ndarray
    lam: float = 0.0
    mu: float = 0.0

    @property
    def n_dofs(self) -> int:
        return self.mesh.n_nodes * self.n_channels

    @property
    def dirichlet_flat(self) -> np.ndarray:
        return self.dirichlet_values.reshape(-1)


@dataclass
class LossReport:
    stat_u: float
    stat_lambda: float
    data: float

    @property
    def total(self) -> float:
        return self.stat_u + self.stat_lambda + self.data


def _dirichlet_field(mesh: Mesh, bc: dict, k: int) -> np.ndarray:
    values = np.zeros((mesh.n_nodes, k))
    for tag, val in bc.items():
        nodes = mesh.nodes_with_tag(tag)
        values[nodes] = np.asarray(val, dtype=np.float64)
    return values


def make_electrostatic_case(mesh: Mesh, bc: dict | None = None) -> PhysicsCase:
    """Electric-potential problem; default boundary values 0 on Gamma1 and
    0.01 on Gamma2."""
    if bc is None:
        bc = {TAG_GAMMA1: 0.0, TAG_GAMMA2: 0.01}
    stiffness = fem.assemble_stiffness(mesh)
    boundary = fem.assemble_boundary_mass(mesh, tuple(bc.keys()))
    b_handle = fem.as_handle(boundary)
    return PhysicsCase(
        kind=KIND_ELECTROSTATIC, mesh=mesh, n_channels=1,
        stiffness=stiffness, boundary_mass=boundary,
        stiffness_handle=fem.as_handle(stiffness),
        boundary_handle=b_handle,
        boundary_handle_t=ad.transpose_handle(b_handle),
        dirichlet_values=_dirichlet_field(mesh, bc, 1))


def make_elasticity_case(mesh: Mesh, bc: dict | None = None,
                         lam: float = 1.0, mu: float = 1.0) -> PhysicsCase:
    """Plane linear elasticity; default boundary displacements (1,0) on
    Gamma1 and (-1,0) on Gamma2, with unit Lame parameters."""
    if mesh.dim != 2:
        raise ValueError("elasticity case is two-dimensional")
    if bc is None:
        bc = {TAG_GAMMA1: (1.0, 0.0), TAG_GAMMA2: (-1.0, 0.0)}
    stiffness = fem.assemble_elastic_stiffness(mesh, lam, mu)
    scalar_mass = fem.assemble_boundary_mass(mesh, tuple(bc.keys()))
    boundary = fem.vector_boundary_mass(scalar_mass, mesh.dim)
    b_handle = fem.as_handle(boundary)
    return PhysicsCase(
        kind=KIND_ELASTICITY2D, mesh=mesh, n_channels=mesh.dim,
        stiffness=stiffness, boundary_mass=boundary,
        stiffness_handle=fem.as_handle(stiffness),
        boundary_handle=b_handle,
        boundary_handle_t=ad.transpose_handle(b_handle),
        dirichlet_values=_dirichlet_field(mesh, bc, mesh.dim),
        lam=float(lam), mu=float(mu))


def _as_flat(tape: ad.Tape, case: PhysicsCase, value: ad.Value) -> ad.Value:
    if value.data.ndim == 2:
        value = ad.reshape(tape, value, (-1,))
    if value.data.shape != (case.n_dofs,):
        raise ad.ShapeMismatchError(
            f"field has shape {value.data.shape}, case needs {case.n_dofs} dofs")
    return value


def energy(tape: ad.Tape, case: PhysicsCase, u: ad.Value) -> ad.Value:
    """Quadratic form u^T A u, differentiable through the operator handle."""
    u = _as_flat(tape, case, u)
    au = ad.apply_linear_operator(tape, case.stiffness_handle, u)
    return ad.reduce_sum(tape, ad.mul(tape, u, au))


def stationarity_residuals(tape: ad.Tape, case: PhysicsCase,
                           u: ad.Value, lam: ad.Value):
    """Closed-form dL/du and dL/dlambda as tape-recorded operator applications."""
    u = _as_flat(tape, case, u)
    lam = _as_flat(tape, case, lam)
    au = ad.apply_linear_operator(tape, case.stiffness_handle, u)
    bt_lam = ad.apply_linear_operator(tape, case.boundary_handle_t, lam)
    r_u = ad.add(tape, ad.scale(tape, au, 2.0), bt_lam)
    mismatch = ad.sub(tape, u, tape.constant(case.dirichlet_flat))
    r_lambda = ad.apply_linear_operator(tape, case.boundary_handle, mismatch)
    return r_u, r_lambda


def hybrid_loss(tape: ad.Tape, case: PhysicsCase, u_theta: ad.Value,
                lambda_theta: ad.Value, u_true: np.ndarray,
                physics_weight: float = 1.0, data_weight: float = 1.0):
    """Total loss ||dL/du||^2 + ||dL/dlambda||^2 + MAE(u_true, u_theta).

    The MAE is averaged over nodes and summed over field components. Weights
    default to 1 (no balancing hyperparameter); a weight of exactly 0 skips
    the corresponding terms entirely.
    """
    u_flat = _as_flat(tape, case, u_theta)
    u_true = np.asarray(u_true, dtype=np.float64).reshape(-1)
    if u_true.shape != (case.n_dofs,):
        raise ad.ShapeMismatchError(
            f"u_true has {u_true.size} entries, case needs {case.n_dofs}")

    terms = []
    stat_u_val = 0.0
    stat_lambda_val = 0.0
    if physics_weight != 0.0:
        r_u, r_lambda = stationarity_residuals(tape, case, u_theta, lambda_theta)
        stat_u = ad.scale(tape, ad.reduce_sum(tape, ad.square(tape, r_u)),
                          physics_weight)
        stat_lambda = ad.scale(tape, ad.reduce_sum(tape, ad.square(tape, r_lambda)),
                               physics_weight)
        terms.extend([stat_u, stat_lambda])
        stat_u_val = float(stat_u.data)
        stat_lambda_val = float(stat_lambda.data)

    data_val = 0.0
    if data_weight != 0.0:
        diff = ad.sub(tape, u_flat, tape.constant(u_true))
        data = ad.scale(tape, ad.reduce_sum(tape, ad.absolute(tape, diff)),
                        data_weight / case.mesh.n_nodes)
        terms.append(data)
        data_val = float(data.data)

    total = terms[0]
    for term in terms[1:]:
        total = ad.add(tape, total, term)
    report = LossReport(stat_u=stat_u_val, stat_lambda=stat_lambda_val, data=data_val)
    return total, report


# ---------------------------------------------------------------------------
# plain-numpy metrics


def relative_error(u_pred, u_true, norm: str = "l1") -> float:
    """||u_pred - u_true|| / ||u_true|| in the L1 or L2 vector norm."""
    u_pred = np.asarray(u_pred, dtype=np.float64).reshape(-1)
    u_true = np.asarray(u_true, dtype=np.float64).reshape(-1)
    if u_pred.shape != u_true.shape:
        raise ValueError(f"shape mismatch {u_pred.shape} vs {u_true.shape}")
    if norm == "l1":
        denom = np.abs(u_true).sum()
        num = np.abs(u_pred - u_true).sum()
    elif norm == "l2":
        denom = np.sqrt((u_true ** 2).sum())
        num = np.sqrt(((u_pred - u_true) ** 2).sum())
    else:
        raise ValueError(f"unknown norm {norm!r}")
    if denom == 0.0:
        raise ValueError("reference field has zero norm")
    return float(num / denom)


def relative_mse(u_pred, u_true) -> float:
    """Relative mean squared error: sum of squared error / sum of squared truth."""
    return relative_error(u_pred, u_true, norm="l2") ** 2
