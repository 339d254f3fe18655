"""P1 assembly and solves: pressure Poisson equation and SUPG saturation
transport on the timespace mesh.

The pressure equation uses the spatial-only gradient (x, y components) of
the 3D timespace elements; the saturation equation is pure convection with
timespace direction a = (vx, vy, 1), stabilized by streamline diffusion
with the Steiner-ellipsoid length projected along a.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import LinearOperator, cg, splu

from .fields import NodalScalarField
from .mesh import INLET, OUTER, T_BEGIN, steiner_extents
from .metric import p1_gradients


class SolveError(Exception):
    pass


@dataclass
class FlowParams:
    """Nondimensional physical parameters; viscosity is eta = exp(xi * phi)."""

    xi: float = 2.0

    def viscosity(self, phi):
        return np.exp(self.xi * np.asarray(phi))


@dataclass
class LinearSystem:
    matrix: sparse.csr_matrix
    rhs: np.ndarray
    dirichlet: dict = field(default_factory=dict)  # node -> value
    symmetric: bool = False

    def constrained(self):
        """Reduce to free unknowns; returns (A_ff, b_f, free, full_solution_seed)."""
        n = self.matrix.shape[0]
        fixed = np.fromiter(self.dirichlet.keys(), dtype=np.int64, count=len(self.dirichlet))
        vals = np.fromiter(self.dirichlet.values(), dtype=float, count=len(self.dirichlet))
        x = np.zeros(n)
        x[fixed] = vals
        free = np.ones(n, dtype=bool)
        free[fixed] = False
        A = self.matrix.tocsr()
        b = self.rhs - A @ x
        free_idx = np.nonzero(free)[0]
        A_ff = A[free_idx][:, free_idx]
        return A_ff, b[free_idx], free_idx, x


@dataclass
class ElementVelocity:
    """Per-tet spatial Darcy velocity and timespace transport direction."""

    spatial: np.ndarray  # (m, 2)
    timespace: np.ndarray  # (m, 3), last component exactly 1


def _scatter(mesh, ke):
    """Assemble per-element 4x4 blocks (m, 4, 4) into a CSR matrix."""
    rows = np.repeat(mesh.tets, 4, axis=1).ravel()
    cols = np.tile(mesh.tets, (1, 4)).ravel()
    A = sparse.coo_matrix(
        (ke.ravel(), (rows, cols)), shape=(mesh.n_nodes, mesh.n_nodes)
    )
    return A.tocsr()


def assemble_pressure(mesh, phi: NodalScalarField, params: FlowParams):
    """Pressure Poisson system on the timespace mesh, spatial gradient only.

    Element coefficient is 1/eta(mean phi); Dirichlet p=1 at INLET nodes and
    p=0 at OUTER nodes; natural conditions on the time faces.
    """
    grads, vols = p1_gradients(mesh)
    phibar = phi.values[mesh.tets].mean(axis=1)
    coeff = vols / params.viscosity(phibar)
    gs = grads[:, :, :2]
    ke = coeff[:, None, None] * np.einsum("mid,mjd->mij", gs, gs)
    A = _scatter(mesh, ke)
    rhs = np.zeros(mesh.n_nodes)
    dirichlet = {int(i): 0.0 for i in mesh.outer_nodes()}
    dirichlet.update({int(i): 1.0 for i in mesh.inlet_nodes()})
    return LinearSystem(A, rhs, dirichlet, symmetric=True)


def compute_velocity(mesh, p: NodalScalarField, phi: NodalScalarField, params):
    """Element Darcy velocity v = -(1/eta(mean phi)) * spatial grad p."""
    grads, _ = p1_gradients(mesh)
    gp = np.einsum("mk,mkd->md", p.values[mesh.tets], grads)[:, :2]
    phibar = phi.values[mesh.tets].mean(axis=1)
    v = -gp / params.viscosity(phibar)[:, None]
    a = np.concatenate([v, np.ones((mesh.n_tets, 1))], axis=1)
    return ElementVelocity(spatial=v, timespace=a)


def assemble_saturation(mesh, vel: ElementVelocity, dirichlet):
    """SUPG-stabilized timespace convection system for the saturation.

    dirichlet maps node -> value and must cover the inflow (INLET nodes and
    T_BEGIN nodes); no condition is applied on OUTER or T_END.
    """
    grads, vols = p1_gradients(mesh)
    a = vel.timespace
    adg = np.einsum("md,mkd->mk", a, grads)  # a . grad(phi_k), per element
    anorm = np.linalg.norm(a, axis=1)
    h = steiner_extents(mesh.nodes, mesh.tets, a)
    tau = h / (2.0 * anorm)
    # Galerkin: integral (a.grad phi_j) phi_i = V/4 * adg_j
    ke = vols[:, None, None] / 4.0 * adg[:, None, :] * np.ones((1, 4, 1))
    # SUPG: tau * V * adg_i adg_j
    ke = ke + (tau * vols)[:, None, None] * np.einsum("mi,mj->mij", adg, adg)
    A = _scatter(mesh, ke)
    rhs = np.zeros(mesh.n_nodes)
    return LinearSystem(A, rhs, dict(dirichlet), symmetric=False)


def inflow_dirichlet(mesh, inflow_values):
    """Dirichlet set for the saturation solve: T_BEGIN data plus phi=1 inlet."""
    d = {int(i): float(inflow_values[i]) for i in mesh.time_face_nodes(T_BEGIN)}
    d.update({int(i): 1.0 for i in mesh.inlet_nodes()})
    return d


def solve_direct(sys: LinearSystem):
    """Sparse LU solve of the constrained system."""
    A_ff, b_f, free_idx, x = sys.constrained()
    if A_ff.shape[0]:
        try:
            lu = splu(A_ff.tocsc())
        except RuntimeError as exc:
            raise SolveError(f"singular system: {exc}") from exc
        x[free_idx] = lu.solve(b_f)
        if not np.all(np.isfinite(x)):
            raise SolveError("singular system: LU produced non-finite values")
    return x


def solve_iterative(sys: LinearSystem, rtol=1e-10):
    """Jacobi-preconditioned CG on the constrained SPD system."""
    if not sys.symmetric:
        raise SolveError("iterative solve requires a symmetric system")
    A_ff, b_f, free_idx, x = sys.constrained()
    n = A_ff.shape[0]
    if n:
        dinv = 1.0 / A_ff.diagonal()
        prec = LinearOperator((n, n), lambda v: dinv * v)
        sol, info = cg(A_ff, b_f, rtol=rtol, atol=0.0, M=prec, maxiter=10 * n)
        if info != 0:
            res = np.linalg.norm(A_ff @ sol - b_f) / max(np.linalg.norm(b_f), 1e-300)
            raise SolveError(f"CG failed to reach rtol={rtol} (rel res {res:.2e})")
        x[free_idx] = sol
    return x


def residual_norm(sys: LinearSystem, x):
    """Relative residual of the constrained system at x."""
    A_ff, b_f, free_idx, _ = sys.constrained()
    r = A_ff @ x[free_idx] - b_f
    return float(np.linalg.norm(r) / max(np.linalg.norm(b_f), 1e-300))
