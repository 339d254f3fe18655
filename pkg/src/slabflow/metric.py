"""Metric tensor fields from solution fields.

Gradient/Hessian recovery by repeated Galerkin (mass-matrix) projection,
the optimal-interpolation metric, metric intersection by simultaneous
reduction, and metric edge lengths.
"""

import numpy as np
from scipy import sparse

from .fields import NodalMetricField, NodalScalarField
from .mesh import signed_volumes

DIM = 3


class SolverError(Exception):
    pass


def p1_gradients(mesh):
    """Shape-function gradients (m, 4, 3) and volumes (m,) of all tets."""
    p = mesh.nodes[mesh.tets]
    T = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0], p[:, 3] - p[:, 0]], axis=1)
    Tinv = np.linalg.inv(T)
    g = np.empty((mesh.n_tets, 4, 3))
    g[:, 1:] = np.swapaxes(Tinv, 1, 2)
    g[:, 0] = -g[:, 1:].sum(axis=1)
    vols = signed_volumes(mesh.nodes, mesh.tets)
    return g, vols


def mass_matrix(mesh, vols=None):
    """Consistent P1 mass matrix (CSR)."""
    if vols is None:
        vols = signed_volumes(mesh.nodes, mesh.tets)
    m = mesh.n_tets
    Me = np.full((4, 4), 1.0 / 20.0)
    np.fill_diagonal(Me, 1.0 / 10.0)
    data = (vols[:, None, None] * Me).ravel()
    rows = np.repeat(mesh.tets, 4, axis=1).ravel()
    cols = np.tile(mesh.tets, (1, 4)).ravel()
    M = sparse.coo_matrix((data, (rows, cols)), shape=(mesh.n_nodes, mesh.n_nodes))
    return M.tocsr()


class MassProjector:
    """Repeated L2 projections onto P1 on a fixed mesh.

    Solves M x = b with preconditioned CG; the incomplete factorization is
    computed once and reused across right-hand sides.
    """

    def __init__(self, mesh, rtol=1e-10):
        from scipy.sparse.linalg import LinearOperator

        self.mesh = mesh
        self.rtol = rtol
        self.grads, self.vols = p1_gradients(mesh)
        self.M = mass_matrix(mesh, self.vols)
        # Jacobi keeps the preconditioner symmetric, which CG requires
        dinv = 1.0 / self.M.diagonal()
        n = mesh.n_nodes
        self.prec = LinearOperator((n, n), lambda x: dinv * x)

    def solve(self, b):
        from scipy.sparse.linalg import cg

        x, info = cg(
            self.M,
            b,
            rtol=self.rtol,
            atol=0.0,
            M=self.prec,
            maxiter=10 * self.mesh.n_nodes,
        )
        if info != 0:
            res = np.linalg.norm(self.M @ x - b) / max(np.linalg.norm(b), 1e-300)
            raise SolverError(f"mass-matrix CG did not converge (rel res {res:.2e})")
        return x

    def project_cellwise(self, cell_values):
        """Project piecewise-constant data (m,) or (m, k) onto nodes."""
        orig = np.asarray(cell_values, dtype=float)
        cv = orig.reshape(len(orig), -1)
        # rhs_i = sum_K vol_K/4 * c_K over tets containing node i
        w = self.vols[:, None] * cv / 4.0
        out = np.empty((self.mesh.n_nodes, cv.shape[1]))
        for k in range(cv.shape[1]):
            b = np.zeros(self.mesh.n_nodes)
            np.add.at(b, self.mesh.tets.ravel(), np.repeat(w[:, k], 4))
            out[:, k] = self.solve(b)
        return out if orig.ndim > 1 else out[:, 0]

    def gradient(self, values):
        """Nodal gradient (n, 3) of a nodal field by Galerkin projection."""
        cell_grad = np.einsum("mk,mkj->mj", values[self.mesh.tets], self.grads)
        return self.project_cellwise(cell_grad)


def recover_gradient(field: NodalScalarField, projector=None):
    """Nodal gradient of a P1 field as three scalar fields."""
    proj = projector or MassProjector(field.mesh)
    g = proj.gradient(field.values)
    return [NodalScalarField(field.mesh, g[:, j]) for j in range(DIM)]


def recover_hessian(field: NodalScalarField, projector=None):
    """Nodal symmetrized Hessian (n, 3, 3) by repeated gradient recovery."""
    proj = projector or MassProjector(field.mesh)
    g = proj.gradient(field.values)
    H = np.empty((field.mesh.n_nodes, DIM, DIM))
    for j in range(DIM):
        H[:, j, :] = proj.gradient(g[:, j])
    return 0.5 * (H + np.swapaxes(H, 1, 2))


def metric_from_hessian(H, sigma, q=2, h_min=1e-3, h_max=2.0, mesh=None):
    """Optimal-interpolation metric from a nodal Hessian array (n, 3, 3).

    Eigenvalues of H are made absolute, floored relative to the largest one,
    scaled by det^(-1/(2q+3)), divided by sigma and clamped into
    [1/h_max^2, 1/h_min^2].  Returns a NodalMetricField when mesh is given,
    otherwise the raw tensor array.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if q < 1:
        raise ValueError("q must be >= 1")
    H = np.asarray(H, dtype=float)
    single = H.ndim == 2
    if single:
        H = H[None]
    lam, V = np.linalg.eigh(0.5 * (H + np.swapaxes(H, 1, 2)))
    lam = np.abs(lam)
    top = lam.max(axis=1)
    floor = 1e-10 * np.where(top > 0.0, top, 1.0)
    lam = np.maximum(lam, floor[:, None])
    det = np.prod(lam, axis=1)
    scale = det ** (-1.0 / (2.0 * q + DIM))
    lam_base = lam * scale[:, None]
    # dividing the assembled tensor (not the eigenvalues) makes the sigma
    # prefactor law bitwise exact whenever no clamping occurs
    M = np.einsum("nij,nj,nkj->nik", V, lam_base, V)
    M = 0.5 * (M + np.swapaxes(M, 1, 2)) / sigma
    lo, hi = 1.0 / h_max**2, 1.0 / h_min**2
    lam_s = lam_base / sigma
    clamped = np.nonzero((lam_s.min(axis=1) < lo) | (lam_s.max(axis=1) > hi))[0]
    if len(clamped):
        lam_c = np.clip(lam_s[clamped], lo, hi)
        Mc = np.einsum("nij,nj,nkj->nik", V[clamped], lam_c, V[clamped])
        M[clamped] = 0.5 * (Mc + np.swapaxes(Mc, 1, 2))
    if single:
        return M[0]
    if mesh is not None:
        return NodalMetricField(mesh, M, check=False)
    return M


def spd_floor(tensors, eps_rel=1e-10):
    """Project tensors back to SPD by flooring eigenvalues."""
    t = 0.5 * (tensors + np.swapaxes(tensors, -1, -2))
    lam, V = np.linalg.eigh(t)
    top = np.abs(lam).max(axis=-1)
    floor = eps_rel * np.where(top > 0.0, top, 1.0)
    lam = np.maximum(lam, floor[..., None])
    return np.einsum("...ij,...j,...kj->...ik", V, lam, V)


def intersect_metrics(M1, M2):
    """Inner-ellipsoid intersection of two SPD tensor arrays (n, 3, 3).

    Simultaneous reduction: with P^T M1 P = I and P^T M2 P = Lambda, the
    result is (P^-T) max(I, Lambda) (P^-1); its unit ball is contained in
    both input unit balls.  Accepts and returns NodalMetricField as well.
    """
    wrap = isinstance(M1, NodalMetricField)
    mesh = M1.mesh if wrap else None
    A1 = M1.tensors if wrap else np.asarray(M1, dtype=float)
    A2 = M2.tensors if isinstance(M2, NodalMetricField) else np.asarray(M2, dtype=float)
    single = A1.ndim == 2
    if single:
        A1, A2 = A1[None], A2[None]
    try:
        L = np.linalg.cholesky(A1)
    except np.linalg.LinAlgError:
        raise ValueError("first metric is not positive-definite")
    Linv = np.linalg.inv(L)
    B = Linv @ A2 @ np.swapaxes(Linv, -1, -2)
    lam, U = np.linalg.eigh(0.5 * (B + np.swapaxes(B, -1, -2)))
    if np.min(lam) <= 0.0:
        raise ValueError("second metric is not positive-definite")
    lam = np.maximum(lam, 1.0)
    R = L @ np.einsum("...ij,...j,...kj->...ik", U, lam, U) @ np.swapaxes(L, -1, -2)
    R = 0.5 * (R + np.swapaxes(R, -1, -2))
    if single:
        return R[0]
    if wrap:
        return NodalMetricField(mesh, R, check=False)
    return R


def metric_edge_lengths(nodes, tensors, edges):
    """Metric lengths of edges using the arithmetic mean of endpoint tensors."""
    e = nodes[edges[:, 1]] - nodes[edges[:, 0]]
    Mbar = 0.5 * (tensors[edges[:, 0]] + tensors[edges[:, 1]])
    return np.sqrt(np.einsum("ki,kij,kj->k", e, Mbar, e))


def metric_edge_length(a, b, M: NodalMetricField):
    """Metric length of the single edge (a, b)."""
    edges = np.array([[a, b]])
    return float(metric_edge_lengths(M.mesh.nodes, M.tensors, edges)[0])
