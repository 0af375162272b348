"""Bilinear Q1 assembly on structured rectangles and the fine reference solvers.

All element integrals use the 2x2 Gauss rule on the unit reference
square with coefficients held constant per cell.  The same kernels
serve the global fine grid, the oversampled regions of the cell
problems (any nx-by-ny rectangle of square cells), and, with the block
width as spacing, the coarse grid.
"""

import numpy as np
import scipy.sparse as sp

from . import linalg
from .grid import boundary_node_table, cell_node_table, node_coord_table

__all__ = [
    "AssembledOperator",
    "FineSolution",
    "assemble_stiffness",
    "assemble_mass",
    "assemble_convection",
    "solve_flow_fine",
    "prepare_transport_fine",
    "step_transport_fine",
    "block_average",
]

# 2x2 Gauss rule on [0,1]^2: points (ksi, eta), weight 1/4 each
_G0 = 0.5 - 0.5 / np.sqrt(3.0)
_G1 = 0.5 + 0.5 / np.sqrt(3.0)
QUAD_POINTS = np.array([(_G0, _G0), (_G1, _G0), (_G0, _G1), (_G1, _G1)])
QUAD_WEIGHT = 0.25


def _shape_values(points):
    ksi, eta = points[:, 0], points[:, 1]
    return np.column_stack([(1 - ksi) * (1 - eta), ksi * (1 - eta),
                            ksi * eta, (1 - ksi) * eta])


def _shape_gradients(points):
    ksi, eta = points[:, 0], points[:, 1]
    g = np.empty((len(points), 4, 2))
    g[:, 0] = np.column_stack([-(1 - eta), -(1 - ksi)])
    g[:, 1] = np.column_stack([(1 - eta), -ksi])
    g[:, 2] = np.column_stack([eta, ksi])
    g[:, 3] = np.column_stack([-eta, (1 - ksi)])
    return g


# shape values N[q, a] and reference gradients GHAT[q, a, d] at the rule points
N_QP = _shape_values(QUAD_POINTS)
GHAT_QP = _shape_gradients(QUAD_POINTS)

# unit element matrices: stiffness is h-independent, mass scales with h^2
S_UNIT = QUAD_WEIGHT * np.einsum("qad,qbd->ab", GHAT_QP, GHAT_QP)
M_UNIT = QUAD_WEIGHT * np.einsum("qa,qb->ab", N_QP, N_QP)


def _scatter(nodes, elem, n_nodes):
    """Sum per-cell 4x4 element matrices into a global CSR matrix."""
    rows = np.repeat(nodes, 4, axis=1).ravel()
    cols = np.tile(nodes, (1, 4)).ravel()
    coo = sp.coo_matrix((elem.ravel(), (rows, cols)), shape=(n_nodes, n_nodes))
    csr = coo.tocsr()
    csr.sum_duplicates()
    csr.sort_indices()
    return csr


def stiffness_csr(nx, ny, h, coeff):
    """kappa-weighted stiffness matrix of an nx-by-ny rectangle of cells."""
    nodes = cell_node_table(nx, ny)
    elem = np.asarray(coeff, dtype=float)[:, None, None] * S_UNIT
    return _scatter(nodes, elem, (nx + 1) * (ny + 1))


def mass_csr(nx, ny, h, coeff):
    """Coefficient-weighted mass matrix."""
    nodes = cell_node_table(nx, ny)
    elem = (h * h) * np.asarray(coeff, dtype=float)[:, None, None] * M_UNIT
    return _scatter(nodes, elem, (nx + 1) * (ny + 1))


def pressure_qp_velocity(nx, ny, h, kappa, pressure):
    """Darcy velocity -kappa grad(p_h) at the rule points of every cell.

    Returns
    -------
    ndarray of shape (n_cells, 4, 2), quadrature points in QUAD_POINTS order.
    """
    nodes = cell_node_table(nx, ny)
    p4 = np.asarray(pressure, dtype=float)[nodes]
    gradp = np.einsum("ca,qad->cqd", p4, GHAT_QP) / h
    return -np.asarray(kappa, dtype=float)[:, None, None] * gradp


def convection_csr_from_velocity(nx, ny, h, u_qp):
    """Convection matrix for a velocity given per cell and rule point.

    Implements the nonconservative form: entry (a, b) accumulates
    w * N_a(x_q) * (u(x_q) . grad N_b(x_q)) * h^2 over cells and points.
    """
    nodes = cell_node_table(nx, ny)
    # grad N_b = GHAT/h and the h^2 Jacobian leave a single factor h
    udotg = np.einsum("cqd,qbd->cqb", u_qp, GHAT_QP)
    elem = QUAD_WEIGHT * h * np.einsum("qa,cqb->cab", N_QP, udotg)
    return _scatter(nodes, elem, (nx + 1) * (ny + 1))


def convection_csr(nx, ny, h, kappa, pressure):
    return convection_csr_from_velocity(
        nx, ny, h, pressure_qp_velocity(nx, ny, h, kappa, pressure))


def load_vector(nx, ny, h, cell_values):
    """Load vector of a per-cell-constant source (integral of f * N_a)."""
    nodes = cell_node_table(nx, ny)
    b = np.zeros((nx + 1) * (ny + 1))
    contrib = np.asarray(cell_values, dtype=float) * (h * h * 0.25)
    np.add.at(b, nodes.ravel(), np.repeat(contrib, 4))
    return b


class AssembledOperator:
    """A global FEM matrix with its kind and coefficient provenance."""

    KINDS = ("stiffness", "mass", "convection")

    def __init__(self, matrix, kind, provenance=""):
        if kind not in self.KINDS:
            raise ValueError("unknown operator kind %r" % kind)
        self.matrix = matrix if isinstance(matrix, linalg.SparseMatrix) \
            else linalg.SparseMatrix(matrix)
        self.kind = kind
        self.provenance = provenance


def assemble_stiffness(grid, coeff):
    """Assemble the kappa-weighted stiffness operator on the fine grid."""
    vals = coeff.values if hasattr(coeff, "values") else np.asarray(coeff)
    return AssembledOperator(stiffness_csr(grid.n, grid.n, grid.h, vals),
                             "stiffness", "cellwise coefficient")


def assemble_mass(grid, coeff):
    """Assemble the coefficient-weighted mass operator on the fine grid."""
    vals = coeff.values if hasattr(coeff, "values") else np.asarray(coeff)
    return AssembledOperator(mass_csr(grid.n, grid.n, grid.h, vals),
                             "mass", "cellwise coefficient")


def assemble_convection(grid, kappa, pressure):
    """Assemble (u . grad c, v) with u = -kappa grad(p_h) per quadrature point."""
    vals = kappa.values if hasattr(kappa, "values") else np.asarray(kappa)
    return AssembledOperator(convection_csr(grid.n, grid.n, grid.h, vals, pressure),
                             "convection", "velocity from Q1 pressure interpolant")


class FineSolution:
    """Nodal solution on the fine grid, optionally a time series.

    Attributes
    ----------
    values : ndarray
        Nodal vector at the latest time.
    residual_norm : float
    snapshots : dict
        time -> nodal vector, filled by the transport driver.
    """

    def __init__(self, values, residual_norm=0.0, snapshots=None):
        self.values = values
        self.residual_norm = float(residual_norm)
        self.snapshots = {} if snapshots is None else snapshots


class DirichletSystem:
    """Square system with boundary nodes eliminated symmetrically."""

    def __init__(self, A_csr, nodes, values):
        n = A_csr.shape[0]
        self.n = n
        self.nodes = np.asarray(nodes, dtype=np.int64)
        self.values = np.asarray(values, dtype=float)
        mask = np.ones(n, dtype=bool)
        mask[self.nodes] = False
        self.interior = np.flatnonzero(mask)
        csr = sp.csr_matrix(A_csr)
        self.A_ii = csr[self.interior][:, self.interior].tocsc()
        self.A_id = csr[self.interior][:, self.nodes].tocsr()
        self._factor = None

    def factor(self):
        if self._factor is None:
            self._factor = linalg.factorize(self.A_ii)
        return self._factor

    def solve(self, b_full):
        """Solve for the full nodal vector given the full right-hand side."""
        rhs = b_full[self.interior] - self.A_id @ self.values
        x_i, rnorm = self.factor().solve_with_residual(rhs)
        x = np.empty(self.n)
        x[self.interior] = x_i
        x[self.nodes] = self.values
        return x, rnorm


def _pressure_dirichlet(grid, bc):
    nodes = boundary_node_table(grid.n, grid.n)
    coords = node_coord_table(grid.n, grid.n, grid.h)[nodes]
    return nodes, bc.pressure_values(coords)


def solve_flow_fine(grid, kappa, g_cells, bc):
    """Solve the fine-scale pressure equation.

    Parameters
    ----------
    grid : FineGrid
    kappa : CellField or ndarray
    g_cells : ndarray
        Source sampled per fine cell.
    bc : BoundaryCase

    Returns
    -------
    FineSolution
    """
    vals = kappa.values if hasattr(kappa, "values") else np.asarray(kappa)
    A = stiffness_csr(grid.n, grid.n, grid.h, vals)
    b = load_vector(grid.n, grid.n, grid.h, g_cells)
    nodes, bvals = _pressure_dirichlet(grid, bc)
    system = DirichletSystem(A, nodes, bvals)
    p, rnorm = system.solve(b)
    return FineSolution(p, rnorm)


class TransportOperators:
    """Constant-in-time transport system, factorized once.

    Holds (M/tau + C + A_D) with the boundary treatment of the case and
    the pieces needed to advance one implicit Euler step.
    """

    def __init__(self, grid, D, phi, kappa, pressure, tau, h_cells, bc):
        if tau <= 0.0:
            raise ValueError("time step must be positive")
        dvals = D.values if hasattr(D, "values") else np.asarray(D)
        pvals = phi.values if hasattr(phi, "values") else np.asarray(phi)
        kvals = kappa.values if hasattr(kappa, "values") else np.asarray(kappa)
        n = grid.n
        self.tau = float(tau)
        self.mass = mass_csr(n, n, grid.h, pvals)
        self.system = (self.mass / tau
                       + convection_csr(n, n, grid.h, kvals, pressure)
                       + stiffness_csr(n, n, grid.h, dvals))
        self.load = load_vector(n, n, grid.h, h_cells)
        if bc.concentration_bc == "dirichlet_zero":
            nodes = boundary_node_table(n, n)
            self._dirichlet = DirichletSystem(
                self.system, nodes, np.zeros(nodes.size))
            self._factor = None
        else:
            self._dirichlet = None
            self._factor = linalg.factorize(sp.csc_matrix(self.system))

    def step(self, c):
        """Advance one implicit Euler step from nodal state c."""
        rhs = self.mass @ (c / self.tau) + self.load
        if self._dirichlet is not None:
            c_next, _ = self._dirichlet.solve(rhs)
            return c_next
        return self._factor.solve(rhs)


def prepare_transport_fine(grid, D, phi, kappa, pressure, tau, h_cells, bc):
    """Assemble and factorize the fine transport stepping operator."""
    return TransportOperators(grid, D, phi, kappa, pressure, tau, h_cells, bc)


def step_transport_fine(state, operators):
    """One implicit Euler step of the fine transport equation."""
    return operators.step(state)


def block_average(solution, coarse, continua, i):
    """Continuum-restricted block averages of a fine nodal field.

    For each coarse block, the integral of the Q1 interpolant over the
    cells labeled ``i`` divided by their area.  The integral of a
    bilinear function over a square cell is the cell area times the mean
    of its corner values, which the 2x2 Gauss rule reproduces exactly.

    Parameters
    ----------
    solution : ndarray
        Fine nodal vector.
    coarse : CoarseGrid
    continua : ContinuumMap
    i : int
        Continuum label (1-based).

    Returns
    -------
    ndarray of shape (n_blocks,)
    """
    fine = coarse.fine
    nodes = cell_node_table(fine.n, fine.n)
    cellmeans = np.asarray(solution, dtype=float)[nodes].mean(axis=1)
    mask = continua.indicator(i)
    block = coarse.block_of_cell()
    sums = np.bincount(block[mask], weights=cellmeans[mask],
                       minlength=coarse.n_blocks)
    counts = np.bincount(block[mask], minlength=coarse.n_blocks)
    if np.any(counts == 0):
        missing = int(np.flatnonzero(counts == 0)[0])
        raise ValueError(
            "continuum %d has no cells in block %d" % (i, missing))
    return sums / counts
