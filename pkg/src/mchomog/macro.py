"""Coarse-grid multicontinuum system: flow solve, transport stepping,
frozen block values, and downscaling back to the fine grid.

The coarse discretization is continuous Q1 on the block grid with the
hatted effective tensors constant per block.  Degrees of freedom are
laid out continuum-major: dof(i, node) = i * n_nodes + node.

Assembly pairs trial continuum i with test continuum j so that the
entry at (test dof, trial dof) accumulates

    gamma[i,j]/tau * M  +  sum_mn eta[i,m,j,n] K^mn
    + (1/eps) sum_m xi[i,j,m] G^m  +  (1/eps^2) Theta[i,j] M

with element matrices K^mn[a,b] = integral d_m N_b d_n N_a,
G^m[a,b] = integral (d_m N_b) N_a and M the Q1 mass matrix.
"""

import numpy as np
import scipy.sparse as sp

from . import linalg
from .fem import GHAT_QP, M_UNIT, N_QP, QUAD_WEIGHT, DirichletSystem
from .grid import cell_node_table

__all__ = [
    "MacroState",
    "MacroFlowSystem",
    "MacroTransportSystem",
    "assemble_macro_flow",
    "solve_macro_flow",
    "assemble_macro_transport",
    "step_macro_transport",
    "block_center_values",
    "initial_concentration",
    "source_moments",
    "downscale",
]

# element matrices on a coarse block: K_ELEM is H-free, G_ELEM carries H,
# the mass matrix carries H^2
K_ELEM = QUAD_WEIGHT * np.einsum("qbm,qan->mnab", GHAT_QP, GHAT_QP)
G_ELEM = QUAD_WEIGHT * np.einsum("qbm,qa->mab", GHAT_QP, N_QP)


class MacroState:
    """Macroscopic continuum fields and the frozen block values."""

    def __init__(self, P, C=None, t=0.0, P_blocks=None, gradP_blocks=None):
        self.P = P
        self.C = C
        self.t = float(t)
        self.P_blocks = P_blocks
        self.gradP_blocks = gradP_blocks


def _scatter_blocks(coarse, n, per_block_elem):
    """Accumulate (n_blocks, N, N, 4, 4) element contributions into the
    global (N*nn, N*nn) CSR matrix."""
    nn = coarse.n_nodes
    gl = coarse.block_nodes()
    rows_parts, cols_parts, vals_parts = [], [], []
    for j in range(n):
        for i in range(n):
            elem = per_block_elem[:, i, j]
            rows = j * nn + np.repeat(gl, 4, axis=1)
            cols = i * nn + np.tile(gl, (1, 4))
            rows_parts.append(rows.ravel())
            cols_parts.append(cols.ravel())
            vals_parts.append(elem.reshape(elem.shape[0], -1).ravel())
    coo = sp.coo_matrix(
        (np.concatenate(vals_parts),
         (np.concatenate(rows_parts), np.concatenate(cols_parts))),
        shape=(n * nn, n * nn))
    csr = coo.tocsr()
    csr.sum_duplicates()
    csr.sort_indices()
    return csr


def _block_load(coarse, n, moments):
    """Scatter per-block corner moments (n_blocks, N, 4) into a load vector."""
    nn = coarse.n_nodes
    gl = coarse.block_nodes()
    f = np.zeros(n * nn)
    for i in range(n):
        np.add.at(f, i * nn + gl.ravel(), moments[:, i, :].ravel())
    return f


def _boundary_dofs(coarse, n):
    bn = coarse.boundary_nodes()
    return np.concatenate([i * coarse.n_nodes + bn for i in range(n)])


class MacroFlowSystem:
    """Assembled coarse flow system with boundary values in place."""

    def __init__(self, coarse, n, matrix, load, bc):
        self.coarse = coarse
        self.n = n
        self.matrix = matrix
        self.load = load
        bn = coarse.boundary_nodes()
        vals = bc.pressure_values(coarse.node_coords()[bn])
        self.system = DirichletSystem(matrix, _boundary_dofs(coarse, n),
                                      np.tile(vals, n))

    def solve(self):
        P, rnorm = self.system.solve(self.load)
        return P.reshape(self.n, self.coarse.n_nodes), rnorm


def assemble_macro_flow(coarse, alpha_hat, beta_hat, g_blocks, eps, bc):
    """Assemble the coarse flow system.

    Parameters
    ----------
    coarse : CoarseGrid
    alpha_hat : ndarray, shape (n_blocks, N, 2, N, 2)
    beta_hat : ndarray, shape (n_blocks, N, N)
    g_blocks : ndarray, shape (n_blocks, N, 4)
        Per-block corner source moments (see source_moments).
    eps : float
    bc : BoundaryCase
    """
    n = alpha_hat.shape[1]
    elem = np.einsum("bimjn,mnac->bijac", alpha_hat, K_ELEM)
    elem += (coarse.H ** 2 / eps ** 2) * np.einsum(
        "bij,ac->bijac", beta_hat, M_UNIT)
    matrix = _scatter_blocks(coarse, n, elem)
    load = _block_load(coarse, n, g_blocks)
    return MacroFlowSystem(coarse, n, matrix, load, bc)


def block_center_values(coarse, U):
    """Value and gradient of the coarse Q1 interpolant at block centers.

    Parameters
    ----------
    U : ndarray, shape (N, n_coarse_nodes)

    Returns
    -------
    (vals, grads) : shapes (n_blocks, N) and (n_blocks, N, 2)
    """
    gl = coarse.block_nodes()
    corners = U[:, gl]                      # (N, n_blocks, 4) ccw from sw
    vals = corners.mean(axis=2).T
    H = coarse.H
    gx = (corners[:, :, 1] + corners[:, :, 2]
          - corners[:, :, 0] - corners[:, :, 3]) / (2.0 * H)
    gy = (corners[:, :, 2] + corners[:, :, 3]
          - corners[:, :, 0] - corners[:, :, 1]) / (2.0 * H)
    return vals, np.stack([gx.T, gy.T], axis=2)


def solve_macro_flow(system):
    """Solve the assembled flow system.

    Returns
    -------
    MacroState with P and the frozen per-block values filled in.
    """
    P, _ = system.solve()
    vals, grads = block_center_values(system.coarse, P)
    return MacroState(P, P_blocks=vals, gradP_blocks=grads)


class MacroTransportSystem:
    """Composite implicit Euler operator, factorized once."""

    def __init__(self, coarse, n, matrix, mass_gamma, load, tau, bc):
        self.coarse = coarse
        self.n = n
        self.tau = float(tau)
        self.matrix = matrix
        self.mass_gamma = mass_gamma
        self.load = load
        if bc.concentration_bc == "dirichlet_zero":
            dofs = _boundary_dofs(coarse, n)
            self._dirichlet = DirichletSystem(matrix, dofs,
                                              np.zeros(dofs.size))
            self._factor = None
        else:
            self._dirichlet = None
            self._factor = linalg.factorize(sp.csc_matrix(matrix))

    def step(self, C):
        rhs = self.mass_gamma @ C + self.load
        if self._dirichlet is not None:
            out, _ = self._dirichlet.solve(rhs)
            return out
        return self._factor.solve(rhs)


def assemble_macro_transport(coarse, gamma_hat, eta_hat, xi_hat, theta_hat,
                             h_blocks, eps, tau, bc, mu_hat=None):
    """Assemble the coarse transport stepping operator.

    Parameters
    ----------
    gamma_hat, theta_hat : ndarray, shape (n_blocks, N, N)
    eta_hat : ndarray, shape (n_blocks, N, 2, N, 2)
    xi_hat : ndarray, shape (n_blocks, N, N, 2)
    h_blocks : ndarray, shape (n_blocks, N, 4)
    mu_hat : ndarray, shape (n_blocks, N, 2, N, 2), optional
        Gradient-basis mass pairing; completes the time-derivative
        term of the two-term expansion, which keeps block corner
        means of evolving fields on track (fourth-order dispersion).
    """
    if tau <= 0.0:
        raise ValueError("time step must be positive")
    n = gamma_hat.shape[1]
    H2 = coarse.H ** 2
    mass_elem = (H2 / tau) * np.einsum("bij,ac->bijac", gamma_hat, M_UNIT)
    if mu_hat is not None:
        mass_elem += (1.0 / tau) * np.einsum(
            "bimjn,mnac->bijac", mu_hat, K_ELEM)
    elem = mass_elem.copy()
    elem += np.einsum("bimjn,mnac->bijac", eta_hat, K_ELEM)
    elem += (coarse.H / eps) * np.einsum("bijm,mac->bijac", xi_hat, G_ELEM)
    elem += (H2 / eps ** 2) * np.einsum("bij,ac->bijac", theta_hat, M_UNIT)
    matrix = _scatter_blocks(coarse, n, elem)
    mass_gamma = _scatter_blocks(coarse, n, mass_elem)
    load = _block_load(coarse, n, h_blocks)
    return MacroTransportSystem(coarse, n, matrix, mass_gamma, load, tau, bc)


def step_macro_transport(state, ops):
    """Advance the macro concentration by one implicit Euler step."""
    C = ops.step(state.C.ravel())
    return MacroState(state.P, C.reshape(state.C.shape), state.t + ops.tau,
                      state.P_blocks, state.gradP_blocks)


def initial_concentration(coarse, cbar, anchor=None):
    """Coarse nodal initial values matching per-block continuum averages.

    Returns the field whose block corner means reproduce cbar exactly
    and whose deviation from anchor (zero when omitted) has minimal
    gradient energy.  Minimizing the gradient keeps the correction in
    smooth modes that the transport operator preserves, so the
    block-average error stays small past the first steps instead of
    only at t = 0.

    Parameters
    ----------
    cbar : ndarray, shape (N, n_blocks)
    anchor : ndarray, shape (N, n_nodes), optional
    """
    n = cbar.shape[0]
    nn = coarse.n_nodes
    nb = coarse.n_blocks
    gl = coarse.block_nodes()
    rows = np.repeat(np.arange(nb), 4)
    A = sp.csr_matrix((np.full(4 * nb, 0.25), (rows, gl.ravel())),
                      shape=(nb, nn))
    lap = K_ELEM[0, 0] + K_ELEM[1, 1]
    L = sp.coo_matrix((np.tile(lap.ravel(), nb),
                       (np.repeat(gl, 4, axis=1).ravel(),
                        np.tile(gl, (1, 4)).ravel())), shape=(nn, nn))
    factor = linalg.factorize(sp.bmat([[L, A.T], [A, None]], format="csc"))
    out = np.empty((n, nn))
    rhs = np.zeros(nn + nb)
    for i in range(n):
        rhs[nn:] = cbar[i] if anchor is None else cbar[i] - A @ anchor[i]
        out[i] = factor.solve(rhs)[:nn]
        if anchor is not None:
            out[i] += anchor[i]
    return out


def _corner_weight_table(cpb):
    """Bilinear corner shape values and local gradients at cell centers.

    Returns (w, gx, gy), each shape (4, cpb*cpb) with corners ccw from
    sw and cells row-major, matching block_cells.
    """
    mid = (np.arange(cpb) + 0.5) / cpb
    y, x = np.meshgrid(mid, mid, indexing="ij")
    x, y = x.ravel(), y.ravel()
    w = np.stack([(1.0 - x) * (1.0 - y), x * (1.0 - y),
                  x * y, (1.0 - x) * y])
    gx = np.stack([-(1.0 - y), 1.0 - y, y, -y])
    gy = np.stack([-(1.0 - x), -x, x, 1.0 - x])
    return w, gx, gy


def source_moments(coarse, basis_by_block, f_cells, family="flow"):
    """Per-block corner moments of the source against downscaled hats.

    Pairs f with the full two-term expansion of the coarse test
    function, integral over K of f (phi_i N_a + phi_i^m d_m N_a), so
    block corner means of the macro solution track true block averages.
    Basis factors are taken cellwise constant (mean over the cell's
    four patch nodes); the hats and their gradients are sampled at cell
    centers, which integrates bilinears exactly.

    Parameters
    ----------
    basis_by_block : dict block -> CellBasisSet
    f_cells : ndarray
        Source sampled per fine cell.
    family : "flow" for the flow source, "transport" for transport.

    Returns
    -------
    ndarray, shape (n_blocks, N, 4)
        Corner order matches block_nodes (ccw from sw).
    """
    cpb = coarse.cpb
    nodes = cell_node_table(cpb, cpb)
    w, gx, gy = _corner_weight_table(cpb)
    h2 = coarse.fine.h ** 2
    inv_h = 1.0 / coarse.H
    n = next(iter(basis_by_block.values())).n_continua
    out = np.zeros((coarse.n_blocks, n, 4))
    for b in range(coarse.n_blocks):
        bset = basis_by_block[b]
        avg = np.asarray(getattr(bset, family + "_avg"))
        grad = np.asarray(getattr(bset, family + "_grad"))
        f_loc = f_cells[coarse.block_cells(b)]
        acc = (avg[:, nodes].mean(axis=2) * f_loc) @ w.T
        acc += inv_h * (grad[:, 0][:, nodes].mean(axis=2) * f_loc) @ gx.T
        acc += inv_h * (grad[:, 1][:, nodes].mean(axis=2) * f_loc) @ gy.T
        out[b] = h2 * acc
    return out


def downscale(state, coarse, basis_by_block):
    """Reconstruct fine fields from the macro state via the expansion.

    Per block: sum_i phi_i P_i(center) + sum_im phi_i^m grad_m P_i(center),
    using each block's own central basis.  Values at fine nodes shared by
    several blocks are averaged.

    Returns
    -------
    (p_ds, c_ds) : fine nodal arrays; c_ds is None when state.C is None.
    """
    fine = coarse.fine
    pvals, pgrads = state.P_blocks, state.gradP_blocks
    do_c = state.C is not None
    if do_c:
        cvals, cgrads = block_center_values(coarse, state.C)
    psum = np.zeros(fine.n_nodes)
    csum = np.zeros(fine.n_nodes) if do_c else None
    counts = np.zeros(fine.n_nodes)
    for b in range(coarse.n_blocks):
        bset = basis_by_block[b]
        gnodes = block_patch_nodes(coarse, b)
        contrib = np.einsum("i,in->n", pvals[b], bset.flow_avg)
        contrib += np.einsum("im,imn->n", pgrads[b], bset.flow_grad)
        np.add.at(psum, gnodes, contrib)
        if do_c:
            cc = np.einsum("i,in->n", cvals[b], bset.transport_avg)
            cc += np.einsum("im,imn->n", cgrads[b], bset.transport_grad)
            np.add.at(csum, gnodes, cc)
        np.add.at(counts, gnodes, 1.0)
    p_ds = psum / counts
    c_ds = csum / counts if do_c else None
    return p_ds, c_ds


def block_patch_nodes(coarse, b):
    """Global fine node ids of block b's (cpb+1)^2 patch, row-major."""
    cpb = coarse.cpb
    bx, by = coarse.block_xy(b)
    stride = coarse.fine.n + 1
    row = np.arange(cpb + 1)
    return ((by * cpb + row)[:, None] * stride
            + (bx * cpb + row)[None, :]).ravel()
