"""Constrained cell problems on oversampled block regions.

Each coarse block owns four families of local basis functions, obtained
by minimizing the flow or transport energy on the oversampled region
subject to prescribed continuum averages in every member block:

* flow average      phi_i^p   : average delta_ij in each member block
* flow gradient     phi_i^mp  : first moment of (x_m - xtilde_m)
* transport average phi_i^c   : as flow average, operator D plus convection
* transport gradient phi_i^mc : moments, same nonsymmetric operator

The minimization is solved as a KKT saddle system [A B^T; B 0] with
natural boundary conditions on the artificial cuts of the region.  The
shift xtilde is a single constant per (continuum, axis) chosen so the
moment of the central block vanishes; the targets of the other member
blocks are the moments of the same affine function, which keeps the
affine function admissible and the problem well posed.

Regions near the domain boundary are padded by even reflection of the
medium (see OversampleRegion), so every region edge is an artificial
cut with a full oversampling buffer and the natural condition applies
uniformly.  Effective tensors of wall blocks then match the interior
ones; the wall itself is carried by the macro Dirichlet condition, not
by the local problems.
"""

import io
import struct

import numpy as np
import scipy.sparse as sp

from . import fem, linalg
from .grid import cell_node_table

__all__ = [
    "ConstraintSet",
    "RegionBasis",
    "CellBasisSet",
    "centroid_shift",
    "solve_flow_cell_problems",
    "solve_transport_cell_problems",
    "local_darcy_velocity",
    "verify_constraints",
    "save_basis_set",
    "load_basis_set",
]


def _local_labels(region, continua):
    return continua.labels[region.cell_gmap]


class ConstraintSet:
    """Per (member block, continuum) averaging functionals on a region.

    Row (k, j) applied to a nodal vector w returns the integral of w
    over the cells of member block k labeled j, using the exact cell
    integral of the Q1 interpolant (cell area times corner mean).

    Attributes
    ----------
    matrix : csr_matrix, shape (n_members * N, n_region_nodes)
    measures : ndarray
        Integral of the indicator per row.
    index : list of (member, continuum) in row order.
    """

    def __init__(self, region, continua):
        labels = _local_labels(region, continua)
        nodes = cell_node_table(region.nx, region.ny)
        members = region.member_cell_lists()
        ncont = continua.n_continua
        w = region.h * region.h * 0.25
        rows, cols, vals = [], [], []
        measures = []
        index = []
        missing = []
        for k, cells in enumerate(members):
            lab = labels[cells]
            for j in range(1, ncont + 1):
                sel = cells[lab == j]
                row = len(index)
                index.append((k, j))
                if sel.size == 0:
                    missing.append((k, j))
                    measures.append(0.0)
                    continue
                nd = nodes[sel].ravel()
                rows.append(np.full(nd.size, row, dtype=np.int64))
                cols.append(nd)
                vals.append(np.full(nd.size, w))
                measures.append(4.0 * w * sel.size)
        if missing:
            raise ValueError(
                "continuum missing from member blocks of block %d: %s"
                % (region.center_block, missing[:8]))
        coo = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(len(index), region.n_nodes))
        self.matrix = coo.tocsr()
        self.matrix.sum_duplicates()
        self.matrix.sort_indices()
        self.measures = np.array(measures)
        self.index = index
        self.n_continua = ncont
        self.region = region


def centroid_shift(region, continua, j, m):
    """Indicator-weighted centroid coordinate of continuum j on the
    central block, the constant that zeroes its (x_m - xtilde_m) moment."""
    labels = _local_labels(region, continua)
    central = region.central_cells()
    sel = central[labels[central] == j]
    if sel.size == 0:
        raise ValueError(
            "continuum %d empty on central block %d" % (j, region.center_block))
    return region.cell_centers()[sel, m].mean()


def _all_centroid_shifts(region, continua):
    n = continua.n_continua
    return np.array([[centroid_shift(region, continua, j, m)
                      for m in (0, 1)] for j in range(1, n + 1)])


def _average_targets(cset, i):
    """Right-hand side for the average family of continuum i."""
    t = np.zeros(len(cset.index))
    for row, (_, j) in enumerate(cset.index):
        if j == i:
            t[row] = cset.measures[row]
    return t


def _moment_targets(cset, continua, x_tilde, i, m):
    """Right-hand side for the (x_m - xtilde) moment family of continuum i."""
    region = cset.region
    labels = _local_labels(region, continua)
    centers = region.cell_centers()
    members = region.member_cell_lists()
    area = region.h * region.h
    t = np.zeros(len(cset.index))
    for row, (k, j) in enumerate(cset.index):
        if j != i:
            continue
        cells = members[k]
        sel = cells[labels[cells] == j]
        t[row] = area * np.sum(centers[sel, m] - x_tilde[i - 1, m])
    return t


def _saddle(A, B):
    return sp.bmat([[A, B.T], [B, None]], format="csc")


def _solve_family(factor, n_nodes, targets):
    """Solve the saddle system for each target row; returns primal,
    dual, and the worst refined-residual norm."""
    primal = np.empty((len(targets), n_nodes))
    dual = np.empty((len(targets), targets[0].size))
    worst = 0.0
    for f, t in enumerate(targets):
        rhs = np.concatenate([np.zeros(n_nodes), t])
        x, rnorm = factor.solve_with_residual(rhs)
        primal[f] = x[:n_nodes]
        dual[f] = x[n_nodes:]
        worst = max(worst, rnorm)
    return primal, dual, worst


class RegionBasis:
    """Region-wide solutions of one average + gradient family pair.

    Attributes
    ----------
    kind : "flow" or "transport"
    avg : ndarray, shape (N, n_region_nodes)
    grad : ndarray, shape (N, 2, n_region_nodes)
    x_tilde : ndarray, shape (N, 2)
    dual_avg, dual_grad : multiplier arrays for diagnostics
    residual_norm, pivot_growth : solver diagnostics
    """

    def __init__(self, kind, region, avg, grad, x_tilde,
                 dual_avg, dual_grad, residual_norm, pivot_growth):
        self.kind = kind
        self.region = region
        self.avg = avg
        self.grad = grad
        self.x_tilde = x_tilde
        self.dual_avg = dual_avg
        self.dual_grad = dual_grad
        self.residual_norm = residual_norm
        self.pivot_growth = pivot_growth

    def restrict_avg(self):
        return self.avg[:, self.region.central_nodes()]

    def restrict_grad(self):
        return self.grad[:, :, self.region.central_nodes()]


def _solve_cell_family(kind, region, A, continua, block):
    cset = ConstraintSet(region, continua)
    x_tilde = _all_centroid_shifts(region, continua)
    n = continua.n_continua
    nn = region.n_nodes
    K = _saddle(A.tocsc(), cset.matrix.tocsc())
    try:
        factor = linalg.factorize(K)
    except linalg.SingularMatrixError as err:
        raise linalg.SingularMatrixError(
            "singular %s cell system on block %d: %s"
            % (kind, region.center_block if block is None else block, err),
            err.pivot_index) from err
    avg_t = [_average_targets(cset, i) for i in range(1, n + 1)]
    grad_t = [_moment_targets(cset, continua, x_tilde, i, m)
              for i in range(1, n + 1) for m in (0, 1)]
    avg, dual_avg, r1 = _solve_family(factor, nn, avg_t)
    grad, dual_grad, r2 = _solve_family(factor, nn, grad_t)
    return RegionBasis(kind, region, avg, grad.reshape(n, 2, nn), x_tilde,
                       dual_avg, dual_grad.reshape(n, 2, -1),
                       max(r1, r2), factor.pivot_growth)


def solve_flow_cell_problems(region, kappa, continua, block=None):
    """Solve the flow average and gradient families on one region.

    Parameters
    ----------
    region : OversampleRegion
    kappa : CellField
    continua : ContinuumMap
    block : int, optional
        Block id for error reports; defaults to region.center_block.

    Returns
    -------
    RegionBasis
    """
    kap = kappa.values[region.cell_gmap]
    A = fem.stiffness_csr(region.nx, region.ny, region.h, kap)
    return _solve_cell_family("flow", region, A, continua, block)


def local_darcy_velocity(region, kappa, flow_basis, P_vals, gradP_vals):
    """Velocity -kappa grad of the frozen pressure expansion, per cell
    and quadrature point of the region.

    Parameters
    ----------
    flow_basis : RegionBasis
        Region-wide flow basis of the same region.
    P_vals : ndarray, shape (N,)
    gradP_vals : ndarray, shape (N, 2)
    """
    if flow_basis.avg.shape[1] != region.n_nodes:
        raise ValueError("flow basis does not cover the oversampled region")
    w = np.einsum("s,sn->n", np.asarray(P_vals, dtype=float), flow_basis.avg)
    w += np.einsum("sl,sln->n", np.asarray(gradP_vals, dtype=float),
                   flow_basis.grad)
    kap = kappa.values[region.cell_gmap]
    return fem.pressure_qp_velocity(region.nx, region.ny, region.h, kap, w)


def solve_transport_cell_problems(region, D, continua, u_qp, block=None):
    """Solve the transport families; operator is diffusion plus the
    frozen-velocity convection, hence nonsymmetric."""
    dvals = D.values[region.cell_gmap]
    A = fem.stiffness_csr(region.nx, region.ny, region.h, dvals)
    A = A + fem.convection_csr_from_velocity(region.nx, region.ny, region.h,
                                             u_qp)
    return _solve_cell_family("transport", region, A, continua, block)


def verify_constraints(region, continua, basis, targets):
    """Recompute constraint residuals by explicit Gauss quadrature.

    Independent of the saddle solve: integrates the solved nodal values
    per cell with the 2x2 rule and compares against the given targets.

    Parameters
    ----------
    basis : ndarray, shape (n_funcs, n_region_nodes)
    targets : ndarray, shape (n_funcs, n_rows), rows in ConstraintSet order

    Returns
    -------
    float
        Largest relative residual, scaled by the member-continuum
        measure and the sup norm of the basis function.
    """
    labels = _local_labels(region, continua)
    nodes = cell_node_table(region.nx, region.ny)
    basis = np.atleast_2d(np.asarray(basis, dtype=float))
    # per-cell integral via the quadrature rule, not the corner-mean shortcut
    qvals = np.einsum("fca,qa->fcq", basis[:, nodes], fem.N_QP)
    cellint = (region.h * region.h) * fem.QUAD_WEIGHT * qvals.sum(axis=2)
    members = region.member_cell_lists()
    ncont = continua.n_continua
    worst = 0.0
    sup = np.abs(basis).max(axis=1)
    for row in range(targets.shape[1]):
        k, j = divmod(row, ncont)
        cells = members[k]
        sel = cells[labels[cells] == j + 1]
        got = cellint[:, sel].sum(axis=1)
        measure = region.h * region.h * sel.size
        scale = measure * np.maximum(1.0, sup)
        worst = max(worst, float(
            np.max(np.abs(got - targets[:, row]) / scale)))
    return worst


def family_targets(region, continua, x_tilde):
    """All right-hand-side targets in solver order, for verification.

    Returns
    -------
    (avg, grad) : ndarrays of shape (N, n_rows) and (2N, n_rows)
    """
    cset = ConstraintSet(region, continua)
    n = continua.n_continua
    avg = np.stack([_average_targets(cset, i) for i in range(1, n + 1)])
    grad = np.stack([_moment_targets(cset, continua, x_tilde, i, m)
                     for i in range(1, n + 1) for m in (0, 1)])
    return avg, grad


class CellBasisSet:
    """Central-block restriction of all four families for one block.

    The arrays live on the block's own (cpb+1)^2 node patch, ordered
    row-major; this is what the effective integrals and downscaling
    consume.  Region-wide values are not retained here.
    """

    def __init__(self, block, layers, x_tilde,
                 flow_avg, flow_grad, transport_avg=None, transport_grad=None,
                 diagnostics=None):
        self.block = block
        self.layers = layers
        self.x_tilde = x_tilde
        self.flow_avg = flow_avg
        self.flow_grad = flow_grad
        self.transport_avg = transport_avg
        self.transport_grad = transport_grad
        self.diagnostics = {} if diagnostics is None else diagnostics

    @property
    def n_continua(self):
        return self.flow_avg.shape[0]


_MAGIC = b"MCHB"
_VERSION = 2


def _write_array(out, arr):
    arr = np.ascontiguousarray(arr, dtype="<f8")
    out.write(struct.pack("<I", arr.ndim))
    out.write(struct.pack("<%dI" % arr.ndim, *arr.shape))
    out.write(arr.tobytes())


def _read_array(buf):
    (ndim,) = struct.unpack("<I", buf.read(4))
    shape = struct.unpack("<%dI" % ndim, buf.read(4 * ndim))
    n = int(np.prod(shape))
    return np.frombuffer(buf.read(8 * n), dtype="<f8").reshape(shape).copy()


def save_basis_set(path, bset, n_fine, blocks, flow_region=None):
    """Serialize a CellBasisSet (and optionally the region-wide flow
    basis) as a little-endian array dump.

    Header: magic, version, n_fine, coarse blocks per side, block id,
    layers, N, flags.  Arrays follow in a fixed order, each preceded by
    its rank and shape as unsigned 32-bit integers.
    """
    has_transport = bset.transport_avg is not None
    flags = (1 if has_transport else 0) | (2 if flow_region is not None else 0)
    with open(path, "wb") as out:
        out.write(_MAGIC)
        out.write(struct.pack("<7I", _VERSION, n_fine, blocks, bset.block,
                              bset.layers, bset.n_continua, flags))
        _write_array(out, bset.x_tilde)
        _write_array(out, bset.flow_avg)
        _write_array(out, bset.flow_grad)
        if has_transport:
            _write_array(out, bset.transport_avg)
            _write_array(out, bset.transport_grad)
        if flow_region is not None:
            _write_array(out, flow_region.avg)
            _write_array(out, flow_region.grad)


def load_basis_set(path, n_fine=None, blocks=None):
    """Load a CellBasisSet written by save_basis_set.

    Returns
    -------
    (CellBasisSet, (avg, grad) or None)
        The second element carries region-wide flow arrays if present.
    """
    with open(path, "rb") as f:
        raw = f.read()
    buf = io.BytesIO(raw)
    if buf.read(4) != _MAGIC:
        raise ValueError("not a cell basis file: %s" % path)
    version, nf, m, block, layers, n, flags = struct.unpack("<7I", buf.read(28))
    if version != _VERSION:
        raise ValueError("unsupported basis file version %d" % version)
    if n_fine is not None and blocks is not None \
            and (nf != n_fine or m != blocks):
        raise ValueError("basis file %s was built for n_f=%d, M=%d"
                         % (path, nf, m))
    x_tilde = _read_array(buf)
    flow_avg = _read_array(buf)
    flow_grad = _read_array(buf)
    t_avg = t_grad = None
    if flags & 1:
        t_avg = _read_array(buf)
        t_grad = _read_array(buf)
    region_arrays = None
    if flags & 2:
        region_arrays = (_read_array(buf), _read_array(buf))
    bset = CellBasisSet(block, layers, x_tilde, flow_avg, flow_grad,
                        t_avg, t_grad)
    return bset, region_arrays
