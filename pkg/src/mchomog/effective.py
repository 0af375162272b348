"""Effective tensors of one coarse block from its cell basis functions.

All integrals run over the central block only, with the same 2x2 Gauss
rule as assembly.  Naming follows the storage convention

    alpha[i, m, s, k]      kappa-weighted gradient products of the flow
                           gradient bases (i with axis m, s with axis k)
    beta_star[i, k]        flow average against flow average
    beta_m[i, k, m]        flow average i against gradient (k, m)
    eta, theta_star, theta_m   D-weighted transport analogues
    gamma[i, j]            porosity-weighted products of phi_i^c phi_j^c
    zeta[s, i, j]          (-kappa)(grad phi_s^p . grad phi_i^c) phi_j^c
    chi[s, i, j, m]        same with the transport gradient basis (i, m)
    upsilon[s, i, j, l]    same with the flow gradient basis (s, l)
    iota[s, i, j, l, m]    both gradient bases

where s indexes the pressure expansion, i the transport trial continuum
and j the test continuum.
"""

import numpy as np

from .fem import GHAT_QP, N_QP, QUAD_WEIGHT
from .grid import cell_node_table

__all__ = [
    "ScalingContext",
    "FlowTensors",
    "TransportTensors",
    "flow_effective",
    "transport_effective",
    "scale_flow",
    "scale_transport",
    "combine_transport",
    "scaling_report",
    "export_tensors_csv",
]


class ScalingContext:
    """Epsilon and block area entering the hat scalings."""

    def __init__(self, eps, area):
        if eps <= 0.0 or area <= 0.0:
            raise ValueError("eps and area must be positive")
        self.eps = float(eps)
        self.area = float(area)


def _qp_values(vals, nodes):
    """Nodal arrays (F, nn) -> values at rule points (F, ncell, 4)."""
    return np.einsum("fca,qa->fcq", vals[:, nodes], N_QP)


def _qp_gradients(vals, nodes, h):
    """Nodal arrays (F, nn) -> physical gradients (F, ncell, 4, 2)."""
    return np.einsum("fca,qad->fcqd", vals[:, nodes], GHAT_QP) / h


def _gradgrad(weight, ga, gb, h):
    """[a, b] = integral of weight * grad u_a . grad u_b."""
    return (h * h * QUAD_WEIGHT) * np.einsum(
        "c,acqd,bcqd->ab", weight, ga, gb)


def _valval(weight, va, vb, h):
    return (h * h * QUAD_WEIGHT) * np.einsum("c,acq,bcq->ab", weight, va, vb)


def _tripled(weight, ga, gb, vc, h):
    """[a, b, c] = integral of weight * (grad u_a . grad u_b) * u_c."""
    return (h * h * QUAD_WEIGHT) * np.einsum(
        "c,acqd,bcqd,ecq->abe", weight, ga, gb, vc)


class _CentralPatch:
    """Quadrature data of the four families on one block."""

    def __init__(self, region, basis_set):
        cpb = region.cpb
        self.h = region.h
        self.nodes = cell_node_table(cpb, cpb)
        self.cells_global = region.cell_gmap[region.central_cells()]
        n = basis_set.n_continua
        fa = np.asarray(basis_set.flow_avg)
        fg = np.asarray(basis_set.flow_grad).reshape(2 * n, -1)
        self.p_avg_g = _qp_gradients(fa, self.nodes, self.h)
        self.p_grad_g = _qp_gradients(fg, self.nodes, self.h).reshape(
            n, 2, -1, 4, 2)
        if basis_set.transport_avg is not None:
            ca = np.asarray(basis_set.transport_avg)
            cg = np.asarray(basis_set.transport_grad).reshape(2 * n, -1)
            self.c_avg_v = _qp_values(ca, self.nodes)
            self.c_avg_g = _qp_gradients(ca, self.nodes, self.h)
            self.c_grad_g = _qp_gradients(cg, self.nodes, self.h).reshape(
                n, 2, -1, 4, 2)
            self.c_grad_v = _qp_values(cg, self.nodes).reshape(n, 2, -1, 4)
        self.n = n


class FlowTensors:
    """Raw (unscaled) flow tensors of one block."""

    def __init__(self, alpha, beta_star, beta_m):
        self.alpha = alpha
        self.beta_star = beta_star
        self.beta_m = beta_m


class TransportTensors:
    """Raw (unscaled) transport tensors of one block."""

    def __init__(self, eta, theta_star, theta_m, gamma,
                 zeta, chi, upsilon, iota):
        self.eta = eta
        self.theta_star = theta_star
        self.theta_m = theta_m
        self.gamma = gamma
        self.zeta = zeta
        self.chi = chi
        self.upsilon = upsilon
        self.iota = iota


def flow_effective(region, basis_set, kappa):
    """Integrate the flow tensors of one block.

    Parameters
    ----------
    region : OversampleRegion
    basis_set : CellBasisSet
        Central restrictions of the flow families.
    kappa : CellField
    """
    patch = _CentralPatch(region, basis_set)
    w = kappa.values[patch.cells_global]
    n, h = patch.n, patch.h
    pg = patch.p_grad_g.reshape(2 * n, -1, 4, 2)
    alpha = _gradgrad(w, pg, pg, h).reshape(n, 2, n, 2)
    beta_star = _gradgrad(w, patch.p_avg_g, patch.p_avg_g, h)
    beta_m = _gradgrad(w, patch.p_avg_g, pg, h).reshape(n, n, 2)
    return FlowTensors(alpha, beta_star, beta_m)


def transport_effective(region, basis_set, D, phi, kappa):
    """Integrate the transport tensors of one block.

    Requires both the flow and the transport families in basis_set.
    """
    if basis_set.transport_avg is None:
        raise ValueError("block %d has no transport basis" % basis_set.block)
    patch = _CentralPatch(region, basis_set)
    wd = D.values[patch.cells_global]
    wphi = phi.values[patch.cells_global]
    wk = -kappa.values[patch.cells_global]
    n, h = patch.n, patch.h
    cg = patch.c_grad_g.reshape(2 * n, -1, 4, 2)
    eta = _gradgrad(wd, cg, cg, h).reshape(n, 2, n, 2)
    theta_star = _gradgrad(wd, patch.c_avg_g, patch.c_avg_g, h)
    theta_m = _gradgrad(wd, patch.c_avg_g, cg, h).reshape(n, n, 2)
    gamma = _valval(wphi, patch.c_avg_v, patch.c_avg_v, h)
    zeta = _tripled(wk, patch.p_avg_g, patch.c_avg_g, patch.c_avg_v, h)
    chi = _tripled(wk, patch.p_avg_g, cg, patch.c_avg_v, h) \
        .reshape(n, n, 2, n).transpose(0, 1, 3, 2)
    pg = patch.p_grad_g.reshape(2 * n, -1, 4, 2)
    upsilon = _tripled(wk, pg, patch.c_avg_g, patch.c_avg_v, h) \
        .reshape(n, 2, n, n).transpose(0, 2, 3, 1)
    iota = _tripled(wk, pg, cg, patch.c_avg_v, h) \
        .reshape(n, 2, n, 2, n).transpose(0, 2, 4, 1, 3)
    return TransportTensors(eta, theta_star, theta_m, gamma,
                            zeta, chi, upsilon, iota)


class HattedFlow:
    """Hat-scaled flow tensors; raw values retained for unscaling."""

    def __init__(self, raw, ctx):
        self.raw = raw
        self.ctx = ctx
        self.alpha = raw.alpha / ctx.area
        self.beta = (ctx.eps ** 2 / ctx.area) * raw.beta_star
        self.beta_m = (ctx.eps / ctx.area) * raw.beta_m


class HattedTransport:
    """Hat-scaled transport tensors; raw values retained for unscaling."""

    def __init__(self, raw, ctx):
        self.raw = raw
        self.ctx = ctx
        a, e = ctx.area, ctx.eps
        self.eta = raw.eta / a
        self.theta = (e * e / a) * raw.theta_star
        self.theta_m = (e / a) * raw.theta_m
        self.gamma = raw.gamma / a
        self.zeta = (e * e / a) * raw.zeta
        self.chi = (e / a) * raw.chi
        self.upsilon = (e / a) * raw.upsilon
        self.iota = raw.iota / a


def scale_flow(raw, ctx):
    return HattedFlow(raw, ctx)


def scale_transport(raw, ctx):
    return HattedTransport(raw, ctx)


def unscale(hatted):
    """The raw tensors the hatted set was built from (carried through,
    so the round trip is exact)."""
    return hatted.raw


def combine_transport(hatted, P_vals, gradP_vals):
    """Fold the frozen pressure into the convection tensors.

    Returns
    -------
    (xi, Theta) :
        xi[i, j, m] multiplies (1/eps) grad_m C_i V_j and
        Theta[i, j] multiplies (1/eps^2) C_i V_j in the macro form.
    """
    P = np.asarray(P_vals, dtype=float)
    G = np.asarray(gradP_vals, dtype=float)
    e = hatted.ctx.eps
    xi = np.einsum("s,sijm->ijm", P, hatted.chi) \
        + e * np.einsum("sl,sijlm->ijm", G, hatted.iota)
    theta = hatted.theta + np.einsum("s,sij->ij", P, hatted.zeta) \
        + e * np.einsum("sl,sijl->ij", G, hatted.upsilon)
    return xi, theta


def scaling_report(entries):
    """Empirical growth exponents of the flow tensors in H.

    Parameters
    ----------
    entries : list of (H, FlowTensors)
        At least two distinct sizes.

    Returns
    -------
    dict mapping tensor name to (exponent or None, within_half_of_expected)
        Expected exponents with |R| = H^2: alpha 2, beta_m 1, beta_star 0.
    """
    if len(entries) < 2:
        raise ValueError("need tensors for at least two sizes")
    entries = sorted(entries, key=lambda e: e[0])
    expected = {"alpha": 2.0, "beta_m": 1.0, "beta_star": 0.0}
    report = {}
    scales = [np.abs(ft.alpha).max() for _, ft in entries]
    for name, want in expected.items():
        mags = [np.abs(getattr(ft, name)).max() for _, ft in entries]
        # a tensor that vanishes up to roundoff has no meaningful exponent
        if any(m <= 1e-10 * s for m, s in zip(mags, scales)):
            report[name] = (None, True)
            continue
        h0, h1 = entries[0][0], entries[-1][0]
        p = np.log(mags[-1] / mags[0]) / np.log(h1 / h0)
        report[name] = (float(p), bool(abs(p - want) <= 0.5))
    return report


def export_tensors_csv(path, flow_by_block, transport_by_block=None):
    """Write per-block tensors as rows: block, name, indices, value.

    Continuum indices are 1-based, axis indices are named x/y.
    """
    axis = "xy"

    def rows_of(block, name, arr, contdims):
        arr = np.asarray(arr)
        for idx in np.ndindex(arr.shape):
            pretty = [str(v + 1) if d < contdims else axis[v]
                      for d, v in enumerate(idx)]
            yield "%d,%s,%s,%.17g\n" % (block, name, ";".join(pretty),
                                        arr[idx])

    with open(path, "w") as out:
        out.write("block,tensor,indices,value\n")
        for block in sorted(flow_by_block):
            ft = flow_by_block[block]
            for line in rows_of(block, "alpha",
                                ft.alpha.transpose(0, 2, 1, 3), 2):
                out.write(line)
            for line in rows_of(block, "beta_star", ft.beta_star, 2):
                out.write(line)
            for line in rows_of(block, "beta_m", ft.beta_m, 2):
                out.write(line)
            if transport_by_block is None or block not in transport_by_block:
                continue
            tt = transport_by_block[block]
            for line in rows_of(block, "eta",
                                tt.eta.transpose(0, 2, 1, 3), 2):
                out.write(line)
            for name, contdims in (("theta_star", 2), ("theta_m", 2),
                                   ("gamma", 2), ("zeta", 3), ("chi", 3),
                                   ("upsilon", 3), ("iota", 3)):
                for line in rows_of(block, name, getattr(tt, name), contdims):
                    out.write(line)
