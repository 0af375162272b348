"""Experiment orchestration: fine reference, two cell-problem passes,
macro solves, the block-average error metric, and artifact emission.

The cell problems run in two passes.  The first solves the flow
families for every block and keeps only central restrictions and
tensors (region-wide values are held in memory when the budget allows,
or cached to disk).  After the macro flow solve fixes the frozen
pressure, the second pass rebuilds each block's region-wide flow basis
as needed, forms the local Darcy velocity, and solves the transport
families.
"""

import hashlib
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import scipy

from .. import cells, effective, fem, fields, grid, macro
from . import config as config_mod

__all__ = [
    "StageError",
    "ErrorReport",
    "relative_errors",
    "run_experiment",
    "run_pipeline",
    "run_fine_only",
    "compare_refinement",
    "write_artifacts",
]


class StageError(RuntimeError):
    """Pipeline failure tagged with the stage it happened in."""

    def __init__(self, stage, message):
        super().__init__("stage %s: %s" % (stage, message))
        self.stage = stage


class ErrorReport:
    """Relative block-average errors per output time, plus metadata."""

    def __init__(self, times, errors, config_hash, timings):
        self.times = tuple(times)
        self.errors = errors
        self.config_hash = config_hash
        self.timings = timings

    def rows(self):
        for t in self.times:
            for i, e in enumerate(self.errors[t], start=1):
                yield t, i, e


def relative_errors(macro_state, fine_solution, coarse, continua, t):
    """Block-average relative L2 distance, one value per continuum.

    The macro side averages the coarse Q1 interpolant over each block
    (the mean of its corner values); the fine side is the continuum-
    restricted block average of the reference solution.
    """
    fine_values = fine_solution
    if hasattr(fine_solution, "snapshots"):
        fine_values = fine_solution.snapshots.get(t, fine_solution.values)
    gl = coarse.block_nodes()
    out = []
    for i in range(1, continua.n_continua + 1):
        Cbar = macro_state.C[i - 1][gl].mean(axis=1)
        cbar = fem.block_average(fine_values, coarse, continua, i)
        den = float(np.sum(cbar * cbar))
        if den == 0.0:
            raise ValueError(
                "error metric undefined: reference average of continuum "
                "%d is identically zero at t=%g" % (i, t))
        out.append(float(np.sqrt(np.sum((Cbar - cbar) ** 2) / den)))
    return tuple(out)


def _map_blocks(n_blocks, fn, threads):
    """Apply fn to every block id; results land in block order."""
    if threads <= 1:
        return [fn(b) for b in range(n_blocks)]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, range(n_blocks)))


def _step_indices(cfg):
    idx = {}
    for t in cfg.output_times:
        k = int(round(t / cfg.tau))
        if abs(k * cfg.tau - t) > 1e-9 + 1e-12 * abs(t):
            raise StageError("config", "output time %g is not a multiple "
                             "of tau=%g" % (t, cfg.tau))
        idx[k] = t
    return idx


def _fine_reference(cfg, fine, kappa, D, phi, bc, g_cells, h_cells, c0):
    p_sol = fem.solve_flow_fine(fine, kappa, g_cells, bc)
    ops = fem.prepare_transport_fine(fine, D, phi, kappa, p_sol.values,
                                     cfg.tau, h_cells, bc)
    snap_at = _step_indices(cfg)
    c_sol = fem.FineSolution(c0.copy())
    if 0 in snap_at:
        c_sol.snapshots[snap_at[0]] = c0.copy()
    c = c0.copy()
    n_steps = int(round(cfg.t_end / cfg.tau))
    for k in range(1, n_steps + 1):
        c = fem.step_transport_fine(c, ops)
        if k in snap_at:
            c_sol.snapshots[snap_at[k]] = c.copy()
    c_sol.values = c
    return p_sol, c_sol


class _RegionStore:
    """Pass-1 flow bases for pass 2: RAM, disk cache, or recompute."""

    def __init__(self, mode, n_fine, blocks, cache_dir=None, tag=""):
        self.mode = mode
        self.n_fine = n_fine
        self.blocks = blocks
        self.cache_dir = cache_dir
        self.tag = tag
        self.ram = {}

    def path(self, block, layers):
        return os.path.join(self.cache_dir,
                            "basis_%s_b%04d_l%d.mchb"
                            % (self.tag, block, layers))

    def put(self, block, layers, bset, region_basis):
        if self.mode == "ram":
            self.ram[block] = (region_basis.avg, region_basis.grad)
        if self.cache_dir is not None:
            cells.save_basis_set(self.path(block, layers), bset,
                                 n_fine=self.n_fine, blocks=self.blocks,
                                 flow_region=region_basis)

    def get(self, block, layers):
        if self.mode == "ram":
            return self.ram.get(block)
        if self.cache_dir is not None:
            p = self.path(block, layers)
            if os.path.exists(p):
                _, region = cells.load_basis_set(
                    p, n_fine=self.n_fine, blocks=self.blocks)
                return region
        return None


def _flow_pass(cfg, coarse, kappa, cmap, layers, threads, store):
    """Solve flow cell problems on every block; returns central basis
    sets, raw and hatted tensors, and the worst solver residual."""
    ctx = effective.ScalingContext(coarse.H, coarse.H ** 2)

    def one_block(b):
        region = grid.oversample_region(coarse, b, layers)
        fb = cells.solve_flow_cell_problems(region, kappa, cmap, block=b)
        bset = cells.CellBasisSet(b, layers, fb.x_tilde,
                                  fb.restrict_avg(), fb.restrict_grad())
        ft = effective.flow_effective(region, bset, kappa)
        return bset, ft, fb, region

    results = _map_blocks(coarse.n_blocks, one_block, threads)
    n = cmap.n_continua
    basis_sets = {}
    raw = {}
    alpha = np.empty((coarse.n_blocks, n, 2, n, 2))
    beta = np.empty((coarse.n_blocks, n, n))
    worst = 0.0
    for b, (bset, ft, fb, region) in enumerate(results):
        basis_sets[b] = bset
        raw[b] = ft
        hf = effective.scale_flow(ft, ctx)
        alpha[b] = hf.alpha
        beta[b] = hf.beta
        worst = max(worst, fb.residual_norm)
        store.put(b, layers, bset, fb)
    return basis_sets, raw, alpha, beta, worst


def _transport_pass(cfg, coarse, kappa, D, phi, cmap, layers, threads,
                    store, basis_sets, flow_state):
    """Second pass: per-block velocity, transport families, tensors."""
    ctx = effective.ScalingContext(coarse.H, coarse.H ** 2)
    n = cmap.n_continua

    def one_block(b):
        region = grid.oversample_region(coarse, b, layers)
        stored = store.get(b, layers)
        if stored is None:
            fb = cells.solve_flow_cell_problems(region, kappa, cmap, block=b)
        else:
            avg, grad = stored
            fb = cells.RegionBasis("flow", region, avg, grad,
                                   basis_sets[b].x_tilde, None, None,
                                   0.0, 0.0)
        u_qp = cells.local_darcy_velocity(
            region, kappa, fb, flow_state.P_blocks[b],
            flow_state.gradP_blocks[b])
        tb = cells.solve_transport_cell_problems(region, D, cmap, u_qp,
                                                 block=b)
        bset = basis_sets[b]
        bset.transport_avg = tb.restrict_avg()
        bset.transport_grad = tb.restrict_grad()
        tt = effective.transport_effective(region, bset, D, phi, kappa)
        return tt, tb.residual_norm

    results = _map_blocks(coarse.n_blocks, one_block, threads)
    raw = {}
    gamma = np.empty((coarse.n_blocks, n, n))
    eta = np.empty((coarse.n_blocks, n, 2, n, 2))
    xi = np.empty((coarse.n_blocks, n, n, 2))
    theta = np.empty((coarse.n_blocks, n, n))
    worst = 0.0
    for b, (tt, rnorm) in enumerate(results):
        raw[b] = tt
        ht = effective.scale_transport(tt, ctx)
        gamma[b] = ht.gamma
        eta[b] = ht.eta
        xi[b], theta[b] = effective.combine_transport(
            ht, flow_state.P_blocks[b], flow_state.gradP_blocks[b])
        worst = max(worst, rnorm)
    return raw, gamma, eta, xi, theta, worst


class RunResult:
    """Everything a pipeline run produced, for tests and the CLI."""

    def __init__(self):
        self.coarse = None
        self.fine = None
        self.continua = None
        self.kappa = self.D = self.phi = None
        self.layers = None
        self.fine_p = None
        self.fine_c = None
        self.flow_state = None
        self.macro_snapshots = {}
        self.basis_sets = None
        self.flow_raw = None
        self.transport_raw = None
        self.errors = {}
        self.timings = {}
        self.artifacts = {}


def run_pipeline(cfg, threads=1, cache_dir=None, with_fine=True,
                 with_transport=True, with_stepping=True, log=None):
    """Execute the pipeline stages; returns a RunResult.

    Stage failures are re-raised as StageError with the stage name.
    """
    res = RunResult()
    timings = res.timings

    def stage(name, fn):
        t0 = time.perf_counter()
        try:
            out = fn()
        except StageError:
            raise
        except Exception as err:
            raise StageError(name, str(err)) from err
        timings[name] = time.perf_counter() - t0
        if log is not None:
            log("stage %-16s %.2fs" % (name, timings[name]))
        return out

    def setup():
        coarse, fine = cfg.build_grids()
        kappa, cmap, D, phi = cfg.build_fields()
        fields.validate_continua(cmap, coarse)
        return coarse, fine, kappa, cmap, D, phi

    coarse, fine, kappa, cmap, D, phi = stage("setup", setup)
    res.coarse, res.fine, res.continua = coarse, fine, cmap
    res.kappa, res.D, res.phi = kappa, D, phi
    layers = cfg.resolved_layers()
    res.layers = layers
    bc = cfg.boundary_case()
    g_cells = fields.gaussian_source(cfg.flow_source(), fine)
    h_cells = fields.gaussian_source(cfg.transport_source(), fine)
    c0 = cfg.initial_nodal(fine)

    if with_fine:
        res.fine_p, res.fine_c = stage("fine", lambda: _fine_reference(
            cfg, fine, kappa, D, phi, bc, g_cells, h_cells, c0))

    # choose where pass-1 region bases live
    n = cmap.n_continua
    nn_region = ((2 * layers + 1) * coarse.cpb + 1) ** 2
    need = coarse.n_blocks * nn_region * 3 * n * 8
    mode = "ram" if need <= cfg.mem_budget_mb * 2 ** 20 else "recompute"
    store = _RegionStore(mode, fine.n, coarse.m, cache_dir,
                         tag=cfg.field_hash())

    basis_sets, flow_raw, alpha, beta, worst_flow = stage(
        "cells-flow", lambda: _flow_pass(cfg, coarse, kappa, cmap, layers,
                                         threads, store))
    res.basis_sets = basis_sets
    res.flow_raw = flow_raw

    def macro_flow():
        g_blocks = macro.source_moments(coarse, basis_sets, g_cells)
        sysf = macro.assemble_macro_flow(coarse, alpha, beta, g_blocks,
                                         coarse.H, bc)
        return macro.solve_macro_flow(sysf)

    res.flow_state = stage("macro-flow", macro_flow)

    if not with_transport:
        return res

    transport_raw, gamma, eta, mu, xi, theta, worst_t = stage(
        "cells-transport", lambda: _transport_pass(
            cfg, coarse, kappa, D, phi, cmap, layers, threads, store,
            basis_sets, res.flow_state))
    res.transport_raw = transport_raw

    if not with_stepping:
        return res

    def macro_transport():
        h_blocks = macro.source_moments(coarse, basis_sets, h_cells,
                                        family="transport")
        ops = macro.assemble_macro_transport(coarse, gamma, eta, xi, theta,
                                             h_blocks, coarse.H, cfg.tau, bc,
                                             mu_hat=mu)
        cbar = np.stack([fem.block_average(c0, coarse, cmap, i)
                         for i in range(1, n + 1)])
        # anchor the corrected IC to the fine values at coarse node sites
        stride = np.arange(coarse.m + 1) * coarse.cpb
        node_ids = (stride[:, None] * (fine.n + 1) + stride[None, :]).ravel()
        anchor = np.tile(c0[node_ids], (n, 1))
        C0 = macro.initial_concentration(coarse, cbar, anchor)
        state = macro.MacroState(res.flow_state.P, C0, 0.0,
                                 res.flow_state.P_blocks,
                                 res.flow_state.gradP_blocks)
        snap_at = _step_indices(cfg)
        snaps = {}
        if 0 in snap_at:
            snaps[snap_at[0]] = state
        n_steps = int(round(cfg.t_end / cfg.tau))
        for k in range(1, n_steps + 1):
            state = macro.step_macro_transport(state, ops)
            if k in snap_at:
                snaps[snap_at[k]] = state
        return snaps

    res.macro_snapshots = stage("macro-transport", macro_transport)

    if with_fine:
        def compute_errors():
            out = {}
            for t in cfg.output_times:
                out[t] = relative_errors(res.macro_snapshots[t], res.fine_c,
                                         coarse, cmap, t)
            return out

        res.errors = stage("errors", compute_errors)
    return res


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _tag(t):
    return ("%g" % t).replace(".", "p")


def _write_grid_file(path, values, nx, ny, t, name):
    """Structured-grid text: one header line, then row-major node rows."""
    rows = np.asarray(values).reshape(ny + 1, nx + 1)
    with open(path, "w") as out:
        out.write("# nx=%d ny=%d t=%.17g name=%s\n" % (nx, ny, t, name))
        for row in rows:
            out.write(" ".join("%.17g" % v for v in row))
            out.write("\n")


def _write_macro_csv(path, coarse, C, t):
    coords = coarse.node_coords()
    n = C.shape[0]
    with open(path, "w") as out:
        out.write("x,y," + ",".join("C%d" % (i + 1) for i in range(n)) + "\n")
        for a in range(coarse.n_nodes):
            vals = ",".join("%.17g" % C[i, a] for i in range(n))
            out.write("%.17g,%.17g,%s\n" % (coords[a, 0], coords[a, 1], vals))


def write_artifacts(cfg, res, out_dir):
    """Write error CSV, snapshots, tensor dump, and the run manifest."""
    os.makedirs(out_dir, exist_ok=True)
    written = []

    def track(path):
        written.append(path)
        return path

    if res.errors:
        with open(track(os.path.join(out_dir, "errors.csv")), "w") as out:
            out.write("time,continuum,error\n")
            for t in cfg.output_times:
                for i, e in enumerate(res.errors[t], start=1):
                    out.write("%.17g,%d,%.17g\n" % (t, i, e))

    nf = res.fine.n
    m = res.coarse.m
    if res.fine_p is not None:
        _write_grid_file(track(os.path.join(out_dir, "fine_p.grid")),
                         res.fine_p.values, nf, nf, 0.0, "fine_p")
    if res.fine_c is not None:
        for t, values in sorted(res.fine_c.snapshots.items()):
            _write_grid_file(
                track(os.path.join(out_dir, "fine_c_t%s.grid" % _tag(t))),
                values, nf, nf, t, "fine_c")
    for t, state in sorted(res.macro_snapshots.items()):
        tag = _tag(t)
        for i in range(state.C.shape[0]):
            _write_grid_file(
                track(os.path.join(out_dir, "macro_C%d_t%s.grid" % (i + 1, tag))),
                state.C[i], m, m, t, "macro_C%d" % (i + 1))
        _write_macro_csv(track(os.path.join(out_dir, "macro_C_t%s.csv" % tag)),
                         res.coarse, state.C, t)
        if res.basis_sets and res.basis_sets[0].transport_avg is not None:
            p_ds, c_ds = macro.downscale(state, res.coarse, res.basis_sets)
            _write_grid_file(
                track(os.path.join(out_dir, "downscaled_c_t%s.grid" % tag)),
                c_ds, nf, nf, t, "downscaled_c")
    if res.flow_state is not None and res.basis_sets:
        p_ds, _ = macro.downscale(res.flow_state, res.coarse, res.basis_sets)
        _write_grid_file(track(os.path.join(out_dir, "downscaled_p.grid")),
                         p_ds, nf, nf, 0.0, "downscaled_p")
    if res.flow_raw is not None:
        effective.export_tensors_csv(
            track(os.path.join(out_dir, "tensors.csv")),
            res.flow_raw, res.transport_raw)

    manifest = {
        "config_path": cfg.path,
        "config_hash": cfg.config_hash(),
        "layers": res.layers,
        "versions": {
            "python": sys.version.split()[0],
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "timings": {k: round(v, 3) for k, v in res.timings.items()},
        "artifacts": {os.path.basename(p): _sha256(p) for p in written},
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as out:
        json.dump(manifest, out, indent=2, sort_keys=True)
        out.write("\n")
    return written


def run_experiment(cfg, out_dir=None, threads=1, cache_dir=None,
                   allow_paper_scale=False, log=None):
    """Full pipeline plus artifacts; returns an ErrorReport."""
    if isinstance(cfg, str):
        cfg = config_mod.load_config(cfg)
    if cfg.paper_scale and not allow_paper_scale:
        raise StageError("config", "config %s is paper scale; rerun with "
                         "--paper-scale" % (cfg.path or "<memory>"))
    res = run_pipeline(cfg, threads=threads, cache_dir=cache_dir, log=log)
    if out_dir is None:
        out_dir = cfg.out or "run_output"
    write_artifacts(cfg, res, out_dir)
    report = ErrorReport(cfg.output_times, res.errors, cfg.config_hash(),
                         res.timings)
    report.result = res
    return report


def run_fine_only(cfg, out_dir=None, log=None):
    """Fine reference solve alone; writes snapshots and a manifest."""
    if isinstance(cfg, str):
        cfg = config_mod.load_config(cfg)
    res = RunResult()

    t0 = time.perf_counter()
    coarse, fine = cfg.build_grids()
    kappa, cmap, D, phi = cfg.build_fields()
    res.coarse, res.fine, res.continua = coarse, fine, cmap
    bc = cfg.boundary_case()
    g_cells = fields.gaussian_source(cfg.flow_source(), fine)
    h_cells = fields.gaussian_source(cfg.transport_source(), fine)
    c0 = cfg.initial_nodal(fine)
    try:
        res.fine_p, res.fine_c = _fine_reference(cfg, fine, kappa, D, phi,
                                                 bc, g_cells, h_cells, c0)
    except StageError:
        raise
    except Exception as err:
        raise StageError("fine", str(err)) from err
    res.timings["fine"] = time.perf_counter() - t0
    if log is not None:
        log("stage %-16s %.2fs" % ("fine", res.timings["fine"]))
    if out_dir is None:
        out_dir = cfg.out or "run_output"
    write_artifacts(cfg, res, out_dir)
    return res


def compare_refinement(cfg_a, cfg_b, **kwargs):
    """Run two configs differing only in coarse refinement; returns
    rows (time, continuum, error_a, error_b, ratio)."""
    if isinstance(cfg_a, str):
        cfg_a = config_mod.load_config(cfg_a)
    if isinstance(cfg_b, str):
        cfg_b = config_mod.load_config(cfg_b)
    if not cfg_a.differs_only_in_refinement(cfg_b):
        raise StageError("compare", "configs differ beyond blocks/layers")
    out = kwargs.pop("out_dir", None)
    rep_a = run_experiment(cfg_a, out_dir=None if out is None
                           else os.path.join(out, "a"), **kwargs)
    rep_b = run_experiment(cfg_b, out_dir=None if out is None
                           else os.path.join(out, "b"), **kwargs)
    rows = []
    for t in rep_a.times:
        ea, eb = rep_a.errors[t], rep_b.errors[t]
        for i in range(len(ea)):
            ratio = eb[i] / ea[i] if ea[i] != 0.0 else float("inf")
            rows.append((t, i + 1, ea[i], eb[i], ratio))
    return rows
