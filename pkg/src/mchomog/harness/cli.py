"""Command line entry points.

Verbs: run a full experiment, compare two refinements, dump effective
tensors, compute the fine reference alone, or run the self test.
"""

import argparse
import os
import sys

import numpy as np

from .. import cells, effective, fem, fields, grid, macro
from .config import load_config
from .runner import (StageError, compare_refinement, run_experiment,
                     run_fine_only, run_pipeline, write_artifacts)


def _add_common(sub):
    sub.add_argument("config", nargs="?", help="experiment config file")
    sub.add_argument("--config", dest="config_opt", metavar="PATH",
                     help="alternative way to pass the config file")
    sub.add_argument("--out", default=None, help="output directory")
    sub.add_argument("--threads", type=int, default=1,
                     help="worker threads for per-block solves")
    sub.add_argument("--cache", default=None, metavar="DIR",
                     help="directory for cell basis cache files")
    sub.add_argument("--paper-scale", action="store_true",
                     help="allow configs marked paper_scale")


def _config_path(args, parser):
    path = args.config_opt or args.config
    if path is None:
        parser.error("a config file is required (positional or --config)")
    if args.config and args.config_opt and args.config != args.config_opt:
        parser.error("conflicting config paths given")
    return path


def _load(path):
    try:
        return load_config(path)
    except (OSError, ValueError, KeyError) as err:
        raise StageError("config", str(err)) from err


def _log(line):
    print(line, flush=True)


def _cmd_run(args, parser):
    cfg = _load(_config_path(args, parser))
    report = run_experiment(cfg, out_dir=args.out, threads=args.threads,
                            cache_dir=args.cache,
                            allow_paper_scale=args.paper_scale, log=_log)
    for t, i, e in report.rows():
        print("t=%-6g continuum %d  error %.6e" % (t, i, e))
    out = args.out or cfg.out or "run_output"
    print("artifacts written to %s" % out)
    return 0


def _cmd_compare(args, parser):
    if args.config_b is None:
        parser.error("compare needs two config files")
    rows = compare_refinement(_load(_config_path(args, parser)),
                              _load(args.config_b),
                              out_dir=args.out, threads=args.threads,
                              cache_dir=args.cache,
                              allow_paper_scale=args.paper_scale, log=_log)
    print("%-8s %-9s %-14s %-14s %s" % ("time", "continuum", "error_a",
                                        "error_b", "ratio_b/a"))
    for t, i, ea, eb, r in rows:
        print("%-8g %-9d %-14.6e %-14.6e %.4f" % (t, i, ea, eb, r))
    return 0


def _cmd_tensors(args, parser):
    cfg = _load(_config_path(args, parser))
    if cfg.paper_scale and not args.paper_scale:
        raise StageError("config", "config %s is paper scale; rerun with "
                         "--paper-scale" % cfg.path)
    res = run_pipeline(cfg, threads=args.threads, cache_dir=args.cache,
                       with_fine=False, with_stepping=False, log=_log)
    out = args.out or cfg.out or "run_output"
    write_artifacts(cfg, res, out)
    print("tensors written to %s" % os.path.join(out, "tensors.csv"))
    return 0


def _cmd_fine(args, parser):
    cfg = _load(_config_path(args, parser))
    if cfg.paper_scale and not args.paper_scale:
        raise StageError("config", "config %s is paper scale; rerun with "
                         "--paper-scale" % cfg.path)
    out = args.out or cfg.out or "run_output"
    run_fine_only(cfg, out_dir=out, log=_log)
    print("fine reference written to %s" % out)
    return 0


def _selftest_checks():
    """Small invariant suite; yields (name, passed, metric) triples."""
    fine = grid.FineGrid(80)
    coarse = grid.CoarseGrid(4, fine)
    kappa, cmap = fields.constant_field(80, 1.0)

    region = grid.oversample_region(coarse, 5, 2)
    fb = cells.solve_flow_cell_problems(region, kappa, cmap, block=5)
    pou = float(np.abs(fb.avg.sum(axis=0) - 1.0).max())
    yield "flow partition of unity", pou < 1e-10, pou

    avg_t, grad_t = cells.family_targets(region, cmap, fb.x_tilde)
    worst = max(cells.verify_constraints(region, cmap, fb.avg, avg_t),
                cells.verify_constraints(
                    region, cmap, fb.grad.reshape(-1, region.n_nodes),
                    grad_t))
    yield "constraint residuals", worst < 1e-8, worst

    tb = cells.solve_transport_cell_problems(
        region, kappa, cmap, np.zeros((region.n_cells, 4, 2)), block=5)
    same = (np.array_equal(tb.avg, fb.avg)
            and np.array_equal(tb.grad, fb.grad))
    yield "transport matches flow at u=0", same, 0.0 if same else 1.0

    # central-block tensor deviation from identity shrinks with depth
    coarse5 = grid.CoarseGrid(5, fine)
    kappa5, cmap5 = fields.constant_field(80, 1.0)
    ctx5 = effective.ScalingContext(coarse5.H, coarse5.H ** 2)
    devs = []
    for lay in (1, 2):
        reg = grid.oversample_region(coarse5, 12, lay)
        rb = cells.solve_flow_cell_problems(reg, kappa5, cmap5, block=12)
        bset = cells.CellBasisSet(12, lay, rb.x_tilde, rb.restrict_avg(),
                                  rb.restrict_grad())
        hf = effective.scale_flow(
            effective.flow_effective(reg, bset, kappa5), ctx5)
        devs.append(float(np.abs(hf.alpha[0, :, 0, :] - np.eye(2)).max()))
    yield "oversampling decay", devs[1] < devs[0], devs[1] / devs[0]

    nb1 = coarse.n_blocks
    alpha = np.broadcast_to(np.eye(2)[None, None, :, None, :],
                            (nb1, 1, 2, 1, 2)).copy()
    beta = np.zeros((nb1, 1, 1))
    bc = fields.BoundaryCase.case(2)
    sysf = macro.assemble_macro_flow(coarse, alpha, beta,
                                     np.zeros((nb1, 1, 4)), coarse.H, bc)
    state = macro.solve_macro_flow(sysf)
    xdev = float(np.abs(state.P[0] - coarse.node_coords()[:, 0]).max())
    yield "macro linear reproduction", xdev < 1e-8, xdev

    bc3 = fields.BoundaryCase.case(3)
    nb, nn = coarse.n_blocks, coarse.n_nodes
    gamma = np.ones((nb, 1, 1))
    eta = np.broadcast_to(np.eye(2)[None, None, :, None, :],
                          (nb, 1, 2, 1, 2)).copy()
    ops = macro.assemble_macro_transport(
        coarse, gamma, eta, np.zeros((nb, 1, 1, 2)), np.zeros((nb, 1, 1)),
        np.zeros((nb, 1, 4)), coarse.H, 0.01, bc3)
    rng = np.random.default_rng(7)
    C = rng.random((1, nn))
    mass0 = float(ops.mass_gamma @ C.ravel() @ np.ones(nn))
    st = macro.MacroState(np.zeros((1, nn)), C, 0.0,
                          np.zeros((nb, 1)), np.zeros((nb, 1, 2)))
    for _ in range(10):
        st = macro.step_macro_transport(st, ops)
    mass1 = float(ops.mass_gamma @ st.C.ravel() @ np.ones(nn))
    mdev = abs(mass1 - mass0) / abs(mass0)
    yield "macro mass conservation", mdev < 1e-10, mdev

    p_nodal = coarse.fine.node_coords()[:, 0]
    cbar = fem.block_average(p_nodal, coarse, cmap, 1)
    centers = np.array([coarse.block_center(b) for b in range(nb)])
    adev = float(np.abs(cbar - centers[:, 0]).max())
    yield "block averaging identity", adev < 1e-12, adev


def _cmd_selftest(args, parser):
    failed = 0
    for name, ok, metric in _selftest_checks():
        print("selftest %-28s %s (%.3e)" % (name, "PASS" if ok else "FAIL",
                                            metric))
        if not ok:
            failed += 1
    if failed:
        print("selftest: %d check(s) failed" % failed)
        return 1
    print("selftest: all checks passed")
    return 0


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="mchomog",
        description="multicontinuum homogenization of Darcy flow and "
                    "tracer transport")
    subs = parser.add_subparsers(dest="verb", required=True)

    p_run = subs.add_parser("run", help="full experiment with error report")
    _add_common(p_run)

    p_cmp = subs.add_parser("compare",
                            help="run two refinements and tabulate errors")
    _add_common(p_cmp)
    p_cmp.add_argument("config_b", nargs="?", help="second config file")

    p_ten = subs.add_parser("tensors", help="compute effective tensors only")
    _add_common(p_ten)

    p_fin = subs.add_parser("fine", help="fine reference solve only")
    _add_common(p_fin)

    subs.add_parser("selftest", help="run built-in invariant checks")

    args = parser.parse_args(argv)
    handler = {
        "run": _cmd_run,
        "compare": _cmd_compare,
        "tensors": _cmd_tensors,
        "fine": _cmd_fine,
    }.get(args.verb)
    try:
        if handler is None:
            return _cmd_selftest(args, parser)
        return handler(args, parser)
    except StageError as err:
        print("error: %s" % err, file=sys.stderr)
        return 2
    except ValueError as err:
        print("error: %s" % err, file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
