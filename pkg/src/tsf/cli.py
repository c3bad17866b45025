"""Command-line workflows.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numerical
error (unstable scheme, divergence, failed training).
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import io
from .adjoint import gradient_check
from .baseline2d import fit_pixelwise
from .classify import (accuracy_table, confusion_from_predictions, loo_cv, predict, train_centroid,
                       train_mlp)
from .domain import ParamMaps, SourceModel, TsfStack
from .errors import (DivergenceError, FormatError, FrameStepMismatchError, InvalidArgumentError,
                     StabilityError, TrainingError)
from .forward import simulate_volume, stability_check
from .inverse import OptimConfig, beam_core, recover, recover_two_layer
from .scenes import add_noise

log = logging.getLogger("tsf")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
# Safety margin when the upper k bound is derived from the CFL limit.
_CFL_MARGIN = 0.96


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _config_path(name):
    """A path on disk, or the name of a bundled config ("small", "wood")."""
    p = Path(name)
    if p.exists():
        return p
    bundled = resources.files("tsf") / "configs" / f"{name}.cfg"
    if bundled.is_file():
        return bundled
    raise FormatError(f"config {name!r} not found")


def _load_config(name):
    path = _config_path(name)
    return io.RunConfig.from_text(path.read_text(encoding="utf-8"), str(path))


def _source(args, meta, stack):
    src = io.source_from_meta(meta)
    if args.center is not None:
        sigma = args.sigma_px if args.sigma_px is not None else (src.sigma_px if src else 2.0)
        amp = src.amplitude if src else 1.0
        src = SourceModel(amp, args.center[0], args.center[1], sigma, stack.capture.t_on_s)
    if src is None:
        raise FormatError("bundle carries no beam description; pass --center X Y")
    return src


def _optim(args, stack):
    if args.config is not None:
        cfg = _load_config(args.config).optim
    else:
        cfg = OptimConfig()
        limit = _CFL_MARGIN / stability_check(1.0, stack.grid).cfl_factor
        if cfg.k_bounds[1] > limit:
            log.info("k upper bound lowered to %.4g to keep the scheme stable", limit)
            cfg = OptimConfig(k_bounds=(min(cfg.k_bounds[0], 0.5 * limit), limit))
    changes = {}
    if getattr(args, "epochs", None) is not None:
        changes["epochs"] = args.epochs
    if getattr(args, "lr0", None) is not None:
        changes["lr0"] = args.lr0
    if getattr(args, "roi_radius", None) is not None:
        changes["roi_radius"] = args.roi_radius
    if changes:
        cfg = replace(cfg, **changes)
    return cfg


def _write_maps(out, params, k_range, e_range, prefix=""):
    io.write_map_csv(params.k, out / f"{prefix}k.csv")
    io.write_map_csv(params.eps_prime, out / f"{prefix}eps_prime.csv")
    io.write_map_pgm(params.k, out / f"{prefix}k.pgm", *k_range)
    io.write_map_pgm(params.eps_prime, out / f"{prefix}eps_prime.pgm", *e_range)


def _write_loss(out, history):
    lines = ["epoch,mse"] + [f"{i},{r.mse:.17g}" for i, r in enumerate(history)]
    io.write_text(out / "loss.csv", "\n".join(lines) + "\n")


def _summary(out, items):
    text = "".join(f"{k}={v}\n" for k, v in items)
    io.write_text(out / "summary.txt", text)
    sys.stdout.write(text)


def cmd_simulate(args):
    rc = _load_config(args.config)
    grid, cap, src = rc.grid, rc.capture, rc.source
    frames, _ = simulate_volume(rc.true_k_volume(), rc["eps_prime_true"], src, cap, grid)
    stack = TsfStack(frames, cap, grid)
    sigma = rc["gaussian_sigma_K"] if args.noise_sigma is None else args.noise_sigma
    seed = rc["seed"] if args.seed is None else args.seed
    stack = add_noise(stack, sigma, np.random.default_rng(seed))
    io.write_bundle(stack, args.out, src)
    print(f"wrote {stack.n_frames} frames of {grid.nx}x{grid.ny} to {args.out} "
          f"(noise sigma {sigma} K, seed {seed})")
    return EXIT_OK


def cmd_recover(args):
    meta = io.read_meta(args.inp)
    stack = io.read_bundle(args.inp)
    src = _source(args, meta, stack)
    cfg = _optim(args, stack)
    res = recover(stack, src, stack.grid, cfg)
    out = Path(args.out)
    _write_maps(out, res.params, cfg.k_bounds, cfg.eps_bounds)
    _write_loss(out, res.loss_history)
    core = beam_core(src, stack.grid.surface_shape)
    _summary(out, [
        ("metal_flag", str(res.metal_flag).lower()),
        ("converged", str(res.converged).lower()),
        ("epochs", res.epochs_run),
        ("final_loss", f"{res.loss_history[-1].mse:.6g}"),
        ("k_core_mean", f"{res.roi_mean('k', core):.6g}"),
        ("eps_prime_core_mean", f"{res.roi_mean('eps_prime', core):.6g}"),
        ("k_roi_mean", f"{res.roi_mean('k'):.6g}"),
        ("roi_pixels", int(res.roi_mask.sum())),
    ])
    return EXIT_OK


def cmd_recover2(args):
    meta = io.read_meta(args.inp)
    stack = io.read_bundle(args.inp)
    src = _source(args, meta, stack)
    cfg = _optim(args, stack)
    model, history, converged = recover_two_layer(stack, src, stack.grid, cfg, args.thickness_m)
    out = Path(args.out)
    io.write_map_csv(model.eps_prime_surface, out / "eps_prime.csv")
    _write_loss(out, history)
    _summary(out, [
        ("top_thickness_m", model.top_thickness_m),
        ("k_top", f"{model.k_top:.6g}"),
        ("k_bottom", f"{model.k_bottom:.6g}"),
        ("k_bottom_constrained", str(model.k_bottom_constrained).lower()),
        ("eps_prime", f"{float(model.eps_prime_surface.mean()):.6g}"),
        ("converged", str(converged).lower()),
        ("final_loss", f"{history[-1].mse:.6g}"),
    ])
    return EXIT_OK


def cmd_baseline2d(args):
    meta = io.read_meta(args.inp)
    stack = io.read_bundle(args.inp)
    src = _source(args, meta, stack)
    fit = fit_pixelwise(stack, src)
    out = Path(args.out)
    raw = ParamMaps(np.clip(fit.k, 0, None), np.clip(fit.eps_prime, 0, None))
    k_hi = max(float(raw.k.max()), 1e-12)
    e_hi = max(float(raw.eps_prime.max()), 1e-12)
    _write_maps(out, raw, (0.0, k_hi), (0.0, e_hi))
    io.write_map_csv(fit.k, out / "k_raw.csv")
    io.write_map_csv(fit.mask.astype(float), out / "mask.csv")
    cx, cy = int(round(src.center_x)), int(round(src.center_y))
    _summary(out, [
        ("k_center", f"{fit.k[cy, cx]:.6g}"),
        ("eps_prime_center", f"{fit.eps_prime[cy, cx]:.6g}"),
        ("masked_pixels", int(fit.mask.sum())),
    ])
    return EXIT_OK


def cmd_gradcheck(args):
    rc = _load_config(args.config)
    grid, cap, src = rc.grid, rc.capture, rc.source
    truth = rc.true_params
    rng = np.random.default_rng(rc["seed"])
    frames, _ = simulate_volume(rc.true_k_volume(), truth.eps_prime, src, cap, grid)
    measured = add_noise(TsfStack(frames, cap, grid), rc["gaussian_sigma_K"], rng)
    # Probe away from the truth so the gradient is not near zero.
    shape = grid.surface_shape
    params = ParamMaps(truth.k * rng.uniform(0.5, 1.5, shape),
                       truth.eps_prime * rng.uniform(0.5, 1.5, shape))
    rep = gradient_check(params, src, cap, grid, measured, n_probes=args.probes,
                         rel_tol=args.rel_tol, seed=rc["seed"], mode=rc["loss_mode"])
    print(f"probes={rep.n_probes} max_rel_err={rep.max_rel_err:.3e} rel_tol={rep.rel_tol:g} "
          f"{'PASS' if rep.passed else 'FAIL'}")
    return EXIT_OK if rep.passed else EXIT_NUMERIC


def cmd_classify(args):
    cfg = _load_config(args.config).optim if args.config else None
    data, metal_rows = io.dataset_from_manifest(args.manifest, args.window, cfg)
    if args.model == "mlp":
        hyper = {"seed": args.seed}
        train = lambda d: train_mlp(d, **hyper)  # noqa: E731
    else:
        hyper = {}
        train = train_centroid
    if args.loo:
        cm = loo_cv(data, args.model, **hyper)
    else:
        model = train(data)
        preds = [predict(model, s)[0] for s in data.samples]
        cm = confusion_from_predictions([s.label for s in data.samples], preds, data.label_names)
    out = Path(args.out)
    io.write_text(out / "confusion.csv", cm.to_csv())
    n_feat = data.samples[0].values.size
    io.write_text(out / "accuracy.csv", accuracy_table({(n_feat, args.model): cm.accuracy}))
    print(f"samples={len(data.samples)} classes={len(data.label_names)} features={n_feat} "
          f"accuracy={100 * cm.accuracy:.1f}%")
    if metal_rows:
        print(f"rows routed to metal/conductor: {', '.join(map(str, metal_rows))}")
    return EXIT_OK


def cmd_info(args):
    meta = io.read_meta(args.inp)
    stack = io.read_bundle(args.inp)
    for key, value in meta.items():
        print(f"{key}={value}")
    rep = stability_check(args.k, stack.grid)
    print(f"stability_k={args.k:.6g}")
    print(f"cfl_factor={rep.cfl_factor:.17g}")
    print(f"stable={str(rep.stable).lower()}")
    print(f"k_max_stable={1.0 / stability_check(1.0, stack.grid).cfl_factor:.6g}")
    print(f"peak_rise_K={float(stack.rise.max()):.6g}")
    return EXIT_OK


def _add_beam(p):
    p.add_argument("--center", type=float, nargs=2, metavar=("X", "Y"),
                   help="beam centre in pixels (overrides the bundle)")
    p.add_argument("--sigma-px", type=float, help="beam width in pixels")


def build_parser():
    parser = _Parser(prog="tsf", description="Thermal spread function simulation and inversion.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="forward-simulate a config into a bundle")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--noise-sigma", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("recover", help="recover k and eps' maps from a bundle")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="run config supplying the optimizer settings")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr0", type=float)
    p.add_argument("--roi-radius", type=float)
    _add_beam(p)
    p.set_defaults(func=cmd_recover)

    p = sub.add_parser("recover2", help="two-layer recovery")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--thickness-m", type=float, required=True)
    p.add_argument("--config")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr0", type=float)
    _add_beam(p)
    p.set_defaults(func=cmd_recover2)

    p = sub.add_parser("baseline2d", help="per-pixel 2D curve fit")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    _add_beam(p)
    p.set_defaults(func=cmd_baseline2d)

    p = sub.add_parser("gradcheck", help="adjoint vs finite-difference gradients")
    p.add_argument("--config", required=True)
    p.add_argument("--probes", type=int, default=32)
    p.add_argument("--rel-tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("classify", help="classify materials listed in a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--window", type=int, choices=(1, 3, 5), required=True)
    p.add_argument("--model", choices=("centroid", "mlp"), required=True)
    p.add_argument("--loo", action="store_true", help="leave-one-out evaluation")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="optimizer settings for bundles without cached maps")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("info", help="print bundle metadata and stability")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--k", type=float, default=OptimConfig().k_bounds[1],
                   help="diffusivity for the stability report")
    p.set_defaults(func=cmd_info)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (StabilityError, DivergenceError, TrainingError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, FrameStepMismatchError, InvalidArgumentError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
