"""Command-line interface: ``dfddps {simulate,reconstruct,eval,train-prior,psf}``.

Exit codes: 0 success, 2 invalid parameters, 3 unsupported capability,
4 numerical failure, 5 file format / I/O failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import CapabilityError, DfdError, FormatError, NumericalError, ParameterError
from .forward import Observation, RgbdState
from .io import (read_float_map, read_png, read_psf, read_state, state_preview, write_float_map,
                 write_png, write_psf, write_state)
from .metrics import EvalReport, EvalRow, depth_mae, psnr
from .optics import calibrate_reference_psf, rescale_psf
from .pipeline import (config_hash, load_config, make_camera, make_prior, make_psf, make_scene_spec,
                       make_schedule, make_train_config, noise_seed, reconstruct, sampler_seed,
                       scene_seed, simulate_scene)
from .prior import TinyDenoiser, extract_patches, train_denoiser
from .samplers import log_trajectory
from .scenes import generate_scene

log = logging.getLogger("dfddps")

EXIT_OK, EXIT_PARAM, EXIT_CAPABILITY, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4, 5


def _mkdir(path) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise FormatError(f"cannot create {path}: {exc.strerror}") from exc
    return path


def _write_manifest(path, command, cfg, payload) -> None:
    doc = {"command": command, "version": __version__, "config": cfg,
           "config_hash": config_hash(cfg), **payload,
           # the only field that changes between identical runs
           "volatile": {"created_unix": round(time.time(), 3)}}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _read_manifest(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise FormatError(f"cannot read manifest {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: malformed manifest ({exc.msg})", offset=exc.pos) from exc
    doc["_dir"] = str(path.parent)
    return doc


def _plot(path, series, xlabel, ylabel, title, logy=False):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.2), dpi=100)
    for label, (xs, ys) in series.items():
        ax.plot(xs, ys, label=label)
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    if len(series) > 1:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def _depth_image(depth, depth_range):
    d = (np.asarray(depth) - depth_range[0]) / (depth_range[1] - depth_range[0])
    return np.repeat(np.clip(d, 0, 1)[..., None], 3, axis=2)


def _comparison(y_image, recon: RgbdState, truth: RgbdState | None):
    panels = [np.clip(y_image, 0, 1), recon.rgb, _depth_image(recon.depth, recon.depth_range)]
    if truth is not None:
        panels += [truth.rgb, _depth_image(truth.depth, truth.depth_range)]
    gap = np.ones((recon.shape[0], 2, 3))
    out = []
    for p in panels:
        out += [p, gap]
    return np.concatenate(out[:-1], axis=1)


# -- commands ---------------------------------------------------------------

def cmd_simulate(cfg) -> int:
    out = _mkdir(cfg["out"])
    camera, psf = make_camera(cfg), make_psf(cfg)
    write_psf(out / "psf.psf", psf)
    scenes = []
    for i in range(cfg["n_scenes"]):
        spec = make_scene_spec(cfg, i)
        spec.check_camera(camera)
        truth = generate_scene(spec)
        clean, y = simulate_scene(truth, camera, psf, cfg["sigma"], noise_seed(cfg, i))
        sid = f"scene_{i:03d}"
        write_state(out / f"{sid}_truth.rgbd", truth)
        write_float_map(out / f"{sid}_clean.fmap", clean)
        write_float_map(out / f"{sid}_obs.fmap", y.image)
        write_png(out / f"{sid}_obs.png", y.image, bits=16)
        write_png(out / f"{sid}_truth.png", state_preview(truth.encode()))
        scenes.append({"id": sid, "truth": f"{sid}_truth.rgbd", "clean": f"{sid}_clean.fmap",
                       "observation": f"{sid}_obs.fmap", "scene_seed": scene_seed(cfg, i),
                       "noise_seed": noise_seed(cfg, i), "sigma": cfg["sigma"],
                       "observation_psnr_db": psnr(y.image, clean)})
        log.info("%s: sigma=%g observation PSNR %.2f dB", sid, cfg["sigma"], scenes[-1]["observation_psnr_db"])
    _write_manifest(out / "manifest.json", "simulate", cfg,
                    {"psf": "psf.psf", "camera": camera.to_dict(), "scenes": scenes})
    print(f"wrote {len(scenes)} scenes to {out}")
    return EXIT_OK


def cmd_reconstruct(cfg, inputs) -> int:
    sim = _read_manifest(inputs)
    src = Path(sim["_dir"])
    out = _mkdir(cfg["out"])
    method = cfg["method"]
    camera = make_camera({"camera": sim["camera"]})
    psf = read_psf(src / sim["psf"])
    h, w = cfg["scene"]["height"], cfg["scene"]["width"]
    prior = schedule = None
    if method != "baseline":
        schedule = make_schedule(cfg)
        prior = make_prior(cfg, (h, w, 4))
    rows = []
    for i, entry in enumerate(sim["scenes"]):
        image = read_float_map(src / entry["observation"])
        y = Observation(image, entry["sigma"], camera, psf)
        seed = sampler_seed(cfg, i)
        state, traj = reconstruct(method, y, cfg, seed, prior=prior, schedule=schedule)
        sid = entry["id"]
        write_state(out / f"{sid}_recon.rgbd", state)
        truth = read_state(src / entry["truth"]) if entry.get("truth") else None
        write_png(out / f"{sid}_compare.png", _comparison(image, state, truth))
        row = {"id": sid, "recon": f"{sid}_recon.rgbd", "sampler_seed": seed,
               "observation": str(src / entry["observation"])}
        if traj is not None:
            log_trajectory(traj, out / f"{sid}_trajectory")
            _plot(out / f"{sid}_trajectory" / "fidelity.png",
                  {method: (traj.times, traj.fidelities)}, "diffusion step t",
                  "||y - f(x0_hat)||^2", sid, logy=True)
            row["trajectory"] = f"{sid}_trajectory/trajectory.csv"
        rows.append(row)
        log.info("%s: reconstructed with %s", sid, method)
    _write_manifest(out / "manifest.json", "reconstruct", cfg,
                    {"method": method, "inputs": str(src / "manifest.json"),
                     "input_config_hash": sim.get("config_hash"), "scenes": rows})
    print(f"wrote {len(rows)} reconstructions ({method}) to {out}")
    return EXIT_OK


def cmd_eval(cfg, truth_path, recon_paths, border: int) -> int:
    sim = _read_manifest(truth_path)
    src = Path(sim["_dir"])
    truth = {e["id"]: e for e in sim["scenes"]}
    report = EvalReport()
    for rp in recon_paths:
        rec = _read_manifest(rp)
        rdir = Path(rec["_dir"])
        ids = [e["id"] for e in rec["scenes"]]
        if set(ids) - set(truth):
            raise ParameterError(f"{rp}: scenes {sorted(set(ids) - set(truth))} not in {truth_path}")
        for e in rec["scenes"]:
            t = truth[e["id"]]
            gt = read_state(src / t["truth"])
            est = read_state(rdir / e["recon"])
            if gt.shape != est.shape:
                raise ParameterError(f"{e['id']}: reconstruction shape {est.shape} != truth {gt.shape}")
            report.add(EvalRow(e["id"], rec.get("method", "unknown"), float(t["sigma"]),
                               int(e.get("sampler_seed", 0)), depth_mae(est.depth, gt.depth, border),
                               psnr(est.rgb, gt.rgb, border)))
    out = _mkdir(cfg["out"])
    report.write_csv(out / "report.csv")
    summary = report.summary()
    methods = sorted({r.method for r in report.rows})
    for i, a in enumerate(methods):
        for b in methods[i + 1:]:
            for sigma, frac in report.paired_wins(a, b).items():
                summary += f"{a} beats {b} in depth MAE at sigma={sigma:g}: {frac:.0%} of scenes\n"
    (out / "summary.txt").write_text(summary)
    agg = report.aggregate()
    _plot(out / "depth_mae.png",
          {m: ([s for (mm, s) in agg if mm == m], [agg[(mm, s)]["depth_mae"] for (mm, s) in agg if mm == m])
           for m in methods}, "sigma", "mean depth MAE (m)", "depth error by method")
    print(summary, end="")
    return EXIT_OK


def cmd_train_prior(cfg, data_path=None) -> int:
    out = _mkdir(cfg["out"])
    t = cfg["train"]
    schedule = make_schedule(cfg)
    if data_path:
        sim = _read_manifest(data_path)
        states = [read_state(Path(sim["_dir"]) / e["truth"]).encode() for e in sim["scenes"]]
    else:
        states = []
        for i in range(t["n_train_scenes"]):
            spec = make_scene_spec(cfg, 0)
            fields = spec.to_dict()
            fields["seed"] = t["train_scene_seed"] + i
            states.append(generate_scene(type(spec).from_dict(fields)).encode())
    patches = extract_patches(states, t["patch"], t["n_patches"], seed=cfg["seed"])
    model = TinyDenoiser.load(t["resume"]) if t["resume"] else None
    tcfg = make_train_config(cfg)
    model = train_denoiser(patches, schedule, tcfg, model=model, curve_path=out / "loss_curve.csv",
                           hidden=tuple(t["hidden"]))
    model.save(out / "denoiser.ckpt")
    if model.curve:
        steps, losses = zip(*model.curve)
        _plot(out / "loss_curve.png", {"train": (steps, losses)}, "step", "eps loss", "denoiser training",
              logy=True)
    _write_manifest(out / "manifest.json", "train-prior", cfg,
                    {"checkpoint": "denoiser.ckpt", "n_patches": int(len(patches)), "step": model.step,
                     "final_loss": model.curve[-1][1] if model.curve else None})
    print(f"checkpoint at step {model.step} written to {out / 'denoiser.ckpt'}")
    return EXIT_OK


def cmd_psf(args, cfg) -> int:
    if args.action == "inspect":
        psf = read_psf(args.path)
        sums = psf.channel_sums()
        c = (psf.size - 1) // 2
        print(f"size {psf.size}x{psf.size}  pitch {psf.pixel_pitch:g} m  reference depth {psf.reference_depth:g} m")
        for name, k, s in zip("RGB", psf.kernels, sums):
            rows, cols = np.nonzero(k)
            total = k.sum()
            cy = float((np.arange(psf.size)[:, None] * k).sum() / total) - c
            cx = float((np.arange(psf.size)[None, :] * k).sum() / total) - c
            print(f"{name}: sum {s:.6f}  support rows {rows.min()}..{rows.max()} cols {cols.min()}..{cols.max()}"
                  f"  centroid offset ({cy:+.3f}, {cx:+.3f})")
        return EXIT_OK
    out = Path(args.out)
    if args.action == "rescale":
        write_psf(out, rescale_psf(read_psf(args.path), args.scale))
        print(f"wrote PSF rescaled by {args.scale:g} to {out}")
        return EXIT_OK
    camera = make_camera(cfg)
    frame = _read_frame(args.path)
    background = _read_frame(args.background) if args.background else np.zeros_like(frame)
    psf = calibrate_reference_psf(frame, background, args.k, pixel_pitch=camera.pixel_pitch,
                                  reference_depth=camera.reference_depth)
    write_psf(out, psf)
    print(f"wrote calibrated {psf.size}x{psf.size} PSF to {out}")
    return EXIT_OK


def _read_frame(path):
    return read_png(path) if str(path).lower().endswith(".png") else read_float_map(path)


# -- argument parsing ---------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--sigma", type=float, help="observation noise standard deviation")
    common.add_argument("--out", help="output directory (file for psf rescale/calibrate)")
    common.add_argument("--steps", type=int, help="diffusion steps (training steps for train-prior)")
    common.add_argument("--tau", type=float, help="DFD-DPS base step size")
    common.add_argument("--variant", choices=("as_written", "ddpm_posterior"))
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="dfddps", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="generate scenes and noisy observations")
    p.add_argument("--n-scenes", type=int)

    p = sub.add_parser("reconstruct", parents=[common], help="reconstruct AIF image and depth")
    p.add_argument("--input", required=True, help="simulate output directory or manifest")
    p.add_argument("--method", choices=("dfd_dps", "dps", "ddpm_prior_only", "baseline"))
    p.add_argument("--checkpoint", help="TinyDenoiser checkpoint (prior.kind = denoiser)")

    p = sub.add_parser("eval", parents=[common], help="score reconstructions against ground truth")
    p.add_argument("--truth", required=True, help="simulate output directory or manifest")
    p.add_argument("--recon", required=True, nargs="+", help="reconstruct output directories")
    p.add_argument("--border", type=int, default=0, help="ignore this many boundary pixels")

    p = sub.add_parser("train-prior", parents=[common], help="train the patch denoiser prior")
    p.add_argument("--data", help="simulate output whose ground truths supply the patches")
    p.add_argument("--resume", help="checkpoint to resume from")

    p = sub.add_parser("psf", parents=[common], help="inspect, rescale or calibrate a PSF")
    p.add_argument("action", choices=("inspect", "rescale", "calibrate"))
    p.add_argument("path", help="PSF file (inspect/rescale) or pinhole frame (calibrate)")
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--background", help="dark frame for calibrate")
    p.add_argument("--k", type=int, default=7, help="calibrated kernel size")
    return parser


def _overrides(args) -> dict:
    ov = {"seed": args.seed, "sigma": args.sigma, "out": args.out,
          "sampler.tau": args.tau, "sampler.variant": args.variant}
    if args.command == "train-prior":
        ov["train.steps"] = args.steps
        ov["train.resume"] = args.resume
    else:
        ov["schedule.n_steps"] = args.steps
    if getattr(args, "method", None):
        ov["method"] = args.method
    if getattr(args, "checkpoint", None):
        ov["prior.checkpoint"] = args.checkpoint
        ov["prior.kind"] = "denoiser"
    if getattr(args, "n_scenes", None) is not None:
        ov["n_scenes"] = args.n_scenes
    return ov


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, _overrides(args))
        if args.command == "simulate":
            return cmd_simulate(cfg)
        if args.command == "reconstruct":
            return cmd_reconstruct(cfg, args.input)
        if args.command == "eval":
            return cmd_eval(cfg, args.truth, args.recon, args.border)
        if args.command == "train-prior":
            return cmd_train_prior(cfg, args.data)
        return cmd_psf(args, cfg)
    except ParameterError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARAM
    except CapabilityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CAPABILITY
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (FormatError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except DfdError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


def main(argv=None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
