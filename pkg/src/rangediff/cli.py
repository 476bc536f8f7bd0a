"""Command-line entry point: ``rangediff <verb> [options]``.

Exit codes: 0 success, 2 configuration error, 3 I/O or parse error,
4 numerical-validation failure.
"""
from __future__ import annotations

import argparse
import csv
import sys
import time
from pathlib import Path

import numpy as np

from . import norm
from .boxes import read_box_csv, write_box_csv
from .config import ExperimentConfig, load_config
from .denoiser import (load_checkpoint, save_checkpoint, sample, train)
from .diffusion import make_linear_schedule
from .errors import ConfigError, FormatError, InvalidStride
from .imageops import composite_replacement, range_composite, write_pgm
from .metrics import reconstruction_report
from .rangeview import (PointCloud, pixel_assignment, project, read_cloud, read_cloud_csv,
                        read_view, reconstruct, write_cloud, write_view)
from .scenes import SceneConfig, synth_scene

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class ValidationFailure(Exception):
    """A numerical self-check exceeded its tolerance."""


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _load_cloud(path) -> PointCloud:
    return read_cloud_csv(path) if str(path).lower().endswith(".csv") else read_cloud(path)


# --------------------------------------------------------------------------
# verbs

def cmd_synth_scene(cfg: ExperimentConfig, out: Path) -> dict:
    cloud, box, n_bg = synth_scene(cfg.seed, cfg.scene)
    write_cloud(out / "scene.rdpc", cloud)
    write_box_csv(out / "box.csv", box)
    return {"points": len(cloud), "background": n_bg, "object": len(cloud) - n_bg}


def roundtrip_stats(cloud: PointCloud) -> dict:
    rows, cols, depth, _, _, keep = pixel_assignment(cloud)
    in_range = rows >= 0
    view = project(cloud)
    rec = reconstruct(view)
    # reconstruct emits row-major pixel order; sort the retained inputs the same way
    order = np.argsort(rows[keep] * view.W + cols[keep], kind="stable")
    ref = cloud.points[keep][order]
    err = np.abs(rec.points[:, :3] - ref[:, :3]) if len(ref) else np.zeros((0, 3))
    return {
        "input_points": len(cloud),
        "in_range": int(in_range.sum()),
        "retained": int(keep.sum()),
        "collisions": int(in_range.sum() - keep.sum()),
        "max_error_m": float(err.max()) if err.size else 0.0,
        "mean_error_m": float(err.mean()) if err.size else 0.0,
    }


def cmd_roundtrip(in_cloud, out: Path) -> dict:
    stats = roundtrip_stats(_load_cloud(in_cloud))
    _write_csv(out / "roundtrip.csv", list(stats), [list(stats.values())])
    return stats


def cmd_normalize_check(cfg: ExperimentConfig, out: Path, n: int = 100_000,
                        tol: float = 1e-9) -> dict:
    rng = np.random.default_rng(cfg.seed)
    d = rng.uniform(norm.MIN_DEPTH, norm.MAX_DEPTH, n)
    dn = norm.depth_linear_norm(d)
    lo, hi = np.sort(rng.uniform(-1, 1, 2))
    p = norm.DepthNormParams(cfg.norm_alpha, lo, hi)
    i = rng.uniform(0, 255, n)
    g = rng.random((64, 64))
    checks = {
        "depth_linear": np.abs(norm.depth_linear_denorm(dn) - d).max(),
        "depth_object": np.abs(norm.depth_object_denorm(norm.depth_object_norm(dn, p), p) - dn).max(),
        "intensity": np.abs(norm.intensity_denorm(norm.intensity_norm(i, cfg.norm_lambda),
                                                  cfg.norm_lambda) - i).max(),
        "upscale_pool": max(np.abs(norm.avg_pool_downscale(norm.nn_upscale(g, f), f) - g).max()
                            for f in (2, 4, 16)),
    }
    _write_csv(out / "normalize.csv", ["map", "max_abs_error", "pass"],
               [[k, f"{v:.3e}", v < tol] for k, v in checks.items()])
    bad = [k for k, v in checks.items() if not v < tol]
    if bad:
        raise ValidationFailure(f"round-trip error above {tol} for: {', '.join(bad)}")
    return {k: float(v) for k, v in checks.items()}


def cmd_train_toy(cfg: ExperimentConfig, out: Path, log=print) -> dict:
    schedule = cfg.schedule.build()
    t0 = time.perf_counter()
    res = train(cfg.denoiser(), cfg.training, schedule, seed=cfg.seed,
                log_every=max(cfg.training.steps // 10, 0), log=log)
    meta = {"schedule": {"T": cfg.schedule.T, "family": cfg.schedule.family,
                         "beta_start": cfg.schedule.beta_start, "beta_end": cfg.schedule.beta_end,
                         "sigma_choice": cfg.schedule.sigma_choice},
            "dataset": cfg.training.dataset, "n_freq": cfg.n_freq, "seed": cfg.seed,
            "steps": cfg.training.steps}
    save_checkpoint(out / "checkpoint.rdcp", res.params, meta)
    _write_csv(out / "loss.csv", ["step", "loss"],
               [[i + 1, f"{v:.8g}"] for i, v in enumerate(res.losses)])
    summary = {"steps": cfg.training.steps, "seconds": round(time.perf_counter() - t0, 2)}
    if len(res.losses):
        k = max(1, min(500, len(res.losses) // 10))
        summary["initial_loss"] = float(res.losses[:k].mean())
        summary["final_loss"] = float(res.losses[-k:].mean())
    return summary


def cmd_sample(checkpoint, sampler: str, steps: int, cfg_scale: float, n: int, out: Path,
               seed: int = 0, label: int | None = None) -> dict:
    params, meta = load_checkpoint(checkpoint)
    sch = meta["schedule"]
    schedule = make_linear_schedule(sch["T"], sch["beta_start"], sch["beta_end"])
    if sampler == "ddim":
        from .diffusion import ddim_timesteps
        ddim_timesteps(schedule.T, steps)  # validates the stride up front
    rng = np.random.default_rng(seed)
    pts = sample(params, schedule, n, rng, sampler=sampler, steps=steps, labels=label,
                 cfg_scale=cfg_scale, dataset=meta["dataset"], n_freq=meta["n_freq"],
                 sigma_choice=sch["sigma_choice"])
    _write_csv(out / "samples.csv", ["x", "y"], [[f"{a:.9g}", f"{b:.9g}"] for a, b in pts])
    return {"n": n, "sampler": sampler, "steps": steps if sampler == "ddim" else schedule.T}


def edited_scene(cloud: PointCloud, box, shift) -> tuple[PointCloud, object]:
    """Move the points inside ``box`` by ``shift``; returns the edited cloud and new box."""
    from .boxes import points_in_box
    inside = points_in_box(cloud.xyz, box)
    pts = cloud.points.copy()
    pts[inside, :3] += shift
    return PointCloud(pts), box.translated(shift)


def cmd_composite_demo(scene, box_path, out: Path, shift=(0.0, 0.0, 0.0)) -> dict:
    cloud = _load_cloud(scene)
    box = read_box_csv(box_path)
    shift = np.asarray(shift, dtype=np.float64)
    edited_cloud, new_box = edited_scene(cloud, box, shift)
    original = project(cloud)
    edited = project(edited_cloud)
    replaced = composite_replacement(original, edited, new_box)
    result = range_composite(original, edited, new_box)
    write_view(out / "composite.rdrv", result)
    write_view(out / "original.rdrv", original)
    for tag, view in (("before", original), ("after", result)):
        write_pgm(out / f"depth_{tag}.pgm", np.where(view.occupancy, view.depth, 0.0),
                  0.0, norm.MAX_DEPTH)
        write_pgm(out / f"intensity_{tag}.pgm", view.intensity, 0.0, 255.0)
    write_pgm(out / "replaced.pgm", replaced.astype(float))
    r, c = np.nonzero(replaced)
    _write_csv(out / "replaced.csv", ["row", "col"], zip(r.tolist(), c.tolist()))
    return {"replaced_pixels": int(replaced.sum()), "unchanged": bool(result.equals(original))}


def cmd_metrics(reference, candidate, box_path, out: Path) -> dict:
    ref, cand = read_view(reference), read_view(candidate)
    report = reconstruction_report(ref, cand, read_box_csv(box_path))
    _write_csv(out / "metrics.csv", ["metric", "value"], [[k, v] for k, v in report.items()])
    return report


def cmd_schedule_dump(cfg: ExperimentConfig, out: Path) -> dict:
    s = cfg.schedule.build()
    rows = [[t + 1, f"{s.beta[t]:.10g}", f"{s.alpha[t]:.10g}", f"{s.alpha_bar[t]:.10g}",
             f"{s.beta_tilde[t]:.10g}"] for t in range(s.T)]
    _write_csv(out / "schedule.csv", ["t", "beta", "alpha", "alpha_bar", "beta_tilde"], rows)
    return {"T": s.T, "alpha_bar_T": float(s.alpha_bar[-1])}


# --------------------------------------------------------------------------

def _triple(text: str):
    vals = [float(v) for v in text.split(",")]
    if len(vals) != 3:
        raise argparse.ArgumentTypeError("expected dx,dy,dz")
    return vals


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rangediff", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI experiment config (see rangediff.config)")
    common.add_argument("--seed", type=int, help="overrides [experiment] seed")
    common.add_argument("--out", default=".", help="output directory")
    sub = ap.add_subparsers(dest="verb", required=True)

    sub.add_parser("synth-scene", parents=[common], help="write a synthetic sweep and its box")
    p = sub.add_parser("roundtrip", parents=[common], help="project and reconstruct a cloud")
    p.add_argument("cloud", help=".rdpc or .csv point cloud")
    sub.add_parser("normalize-check", parents=[common], help="round-trip every normalisation")
    sub.add_parser("train-toy", parents=[common], help="train the toy denoiser")
    p = sub.add_parser("sample", parents=[common], help="draw samples from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sampler", choices=("ddim", "ddpm"), default="ddim")
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--cfg-scale", type=float, default=5.0)
    p.add_argument("--label", type=int, help="condition on this class; omit for unconditional")
    p.add_argument("-n", type=int, default=1000)
    p = sub.add_parser("composite-demo", parents=[common], help="move the object and composite")
    p.add_argument("--scene", required=True)
    p.add_argument("--box", required=True)
    p.add_argument("--shift", type=_triple, default=[2.0, -1.5, 0.0], help="dx,dy,dz in metres")
    p = sub.add_parser("metrics", parents=[common], help="masked depth/intensity errors")
    p.add_argument("--reference", required=True)
    p.add_argument("--candidate", required=True)
    p.add_argument("--box", required=True)
    sub.add_parser("schedule-dump", parents=[common], help="write the noise schedule table")
    return ap


def _print_table(result: dict) -> None:
    width = max((len(k) for k in result), default=0)
    for k, v in result.items():
        print(f"{k:<{width}}  {v:.6g}" if isinstance(v, float) else f"{k:<{width}}  {v}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config).with_seed(args.seed)
        out = _out_dir(args)
        seed = cfg.seed
        v = args.verb
        if v == "synth-scene":
            res = cmd_synth_scene(cfg, out)
        elif v == "roundtrip":
            res = cmd_roundtrip(args.cloud, out)
        elif v == "normalize-check":
            res = cmd_normalize_check(cfg, out)
        elif v == "train-toy":
            res = cmd_train_toy(cfg, out)
        elif v == "sample":
            res = cmd_sample(args.checkpoint, args.sampler, args.steps, args.cfg_scale, args.n,
                             out, seed=seed, label=args.label)
        elif v == "composite-demo":
            res = cmd_composite_demo(args.scene, args.box, out, args.shift)
        elif v == "metrics":
            res = cmd_metrics(args.reference, args.candidate, args.box, out)
        else:
            res = cmd_schedule_dump(cfg, out)
    except (ConfigError, InvalidStride) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValidationFailure as exc:
        print(f"validation failed: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    _print_table(res)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
