"""Operator entry points: dataset generation, ground-truth planes, training,
reconstruction, evaluation, and visibility inspection.

Option resolution order is defaults, then the optional config file (one
``[section]`` per subcommand, ``key=value`` lines), then command-line flags.
Each run writes its fully resolved configuration and seed next to its
artifacts. ``OPLANES_DETERMINISTIC=1`` forces deterministic mode;
``OPLANES_THREADS`` caps BLAS worker threads (best effort).
"""

from __future__ import annotations

import configparser
import os

import click
import numpy as np

from .camera import FrustumRange, compute_depth_range, load_camera
from .infer import ReconstructionConfig, reconstruct
from .mesh import OracleUnavailableError, is_watertight, load_mesh, save_mesh
from .metrics import MetricReport, chamfer_l1, format_report_table, icp_register, \
    normal_consistency, visibility_binning, visibility_level, volumetric_iou, \
    write_report_csv
from .model import ModelConfig, OPlanesModel, load_checkpoint
from .planes import gt_oplane_stack, save_oplane_stack
from .synth import SceneSpec, load_manifest, load_sample, write_dataset
from .train import TrainConfig, fit

__all__ = ["main"]


def _limit_threads():
    n = os.environ.get("OPLANES_THREADS")
    if not n:
        return
    try:
        import threadpoolctl
        threadpoolctl.threadpool_limits(int(n))
    except (ImportError, ValueError):
        pass


def _deterministic(flag=True):
    return flag or os.environ.get("OPLANES_DETERMINISTIC") == "1"


def _cast_like(default, raw):
    if isinstance(default, bool):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def _resolve(ctx, section, **values):
    """Overlay config-file values onto click defaults; explicit flags win."""
    path = (ctx.obj or {}).get("config")
    if not path:
        return values
    parser = configparser.ConfigParser()
    with open(path) as f:
        parser.read_file(f)
    if not parser.has_section(section):
        return values
    from click.core import ParameterSource
    for key, raw in parser.items(section):
        name = key.replace("-", "_")
        if name not in values:
            raise click.UsageError(f"unknown option {key!r} in config section [{section}]")
        if ctx.get_parameter_source(name) == ParameterSource.DEFAULT:
            values[name] = _cast_like(values[name], raw)
    return values


def _write_run_config(out_dir, section, values):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "run_config.txt"), "w") as f:
        f.write(f"[{section}]\n")
        for key in sorted(values):
            f.write(f"{key}={values[key]}\n")


@click.group()
@click.option("--config", "-c", type=click.Path(exists=True, dir_okay=False),
              default=None, help="Config file with one [section] per subcommand.")
@click.pass_context
def main(ctx, config):
    """Occupancy-plane reconstruction toolkit."""
    _limit_threads()
    ctx.obj = {"config": config}


@main.command("gen-data")
@click.option("--spec", "shape", type=click.Choice(["sphere", "capsule", "box", "figure"]),
              default="sphere", show_default=True, help="Shape family.")
@click.option("--visibility", type=click.Choice(["none", "crop", "occluder"]),
              default="none", show_default=True)
@click.option("--n", type=int, default=4, show_default=True, help="Samples to generate.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--split", default="train", show_default=True)
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.pass_context
def cmd_gen_data(ctx, **kw):
    """Generate a synthetic RGB-D dataset with ground-truth meshes."""
    v = _resolve(ctx, "gen-data", **kw)
    spec = SceneSpec(shape=v["shape"], visibility=v["visibility"])
    write_dataset([spec], v["n"], v["out"], seed=v["seed"], split=v["split"])
    _write_run_config(v["out"], "gen-data", v)
    click.echo(f"wrote {v['n']} samples to {v['out']}")


@main.command("gt-oplanes")
@click.option("--sample", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--planes", type=int, default=64, show_default=True)
@click.option("--res", type=int, default=64, show_default=True,
              help="Plane resolution (must divide the camera resolution).")
@click.option("--out", type=click.Path(dir_okay=False), default=None,
              help="Output OPLN path [default: <sample>/gt.opln].")
@click.pass_context
def cmd_gt_oplanes(ctx, **kw):
    """Compute ground-truth occupancy planes for one sample."""
    v = _resolve(ctx, "gt-oplanes", **kw)
    s = load_sample(v["sample"])
    if not is_watertight(s.mesh):
        raise click.ClickException("inside/outside oracle unavailable: mesh is not watertight")
    z_min = float(np.asarray(s.depth)[s.mask].min())
    frustum = FrustumRange(z_min, z_min + s.z_range)
    zs = np.linspace(frustum.z_min, frustum.z_max, v["planes"])
    try:
        stack = gt_oplane_stack(s.mesh, s.cam, zs, (v["res"], v["res"]), frustum=frustum)
    except (ValueError, OracleUnavailableError) as e:
        raise click.ClickException(str(e))
    out = v["out"] or os.path.join(v["sample"], "gt.opln")
    save_oplane_stack(stack, out)
    click.echo(f"wrote {v['planes']} planes at {v['res']}x{v['res']} to {out}")


@main.command("train")
@click.option("--data", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", type=click.Path(file_okay=False), default="run", show_default=True)
@click.option("--desk/--paper", default=True, show_default=True,
              help="Model size preset.")
@click.option("--iters", type=int, default=None, help="Iteration count (overrides epochs).")
@click.option("--epochs", type=int, default=15, show_default=True)
@click.option("--batch", type=int, default=4, show_default=True)
@click.option("--n-planes", type=int, default=10, show_default=True,
              help="Random plane depths per mesh per iteration.")
@click.option("--lr", type=float, default=0.001, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--ablate-spatial-1x1", is_flag=True,
              help="Replace the 3x3 spatial-head kernels with 1x1.")
@click.option("--ablate-no-coarse-loss", is_flag=True,
              help="Drop the coarse inner-product loss term.")
@click.option("--resume", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Checkpoint to continue from.")
@click.pass_context
def cmd_train(ctx, **kw):
    """Train the occupancy-plane predictor on a generated dataset."""
    v = _resolve(ctx, "train", **kw)
    samples = [load_sample(d) for d in load_manifest(v["data"])]
    start = 0
    if v["resume"]:
        model, extra = load_checkpoint(v["resume"])
        if model.config.spatial_1x1 != v["ablate_spatial_1x1"]:
            raise click.ClickException("checkpoint ablation setting conflicts with flags")
        start = int(extra.get("iteration", 0))
    else:
        mk = ModelConfig.desk if v["desk"] else ModelConfig.paper
        model = OPlanesModel(mk(spatial_1x1=v["ablate_spatial_1x1"]), seed=v["seed"])
    cfg = TrainConfig(lr=v["lr"], batch_size=v["batch"], epochs=v["epochs"],
                      n_planes=v["n_planes"], seed=v["seed"], iterations=v["iters"],
                      use_coarse_loss=not v["ablate_no_coarse_loss"],
                      deterministic=_deterministic())
    os.makedirs(v["out"], exist_ok=True)
    _write_run_config(v["out"], "train", v)
    log = fit(model, samples, cfg, out_dir=v["out"],
              log_path=os.path.join(v["out"], "loss.csv"), start_iteration=start)
    click.echo(f"final loss {log[-1]['total']:.6f} after {len(log)} iterations; "
               f"artifacts in {v['out']}")


@main.command("infer")
@click.option("--ckpt", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--sample", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--planes", type=int, default=256, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None,
              help="Output OBJ path [default: <sample>/pred.obj].")
@click.option("--dump-planes", type=click.Path(dir_okay=False), default=None,
              help="Also write the predicted plane stack as OPLN.")
@click.option("--z-range", type=float, default=2.0, show_default=True,
              help="Depth window extent past the closest masked depth.")
@click.option("--mask-gating/--no-mask-gating", default=True, show_default=True)
@click.option("--front-zeroing", is_flag=True,
              help="Zero probabilities in front of the observed surface.")
@click.pass_context
def cmd_infer(ctx, **kw):
    """Reconstruct a camera-space mesh from one RGB-D sample."""
    v = _resolve(ctx, "infer", **kw)
    model, _ = load_checkpoint(v["ckpt"])
    s = load_sample(v["sample"])
    cfg = ReconstructionConfig(n_planes=v["planes"], z_range=v["z_range"],
                               mask_gating=v["mask_gating"],
                               front_zeroing=v["front_zeroing"])
    mesh, stack = reconstruct(model, s.rgb, s.depth, s.mask, s.cam, cfg)
    out = v["out"] or os.path.join(v["sample"], "pred.obj")
    save_mesh(mesh, out)
    if v["dump_planes"]:
        save_oplane_stack(stack, v["dump_planes"], binary=False)
    _write_run_config(os.path.dirname(out) or ".", "infer", v)
    click.echo(f"wrote {len(mesh.faces)} faces to {out}")


def _eval_one(pred_path, sample_dir, seed, icp, z_range):
    s = load_sample(sample_dir)
    pred = load_mesh(pred_path)
    gt = s.mesh
    if icp and not pred.is_empty:
        xf = icp_register(pred, gt, seed=seed)
        pred = pred.transformed(xf.rotation, xf.translation)
    frustum = compute_depth_range(s.depth, s.mask, z_range=z_range)
    iou = volumetric_iou(pred, gt, s.cam, frustum, seed=seed)
    if pred.is_empty:
        cd, nc = float("inf"), 0.0
    else:
        cd = chamfer_l1(pred, gt, seed=seed)
        nc = normal_consistency(pred, gt, seed=seed)
    return MetricReport(iou=iou, chamfer_l1=cd, normal_consistency=nc,
                        n_samples=100_000, seed=seed, name=s.name,
                        visibility=s.visibility)


@main.command("eval")
@click.option("--pred", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Predicted OBJ (single-sample mode).")
@click.option("--sample", type=click.Path(exists=True, file_okay=False), default=None)
@click.option("--pred-dir", type=click.Path(exists=True, file_okay=False), default=None,
              help="Directory of <name>.obj predictions (dataset mode).")
@click.option("--data", type=click.Path(exists=True, file_okay=False), default=None)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--icp", is_flag=True, help="Rigidly register predictions before scoring.")
@click.option("--by-visibility", is_flag=True, help="Also print the binned table.")
@click.option("--z-range", type=float, default=2.0, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="CSV path.")
@click.pass_context
def cmd_eval(ctx, **kw):
    """Score predicted meshes against ground truth."""
    v = _resolve(ctx, "eval", **kw)
    if v["pred"] and v["sample"]:
        pairs = [(v["pred"], v["sample"])]
    elif v["pred_dir"] and v["data"]:
        pairs = [(os.path.join(v["pred_dir"], os.path.basename(d) + ".obj"), d)
                 for d in load_manifest(v["data"])]
    else:
        raise click.UsageError("need --pred with --sample, or --pred-dir with --data")
    reports = [_eval_one(p, s, v["seed"], v["icp"], v["z_range"]) for p, s in pairs]
    click.echo(format_report_table(reports))
    if v["by_visibility"]:
        rows = visibility_binning([r.visibility for r in reports], reports)
        click.echo(f"\n{'bin':<14} {'count':>5} {'IoU ^':>8} {'Chamfer v':>10} {'Normal ^':>9}")
        for row in rows:
            click.echo(f"{row['bin']:<14} {row['count']:>5} {row['iou']:>8.4f} "
                       f"{row['chamfer_l1']:>10.4f} {row['normal_consistency']:>9.4f}")
    if v["out"]:
        write_report_csv(reports, v["out"])
        _write_run_config(os.path.dirname(v["out"]) or ".", "eval", v)


@main.command("visibility")
@click.option("--sample", type=click.Path(exists=True, file_okay=False), default=None)
@click.option("--mesh", "mesh_path", type=click.Path(exists=True, dir_okay=False),
              default=None)
@click.option("--camera", "camera_path", type=click.Path(exists=True, dir_okay=False),
              default=None)
@click.option("--n", type=int, default=100_000, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.pass_context
def cmd_visibility(ctx, **kw):
    """Report the fraction of the shape's volume visible in the image."""
    v = _resolve(ctx, "visibility", **kw)
    if v["sample"]:
        s = load_sample(v["sample"])
        mesh, cam = s.mesh, s.cam
    elif v["mesh_path"] and v["camera_path"]:
        mesh = load_mesh(v["mesh_path"])
        cam = load_camera(v["camera_path"])
    else:
        raise click.UsageError("need --sample, or --mesh with --camera")
    level = visibility_level(mesh, cam, n=v["n"], seed=v["seed"])
    click.echo(f"visibility={level:.4f}")


if __name__ == "__main__":
    main()
