"""Command-line entry points for the full pipeline.

Exit codes: 0 success, 1 runtime failure (message on stderr), 2 usage error.
The HEAD360_DATA environment variable supplies the default --data directory.
Render output here and over HTTP goes through the same request layer, so the
two produce identical PNG bytes for identical parameters.
"""

from __future__ import annotations

import json
import sys
import zipfile
from io import BytesIO
from pathlib import Path

import click
import numpy as np

from . import api
from .bilinear import build_bilinear_model, reconstruct_tensor, save_model
from .checkpoint import load_checkpoint
from .dataset import DatasetIndex, DatasetSpec, generate_dataset, verify_dataset
from .errors import HeaddError
from .fitting import (FitConfig, fit_single_image, load_fitted, render_fitted,
                      save_fitted, swap_hair)
from .gradients import gradient_check
from .imageops import load_png, psnr, save_png, ssim
from .optimize import TrainConfig, train_head_library


def _fail(message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(1)


def _guard(fn):
    """Map library and I/O failures to exit code 1 with a stderr message."""
    import functools

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except HeaddError as exc:
            _fail(str(exc))
        except OSError as exc:
            _fail(f"{exc}")
        except json.JSONDecodeError as exc:
            _fail(f"bad JSON: {exc}")
    return wrapper


def _csv_floats(text):
    if text is None or text == "":
        return None
    try:
        return [float(x) for x in str(text).split(",")]
    except ValueError:
        raise click.UsageError(f"expected comma-separated numbers, got {text!r}")


def _csv_ints(text):
    values = _csv_floats(text)
    if values is None:
        return None
    out = [int(v) for v in values]
    if any(v != int(v) for v in values):
        raise click.UsageError(f"expected comma-separated integers, got {text!r}")
    return out


@click.group()
@click.version_option(package_name="headd")
def main():
    """Parametric full-head model: data generation, training, fitting, serving."""


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------

@main.command("gen-data")
@click.option("--out", required=True, type=click.Path(), help="Output dataset directory.")
@click.option("--spec", "spec_path", type=click.Path(exists=True, dir_okay=False),
              help="JSON file with dataset settings; flags override its fields.")
@click.option("--identities", type=int, default=None)
@click.option("--expressions", type=int, default=None)
@click.option("--hairstyles", type=int, default=None)
@click.option("--yaw-count", type=int, default=None)
@click.option("--pitch", type=str, default=None, help="Comma-separated pitch angles in degrees.")
@click.option("--size", type=int, default=None, help="Square image size in pixels.")
@click.option("--subdivision", type=int, default=None)
@click.option("--radius", type=float, default=None)
@click.option("--fov", type=float, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--force", is_flag=True, help="Regenerate even when hashes match.")
@_guard
def gen_data(out, spec_path, identities, expressions, hairstyles, yaw_count,
             pitch, size, subdivision, radius, fov, seed, force):
    """Render the procedural dataset (images, masks, meshes, manifest)."""
    base = {}
    if spec_path:
        base = json.loads(Path(spec_path).read_text())
    overrides = {
        "identities": identities, "expressions": expressions,
        "hairstyles": hairstyles, "yaw_count": yaw_count,
        "pitch_angles": _csv_floats(pitch), "image_size": size,
        "subdivision": subdivision, "radius": radius, "fov_deg": fov,
        "seed": seed,
    }
    base.update({k: v for k, v in overrides.items() if v is not None})
    spec = DatasetSpec.from_dict(base)

    out_dir = Path(out)
    manifest_path = out_dir / "manifest.json"
    if manifest_path.exists() and not force:
        manifest = json.loads(manifest_path.read_text())
        if manifest.get("spec") == spec.to_dict() and verify_dataset(out_dir):
            click.echo(_dataset_summary(manifest))
            click.echo("unchanged")
            return
    manifest = generate_dataset(spec, out_dir)
    click.echo(_dataset_summary(manifest))


def _dataset_summary(manifest: dict) -> str:
    spec = manifest["spec"]
    n_images = len(manifest["files"]["images"])
    return (f"identities={spec['identities']} "
            f"expressions={spec['expressions']} images={n_images}")


# ---------------------------------------------------------------------------
# build-model
# ---------------------------------------------------------------------------

@main.command("build-model")
@click.option("--data", envvar="HEAD360_DATA", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--rank", required=True, type=int)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@_guard
def build_model(data, rank, out):
    """Factor the dataset meshes into the bilinear mesh model."""
    index = DatasetIndex(data)
    tensor = index.build_tensor()
    n_ids = tensor.data.shape[1]
    if not 1 <= rank <= n_ids:
        raise click.UsageError(
            f"rank {rank} outside [1, {n_ids}] for {n_ids} identities")
    model = build_bilinear_model(tensor, rank)
    recon = reconstruct_tensor(model)
    err = float(np.linalg.norm(recon - tensor.data) / np.linalg.norm(tensor.data))
    save_model(out, model)
    click.echo(f"recon_err={err:.3e}")
    click.echo(f"saved rank={rank} identities={n_ids} "
               f"expressions={tensor.data.shape[2]} -> {out}")


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

@main.command("train")
@click.option("--data", envvar="HEAD360_DATA", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--resume", is_flag=True, help="Continue from the checkpoint in --out.")
@click.option("--steps-head", type=int, default=None)
@click.option("--steps-hair", type=int, default=None)
@click.option("--rays", "rays_per_step", type=int, default=None)
@click.option("--samples", "samples_per_ray", type=int, default=None)
@click.option("--head-resolution", type=int, default=None)
@click.option("--hair-resolution", type=int, default=None)
@click.option("--channels", type=int, default=None)
@click.option("--rank", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--loss", type=click.Choice(["l1", "l2"]), default=None)
@click.option("--lambda-density", type=float, default=None)
@click.option("--identities", type=str, default=None,
              help="Comma-separated identity ids to train (default: all).")
@click.option("--train-views", type=str, default=None,
              help="Comma-separated camera indices to train on (default: all).")
@click.option("--stop-after", type=int, default=None,
              help="Pause after this many optimizer steps (resume later).")
@click.option("--full-supervision", is_flag=True,
              help="Ablation: train the head phase on full images (hair baked in).")
@click.option("--seed", type=int, default=0)
@_guard
def train(data, out, resume, identities, train_views, full_supervision, seed,
          **overrides):
    """Optimize neural textures, decoders, and hair fields against the dataset."""
    kwargs = {k: v for k, v in overrides.items() if v is not None}
    cfg = TrainConfig(seed=seed, full_supervision=full_supervision, **kwargs)
    if train_views is not None:
        cfg.train_views = tuple(_csv_ints(train_views))
    ids = None
    if identities is not None:
        ids = [x.strip() for x in identities.split(",") if x.strip()]
    report = train_head_library(data, out, cfg, identities=ids, resume=resume)
    line = f"global_step={report['global_step']} finished={report['finished']}"
    if report.get("train_psnr"):
        vals = ", ".join(f"{k}={v:.2f}" for k, v in sorted(report["train_psnr"].items()))
        line += f" train_psnr: {vals}"
    click.echo(line)


# ---------------------------------------------------------------------------
# fit / swap-hair / animate
# ---------------------------------------------------------------------------

@main.command("fit")
@click.option("--checkpoint", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--image", "image_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--mask", "mask_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--landmarks", "landmarks_path", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help='JSON: {"camera": idx|dict, "landmarks": [[vertex, [px, py]], ...]}')
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--camera-index", type=int, default=None,
              help="Use this rig camera instead of the one in the landmarks file.")
@click.option("--texture-steps", type=int, default=None)
@click.option("--harmonize", is_flag=True,
              help="Blend the initial render into the target before optimizing.")
@click.option("--seed", type=int, default=0)
@_guard
def fit(checkpoint, image_path, mask_path, landmarks_path, out, camera_index,
        texture_steps, harmonize, seed):
    """Fit shape, texture, and hairstyle to a single aligned image."""
    ckpt = load_checkpoint(checkpoint)
    landmarks_obj = json.loads(Path(landmarks_path).read_text())
    if camera_index is not None:
        landmarks_obj["camera"] = camera_index
    image = load_png(image_path)
    mask = load_png(mask_path)
    image, mask, pairs, camera, cfg_dict = api.parse_fit_inputs(
        ckpt, image, mask, landmarks_obj)
    cfg_dict = dict(cfg_dict)
    cfg_dict["seed"] = seed
    if texture_steps is not None:
        cfg_dict["texture_steps"] = texture_steps
    if harmonize:
        cfg_dict["poisson_harmonize"] = True
    cfg = FitConfig.from_dict(cfg_dict)
    fitted = fit_single_image(ckpt, image, mask, pairs, camera, cfg)
    save_fitted(out, fitted)
    save_png(Path(out) / "preview.png", render_fitted(ckpt, fitted, camera))
    click.echo(f"hairstyle={fitted.hairstyle} "
               f"landmark_rms={fitted.report['landmark_rms']:.4f} "
               f"psnr={fitted.report['psnr_full']:.2f}")


@main.command("swap-hair")
@click.option("--checkpoint", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--fitted", "fitted_dir", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--style", required=True, type=str)
@click.option("--out", required=True, type=click.Path(file_okay=False))
@_guard
def swap_hair_cmd(checkpoint, fitted_dir, style, out):
    """Re-dress a fitted head with another library hairstyle."""
    ckpt = load_checkpoint(checkpoint)
    fitted = load_fitted(fitted_dir)
    try:
        swapped = swap_hair(fitted, style, ckpt)
    except KeyError as exc:
        _fail(str(exc.args[0]))
    save_fitted(out, swapped)
    save_png(Path(out) / "preview.png", render_fitted(ckpt, swapped))
    click.echo(f"hairstyle={style}")


@main.command("animate")
@click.option("--checkpoint", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--stream", "stream_path", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="JSON render payload with a frames list.")
@click.option("--out", required=True, type=click.Path(),
              help="Output .zip, or a directory to receive the PNG frames.")
@click.option("--max-size", type=int, default=api.DEFAULT_MAX_SIZE)
@_guard
def animate_cmd(checkpoint, stream_path, out, max_size):
    """Render an expression/camera stream to PNG frames."""
    ckpt = load_checkpoint(checkpoint)
    payload = json.loads(Path(stream_path).read_text())
    blob = api.animate_zip(ckpt, payload, max_size=max_size)
    out_path = Path(out)
    if out_path.suffix == ".zip":
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_bytes(blob)
        click.echo(f"frames={len(payload['frames'])} -> {out_path}")
    else:
        out_path.mkdir(parents=True, exist_ok=True)
        with zipfile.ZipFile(BytesIO(blob)) as zf:
            zf.extractall(out_path)
        click.echo(f"frames={len(payload['frames'])} -> {out_path}/")


# ---------------------------------------------------------------------------
# render
# ---------------------------------------------------------------------------

@main.command("render")
@click.option("--checkpoint", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--texture-id", type=str, default=None)
@click.option("--texture-code", type=str, default=None, help="Comma-separated generator code.")
@click.option("--s", "s_text", type=str, default=None, help="Comma-separated identity code.")
@click.option("--activations", type=str, default=None, help="Comma-separated expression activations.")
@click.option("--style", type=str, default=None)
@click.option("--camera-index", type=int, default=None)
@click.option("--camera", "camera_path", type=click.Path(exists=True, dir_okay=False),
              default=None, help="JSON file with an explicit camera.")
@click.option("--size", type=int, default=None)
@click.option("--samples", type=int, default=None)
@click.option("--max-size", type=int, default=api.DEFAULT_MAX_SIZE)
@click.option("--fitted", "fitted_dir", type=click.Path(exists=True, file_okay=False),
              default=None, help="Render a fitted head instead of library codes.")
@click.option("--compare", "compare_path", type=click.Path(exists=True, dir_okay=False),
              default=None, help="Reference image; prints PSNR against it.")
@_guard
def render(checkpoint, out, texture_id, texture_code, s_text, activations, style,
           camera_index, camera_path, size, samples, max_size, fitted_dir,
           compare_path):
    """Render one view of a library identity, explicit codes, or a fitted head."""
    ckpt = load_checkpoint(checkpoint)
    out_path = Path(out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    if fitted_dir is not None:
        fitted = load_fitted(fitted_dir)
        camera = None
        if camera_index is not None:
            camera = ckpt.rig[camera_index]
        elif camera_path is not None:
            from .geometry import Camera
            camera = Camera.from_dict(json.loads(Path(camera_path).read_text()))
        acts = _csv_floats(activations)
        rgb = render_fitted(ckpt, fitted, camera, activations=acts,
                            style=style)
        save_png(out_path, rgb)
    else:
        payload = {}
        if texture_id is not None:
            payload["texture_id"] = texture_id
        if texture_code is not None:
            payload["texture_code"] = _csv_floats(texture_code)
        if s_text is not None:
            payload["s"] = _csv_floats(s_text)
        if activations is not None:
            payload["activations"] = _csv_floats(activations)
        if style is not None:
            payload["hairstyle"] = style
        if camera_path is not None:
            payload["camera"] = json.loads(Path(camera_path).read_text())
        elif camera_index is not None:
            payload["camera"] = camera_index
        if size is not None:
            payload["size"] = size
        if samples is not None:
            payload["samples"] = samples
        out_path.write_bytes(api.render_png(ckpt, payload, max_size=max_size))
    if compare_path is not None:
        ref = load_png(compare_path)
        got = load_png(out_path)
        if ref.ndim == 3 and ref.shape[2] == 4:
            ref = ref[:, :, :3]
        click.echo(f"psnr={psnr(got, ref):.3f}")
    click.echo(f"wrote {out_path}")


# ---------------------------------------------------------------------------
# eval / gradcheck / serve
# ---------------------------------------------------------------------------

@main.command("eval")
@click.option("--ref", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--test", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--csv", "csv_path", type=click.Path(dir_okay=False), default=None,
              help="Also write the table to this file.")
@_guard
def eval_cmd(ref, test, csv_path):
    """PSNR/SSIM table over PNGs with matching names in two directories."""
    ref_dir, test_dir = Path(ref), Path(test)
    names = sorted(p.name for p in ref_dir.glob("*.png")
                   if (test_dir / p.name).exists())
    if not names:
        _fail(f"no matching .png names between {ref_dir} and {test_dir}")
    lines = ["name,psnr,ssim"]
    scores = []
    for name in names:
        a = load_png(ref_dir / name)
        b = load_png(test_dir / name)
        if a.ndim == 3 and a.shape[2] == 4:
            a = a[:, :, :3]
        if b.ndim == 3 and b.shape[2] == 4:
            b = b[:, :, :3]
        p, s = psnr(a, b), ssim(a, b)
        scores.append((p, s))
        lines.append(f"{name},{p:.4f},{s:.6f}")
    mp = float(np.mean([p for p, _ in scores]))
    ms = float(np.mean([s for _, s in scores]))
    lines.append(f"mean,{mp:.4f},{ms:.6f}")
    table = "\n".join(lines)
    click.echo(table)
    if csv_path:
        Path(csv_path).write_text(table + "\n")


@main.command("gradcheck")
@click.option("--seed", type=int, default=0)
@click.option("--resolution", type=int, default=16)
@click.option("--rays", type=int, default=32)
@click.option("--samples", type=int, default=16)
@click.option("--per-block", type=int, default=16)
@click.option("--loss", type=click.Choice(["l1", "l2"]), default="l1")
@_guard
def gradcheck(seed, resolution, rays, samples, per_block, loss):
    """Check analytic gradients against central differences; fails above 1e-3."""
    report = gradient_check(seed=seed, resolution=resolution, n_rays=rays,
                            samples_per_ray=samples, per_block=per_block,
                            loss=loss)
    for key in sorted(report["blocks"]):
        click.echo(f"{key}: {report['blocks'][key]:.3e}")
    click.echo(f"max_rel_err={report['max_rel_err']:.3e} "
               f"checked={report['checked']}")
    if report["max_rel_err"] > 1e-3:
        sys.exit(1)


@main.command("serve")
@click.option("--checkpoint", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--host", type=str, default="127.0.0.1")
@click.option("--port", type=int, default=8000)
@click.option("--max-size", type=int, default=api.DEFAULT_MAX_SIZE)
@click.option("--queue-size", type=int, default=4)
@click.option("--work-dir", type=click.Path(file_okay=False), default=None,
              help="Directory for fit job outputs (default: <checkpoint>/jobs).")
@_guard
def serve(checkpoint, host, port, max_size, queue_size, work_dir):
    """Serve render/animate/fit endpoints over HTTP."""
    import uvicorn

    from .service import create_app

    app = create_app(checkpoint, max_size=max_size, queue_size=queue_size,
                     work_dir=work_dir)
    uvicorn.run(app, host=host, port=port, log_level="info")


if __name__ == "__main__":
    main()
