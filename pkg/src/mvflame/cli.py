"""Command-line interface: fit, render, eval, make-mini.

Landmark files are JSON ``{"points": [[x, y] * 68]}`` in pixel coordinates
with the origin at the top-left image corner.  Camera files follow the
Camera JSON schema.  All commands are deterministic given identical inputs.
"""

import json
import os
import sys

import click
import numpy as np

from mvflame import imgio, objio
from mvflame.assets import load_assets, make_mini_model, save_assets
from mvflame.camera import Camera
from mvflame.decoder import FlameParams, decode, embed_landmarks
from mvflame.fitter import FitConfig, ViewObservation, fit
from mvflame.flow import estimate_flow_lk, flow_to_color
from mvflame.losses import LossWeights
from mvflame.metrics import evaluate_pair
from mvflame.renderer import SHLighting, rasterize, render
from mvflame import covis


def _fail(message):
    click.echo(f"error: {message}", err=True)
    sys.exit(1)


def _resize_bilinear(image, height, width):
    from scipy import ndimage

    h, w = image.shape[:2]
    gy = (np.arange(height) + 0.5) * (h / height) - 0.5
    gx = (np.arange(width) + 0.5) * (w / width) - 0.5
    cy, cx = np.meshgrid(gy, gx, indexing="ij")
    out = np.empty((height, width, image.shape[2]))
    for c in range(image.shape[2]):
        out[:, :, c] = ndimage.map_coordinates(image[:, :, c], [cy, cx],
                                               order=1, mode="nearest")
    return out


def _load_view(spec, resolution, index):
    parts = spec.split(":")
    if len(parts) not in (2, 3):
        _fail(f"view {index}: expected img:landmarks[:camera], got {spec!r}")
    img_path, lmk_path = parts[0], parts[1]
    cam_path = parts[2] if len(parts) == 3 else None
    if not os.path.exists(img_path):
        _fail(f"view {index}: image file {img_path} not found")
    if not os.path.exists(lmk_path):
        _fail(f"view {index}: landmark file {lmk_path} not found")
    image = imgio.load_png(img_path)
    try:
        with open(lmk_path, "r", encoding="utf-8") as fh:
            pts = np.asarray(json.load(fh)["points"], dtype=np.float64)
    except (json.JSONDecodeError, KeyError) as exc:
        _fail(f"view {index}: bad landmark file {lmk_path} ({exc})")
    camera = None
    if cam_path is not None:
        if not os.path.exists(cam_path):
            _fail(f"view {index}: camera file {cam_path} not found")
        camera = Camera.load_json(cam_path)
    # downscale-only cap: small inputs are fitted at native size
    if resolution is not None and max(image.shape[:2]) > resolution:
        factor = resolution / max(image.shape[:2])
        h = int(round(image.shape[0] * factor))
        w = int(round(image.shape[1] * factor))
        image = _resize_bilinear(image, h, w)
        pts = pts * factor
        if camera is not None:
            camera = camera.scaled(factor)
    return ViewObservation(image=image, landmarks=pts, camera=camera,
                           name=img_path)


@click.group()
def main():
    """Multi-view head-model fitting toolkit."""


@main.command("fit")
@click.option("--assets", "assets_path", envvar="MVFLAME_ASSETS", required=True,
              type=click.Path(), help="Asset directory (or MVFLAME_ASSETS).")
@click.option("--view", "views", multiple=True, required=True,
              help="img.png:landmarks.json[:camera.json]; repeatable.")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--lambda-multiop", type=float, default=None)
@click.option("--lambda-lmk", type=float, default=None)
@click.option("--lambda-eye", type=float, default=None)
@click.option("--lambda-lip", type=float, default=None)
@click.option("--lambda-reg", type=float, default=None)
@click.option("--iters-a", type=int, default=200)
@click.option("--iters-b", type=int, default=300)
@click.option("--iters-c", type=int, default=200)
@click.option("--step-size", type=float, default=1e-3)
@click.option("--resolution", type=int, default=224,
              help="Downscale inputs so max(h, w) is at most this; "
                   "smaller inputs are fitted at native size.")
@click.option("--texture-size", type=int, default=64)
@click.option("--seed", type=int, default=0)
@click.option("--debug", is_flag=True, help="Dump masks and flow maps.")
def cmd_fit(assets_path, views, out_dir, lambda_multiop, lambda_lmk, lambda_eye,
            lambda_lip, lambda_reg, iters_a, iters_b, iters_c, step_size,
            resolution, texture_size, seed, debug):
    """Fit the model to one or more views and write all artifacts."""
    try:
        assets = load_assets(assets_path)
    except Exception as exc:  # noqa: BLE001
        _fail(f"cannot load assets: {exc}")
    obs = [_load_view(spec, resolution, i) for i, spec in enumerate(views)]
    defaults = LossWeights()
    weights = LossWeights(
        multiop=defaults.multiop if lambda_multiop is None else lambda_multiop,
        singlelmk=defaults.singlelmk if lambda_lmk is None else lambda_lmk,
        eye=defaults.eye if lambda_eye is None else lambda_eye,
        lip=defaults.lip if lambda_lip is None else lambda_lip,
        reg=defaults.reg if lambda_reg is None else lambda_reg,
    )
    from mvflame.fitter import default_stages

    config = FitConfig(
        stages=default_stages(iters_a, iters_b, iters_c, step_size),
        weights=weights, seed=seed, texture_resolution=texture_size,
    )
    try:
        result = fit(obs, assets, config)
        _write_fit_artifacts(result, assets, obs, out_dir, debug)
    except Exception as exc:  # noqa: BLE001
        _fail(str(exc))
    click.echo(f"fit complete: total={result.trace[-1]['total']:.6g} "
               f"wall_time={result.wall_time:.1f}s -> {out_dir}")


def _write_fit_artifacts(result, assets, obs, out_dir, debug):
    os.makedirs(out_dir, exist_ok=True)
    mesh = decode(assets, result.params)
    objio.write_obj(os.path.join(out_dir, "result.obj"), mesh.vertices,
                    mesh.faces, mesh.uv_coords, mesh.uv_faces)
    imgio.save_png(os.path.join(out_dir, "texture.png"), result.texture.data)
    imgio.save_mask_png(os.path.join(out_dir, "texture_validity.png"),
                        result.texture.validity)
    imgio.save_png(os.path.join(out_dir, "albedo.png"),
                   np.clip(0.5 + result.albedo, 0.0, 1.0))
    params = {
        "beta": result.params.beta.tolist(),
        "psi": result.params.psi.tolist(),
        "theta": result.params.theta.tolist(),
        "lighting": [l.coeffs.tolist() for l in result.lightings],
        "config": result.config.to_json_dict(),
        "wall_time": result.wall_time,
    }
    with open(os.path.join(out_dir, "params.json"), "w", encoding="ascii") as fh:
        json.dump(params, fh, indent=1)
        fh.write("\n")
    with open(os.path.join(out_dir, "trace.jsonl"), "w", encoding="ascii") as fh:
        fh.write(result.trace_jsonl())
    for v, cam in enumerate(result.cameras):
        cam.save_json(os.path.join(out_dir, f"camera_{v}.json"))
        fb = rasterize(mesh, cam, cam.width, cam.height)
        image = render(mesh, fb, cam, result.texture.data)
        imgio.save_png(os.path.join(out_dir, f"render_{v}.png"), image)
    if debug:
        _write_debug_dumps(result, assets, obs, mesh, out_dir)


def _write_debug_dumps(result, assets, obs, mesh, out_dir):
    fbs = [rasterize(mesh, cam, cam.width, cam.height) for cam in result.cameras]
    for v, fb in enumerate(fbs):
        imgio.save_mask_png(os.path.join(out_dir, f"mask_mf_{v}.png"),
                            covis.face_mask(fb).data)
    from mvflame.camera import project

    lmk3d = embed_landmarks(mesh, assets.lmk_faces, assets.lmk_bary)
    for a in range(len(fbs)):
        for b in range(len(fbs)):
            if a == b:
                continue
            idx = covis.covisible_landmarks(fbs[a], fbs[b], mesh,
                                            assets.lmk_faces, assets.lmk_bary)
            pix_b, _ = project(result.cameras[b], lmk3d)
            cam_b = result.cameras[b]
            mb = covis.landmark_bbox_mask(pix_b[idx], (cam_b.width, cam_b.height))
            mc = covis.covisible_mask(mb, covis.face_mask(fbs[b]))
            mc, _ = covis.mouth_exclusion(
                mc, obs[b].landmarks[assets.mouth_polygon])
            imgio.save_mask_png(os.path.join(out_dir, f"mask_mb_{a}_{b}.png"), mb.data)
            imgio.save_mask_png(os.path.join(out_dir, f"mask_mc_{a}_{b}.png"), mc.data)
            cross = render(mesh, fbs[b], cam_b, result.texture.data)
            m3 = mc.data[:, :, None].astype(np.float64)
            flow = estimate_flow_lk(obs[b].image * m3, cross * m3)
            imgio.save_png(os.path.join(out_dir, f"flow_{a}_{b}.png"),
                           flow_to_color(flow))


@main.command("render")
@click.argument("assets_path", type=click.Path(exists=True))
@click.argument("params_json", type=click.Path(exists=True))
@click.argument("camera_json", type=click.Path(exists=True))
@click.argument("out_png", type=click.Path())
@click.option("--texture", "texture_png", type=click.Path(exists=True),
              default=None, help="Sample this texture instead of shading albedo.")
@click.option("--lighting-view", type=int, default=0,
              help="Which stored lighting to use when shading albedo.")
def cmd_render(assets_path, params_json, camera_json, out_png, texture_png,
               lighting_view):
    """Re-render a fit deterministically from saved parameters."""
    try:
        assets = load_assets(assets_path)
        with open(params_json, "r", encoding="utf-8") as fh:
            pj = json.load(fh)
        params = FlameParams(beta=np.asarray(pj["beta"]),
                             theta=np.asarray(pj["theta"]),
                             psi=np.asarray(pj["psi"]))
        camera = Camera.load_json(camera_json)
        mesh = decode(assets, params)
        fb = rasterize(mesh, camera, camera.width, camera.height)
        if texture_png is not None:
            texture = imgio.load_png(texture_png)
            image = render(mesh, fb, camera, texture)
        else:
            lighting = SHLighting(np.asarray(pj["lighting"][lighting_view]))
            albedo = np.full((64, 64, 3), 0.5)
            image = render(mesh, fb, camera, albedo, lighting=lighting)
        imgio.save_png(out_png, image)
    except Exception as exc:  # noqa: BLE001
        _fail(str(exc))
    click.echo(f"wrote {out_png}")


@main.command("eval")
@click.argument("pred_obj", type=click.Path())
@click.argument("gt_obj", type=click.Path())
@click.option("--correspondences", type=click.Path(), default=None,
              help='JSON {"pairs": [[pred_idx, gt_idx], ...]}.')
@click.option("--threshold-mm", type=float, default=5.0)
@click.option("--samples", type=int, default=10000)
@click.option("--seed", type=int, default=0)
def cmd_eval(pred_obj, gt_obj, correspondences, threshold_mm, samples, seed):
    """Chamfer distance (mm), mean normal error (rad), completeness ratio."""
    try:
        pv, pf = objio.read_obj(pred_obj)
        gv, gf = objio.read_obj(gt_obj)
        corr = None
        if correspondences is not None:
            with open(correspondences, "r", encoding="utf-8") as fh:
                corr = np.asarray(json.load(fh)["pairs"], dtype=np.int64)
        report = evaluate_pair(pv, pf, gv, gf, correspondences=corr,
                               threshold_mm=threshold_mm, n_samples=samples,
                               seed=seed)
    except Exception as exc:  # noqa: BLE001
        _fail(str(exc))
    click.echo(json.dumps(report))


@main.command("make-mini")
@click.option("--seed", type=int, default=0)
@click.option("--out", "out_dir", required=True, type=click.Path())
def cmd_make_mini(seed, out_dir):
    """Generate and save the miniature synthetic head model."""
    try:
        assets = make_mini_model(seed)
        save_assets(assets, out_dir)
        reloaded = load_assets(out_dir)
        assert reloaded.n_vertices == assets.n_vertices
    except Exception as exc:  # noqa: BLE001
        _fail(str(exc))
    click.echo(f"wrote mini model (V={assets.n_vertices}, F={assets.n_faces}) "
               f"to {out_dir}")


if __name__ == "__main__":
    main()
