"""Command-line interface tying the pipeline together."""

from __future__ import annotations

import os
import sys

import click
import numpy as np

from .errors import BodySplatError


def _fail(message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(1)


@click.group()
def main():
    """Semantic Gaussian splatting for articulated bodies."""


@main.command()
@click.option("--out", required=True, type=click.Path())
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--frames", default=20, show_default=True, type=int)
@click.option("--stride", default=5, show_default=True, type=int)
@click.option("--cameras", "n_cameras", default=8, show_default=True, type=int)
@click.option("--image-size", default=64, show_default=True, type=int)
@click.option("--focal", default=52.0, show_default=True, type=float)
@click.option("--distance", default=3.0, show_default=True, type=float)
@click.option("--elevation", default=0.5, show_default=True, type=float)
@click.option("--limb-amplitude", default=0.25, show_default=True, type=float)
@click.option("--root-spin", default=2.4, show_default=True, type=float)
@click.option("--proportions", default=None, type=str,
              help="10 comma-separated body proportions")
def generate(out, seed, frames, stride, n_cameras, image_size, focal, distance,
             elevation, limb_amplitude, root_spin, proportions):
    """Synthesize a template and a rendered ground-truth dataset."""
    from .scenes import camera_ring, generate_dataset, generate_template

    try:
        props = None
        if proportions is not None:
            props = np.array([float(v) for v in proportions.split(",")])
        template = generate_template(seed=seed, proportions=props)
        body_center = [0.0, 0.45 * template.height, 0.0]
        rig = camera_ring(n_cameras, center=body_center, distance=distance,
                          image_size=image_size, focal=focal, elevation=elevation)
        generate_dataset(template, frames, stride, rig, seed=seed, out_dir=out,
                         limb_amplitude=limb_amplitude, root_spin=root_spin)
    except (BodySplatError, ValueError, OSError) as exc:
        _fail(str(exc))
    click.echo(f"dataset written to {out}")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--data", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--seed", default=None, type=int, help="override the config seed")
@click.option("--checkpoint-every", default=0, show_default=True, type=int)
@click.option("--init-noise", default=0.0, show_default=True, type=float,
              help="std of canonical position noise, fraction of body height")
def train(config_path, data, out, seed, checkpoint_every, init_noise):
    """Optimize a Gaussian body against a dataset's training views."""
    from .fileio import CONFIG_DEFAULTS, parse_config, write_config
    from .optim import TrainConfig, train as run_train
    from .scenes import load_dataset
    from .template import init_gaussians, load_template

    try:
        cfg = parse_config(config_path) if config_path else dict(CONFIG_DEFAULTS)
        if seed is not None:
            cfg["seed"] = seed
        config = TrainConfig.from_dict(cfg)
        dataset = load_dataset(data)
        template = load_template(dataset.template_path)
        init_cloud = None
        if init_noise > 0:
            init_cloud = init_gaussians(template)
            rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x11]))
            init_cloud.positions += rng.normal(
                0.0, init_noise * template.height, init_cloud.positions.shape
            )
        os.makedirs(out, exist_ok=True)
        write_config(cfg, os.path.join(out, "resolved_config.cfg"))
        result = run_train(
            template, dataset, config, init_cloud=init_cloud, out_dir=out,
            checkpoint_interval=checkpoint_every or None,
        )
    except (BodySplatError, ValueError, OSError, RuntimeError) as exc:
        _fail(str(exc))
    click.echo(f"trained {len(result.cloud)} points over {config.iterations} "
               f"iterations; artifacts in {out}")


def _nearest_vertex_skin(cloud, template):
    from scipy.spatial import cKDTree

    tree = cKDTree(template.vertices)
    _, nearest = tree.query(cloud.positions, k=1)
    return template.skin_joints[nearest], template.skin_weights[nearest]


@main.command()
@click.option("--cloud", "cloud_path", required=True, type=click.Path(exists=True))
@click.option("--cameras", "cameras_path", required=True, type=click.Path(exists=True))
@click.option("--camera", "camera_id", required=True, type=str)
@click.option("--out", required=True, type=click.Path())
@click.option("--mask-out", default=None, type=click.Path())
@click.option("--pose", "pose_path", default=None, type=click.Path(exists=True))
@click.option("--template", "template_path", default=None, type=click.Path(exists=True))
@click.option("--mask-alpha", default=0.5, show_default=True, type=float)
def render(cloud_path, cameras_path, camera_id, out, mask_out, pose_path,
           template_path, mask_alpha):
    """Render a cloud through one camera; optionally pose it first."""
    from .fileio import read_cameras, read_cloud, save_image, save_mask
    from .render import argmax_mask, render as run_render
    from .template import PoseParams, load_template

    try:
        cloud = read_cloud(cloud_path)
        cams = {cid: cam for cid, cam, _ in read_cameras(cameras_path)}
        if camera_id not in cams:
            raise ValueError(f"camera '{camera_id}' not in {sorted(cams)}")
        if pose_path is not None:
            if template_path is None:
                raise ValueError("--pose requires --template for skinning")
            template = load_template(template_path)
            values = np.loadtxt(pose_path).reshape(25, 3)
            pose = PoseParams(joint_rotations=values[:24], root_translation=values[24])
            from .optim import pose_cloud

            skin_j, skin_w = _nearest_vertex_skin(cloud, template)
            cloud, _ = pose_cloud(cloud, skin_j, skin_w, template, pose)
        output = run_render(cloud, cams[camera_id])
        save_image(output.color, out)
        if mask_out:
            save_mask(argmax_mask(output, mask_alpha), mask_out)
    except (BodySplatError, ValueError, OSError) as exc:
        _fail(str(exc))
    click.echo(f"rendered {out}")


@main.command()
@click.option("--runs", required=True, type=str,
              help="comma-separated run directories (1 or 2)")
@click.option("--data", required=True, type=click.Path(exists=True))
@click.option("--split", default="test", show_default=True,
              type=click.Choice(["train", "test"]))
@click.option("--metric", default="psnr", show_default=True,
              type=click.Choice(["psnr", "ssim", "iou"]))
@click.option("--out", default=None, type=click.Path())
def evaluate(runs, data, split, metric, out):
    """Score runs against ground truth; two runs add a two-sample t-test."""
    from .fileio import read_cloud
    from .metrics import two_sample_t_test
    from .optim import TrainResult, evaluate_views
    from .scenes import load_dataset
    from .template import load_template

    try:
        run_dirs = [r for r in runs.split(",") if r]
        if not 1 <= len(run_dirs) <= 2:
            raise ValueError("--runs takes one or two directories")
        dataset = load_dataset(data)
        template = load_template(dataset.template_path)
        views = dataset.split(split)
        if not views:
            raise ValueError(f"dataset has no '{split}' views")
        samples = []
        for run_dir in run_dirs:
            cloud = read_cloud(os.path.join(run_dir, "final.ply"))
            skin_j, skin_w = _nearest_vertex_skin(cloud, template)
            result = TrainResult(
                cloud=cloud, skin_joints=skin_j, skin_weights=skin_w,
                provenance=np.arange(len(cloud)), loss_log=[], embeddings=None,
            )
            report = evaluate_views(result, template, views)
            values = {
                "psnr": report.psnr_per_view,
                "ssim": report.ssim_per_view,
                "iou": report.iou_per_view,
            }[metric]
            samples.append(values)
            click.echo(f"{run_dir}: mean {metric} = {float(np.mean(values)):.4f} "
                       f"over {len(values)} views")
            if out:
                os.makedirs(out, exist_ok=True)
                name = os.path.basename(os.path.normpath(run_dir))
                with open(os.path.join(out, f"report_{name}.tsv"), "w") as fh:
                    fh.write(report.as_text())
        if len(samples) == 2:
            r = two_sample_t_test(samples[0], samples[1])
            click.echo(
                f"t-test ({metric}): t = {r.t_value:.4f}, df = {r.dof}, "
                f"p = {r.p_value:.6f}"
            )
    except (BodySplatError, ValueError, OSError) as exc:
        _fail(str(exc))


@main.command("analyze-graph")
@click.option("--cloud", "cloud_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--k", default=3, show_default=True, type=int)
@click.option("--dim", default=32, show_default=True, type=int)
@click.option("--walk-length", default=20, show_default=True, type=int)
@click.option("--walks-per-node", default=10, show_default=True, type=int)
@click.option("--window", default=5, show_default=True, type=int)
@click.option("--negatives", default=5, show_default=True, type=int)
@click.option("--epochs", default=3, show_default=True, type=int)
@click.option("--top-fraction", default=0.05, show_default=True, type=float)
@click.option("--seed", default=0, show_default=True, type=int)
def analyze_graph(cloud_path, out, k, dim, walk_length, walks_per_node, window,
                  negatives, epochs, top_fraction, seed):
    """Dump random-walk embeddings and the high-frequency selection."""
    from .densify import cluster_by_semantics, select_high_frequency
    from .fileio import read_cloud, save_embeddings, save_graph, save_selection
    from .graph import build_graph, random_walks, train_embeddings

    try:
        cloud = read_cloud(cloud_path)
        graph = build_graph(cloud, k)
        corpus = random_walks(graph, walk_length, walks_per_node, seed=seed)
        embeddings = train_embeddings(corpus, dim=dim, window=window,
                                      negatives=negatives, epochs=epochs, seed=seed)
        os.makedirs(out, exist_ok=True)
        save_graph(graph, os.path.join(out, "graph.bin"))
        save_embeddings(embeddings.vectors, os.path.join(out, "embeddings.bin"))
        selection = select_high_frequency(cloud, cluster_by_semantics(cloud),
                                          top_fraction)
        save_selection(selection, os.path.join(out, "selection.tsv"))
    except (BodySplatError, ValueError, OSError) as exc:
        _fail(str(exc))
    click.echo(f"graph analysis written to {out}")


@main.command()
@click.option("--image", "image_path", required=True, type=click.Path(exists=True))
@click.option("--image2", "image2_path", default=None, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
def highfreq(image_path, image2_path, out):
    """Edge and Fourier high-pass maps, plus a side-by-side report."""
    from PIL import Image

    from .fileio import load_image
    from .metrics import high_freq_maps

    def to_u8(arr):
        arr = np.asarray(arr, dtype=np.float64)
        top = arr.max()
        if top > 0:
            arr = arr / top
        return (arr * 255.0 + 0.5).astype(np.uint8)

    try:
        os.makedirs(out, exist_ok=True)
        panels = []
        for tag, path in (("a", image_path), ("b", image2_path)):
            if path is None:
                continue
            img = load_image(path)
            edges, highpass = high_freq_maps(img)
            Image.fromarray(to_u8(edges)).save(os.path.join(out, f"canny_{tag}.png"))
            Image.fromarray(to_u8(highpass)).save(os.path.join(out, f"fft_{tag}.png"))
            panels.append((to_u8(img @ np.array([0.299, 0.587, 0.114])),
                           to_u8(edges), to_u8(highpass)))
        rows = []
        for gray, edges, highpass in panels:
            rows.append(np.concatenate([gray, edges, highpass], axis=1))
        report = np.concatenate(rows, axis=0)
        Image.fromarray(report).save(os.path.join(out, "report.png"))
    except (BodySplatError, ValueError, OSError) as exc:
        _fail(str(exc))
    click.echo(f"high-frequency maps written to {out}")


if __name__ == "__main__":
    main()
