"""Training loop: combined loss, adaptive-moment updates, and scheduling.

The cloud lives in canonical (rest) space and carries per-point skinning
rows inherited from the template. Every iteration poses the cloud for one
sampled training view, renders it, and backpropagates the weighted sum of
image, semantic, and topology losses. Densification, pruning, and graph
embedding refreshes run on their own schedules; moment buffers, skinning
rows, and provenance ids follow the live point set through every mutation.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from .cloud import GaussianCloud, validate_cloud
from .densify import cluster_by_semantics, densify, select_high_frequency
from .graph import build_graph, random_walks, sample_contrastive, topology_loss, train_embeddings, NodeEmbeddings
from .render import PointGradients, render, render_with_grads
from .semantic import SemanticSupervision, semantic_loss_adjoints
from .template import (
    BodyTemplate,
    blend_maps,
    init_gaussians,
    quat_left_matrix,
    quat_multiply,
)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
EMBED_LR = 0.5
EMBED_EPOCHS = 3
EMBED_TRAIN_LR = 0.025

PARAM_GROUPS = ("position", "rotation", "scale", "opacity", "color", "semantic")


@dataclass
class TrainConfig:
    lambda_image: float = 1.0
    lambda_semantic: float = 0.1
    lambda_topology: float = 0.05
    k: int = 3
    graph_k: int | None = None
    contrastive_m: int = 4
    top_fraction: float = 0.05
    iterations: int = 2000
    densify_interval: int = 100
    densify_start: int = 100
    densify_stop: int | None = None
    prune_opacity: float = 0.005
    embed_dim: int = 32
    walk_length: int = 20
    walks_per_node: int = 10
    window: int = 5
    negatives: int = 5
    embed_refresh: int = 200
    seed: int = 0
    lr_position: float = 2e-4
    lr_color: float = 2.5e-3
    lr_opacity: float = 5e-2
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_semantic: float = 1e-3

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iteration count must be nonnegative")
        for name in ("lambda_image", "lambda_semantic", "lambda_topology"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.densify_interval < 1 or self.embed_refresh < 1:
            raise ValueError("intervals must be positive")

    @property
    def effective_graph_k(self) -> int:
        return self.k if self.graph_k is None else self.graph_k

    @property
    def effective_densify_stop(self) -> int:
        if self.densify_stop is None:
            return int(0.7 * self.iterations)
        return self.densify_stop

    @classmethod
    def from_dict(cls, cfg: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in cfg.items() if k in known})

    def lr_of(self, group: str) -> float:
        return getattr(self, f"lr_{group}")


@dataclass
class TrainState:
    cloud: GaussianCloud
    skin_joints: np.ndarray
    skin_weights: np.ndarray
    provenance: np.ndarray                     # initial-ancestor id per point
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    adam_t: int = 0
    embeddings: NodeEmbeddings | None = None
    iteration: int = 0
    loss_log: list = field(default_factory=list)

    @classmethod
    def fresh(cls, cloud, skin_joints, skin_weights) -> "TrainState":
        state = cls(
            cloud=cloud, skin_joints=np.array(skin_joints),
            skin_weights=np.array(skin_weights),
            provenance=np.arange(len(cloud), dtype=np.int64),
        )
        shapes = dict(position=(3,), rotation=(4,), scale=(3,), opacity=(),
                      color=(3,), semantic=(15,))
        n = len(cloud)
        for group, tail in shapes.items():
            state.adam_m[group] = np.zeros((n,) + tail)
            state.adam_v[group] = np.zeros((n,) + tail)
        return state


def image_loss(render_color: np.ndarray, target: np.ndarray):
    """Mean absolute error and its per-pixel adjoint."""
    if render_color.shape != target.shape:
        raise ValueError(
            f"image shapes differ: {render_color.shape} vs {target.shape}"
        )
    diff = render_color - target
    value = float(np.abs(diff).mean())
    return value, np.sign(diff) / diff.size


def pose_cloud(cloud: GaussianCloud, skin_joints, skin_weights,
               template: BodyTemplate, pose):
    """Skin the canonical cloud into a pose; returns (posed, backmap).

    Positions map affinely by the blended joint transforms; orientations
    rotate rigidly by the dominant joint. The backmap carries what the
    gradient pullback needs.
    """
    m, b, dom_q = blend_maps(skin_joints, skin_weights, template, pose)
    posed = cloud.copy()
    posed.positions = np.einsum("nab,nb->na", m, cloud.positions) + b
    rotated = quat_multiply(dom_q, cloud.rotations)
    posed.rotations = rotated / np.linalg.norm(rotated, axis=1, keepdims=True)
    return posed, (m, dom_q)


def unpose_gradients(grads: PointGradients, backmap) -> PointGradients:
    """Pull posed-space gradients back to canonical parameters."""
    m, dom_q = backmap
    out = PointGradients(
        position=np.einsum("nba,nb->na", m, grads.position),
        rotation=np.einsum("nba,nb->na", quat_left_matrix(dom_q), grads.rotation),
        scale=grads.scale, opacity=grads.opacity,
        color=grads.color, semantic=grads.semantic,
    )
    return out


def _iteration_seed(seed: int, iteration: int, tag: int) -> int:
    return int(np.random.SeedSequence([seed, iteration, tag]).generate_state(1)[0])


def total_loss(state: TrainState, views, config: TrainConfig,
               template: BodyTemplate, rng: np.random.Generator):
    """One sampled view: weighted loss, canonical gradients, embedding grads."""
    view = views[int(rng.integers(0, len(views)))]
    posed, backmap = pose_cloud(state.cloud, state.skin_joints,
                                state.skin_weights, template, view.pose())
    cam = view.camera
    from .render import _accumulate, _pair_tables
    tables = _pair_tables(posed, cam)
    out = _accumulate(tables, posed, cam)

    l_img, adj_img = image_loss(out.color, view.image())
    adjoint = np.zeros((cam.height, cam.width, 18))
    adjoint[..., :3] = config.lambda_image * adj_img

    l_sem = 0.0
    if config.lambda_semantic > 0:
        l_sem, adj_sem, _ = semantic_loss_adjoints(
            posed, out, SemanticSupervision(view.mask()), cam, config.k
        )
        adjoint[..., 3:] = config.lambda_semantic * adj_sem

    _, posed_grads = render_with_grads(posed, cam, adjoint,
                                       _tables=tables, _out=out)
    grads = unpose_gradients(posed_grads, backmap)

    l_topo = 0.0
    embed_grads = None
    if config.lambda_topology > 0 and state.embeddings is not None:
        batch = sample_contrastive(
            state.cloud, _prior_topology(), config.contrastive_m,
            seed=_iteration_seed(config.seed, state.iteration, 3),
        )
        l_topo, embed_grads = topology_loss(state.embeddings, batch)

    total = (config.lambda_image * l_img + config.lambda_semantic * l_sem
             + config.lambda_topology * l_topo)
    terms = dict(image=l_img, semantic=l_sem, topology=l_topo, total=total)
    return total, terms, grads, embed_grads


def _prior_topology():
    from .template import default_prior_topology
    return default_prior_topology()


def _adam_update(state: TrainState, group: str, raw_grad: np.ndarray, lr: float):
    m = state.adam_m[group]
    v = state.adam_v[group]
    m *= ADAM_BETA1
    m += (1 - ADAM_BETA1) * raw_grad
    v *= ADAM_BETA2
    v += (1 - ADAM_BETA2) * raw_grad ** 2
    mhat = m / (1 - ADAM_BETA1 ** state.adam_t)
    vhat = v / (1 - ADAM_BETA2 ** state.adam_t)
    return lr * mhat / (np.sqrt(vhat) + ADAM_EPS)


def step(state: TrainState, grads: PointGradients, config: TrainConfig):
    """Adaptive-moment update in each group's optimization space.

    Opacity steps in logit space, scale in log space; quaternions are
    renormalized and semantic vectors projected back to the simplex, so the
    cloud stays valid after every step.
    """
    for group in PARAM_GROUPS:
        g = getattr(grads, group)
        if not np.all(np.isfinite(g)):
            bad = np.nonzero(~np.isfinite(g))[0][:1]
            raise RuntimeError(
                f"non-finite gradient in '{group}' at iteration {state.iteration}"
                f" (point {int(bad[0]) if len(bad) else '?'})"
            )
    state.adam_t += 1
    cloud = state.cloud

    cloud.positions -= _adam_update(state, "position", grads.position,
                                    config.lr_position)

    # opacity through the logit transform
    op = np.clip(cloud.opacities, 1e-6, 1 - 1e-6)
    raw = np.log(op) - np.log1p(-op)
    raw -= _adam_update(state, "opacity", grads.opacity * op * (1 - op),
                        config.lr_opacity)
    cloud.opacities = 1.0 / (1.0 + np.exp(-raw))

    # scale through log space
    log_s = np.log(cloud.scales)
    log_s -= _adam_update(state, "scale", grads.scale * cloud.scales,
                          config.lr_scale)
    cloud.scales = np.exp(log_s)

    cloud.colors = np.clip(
        cloud.colors - _adam_update(state, "color", grads.color, config.lr_color),
        0.0, 1.0,
    )

    q = cloud.rotations - _adam_update(state, "rotation", grads.rotation,
                                       config.lr_rotation)
    cloud.rotations = q / np.linalg.norm(q, axis=1, keepdims=True)

    sem = cloud.semantics - _adam_update(state, "semantic", grads.semantic,
                                         config.lr_semantic)
    sem = np.maximum(sem, 0.0)
    sums = sem.sum(axis=1, keepdims=True)
    degenerate = sums[:, 0] < 1e-12
    sem[degenerate] = 1.0 / 15.0
    sums[degenerate] = 1.0
    cloud.semantics = sem / sem.sum(axis=1, keepdims=True)
    return state


def _inherit_rows(state: TrainState, parents: np.ndarray):
    for group in PARAM_GROUPS:
        state.adam_m[group] = state.adam_m[group][parents]
        state.adam_v[group] = state.adam_v[group][parents]
    state.skin_joints = state.skin_joints[parents]
    state.skin_weights = state.skin_weights[parents]
    state.provenance = state.provenance[parents]
    if state.embeddings is not None:
        # keep cached embeddings aligned with the live point set between
        # scheduled refreshes, same inheritance rule as the moment buffers
        state.embeddings = NodeEmbeddings(state.embeddings.vectors[parents])


def densify_and_prune(state: TrainState, config: TrainConfig):
    """One densification pass followed by low-opacity pruning."""
    clusters = cluster_by_semantics(state.cloud)
    selection = select_high_frequency(state.cloud, clusters, config.top_fraction)
    new_cloud, parents = densify(state.cloud, selection)
    state.cloud = new_cloud
    _inherit_rows(state, parents)

    keep = state.cloud.opacities >= config.prune_opacity
    if not keep.any():
        keep[int(np.argmax(state.cloud.opacities))] = True
    if not keep.all():
        idx = np.nonzero(keep)[0]
        c = state.cloud
        state.cloud = GaussianCloud(
            positions=c.positions[idx], rotations=c.rotations[idx],
            scales=c.scales[idx], opacities=c.opacities[idx],
            colors=c.colors[idx], semantics=c.semantics[idx],
            generation=c.generation,
        )
        _inherit_rows(state, idx)
    return len(selection), int((~keep).sum())


def refresh_embeddings(state: TrainState, config: TrainConfig):
    graph = build_graph(state.cloud, config.effective_graph_k)
    corpus = random_walks(
        graph, config.walk_length, config.walks_per_node,
        seed=_iteration_seed(config.seed, state.iteration, 1),
    )
    state.embeddings = train_embeddings(
        corpus, dim=config.embed_dim, window=config.window,
        negatives=config.negatives, epochs=EMBED_EPOCHS,
        learning_rate=EMBED_TRAIN_LR,
        seed=_iteration_seed(config.seed, state.iteration, 2),
    )


@dataclass
class TrainResult:
    cloud: GaussianCloud
    skin_joints: np.ndarray
    skin_weights: np.ndarray
    provenance: np.ndarray
    loss_log: list
    embeddings: NodeEmbeddings | None


def train(template: BodyTemplate, dataset, config: TrainConfig,
          init_cloud: GaussianCloud | None = None, out_dir=None,
          checkpoint_interval: int | None = None,
          log_callback=None) -> TrainResult:
    """Full optimization over the dataset's training views.

    ``init_cloud`` overrides the template initialization (for perturbation
    experiments or resuming); it must be aligned one-to-one with template
    vertices. Checkpoints and the loss log are written when ``out_dir`` is
    given. Deterministic for a fixed config seed.
    """
    views = dataset.train_views if hasattr(dataset, "train_views") else list(dataset)
    if not views:
        raise ValueError("dataset has no training views")
    cloud = init_cloud.copy() if init_cloud is not None else init_gaussians(template)
    if len(cloud) != len(template.vertices):
        raise ValueError("initial cloud must have one point per template vertex")
    state = TrainState.fresh(cloud, template.skin_joints, template.skin_weights)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xA11]))

    if config.lambda_topology > 0:
        refresh_embeddings(state, config)

    stop = config.effective_densify_stop
    for it in range(1, config.iterations + 1):
        state.iteration = it
        total, terms, grads, embed_grads = total_loss(
            state, views, config, template, rng
        )
        if not np.isfinite(total):
            _flush_log(state, out_dir)
            raise RuntimeError(f"non-finite loss at iteration {it}: {terms}")
        step(state, grads, config)
        if embed_grads is not None:
            state.embeddings.vectors -= EMBED_LR * embed_grads

        events = dict(densified=0, pruned=0)
        if (config.densify_start <= it <= stop
                and it % config.densify_interval == 0):
            d, p = densify_and_prune(state, config)
            events = dict(densified=d, pruned=p)
        if config.lambda_topology > 0 and it % config.embed_refresh == 0:
            refresh_embeddings(state, config)

        row = dict(iteration=it, points=len(state.cloud), **terms, **events)
        state.loss_log.append(row)
        if log_callback is not None:
            log_callback(row)
        if out_dir and checkpoint_interval and it % checkpoint_interval == 0:
            from .fileio import write_cloud
            write_cloud(state.cloud, os.path.join(out_dir, f"checkpoint_{it:06d}.ply"))

    _flush_log(state, out_dir)
    if out_dir:
        from .fileio import write_cloud
        write_cloud(state.cloud, os.path.join(out_dir, "final.ply"))
    return TrainResult(
        cloud=state.cloud, skin_joints=state.skin_joints,
        skin_weights=state.skin_weights, provenance=state.provenance,
        loss_log=state.loss_log, embeddings=state.embeddings,
    )


def _flush_log(state: TrainState, out_dir):
    if not out_dir:
        return
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "loss_log.tsv")
    with open(path, "w") as fh:
        fh.write("iteration\tL_image\tL_semantic\tL_topology\ttotal\tpoints\n")
        for row in state.loss_log:
            fh.write(
                f"{row['iteration']}\t{row['image']!r}\t{row['semantic']!r}"
                f"\t{row['topology']!r}\t{row['total']!r}\t{row['points']}\n"
            )


def evaluate_views(result: TrainResult, template: BodyTemplate, views,
                   mask_alpha: float = 0.5):
    """Render the trained cloud on views and score against ground truth."""
    from .metrics import MetricReport, mask_iou, psnr, ssim
    from .render import argmax_mask

    report = MetricReport()
    for view in views:
        posed, _ = pose_cloud(result.cloud, result.skin_joints,
                              result.skin_weights, template, view.pose())
        out = render(posed, view.camera)
        report.psnr_per_view.append(psnr(out.color, view.image()))
        report.ssim_per_view.append(ssim(out.color, view.image()))
        _, mean_iou = mask_iou(argmax_mask(out, mask_alpha), view.mask())
        report.iou_per_view.append(mean_iou)
    return report


ABLATION_CONFIGS = ("baseline", "+semantic", "+semantic+topology", "full")


def ablation_variant(base: TrainConfig, name: str) -> TrainConfig:
    """Derive one ablation row's configuration from the full config."""
    if name == "baseline":
        return replace(base, lambda_semantic=0.0, lambda_topology=0.0,
                       densify_start=base.iterations + 1)
    if name == "+semantic":
        return replace(base, lambda_topology=0.0,
                       densify_start=base.iterations + 1)
    if name == "+semantic+topology":
        return replace(base, densify_start=base.iterations + 1)
    if name == "full":
        return replace(base)
    raise ValueError(f"unknown ablation variant '{name}'")


def ablation_harness(template: BodyTemplate, dataset, base_config: TrainConfig,
                     seeds, init_cloud=None, eval_split: str = "train",
                     middle_seeds=None):
    """Train every ablation row for every seed and tabulate the metrics.

    Returns (rows, table_text): rows map each configuration name to its
    per-seed metric reports. ``middle_seeds`` optionally runs the +semantic and
    +semantic+topology rows on a reduced seed list; the baseline/full comparison pair
    always covers every seed.
    """
    views = dataset.split(eval_split)
    rows = {name: [] for name in ABLATION_CONFIGS}
    for name in ABLATION_CONFIGS:
        row_seeds = seeds
        if middle_seeds is not None and name in ("+semantic", "+semantic+topology"):
            row_seeds = middle_seeds
        for seed in row_seeds:
            cfg = replace(ablation_variant(base_config, name), seed=int(seed))
            start = init_cloud(seed) if callable(init_cloud) else init_cloud
            result = train(template, dataset, cfg, init_cloud=start)
            rows[name].append(evaluate_views(result, template, views))
    lines = ["config\tpsnr_db\tssim\tmask_iou\truns"]
    for name in ABLATION_CONFIGS:
        reports = rows[name]
        psnr_mean = float(np.mean([r.mean_psnr for r in reports]))
        ssim_mean = float(np.mean([r.mean_ssim for r in reports]))
        iou_mean = float(np.mean([r.mean_iou for r in reports]))
        lines.append(
            f"{name}\t{psnr_mean:.4f}\t{ssim_mean:.6f}\t{iou_mean:.6f}\t{len(reports)}"
        )
    return rows, "\n".join(lines) + "\n"
