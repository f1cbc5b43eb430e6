"""Serialization: point-cloud PLY, images, masks, cameras, and config files."""

from __future__ import annotations

import numpy as np
from PIL import Image

from .cloud import GaussianCloud, validate_cloud
from .errors import ParseError, ValidationError
from .render import Camera

CLOUD_VERSION = 1

CLOUD_PROPERTIES = [
    "x", "y", "z",
    "rot_w", "rot_x", "rot_y", "rot_z",
    "scale_x", "scale_y", "scale_z",
    "opacity",
    "red", "green", "blue",
] + [f"sem_{i}" for i in range(15)]

# Fixed label palette: 0 is background, 1..15 the body parts. Stable across
# versions so mask diffs are comparable between runs.
MASK_PALETTE = np.array([
    (0, 0, 0),        # 0 background
    (230, 25, 75),    # 1 head
    (60, 180, 75),    # 2 neck
    (255, 225, 25),   # 3 torso
    (0, 130, 200),    # 4 left upper arm
    (245, 130, 48),   # 5 right upper arm
    (145, 30, 180),   # 6 left forearm
    (70, 240, 240),   # 7 right forearm
    (240, 50, 230),   # 8 left hand
    (210, 245, 60),   # 9 right hand
    (250, 190, 212),  # 10 left thigh
    (0, 128, 128),    # 11 right thigh
    (220, 190, 255),  # 12 left calf
    (170, 110, 40),   # 13 right calf
    (255, 250, 200),  # 14 left foot
    (128, 0, 0),      # 15 right foot
], dtype=np.uint8)


def write_cloud(cloud: GaussianCloud, path):
    """Binary little-endian PLY with one float32 property per field."""
    n = len(cloud)
    data = np.empty((n, 29), dtype="<f4")
    data[:, 0:3] = cloud.positions
    data[:, 3:7] = cloud.rotations
    data[:, 7:10] = cloud.scales
    data[:, 10] = cloud.opacities
    data[:, 11:14] = cloud.colors
    data[:, 14:29] = cloud.semantics
    header = [
        "ply",
        "format binary_little_endian 1.0",
        f"comment bodysplat_cloud_version {CLOUD_VERSION}",
        f"comment generation {cloud.generation}",
        f"element vertex {n}",
    ]
    header += [f"property float {name}" for name in CLOUD_PROPERTIES]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(data.tobytes())


def read_cloud(path) -> GaussianCloud:
    """Parse and validate a cloud PLY written by :func:`write_cloud`."""
    with open(path, "rb") as fh:
        blob = fh.read()
    end = blob.find(b"end_header\n")
    if end < 0:
        raise ParseError("missing end_header", path=path, offset=len(blob))
    header_lines = blob[:end].decode("ascii", errors="replace").splitlines()
    if not header_lines or header_lines[0] != "ply":
        raise ParseError("not a ply file", path=path, line=1)
    n = None
    generation = 0
    props = []
    for i, line in enumerate(header_lines):
        tokens = line.split()
        if line.startswith("element vertex"):
            n = int(tokens[2])
        elif line.startswith("property float"):
            props.append(tokens[2])
        elif line.startswith("comment generation"):
            generation = int(tokens[2])
        elif line.startswith("format") and "binary_little_endian" not in line:
            raise ParseError("unsupported ply format", path=path, line=i + 1)
    if n is None:
        raise ParseError("missing vertex element", path=path, line=len(header_lines))
    if props != CLOUD_PROPERTIES:
        raise ParseError(
            f"unexpected property layout {props[:4]}...", path=path, line=len(header_lines)
        )
    body = blob[end + len(b"end_header\n"):]
    expected = n * 29 * 4
    if len(body) < expected:
        raise ParseError(
            f"vertex data truncated: expected {expected} bytes, found {len(body)}",
            path=path, offset=end + len(b"end_header\n") + len(body),
        )
    data = np.frombuffer(body[:expected], dtype="<f4").reshape(n, 29).astype(np.float64)
    cloud = GaussianCloud(
        positions=data[:, 0:3], rotations=data[:, 3:7], scales=data[:, 7:10],
        opacities=data[:, 10], colors=data[:, 11:14], semantics=data[:, 14:29],
        generation=generation,
    )
    violations = validate_cloud(cloud)
    if violations:
        v = violations[0]
        raise ValidationError(f"{path}: {v} ({len(violations)} violations total)")
    return cloud


def save_image(image: np.ndarray, path):
    """Float [0,1] HxWx3 image to 8-bit PNG."""
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8), mode="RGB").save(path)


def load_image(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0


def save_mask(mask: np.ndarray, path):
    """Label mask (0..15) to a palette PNG using the fixed part colors."""
    mask = np.asarray(mask)
    if mask.min() < 0 or mask.max() > 15:
        raise ValueError("mask labels must lie in [0, 15]")
    img = Image.fromarray(mask.astype(np.uint8), mode="P")
    img.putpalette(MASK_PALETTE.ravel().tolist() + [0] * (768 - MASK_PALETTE.size))
    img.save(path)


def load_mask(path) -> np.ndarray:
    with Image.open(path) as img:
        if img.mode != "P":
            raise ParseError("mask file is not palette-indexed", path=path)
        return np.asarray(img, dtype=np.int64)


def write_cameras(entries, path):
    """One camera per line: id, intrinsics, row-major R, t, size, split tag."""
    lines = []
    for cam_id, cam, split in entries:
        fields = [cam_id, repr(float(cam.fx)), repr(float(cam.fy)),
                  repr(float(cam.cx)), repr(float(cam.cy))]
        fields += [repr(float(v)) for v in cam.rotation.ravel()]
        fields += [repr(float(v)) for v in cam.translation]
        fields += [str(cam.width), str(cam.height), split]
        lines.append(" ".join(str(f) for f in fields))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_cameras(path):
    entries = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            tokens = line.split()
            if len(tokens) != 20:
                raise ParseError(
                    f"camera line needs 20 fields, got {len(tokens)}",
                    path=path, line=lineno,
                )
            try:
                cam = Camera(
                    fx=float(tokens[1]), fy=float(tokens[2]),
                    cx=float(tokens[3]), cy=float(tokens[4]),
                    rotation=np.array([float(v) for v in tokens[5:14]]).reshape(3, 3),
                    translation=np.array([float(v) for v in tokens[14:17]]),
                    width=int(tokens[17]), height=int(tokens[18]),
                )
            except ValueError as exc:
                raise ParseError(f"bad camera: {exc}", path=path, line=lineno)
            entries.append((tokens[0], cam, tokens[19]))
    return entries


# --- flat key = value configuration -----------------------------------------

CONFIG_DEFAULTS = {
    "lambda_image": 1.0,
    "lambda_semantic": 0.1,
    "lambda_topology": 0.05,
    "k": 3,
    "graph_k": None,           # falls back to k when unset
    "contrastive_m": 4,
    "top_fraction": 0.05,
    "iterations": 2000,
    "densify_interval": 100,
    "densify_start": 100,
    "densify_stop": None,      # falls back to 70% of iterations
    "prune_opacity": 0.005,
    "embed_dim": 32,
    "walk_length": 20,
    "walks_per_node": 10,
    "window": 5,
    "negatives": 5,
    "embed_refresh": 200,
    "seed": 0,
    "lr_position": 2e-4,
    "lr_color": 2.5e-3,
    "lr_opacity": 5e-2,
    "lr_scale": 5e-3,
    "lr_rotation": 1e-3,
    "lr_semantic": 1e-3,
}

_INT_KEYS = {
    "k", "graph_k", "contrastive_m", "iterations", "densify_interval",
    "densify_start", "densify_stop", "embed_dim", "walk_length",
    "walks_per_node", "window", "negatives", "embed_refresh", "seed",
}


def parse_config(path) -> dict:
    """Read a flat key = value file onto the documented defaults.

    Unknown keys and malformed lines are rejected with their line number.
    """
    cfg = dict(CONFIG_DEFAULTS)
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ParseError("expected 'key = value'", path=path, line=lineno)
            key, _, value = stripped.partition("=")
            key = key.strip()
            value = value.strip()
            if key not in CONFIG_DEFAULTS:
                raise ParseError(f"unknown key '{key}'", path=path, line=lineno)
            try:
                cfg[key] = int(value) if key in _INT_KEYS else float(value)
            except ValueError:
                raise ParseError(f"bad value for '{key}': {value!r}", path=path, line=lineno)
    return cfg


def write_config(cfg: dict, path):
    with open(path, "w") as fh:
        for key in CONFIG_DEFAULTS:
            val = cfg.get(key, CONFIG_DEFAULTS[key])
            if val is None:
                continue
            fh.write(f"{key} = {val}\n")


# --- graph analysis sidecars -------------------------------------------------

EMBED_MAGIC = b"BSEM"
GRAPH_MAGIC = b"BSGR"


def save_graph(graph, path):
    """Binary sidecar: magic, version, (n, k), int64 neighbors, f64 weights."""
    nbr = np.asarray(graph.neighbors, dtype="<i8")
    wts = np.asarray(graph.weights, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(GRAPH_MAGIC)
        fh.write(np.array([1, nbr.shape[0], nbr.shape[1]], dtype="<i8").tobytes())
        fh.write(nbr.tobytes())
        fh.write(wts.tobytes())


def load_graph(path):
    from .graph import PointGraph

    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != GRAPH_MAGIC:
        raise ParseError("bad graph magic", path=path, offset=0)
    version, n, k = np.frombuffer(blob[4:28], dtype="<i8")
    if version != 1:
        raise ParseError(f"unsupported graph version {version}", path=path, offset=4)
    need = 28 + n * k * 8 * 2
    if len(blob) < need:
        raise ParseError("graph data truncated", path=path, offset=len(blob))
    nbr = np.frombuffer(blob[28:28 + n * k * 8], dtype="<i8").reshape(n, k).copy()
    wts = np.frombuffer(blob[28 + n * k * 8:need], dtype="<f8").reshape(n, k).copy()
    return PointGraph(neighbors=nbr, weights=wts)


def save_embeddings(vectors: np.ndarray, path):
    """Binary sidecar: magic, version, node count, dim, float64 row-major."""
    vectors = np.asarray(vectors, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(EMBED_MAGIC)
        fh.write(np.array([1, vectors.shape[0], vectors.shape[1]], dtype="<i8").tobytes())
        fh.write(vectors.tobytes())


def load_embeddings(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != EMBED_MAGIC:
        raise ParseError("bad embeddings magic", path=path, offset=0)
    version, n, dim = np.frombuffer(blob[4:28], dtype="<i8")
    if version != 1:
        raise ParseError(f"unsupported embeddings version {version}", path=path, offset=4)
    expected = 28 + n * dim * 8
    if len(blob) < expected:
        raise ParseError("embeddings data truncated", path=path, offset=len(blob))
    return np.frombuffer(blob[28:expected], dtype="<f8").reshape(n, dim).copy()


def save_selection(selection, path):
    """High-frequency selection as delimited text: cluster, node, score."""
    with open(path, "w") as fh:
        fh.write("cluster\tnode\tscore\n")
        for part in sorted(selection.rankings):
            nodes, scores = selection.rankings[part]
            for node, score in zip(nodes, scores):
                fh.write(f"{part}\t{int(node)}\t{float(score)!r}\n")
