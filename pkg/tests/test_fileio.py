import hashlib

import numpy as np
import pytest

from bodysplat.densify import HighFreqSelection
from bodysplat.errors import ParseError, ValidationError
from bodysplat.fileio import (
    CONFIG_DEFAULTS,
    MASK_PALETTE,
    load_embeddings,
    load_image,
    load_mask,
    parse_config,
    read_cameras,
    read_cloud,
    save_embeddings,
    save_image,
    save_mask,
    save_selection,
    write_cameras,
    write_cloud,
    write_config,
)
from bodysplat.render import look_at

from test_cloud import make_cloud


class TestCloudFile:
    def random_cloud(self, n=50, seed=0):
        rng = np.random.default_rng(seed)
        quats = rng.normal(size=(n, 4))
        quats /= np.linalg.norm(quats, axis=1, keepdims=True)
        sem = rng.dirichlet(np.ones(15), size=n)
        return make_cloud(
            rng.normal(size=(n, 3)), rotations=quats,
            scales=rng.uniform(0.01, 2.0, (n, 3)),
            opacities=rng.uniform(0, 1, n),
            colors=rng.uniform(0, 1, (n, 3)), semantics=sem,
        )

    def test_round_trip_is_bitwise_stable(self, tmp_path):
        cloud = self.random_cloud()
        cloud.generation = 7
        p1, p2 = tmp_path / "a.ply", tmp_path / "b.ply"
        write_cloud(cloud, p1)
        first = read_cloud(p1)
        assert first.generation == 7
        np.testing.assert_allclose(first.positions, cloud.positions, atol=1e-6)
        write_cloud(first, p2)
        assert p1.read_bytes() == p2.read_bytes()
        second = read_cloud(p2)
        np.testing.assert_array_equal(first.positions, second.positions)
        np.testing.assert_array_equal(first.semantics, second.semantics)

    def test_validation_error_names_point_and_field(self, tmp_path):
        cloud = self.random_cloud(n=5)
        cloud.semantics[2] *= 0.5
        path = tmp_path / "bad.ply"
        write_cloud(cloud, path)
        with pytest.raises(ValidationError, match="point 2.*semantic"):
            read_cloud(path)

    def test_truncated_file_reports_offset(self, tmp_path):
        cloud = self.random_cloud(n=10)
        path = tmp_path / "t.ply"
        write_cloud(cloud, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-40])
        with pytest.raises(ParseError, match="byte"):
            read_cloud(path)

    def test_not_a_ply(self, tmp_path):
        path = tmp_path / "x.ply"
        path.write_bytes(b"hello world\nend_header\n")
        with pytest.raises(ParseError):
            read_cloud(path)


class TestImages:
    def test_image_round_trip_within_quantization(self, tmp_path):
        rng = np.random.default_rng(1)
        img = rng.uniform(0, 1, (12, 9, 3))
        path = tmp_path / "i.png"
        save_image(img, path)
        back = load_image(path)
        assert np.abs(back - img).max() <= 0.5 / 255 + 1e-9

    def test_mask_round_trip_exact(self, tmp_path):
        rng = np.random.default_rng(2)
        mask = rng.integers(0, 16, (14, 10))
        path = tmp_path / "m.png"
        save_mask(mask, path)
        np.testing.assert_array_equal(load_mask(path), mask)

    def test_palette_is_injective(self):
        colors = {tuple(c) for c in MASK_PALETTE}
        assert len(colors) == 16

    def test_mask_rejects_bad_labels(self, tmp_path):
        with pytest.raises(ValueError):
            save_mask(np.full((4, 4), 16), tmp_path / "m.png")


class TestCameras:
    def test_round_trip(self, tmp_path):
        cams = [
            ("cam0", look_at([0, 1, -3], [0, 1, 0], 60, 60, 64, 64), "train"),
            ("cam1", look_at([3, 1, 0], [0, 1, 0], 60, 60, 64, 64), "test"),
        ]
        path = tmp_path / "cams.txt"
        write_cameras(cams, path)
        back = read_cameras(path)
        assert [b[0] for b in back] == ["cam0", "cam1"]
        assert [b[2] for b in back] == ["train", "test"]
        np.testing.assert_array_equal(back[0][1].rotation, cams[0][1].rotation)
        np.testing.assert_array_equal(back[1][1].translation, cams[1][1].translation)

    def test_field_count_error(self, tmp_path):
        path = tmp_path / "cams.txt"
        path.write_text("cam0 1 2 3\n")
        with pytest.raises(ParseError, match="line 1"):
            read_cameras(path)


class TestConfig:
    def test_defaults_when_empty(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("# nothing here\n\n")
        cfg = parse_config(path)
        assert cfg == CONFIG_DEFAULTS
        assert cfg["k"] == 3  # the neighborhood size the ablation favored

    def test_overrides_and_round_trip(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("iterations = 50\nlambda_semantic = 0.25\nseed = 3\n")
        cfg = parse_config(path)
        assert cfg["iterations"] == 50
        assert cfg["lambda_semantic"] == 0.25
        assert cfg["seed"] == 3
        out = tmp_path / "d.cfg"
        write_config(cfg, out)
        assert parse_config(out) == cfg

    def test_unknown_key_named_with_line(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("iterations = 10\nlearning_speed = 1\n")
        with pytest.raises(ParseError, match="learning_speed"):
            parse_config(path)
        with pytest.raises(ParseError, match="line 2"):
            parse_config(path)

    def test_bad_value_reports_line(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("iterations = soon\n")
        with pytest.raises(ParseError, match="line 1"):
            parse_config(path)


class TestSidecars:
    def test_embeddings_round_trip(self, tmp_path):
        rng = np.random.default_rng(3)
        vec = rng.normal(size=(17, 8))
        path = tmp_path / "emb.bin"
        save_embeddings(vec, path)
        np.testing.assert_array_equal(load_embeddings(path), vec)

    def test_embeddings_truncation(self, tmp_path):
        path = tmp_path / "emb.bin"
        save_embeddings(np.ones((4, 4)), path)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(ParseError):
            load_embeddings(path)

    def test_graph_round_trip(self, tmp_path):
        from bodysplat.fileio import load_graph, save_graph
        from bodysplat.graph import PointGraph

        rng = np.random.default_rng(5)
        g = PointGraph(neighbors=rng.integers(0, 12, (12, 3)),
                       weights=rng.uniform(0.1, 2.0, (12, 3)))
        path = tmp_path / "g.bin"
        save_graph(g, path)
        back = load_graph(path)
        np.testing.assert_array_equal(back.neighbors, g.neighbors)
        np.testing.assert_array_equal(back.weights, g.weights)

    def test_selection_dump(self, tmp_path):
        sel = HighFreqSelection(
            rankings={2: (np.array([5, 1]), np.array([0.9, 0.4]))},
            selected=np.array([5]),
        )
        path = tmp_path / "sel.tsv"
        save_selection(sel, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "cluster\tnode\tscore"
        assert lines[1].split("\t") == ["2", "5", "0.9"]
