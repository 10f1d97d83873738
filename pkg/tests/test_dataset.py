"""Tests for dataset writing, loading, and the image file formats."""

import json
import os

import numpy as np
import pytest

from egospan.camera import FisheyeIntrinsics
from egospan.dataset import (
    LABEL_DIM,
    dataset_digest,
    load_dataset,
    read_pgm,
    read_ppm,
    stack_sequences,
    write_dataset,
    write_pgm,
    write_ppm,
)
from egospan.exceptions import ConfigError, DataError, ParseError
from egospan.synth import generate_sequence


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data") / "set"
    manifest = write_dataset(root, ["stand", "walk_cycle"], frames=5,
                             seed=11, fps=10.0)
    return str(root), manifest


class TestNetpbm:
    def test_pgm_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        mask = (rng.random((17, 23)) > 0.5).astype(np.uint8)
        path = tmp_path / "m.pgm"
        write_pgm(path, mask)
        assert np.array_equal(read_pgm(path), mask)

    def test_ppm_round_trip_within_quantization(self, tmp_path):
        rng = np.random.default_rng(1)
        img = rng.random((9, 7, 3))
        path = tmp_path / "i.ppm"
        write_ppm(path, img)
        back = read_ppm(path)
        assert back.shape == img.shape
        assert np.abs(back - img).max() <= 0.5 / 255.0 + 1e-12

    def test_ppm_quantized_values_are_stable(self, tmp_path):
        """A second write of the loaded image reproduces the same bytes."""
        rng = np.random.default_rng(2)
        img = rng.random((5, 5, 3))
        a, b = tmp_path / "a.ppm", tmp_path / "b.ppm"
        write_ppm(a, img)
        write_ppm(b, read_ppm(a))
        assert a.read_bytes() == b.read_bytes()

    def test_header_comments_are_skipped(self, tmp_path):
        path = tmp_path / "c.pgm"
        payload = bytes(range(6))
        path.write_bytes(b"P5\n# a comment\n3 2\n255\n"
                         + bytes(v and 255 for v in payload))
        mask = read_pgm(path)
        assert mask.shape == (2, 3)
        assert mask.sum() == 5

    def test_wrong_magic_rejected(self, tmp_path):
        path = tmp_path / "w.pgm"
        path.write_bytes(b"P2\n2 2\n255\n....")
        with pytest.raises(ParseError):
            read_pgm(path)

    def test_truncated_payload_rejected(self, tmp_path):
        path = tmp_path / "t.pgm"
        path.write_bytes(b"P5\n4 4\n255\nxx")
        with pytest.raises(ParseError):
            read_pgm(path)

    def test_unsupported_maxval_rejected(self, tmp_path):
        path = tmp_path / "m.pgm"
        path.write_bytes(b"P5\n1 1\n65535\nab")
        with pytest.raises(ParseError):
            read_pgm(path)

    def test_bad_shapes_rejected(self, tmp_path):
        with pytest.raises(DataError):
            write_pgm(tmp_path / "x.pgm", np.zeros((2, 2, 2)))
        with pytest.raises(DataError):
            write_ppm(tmp_path / "x.ppm", np.zeros((4, 4)))


class TestWriteLoad:
    def test_manifest_counts(self, small_dataset):
        root, manifest = small_dataset
        assert manifest["total_frames"] == 10
        assert [e["motion"] for e in manifest["sequences"]] == [
            "stand", "walk_cycle"]
        assert manifest["label_record"] == LABEL_DIM

    def test_loaded_shapes(self, small_dataset):
        root, _ = small_dataset
        ds = load_dataset(root)
        assert ds.total_frames == 10
        seq = ds.sequences[0]
        assert seq.masks.shape == (5, 256, 256)
        assert seq.images.shape == (5, 256, 256, 3)
        assert seq.mhi.shape == (5, 64, 13)
        assert seq.body.shape == (5, 15, 3)
        assert seq.cam_rotation.shape == (5, 3, 3)
        assert ds.intrinsics.width == 256

    def test_labels_survive_bitwise(self, small_dataset):
        """Doubles written to labels.bin come back exactly."""
        root, manifest = small_dataset
        ds = load_dataset(root)
        entry = manifest["sequences"][0]
        track = generate_sequence("stand", duration=0.5, fps=10.0,
                                  seed=entry["seed"], render="mask")
        seq = ds.sequences[0]
        for j, frame in enumerate(track):
            assert np.array_equal(seq.body[j], frame.body)
            assert np.array_equal(seq.body_world[j], frame.body_world)
            assert np.array_equal(seq.head_local_f[j], frame.head_local.f)
            assert np.array_equal(seq.head_world_u[j], frame.head.u)
            assert np.array_equal(seq.cam_rotation[j], frame.camera.rotation)
            assert np.array_equal(seq.cam_position[j], frame.camera.position)
            assert seq.norm_scale[j] == frame.norm_scale
            assert np.array_equal(seq.masks[j], frame.mask)

    def test_rewrite_is_byte_identical(self, small_dataset, tmp_path):
        root, _ = small_dataset
        again = tmp_path / "again"
        write_dataset(again, ["stand", "walk_cycle"], frames=5, seed=11,
                      fps=10.0)
        assert dataset_digest(root) == dataset_digest(again)

    def test_different_seed_changes_bytes(self, small_dataset, tmp_path):
        root, _ = small_dataset
        other = tmp_path / "other"
        write_dataset(other, ["stand", "walk_cycle"], frames=5, seed=12,
                      fps=10.0)
        assert dataset_digest(root) != dataset_digest(other)

    def test_mask_only_render_skips_images(self, tmp_path):
        root = tmp_path / "m"
        write_dataset(root, ["stand"], frames=3, seed=0, fps=10.0,
                      render="mask")
        ds = load_dataset(root)
        assert ds.sequences[0].images is None
        assert ds.sequences[0].masks.shape == (3, 256, 256)
        assert not any(p.endswith(".ppm")
                       for p in os.listdir(root / "seq_000_stand"))

    def test_custom_intrinsics_round_trip(self, tmp_path):
        root = tmp_path / "c"
        intr = FisheyeIntrinsics.make(width=128, height=128)
        write_dataset(root, ["stand"], frames=2, seed=0, fps=10.0,
                      render="mask", intrinsics=intr)
        ds = load_dataset(root)
        assert ds.intrinsics == intr
        assert ds.sequences[0].masks.shape == (2, 128, 128)

    def test_invalid_settings_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            write_dataset(tmp_path / "a", [], frames=4, seed=0)
        with pytest.raises(ConfigError):
            write_dataset(tmp_path / "b", ["stand"], frames=1, seed=0)
        with pytest.raises(ConfigError):
            write_dataset(tmp_path / "c", ["stand"], frames=4, seed=0,
                          render="wireframe")
        with pytest.raises(ConfigError):
            write_dataset(tmp_path / "d", ["moonwalk"], frames=4, seed=0)


class TestLoadValidation:
    def make(self, tmp_path):
        root = tmp_path / "v"
        write_dataset(root, ["stand"], frames=3, seed=5, fps=10.0,
                      render="mask")
        return root

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DataError):
            load_dataset(tmp_path)

    def test_wrong_format_string(self, tmp_path):
        root = self.make(tmp_path)
        path = root / "manifest.json"
        blob = json.loads(path.read_text())
        blob["format"] = "something else"
        path.write_text(json.dumps(blob))
        with pytest.raises(DataError):
            load_dataset(root)

    def test_malformed_json(self, tmp_path):
        root = self.make(tmp_path)
        (root / "manifest.json").write_text("{not json")
        with pytest.raises(ParseError):
            load_dataset(root)

    def test_truncated_labels(self, tmp_path):
        root = self.make(tmp_path)
        path = root / "seq_000_stand" / "labels.bin"
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(DataError):
            load_dataset(root)

    def test_tampered_index_counts(self, tmp_path):
        root = self.make(tmp_path)
        path = root / "seq_000_stand" / "mhi.index"
        path.write_text(path.read_text().replace("rows 64", "rows 32"))
        with pytest.raises(DataError):
            load_dataset(root)

    def test_index_missing_end_marker(self, tmp_path):
        root = self.make(tmp_path)
        path = root / "seq_000_stand" / "labels.index"
        text = path.read_text()
        path.write_text(text[:text.rindex("end")])
        with pytest.raises(ParseError):
            load_dataset(root)

    def test_total_frames_mismatch(self, tmp_path):
        root = self.make(tmp_path)
        path = root / "manifest.json"
        blob = json.loads(path.read_text())
        blob["total_frames"] = 99
        path.write_text(json.dumps(blob))
        with pytest.raises(DataError):
            load_dataset(root)


class TestStackAndSplit:
    def test_stacked_shapes(self, small_dataset):
        root, _ = small_dataset
        ds = load_dataset(root)
        arrays = stack_sequences(ds.sequences)
        assert arrays["mhi"].shape == (10, 64, 13)
        assert arrays["masks"].shape == (10, 256, 256)
        assert arrays["body"].shape == (10, 45)
        assert arrays["f"].shape == (10, 3)
        assert arrays["u"].shape == (10, 3)
        assert arrays["images"].shape == (10, 256, 256, 3)

    def test_body_flattening_order(self, small_dataset):
        root, _ = small_dataset
        ds = load_dataset(root)
        arrays = stack_sequences(ds.sequences)
        seq = ds.sequences[0]
        assert np.array_equal(arrays["body"][2], seq.body[2].reshape(-1))

    def test_split_by_motion(self, small_dataset):
        root, _ = small_dataset
        ds = load_dataset(root)
        train, held = ds.split(["walk_cycle"])
        assert [s.motion for s in train] == ["stand"]
        assert [s.motion for s in held] == ["walk_cycle"]

    def test_empty_stack_rejected(self):
        with pytest.raises(DataError):
            stack_sequences([])
