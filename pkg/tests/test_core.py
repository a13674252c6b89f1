"""Core domain types, toy dataset, persistence."""

import numpy as np
import pytest
import torch
from PIL import Image

from subattack.archive import load_archive, save_archive
from subattack.core import (
    ClassSpace,
    ImageBatch,
    OracleMode,
    OracleOutput,
    ToyDatasetSpec,
    concat_batches,
    generate_toy_dataset,
    load_image_batch,
    load_image_folder,
    save_image_batch,
    toy_class_names,
    validate_labels,
)


class TestArchive:
    def test_round_trip_multiple_dtypes(self, tmp_path):
        tensors = {
            "f32": np.arange(12, dtype=np.float32).reshape(3, 4),
            "f64": np.linspace(0, 1, 5),
            "i64": np.array([1, -2, 3], dtype=np.int64),
            "u8": np.array([0, 255], dtype=np.uint8),
        }
        save_archive(tmp_path / "a.tns", tensors, {"note": "x"})
        loaded, meta = load_archive(tmp_path / "a.tns")
        assert meta == {"note": "x"}
        for name, arr in tensors.items():
            assert loaded[name].dtype == arr.dtype
            np.testing.assert_array_equal(loaded[name], arr)

    def test_write_is_byte_deterministic(self, tmp_path):
        tensors = {"w": np.random.default_rng(0).normal(size=(4, 4)).astype(np.float32)}
        p1 = save_archive(tmp_path / "one.tns", tensors, {"k": 1})
        p2 = save_archive(tmp_path / "two.tns", tensors, {"k": 1})
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.tns"
        path.write_bytes(b"not an archive at all")
        with pytest.raises(ValueError, match="bad magic"):
            load_archive(path)


class TestToyDataset:
    def test_deterministic_per_seed(self):
        spec = ToyDatasetSpec(10, 32, 1, seed=7)
        a = generate_toy_dataset(spec)
        b = generate_toy_dataset(spec)
        assert torch.equal(a.pixels, b.pixels)
        assert a.labels == b.labels

    def test_different_seed_differs(self):
        a = generate_toy_dataset(ToyDatasetSpec(10, 32, 1, seed=7))
        b = generate_toy_dataset(ToyDatasetSpec(10, 32, 1, seed=8))
        assert not torch.equal(a.pixels, b.pixels)

    def test_class_balanced_counts(self):
        batch = generate_toy_dataset(ToyDatasetSpec(10, 32, 100, seed=7))
        assert len(batch) == 1000
        counts = np.bincount(np.asarray(batch.labels), minlength=10)
        assert (counts == 100).all()

    def test_pixels_in_range(self):
        batch = generate_toy_dataset(ToyDatasetSpec(6, 16, 4, seed=3))
        assert batch.pixels.min() >= 0 and batch.pixels.max() <= 1

    def test_small_image_size_rejected(self):
        with pytest.raises(ValueError, match=">= 8"):
            ToyDatasetSpec(10, 7, 1, seed=0)

    def test_single_class_rejected(self):
        with pytest.raises(ValueError):
            ToyDatasetSpec(1, 32, 1, seed=0)

    def test_classes_separable_by_fresh_convnet(self):
        # independent separability oracle: train a fresh 2-layer convnet on
        # the rendered data and require > 80% training accuracy
        batch = generate_toy_dataset(ToyDatasetSpec(10, 32, 30, seed=7))
        torch.manual_seed(0)
        net = torch.nn.Sequential(
            torch.nn.Conv2d(3, 16, 3, stride=2, padding=1),
            torch.nn.ReLU(),
            torch.nn.Conv2d(16, 32, 3, stride=2, padding=1),
            torch.nn.ReLU(),
            torch.nn.Flatten(),
            torch.nn.Linear(32 * 8 * 8, 10),
        )
        opt = torch.optim.Adam(net.parameters(), lr=3e-3)
        y = torch.tensor(batch.labels)
        rng = np.random.default_rng(0)
        for _ in range(120):
            idx = rng.integers(0, len(batch), size=64)
            loss = torch.nn.functional.cross_entropy(net(batch.pixels[idx]), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
        with torch.no_grad():
            acc = (net(batch.pixels).argmax(1) == y).float().mean().item()
        assert acc > 0.8, f"toy classes not separable enough: train acc {acc:.3f}"

    def test_class_names_layout(self):
        names = toy_class_names(10)
        assert names[0] == "red-circle"
        assert len(set(names)) == 10


class TestImageBatch:
    def test_rejects_out_of_range_pixels(self):
        with pytest.raises(ValueError, match="\\[0, 1\\]"):
            ImageBatch(torch.full((1, 3, 8, 8), 1.5))

    def test_rejects_label_length_mismatch(self):
        with pytest.raises(ValueError, match="length"):
            ImageBatch(torch.zeros((2, 3, 8, 8)), (0,))

    def test_validate_labels_upper_bound(self):
        batch = ImageBatch(torch.zeros((2, 3, 8, 8)), (0, 9))
        validate_labels(batch, ClassSpace.toy(10))
        with pytest.raises(ValueError, match="out of range"):
            validate_labels(batch, ClassSpace.toy(4))

    def test_subset_and_concat(self):
        batch = generate_toy_dataset(ToyDatasetSpec(4, 16, 2, seed=1))
        sub = batch.subset([0, 3, 5])
        assert len(sub) == 3
        assert sub.labels == (batch.labels[0], batch.labels[3], batch.labels[5])
        joined = concat_batches([sub, sub])
        assert len(joined) == 6

    def test_persistence_round_trip_bit_exact(self, tmp_path):
        batch = generate_toy_dataset(ToyDatasetSpec(5, 16, 2, seed=9))
        save_image_batch(tmp_path / "b.tns", batch)
        loaded = load_image_batch(tmp_path / "b.tns")
        assert torch.equal(loaded.pixels, batch.pixels)
        assert loaded.labels == batch.labels


class TestOracleOutput:
    def test_probability_output_valid(self):
        out = OracleOutput.from_probs([0.2, 0.5, 0.3])
        assert out.label == 1
        assert out.mode is OracleMode.PROBABILITY

    def test_tie_break_lowest_index(self):
        out = OracleOutput.from_probs([0.4, 0.4, 0.2])
        assert out.label == 0

    def test_rejects_bad_sum(self):
        with pytest.raises(ValueError, match="sum to 1"):
            OracleOutput(OracleMode.PROBABILITY, (0.5, 0.6), 1)

    def test_rejects_negative(self):
        with pytest.raises(ValueError, match="non-negative"):
            OracleOutput(OracleMode.PROBABILITY, (-0.1, 1.1), 1)

    def test_rejects_wrong_label(self):
        with pytest.raises(ValueError, match="argmax"):
            OracleOutput(OracleMode.PROBABILITY, (0.9, 0.1), 1)

    def test_label_only_carries_no_probs(self):
        out = OracleOutput.label_only(4)
        assert out.probs is None
        with pytest.raises(ValueError, match="must not carry"):
            OracleOutput(OracleMode.LABEL_ONLY, (1.0,), 0)


class TestClassSpace:
    def test_rejects_duplicate_names(self):
        with pytest.raises(ValueError, match="unique"):
            ClassSpace(2, ("a", "a"))

    def test_rejects_empty_name(self):
        with pytest.raises(ValueError, match="non-empty"):
            ClassSpace(2, ("a", ""))


class TestImageFolder:
    def _write(self, path, arr):
        Image.fromarray(arr, mode="RGB").save(path)

    def test_folder_with_two_classes(self, tmp_path):
        space = ClassSpace(2, ("red-circle", "red-square"))
        rng = np.random.default_rng(0)
        for name in space.names:
            (tmp_path / name).mkdir()
            for i in range(3):
                arr = rng.integers(0, 256, size=(32, 32, 3), dtype=np.uint8)
                self._write(tmp_path / name / f"{i}.png", arr)
        batch = load_image_folder(tmp_path, space)
        assert len(batch) == 6
        assert batch.labels == (0, 0, 0, 1, 1, 1)

    def test_empty_class_directory_rejected(self, tmp_path):
        space = ClassSpace(2, ("red-circle", "red-square"))
        (tmp_path / "red-circle").mkdir()
        (tmp_path / "red-square").mkdir()
        self._write(tmp_path / "red-circle" / "0.png", np.zeros((8, 8, 3), dtype=np.uint8))
        with pytest.raises(ValueError, match="red-square.*empty"):
            load_image_folder(tmp_path, space)

    def test_unknown_class_directory_rejected(self, tmp_path):
        space = ClassSpace(2, ("red-circle", "red-square"))
        (tmp_path / "mystery").mkdir()
        with pytest.raises(ValueError, match="mystery"):
            load_image_folder(tmp_path, space)

    def test_all_white_image_decodes_to_ones(self, tmp_path):
        space = ClassSpace(2, ("red-circle", "red-square"))
        for name in space.names:
            (tmp_path / name).mkdir()
            self._write(tmp_path / name / "w.png", np.full((32, 32, 3), 255, dtype=np.uint8))
        batch = load_image_folder(tmp_path, space)
        assert torch.equal(batch.pixels, torch.ones_like(batch.pixels))

    def test_unreadable_file_names_path(self, tmp_path):
        space = ClassSpace(2, ("red-circle", "red-square"))
        for name in space.names:
            (tmp_path / name).mkdir()
            self._write(tmp_path / name / "ok.png", np.zeros((8, 8, 3), dtype=np.uint8))
        bad = tmp_path / "red-circle" / "broken.png"
        bad.write_bytes(b"this is not a png")
        with pytest.raises(ValueError, match="broken.png"):
            load_image_folder(tmp_path, space)

    def test_resize_to_requested_size(self, tmp_path):
        space = ClassSpace(2, ("red-circle", "red-square"))
        for name in space.names:
            (tmp_path / name).mkdir()
            self._write(tmp_path / name / "a.png", np.zeros((64, 64, 3), dtype=np.uint8))
        batch = load_image_folder(tmp_path, space, image_size=32)
        assert batch.pixels.shape == (2, 3, 32, 32)
