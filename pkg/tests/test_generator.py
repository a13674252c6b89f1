"""Generator backends: toy reference implementations, remote adapter, equivariance."""

import base64

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from subattack.core import ClassSpace, ImageBatch, OracleMode, StageTag, ToyDatasetSpec, generate_toy_dataset
from subattack.generator import (
    BackendDescriptor,
    ConvAutoencoderBackend,
    IdentityBackend,
    LatentCode,
    LatentSource,
    RemoteGeneratorBackend,
    check_equivariance,
    reconstruction_mse,
)
from subattack.oracle import LocalOracle, OracleConfig


@pytest.fixture()
def identity_backend(toy_space):
    return IdentityBackend(toy_space, image_size=32, stride=2)


class TestDescriptor:
    def test_geometry_must_match(self):
        with pytest.raises(ValueError, match="does not match"):
            BackendDescriptor("x", (3, 16, 16), 2, 64)

    def test_fingerprint_stable_and_distinct(self):
        d1 = BackendDescriptor("x", (3, 16, 16), 2, 32)
        d2 = BackendDescriptor("x", (3, 16, 16), 2, 32)
        d3 = BackendDescriptor("y", (3, 16, 16), 2, 32)
        assert d1.fingerprint() == d2.fingerprint() != d3.fingerprint()


class TestTextToImages:
    def test_deterministic_per_seed(self, identity_backend):
        a = identity_backend.text_to_images(3, 5, seed=1)
        b = identity_backend.text_to_images(3, 5, seed=1)
        assert torch.equal(a.pixels, b.pixels)
        assert a.labels == b.labels == (3,) * 5

    def test_count_zero_gives_empty_batch(self, identity_backend):
        batch = identity_backend.text_to_images(3, 0, seed=1)
        assert len(batch) == 0

    def test_generated_images_match_prompted_class(self, identity_backend, trained_target):
        # run the trained toy oracle over a prompted batch: most samples
        # should land on the prompted class despite the off-style mix
        model, _, _ = trained_target
        oracle = LocalOracle.from_model(model, 10, OracleConfig(OracleMode.PROBABILITY))
        cls = identity_backend.class_space.names.index("red-circle")
        batch = identity_backend.text_to_images(cls, 50, seed=7)
        outputs = oracle.query(batch, StageTag.EVAL)
        hit = sum(o.label == cls for o in outputs) / len(outputs)
        assert hit >= 0.6, f"only {hit:.2f} classified as the prompted class"


class TestIdentityBackend:
    def test_encode_is_block_average(self, identity_backend):
        batch = generate_toy_dataset(ToyDatasetSpec(10, 32, 1, seed=3))
        codes = identity_backend.encode(batch)
        assert codes[0].shape == (3, 16, 16)
        manual = batch.pixels.reshape(len(batch), 3, 16, 2, 16, 2).mean(dim=(3, 5))
        assert torch.allclose(torch.stack([c.values for c in codes]), manual)

    def test_round_trip_exact_on_stride_constant_images(self, identity_backend):
        # blocks of 2x2 constant pixels survive the pool + nearest upsample
        base = torch.rand(2, 3, 16, 16)
        pixels = base.repeat_interleave(2, dim=2).repeat_interleave(2, dim=3)
        batch = ImageBatch(pixels, (0, 1))
        recon = identity_backend.latents_to_images(identity_backend.encode(batch))
        assert torch.equal(recon.pixels, batch.pixels)

    def test_decode_zero_latent_in_range(self, identity_backend):
        code = LatentCode(torch.zeros(3, 16, 16), 0, LatentSource.GENERATED)
        img = identity_backend.latents_to_images([code])
        assert torch.isfinite(img.pixels).all()
        assert img.pixels.min() >= 0 and img.pixels.max() <= 1

    def test_encode_requires_labels(self, identity_backend):
        with pytest.raises(ValueError, match="label"):
            identity_backend.encode(ImageBatch(torch.rand(1, 3, 32, 32)))

    def test_order_and_class_tags_preserved(self, identity_backend):
        batch = generate_toy_dataset(ToyDatasetSpec(10, 32, 1, seed=3))
        codes = identity_backend.encode(batch)
        assert tuple(c.class_index for c in codes) == batch.labels
        decoded = identity_backend.latents_to_images(codes)
        assert decoded.labels == batch.labels

    def test_inputs_not_mutated(self, identity_backend):
        batch = generate_toy_dataset(ToyDatasetSpec(10, 32, 1, seed=3))
        before = batch.pixels.clone()
        identity_backend.encode(batch)
        identity_backend.text_to_images(0, 3, seed=0)
        assert torch.equal(batch.pixels, before)


class TestEquivariance:
    def test_identity_backend_exact_for_stride_shift(self, identity_backend):
        batch = generate_toy_dataset(ToyDatasetSpec(10, 32, 2, seed=5))
        report = check_equivariance(identity_backend, batch, (2, 2))
        assert report.exact
        assert report.interior_cosine == pytest.approx(1.0, abs=1e-9)

    def test_zero_shift_exact_for_every_backend(self, identity_backend, trained_ae_backend):
        batch = generate_toy_dataset(ToyDatasetSpec(10, 32, 2, seed=5))
        for backend in (identity_backend, trained_ae_backend):
            assert check_equivariance(backend, batch, (0, 0)).exact

    def test_non_stride_shift_rejected(self, identity_backend):
        batch = generate_toy_dataset(ToyDatasetSpec(10, 32, 1, seed=5))
        with pytest.raises(ValueError, match="stride"):
            check_equivariance(identity_backend, batch, (1, 0))

    def test_trained_autoencoder_interior_cosine(self, trained_ae_backend):
        batch = generate_toy_dataset(ToyDatasetSpec(10, 32, 10, seed=44))
        report = check_equivariance(trained_ae_backend, batch, (4, 0))
        assert report.interior_cosine >= 0.95


class TestConvAutoencoder:
    def test_reconstruction_mse_below_threshold(self, trained_ae_backend):
        held_out = generate_toy_dataset(ToyDatasetSpec(10, 32, 10, seed=43))
        assert reconstruction_mse(trained_ae_backend, held_out) < 0.01

    def test_save_load_round_trip(self, trained_ae_backend, tmp_path):
        trained_ae_backend.save(tmp_path / "ae.tns")
        loaded = ConvAutoencoderBackend.load(tmp_path / "ae.tns")
        batch = generate_toy_dataset(ToyDatasetSpec(10, 32, 2, seed=9))
        a = trained_ae_backend.latents_to_images(trained_ae_backend.encode(batch))
        b = loaded.latents_to_images(loaded.encode(batch))
        assert torch.equal(a.pixels, b.pixels)
        assert loaded.descriptor.fingerprint() == trained_ae_backend.descriptor.fingerprint()

    def test_decode_of_zero_latent_valid(self, trained_ae_backend):
        shape = trained_ae_backend.descriptor.latent_shape
        code = LatentCode(torch.zeros(*shape), 2, LatentSource.GENERATED)
        img = trained_ae_backend.latents_to_images([code])
        assert torch.isfinite(img.pixels).all()
        assert img.pixels.min() >= 0 and img.pixels.max() <= 1


def _encode_b64(arr: np.ndarray) -> dict:
    raw = arr.astype("<f4")
    return {"data": base64.b64encode(raw.tobytes()).decode("ascii"), "shape": list(raw.shape)}


class RecordedServer:
    """Replay stub for the remote generator protocol."""

    def __init__(self, image_size: int = 32, latent_shape=(4, 16, 16)):
        self.image_size = image_size
        self.latent_shape = latent_shape
        self.requests = []

    def __call__(self, url: str, payload: dict, timeout: float) -> dict:
        self.requests.append((url, payload))
        rng = np.random.default_rng(abs(hash(url)) % 2**31)
        if url.endswith("/generate"):
            imgs = rng.random((payload["count"], 3, self.image_size, self.image_size), dtype=np.float32)
            return {"images": _encode_b64(imgs)}
        if url.endswith("/img2img"):
            imgs = rng.random((1, 3, self.image_size, self.image_size), dtype=np.float32)
            return {"images": _encode_b64(imgs)}
        if url.endswith("/encode"):
            return {"latent": _encode_b64(rng.random(self.latent_shape, dtype=np.float32))}
        raise AssertionError(f"unexpected url {url}")


class TestRemoteAdapter:
    def _backend(self, server):
        space = ClassSpace.toy(4)
        desc = BackendDescriptor("remote-sd", (4, 16, 16), 2, 32)
        return RemoteGeneratorBackend("http://gen.invalid", space, desc, post=server)

    def test_generate_round_trip_byte_identical(self):
        server = RecordedServer()
        backend = self._backend(server)
        batch = backend.text_to_images(1, 3, seed=5)
        # replaying the recorded response must give byte-identical pixels
        recorded = server(f"{backend.base_url}/generate", {"prompt": "red-square", "count": 3, "seed": 5}, 0)
        expected = np.frombuffer(
            base64.b64decode(recorded["images"]["data"]), dtype="<f4"
        ).reshape(recorded["images"]["shape"])
        assert batch.pixels.numpy().tobytes() == np.clip(expected, 0, 1).tobytes()

    def test_img2img_carries_prompt_latent_and_strength(self):
        server = RecordedServer()
        backend = self._backend(server)
        code = LatentCode(torch.rand(4, 16, 16), 2, LatentSource.AUGMENTED)
        backend.latents_to_images([code], seed=9)
        url, payload = server.requests[-1]
        assert url.endswith("/img2img")
        assert payload["prompt"] == backend.class_space.names[2]
        assert payload["strength"] == 0.5
        sent = np.frombuffer(base64.b64decode(payload["latent"]["data"]), dtype="<f4")
        np.testing.assert_allclose(sent.reshape(4, 16, 16), code.values.numpy())

    def test_encode_round_trip(self):
        server = RecordedServer()
        backend = self._backend(server)
        batch = ImageBatch(torch.rand(2, 3, 32, 32), (0, 1))
        codes = backend.encode(batch)
        assert len(codes) == 2
        assert codes[0].shape == (4, 16, 16)
        assert [c.class_index for c in codes] == [0, 1]
