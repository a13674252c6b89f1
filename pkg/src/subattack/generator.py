"""Pluggable latent generator backends.

A backend realizes three calls: text-prompted generation, image-to-latent
encoding, and latent-guided decoding (the class prompt rides along as the
second guidance condition). Two desk-scale reference backends are provided:

* ``IdentityBackend`` — latent = s x s block average, decoder = nearest
  upsample. Analytic, so equivariance and round-trip tests are exact.
* ``ConvAutoencoderBackend`` — a pooling-free convolutional autoencoder
  trained offline on the toy dataset (strided convs only, which keeps
  stride-multiple translation equivariance exact away from the borders).

``RemoteGeneratorBackend`` adapts a real latent-diffusion server speaking
the ``/generate``, ``/img2img`` and ``/encode`` protocol.
"""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .archive import load_archive, save_archive
from .core import ClassSpace, ImageBatch, render_toy_image

OFF_STYLES = ("faded", "inverted", "cluttered", "tiny")


class LatentSource(enum.Enum):
    GENERATED = "generated"
    ENCODED = "encoded"
    AUGMENTED = "augmented"


@dataclass(frozen=True)
class LatentCode:
    """A class-tagged point in a backend's latent space, shape (C_z, H_z, W_z)."""

    values: torch.Tensor
    class_index: int
    source: LatentSource = LatentSource.ENCODED

    def __post_init__(self) -> None:
        if self.values.ndim != 3:
            raise ValueError(f"latent values must be (C, H, W), got {tuple(self.values.shape)}")
        if self.class_index < 0:
            raise ValueError("class_index must be non-negative")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.values.shape)


@dataclass(frozen=True)
class BackendDescriptor:
    name: str
    latent_shape: tuple[int, int, int]
    spatial_stride: int
    image_size: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "latent_shape", tuple(int(v) for v in self.latent_shape))
        _, hz, wz = self.latent_shape
        if hz * self.spatial_stride != self.image_size or wz * self.spatial_stride != self.image_size:
            raise ValueError(
                f"latent geometry {self.latent_shape} x stride {self.spatial_stride} "
                f"does not match image_size {self.image_size}"
            )

    def fingerprint(self) -> str:
        blob = json.dumps(
            [self.name, list(self.latent_shape), self.spatial_stride, self.image_size]
        ).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def sample_candidate_images(
    class_space: ClassSpace,
    class_index: int,
    count: int,
    seed: int,
    image_size: int,
    off_style_fraction: float,
) -> ImageBatch:
    """Render prompt-conditioned candidates with a canonical/off-style mix.

    Mimics a broad pre-trained generator: a fraction of samples fall outside
    the target's training distribution while still depicting the class.
    """
    rng = np.random.default_rng((seed, class_index))
    images = []
    for _ in range(count):
        style = "canonical"
        if rng.random() < off_style_fraction:
            style = OFF_STYLES[rng.integers(len(OFF_STYLES))]
        images.append(
            render_toy_image(rng, class_index, class_space.num_classes, image_size, style)
        )
    if not images:
        return ImageBatch(torch.zeros((0, 3, image_size, image_size)), ())
    return ImageBatch(torch.from_numpy(np.stack(images)), (class_index,) * count)


class GeneratorBackend:
    """Interface shared by all backends. Backends never mutate their inputs."""

    descriptor: BackendDescriptor
    class_space: ClassSpace

    def text_to_images(self, class_index: int, count: int, seed: int) -> ImageBatch:
        raise NotImplementedError

    def encode(self, batch: ImageBatch) -> list[LatentCode]:
        raise NotImplementedError

    def latents_to_images(self, codes: list[LatentCode], seed: int = 0) -> ImageBatch:
        raise NotImplementedError

    # shared validation

    def _check_image_batch(self, batch: ImageBatch) -> None:
        if batch.image_size != self.descriptor.image_size:
            raise ValueError(
                f"image size {batch.image_size} does not match backend "
                f"image size {self.descriptor.image_size}"
            )
        if batch.labels is None:
            raise ValueError("encode requires a labeled batch (latents carry class tags)")

    def _check_codes(self, codes: list[LatentCode]) -> None:
        for i, code in enumerate(codes):
            if code.shape != self.descriptor.latent_shape:
                raise ValueError(
                    f"code {i} has shape {code.shape}, backend expects {self.descriptor.latent_shape}"
                )


class IdentityBackend(GeneratorBackend):
    """Analytic backend: block-average encoder, nearest-neighbour decoder."""

    def __init__(
        self,
        class_space: ClassSpace,
        image_size: int = 32,
        stride: int = 2,
        off_style_fraction: float = 0.5,
    ):
        if image_size % stride:
            raise ValueError("image_size must be divisible by stride")
        self.class_space = class_space
        self.off_style_fraction = off_style_fraction
        self.descriptor = BackendDescriptor(
            name=f"identity-s{stride}",
            latent_shape=(3, image_size // stride, image_size // stride),
            spatial_stride=stride,
            image_size=image_size,
        )

    def text_to_images(self, class_index: int, count: int, seed: int) -> ImageBatch:
        return sample_candidate_images(
            self.class_space, class_index, count, seed,
            self.descriptor.image_size, self.off_style_fraction,
        )

    def encode(self, batch: ImageBatch) -> list[LatentCode]:
        self._check_image_batch(batch)
        s = self.descriptor.spatial_stride
        latents = F.avg_pool2d(batch.pixels, kernel_size=s, stride=s)
        return [
            LatentCode(latents[i], batch.labels[i], LatentSource.ENCODED)
            for i in range(len(batch))
        ]

    def latents_to_images(self, codes: list[LatentCode], seed: int = 0) -> ImageBatch:
        self._check_codes(codes)
        if not codes:
            size = self.descriptor.image_size
            return ImageBatch(torch.zeros((0, 3, size, size)), ())
        s = self.descriptor.spatial_stride
        stacked = torch.stack([c.values for c in codes])
        pixels = stacked.repeat_interleave(s, dim=2).repeat_interleave(s, dim=3)
        return ImageBatch(pixels.clamp(0.0, 1.0), tuple(c.class_index for c in codes))


class _Encoder(nn.Module):
    def __init__(self, latent_channels: int, width: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, width, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(width, width, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(width, latent_channels, 3, padding=1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class _Decoder(nn.Module):
    def __init__(self, latent_channels: int, width: int, num_classes: int):
        super().__init__()
        self.embed = nn.Embedding(num_classes, latent_channels)
        self.net = nn.Sequential(
            nn.ConvTranspose2d(latent_channels * 2, width, 4, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(width, width, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(width, 3, 3, padding=1),
        )

    def forward(self, z: torch.Tensor, class_indices: torch.Tensor) -> torch.Tensor:
        cond = self.embed(class_indices)[:, :, None, None].expand(-1, -1, z.shape[2], z.shape[3])
        return torch.sigmoid(self.net(torch.cat([z, cond], dim=1)))


class ConvAutoencoderBackend(GeneratorBackend):
    """Pooling-free conv autoencoder trained offline on the toy dataset.

    The decoder takes the class prompt as a second condition (an embedding
    concatenated onto the latent channels).
    """

    def __init__(
        self,
        class_space: ClassSpace,
        encoder: _Encoder,
        decoder: _Decoder,
        image_size: int = 32,
        latent_channels: int = 8,
        width: int = 32,
        off_style_fraction: float = 0.5,
    ):
        self.class_space = class_space
        self.encoder = encoder.eval()
        self.decoder = decoder.eval()
        self.latent_channels = latent_channels
        self.width = width
        self.off_style_fraction = off_style_fraction
        self.descriptor = BackendDescriptor(
            name="conv-ae",
            latent_shape=(latent_channels, image_size // 2, image_size // 2),
            spatial_stride=2,
            image_size=image_size,
        )

    def text_to_images(self, class_index: int, count: int, seed: int) -> ImageBatch:
        rendered = sample_candidate_images(
            self.class_space, class_index, count, seed,
            self.descriptor.image_size, self.off_style_fraction,
        )
        if not len(rendered):
            return rendered
        # generated images live on the decoder manifold
        return self.latents_to_images(self.encode(rendered), seed)

    def encode(self, batch: ImageBatch) -> list[LatentCode]:
        self._check_image_batch(batch)
        with torch.no_grad():
            latents = self.encoder(batch.pixels)
        return [
            LatentCode(latents[i], batch.labels[i], LatentSource.ENCODED)
            for i in range(len(batch))
        ]

    def latents_to_images(self, codes: list[LatentCode], seed: int = 0) -> ImageBatch:
        self._check_codes(codes)
        if not codes:
            size = self.descriptor.image_size
            return ImageBatch(torch.zeros((0, 3, size, size)), ())
        stacked = torch.stack([c.values for c in codes])
        classes = torch.tensor([c.class_index for c in codes], dtype=torch.long)
        with torch.no_grad():
            pixels = self.decoder(stacked, classes)
        return ImageBatch(pixels.clamp(0.0, 1.0), tuple(c.class_index for c in codes))

    def save(self, path: str | Path) -> Path:
        tensors = {f"encoder.{k}": v.detach().numpy() for k, v in self.encoder.state_dict().items()}
        tensors.update(
            {f"decoder.{k}": v.detach().numpy() for k, v in self.decoder.state_dict().items()}
        )
        meta = {
            "kind": "conv-ae",
            "class_names": list(self.class_space.names),
            "image_size": self.descriptor.image_size,
            "latent_channels": self.latent_channels,
            "width": self.width,
            "off_style_fraction": self.off_style_fraction,
        }
        return save_archive(path, tensors, meta)

    @classmethod
    def load(cls, path: str | Path) -> "ConvAutoencoderBackend":
        tensors, meta = load_archive(path)
        if meta.get("kind") != "conv-ae":
            raise ValueError(f"{path}: not a conv-ae backend checkpoint")
        class_space = ClassSpace(len(meta["class_names"]), tuple(meta["class_names"]))
        encoder = _Encoder(meta["latent_channels"], meta["width"])
        decoder = _Decoder(meta["latent_channels"], meta["width"], class_space.num_classes)
        encoder.load_state_dict(
            {k[len("encoder."):]: torch.from_numpy(v.copy()) for k, v in tensors.items() if k.startswith("encoder.")}
        )
        decoder.load_state_dict(
            {k[len("decoder."):]: torch.from_numpy(v.copy()) for k, v in tensors.items() if k.startswith("decoder.")}
        )
        return cls(
            class_space, encoder, decoder,
            image_size=meta["image_size"],
            latent_channels=meta["latent_channels"],
            width=meta["width"],
            off_style_fraction=meta["off_style_fraction"],
        )


def train_autoencoder_backend(
    class_space: ClassSpace,
    dataset: ImageBatch,
    seed: int = 0,
    steps: int = 400,
    batch_size: int = 64,
    lr: float = 1e-3,
    latent_channels: int = 8,
    width: int = 32,
    off_style_fraction: float = 0.5,
) -> ConvAutoencoderBackend:
    """Offline reconstruction training (plain MSE) of the conv-AE backend."""
    torch.manual_seed(seed)
    encoder = _Encoder(latent_channels, width)
    decoder = _Decoder(latent_channels, width, class_space.num_classes)
    params = list(encoder.parameters()) + list(decoder.parameters())
    opt = torch.optim.Adam(params, lr=lr)
    rng = np.random.default_rng(seed)
    pixels = dataset.pixels
    labels = torch.tensor(dataset.labels, dtype=torch.long)
    encoder.train()
    decoder.train()
    for _ in range(steps):
        idx = torch.from_numpy(rng.integers(0, len(dataset), size=batch_size))
        x = pixels[idx]
        recon = decoder(encoder(x), labels[idx])
        loss = F.mse_loss(recon, x)
        opt.zero_grad()
        loss.backward()
        opt.step()
    return ConvAutoencoderBackend(
        class_space, encoder, decoder,
        image_size=dataset.image_size,
        latent_channels=latent_channels,
        width=width,
        off_style_fraction=off_style_fraction,
    )


def reconstruction_mse(backend: GeneratorBackend, batch: ImageBatch) -> float:
    """Mean per-pixel squared error of encode -> decode over a batch."""
    recon = backend.latents_to_images(backend.encode(batch))
    return float(F.mse_loss(recon.pixels, batch.pixels))


def _b64_encode(arr: np.ndarray) -> dict:
    import base64

    raw = arr.astype("<f4", copy=False)
    return {"data": base64.b64encode(raw.tobytes()).decode("ascii"), "shape": list(raw.shape)}


def _b64_decode(obj: dict) -> np.ndarray:
    import base64

    raw = base64.b64decode(obj["data"])
    return np.frombuffer(raw, dtype="<f4").reshape(obj["shape"]).copy()


class RemoteGeneratorBackend(GeneratorBackend):
    """Adapter for a latent-diffusion server.

    Protocol: POST ``/generate`` ``{prompt, count, seed}``;
    ``/img2img`` ``{prompt, latent: {data, shape}, seed, strength}``;
    ``/encode`` ``{image: {data, shape}}``. Images travel as base64 raw
    float32 plus a shape list, and responses use the same encoding.
    ``strength`` is the img2img re-noising knob (default 0.5).
    """

    def __init__(
        self,
        base_url: str,
        class_space: ClassSpace,
        descriptor: BackendDescriptor,
        strength: float = 0.5,
        timeout: float = 120.0,
        post: Callable[[str, dict, float], dict] | None = None,
    ):
        from .oracle import _default_post

        self.base_url = base_url.rstrip("/")
        self.class_space = class_space
        self.descriptor = descriptor
        self.strength = strength
        self.timeout = timeout
        self._post = post or _default_post

    def _prompt(self, class_index: int) -> str:
        return self.class_space.names[class_index]

    def text_to_images(self, class_index: int, count: int, seed: int) -> ImageBatch:
        reply = self._post(
            f"{self.base_url}/generate",
            {"prompt": self._prompt(class_index), "count": count, "seed": seed},
            self.timeout,
        )
        pixels = torch.from_numpy(_b64_decode(reply["images"])).clamp(0.0, 1.0)
        return ImageBatch(pixels, (class_index,) * pixels.shape[0])

    def encode(self, batch: ImageBatch) -> list[LatentCode]:
        self._check_image_batch(batch)
        codes = []
        for i in range(len(batch)):
            reply = self._post(
                f"{self.base_url}/encode",
                {"image": _b64_encode(batch.pixels[i].numpy())},
                self.timeout,
            )
            values = torch.from_numpy(_b64_decode(reply["latent"]))
            codes.append(LatentCode(values, batch.labels[i], LatentSource.ENCODED))
        return codes

    def latents_to_images(self, codes: list[LatentCode], seed: int = 0) -> ImageBatch:
        self._check_codes(codes)
        images = []
        for code in codes:
            reply = self._post(
                f"{self.base_url}/img2img",
                {
                    "prompt": self._prompt(code.class_index),
                    "latent": _b64_encode(code.values.numpy()),
                    "seed": seed,
                    "strength": self.strength,
                },
                self.timeout,
            )
            images.append(torch.from_numpy(_b64_decode(reply["images"])))
        pixels = torch.cat(images, dim=0).clamp(0.0, 1.0)
        return ImageBatch(pixels, tuple(c.class_index for c in codes))


@dataclass(frozen=True)
class EquivarianceReport:
    exact: bool
    interior_cosine: float
    margin_cells: int


def _translate_zero_fill(t: torch.Tensor, dy: int, dx: int) -> torch.Tensor:
    """Shift the last two axes by (dy, dx), filling vacated cells with zeros."""
    out = torch.zeros_like(t)
    h, w = t.shape[-2], t.shape[-1]
    ys = slice(max(dy, 0), h + min(dy, 0))
    xs = slice(max(dx, 0), w + min(dx, 0))
    ys_src = slice(max(-dy, 0), h + min(-dy, 0))
    xs_src = slice(max(-dx, 0), w + min(-dx, 0))
    out[..., ys, xs] = t[..., ys_src, xs_src]
    return out


def check_equivariance(
    backend: GeneratorBackend,
    batch: ImageBatch,
    shift: tuple[int, int],
    margin: int | None = None,
) -> EquivarianceReport:
    """Compare encode(translate(x)) with translate(encode(x)) on interiors.

    The shift must be a multiple of the backend's spatial stride; the latent
    is shifted by shift/stride cells. Edge cells are excluded (``margin``
    latent cells per side, default shift + 3 to clear conv padding effects).
    """
    s = backend.descriptor.spatial_stride
    dy, dx = shift
    if dy % s or dx % s:
        raise ValueError(f"shift {shift} must be a multiple of the spatial stride {s}")
    cy, cx = dy // s, dx // s
    if margin is None:
        margin = max(abs(cy), abs(cx)) + 3
    shifted = ImageBatch(_translate_zero_fill(batch.pixels, dy, dx), batch.labels)
    enc_shifted = torch.stack([c.values for c in backend.encode(shifted)])
    enc_plain = torch.stack([c.values for c in backend.encode(batch)])
    shifted_enc = _translate_zero_fill(enc_plain, cy, cx)

    hz, wz = enc_plain.shape[-2], enc_plain.shape[-1]
    if 2 * margin >= min(hz, wz):
        raise ValueError(f"margin {margin} leaves no interior on a {hz}x{wz} latent")
    a = enc_shifted[..., margin : hz - margin, margin : wz - margin]
    b = shifted_enc[..., margin : hz - margin, margin : wz - margin]
    exact = bool(torch.equal(a, b))
    af = a.reshape(a.shape[0], -1).double()
    bf = b.reshape(b.shape[0], -1).double()
    cosine = float(F.cosine_similarity(af, bf, dim=1).mean().clamp(-1.0, 1.0))
    return EquivarianceReport(exact=exact, interior_cosine=cosine, margin_cells=margin)
