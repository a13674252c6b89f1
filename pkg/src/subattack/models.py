"""Victim-side model: a small two-stage convnet and its checkpoint format.

The harness trains this net as the black-box target; the LOCAL oracle loads
the resulting checkpoint. Checkpoints are tensor archives whose meta block
records the constructor arguments, so loading never needs pickle.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from torch import nn

from .archive import load_archive, save_archive


class TargetConvNet(nn.Module):
    """Two downsampling conv stages + a flattened linear head.

    The head keeps spatial structure (shape classes are not separable from
    channel averages alone at this width). Input size is fixed by the first
    forward; checkpoints record it via ``image_size``.
    """

    def __init__(self, num_classes: int, width: int = 32, image_size: int = 32):
        super().__init__()
        self.num_classes = num_classes
        self.width = width
        self.image_size = image_size
        self.features = nn.Sequential(
            nn.Conv2d(3, width, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(width, width, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(width, width * 2, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(width * 2, width * 2, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
        )
        spatial = image_size // 4
        self.head = nn.Linear(width * 2 * spatial * spatial, num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        feats = self.features(x)
        return self.head(feats.flatten(1))


def state_dict_to_arrays(model: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}


def arrays_to_state_dict(arrays: dict[str, np.ndarray]) -> dict[str, torch.Tensor]:
    return {k: torch.from_numpy(v.copy()) for k, v in arrays.items()}


def save_target_checkpoint(path: str | Path, model: TargetConvNet, extra_meta: dict | None = None) -> Path:
    meta = {
        "kind": "target",
        "num_classes": model.num_classes,
        "width": model.width,
        "image_size": model.image_size,
    }
    meta.update(extra_meta or {})
    return save_archive(path, state_dict_to_arrays(model), meta)


def load_target_checkpoint(path: str | Path) -> tuple[TargetConvNet, dict]:
    tensors, meta = load_archive(path)
    if meta.get("kind") != "target":
        raise ValueError(f"{path}: not a target checkpoint")
    model = TargetConvNet(int(meta["num_classes"]), int(meta["width"]), int(meta.get("image_size", 32)))
    model.load_state_dict(arrays_to_state_dict(tensors))
    model.eval()
    return model, meta
