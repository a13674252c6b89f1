"""White-box adversarial example generation on the substitute model.

FGSM, BIM and PGD share one iteration: ascend the sign (L-inf) or the
normalized gradient (L2) of the classification loss, project the
accumulated perturbation back into the epsilon ball, clamp pixels to
[0, 1]. FGSM is the single-step case with alpha = epsilon, so FGSM and
one-step BIM are bit-equal by construction. Non-targeted attacks maximize
the loss at the reference label; targeted attacks descend toward the
chosen class.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .archive import load_archive, save_archive
from .core import ImageBatch


class AttackMethod(enum.Enum):
    FGSM = "fgsm"
    BIM = "bim"
    PGD = "pgd"


class AttackNorm(enum.Enum):
    LINF = "linf"
    L2 = "l2"


@dataclass(frozen=True)
class AttackGoal:
    """NON_TARGET when ``target_class`` is None, TARGET(class) otherwise."""

    target_class: int | None = None

    @property
    def targeted(self) -> bool:
        return self.target_class is not None


@dataclass(frozen=True)
class AttackConfig:
    method: AttackMethod
    epsilon: float
    alpha: float
    steps: int = 1
    norm: AttackNorm = AttackNorm.LINF
    goal: AttackGoal = AttackGoal()
    random_start: bool = False  # Eq-style PGD starts from the clean image

    def __post_init__(self) -> None:
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.alpha < 0 or self.alpha > self.epsilon:
            raise ValueError("alpha must satisfy 0 <= alpha <= epsilon")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.method is AttackMethod.FGSM and (self.steps != 1 or self.alpha != self.epsilon):
            raise ValueError("FGSM requires steps = 1 and alpha = epsilon")

    @classmethod
    def fgsm(cls, epsilon: float, norm: AttackNorm = AttackNorm.LINF, goal: AttackGoal = AttackGoal()) -> "AttackConfig":
        return cls(AttackMethod.FGSM, epsilon, epsilon, 1, norm, goal)


@dataclass(frozen=True)
class AdversarialBatch:
    """Originals + perturbed images with per-sample distances and predictions.

    Construction re-checks the ball: every sample's distance under the
    configured norm must not exceed epsilon + 1e-6, and pixels stay in [0, 1]
    (enforced by ImageBatch).
    """

    originals: ImageBatch
    adversarials: ImageBatch
    l2: tuple[float, ...]
    linf: tuple[float, ...]
    preds_before: tuple[int, ...]
    preds_after: tuple[int, ...]
    config: AttackConfig

    def __post_init__(self) -> None:
        n = len(self.originals)
        for name in ("l2", "linf", "preds_before", "preds_after"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} length must match the batch size")
        bound = self.config.epsilon + 1e-6
        distances = self.linf if self.config.norm is AttackNorm.LINF else self.l2
        worst = max(distances, default=0.0)
        if worst > bound:
            raise ValueError(
                f"{self.config.norm.value} distance {worst} exceeds epsilon bound {bound}"
            )

    def __len__(self) -> int:
        return len(self.originals)


def _per_sample_norms(delta: torch.Tensor) -> tuple[tuple[float, ...], tuple[float, ...]]:
    flat = delta.reshape(delta.shape[0], -1)
    l2 = tuple(float(v) for v in flat.norm(dim=1))
    linf = tuple(float(v) for v in flat.abs().max(dim=1).values) if flat.shape[1] else (0.0,) * flat.shape[0]
    return l2, linf


def attack(model: torch.nn.Module, batch: ImageBatch, cfg: AttackConfig) -> AdversarialBatch:
    """Generate adversarial examples for a batch against a white-box model.

    NON_TARGET uses the batch labels as the reference class, falling back to
    the model's clean predictions when labels are absent.
    """
    model.eval()
    x0 = batch.pixels.clone()
    with torch.no_grad():
        clean_logits = model(x0)
    preds_before = tuple(int(v) for v in clean_logits.argmax(dim=1))

    if cfg.goal.targeted:
        y = torch.full((len(batch),), cfg.goal.target_class, dtype=torch.long)
    elif batch.labels is not None:
        y = torch.tensor(batch.labels, dtype=torch.long)
    else:
        y = torch.tensor(preds_before, dtype=torch.long)

    x = x0.clone()
    if cfg.random_start and cfg.epsilon > 0:
        init = torch.empty_like(x).uniform_(-cfg.epsilon, cfg.epsilon)
        x = (x0 + init).clamp(0.0, 1.0)

    sign = -1.0 if cfg.goal.targeted else 1.0
    for _ in range(cfg.steps):
        x = x.detach().requires_grad_(True)
        loss = F.cross_entropy(model(x), y)
        (grad,) = torch.autograd.grad(loss, x)
        finite = grad.reshape(grad.shape[0], -1).isfinite().all(dim=1)
        if not bool(finite.all()):
            bad = int((~finite).nonzero()[0])
            raise RuntimeError(f"non-finite gradient for sample {bad}")
        with torch.no_grad():
            if cfg.norm is AttackNorm.LINF:
                x = x + sign * cfg.alpha * grad.sign()
                delta = (x - x0).clamp(-cfg.epsilon, cfg.epsilon)
            else:
                gnorm = grad.reshape(grad.shape[0], -1).norm(dim=1).clamp_min(1e-12)
                x = x + sign * cfg.alpha * grad / gnorm.view(-1, 1, 1, 1)
                delta = x - x0
                dnorm = delta.reshape(delta.shape[0], -1).norm(dim=1).clamp_min(1e-12)
                scale = (cfg.epsilon / dnorm).clamp(max=1.0)
                delta = delta * scale.view(-1, 1, 1, 1)
            x = (x0 + delta).clamp(0.0, 1.0)

    x_adv = x.detach()
    with torch.no_grad():
        preds_after = tuple(int(v) for v in model(x_adv).argmax(dim=1))
    l2, linf = _per_sample_norms(x_adv - x0)
    return AdversarialBatch(
        originals=batch,
        adversarials=ImageBatch(x_adv, batch.labels),
        l2=l2,
        linf=linf,
        preds_before=preds_before,
        preds_after=preds_after,
        config=cfg,
    )


def perturbation_stats(advs: AdversarialBatch) -> dict[str, float]:
    """Batch-average perturbation sizes: flattened-pixel L2 and max-abs L-inf."""
    return {
        "mean_l2": float(np.mean(advs.l2)) if advs.l2 else 0.0,
        "mean_linf": float(np.mean(advs.linf)) if advs.linf else 0.0,
    }


def _config_to_dict(cfg: AttackConfig) -> dict:
    return {
        "method": cfg.method.value,
        "epsilon": cfg.epsilon,
        "alpha": cfg.alpha,
        "steps": cfg.steps,
        "norm": cfg.norm.value,
        "target_class": cfg.goal.target_class,
        "random_start": cfg.random_start,
    }


def config_from_dict(data: dict) -> AttackConfig:
    return AttackConfig(
        method=AttackMethod(data["method"]),
        epsilon=float(data["epsilon"]),
        alpha=float(data["alpha"]),
        steps=int(data.get("steps", 1)),
        norm=AttackNorm(data.get("norm", "linf")),
        goal=AttackGoal(data.get("target_class")),
        random_start=bool(data.get("random_start", False)),
    )


def save_adversarial_batch(path: str | Path, advs: AdversarialBatch) -> Path:
    tensors = {
        "originals": advs.originals.pixels.numpy().astype(np.float32, copy=False),
        "adversarials": advs.adversarials.pixels.numpy().astype(np.float32, copy=False),
        "l2": np.asarray(advs.l2, dtype=np.float64),
        "linf": np.asarray(advs.linf, dtype=np.float64),
        "preds_before": np.asarray(advs.preds_before, dtype=np.int64),
        "preds_after": np.asarray(advs.preds_after, dtype=np.int64),
    }
    meta = {
        "labels": list(advs.originals.labels) if advs.originals.labels is not None else None,
        "config": _config_to_dict(advs.config),
    }
    return save_archive(path, tensors, meta)


def load_adversarial_batch(path: str | Path) -> AdversarialBatch:
    tensors, meta = load_archive(path)
    labels = tuple(meta["labels"]) if meta.get("labels") is not None else None
    return AdversarialBatch(
        originals=ImageBatch(torch.from_numpy(tensors["originals"]), labels),
        adversarials=ImageBatch(torch.from_numpy(tensors["adversarials"]), labels),
        l2=tuple(float(v) for v in tensors["l2"]),
        linf=tuple(float(v) for v in tensors["linf"]),
        preds_before=tuple(int(v) for v in tensors["preds_before"]),
        preds_after=tuple(int(v) for v in tensors["preds_after"]),
        config=config_from_dict(meta["config"]),
    )


def stats_to_json(path: str | Path, advs: AdversarialBatch) -> Path:
    path = Path(path)
    payload = {"config": _config_to_dict(advs.config), **perturbation_stats(advs)}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    return path
