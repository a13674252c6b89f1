"""Latent code augmentation: seeded single-code chains and two-code fusion.

A plan is sampled in one shot (branch, base codes, operation chain(s) with
magnitudes and per-op noise seeds, fusion parameters) and is then a pure
value: executing it twice yields identical latents, and plans serialize to
JSON for replay. Within a chain every operation kind appears at most once;
chain length t is drawn uniformly from [1, k] with k = 10 kinds.

Spatial operations act channel-wise on the latent grid; regions vacated by
translation/rotation/affine/erase are zero-filled (the generator treats
zeroed cells as missing features to restore).
"""

from __future__ import annotations

import enum
import json
import math
import threading
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .generator import LatentCode, LatentSource
from .membership import Codebook


class SingleOpKind(enum.Enum):
    TRANSLATE = "translate"
    PAD = "pad"
    ROTATE = "rotate"
    CROP = "crop"
    SCALE = "scale"
    AFFINE = "affine"
    ERASE = "erase"
    GAUSS_BLUR = "gauss_blur"
    GAUSS_NOISE = "gauss_noise"
    SALT_PEPPER = "salt_pepper"


NUM_SINGLE_KINDS = len(SingleOpKind)  # k = 10

# Hard validity bounds (construction fails outside these).
VALID_BOUNDS: dict[SingleOpKind, tuple[float, float]] = {
    SingleOpKind.TRANSLATE: (-0.5, 0.5),     # per-axis fraction of extent
    SingleOpKind.PAD: (0.0, 0.5),            # pad fraction of extent per side
    SingleOpKind.ROTATE: (-180.0, 180.0),    # degrees
    SingleOpKind.CROP: (0.3, 1.0),           # kept fraction
    SingleOpKind.SCALE: (0.5, 2.0),          # zoom factor
    SingleOpKind.AFFINE: (-0.5, 0.5),        # horizontal shear
    SingleOpKind.ERASE: (0.0, 0.5),          # erased area fraction
    SingleOpKind.GAUSS_BLUR: (0.0, 3.0),     # kernel sigma in cells
    SingleOpKind.GAUSS_NOISE: (0.0, 0.5),    # noise std relative to code std
    SingleOpKind.SALT_PEPPER: (0.0, 0.1),    # flipped cell fraction
}

# Default sampling ranges, kept narrow enough that toy decodes stay
# class-recognizable.
SAMPLING_RANGES: dict[SingleOpKind, tuple[float, float]] = {
    SingleOpKind.TRANSLATE: (-0.25, 0.25),
    SingleOpKind.PAD: (0.0, 0.25),
    SingleOpKind.ROTATE: (-30.0, 30.0),
    SingleOpKind.CROP: (0.7, 1.0),
    SingleOpKind.SCALE: (0.8, 1.2),
    SingleOpKind.AFFINE: (-0.3, 0.3),
    SingleOpKind.ERASE: (0.0, 0.25),
    SingleOpKind.GAUSS_BLUR: (0.5, 1.5),
    SingleOpKind.GAUSS_NOISE: (0.0, 0.1),
    SingleOpKind.SALT_PEPPER: (0.0, 0.02),
}

IDENTITY_MAGNITUDE: dict[SingleOpKind, float | tuple[float, float]] = {
    SingleOpKind.TRANSLATE: (0.0, 0.0),
    SingleOpKind.PAD: 0.0,
    SingleOpKind.ROTATE: 0.0,
    SingleOpKind.CROP: 1.0,
    SingleOpKind.SCALE: 1.0,
    SingleOpKind.AFFINE: 0.0,
    SingleOpKind.ERASE: 0.0,
    SingleOpKind.GAUSS_BLUR: 0.0,
    SingleOpKind.GAUSS_NOISE: 0.0,
    SingleOpKind.SALT_PEPPER: 0.0,
}

# instrumentation: how many times LCA entry points ran (lets the harness
# prove an arm never touched this module)
_usage_lock = threading.Lock()
_usage_count = 0


def _bump_usage() -> None:
    global _usage_count
    with _usage_lock:
        _usage_count += 1


def usage_count() -> int:
    return _usage_count


@dataclass(frozen=True)
class SingleOp:
    """One augmentation step. ``seed`` feeds the stochastic kinds only."""

    kind: SingleOpKind
    magnitude: float | tuple[float, float]
    seed: int = 0

    def __post_init__(self) -> None:
        lo, hi = VALID_BOUNDS[self.kind]
        if self.kind is SingleOpKind.TRANSLATE:
            if not (isinstance(self.magnitude, tuple) and len(self.magnitude) == 2):
                raise ValueError("TRANSLATE magnitude must be a (dy, dx) fraction pair")
            object.__setattr__(self, "magnitude", tuple(float(v) for v in self.magnitude))
            values = self.magnitude
        else:
            if isinstance(self.magnitude, tuple):
                raise ValueError(f"{self.kind.name} magnitude must be a single real")
            object.__setattr__(self, "magnitude", float(self.magnitude))
            values = (self.magnitude,)
        for v in values:
            if not lo <= v <= hi:
                raise ValueError(f"{self.kind.name} magnitude {v} outside [{lo}, {hi}]")

    def is_identity(self) -> bool:
        return self.magnitude == IDENTITY_MAGNITUDE[self.kind]


class MultiOpKind(enum.Enum):
    MIXUP = "mixup"
    CUTMIX = "cutmix"
    RICAP = "ricap"


@dataclass(frozen=True)
class MultiOp:
    """Two-code fusion. Parameters are extent-relative fractions:

    MIXUP   (lam,)            lam in [0, 1]
    CUTMIX  (y0, x0, h, w)    box replaced by the second code, inside [0, 1]
    RICAP   (sy, sx)          split point; quadrants alternate sources
    """

    kind: MultiOpKind
    params: tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "params", tuple(float(v) for v in self.params))
        p = self.params
        if self.kind is MultiOpKind.MIXUP:
            if len(p) != 1 or not 0 <= p[0] <= 1:
                raise ValueError(f"MIXUP needs (lam,) with lam in [0, 1], got {p}")
        elif self.kind is MultiOpKind.CUTMIX:
            if len(p) != 4:
                raise ValueError("CUTMIX needs (y0, x0, h, w)")
            y0, x0, h, w = p
            if not (0 <= y0 and 0 <= x0 and h >= 0 and w >= 0 and y0 + h <= 1 and x0 + w <= 1):
                raise ValueError(f"CUTMIX box {p} not inside the unit extent")
        else:
            if len(p) != 2 or not all(0 < v < 1 for v in p):
                raise ValueError(f"RICAP needs interior split fractions (sy, sx), got {p}")


class PlanBranch(enum.Enum):
    SINGLE = "single"
    MULTI = "multi"


@dataclass(frozen=True)
class AugmentationPlan:
    """A fully materialized, replayable augmentation draw.

    ``bases`` are codebook references (class_index, position). SINGLE plans
    have one base and one chain; MULTI plans have two same-class bases, two
    chains, and one fusion op.
    """

    branch: PlanBranch
    bases: tuple[tuple[int, int], ...]
    chains: tuple[tuple[SingleOp, ...], ...]
    multi_op: MultiOp | None
    seed: int

    def __post_init__(self) -> None:
        n = 1 if self.branch is PlanBranch.SINGLE else 2
        if len(self.bases) != n or len(self.chains) != n:
            raise ValueError(f"{self.branch.value} plan needs {n} base(s) and chain(s)")
        if self.branch is PlanBranch.SINGLE and self.multi_op is not None:
            raise ValueError("SINGLE plan cannot carry a fusion op")
        if self.branch is PlanBranch.MULTI:
            if self.multi_op is None:
                raise ValueError("MULTI plan needs a fusion op")
            if self.bases[0][0] != self.bases[1][0]:
                raise ValueError("MULTI bases must share a class")
        for chain in self.chains:
            if not 1 <= len(chain) <= NUM_SINGLE_KINDS:
                raise ValueError(f"chain length must be in [1, {NUM_SINGLE_KINDS}]")
            kinds = [op.kind for op in chain]
            if len(set(kinds)) != len(kinds):
                raise ValueError("a chain may not repeat an operation kind")

    @property
    def class_index(self) -> int:
        return self.bases[0][0]

    def to_dict(self) -> dict:
        return {
            "branch": self.branch.value,
            "bases": [list(b) for b in self.bases],
            "chains": [
                [
                    {
                        "kind": op.kind.value,
                        "magnitude": list(op.magnitude)
                        if isinstance(op.magnitude, tuple)
                        else op.magnitude,
                        "seed": op.seed,
                    }
                    for op in chain
                ]
                for chain in self.chains
            ],
            "multi_op": None
            if self.multi_op is None
            else {"kind": self.multi_op.kind.value, "params": list(self.multi_op.params)},
            "seed": self.seed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "AugmentationPlan":
        chains = tuple(
            tuple(
                SingleOp(
                    SingleOpKind(op["kind"]),
                    tuple(op["magnitude"]) if isinstance(op["magnitude"], list) else op["magnitude"],
                    op.get("seed", 0),
                )
                for op in chain
            )
            for chain in data["chains"]
        )
        multi = data.get("multi_op")
        return cls(
            branch=PlanBranch(data["branch"]),
            bases=tuple(tuple(b) for b in data["bases"]),
            chains=chains,
            multi_op=None if multi is None else MultiOp(MultiOpKind(multi["kind"]), tuple(multi["params"])),
            seed=data["seed"],
        )

    @classmethod
    def from_json(cls, text: str) -> "AugmentationPlan":
        return cls.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# single-code operations


def _translate_cells(values: torch.Tensor, dy: int, dx: int) -> torch.Tensor:
    out = torch.zeros_like(values)
    h, w = values.shape[-2], values.shape[-1]
    if abs(dy) >= h or abs(dx) >= w:
        return out
    ys = slice(max(dy, 0), h + min(dy, 0))
    xs = slice(max(dx, 0), w + min(dx, 0))
    ys_src = slice(max(-dy, 0), h + min(-dy, 0))
    xs_src = slice(max(-dx, 0), w + min(-dx, 0))
    out[..., ys, xs] = values[..., ys_src, xs_src]
    return out


def _warp(values: torch.Tensor, theta: torch.Tensor) -> torch.Tensor:
    """Apply a 2x3 inverse affine map with bilinear sampling, zero fill."""
    batch = values.unsqueeze(0)
    grid = F.affine_grid(theta.unsqueeze(0), batch.shape, align_corners=False)
    return F.grid_sample(batch, grid, mode="bilinear", padding_mode="zeros", align_corners=False)[0]


def _resize(values: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    return F.interpolate(values.unsqueeze(0), size=size, mode="bilinear", align_corners=False)[0]


def _gauss_kernel(sigma: float) -> torch.Tensor:
    radius = max(1, int(math.ceil(3 * sigma)))
    xs = torch.arange(-radius, radius + 1, dtype=torch.float32)
    k = torch.exp(-(xs**2) / (2 * sigma * sigma))
    return k / k.sum()


def apply_single(code: LatentCode, op: SingleOp) -> LatentCode:
    """Apply one operation; returns a new AUGMENTED code, input untouched."""
    _bump_usage()
    z = code.values
    h, w = z.shape[-2], z.shape[-1]
    if op.is_identity():
        return LatentCode(z.clone(), code.class_index, LatentSource.AUGMENTED)

    kind = op.kind
    if kind is SingleOpKind.TRANSLATE:
        dy = round(op.magnitude[0] * h)
        dx = round(op.magnitude[1] * w)
        out = _translate_cells(z, dy, dx)
    elif kind is SingleOpKind.PAD:
        p = round(op.magnitude * h)
        out = _resize(F.pad(z, (p, p, p, p)), (h, w)) if p > 0 else z.clone()
    elif kind is SingleOpKind.ROTATE:
        rad = math.radians(op.magnitude)
        theta = torch.tensor(
            [[math.cos(rad), -math.sin(rad), 0.0], [math.sin(rad), math.cos(rad), 0.0]],
            dtype=torch.float32,
        )
        out = _warp(z, theta)
    elif kind is SingleOpKind.CROP:
        keep_h = max(1, round(op.magnitude * h))
        keep_w = max(1, round(op.magnitude * w))
        y0 = (h - keep_h) // 2
        x0 = (w - keep_w) // 2
        out = _resize(z[:, y0 : y0 + keep_h, x0 : x0 + keep_w], (h, w))
    elif kind is SingleOpKind.SCALE:
        inv = 1.0 / op.magnitude
        theta = torch.tensor([[inv, 0.0, 0.0], [0.0, inv, 0.0]], dtype=torch.float32)
        out = _warp(z, theta)
    elif kind is SingleOpKind.AFFINE:
        theta = torch.tensor([[1.0, op.magnitude, 0.0], [0.0, 1.0, 0.0]], dtype=torch.float32)
        out = _warp(z, theta)
    elif kind is SingleOpKind.ERASE:
        side_h = round(math.sqrt(op.magnitude) * h)
        side_w = round(math.sqrt(op.magnitude) * w)
        out = z.clone()
        if side_h and side_w:
            rng = np.random.default_rng(op.seed)
            y0 = int(rng.integers(0, h - side_h + 1))
            x0 = int(rng.integers(0, w - side_w + 1))
            out[:, y0 : y0 + side_h, x0 : x0 + side_w] = 0.0
    elif kind is SingleOpKind.GAUSS_BLUR:
        k = _gauss_kernel(op.magnitude)
        pad = (len(k) - 1) // 2
        c = z.shape[0]
        kernel_y = k.view(1, 1, -1, 1).expand(c, 1, -1, 1)
        kernel_x = k.view(1, 1, 1, -1).expand(c, 1, 1, -1)
        padded = F.pad(z.unsqueeze(0), (pad, pad, pad, pad), mode="reflect")
        out = F.conv2d(F.conv2d(padded, kernel_y, groups=c), kernel_x, groups=c)[0]
    elif kind is SingleOpKind.GAUSS_NOISE:
        std = op.magnitude * float(z.std())
        rng = np.random.default_rng(op.seed)
        noise = torch.from_numpy(rng.normal(0.0, 1.0, size=tuple(z.shape)).astype(np.float32))
        out = z + std * noise
    elif kind is SingleOpKind.SALT_PEPPER:
        out = z.clone()
        n_cells = round(op.magnitude * h * w)
        if n_cells:
            rng = np.random.default_rng(op.seed)
            flat = rng.choice(h * w, size=n_cells, replace=False)
            salt = rng.random(n_cells) < 0.5
            mean, std = float(z.mean()), float(z.std())
            ys, xs = np.unravel_index(flat, (h, w))
            values = np.where(salt, mean + 3 * std, mean - 3 * std).astype(np.float32)
            out[:, ys, xs] = torch.from_numpy(values)
    else:  # pragma: no cover
        raise ValueError(f"unhandled kind {kind}")
    return LatentCode(out, code.class_index, LatentSource.AUGMENTED)


def apply_multi(z_i: LatentCode, z_j: LatentCode, op: MultiOp) -> LatentCode:
    """Fuse two same-class, same-shape codes into one AUGMENTED code."""
    _bump_usage()
    if z_i.class_index != z_j.class_index:
        raise ValueError(
            f"fusion requires matching classes, got {z_i.class_index} and {z_j.class_index}"
        )
    if z_i.shape != z_j.shape:
        raise ValueError(f"fusion requires matching shapes, got {z_i.shape} and {z_j.shape}")
    a, b = z_i.values, z_j.values
    h, w = a.shape[-2], a.shape[-1]
    if op.kind is MultiOpKind.MIXUP:
        lam = op.params[0]
        out = lam * a + (1.0 - lam) * b
    elif op.kind is MultiOpKind.CUTMIX:
        y0, x0, bh, bw = op.params
        out = a.clone()
        ys = slice(round(y0 * h), round((y0 + bh) * h))
        xs = slice(round(x0 * w), round((x0 + bw) * w))
        out[:, ys, xs] = b[:, ys, xs]
    else:  # RICAP: TL/BR from the first code, TR/BL from the second
        sy, sx = round(op.params[0] * h), round(op.params[1] * w)
        out = a.clone()
        out[:, :sy, sx:] = b[:, :sy, sx:]
        out[:, sy:, :sx] = b[:, sy:, :sx]
    return LatentCode(out, z_i.class_index, LatentSource.AUGMENTED)


# ---------------------------------------------------------------------------
# plan sampling and execution


def _sample_chain(rng: np.random.Generator, ranges: dict[SingleOpKind, tuple[float, float]]) -> tuple[SingleOp, ...]:
    kinds = list(SingleOpKind)
    t = int(rng.integers(1, NUM_SINGLE_KINDS + 1))
    picks = rng.choice(NUM_SINGLE_KINDS, size=t, replace=False)
    ops = []
    for idx in picks:
        kind = kinds[int(idx)]
        lo, hi = ranges[kind]
        if kind is SingleOpKind.TRANSLATE:
            magnitude = (float(rng.uniform(lo, hi)), float(rng.uniform(lo, hi)))
        else:
            magnitude = float(rng.uniform(lo, hi))
        ops.append(SingleOp(kind, magnitude, seed=int(rng.integers(0, 2**31))))
    return tuple(ops)


def sample_plan(
    codebook: Codebook,
    class_index: int,
    seed: int,
    p_single: float = 0.5,
    sampling_ranges: dict[SingleOpKind, tuple[float, float]] | None = None,
) -> AugmentationPlan:
    """Draw one plan for a class; falls back to SINGLE when only 1 code exists."""
    _bump_usage()
    codes = codebook.entries.get(class_index, ())
    if not codes:
        raise ValueError(f"class {class_index} has no codes in the codebook")
    ranges = sampling_ranges or SAMPLING_RANGES
    rng = np.random.default_rng(seed)
    single = rng.random() < p_single or len(codes) < 2
    if single:
        base = int(rng.integers(0, len(codes)))
        return AugmentationPlan(
            branch=PlanBranch.SINGLE,
            bases=((class_index, base),),
            chains=(_sample_chain(rng, ranges),),
            multi_op=None,
            seed=seed,
        )
    i, j = (int(v) for v in rng.choice(len(codes), size=2, replace=False))
    chains = (_sample_chain(rng, ranges), _sample_chain(rng, ranges))
    kind = list(MultiOpKind)[int(rng.integers(0, len(MultiOpKind)))]
    if kind is MultiOpKind.MIXUP:
        multi = MultiOp(kind, (float(rng.uniform(0, 1)),))
    elif kind is MultiOpKind.CUTMIX:
        bh = float(rng.uniform(0.25, 0.75))
        bw = float(rng.uniform(0.25, 0.75))
        y0 = float(rng.uniform(0, 1 - bh))
        x0 = float(rng.uniform(0, 1 - bw))
        multi = MultiOp(kind, (y0, x0, bh, bw))
    else:
        multi = MultiOp(kind, (float(rng.uniform(0.25, 0.75)), float(rng.uniform(0.25, 0.75))))
    return AugmentationPlan(
        branch=PlanBranch.MULTI,
        bases=((class_index, i), (class_index, j)),
        chains=chains,
        multi_op=multi,
        seed=seed,
    )


def execute_plan(plan: AugmentationPlan, codebook: Codebook) -> LatentCode:
    """Replay a plan against a codebook; deterministic, codebook untouched."""
    _bump_usage()
    augmented = []
    for (cls, pos), chain in zip(plan.bases, plan.chains):
        code = codebook.code(cls, pos)
        for op in chain:
            code = apply_single(code, op)
        augmented.append(code)
    if plan.branch is PlanBranch.SINGLE:
        result = augmented[0]
        if result.source is not LatentSource.AUGMENTED:
            result = LatentCode(result.values.clone(), result.class_index, LatentSource.AUGMENTED)
        return result
    return apply_multi(augmented[0], augmented[1], plan.multi_op)
