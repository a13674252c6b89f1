"""Stage 2: the substitute model and its distillation training loop.

The substitute is a ResNet-style classifier whose residual blocks carry two
learnable scalar gains (one on the conv path, one on the shortcut), applied
before the block activation, so the same architecture can adapt its effective
depth to different targets. Training minimizes a soft cross-entropy plus MSE
against the oracle's probability outputs, or a plain hard-label cross-entropy
when the oracle only returns labels.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .archive import load_archive, save_archive
from .core import ImageBatch, OracleMode, OracleOutput, StageTag, concat_batches
from .generator import GeneratorBackend
from .membership import Codebook
from .oracle import BudgetExhausted, QueryLedger


class DepthPreset(enum.Enum):
    TOY = "toy"
    RESNET34_LIKE = "resnet34-like"


_PRESETS = {
    DepthPreset.TOY: {"stem": 16, "stages": (16, 32, 64), "blocks": (1, 1, 1)},
    DepthPreset.RESNET34_LIKE: {"stem": 64, "stages": (64, 128, 256, 512), "blocks": (3, 4, 6, 3)},
}


@dataclass(frozen=True)
class SubstituteSpec:
    num_classes: int
    preset: DepthPreset = DepthPreset.TOY

    def __post_init__(self) -> None:
        if self.num_classes < 2:
            raise ValueError("substitute needs at least 2 output classes")


class AdaptiveResBlock(nn.Module):
    """Residual block with learnable scalar gains on both branches.

    y = relu(alpha * conv_path(x) + beta * shortcut(x)); alpha and beta start
    at 1.0, which reproduces a standard residual block.
    """

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_channels)
        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_channels),
            )
        else:
            self.shortcut = nn.Identity()
        self.alpha = nn.Parameter(torch.ones(()))
        self.beta = nn.Parameter(torch.ones(()))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        path = self.bn2(self.conv2(F.relu(self.bn1(self.conv1(x)))))
        return F.relu(self.alpha * path + self.beta * self.shortcut(x))


class SubstituteNet(nn.Module):
    """Stem + adaptive residual stages + a flattened linear head.

    Spatial resolution halves at every stage after the first; the head
    flattens the remaining grid (channel averages alone cannot separate
    shape classes at these widths).
    """

    def __init__(
        self,
        num_classes: int,
        stem_channels: int = 16,
        stage_channels: tuple[int, ...] = (16, 32, 64),
        blocks_per_stage: tuple[int, ...] = (1, 1, 1),
        image_size: int = 32,
    ):
        super().__init__()
        if len(stage_channels) != len(blocks_per_stage):
            raise ValueError("stage_channels and blocks_per_stage must align")
        self.arch = {
            "num_classes": num_classes,
            "stem_channels": stem_channels,
            "stage_channels": list(stage_channels),
            "blocks_per_stage": list(blocks_per_stage),
            "image_size": image_size,
        }
        self.stem = nn.Sequential(
            nn.Conv2d(3, stem_channels, 3, padding=1, bias=False),
            nn.BatchNorm2d(stem_channels),
            nn.ReLU(inplace=True),
        )
        blocks = []
        in_ch = stem_channels
        for stage_idx, (ch, n_blocks) in enumerate(zip(stage_channels, blocks_per_stage)):
            for block_idx in range(n_blocks):
                stride = 2 if stage_idx > 0 and block_idx == 0 else 1
                blocks.append(AdaptiveResBlock(in_ch, ch, stride))
                in_ch = ch
        self.blocks = nn.Sequential(*blocks)
        spatial = image_size // (2 ** (len(stage_channels) - 1))
        if spatial < 1:
            raise ValueError("too many stages for this image size")
        self.head = nn.Linear(in_ch * spatial * spatial, num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        feats = self.blocks(self.stem(x))
        return self.head(feats.flatten(1))

    def adaptive_gains(self) -> list[tuple[float, float]]:
        return [(float(b.alpha.detach()), float(b.beta.detach())) for b in self.blocks]


def build_substitute(spec: SubstituteSpec, seed: int = 0, image_size: int = 32) -> SubstituteNet:
    torch.manual_seed(seed)
    p = _PRESETS[spec.preset]
    return SubstituteNet(
        spec.num_classes, p["stem"], tuple(p["stages"]), tuple(p["blocks"]), image_size
    )


@dataclass(frozen=True)
class LossConfig:
    """Weights of the distillation loss terms.

    ``hard_label`` must be set for LABEL_ONLY oracles, and then lambda2 must
    be 0 (there is no probability vector to regress).
    """

    lambda1: float = 1.0
    lambda2: float = 1.0
    hard_label: bool = False

    def __post_init__(self) -> None:
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")
        if self.lambda1 + self.lambda2 <= 0:
            raise ValueError("at least one loss weight must be positive")
        if self.hard_label and self.lambda2 != 0:
            raise ValueError("hard-label mode requires lambda2 = 0")

    @classmethod
    def for_mode(cls, mode: OracleMode, lambda1: float = 1.0, lambda2: float = 1.0) -> "LossConfig":
        if mode is OracleMode.LABEL_ONLY:
            return cls(lambda1=lambda1, lambda2=0.0, hard_label=True)
        return cls(lambda1=lambda1, lambda2=lambda2, hard_label=False)


def targets_from_outputs(outputs: list[OracleOutput]) -> tuple[OracleMode, torch.Tensor]:
    """Stack oracle outputs into a probs (B, N) or labels (B,) tensor."""
    if not outputs:
        raise ValueError("no oracle outputs")
    mode = outputs[0].mode
    if any(o.mode is not mode for o in outputs):
        raise ValueError("mixed oracle output modes in one batch")
    if mode is OracleMode.PROBABILITY:
        return mode, torch.tensor([o.probs for o in outputs], dtype=torch.float64)
    return mode, torch.tensor([o.label for o in outputs], dtype=torch.long)


def substitute_loss(logits: torch.Tensor, targets: list[OracleOutput], cfg: LossConfig) -> torch.Tensor:
    """Distillation loss against one batch of oracle outputs.

    PROBABILITY: lambda1 * soft-CE(softmax(logits) vs target probs) +
    lambda2 * MSE(softmax(logits), target probs). The soft-CE floor equals
    the target entropy, so agreement rate (not raw loss) is the convergence
    signal. LABEL_ONLY: lambda1 * hard cross-entropy.
    """
    mode, target = targets_from_outputs(targets)
    if mode is OracleMode.LABEL_ONLY:
        if cfg.lambda2 != 0:
            raise ValueError("lambda2 must be 0 for a LABEL_ONLY target")
        return cfg.lambda1 * F.cross_entropy(logits, target)
    target = target.to(logits.dtype)
    log_probs = F.log_softmax(logits, dim=1)
    soft_ce = -(target * log_probs).sum(dim=1).mean()
    loss = cfg.lambda1 * soft_ce
    if cfg.lambda2 > 0:
        loss = loss + cfg.lambda2 * F.mse_loss(torch.softmax(logits, dim=1), target)
    return loss


class TrainDataMode(enum.Enum):
    """Where stage-2 training images come from.

    LCA: augmented codebook latents decoded by the generator (the full
    scheme). MEMBERS: the raw codebook latents decoded as-is (no
    augmentation). PROMPT: fresh text-prompted generation, no codebook.
    """

    LCA = "lca"
    MEMBERS = "members"
    PROMPT = "prompt"


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    lr: float = 1e-3
    max_steps: int | None = None
    data_mode: TrainDataMode = TrainDataMode.LCA
    checkpoint_every: int = 500
    seed: int = 0
    p_single: float = 0.5

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass(frozen=True)
class TrainState:
    step: int
    last_loss: float
    last_agreement: float
    ledger: QueryLedger
    checkpoints: tuple[str, ...] = ()


def _batch_lca(codebook, backend, classes: np.ndarray, rng: np.random.Generator, p_single: float) -> ImageBatch:
    from . import lca as lca_mod

    codes = []
    for cls in classes:
        plan = lca_mod.sample_plan(
            codebook, int(cls), seed=int(rng.integers(0, 2**63 - 1)), p_single=p_single
        )
        codes.append(lca_mod.execute_plan(plan, codebook))
    return backend.latents_to_images(codes, seed=int(rng.integers(0, 2**31)))


def _batch_members(codebook: Codebook, backend, classes: np.ndarray, rng: np.random.Generator) -> ImageBatch:
    codes = []
    for cls in classes:
        entry = codebook.entries[int(cls)]
        codes.append(entry[int(rng.integers(0, len(entry)))])
    return backend.latents_to_images(codes, seed=int(rng.integers(0, 2**31)))


def _batch_prompt(backend: GeneratorBackend, classes: np.ndarray, rng: np.random.Generator) -> ImageBatch:
    parts = []
    for cls in sorted(set(int(c) for c in classes)):
        count = int((classes == cls).sum())
        parts.append(backend.text_to_images(cls, count, seed=int(rng.integers(0, 2**31))))
    return concat_batches(parts)


def train_substitute(
    codebook: Codebook | None,
    backend: GeneratorBackend,
    oracle,
    model: SubstituteNet,
    loss_cfg: LossConfig,
    train_cfg: TrainConfig,
    run_dir: str | Path | None = None,
    metrics_hook=None,
    optimizer: torch.optim.Adam | None = None,
    rng: np.random.Generator | None = None,
    start_step: int = 0,
) -> tuple[SubstituteNet, TrainState, list[dict]]:
    """Run the stage-2 loop until the budget or ``max_steps`` is reached.

    Per step: build a batch from the configured data source, query the
    oracle (STAGE2), optimize with Adam, append a metrics record
    {step, loss, agreement, n1, n2}. A ``BudgetExhausted`` from the oracle
    ends training cleanly with a final checkpoint; a non-finite loss or
    adaptive gain aborts. ``metrics_hook(model, step, ledger)`` may return
    extra fields to merge into the record (used for ASR-vs-query curves).

    Passing ``optimizer``/``rng``/``start_step`` (from a loaded checkpoint)
    resumes training: the global torch RNG is left as restored by the
    checkpoint loader instead of being reseeded.
    """
    if train_cfg.data_mode is not TrainDataMode.PROMPT:
        if codebook is None or not codebook.classes_with_codes():
            raise ValueError(f"{train_cfg.data_mode.value} training requires a non-empty codebook")
    resuming = optimizer is not None
    if not resuming:
        torch.manual_seed(train_cfg.seed)
        optimizer = torch.optim.Adam(model.parameters(), lr=train_cfg.lr)
    if rng is None:
        rng = np.random.default_rng(train_cfg.seed)
    if train_cfg.data_mode is TrainDataMode.PROMPT:
        class_pool = np.arange(backend.class_space.num_classes)
    else:
        class_pool = np.asarray(codebook.classes_with_codes())

    run_dir = Path(run_dir) if run_dir is not None else None
    metrics_path = run_dir / "metrics.jsonl" if run_dir else None
    if metrics_path:
        run_dir.mkdir(parents=True, exist_ok=True)

    metrics: list[dict] = []
    checkpoints: list[str] = []
    step = start_step
    last_loss, last_agreement = float("nan"), float("nan")

    def write_checkpoint() -> None:
        if run_dir is None:
            return
        path = run_dir / f"substitute_step{step:06d}.ckpt"
        parent = checkpoints[-1] if checkpoints else None
        save_substitute_checkpoint(
            path, model, optimizer, step, oracle.snapshot_ledger(), rng, parent=parent
        )
        checkpoints.append(str(path))

    model.train()
    while train_cfg.max_steps is None or step < train_cfg.max_steps:
        classes = class_pool[rng.integers(0, len(class_pool), size=train_cfg.batch_size)]
        if train_cfg.data_mode is TrainDataMode.LCA:
            batch = _batch_lca(codebook, backend, classes, rng, train_cfg.p_single)
        elif train_cfg.data_mode is TrainDataMode.MEMBERS:
            batch = _batch_members(codebook, backend, classes, rng)
        else:
            batch = _batch_prompt(backend, classes, rng)
        try:
            outputs = oracle.query(batch, StageTag.STAGE2)
        except BudgetExhausted:
            break
        logits = model(batch.pixels)
        loss = substitute_loss(logits, outputs, loss_cfg)
        if not torch.isfinite(loss):
            raise RuntimeError(f"non-finite loss at step {step}: {float(loss)}")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        for a, b in model.adaptive_gains():
            if not (np.isfinite(a) and np.isfinite(b)):
                raise RuntimeError(f"non-finite adaptive gain at step {step}: alpha={a} beta={b}")
        step += 1
        last_loss = float(loss.detach())
        t_labels = np.array([o.label for o in outputs])
        last_agreement = float((logits.argmax(dim=1).numpy() == t_labels).mean())
        ledger = oracle.snapshot_ledger()
        record = {
            "step": step,
            "loss": last_loss,
            "agreement": last_agreement,
            "n1": ledger.n_stage1,
            "n2": ledger.n_stage2,
        }
        if metrics_hook is not None:
            extra = metrics_hook(model, step, ledger)
            if extra:
                record.update(extra)
        metrics.append(record)
        if metrics_path:
            with open(metrics_path, "a") as fh:
                fh.write(json.dumps(record) + "\n")
        if train_cfg.checkpoint_every and step % train_cfg.checkpoint_every == 0:
            write_checkpoint()
    write_checkpoint()
    model.eval()
    state = TrainState(
        step=step,
        last_loss=last_loss,
        last_agreement=last_agreement,
        ledger=oracle.snapshot_ledger(),
        checkpoints=tuple(checkpoints),
    )
    return model, state, metrics


def save_substitute_checkpoint(
    path: str | Path,
    model: SubstituteNet,
    optimizer: torch.optim.Adam | None,
    step: int,
    ledger: QueryLedger,
    rng: np.random.Generator | None = None,
    parent: str | None = None,
) -> Path:
    """Tensor archive + JSON manifest capturing model/optimizer/rng/ledger."""
    tensors: dict[str, np.ndarray] = {
        f"model.{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()
    }
    opt_meta = None
    if optimizer is not None:
        sd = optimizer.state_dict()
        for pid, state in sd["state"].items():
            for key, val in state.items():
                if isinstance(val, torch.Tensor):
                    tensors[f"opt.{pid}.{key}"] = val.detach().cpu().numpy()
                else:
                    tensors[f"opt.{pid}.{key}"] = np.asarray(val, dtype=np.float64)
        opt_meta = {"param_groups": sd["param_groups"], "state_ids": sorted(sd["state"].keys())}
    tensors["torch_rng"] = torch.get_rng_state().numpy()
    meta = {
        "kind": "substitute",
        "arch": model.arch,
        "step": step,
        "ledger": ledger.to_dict(),
        "optimizer": opt_meta,
        "np_rng": None if rng is None else json.loads(json.dumps(rng.bit_generator.state)),
        "parent": parent,
    }
    return save_archive(path, tensors, meta)


def load_substitute_checkpoint(
    path: str | Path,
) -> tuple[SubstituteNet, torch.optim.Adam | None, dict]:
    """Rebuild model (+ optimizer and rng state when present) from a checkpoint."""
    tensors, meta = load_archive(path)
    if meta.get("kind") != "substitute":
        raise ValueError(f"{path}: not a substitute checkpoint")
    arch = meta["arch"]
    model = SubstituteNet(
        arch["num_classes"],
        arch["stem_channels"],
        tuple(arch["stage_channels"]),
        tuple(arch["blocks_per_stage"]),
        arch.get("image_size", 32),
    )
    model.load_state_dict(
        {k[len("model."):]: torch.from_numpy(v.copy()) for k, v in tensors.items() if k.startswith("model.")}
    )
    optimizer = None
    if meta.get("optimizer"):
        optimizer = torch.optim.Adam(model.parameters())
        state = {}
        for pid in meta["optimizer"]["state_ids"]:
            pid = int(pid)
            entries = {}
            for key in ("step", "exp_avg", "exp_avg_sq"):
                name = f"opt.{pid}.{key}"
                if name in tensors:
                    arr = tensors[name]
                    entries[key] = (
                        torch.from_numpy(arr.copy().astype(np.float32))
                        if key != "step"
                        else torch.tensor(float(np.asarray(arr).reshape(-1)[0]))
                    )
            state[pid] = entries
        optimizer.load_state_dict(
            {"state": state, "param_groups": meta["optimizer"]["param_groups"]}
        )
    torch.set_rng_state(torch.from_numpy(tensors["torch_rng"].copy()))
    return model, optimizer, meta


def resume_rng(meta: dict) -> np.random.Generator:
    rng = np.random.default_rng()
    if meta.get("np_rng"):
        rng.bit_generator.state = meta["np_rng"]
    return rng
