"""Stage 1: noise-stability membership filtering and codebook construction.

A candidate is member-like when the target's output barely moves under a
small Gaussian pixel perturbation (training data sits deeper inside the
decision regions than fresh data). Each candidate costs exactly two queries
(clean + noisy) with the default single noise draw; survivors additionally
must be classified as their intended class when clean. Accepted images are
encoded into a per-class codebook of up to M latent codes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .archive import load_archive, save_archive
from .core import ClassSpace, ImageBatch, OracleMode, OracleOutput, StageTag
from .generator import GeneratorBackend, LatentCode, LatentSource
from .oracle import QueryLedger


@dataclass(frozen=True)
class MembershipConfig:
    """Noise scale, acceptance threshold, and oracle mode for Stage 1.

    ``noise_draws`` > 1 averages the decision distance over that many
    independent perturbations (1 + noise_draws queries per candidate instead
    of the default 2).
    """

    sigma: float = 0.03
    u: float = 1e-3
    mode: OracleMode = OracleMode.PROBABILITY
    seed: int = 0
    noise_draws: int = 1

    def __post_init__(self) -> None:
        if not 0 < self.sigma <= 0.25:
            raise ValueError(f"sigma must be in (0, 0.25], got {self.sigma}")
        if self.u <= 0:
            raise ValueError(f"threshold u must be positive, got {self.u}")
        if self.noise_draws < 1:
            raise ValueError("noise_draws must be >= 1")


def perturb(batch: ImageBatch, sigma: float, seed: int) -> ImageBatch:
    """Add clamped Gaussian pixel noise; deterministic per seed."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, sigma, size=tuple(batch.pixels.shape)).astype(np.float32)
    noisy = (batch.pixels + torch.from_numpy(noise)).clamp(0.0, 1.0)
    return ImageBatch(noisy, batch.labels)


def decision_distance(clean: OracleOutput, noisy: OracleOutput) -> float:
    """Output movement between clean and noisy responses.

    PROBABILITY mode: mean squared error between the probability vectors.
    LABEL_ONLY mode: 0 when the label is unchanged, +inf when it flipped.
    """
    if clean.mode is not noisy.mode:
        raise ValueError("clean and noisy outputs must share a mode")
    if clean.mode is OracleMode.PROBABILITY:
        a = np.asarray(clean.probs, dtype=np.float64)
        b = np.asarray(noisy.probs, dtype=np.float64)
        if a.shape != b.shape:
            raise ValueError("probability vectors must have equal length")
        return float(np.mean((a - b) ** 2))
    return 0.0 if clean.label == noisy.label else math.inf


def filter_members(
    batch: ImageBatch,
    oracle,
    cfg: MembershipConfig,
    seed: int | None = None,
) -> tuple[ImageBatch, list[float]]:
    """Keep candidates whose output is noise-stable and class-correct.

    Queries the oracle on the clean batch and on ``noise_draws`` perturbed
    copies, all tagged STAGE1. Returns the surviving sub-batch and the
    per-candidate distances (averaged over draws, aligned with the input).
    """
    if batch.labels is None:
        raise ValueError("candidates must carry their intended class labels")
    if cfg.mode is not oracle.config.mode:
        raise ValueError(f"config mode {cfg.mode} does not match oracle mode {oracle.config.mode}")
    seed = cfg.seed if seed is None else seed
    clean_out = oracle.query(batch, StageTag.STAGE1)
    draw_outputs = []
    for draw in range(cfg.noise_draws):
        noisy = perturb(batch, cfg.sigma, seed=_derived_seed(seed, draw))
        draw_outputs.append(oracle.query(noisy, StageTag.STAGE1))
    distances = []
    for i in range(len(batch)):
        per_draw = [decision_distance(clean_out[i], outs[i]) for outs in draw_outputs]
        distances.append(float(np.mean(per_draw)))
    keep = [
        i
        for i in range(len(batch))
        if distances[i] <= cfg.u and clean_out[i].label == batch.labels[i]
    ]
    return batch.subset(keep), distances


def _derived_seed(*parts: int) -> int:
    return int(np.random.default_rng(parts).integers(0, 2**63 - 1))


@dataclass(frozen=True)
class Codebook:
    """Per-class store of up to ``capacity`` member latent codes.

    ``fingerprint`` pins the backend the codes were produced with; codes are
    not portable across backends. ``underfilled`` maps class index -> number
    of codes actually found for classes that ended below capacity.
    ``stage1_stats`` records candidates generated vs accepted per class.
    """

    entries: dict[int, tuple[LatentCode, ...]]
    capacity: int
    fingerprint: str
    underfilled: dict[int, int] = field(default_factory=dict)
    stage1_stats: dict[int, dict[str, int]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.capacity < 1:
            raise ValueError("capacity M must be >= 1")
        if not self.fingerprint:
            raise ValueError("fingerprint must be non-empty")
        for cls, codes in self.entries.items():
            if len(codes) > self.capacity:
                raise ValueError(f"class {cls} holds {len(codes)} codes, capacity is {self.capacity}")
            if any(code.class_index != cls for code in codes):
                raise ValueError(f"class {cls} contains a code tagged with another class")

    def classes_with_codes(self) -> tuple[int, ...]:
        return tuple(sorted(cls for cls, codes in self.entries.items() if codes))

    def total_codes(self) -> int:
        return sum(len(codes) for codes in self.entries.values())

    def code(self, class_index: int, position: int) -> LatentCode:
        codes = self.entries.get(class_index, ())
        if position >= len(codes):
            raise KeyError(f"codebook has no code ({class_index}, {position})")
        return codes[position]


def build_codebook(
    class_space: ClassSpace,
    backend: GeneratorBackend,
    oracle,
    cfg: MembershipConfig,
    capacity: int = 10,
    max_candidates_per_class: int = 50,
    chunk_size: int = 8,
) -> tuple[Codebook, QueryLedger]:
    """Generate, filter and encode member codes for every class.

    Candidates come from ``backend.text_to_images`` in chunks until the class
    reaches ``capacity`` accepted codes or the candidate cap. Query count is
    exactly (1 + noise_draws) x candidates generated. Classes that end short
    are recorded in ``Codebook.underfilled`` rather than raising.
    """
    if capacity < 1:
        raise ValueError("capacity M must be >= 1")
    entries: dict[int, tuple[LatentCode, ...]] = {}
    underfilled: dict[int, int] = {}
    stats: dict[int, dict[str, int]] = {}
    for cls in range(class_space.num_classes):
        accepted: list[LatentCode] = []
        generated = 0
        chunk_idx = 0
        while len(accepted) < capacity and generated < max_candidates_per_class:
            count = min(chunk_size, max_candidates_per_class - generated)
            gen_seed = _derived_seed(cfg.seed, cls, chunk_idx, 1)
            candidates = backend.text_to_images(cls, count, gen_seed)
            generated += len(candidates)
            members, _ = filter_members(
                candidates, oracle, cfg, seed=_derived_seed(cfg.seed, cls, chunk_idx, 2)
            )
            if len(members):
                room = capacity - len(accepted)
                codes = backend.encode(members.subset(range(min(room, len(members)))))
                accepted.extend(codes)
            chunk_idx += 1
        entries[cls] = tuple(accepted)
        stats[cls] = {"generated": generated, "accepted": len(accepted)}
        if len(accepted) < capacity:
            underfilled[cls] = len(accepted)
    codebook = Codebook(
        entries=entries,
        capacity=capacity,
        fingerprint=backend.descriptor.fingerprint(),
        underfilled=underfilled,
        stage1_stats=stats,
    )
    return codebook, oracle.snapshot_ledger()


def save_codebook(directory: str | Path, codebook: Codebook, config_echo: dict | None = None) -> Path:
    """Persist as one tensor archive per class plus a JSON manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    counts = {}
    for cls, codes in sorted(codebook.entries.items()):
        counts[str(cls)] = len(codes)
        if not codes:
            continue
        stacked = np.stack([c.values.numpy().astype(np.float32, copy=False) for c in codes])
        save_archive(directory / f"class_{cls:03d}.tns", {"codes": stacked}, {"class_index": cls})
    manifest = {
        "capacity": codebook.capacity,
        "fingerprint": codebook.fingerprint,
        "counts": counts,
        "underfilled": {str(k): v for k, v in codebook.underfilled.items()},
        "stage1_stats": {str(k): v for k, v in codebook.stage1_stats.items()},
        "config": config_echo or {},
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory


def load_codebook(directory: str | Path) -> Codebook:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    entries: dict[int, tuple[LatentCode, ...]] = {}
    for key, count in manifest["counts"].items():
        cls = int(key)
        if count == 0:
            entries[cls] = ()
            continue
        tensors, meta = load_archive(directory / f"class_{cls:03d}.tns")
        if meta["class_index"] != cls:
            raise ValueError(f"class archive mismatch in {directory}: {meta['class_index']} != {cls}")
        entries[cls] = tuple(
            LatentCode(torch.from_numpy(arr.copy()), cls, LatentSource.ENCODED)
            for arr in tensors["codes"]
        )
    return Codebook(
        entries=entries,
        capacity=manifest["capacity"],
        fingerprint=manifest["fingerprint"],
        underfilled={int(k): v for k, v in manifest["underfilled"].items()},
        stage1_stats={int(k): v for k, v in manifest.get("stage1_stats", {}).items()},
    )
