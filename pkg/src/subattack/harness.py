"""Experiment orchestration: configs, run directories, presets, reports.

A run directory is self-describing: it holds the config echo, library
versions, seeds, the codebook, checkpoints, a JSON-lines metrics stream,
the attack-success report, and rendered figures. Reported attack-pipeline
query totals always equal stage-1 + stage-2 from the ledger, with
evaluation queries metered separately.
"""

from __future__ import annotations

import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import report as report_mod
from .attacks import (
    AdversarialBatch,
    AttackConfig,
    AttackGoal,
    attack,
    config_from_dict,
    perturbation_stats,
    save_adversarial_batch,
)
from .core import (
    ClassSpace,
    ImageBatch,
    OracleMode,
    StageTag,
    ToyDatasetSpec,
    generate_toy_dataset,
)
from .generator import (
    ConvAutoencoderBackend,
    GeneratorBackend,
    IdentityBackend,
    train_autoencoder_backend,
)
from .membership import Codebook, MembershipConfig, build_codebook, load_codebook, save_codebook
from .models import TargetConvNet, save_target_checkpoint
from .oracle import LocalOracle, OracleConfig, QueryLedger, Transport
from .substitute import (
    DepthPreset,
    LossConfig,
    SubstituteNet,
    SubstituteSpec,
    TrainConfig,
    TrainDataMode,
    build_substitute,
    save_substitute_checkpoint,
    train_substitute,
)


def derive_seed(master: int, *salt) -> int:
    """Stable sub-seed derivation for independent pipeline stages."""
    import hashlib

    digest = hashlib.sha256(repr(salt).encode()).digest()
    salt_int = int.from_bytes(digest[:8], "little")
    return int(np.random.default_rng((master, salt_int)).integers(0, 2**31))


@dataclass(frozen=True)
class TargetRecipe:
    epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 64
    val_fraction: float = 0.2
    weight_decay: float = 0.0
    width: int = 32


@dataclass(frozen=True)
class BackendConfig:
    kind: str = "identity"  # "identity" | "conv-ae"
    stride: int = 2
    off_style_fraction: float = 0.5
    ae_steps: int = 400
    ae_train_per_class: int = 60


@dataclass(frozen=True)
class EvalConfig:
    per_class: int = 20
    curve_every: int = 150
    curve_per_class: int = 5


@dataclass(frozen=True)
class ExperimentConfig:
    """One declarative description of a full run (TOML-loadable)."""

    name: str = "run"
    seed: int = 0
    budget: int = 20000
    oracle_mode: OracleMode = OracleMode.PROBABILITY
    dataset: ToyDatasetSpec = ToyDatasetSpec(10, 32, 100, seed=0)
    target: TargetRecipe = TargetRecipe()
    backend: BackendConfig = BackendConfig()
    membership: MembershipConfig = MembershipConfig()
    codebook_capacity: int = 10
    max_candidates_per_class: int = 50
    chunk_size: int = 8
    loss: LossConfig = LossConfig()
    train: TrainConfig = TrainConfig()
    eval: EvalConfig = EvalConfig()
    attacks: tuple[AttackConfig, ...] = (
        AttackConfig.fgsm(0.06),
    )

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        seed = int(data.get("seed", 0))
        mode = OracleMode(data.get("oracle_mode", "probability"))
        ds = data.get("dataset", {})
        dataset = ToyDatasetSpec(
            num_classes=int(ds.get("num_classes", 10)),
            image_size=int(ds.get("image_size", 32)),
            samples_per_class=int(ds.get("samples_per_class", 100)),
            seed=int(ds.get("seed", derive_seed(seed, "dataset"))),
        )
        tg = data.get("target", {})
        target = TargetRecipe(
            epochs=int(tg.get("epochs", 20)),
            lr=float(tg.get("lr", 1e-3)),
            batch_size=int(tg.get("batch_size", 64)),
            val_fraction=float(tg.get("val_fraction", 0.2)),
            weight_decay=float(tg.get("weight_decay", 0.0)),
            width=int(tg.get("width", 32)),
        )
        bk = data.get("backend", {})
        backend = BackendConfig(
            kind=bk.get("kind", "identity"),
            stride=int(bk.get("stride", 2)),
            off_style_fraction=float(bk.get("off_style_fraction", 0.5)),
            ae_steps=int(bk.get("ae_steps", 400)),
            ae_train_per_class=int(bk.get("ae_train_per_class", 60)),
        )
        mb = data.get("membership", {})
        membership = MembershipConfig(
            sigma=float(mb.get("sigma", 0.03)),
            u=float(mb.get("u", 1e-3)),
            mode=mode,
            seed=int(mb.get("seed", derive_seed(seed, "membership"))),
            noise_draws=int(mb.get("noise_draws", 1)),
        )
        cb = data.get("codebook", {})
        ls = data.get("loss", {})
        loss = LossConfig.for_mode(
            mode, lambda1=float(ls.get("lambda1", 1.0)), lambda2=float(ls.get("lambda2", 1.0))
        )
        tr = data.get("train", {})
        train = TrainConfig(
            batch_size=int(tr.get("batch_size", 32)),
            lr=float(tr.get("lr", 1e-3)),
            max_steps=tr.get("max_steps"),
            data_mode=TrainDataMode(tr.get("data_mode", "lca")),
            checkpoint_every=int(tr.get("checkpoint_every", 500)),
            seed=int(tr.get("seed", derive_seed(seed, "train"))),
            p_single=float(tr.get("p_single", 0.5)),
        )
        ev = data.get("eval", {})
        eval_cfg = EvalConfig(
            per_class=int(ev.get("per_class", 20)),
            curve_every=int(ev.get("curve_every", 150)),
            curve_per_class=int(ev.get("curve_per_class", 5)),
        )
        attack_list = data.get("attacks") or [
            {"method": "pgd", "epsilon": 0.06, "alpha": 0.012, "steps": 10, "norm": "linf"}
        ]
        attacks = tuple(config_from_dict(a) for a in attack_list)
        return cls(
            name=data.get("name", "run"),
            seed=seed,
            budget=int(data.get("budget", 20000)),
            oracle_mode=mode,
            dataset=dataset,
            target=target,
            backend=backend,
            membership=membership,
            codebook_capacity=int(cb.get("capacity", 10)),
            max_candidates_per_class=int(cb.get("max_candidates_per_class", 50)),
            chunk_size=int(cb.get("chunk_size", 8)),
            loss=loss,
            train=train,
            eval=eval_cfg,
            attacks=attacks,
        )

    @classmethod
    def from_toml(cls, path: str | Path) -> "ExperimentConfig":
        if sys.version_info >= (3, 11):
            import tomllib
        else:
            import tomli as tomllib
        with open(path, "rb") as fh:
            return cls.from_dict(tomllib.load(fh))

    def to_dict(self) -> dict:
        from .attacks import _config_to_dict

        return {
            "name": self.name,
            "seed": self.seed,
            "budget": self.budget,
            "oracle_mode": self.oracle_mode.value,
            "dataset": {
                "num_classes": self.dataset.num_classes,
                "image_size": self.dataset.image_size,
                "samples_per_class": self.dataset.samples_per_class,
                "seed": self.dataset.seed,
            },
            "target": vars(self.target).copy() if not isinstance(self.target, dict) else self.target,
            "backend": {
                "kind": self.backend.kind,
                "stride": self.backend.stride,
                "off_style_fraction": self.backend.off_style_fraction,
                "ae_steps": self.backend.ae_steps,
                "ae_train_per_class": self.backend.ae_train_per_class,
            },
            "membership": {
                "sigma": self.membership.sigma,
                "u": self.membership.u,
                "seed": self.membership.seed,
                "noise_draws": self.membership.noise_draws,
            },
            "codebook": {
                "capacity": self.codebook_capacity,
                "max_candidates_per_class": self.max_candidates_per_class,
                "chunk_size": self.chunk_size,
            },
            "loss": {"lambda1": self.loss.lambda1, "lambda2": self.loss.lambda2},
            "train": {
                "batch_size": self.train.batch_size,
                "lr": self.train.lr,
                "max_steps": self.train.max_steps,
                "data_mode": self.train.data_mode.value,
                "checkpoint_every": self.train.checkpoint_every,
                "seed": self.train.seed,
                "p_single": self.train.p_single,
            },
            "eval": {
                "per_class": self.eval.per_class,
                "curve_every": self.eval.curve_every,
                "curve_per_class": self.eval.curve_per_class,
            },
            "attacks": [_config_to_dict(a) for a in self.attacks],
        }


def train_target(
    dataset: ImageBatch,
    recipe: TargetRecipe,
    seed: int,
    out_path: str | Path | None = None,
) -> tuple[TargetConvNet, dict]:
    """Train the victim classifier with a held-out validation split.

    The dataset must be class-balanced and cover at least two classes.
    Training indices are recorded in the checkpoint meta so membership
    ground truth is available later. Non-finite loss aborts.
    """
    if dataset.labels is None:
        raise ValueError("target training requires a labeled dataset")
    labels = np.asarray(dataset.labels)
    classes, counts = np.unique(labels, return_counts=True)
    if len(classes) < 2:
        raise ValueError("target training requires at least 2 classes")
    if counts.min() != counts.max():
        raise ValueError(f"dataset must be class-balanced, got counts {dict(zip(classes.tolist(), counts.tolist()))}")

    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    n = len(dataset)
    perm = rng.permutation(n)
    n_val = int(round(recipe.val_fraction * n))
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    model = TargetConvNet(int(classes.max()) + 1, width=recipe.width, image_size=dataset.image_size)
    optimizer = torch.optim.Adam(model.parameters(), lr=recipe.lr, weight_decay=recipe.weight_decay)
    x_train = dataset.pixels[train_idx]
    y_train = torch.tensor(labels[train_idx], dtype=torch.long)

    model.train()
    for epoch in range(recipe.epochs):
        order = rng.permutation(len(train_idx))
        for start in range(0, len(order), recipe.batch_size):
            idx = order[start : start + recipe.batch_size]
            logits = model(x_train[idx])
            loss = torch.nn.functional.cross_entropy(logits, y_train[idx])
            if not torch.isfinite(loss):
                raise RuntimeError(f"target training diverged at epoch {epoch} (loss {float(loss)})")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
    model.eval()

    def accuracy(idx: np.ndarray) -> float:
        if len(idx) == 0:
            return float("nan")
        with torch.no_grad():
            preds = model(dataset.pixels[idx]).argmax(dim=1).numpy()
        return float((preds == labels[idx]).mean())

    info = {
        "val_accuracy": accuracy(val_idx),
        "train_accuracy": accuracy(train_idx),
        "train_indices": [int(i) for i in train_idx],
        "seed": seed,
        "recipe": vars(recipe).copy(),
    }
    if out_path is not None:
        save_target_checkpoint(out_path, model, extra_meta=info)
    return model, info


@dataclass(frozen=True)
class AsrEntry:
    n_suc: int
    n_all: int
    asr: float | None
    mean_l2: float
    mean_linf: float

    def __post_init__(self) -> None:
        if self.n_all > 0:
            expected = self.n_suc / self.n_all
            if self.asr is None or abs(self.asr - expected) > 0:
                raise ValueError(f"asr must equal n_suc/n_all exactly ({self.n_suc}/{self.n_all})")
        elif self.asr is not None:
            raise ValueError("asr is undefined (not 0) when no samples are eligible")


@dataclass(frozen=True)
class AsrReport:
    goal: AttackGoal
    entries: dict[str, AsrEntry]
    ledger: QueryLedger

    def to_dict(self) -> dict:
        return {
            "goal": {"target_class": self.goal.target_class},
            "entries": {
                name: {
                    "n_suc": e.n_suc,
                    "n_all": e.n_all,
                    "asr": e.asr,
                    "mean_l2": e.mean_l2,
                    "mean_linf": e.mean_linf,
                }
                for name, e in self.entries.items()
            },
            "ledger": self.ledger.to_dict(),
        }


def evaluate_asr(
    oracle,
    advs: AdversarialBatch | dict[str, AdversarialBatch],
    goal: AttackGoal | None = None,
) -> AsrReport:
    """Measure attack success against the oracle (EVAL-stage queries).

    Only samples the oracle classified correctly when clean count toward
    N_all. NON_TARGET success flips the oracle's clean label; TARGET success
    hits the target class. An empty eligible set yields an undefined ASR
    (None), flagged rather than reported as 0.
    """
    if isinstance(advs, AdversarialBatch):
        advs = {advs.config.method.value: advs}
    entries: dict[str, AsrEntry] = {}
    for name, batch in advs.items():
        batch_goal = batch.config.goal
        if goal is None:
            goal = batch_goal
        elif goal != batch_goal:
            raise ValueError(f"mixed attack goals in one evaluation: {goal} vs {batch_goal}")
        if batch.originals.labels is None:
            raise ValueError("ASR evaluation requires true labels on the originals")
        clean = oracle.query(batch.originals, StageTag.EVAL)
        adv = oracle.query(batch.adversarials, StageTag.EVAL)
        eligible = [i for i in range(len(batch)) if clean[i].label == batch.originals.labels[i]]
        if goal.targeted:
            suc = [i for i in eligible if adv[i].label == goal.target_class]
        else:
            suc = [i for i in eligible if adv[i].label != clean[i].label]
        stats = perturbation_stats(batch)
        n_all, n_suc = len(eligible), len(suc)
        entries[name] = AsrEntry(
            n_suc=n_suc,
            n_all=n_all,
            asr=(n_suc / n_all) if n_all else None,
            mean_l2=stats["mean_l2"],
            mean_linf=stats["mean_linf"],
        )
    if goal is None:
        raise ValueError("no adversarial batches to evaluate")
    return AsrReport(goal=goal, entries=entries, ledger=oracle.snapshot_ledger())


def build_backend(cfg: ExperimentConfig, class_space: ClassSpace) -> GeneratorBackend:
    if cfg.backend.kind == "identity":
        return IdentityBackend(
            class_space,
            image_size=cfg.dataset.image_size,
            stride=cfg.backend.stride,
            off_style_fraction=cfg.backend.off_style_fraction,
        )
    if cfg.backend.kind == "conv-ae":
        ae_data = generate_toy_dataset(
            ToyDatasetSpec(
                cfg.dataset.num_classes,
                cfg.dataset.image_size,
                cfg.backend.ae_train_per_class,
                seed=derive_seed(cfg.seed, "ae-data"),
            )
        )
        return train_autoencoder_backend(
            class_space,
            ae_data,
            seed=derive_seed(cfg.seed, "ae-train"),
            steps=cfg.backend.ae_steps,
            off_style_fraction=cfg.backend.off_style_fraction,
        )
    raise ValueError(f"unknown backend kind {cfg.backend.kind!r}")


@dataclass
class RunResult:
    run_dir: Path
    report: AsrReport
    agreement: float
    ledger: QueryLedger
    stage1_generated: int
    codebook_counts: dict[int, int]
    lca_usage_delta: int
    curve: list[dict] = field(default_factory=list)

    @property
    def primary_asr(self) -> float | None:
        first = next(iter(self.report.entries.values()))
        return first.asr


def _eval_batch(cfg: ExperimentConfig, per_class: int) -> ImageBatch:
    return generate_toy_dataset(
        ToyDatasetSpec(
            cfg.dataset.num_classes,
            cfg.dataset.image_size,
            per_class,
            seed=derive_seed(cfg.seed, "heldout-eval"),
        )
    )


def _generation_sample(
    cfg: ExperimentConfig,
    backend: GeneratorBackend,
    codebook: Codebook | None,
    per_class: int,
    seed: int,
) -> ImageBatch:
    """Images drawn from the run's training data source, for accuracy bars."""
    from .core import concat_batches
    from .substitute import _batch_lca, _batch_members, _batch_prompt

    rng = np.random.default_rng(seed)
    mode = cfg.train.data_mode
    parts = []
    for cls in range(cfg.dataset.num_classes):
        classes = np.full(per_class, cls)
        if mode is TrainDataMode.LCA and codebook is not None and codebook.entries.get(cls):
            parts.append(_batch_lca(codebook, backend, classes, rng, cfg.train.p_single))
        elif mode is TrainDataMode.MEMBERS and codebook is not None and codebook.entries.get(cls):
            parts.append(_batch_members(codebook, backend, classes, rng))
        else:
            parts.append(_batch_prompt(backend, classes, rng))
    return concat_batches(parts)


def run_pipeline(
    cfg: ExperimentConfig,
    out_dir: str | Path,
    target_checkpoint: str | Path | None = None,
) -> RunResult:
    """Stage 1 -> stage 2 -> attacks -> evaluation, with artifacts on disk.

    Any stage error is recorded in the run manifest (partial artifacts are
    retained) and re-raised. Reuses ``target_checkpoint`` when given;
    otherwise trains the victim from the configured dataset.
    """
    from . import __version__, lca as lca_mod

    run_dir = Path(out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest: dict = {
        "name": cfg.name,
        "config": cfg.to_dict(),
        "versions": {
            "subattack": __version__,
            "torch": torch.__version__,
            "numpy": np.__version__,
            "python": sys.version.split()[0],
        },
        "stages": [],
        "error": None,
    }

    def save_manifest() -> None:
        (run_dir / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))

    lca_usage_before = lca_mod.usage_count()
    t_start = time.time()
    try:
        class_space = ClassSpace.toy(cfg.dataset.num_classes)

        # victim
        if target_checkpoint is None:
            dataset = generate_toy_dataset(cfg.dataset)
            target_checkpoint = run_dir / "target.ckpt"
            _, target_info = train_target(
                dataset, cfg.target, seed=derive_seed(cfg.seed, "target"), out_path=target_checkpoint
            )
            manifest["target"] = {"val_accuracy": target_info["val_accuracy"], "trained": True}
        else:
            manifest["target"] = {"checkpoint": str(target_checkpoint), "trained": False}
        oracle = LocalOracle.from_checkpoint(
            target_checkpoint,
            OracleConfig(mode=cfg.oracle_mode, transport=Transport.LOCAL, budget=cfg.budget),
        )
        manifest["stages"].append("target")

        backend = build_backend(cfg, class_space)
        manifest["stages"].append("backend")

        # stage 1
        codebook = None
        stage1_generated = 0
        if cfg.train.data_mode is not TrainDataMode.PROMPT:
            codebook, _ = build_codebook(
                class_space,
                backend,
                oracle,
                cfg.membership,
                capacity=cfg.codebook_capacity,
                max_candidates_per_class=cfg.max_candidates_per_class,
                chunk_size=cfg.chunk_size,
            )
            save_codebook(run_dir / "codebook", codebook, config_echo=cfg.to_dict()["membership"])
            stage1_generated = sum(s["generated"] for s in codebook.stage1_stats.values())
            manifest["stage1"] = {
                "generated": stage1_generated,
                "accepted": codebook.total_codes(),
                "underfilled": {str(k): v for k, v in codebook.underfilled.items()},
                "n_stage1": oracle.snapshot_ledger().n_stage1,
            }
        manifest["stages"].append("stage1")

        # stage 2
        eval_full = _eval_batch(cfg, cfg.eval.per_class)
        curve: list[dict] = []
        hook = None
        if cfg.eval.curve_every > 0:
            curve_batch = _eval_batch(cfg, cfg.eval.curve_per_class)
            curve_clean = [o.label for o in oracle.query(curve_batch, StageTag.EVAL)]
            primary_attack = cfg.attacks[0]

            def hook(model, step, ledger, _batch=curve_batch, _clean=curve_clean):
                if step % cfg.eval.curve_every:
                    return None
                advs = attack(model, _batch, primary_attack)
                adv_out = oracle.query(advs.adversarials, StageTag.EVAL)
                eligible = [
                    i for i in range(len(_batch)) if _clean[i] == _batch.labels[i]
                ]
                if primary_attack.goal.targeted:
                    suc = [i for i in eligible if adv_out[i].label == primary_attack.goal.target_class]
                else:
                    suc = [i for i in eligible if adv_out[i].label != _clean[i]]
                asr = len(suc) / len(eligible) if eligible else None
                curve.append({"step": step, "n_qb": ledger.n_qb, "asr": asr})
                return {"curve_asr": asr}

        model = build_substitute(
            SubstituteSpec(cfg.dataset.num_classes, DepthPreset.TOY),
            seed=derive_seed(cfg.seed, "substitute"),
            image_size=cfg.dataset.image_size,
        )
        model, state, metrics = train_substitute(
            codebook,
            backend,
            oracle,
            model,
            cfg.loss,
            cfg.train,
            run_dir=run_dir,
            metrics_hook=hook,
        )
        manifest["stages"].append("train")

        # held-out agreement between substitute and oracle
        eval_outputs = oracle.query(eval_full, StageTag.EVAL)
        with torch.no_grad():
            sub_preds = model(eval_full.pixels).argmax(dim=1).numpy()
        agreement = float((sub_preds == np.array([o.label for o in eval_outputs])).mean())

        # attacks + evaluation
        advs_by_method: dict[str, AdversarialBatch] = {}
        for atk in cfg.attacks:
            advs = attack(model, eval_full, atk)
            advs_by_method[atk.method.value] = advs
            save_adversarial_batch(run_dir / f"adv_{atk.method.value}.tns", advs)
        report = evaluate_asr(oracle, advs_by_method)
        (run_dir / "asr_report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
        manifest["stages"].append("attacks")

        # per-class accuracy of the training data source, as seen by the oracle
        gen_sample = _generation_sample(
            cfg, backend, codebook, per_class=8, seed=derive_seed(cfg.seed, "genacc")
        )
        gen_out = oracle.query(gen_sample, StageTag.EVAL)
        per_class_acc = {}
        gen_labels = np.asarray(gen_sample.labels)
        gen_preds = np.asarray([o.label for o in gen_out])
        for cls in range(cfg.dataset.num_classes):
            sel = gen_labels == cls
            per_class_acc[cls] = float((gen_preds[sel] == cls).mean()) if sel.any() else float("nan")

        # plots
        report_mod.save_asr_query_curve(curve, run_dir / "asr_vs_queries.png")
        report_mod.save_per_class_accuracy(per_class_acc, class_space.names, run_dir / "per_class_accuracy.png")

        ledger = oracle.snapshot_ledger()
        manifest.update(
            {
                "agreement": agreement,
                "ledger": ledger.to_dict(),
                "asr": {k: e.asr for k, e in report.entries.items()},
                "lca_usage_delta": lca_mod.usage_count() - lca_usage_before,
                "runtime_s": round(time.time() - t_start, 2),
                "per_class_accuracy": {str(k): v for k, v in per_class_acc.items()},
            }
        )
        save_manifest()
    except Exception as exc:
        manifest["error"] = f"{type(exc).__name__}: {exc}"
        save_manifest()
        raise

    return RunResult(
        run_dir=run_dir,
        report=report,
        agreement=agreement,
        ledger=ledger,
        stage1_generated=stage1_generated,
        codebook_counts={cls: len(codes) for cls, codes in (codebook.entries if codebook else {}).items()},
        lca_usage_delta=manifest["lca_usage_delta"],
        curve=curve,
    )


ABLATION_ARMS = {
    "baseline": TrainDataMode.PROMPT,  # label-prompt generation, no filtering, no LCA
    "wo_lca": TrainDataMode.MEMBERS,   # inferred member codes only
    "full_lca": TrainDataMode.LCA,     # the complete scheme
}


def _with_data_mode(cfg: ExperimentConfig, mode: TrainDataMode, name: str, seed: int) -> ExperimentConfig:
    data = cfg.to_dict()
    data["name"] = name
    data["seed"] = seed
    data["train"] = dict(data["train"], data_mode=mode.value, seed=derive_seed(seed, "train"))
    data["membership"] = dict(data["membership"], seed=derive_seed(seed, "membership"))
    data["dataset"] = dict(data["dataset"], seed=derive_seed(seed, "dataset"))
    return ExperimentConfig.from_dict(data)


def run_ablation_lca(
    cfg: ExperimentConfig, out_dir: str | Path, seeds: tuple[int, ...] | None = None
) -> dict:
    """Three-arm comparison: baseline prompts vs member codes vs full LCA.

    Each seed trains one shared victim; the three arms attack it with equal
    query budgets. Emits comparison.csv plus a bar figure, and records the
    LCA instrumentation delta per arm (the first two arms must show zero).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = seeds or (cfg.seed,)
    rows = []
    for seed in seeds:
        arm_cfg0 = _with_data_mode(cfg, cfg.train.data_mode, cfg.name, seed)
        dataset = generate_toy_dataset(arm_cfg0.dataset)
        target_path = out_dir / f"target_seed{seed}.ckpt"
        _, target_info = train_target(
            dataset, cfg.target, seed=derive_seed(seed, "target"), out_path=target_path
        )
        for arm, mode in ABLATION_ARMS.items():
            arm_cfg = _with_data_mode(cfg, mode, f"{cfg.name}-{arm}-s{seed}", seed)
            result = run_pipeline(arm_cfg, out_dir / f"seed{seed}" / arm, target_checkpoint=target_path)
            rows.append(
                {
                    "seed": seed,
                    "arm": arm,
                    "asr": result.primary_asr,
                    "mean_l2": next(iter(result.report.entries.values())).mean_l2,
                    "n_qb": result.ledger.n_qb,
                    "n_stage1": result.ledger.n_stage1,
                    "agreement": result.agreement,
                    "lca_usage_delta": result.lca_usage_delta,
                    "target_val_accuracy": target_info["val_accuracy"],
                }
            )
    report_mod.write_csv(out_dir / "comparison.csv", rows)
    report_mod.save_ablation_bars(rows, out_dir / "ablation_asr.png")
    summary = {
        "rows": rows,
        "median_asr": {
            arm: float(np.median([r["asr"] for r in rows if r["arm"] == arm and r["asr"] is not None]))
            for arm in ABLATION_ARMS
        },
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary


def run_codebook_sweep(
    cfg: ExperimentConfig,
    out_dir: str | Path,
    sizes: tuple[int, ...] = (2, 5, 10, 20),
) -> dict:
    """Full-LCA runs at several codebook capacities; emits the ASR-vs-M curve.

    Stage-1 query counts are recorded per M (they grow with the capacity);
    the curve shape itself is reported, not asserted.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data = cfg.to_dict()
    rows = []
    for m in sizes:
        run_data = json.loads(json.dumps(data))
        run_data["name"] = f"{cfg.name}-m{m}"
        run_data["codebook"]["capacity"] = m
        run_data["train"]["data_mode"] = "lca"
        m_cfg = ExperimentConfig.from_dict(run_data)
        result = run_pipeline(m_cfg, out_dir / f"m{m:03d}")
        rows.append(
            {
                "codebook_size": m,
                "asr": result.primary_asr,
                "n_stage1": result.ledger.n_stage1,
                "stage1_generated": result.stage1_generated,
                "n_qb": result.ledger.n_qb,
                "agreement": result.agreement,
            }
        )
    report_mod.write_csv(out_dir / "codebook_sweep.csv", rows)
    report_mod.save_asr_vs_codebook(rows, out_dir / "asr_vs_codebook.png")
    summary = {"rows": rows}
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary
