"""Command-line interface over the experiment harness.

Commands: train-target, stage1, train, attack, eval, run, report, and
``lca preview``. Every command takes a TOML config (missing file sections
fall back to desk-scale defaults) plus a few path flags.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import harness, report as report_mod
from .attacks import attack, load_adversarial_batch, save_adversarial_batch, stats_to_json
from .core import StageTag, ToyDatasetSpec, generate_toy_dataset
from .harness import ExperimentConfig, derive_seed
from .membership import build_codebook, load_codebook, save_codebook
from .oracle import LocalOracle, OracleConfig, Transport
from .substitute import (
    DepthPreset,
    SubstituteSpec,
    build_substitute,
    load_substitute_checkpoint,
    train_substitute,
)


def _load_config(path: str | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig.from_dict({})
    return ExperimentConfig.from_toml(path)


def _cmd_train_target(args) -> int:
    cfg = _load_config(args.config)
    dataset = generate_toy_dataset(cfg.dataset)
    _, info = harness.train_target(
        dataset, cfg.target, seed=derive_seed(cfg.seed, "target"), out_path=args.out
    )
    print(f"target checkpoint written to {args.out}")
    print(f"validation accuracy: {info['val_accuracy']:.4f}")
    return 0


def _cmd_stage1(args) -> int:
    cfg = _load_config(args.config)
    class_space = cfg.dataset.class_space()
    backend = harness.build_backend(cfg, class_space)
    oracle = LocalOracle.from_checkpoint(
        args.target, OracleConfig(cfg.oracle_mode, Transport.LOCAL, budget=cfg.budget)
    )
    codebook, ledger = build_codebook(
        class_space,
        backend,
        oracle,
        cfg.membership,
        capacity=cfg.codebook_capacity,
        max_candidates_per_class=cfg.max_candidates_per_class,
        chunk_size=cfg.chunk_size,
    )
    out = Path(args.out)
    save_codebook(out, codebook, config_echo=cfg.to_dict()["membership"])
    (out / "ledger.json").write_text(json.dumps(ledger.to_dict(), indent=2))
    for cls in sorted(codebook.entries):
        stats = codebook.stage1_stats[cls]
        print(f"class {cls}: {stats['accepted']}/{cfg.codebook_capacity} codes "
              f"({stats['generated']} candidates)")
    if codebook.underfilled:
        print(f"underfilled classes: {sorted(codebook.underfilled)}")
    print(f"stage-1 queries: {ledger.n_stage1}")
    return 0


def _cmd_train(args) -> int:
    cfg = _load_config(args.config)
    class_space = cfg.dataset.class_space()
    backend = harness.build_backend(cfg, class_space)
    oracle = LocalOracle.from_checkpoint(
        args.target, OracleConfig(cfg.oracle_mode, Transport.LOCAL, budget=cfg.budget)
    )
    codebook = load_codebook(args.codebook) if args.codebook else None
    model = build_substitute(
        SubstituteSpec(cfg.dataset.num_classes, DepthPreset.TOY),
        seed=derive_seed(cfg.seed, "substitute"),
        image_size=cfg.dataset.image_size,
    )
    model, state, _ = train_substitute(
        codebook, backend, oracle, model, cfg.loss, cfg.train, run_dir=args.out
    )
    print(f"trained {state.step} steps; final loss {state.last_loss:.4f}, "
          f"agreement {state.last_agreement:.3f}")
    print(f"ledger: {state.ledger.to_dict()}")
    if state.checkpoints:
        print(f"final checkpoint: {state.checkpoints[-1]}")
    return 0


def _cmd_attack(args) -> int:
    cfg = _load_config(args.config)
    model, _, _ = load_substitute_checkpoint(args.substitute)
    if args.images:
        from .core import load_image_batch

        batch = load_image_batch(args.images)
    else:
        batch = generate_toy_dataset(
            ToyDatasetSpec(
                cfg.dataset.num_classes,
                cfg.dataset.image_size,
                cfg.eval.per_class,
                seed=derive_seed(cfg.seed, "heldout-eval"),
            )
        )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for atk in cfg.attacks:
        advs = attack(model, batch, atk)
        archive = out / f"adv_{atk.method.value}.tns"
        save_adversarial_batch(archive, advs)
        stats_to_json(out / f"adv_{atk.method.value}_stats.json", advs)
        print(f"{atk.method.value}: wrote {archive}")
    return 0


def _cmd_eval(args) -> int:
    cfg = _load_config(args.config)
    oracle = LocalOracle.from_checkpoint(
        args.target, OracleConfig(cfg.oracle_mode, Transport.LOCAL, budget=None)
    )
    advs = {}
    for path in args.adversarial:
        batch = load_adversarial_batch(path)
        advs[batch.config.method.value] = batch
    report = harness.evaluate_asr(oracle, advs)
    payload = json.dumps(report.to_dict(), indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(payload)
    for method, entry in report.entries.items():
        asr = "undefined" if entry.asr is None else f"{entry.asr:.4f}"
        print(f"{method}: asr={asr} ({entry.n_suc}/{entry.n_all}), mean_l2={entry.mean_l2:.4f}")
    return 0


def _cmd_run(args) -> int:
    cfg = _load_config(args.config)
    if args.preset == "single":
        result = harness.run_pipeline(cfg, args.out)
        asr = "undefined" if result.primary_asr is None else f"{result.primary_asr:.4f}"
        print(f"run complete: asr={asr}, agreement={result.agreement:.3f}, "
              f"n_qb={result.ledger.n_qb}")
    elif args.preset == "ablation-lca":
        seeds = tuple(int(s) for s in args.seeds.split(",")) if args.seeds else None
        summary = harness.run_ablation_lca(cfg, args.out, seeds=seeds)
        for arm, asr in summary["median_asr"].items():
            print(f"{arm}: median asr {asr:.4f}")
    elif args.preset == "codebook-sweep":
        sizes = tuple(int(s) for s in args.sizes.split(",")) if args.sizes else (2, 5, 10, 20)
        summary = harness.run_codebook_sweep(cfg, args.out, sizes=sizes)
        for row in summary["rows"]:
            print(f"M={row['codebook_size']}: asr={row['asr']}, n_stage1={row['n_stage1']}")
    else:
        raise SystemExit(f"unknown preset {args.preset!r}")
    print(f"artifacts in {args.out}")
    return 0


def _cmd_report(args) -> int:
    info = report_mod.summarize_run(args.run, args.out)
    print(f"report written to {info['out_dir']}")
    return 0


def _cmd_lca_preview(args) -> int:
    from . import lca as lca_mod

    cfg = _load_config(args.config)
    codebook = load_codebook(args.codebook)
    backend = harness.build_backend(cfg, cfg.dataset.class_space())
    if codebook.fingerprint != backend.descriptor.fingerprint():
        raise SystemExit("codebook fingerprint does not match the configured backend")
    classes = codebook.classes_with_codes()
    if not classes:
        raise SystemExit("codebook is empty")
    rng = np.random.default_rng(args.seed)
    codes = []
    for i in range(args.count):
        cls = classes[i % len(classes)]
        plan = lca_mod.sample_plan(codebook, cls, seed=int(rng.integers(0, 2**63 - 1)))
        codes.append(lca_mod.execute_plan(plan, codebook))
    batch = backend.latents_to_images(codes, seed=args.seed)
    report_mod.save_image_grid(batch.pixels.numpy(), args.out)
    print(f"wrote {args.count}-image preview grid to {args.out}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="subattack", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-target", help="train the victim model on the configured dataset")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True, help="checkpoint path to write")
    p.set_defaults(fn=_cmd_train_target)

    p = sub.add_parser("stage1", help="build the member codebook against a target checkpoint")
    p.add_argument("--config", default=None)
    p.add_argument("--target", required=True)
    p.add_argument("--out", required=True, help="codebook directory")
    p.set_defaults(fn=_cmd_stage1)

    p = sub.add_parser("train", help="train the substitute model (stage 2)")
    p.add_argument("--config", default=None)
    p.add_argument("--target", required=True)
    p.add_argument("--codebook", default=None)
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("attack", help="generate adversarial examples from a substitute checkpoint")
    p.add_argument("--config", default=None)
    p.add_argument("--substitute", required=True)
    p.add_argument("--images", default=None, help="image batch archive (defaults to held-out toy images)")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_attack)

    p = sub.add_parser("eval", help="measure ASR of adversarial archives against the target")
    p.add_argument("--config", default=None)
    p.add_argument("--target", required=True)
    p.add_argument("--adversarial", nargs="+", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("run", help="full pipeline or a preset experiment")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--preset", default="single", choices=["single", "ablation-lca", "codebook-sweep"])
    p.add_argument("--seeds", default=None, help="comma-separated seeds (ablation-lca)")
    p.add_argument("--sizes", default=None, help="comma-separated codebook sizes (codebook-sweep)")
    p.set_defaults(fn=_cmd_run)

    p = sub.add_parser("report", help="render CSV + figures for a run or preset directory")
    p.add_argument("--run", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=_cmd_report)

    p = sub.add_parser("lca", help="latent code augmentation utilities")
    lca_sub = p.add_subparsers(dest="lca_command", required=True)
    pv = lca_sub.add_parser("preview", help="decode sampled augmented latents to an image grid")
    pv.add_argument("--config", default=None)
    pv.add_argument("--codebook", required=True)
    pv.add_argument("--count", type=int, default=16)
    pv.add_argument("--seed", type=int, default=0)
    pv.add_argument("--out", required=True)
    pv.set_defaults(fn=_cmd_lca_preview)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
