"""Command-line entry point wiring the full pipeline.

Subcommands: gen-data, train-vae, pretrain-lm, train-stage1, train-stage2,
complete, refine, evaluate, report.  Failures exit nonzero after printing
one machine-parseable line: ``error: <ErrorClass>: <detail>``.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .checkpoint import Checkpoint, checkpoint_hash
from .config import RunConfig, layered_config
from .corruption import TrainRanges
from .dataset import GenConfig, ShapeDataset, build_manifest, load_manifest, load_shapes
from .errors import FileError, UsageError, VoxPatchError
from .evaluation import DEFAULT_PRESETS, complete, evaluate_suite, iterative_refine
from .lm import LmConfig, LmTrainConfig, Tokenizer, pretrain_lm
from .lora import LoraConfig
from .metrics import MetricsLog
from .projection import STAGE1_INSTRUCTION, STAGE2_INSTRUCTION
from .training import PipelineConfig, PipelineState, StageConfig, run_stage1, run_stage2
from .vae import VaeConfig, VaeTrainConfig, train_vae
from .voxel import load_voxb, save_voxb


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _load_dataset(manifest_path) -> tuple[ShapeDataset, str]:
    manifest = load_manifest(manifest_path)
    return load_shapes(manifest), _file_hash(manifest_path)


def build_pipeline_config(cfg: RunConfig, dataset: ShapeDataset) -> PipelineConfig:
    """Derive the architecture snapshot for a corpus: vocab, dims, taps."""
    corpus = dataset.all_captions() + [STAGE1_INSTRUCTION, STAGE2_INSTRUCTION]
    tokenizer = Tokenizer.from_corpus(corpus)
    gi = dataset.grid_dims[0] // dataset.patch_dims[0]
    gj = dataset.grid_dims[1] // dataset.patch_dims[1]
    gk = dataset.grid_dims[2] // dataset.patch_dims[2]
    p = gi * gj * gk
    context = cfg.lm_context or p + 64
    taps = tuple(range(cfg.lm_layers - 4, cfg.lm_layers + 1))
    return PipelineConfig(
        grid_dims=tuple(dataset.grid_dims),
        patch_dims=tuple(dataset.patch_dims),
        vocab=tokenizer.tokens,
        vae=VaeConfig(
            patch_n=dataset.patch_dims[0],
            hidden_dim=cfg.vae_hidden,
            latent_dim=cfg.vae_latent,
            beta=cfg.vae_beta,
        ),
        lm=LmConfig(
            vocab_size=len(tokenizer),
            n_layers=cfg.lm_layers,
            model_dim=cfg.lm_dim,
            n_heads=cfg.lm_heads,
            context=context,
            tap_layers=taps,
        ),
        lora=LoraConfig(rank=cfg.lora_rank, alpha=cfg.lora_alpha, dropout=cfg.lora_dropout),
        ff_dim=cfg.oproj_ff,
        mlp_hidden=cfg.oproj_mlp_hidden,
    )


def _layer(args, keys: dict) -> RunConfig:
    overrides = {field: getattr(args, flag) for flag, field in keys.items()}
    return layered_config(getattr(args, "config", None), overrides)


def cmd_gen_data(args) -> int:
    cfg = _layer(args, {"shapes": "shapes", "grid": "grid", "patch": "patch", "seed": "seed",
                        "categories": "categories"})
    gen = GenConfig(
        grid_n=cfg.grid, patch_n=cfg.patch, shapes_per_category=cfg.shapes,
        categories=cfg.category_list(), seed=cfg.seed,
    )
    path = build_manifest(gen, Path(args.out))
    print(f"manifest {path} sha256={_file_hash(path)}")
    return 0


def cmd_train_vae(args) -> int:
    cfg = _layer(args, {"seed": "seed", "epochs": "vae_epochs", "lr": "vae_lr",
                        "batch": "vae_batch", "latent": "vae_latent", "hidden": "vae_hidden"})
    dataset, manifest_hash = _load_dataset(args.manifest)
    pipeline_cfg = build_pipeline_config(cfg, dataset)
    log = MetricsLog(Path(str(args.out) + ".metrics.jsonl"))
    vae = train_vae(
        dataset, pipeline_cfg.vae,
        VaeTrainConfig(epochs=cfg.vae_epochs, batch_size=cfg.vae_batch, lr=cfg.vae_lr,
                       weight_decay=cfg.weight_decay, seed=cfg.seed),
        log,
    )
    state = PipelineState(
        config=pipeline_cfg, tokenizer=Tokenizer(pipeline_cfg.vocab), vae=vae,
        manifest_hash=manifest_hash, stages=["vae"],
    )
    state.to_checkpoint().save(args.out)
    print(f"checkpoint {args.out} sha256={checkpoint_hash(args.out)}")
    return 0


def cmd_pretrain_lm(args) -> int:
    cfg = _layer(args, {"seed": "seed", "epochs": "lm_epochs", "lr": "lm_lr", "batch": "lm_batch"})
    dataset, manifest_hash = _load_dataset(args.manifest)
    expected = build_pipeline_config(cfg, dataset)
    state = PipelineState.from_checkpoint(Checkpoint.load(args.ckpt), expected.to_dict())
    corpus = [c for s in dataset.split("train") for c in s.captions]
    corpus += [STAGE1_INSTRUCTION, STAGE2_INSTRUCTION]
    log = MetricsLog(Path(str(args.out) + ".metrics.jsonl"))
    state.lm = pretrain_lm(
        corpus, state.tokenizer, state.config.lm,
        LmTrainConfig(epochs=cfg.lm_epochs, batch_size=cfg.lm_batch, lr=cfg.lm_lr,
                      weight_decay=cfg.weight_decay, seed=cfg.seed),
        log,
    )
    state.manifest_hash = manifest_hash
    state.stages = state.stages + ["pretrain_lm"]
    state.to_checkpoint().save(args.out)
    vocab_path = Path(args.out).with_suffix(".vocab.txt")
    state.tokenizer.save(vocab_path)
    print(f"checkpoint {args.out} sha256={checkpoint_hash(args.out)} vocab={vocab_path}")
    return 0


def _stage_cmd(args, stage: str) -> int:
    field = {"stage1": ("stage1_epochs", "stage1_lr", "stage1_batch"),
             "stage2": ("stage2_epochs", "stage2_lr", "stage2_batch")}[stage]
    cfg = _layer(args, {"seed": "seed", "epochs": field[0], "lr": field[1], "batch": field[2]})
    if getattr(args, "no_augment", False):
        cfg.augment = False
    dataset, manifest_hash = _load_dataset(args.manifest)
    expected = build_pipeline_config(cfg, dataset)
    state = PipelineState.from_checkpoint(Checkpoint.load(args.ckpt), expected.to_dict())
    stage_cfg = StageConfig(
        epochs=getattr(cfg, field[0]), batch_size=getattr(cfg, field[2]),
        lr=getattr(cfg, field[1]), weight_decay=cfg.weight_decay, seed=cfg.seed,
        augment=cfg.augment, ranges=TrainRanges(),
    )
    log = MetricsLog(Path(str(args.out) + ".metrics.jsonl"))
    runner = run_stage1 if stage == "stage1" else run_stage2
    state = runner(dataset, state, stage_cfg, log)
    state.manifest_hash = manifest_hash
    state.to_checkpoint().save(args.out)
    print(f"checkpoint {args.out} sha256={checkpoint_hash(args.out)}")
    return 0


def cmd_complete(args) -> int:
    state = PipelineState.from_checkpoint(Checkpoint.load(args.ckpt))
    grid = load_voxb(args.input)
    completed = complete(state, grid, args.caption)
    save_voxb(completed, args.out)
    print(f"completed {args.out} occupied={int(completed.sum())}")
    return 0


def cmd_refine(args) -> int:
    state = PipelineState.from_checkpoint(Checkpoint.load(args.ckpt))
    grid = load_voxb(args.input)
    truth = load_voxb(args.truth) if args.truth else None
    refined, rows = iterative_refine(state, grid, args.caption, args.steps, truth)
    save_voxb(refined, args.out)
    for row in rows:
        print(json.dumps(row, sort_keys=True))
    return 0


def cmd_evaluate(args) -> int:
    cfg = _layer(args, {"seed": "seed"})
    dataset, _ = _load_dataset(args.manifest)
    state = PipelineState.from_checkpoint(Checkpoint.load(args.ckpt))
    report = evaluate_suite(
        state, dataset, DEFAULT_PRESETS, seed=cfg.seed,
        checkpoint_hash=checkpoint_hash(args.ckpt), config_echo=cfg.echo(),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.save(out / "report.jsonl")
    (out / "report.txt").write_text(report.table())
    print(report.table())
    print(f"report {out / 'report.jsonl'} sha256={_file_hash(out / 'report.jsonl')}")
    return 0


def cmd_report(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.metrics:
        fig, ax = plt.subplots(figsize=(8, 5))
        with open(out / "metrics.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["stage", "step", "loss"])
            for path in args.metrics:
                if not Path(path).exists():
                    raise FileError(f"metrics file not found: {path}")
                rows = [json.loads(line) for line in Path(path).read_text().splitlines() if line]
                by_stage: dict[str, list] = {}
                for r in rows:
                    if "loss" in r:
                        by_stage.setdefault(r["stage"], []).append((r["step"], r["loss"]))
                        writer.writerow([r["stage"], r["step"], r["loss"]])
                for stage, pts in by_stage.items():
                    xs, ys = zip(*sorted(pts))
                    ax.plot(xs, ys, label=f"{Path(path).name}:{stage}")
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_yscale("log")
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(out / "loss_curves.png", dpi=120)
        plt.close(fig)
    if args.eval:
        if not Path(args.eval).exists():
            raise FileError(f"eval report not found: {args.eval}")
        lines = Path(args.eval).read_text().splitlines()
        header = json.loads(lines[0])
        with open(out / "eval_table.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["preset", "n", "cd_mean", "cd_median", "cd_input_mean",
                             "iou_mean", "failures"])
            for preset in header["presets"]:
                agg = header["aggregates"][preset]
                writer.writerow([preset, agg["n"], agg["cd_mean"], agg["cd_median"],
                                 agg["cd_input_mean"], agg["iou_mean"], agg["failures"]])
    print(f"report artifacts written to {out}")
    return 0


def _add_common(sub, *, manifest=False, ckpt=False, out=True, train_flags=False):
    sub.add_argument("--config", default=None, help="key = value config file")
    sub.add_argument("--seed", type=int, default=None)
    if manifest:
        sub.add_argument("--manifest", required=True)
    if ckpt:
        sub.add_argument("--ckpt", required=True)
    if out:
        sub.add_argument("--out", required=True)
    if train_flags:
        sub.add_argument("--epochs", type=int, default=None)
        sub.add_argument("--lr", type=float, default=None)
        sub.add_argument("--batch", type=int, default=None)


def build_parser() -> _Parser:
    parser = _Parser(prog="voxpatch", description=__doc__)
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("gen-data", help="generate the synthetic captioned corpus")
    _add_common(p)
    p.add_argument("--shapes", type=int, default=None, help="shapes per category (>= 10)")
    p.add_argument("--grid", type=int, default=None)
    p.add_argument("--patch", type=int, default=None)
    p.add_argument("--categories", default=None)
    p.set_defaults(fn=cmd_gen_data)

    p = subs.add_parser("train-vae", help="fit the shared patch VAE")
    _add_common(p, manifest=True, train_flags=True)
    p.add_argument("--latent", type=int, default=None)
    p.add_argument("--hidden", type=int, default=None)
    p.set_defaults(fn=cmd_train_vae)

    p = subs.add_parser("pretrain-lm", help="pretrain the caption language model")
    _add_common(p, manifest=True, ckpt=True, train_flags=True)
    p.set_defaults(fn=cmd_pretrain_lm)

    p = subs.add_parser("train-stage1", help="train the input projection (caption NLL)")
    _add_common(p, manifest=True, ckpt=True, train_flags=True)
    p.add_argument("--no-augment", action="store_true")
    p.set_defaults(fn=lambda a: _stage_cmd(a, "stage1"))

    p = subs.add_parser("train-stage2", help="train output projection + LoRA (latent MSE)")
    _add_common(p, manifest=True, ckpt=True, train_flags=True)
    p.add_argument("--no-augment", action="store_true")
    p.set_defaults(fn=lambda a: _stage_cmd(a, "stage2"))

    p = subs.add_parser("complete", help="complete one VOXB grid guided by a caption")
    _add_common(p, ckpt=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--caption", required=True)
    p.set_defaults(fn=cmd_complete)

    p = subs.add_parser("refine", help="iterative completion (feed output back)")
    _add_common(p, ckpt=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--caption", required=True)
    p.add_argument("--steps", type=int, default=2)
    p.add_argument("--truth", default=None, help="optional VOXB ground truth for per-step CD")
    p.set_defaults(fn=cmd_refine)

    p = subs.add_parser("evaluate", help="run the corruption-preset evaluation suite")
    _add_common(p, manifest=True, ckpt=True)
    p.set_defaults(fn=cmd_evaluate)

    p = subs.add_parser("report", help="render metric tables and loss curves")
    _add_common(p)
    p.add_argument("--metrics", nargs="*", default=[])
    p.add_argument("--eval", default=None)
    p.set_defaults(fn=cmd_report)

    return parser


def main(argv=None) -> int:
    threads = os.environ.get("VOXPATCH_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    try:
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except VoxPatchError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return type(exc).exit_code
    except OSError as exc:
        print(f"error: FileError: {exc}", file=sys.stderr)
        return FileError.exit_code


if __name__ == "__main__":
    sys.exit(main())
