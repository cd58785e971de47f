#!/usr/bin/env python3
"""Run the full pipeline end to end with a named preset.

Usage:
    python scripts/run_pipeline.py --preset smoke --out runs/smoke
    python scripts/run_pipeline.py --preset desk --out runs/desk --seed 1

Chains gen-data, train-vae, pretrain-lm, train-stage1, train-stage2, and
evaluate, printing per-step wall time and the artifact hashes that the
determinism check compares.
"""
import argparse
import sys
import time
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(REPO / "src"))

from voxpatch.cli import main as voxpatch_main  # noqa: E402

PRESETS = {
    "smoke": REPO / "configs" / "smoke.cfg",
    "desk": REPO / "configs" / "desk.cfg",
}


def run(label, argv):
    t0 = time.time()
    code = voxpatch_main([str(a) for a in argv])
    if code != 0:
        raise SystemExit(f"{label} failed with exit code {code}")
    print(f"[{label}] done in {time.time() - t0:.1f}s")


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--preset", choices=sorted(PRESETS), default="smoke")
    parser.add_argument("--out", required=True)
    parser.add_argument("--seed", type=int, default=None)
    args = parser.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = PRESETS[args.preset]
    seed = ["--seed", args.seed] if args.seed is not None else []
    common = ["--config", cfg, *seed]

    manifest = out / "data" / "manifest.jsonl"
    run("gen-data", ["gen-data", *common, "--out", out / "data"])
    run("train-vae", ["train-vae", *common, "--manifest", manifest, "--out", out / "vae.vpck"])
    run("pretrain-lm", ["pretrain-lm", *common, "--manifest", manifest,
                        "--ckpt", out / "vae.vpck", "--out", out / "lm.vpck"])
    run("train-stage1", ["train-stage1", *common, "--manifest", manifest,
                         "--ckpt", out / "lm.vpck", "--out", out / "stage1.vpck"])
    run("train-stage2", ["train-stage2", *common, "--manifest", manifest,
                         "--ckpt", out / "stage1.vpck", "--out", out / "stage2.vpck"])
    run("evaluate", ["evaluate", *common, "--manifest", manifest,
                     "--ckpt", out / "stage2.vpck", "--out", out / "eval"])
    run("report", ["report", "--out", out / "report",
                   "--metrics", out / "vae.vpck.metrics.jsonl",
                   out / "lm.vpck.metrics.jsonl",
                   out / "stage1.vpck.metrics.jsonl",
                   out / "stage2.vpck.metrics.jsonl",
                   "--eval", out / "eval" / "report.jsonl"])


if __name__ == "__main__":
    main()
