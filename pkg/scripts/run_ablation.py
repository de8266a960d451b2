"""Loss-ablation experiment: train the four student variants on the same
synthetic dataset and collect one evaluation row per variant.

Variants:
    ablation1  adversarial + deep-feature content term (weight 1), no
               distillation
    ablation2  adversarial + pixel content term, no distillation
    ablation3  all three terms, U-Net student backbone
    full       all three terms, residual student backbone

Usage:
    python scripts/run_ablation.py --out runs/ablation [--steps 300]
"""

import argparse
import sys
from pathlib import Path

from darkstain.cli import main as cli

VARIANTS = ("ablation1", "ablation2", "ablation3", "full")


def sh(*argv):
    code = cli([str(a) for a in argv])
    if code != 0:
        print(f"step failed with exit code {code}: {argv}", file=sys.stderr)
        sys.exit(code)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--size", type=int, default=96)
    ap.add_argument("--n-images", type=int, default=64)
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_cfg = out / "train.cfg"
    train_cfg.write_text(
        "batch_size = 4\nbase_width = 16\nteacher_width = 16\n"
        "patch_count = 2\npatch_size = 32\n"
    )
    synth_cfg = out / "synth.cfg"
    synth_cfg.write_text("cells_per_image = 8,14\ncell_radius = 5.0,11.0\n")

    sh("synth-data", "--out", out / "data", "--seed", args.seed,
       "--n-images", args.n_images, "--size", args.size, "--config", synth_cfg)
    sh("enhance", "--data", out / "data", "--out", out / "enh")
    sh("pretrain-teacher", "--data", out / "data", "--out", out / "teacher",
       "--config", train_cfg, "--seed", args.seed + 1, "--steps", args.steps,
       "--size", args.size)
    sh("synth-data", "--out", out / "held", "--seed", args.seed + 1000,
       "--n-images", 8, "--size", args.size, "--config", synth_cfg)
    sh("enhance", "--data", out / "held", "--out", out / "held_enh",
       "--lut", out / "enh" / "lut.txt")
    sh("fit-niqe", "--images", out / "data" / "bright", "--out", out / "niqe_model.npz")

    for variant in VARIANTS:
        run_dir = out / variant
        sh("train", "--data", out / "data", "--lut", out / "enh" / "lut.txt",
           "--teacher", out / "teacher" / "teacher.pt", "--out", run_dir,
           "--config", train_cfg, "--seed", args.seed + 2, "--steps", args.steps,
           "--size", args.size, "--variant", variant)
        sh("stain", "--input", out / "held" / "dark", "--lut", out / "enh" / "lut.txt",
           "--student", run_dir / "student.pt", "--out", run_dir / "stained")
        sh("evaluate", "--outputs", run_dir / "stained",
           "--reference", out / "data" / "bright",
           "--enhanced", out / "held_enh" / "enhanced",
           "--out", out / "results.csv", "--niqe-model", out / "niqe_model.npz",
           "--method", variant)

    print(f"\nablation table written to {out / 'results.csv'}")
    print((out / "results.csv").read_text())


if __name__ == "__main__":
    main()
