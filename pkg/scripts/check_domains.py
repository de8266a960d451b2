"""Measure the synthetic domains against the pipeline's statistical needs.

Reports per-domain constraint margins plus the KS distance between the
enhanced-output CDF and the bright reference CDF. Useful when adjusting
SynthConfig defaults: the enhancement quality degrades if any luma bin of the
dark domain carries too much mass.

Usage:
    python scripts/check_domains.py [--n 200] [--seed 7]
"""

import argparse
import time

from scipy import ndimage

from darkstain.histmatch import (
    accumulate_histogram,
    build_staining_lut,
    enhance,
    histogram_to_cdf,
    ks_statistic,
)
from darkstain.imaging import to_luma
from darkstain.synthcells import SynthConfig, gen_bright_field, gen_dark_field


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=200)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()

    t0 = time.time()
    dark = gen_dark_field(SynthConfig(n_images=args.n, seed=args.seed))
    bright = gen_bright_field(SynthConfig(n_images=args.n, seed=args.seed + 1))

    glob, bg_means, interior_means, contrast = [], [], [], []
    for img in dark:
        g = to_luma(img)
        interior = ndimage.binary_erosion(g > 0.27, iterations=2)
        far_bg = ~ndimage.binary_dilation(g > 0.12, iterations=12)
        glob.append(g.mean())
        if far_bg.sum() > 200 and interior.any():
            bg_means.append(g[far_bg].mean())
            interior_means.append(g[interior].mean())
            contrast.append(g[interior].mean() - g[far_bg].mean())

    h_d = accumulate_histogram(dark)
    c_d = histogram_to_cdf(h_d)
    c_b = histogram_to_cdf(accumulate_histogram(bright))
    lut = build_staining_lut(c_d, c_b)
    c_z = histogram_to_cdf(accumulate_histogram(enhance(x, lut) for x in dark))

    print(f"images per domain      {args.n}")
    print(f"dark global mean max   {max(glob):.4f}   (< 0.15)")
    print(f"dark bg mean max       {max(bg_means):.4f}   (< 0.05)")
    print(f"dark interior mean min {min(interior_means):.4f}   (> 0.30)")
    print(f"contrast min           {min(contrast):.4f}   (> 0.25)")
    print(f"bright global mean min {min(to_luma(b).mean() for b in bright):.4f}   (> 0.70)")
    print(f"dark max bin mass      {h_d.counts.max() / h_d.total:.5f}")
    print(f"KS(enhanced, bright)   {ks_statistic(c_z, c_b):.5f}   (< 0.02)")
    print(f"elapsed                {time.time() - t0:.1f}s")


if __name__ == "__main__":
    main()
