"""Memory-token reduction and attention-op ratio as entity coverage varies.

Each row is a 10-shot story with four recurring entities whose reference
masks cover the given number of cells per memory frame (M=4, 32x32 latent,
256 tokens per frame). Output is CSV on stdout.

    python3 scripts/efficiency_sweep.py --shots 10
"""

import argparse
import csv
import sys
import tempfile

from entmem.conditioning import attention_ops
from entmem.demo import write_coverage_story
from entmem.pipeline import RunConfig, load_script, run_story

SWEEP = [
    (8, 8, 8, 8),
    (16, 16, 16, 16),
    (30, 30, 27, 27),
    (48, 48, 40, 40),
    (64, 64, 64, 64),
    (128, 128, 96, 96),
    (256, 256, 256, 256),
]


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--shots", type=int, default=10)
    args = parser.parse_args()

    out = csv.writer(sys.stdout, lineterminator="\n")
    out.writerow(["costs", "coverage", "tokens_kept", "tokens_full", "reduction", "ops_ratio"])
    for costs in SWEEP:
        with tempfile.TemporaryDirectory() as tmp:
            config = RunConfig.load(write_coverage_story(tmp, costs=costs, n_shots=args.shots))
            _, _, _, total = run_story(load_script(config), config)
        out.writerow([
            "/".join(map(str, costs)),
            f"{total.tokens_kept / total.tokens_full:.4f}",
            total.tokens_kept,
            total.tokens_full,
            f"{total.reduction:.4f}",
            f"{total.ops_ratio:.2f}",
        ])

    print(file=sys.stderr)
    for t in (256, 512, 1024, 2048):
        print(f"ops({2 * t})/ops({t}) = {attention_ops(2 * t) / attention_ops(t):g}", file=sys.stderr)


if __name__ == "__main__":
    main()
