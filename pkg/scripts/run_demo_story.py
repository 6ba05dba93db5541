"""Write the bundled demo story and run it end to end.

    python3 scripts/run_demo_story.py --out /tmp/demo --shots 10
"""

import argparse
import logging
from pathlib import Path

from entmem.demo import write_demo
from entmem.pipeline import RunConfig, load_script, run_story
from entmem.tensors import MemoryLayout


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", type=Path, default=Path("demo"))
    parser.add_argument("--shots", type=int, default=10)
    parser.add_argument("--small", action="store_true", help="16x16 latent, stride 4 (fast)")
    parser.add_argument("--update-every", type=int, default=1)
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")

    layout, stride = (MemoryLayout(h=16, w=16), 4) if args.small else (MemoryLayout(), 8)
    config = RunConfig.load(write_demo(args.out, args.shots, layout, stride, update_every=args.update_every))
    run_dir = config.resolve(config.output_dir)
    bank, results, metrics, _ = run_story(load_script(config), config, run_dir)

    print((run_dir / "reports" / "summary.txt").read_text(), end="")
    for eid in bank.entity_ids():
        print(f"{eid}: {len(bank.entries[eid])} entries, {bank.token_cost(eid)} tokens")
    for note in metrics.notes:
        print(f"note: {note}")
    print(f"run directory: {run_dir}")


if __name__ == "__main__":
    main()
