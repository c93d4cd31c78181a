"""Precompute every desk-scale run the acceptance suite reads from the cache.

    python3 scripts/run_desk.py [--only failure,mcl,pseudo]
"""

import argparse
import logging
import time

from atcl import experiments as X


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--only", default="pseudo,failure,mcl")
    args = p.parse_args()
    logging.basicConfig(level=logging.WARNING)
    grids = X.all_grids()
    for name in args.only.split(","):
        for method, cfg in grids[name]:
            t0 = time.time()
            recs = X.run(method, cfg)
            print(f"{name} {method} seed={cfg.seed} mcl={cfg.data.mcl_size} "
                  f"pgd={X.final(recs):.3f} nat={X.final(recs, 'nat_acc'):.3f} "
                  f"{time.time() - t0:.0f}s", flush=True)


if __name__ == "__main__":
    main()
