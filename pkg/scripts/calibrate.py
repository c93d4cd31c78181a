"""Quick single-seed look at oracle / direct-LOG / ATCL on the fallback data.

    python3 scripts/calibrate.py --set data.synthetic.sigma=0.3 --methods oracle,direct:log,atcl
"""

import argparse
import json
import logging
import time

from atcl import experiments as X
from atcl.config import parse_override_value


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--methods", default="oracle,direct:log,atcl")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--set", action="append", default=[], help="dotted.key=value")
    args = p.parse_args()
    logging.basicConfig(level=logging.WARNING)
    over = {}
    for item in args.set:
        k, v = item.split("=", 1)
        over[k] = parse_override_value(v)
    cfg = X.desk_config(args.seed, **over)
    for method in args.methods.split(","):
        t0 = time.time()
        recs = X.run(method, cfg)
        pgd = [round(r["pgd_acc"], 3) for r in recs]
        nat = [round(r["nat_acc"], 3) for r in recs]
        print(json.dumps({"method": method, "sec": round(time.time() - t0), "pgd": pgd[::3] + [pgd[-1]],
                          "nat": nat[::3] + [nat[-1]],
                          "trace5": X.mean_over(recs, "grad_trace_first", range(5))}), flush=True)


if __name__ == "__main__":
    main()
