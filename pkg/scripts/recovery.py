"""Replicate the recovery experiment on the n=10 market and write per-replicate results.

    python scripts/recovery.py --replicates 20 --sims 1000 --out recovery.csv
"""

import argparse
import sys
import time

import numpy as np

from lmsbi.analysis import recovery_study
from lmsbi.market import SimulationConfig
from lmsbi.npe import PARAM_COLUMNS
from lmsbi.synth import SynthConfig, generate_market


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=10)
    ap.add_argument("--market-seed", type=int, default=1)
    ap.add_argument("--sims", type=int, default=1000)
    ap.add_argument("--replicates", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="recovery.csv")
    args = ap.parse_args(argv)

    spec = generate_market(SynthConfig(n=args.n, seed=args.market_seed))
    start = time.perf_counter()
    res = recovery_study(spec, sims=args.sims, replicates=args.replicates, seed=args.seed,
                         cfg=SimulationConfig(T=600, t_shock=231),
                         progress=lambda k: print(f"replicate {k + 1}/{args.replicates} "
                                                  f"{time.perf_counter() - start:.0f} s", file=sys.stderr))
    res.to_csv(args.out)
    for mode in res.means:
        cov = ", ".join(f"{p} {c:.0%}" for p, c in zip(PARAM_COLUMNS, res.coverage(mode)))
        std = ", ".join(f"{p} {s:.4g}" for p, s in zip(PARAM_COLUMNS, np.median(res.stds[mode], axis=0)))
        print(f"{mode}: coverage [{cov}], median std [{std}]")
    print(f"total {time.perf_counter() - start:.0f} s")


if __name__ == "__main__":
    main()
