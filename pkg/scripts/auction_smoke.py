"""Rejection rate of the auction participation test on simulated bids that
satisfy the null with room to spare.

    python scripts/auction_smoke.py --auctions 200 --reps 100 --workers 4
"""

import argparse
import json

from funcineq.montecarlo import AuctionExperimentConfig, run_auction_experiment


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--auctions", type=int, default=200)
    ap.add_argument("--reps", type=int, default=100)
    ap.add_argument("--boot", type=int, default=200)
    ap.add_argument("--nx", type=int, default=21)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args(argv)

    cfg = AuctionExperimentConfig(n_auctions=args.auctions, n_mc=args.reps, n_boot=args.boot, nx=args.nx,
                                  master_seed=args.seed)
    out = run_auction_experiment(cfg, args.workers)
    print(json.dumps({
        "rejection_rate": out["rejection_rate"],
        "median_p_value": float(sorted(out["p_values"])[len(out["p_values"]) // 2]),
        "seconds": round(out["wall_clock"], 1),
    }))


if __name__ == "__main__":
    main()
