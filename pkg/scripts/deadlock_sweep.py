"""Direct continuation vs reorganize-then-optimize on the toy deadlock scene, over seeds."""
import argparse
import csv
import sys

from splatreorg.toysplat import deadlock_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--iters", type=int, default=2000)
    ap.add_argument("--step", type=float, default=0.01)
    ap.add_argument("--k", type=int, default=20)
    ap.add_argument("--alpha0", type=float, default=0.01)
    args = ap.parse_args()
    w = csv.writer(sys.stdout)
    w.writerow(["seed", "direct_loss", "reorg_loss", "T_before", "T_after", "reorg_wins"])
    wins = 0
    for s in range(args.seeds):
        r = deadlock_experiment(s, args.iters, args.step, args.k, args.alpha0)
        wins += r.reorg_wins
        w.writerow([s, f"{r.direct_loss:.6g}", f"{r.reorg_loss:.6g}", f"{r.transmittance_before:.6g}",
                    f"{r.transmittance_after:.6g}", int(r.reorg_wins)])
    print(f"# reorg wins {wins}/{args.seeds}", file=sys.stderr)


if __name__ == "__main__":
    main()
