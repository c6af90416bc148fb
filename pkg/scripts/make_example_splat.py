"""Write the built-in synthetic scenes as splat PLY files for CLI experiments."""
import argparse
from pathlib import Path

from splatreorg import scenes
from splatreorg.splat_io import write_splat


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("outdir", type=Path)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    args.outdir.mkdir(parents=True, exist_ok=True)
    gs, _ = scenes.grouped_mixture_set(3000, seed=args.seed)
    write_splat(gs, args.outdir / "mixture.ply")
    write_splat(scenes.clone_cluster(50, 0.8), args.outdir / "cluster.ply")
    floater, _ = scenes.floater_surface_set()
    write_splat(floater, args.outdir / "floater.ply")
    write_splat(scenes.uniform_set(4000, seed=args.seed, contrast=10.0), args.outdir / "contrast.ply")
    (args.outdir / "floater_ray.txt").write_text("0 0 0 0 0 1\n")
    for p in sorted(args.outdir.iterdir()):
        print(p)


if __name__ == "__main__":
    main()
