"""Train every named variant on the desk synthetic preset with one shared seed and tabulate.

    python3 scripts/run_ablation.py --variants full no-memory --out runs/ablation
    python3 scripts/run_ablation.py --all --out runs/ablation-all
"""
import argparse
from pathlib import Path

from fmsam.config import VARIANTS, preset, variant
from fmsam.data import SYNTH_PRESETS, synth_motion
from fmsam.training import run_ablation


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--variants", nargs="+", default=["full", "no-memory"])
    ap.add_argument("--all", action="store_true", help="run every variant in the table")
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=None)
    args = ap.parse_args()

    names = list(VARIANTS) if args.all else args.variants
    grid = {name: variant(name) for name in names}
    cfg = preset("desk", seed=args.seed, **({"epochs": args.epochs} if args.epochs else {}))
    dataset = synth_motion(SYNTH_PRESETS["desk"], seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = run_ablation(grid, dataset, cfg, [2, 10, 25], out)
    table.to_csv(out / "ablation.csv")
    text = table.render_text()
    (out / "ablation.txt").write_text(text)
    print(text, end="")


if __name__ == "__main__":
    main()
