"""Run the desk-scale regime comparison over several seeds.

Each seed writes ``<out>/seed<k>/study.csv``; a summary of per-zone test MSE and
the qualitative checks (adapFL vs FL, every learned regime vs COTREC) is printed.
"""
import argparse
import time
from pathlib import Path

from adapfl import experiment as ex
from adapfl.grid import QUADRANTS

REGIMES = ("COTREC", "IL", "FL", "adapFL")


def summarize(rows_by_seed: dict[int, list[dict]]) -> list[str]:
    lines = []
    for seed, rows in rows_by_seed.items():
        mse = {(r["regime"], r["zone"]): r["mse"] for r in rows}
        zones = list(QUADRANTS)
        wins = sum(mse[("adapFL", z)] <= mse[("FL", z)] for z in zones)
        beat = all(mse[(r, z)] < mse[("COTREC", z)] for r in REGIMES[1:] for z in zones)
        for z in zones:
            lines.append(f"seed {seed} {z.value} " + " ".join(f"{r}={mse[(r, z)]:.5f}" for r in REGIMES))
        lines.append(f"seed {seed} adapFL<=FL in {wins}/4 zones; all learned regimes beat COTREC: {beat}")
    return lines


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--config", type=Path, default=Path(__file__).resolve().parents[1] / "configs" / "reference.ini")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--out", type=Path, default=None)
    args = p.parse_args(argv)
    base = ex.load_config(args.config)
    root = args.out or base.out
    rows_by_seed = {}
    for seed in args.seeds:
        cfg = ex.load_config(args.config, {"seed": seed})
        start = time.perf_counter()
        clients = ex.build_clients(ex.load_frames(cfg), cfg)
        out = root / f"seed{seed}"
        ex.run_study(clients, cfg, out)
        rows_by_seed[seed] = ex.read_study(out / "study.csv")
        print(f"seed {seed} done in {time.perf_counter() - start:.0f} s", flush=True)
    print("\n".join(summarize(rows_by_seed)))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
