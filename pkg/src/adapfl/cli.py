"""Command line entry point: ``adapfl {synth,train,sweep,eval,divergence,stats}``.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numeric failure.
Failures print one line to stderr of the form ``adapfl-error:<kind>: <message>``.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import experiment as ex
from . import metrics
from .federation import Regime
from .data import partition_zones
from .frameio import FrameFormatError, write_frames
from .grid import ZoneId, mean_vil
from .nn import NumericError, WeightFormatError, load_weights

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("adapfl")


def _zones(text: str):
    return tuple(ZoneId.parse(z) for z in text.split(",") if z.strip())


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="INI configuration file")
    p.add_argument("--seed", type=int, help="experiment seed (also seeds synthetic data)")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--zones", type=_zones, help="comma-separated zones, e.g. zone1,zone2,central")
    p.add_argument("--frames", type=Path, help="read frames from this directory instead of generating them")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"adapfl-error:config: {message}", file=sys.stderr)
        sys.exit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="adapfl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic frame directory")
    _common(p)
    p.add_argument("--n-frames", type=int)

    p = sub.add_parser("train", help="train one regime over the four quadrant clients")
    _common(p)
    p.add_argument("--regime", type=Regime.parse, required=True, help="IL, FL or adapFL")

    p = sub.add_parser("sweep", help="test error over (N_r, N_L) configurations")
    _common(p)

    p = sub.add_parser("eval", help="evaluate weight files against COTREC")
    _common(p)
    p.add_argument("--weights", type=Path, nargs="+", required=True,
                   help="weight files or directories holding *.adfl files")

    p = sub.add_parser("divergence", help="pairwise weight divergence between zone models")
    _common(p)
    p.add_argument("--weights", type=Path, nargs="*",
                   help="use these weight files instead of training every zone from a shared init")

    p = sub.add_parser("stats", help="mean-VIL statistics and accumulated-VIL histograms per zone")
    _common(p)
    return parser


def _config(args) -> ex.ExperimentConfig:
    overrides = {"seed": args.seed, "out": args.out, "zones": args.zones, "frames_dir": args.frames}
    cfg = ex.load_config(args.config, overrides)
    if getattr(args, "n_frames", None) is not None:
        cfg.synthetic = replace(cfg.synthetic, n_frames=args.n_frames)
    return cfg


def _prepare(cfg):
    frames = ex.load_frames(cfg)
    return frames, ex.build_clients(frames, cfg)


def cmd_synth(cfg) -> int:
    frames = ex.generate_synthetic_sequence(cfg.synthetic)
    write_frames(frames, cfg.out)
    dry = np.mean([f.total() == 0 for f in frames]) if frames else 0.0
    print(f"frames {len(frames)}  dry_fraction {dry:.4f}")
    if frames and frames[0].shape == (100, 100):
        for z, seq in partition_zones(frames).items():
            print(f"mean_vil {z.value} {np.mean([mean_vil(f) for f in seq]):.6f}")
    return EXIT_OK


def cmd_train(cfg, regime: Regime) -> int:
    cfg.check_budgets()
    _, clients = _prepare(cfg)
    trained = ex.train_regime(clients, cfg, regime)
    for p in trained.save(cfg.out):
        print(p)
    return EXIT_OK


def cmd_sweep(cfg) -> int:
    _, clients = _prepare(cfg)
    cfg.out.mkdir(parents=True, exist_ok=True)
    rows = ex.run_sweep(clients, cfg, cfg.out)
    for r in rows:
        print(*r)
    return EXIT_OK


def _collect_weights(paths) -> dict:
    models = {}
    for p in paths:
        found = ex.find_models(p) if p.is_dir() else {p.stem: load_weights(p)}
        clash = sorted(set(found) & set(models))
        if clash:
            raise ex.ConfigError(f"weight file name(s) given twice: {', '.join(clash)}")
        models.update(found)
    return models


def cmd_eval(cfg, weight_paths) -> int:
    models = _collect_weights(weight_paths)
    _, clients = _prepare(cfg)
    zone_reports, central_reports = ex.run_eval(models, clients, cfg, cfg.out)
    sys.stdout.write(metrics.write_eval_reports(zone_reports + central_reports))
    return EXIT_OK


def cmd_divergence(cfg, weight_paths) -> int:
    cfg.out.mkdir(parents=True, exist_ok=True)
    if weight_paths:
        models = _collect_weights(weight_paths)
        keys, matrix = metrics.divergence_matrix(models)
    else:
        _, clients = _prepare(cfg)
        keys, matrix, _ = ex.run_divergence(clients, cfg)
    sys.stdout.write(metrics.write_matrix(keys, matrix, cfg.out / "divergence.csv"))
    return EXIT_OK


def cmd_stats(cfg) -> int:
    _, clients = _prepare(cfg)
    cfg.out.mkdir(parents=True, exist_ok=True)
    rows = ex.zone_statistics(clients, cfg, cfg.out)
    sys.stdout.write(metrics.write_stats_reports(rows))
    return EXIT_OK


def _fail(kind: str, code: int, exc: BaseException) -> int:
    message = " ".join(str(exc).split())
    print(f"adapfl-error:{kind}: {message}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _config(args)
        if args.command == "synth":
            return cmd_synth(cfg)
        if args.command == "train":
            return cmd_train(cfg, args.regime)
        if args.command == "sweep":
            return cmd_sweep(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.weights)
        if args.command == "divergence":
            return cmd_divergence(cfg, args.weights)
        return cmd_stats(cfg)
    except ex.ConfigError as exc:
        return _fail("config", EXIT_CONFIG, exc)
    except (ex.DataError, FrameFormatError, WeightFormatError, FileNotFoundError) as exc:
        return _fail("data", EXIT_DATA, exc)
    except (NumericError, FloatingPointError) as exc:
        return _fail("numeric", EXIT_NUMERIC, exc)
    except ValueError as exc:
        return _fail("data", EXIT_DATA, exc)


if __name__ == "__main__":
    sys.exit(main())
