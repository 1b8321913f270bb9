"""End-to-end study runner: data, training under each regime, evaluation and reports."""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics
from .baselines import CotrecParams, cotrec_predict
from .data import ClientDataset, build_client_datasets, center_window, stack_samples
from .federation import (Client, Regime, Schedule, check_budget, fine_tune, run_federated, run_individual,
                         write_round_log)
from .frameio import read_frames
from .grid import QUADRANTS, ZoneId, accumulated_vil, mean_vil
from .nn import PAPER_CHANNELS, ModelWeights, init_model, load_weights, predict, save_weights
from .synthetic import SyntheticConfig, generate_synthetic_sequence

log = logging.getLogger(__name__)

OUTPUT_SIZE = 32


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    frames_dir: Path | None = None
    train_fraction: float = 0.8
    blank_eps: float = 0.0
    window: int = 3
    channels: tuple = PAPER_CHANNELS
    individual_epochs: int = 100
    epochs_per_round: int = 10
    fl_rounds: int = 10
    adapfl_rounds: int = 9
    local_epochs: int = 10
    divergence_epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 1e-3
    budget_matched: bool = True
    workers: int = 1
    baseline: CotrecParams = field(default_factory=CotrecParams)
    zones: tuple = tuple(ZoneId)
    out: Path = Path("runs/default")
    render_count: int = 6
    render_vmax: float = 5.0
    hist_bins: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.fl_rounds < 0 or self.adapfl_rounds < 0 or self.batch_size < 1:
            raise ConfigError("rounds must be >= 0 and batch_size >= 1")
        if not 0 < self.train_fraction < 1:
            raise ConfigError("train_fraction must lie in (0, 1)")
        if not self.zones:
            raise ConfigError("at least one zone is required")

    def fl_schedule(self) -> Schedule:
        return Schedule.federated(self.fl_rounds, self.epochs_per_round, **self._common())

    def adapfl_schedule(self) -> Schedule:
        return Schedule(Regime.ADAPFL, self.adapfl_rounds, self.epochs_per_round, self.local_epochs,
                        self.individual_epochs, **self._common())

    def il_schedule(self) -> Schedule:
        return Schedule.individual(self.individual_epochs, **self._common())

    def _common(self) -> dict:
        return dict(batch_size=self.batch_size, seed=self.seed, learning_rate=self.learning_rate)

    def check_budgets(self) -> None:
        if not self.budget_matched:
            return
        fl = Schedule(Regime.FEDERATED, self.fl_rounds, self.epochs_per_round, 0, self.individual_epochs)
        for name, s in (("FL", fl), ("adapFL", self.adapfl_schedule())):
            if not check_budget(s):
                raise ConfigError(
                    f"{name} schedule spends {s.n_rounds}*{s.epochs_per_round}+{s.local_epochs} epochs, "
                    f"individual budget is {s.individual_epochs}")


_SECTIONS = {
    "data": {"frames": "frames_dir", "train_fraction": "train_fraction", "blank_eps": "blank_eps",
             "window": "window"},
    "model": {"channels": "channels"},
    "training": {k: k for k in ("individual_epochs", "epochs_per_round", "fl_rounds", "adapfl_rounds",
                                "local_epochs", "divergence_epochs", "batch_size", "learning_rate",
                                "budget_matched", "workers")},
    "output": {"out": "out", "render_count": "render_count", "render_vmax": "render_vmax",
               "hist_bins": "hist_bins"},
    "experiment": {"seed": "seed", "zones": "zones"},
}


def _convert(raw: str, like):
    if isinstance(like, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    if isinstance(like, tuple):
        parts = [p.strip() for p in raw.replace(";", ",").split(",") if p.strip()]
        if like and isinstance(like[0], tuple):
            nums = [float(p) for p in parts]
            return tuple(zip(nums[0::2], nums[1::2]))
        if like and isinstance(like[0], float):
            return tuple(float(p) for p in parts)
        if like and isinstance(like[0], int):
            return tuple(int(p) for p in parts)
        return tuple(parts)
    return raw


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Read an INI-style configuration; unknown keys are configuration errors."""
    cp = configparser.ConfigParser()
    if path is not None:
        if not Path(path).exists():
            raise ConfigError(f"{path}: no such config file")
        try:
            cp.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
    base = ExperimentConfig()
    kw: dict = {}
    synth_kw: dict = {}
    base_kw: dict = {}
    try:
        for section in cp.sections():
            for key, raw in cp.items(section):
                if section == "synthetic":
                    if key not in SyntheticConfig.__dataclass_fields__:
                        raise ConfigError(f"unknown key [synthetic] {key}")
                    synth_kw[key] = _convert(raw, getattr(base.synthetic, key))
                elif section == "baseline":
                    if key not in CotrecParams.__dataclass_fields__:
                        raise ConfigError(f"unknown key [baseline] {key}")
                    base_kw[key] = _convert(raw, getattr(base.baseline, key))
                elif section in _SECTIONS and key in _SECTIONS[section]:
                    name = _SECTIONS[section][key]
                    if name == "zones":
                        kw[name] = tuple(ZoneId.parse(z) for z in raw.split(",") if z.strip())
                    elif name in ("frames_dir", "out"):
                        kw[name] = Path(raw)
                    else:
                        kw[name] = _convert(raw, getattr(base, name))
                else:
                    raise ConfigError(f"unknown key [{section}] {key}")
        for key, value in (overrides or {}).items():
            if value is not None:
                kw[key] = value
        seed = kw.get("seed", base.seed)
        synth_kw.setdefault("seed", seed)
        kw["synthetic"] = SyntheticConfig(**synth_kw)
        kw["baseline"] = CotrecParams(**base_kw)
        return ExperimentConfig(**kw)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


def load_frames(cfg: ExperimentConfig):
    if cfg.frames_dir is not None:
        try:
            frames = read_frames(cfg.frames_dir)
        except (OSError, ValueError) as exc:
            raise DataError(str(exc)) from None
    else:
        frames = generate_synthetic_sequence(cfg.synthetic)
    if not frames:
        raise DataError("no frames available")
    return frames


def build_clients(frames, cfg: ExperimentConfig) -> dict[ZoneId, Client]:
    try:
        datasets = build_client_datasets(frames, cfg.train_fraction, cfg.blank_eps, cfg.window)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    return {z: Client(z, ds) for z, ds in datasets.items()}


def _quadrant_clients(clients, cfg):
    chosen = [clients[z] for z in QUADRANTS]
    for c in chosen:
        if c.n_train == 0:
            raise DataError(f"{c.zone.value} has no training samples after blank filtering")
    return chosen


def initial_weights(cfg: ExperimentConfig) -> ModelWeights:
    return init_model(cfg.seed, cfg.channels)


@dataclass
class TrainedModels:
    """Models produced by one regime, keyed by their output file stem."""
    regime: Regime
    models: dict[str, ModelWeights]
    round_log: list = field(default_factory=list)

    def save(self, directory) -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for stem, w in self.models.items():
            p = directory / f"{stem}.adfl"
            save_weights(w, p)
            paths.append(p)
        if self.round_log:
            p = directory / f"round_log_{self.regime.value}.csv"
            write_round_log(self.round_log, p)
            paths.append(p)
        return paths


def train_regime(clients: dict[ZoneId, Client], cfg: ExperimentConfig, regime: Regime) -> TrainedModels:
    """Train one regime over the quadrant clients.

    FL yields ``global``; adapFL yields ``global`` plus ``personalized_<zone>`` for every
    requested zone (the central zone is personalized from the four-quadrant global model);
    IL yields ``individual_<zone>``.
    """
    init = initial_weights(cfg)
    wanted = [z for z in cfg.zones if clients.get(z) is not None and clients[z].n_train > 0]
    if regime is Regime.INDIVIDUAL:
        sched = cfg.il_schedule()
        return TrainedModels(regime, {f"individual_{z.value}": run_individual(clients[z], init, sched) for z in wanted})
    quads = _quadrant_clients(clients, cfg)
    sched = cfg.fl_schedule() if regime is Regime.FEDERATED else cfg.adapfl_schedule()
    global_w, round_log = run_federated(quads, init, sched, cfg.workers)
    models = {"global": global_w}
    if regime is Regime.ADAPFL:
        tuned = fine_tune(global_w, [clients[z] for z in wanted], sched, cfg.workers)
        models.update({f"personalized_{z.value}": w for z, w in tuned.items()})
    return TrainedModels(regime, models, round_log)


def cotrec_predictions(samples, params: CotrecParams):
    return [center_window(cotrec_predict(s.inputs[-2], s.inputs[-1], params).values, OUTPUT_SIZE) for s in samples]


def model_predictions(weights: ModelWeights, samples):
    x, _ = stack_samples(samples, None)
    return list(predict(weights, x))


def targets_of(samples):
    return [center_window(s.target.values, OUTPUT_SIZE) for s in samples]


def evaluate(weights: ModelWeights | None, samples, zone: ZoneId, label: str, split: str,
             baseline_mse: float | None = None, params: CotrecParams | None = None):
    """EvalReport for a model (or COTREC when ``weights`` is None) plus its predictions."""
    if not samples:
        raise DataError(f"{zone.value} {split}: no samples to evaluate")
    preds = cotrec_predictions(samples, params or CotrecParams()) if weights is None \
        else model_predictions(weights, samples)
    mse, mae = metrics.image_errors(preds, targets_of(samples))
    report = metrics.EvalReport(zone, label, split, mse, mae)
    if baseline_mse is not None and baseline_mse > 0:
        report.skill_score = metrics.skill_score(report.mse, baseline_mse)
    return report, preds


def find_models(directory) -> dict[str, ModelWeights]:
    directory = Path(directory)
    found = {p.stem: load_weights(p) for p in sorted(directory.glob("*.adfl"))}
    if not found:
        raise DataError(f"{directory}: no .adfl weight files")
    return found


def _label_and_zone(stem: str):
    """Map a weight-file stem to (regime label, home zone or None)."""
    if stem == "global":
        return "FL", None
    prefix, _, zone = stem.partition("_")
    label = {"personalized": "adapFL", "individual": "IL"}.get(prefix)
    if label is None or not zone:
        return stem, None
    return label, ZoneId.parse(zone)


def write_pgm(values: np.ndarray, path, vmax: float) -> None:
    """8-bit binary PGM with gray = round(255 * min(v, vmax) / vmax)."""
    gray = np.rint(255.0 * np.clip(values, 0.0, vmax) / vmax).astype(np.uint8)
    h, w = gray.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + gray.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5" or parts[2] != b"255":
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    w, h = (int(t) for t in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def run_eval(models: dict[str, ModelWeights], clients: dict[ZoneId, Client], cfg: ExperimentConfig, out: Path):
    """Per-zone test table (every regime on its home zone) and the central-zone table.

    Writes ``results_zones.csv``, ``results_central.csv``, per-image error histograms
    and PGM renderings; returns (zone_reports, central_reports).
    """
    out = Path(out)
    (out / "histograms").mkdir(parents=True, exist_ok=True)
    (out / "renders").mkdir(parents=True, exist_ok=True)
    zone_reports, central_reports = [], []
    quads = [z for z in cfg.zones if z in QUADRANTS]

    for z in quads:
        test = clients[z].dataset.test
        base, _ = evaluate(None, test, z, "COTREC", "test", params=cfg.baseline)
        zone_reports.append(base)
        for stem, w in models.items():
            label, home = _label_and_zone(stem)
            if home is not None and home != z:
                continue
            rep, preds = evaluate(w, test, z, label, "test", base.mse)
            zone_reports.append(rep)
            for kind, vals in (("mse", rep.per_image_mse), ("mae", rep.per_image_mae)):
                edges, counts = metrics.error_histogram(vals, cfg.hist_bins)
                metrics.write_histogram(edges, counts, out / "histograms" / f"{label}_{z.value}_{kind}.csv")
            _render(test, preds, out / "renders", f"{label}_{z.value}", cfg)

    if ZoneId.CENTRAL in cfg.zones and clients[ZoneId.CENTRAL].dataset.test:
        ds = clients[ZoneId.CENTRAL].dataset
        for split, samples in (("train", ds.train), ("test", ds.test)):
            if not samples:
                continue
            base, _ = evaluate(None, samples, ZoneId.CENTRAL, "COTREC", split, params=cfg.baseline)
            central_reports.append(base)
            for stem, w in models.items():
                label, home = _label_and_zone(stem)
                tag = label if home is None else f"{label} ({home.value})"
                if label == "IL" and home != ZoneId.CENTRAL:
                    continue
                rep, _ = evaluate(w, samples, ZoneId.CENTRAL, tag, split, base.mse)
                central_reports.append(rep)

    metrics.write_eval_reports(zone_reports, out / "results_zones.csv")
    if central_reports:
        metrics.write_eval_reports(central_reports, out / "results_central.csv")
    return zone_reports, central_reports


def _render(samples, preds, directory: Path, tag: str, cfg: ExperimentConfig) -> None:
    for i, (s, p) in enumerate(zip(samples[:cfg.render_count], preds)):
        for k, f in enumerate(s.inputs):
            write_pgm(f.values, directory / f"{tag}_{i:02d}_input{k}.pgm", cfg.render_vmax)
        write_pgm(center_window(s.target.values, OUTPUT_SIZE), directory / f"{tag}_{i:02d}_target.pgm", cfg.render_vmax)
        write_pgm(p, directory / f"{tag}_{i:02d}_prediction.pgm", cfg.render_vmax)


SWEEP_HEADER = ("n_rounds", "local_epochs", "zone", "split", "mse", "mae")


def run_sweep(clients: dict[ZoneId, Client], cfg: ExperimentConfig, out: Path | None = None):
    """Test MSE/MAE for every (N_r, N_L = N_I - N_r * N_FL) with N_r from 0 to N_I / N_FL.

    One federated trajectory is trained and every intermediate global model is fine-tuned;
    N_r = 0 coincides with individual training and the last point with plain FL.
    """
    if cfg.epochs_per_round < 1 or cfg.individual_epochs % cfg.epochs_per_round:
        raise ConfigError("individual_epochs must be a positive multiple of epochs_per_round for a sweep")
    max_rounds = cfg.individual_epochs // cfg.epochs_per_round
    quads = _quadrant_clients(clients, cfg)
    init = initial_weights(cfg)
    trajectory = {0: init}
    sched = Schedule.federated(max_rounds, cfg.epochs_per_round, **cfg._common())
    run_federated(quads, init, sched, cfg.workers, on_round=lambda r, w: trajectory.__setitem__(r, w))
    rows = []
    zones = [z for z in cfg.zones if z in QUADRANTS]
    for n_rounds in range(max_rounds + 1):
        local = cfg.individual_epochs - n_rounds * cfg.epochs_per_round
        tuned_sched = Schedule(Regime.ADAPFL, n_rounds, cfg.epochs_per_round, local, cfg.individual_epochs,
                               **cfg._common())
        tuned = fine_tune(trajectory[n_rounds], [clients[z] for z in zones], tuned_sched, cfg.workers)
        for z in zones:
            rep, _ = evaluate(tuned[z], clients[z].dataset.test, z, "adapFL", "test")
            rows.append((n_rounds, local, z.value, "test", rep.mse, rep.mae))
    if out is not None:
        metrics.write_csv(SWEEP_HEADER, [[a, b, c, d, repr(e), repr(f)] for a, b, c, d, e, f in rows],
                       Path(out) / "sweep.csv")
    return rows


def read_sweep(path) -> list[dict]:
    return [{"n_rounds": int(r["n_rounds"]), "local_epochs": int(r["local_epochs"]), "zone": r["zone"],
             "split": r["split"], "mse": float(r["mse"]), "mae": float(r["mae"])}
            for r in metrics.read_csv(path, SWEEP_HEADER)]


STUDY_HEADER = ("zone", "regime", "n_images", "mse", "mae", "skill_score")


@dataclass
class StudyResult:
    """Test-set reports of COTREC, IL, FL and adapFL on each quadrant, plus the trained models."""
    reports: list
    models: dict

    def mse(self, regime: str, zone: ZoneId) -> float:
        for r in self.reports:
            if r.regime == regime and r.zone == zone:
                return r.mse
        raise KeyError((regime, zone))


def read_study(path) -> list[dict]:
    return [{"zone": ZoneId(r["zone"]), "regime": r["regime"], "n_images": int(r["n_images"]),
             "mse": float(r["mse"]), "mae": float(r["mae"]), "skill_score": metrics.parse_value(r["skill_score"])}
            for r in metrics.read_csv(path, STUDY_HEADER)]


def run_study(clients: dict[ZoneId, Client], cfg: ExperimentConfig, out: Path | None = None) -> StudyResult:
    """All three regimes and the COTREC baseline on the quadrant test sets.

    The adapFL global model is the FL trajectory's state after ``adapfl_rounds`` rounds,
    which is bitwise what a separate adapFL run would produce, since client seeds depend
    only on (seed, zone, round).
    """
    cfg.check_budgets()
    quads = _quadrant_clients(clients, cfg)
    init = initial_weights(cfg)
    il_sched, fl_sched, ad_sched = cfg.il_schedule(), cfg.fl_schedule(), cfg.adapfl_schedule()
    models = {"IL": {c.zone: run_individual(c, init, il_sched) for c in quads}}
    snapshots = {0: init}
    global_w, _ = run_federated(quads, init, fl_sched, cfg.workers,
                                on_round=lambda r, w: snapshots.__setitem__(r, w))
    if cfg.adapfl_rounds not in snapshots:
        snapshots[cfg.adapfl_rounds], _ = run_federated(quads, init, ad_sched, cfg.workers)
    models["FL"] = {c.zone: global_w for c in quads}
    models["adapFL"] = fine_tune(snapshots[cfg.adapfl_rounds], quads, ad_sched, cfg.workers)
    reports = []
    for c in quads:
        test = c.dataset.test
        base, _ = evaluate(None, test, c.zone, "COTREC", "test", params=cfg.baseline)
        reports.append(base)
        for label in ("IL", "FL", "adapFL"):
            reports.append(evaluate(models[label][c.zone], test, c.zone, label, "test", base.mse)[0])
    if out is not None:
        Path(out).mkdir(parents=True, exist_ok=True)
        metrics.write_csv(STUDY_HEADER, [[r.zone.value, r.regime, r.n_images, repr(r.mse), repr(r.mae),
                                       metrics.format_value(r.skill_score)] for r in reports],
                       Path(out) / "study.csv")
    return StudyResult(reports, models)


def run_divergence(clients: dict[ZoneId, Client], cfg: ExperimentConfig, epochs: int | None = None):
    """Train every requested zone from one shared init and return the pairwise divergence matrix."""
    init = initial_weights(cfg)
    sched = Schedule.individual(cfg.divergence_epochs if epochs is None else epochs, **cfg._common())
    models = {}
    for z in cfg.zones:
        if clients[z].n_train == 0:
            raise DataError(f"{z.value} has no training samples")
        models[z] = run_individual(clients[z], init, sched)
    keys, matrix = metrics.divergence_matrix(models)
    return keys, matrix, models


def zone_statistics(clients: dict[ZoneId, Client], cfg: ExperimentConfig, out: Path | None = None):
    """Mean-VIL statistics of the targets per zone and split, and accumulated-VIL histograms."""
    rows = []
    for z in cfg.zones:
        ds = clients[z].dataset
        for split, samples in (("train", ds.train), ("test", ds.test)):
            if not samples:
                continue
            targets = [s.target for s in samples]
            stats = metrics.field_stats([mean_vil(t) for t in targets],
                                        [float(t.values.min()) for t in targets],
                                        [float(t.values.max()) for t in targets])
            rows.append((z, split, stats))
            if out is not None:
                acc = [accumulated_vil(t) for t in targets]
                edges, counts = metrics.error_histogram(acc, cfg.hist_bins)
                (Path(out) / "histograms").mkdir(parents=True, exist_ok=True)
                metrics.write_histogram(edges, counts, Path(out) / "histograms" / f"accumulated_vil_{z.value}_{split}.csv")
    if out is not None:
        metrics.write_stats_reports(rows, Path(out) / "stats.csv")
    return rows


def directory_checksum(directory) -> str:
    """SHA-256 over relative paths and contents of every file below ``directory``."""
    h = hashlib.sha256()
    root = Path(directory)
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(b"\0")
            h.update(p.read_bytes())
    return h.hexdigest()


def config_summary(cfg: ExperimentConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["zones"] = [z.value for z in cfg.zones]
    d["out"] = str(cfg.out)
    d["frames_dir"] = None if cfg.frames_dir is None else str(cfg.frames_dir)
    return d
