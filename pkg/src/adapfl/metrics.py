"""Forecast error summaries, skill score, weight divergence and distribution statistics."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .grid import VilField, ZoneId
from .nn import ModelWeights

UNDEFINED = float("nan")


def _as_array(x) -> np.ndarray:
    return x.values if isinstance(x, VilField) else np.asarray(x)


def image_errors(predictions, targets) -> tuple[np.ndarray, np.ndarray]:
    """Per-image mean squared and mean absolute error (float64)."""
    predictions, targets = list(predictions), list(targets)
    if len(predictions) != len(targets):
        raise ValueError(f"{len(predictions)} predictions for {len(targets)} targets")
    mse = np.empty(len(predictions))
    mae = np.empty(len(predictions))
    for i, (p, t) in enumerate(zip(predictions, targets)):
        p = _as_array(p).astype(np.float64)
        t = _as_array(t).astype(np.float64)
        if p.shape != t.shape:
            raise ValueError(f"image {i}: prediction {p.shape} vs target {t.shape}")
        d = p - t
        mse[i] = np.mean(d * d)
        mae[i] = np.mean(np.abs(d))
    return mse, mae


def aggregate_errors(per_image) -> float:
    """Mean of per-image errors; an empty list is an error rather than zero."""
    per_image = np.asarray(per_image, dtype=np.float64)
    if per_image.size == 0:
        raise ValueError("no per-image errors to aggregate")
    return float(per_image.mean())


def rmse(mse: float) -> float:
    if mse < 0:
        raise ValueError("mse must be non-negative")
    return math.sqrt(mse)


def skill_score(mse_model: float, mse_baseline: float) -> float:
    """1 - MSE_model / MSE_baseline; positive when the model beats the baseline."""
    if mse_baseline <= 0:
        raise ValueError("baseline MSE must be positive")
    return 1.0 - mse_model / mse_baseline


def _layer_norms(weights: ModelWeights) -> np.ndarray:
    return np.array([
        math.sqrt(float(np.sum(l.kernel.astype(np.float64) ** 2)) + float(np.sum(l.bias.astype(np.float64) ** 2)))
        for l in weights.layers
    ])


def nested_weight_norm(weights: ModelWeights) -> float:
    """Euclidean norm of the vector of per-layer Frobenius norms."""
    return float(np.linalg.norm(_layer_norms(weights)))


def _difference(a: ModelWeights, b: ModelWeights) -> ModelWeights:
    if not a.same_architecture(b):
        raise ValueError("models differ in architecture")
    return ModelWeights.from_arrays(x.astype(np.float64) - y.astype(np.float64)
                                    for x, y in zip(a.arrays(), b.arrays()))


def weight_divergence(w_i: ModelWeights, w_j: ModelWeights) -> float:
    """||w_i - w_j|| / (0.5 * (||w_i|| + ||w_j||)), all norms nested per layer."""
    diff = _difference(w_i, w_j)
    denom = 0.5 * (nested_weight_norm(w_i) + nested_weight_norm(w_j))
    if denom == 0:
        raise ValueError("divergence undefined for two all-zero models")
    return nested_weight_norm(diff) / denom


def divergence_matrix(weight_sets: dict) -> tuple[list, np.ndarray]:
    """Pairwise divergences in the mapping's key order, plus that key list."""
    keys = list(weight_sets)
    n = len(keys)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = weight_divergence(weight_sets[keys[i]], weight_sets[keys[j]])
    return keys, out


@dataclass(frozen=True)
class StatsReport:
    min: float
    max: float
    mean: float
    median: float
    variance: float
    skewness: float
    kurtosis: float  # m4 / m2^2
    excess_kurtosis: float  # m4 / m2^2 - 3

    FIELDS = ("min", "max", "mean", "median", "variance", "skewness", "kurtosis", "excess_kurtosis")


def field_stats(per_image_means, per_image_min=None, per_image_max=None) -> StatsReport:
    """Population moments of per-image mean VIL.

    Min and max default to the extremes of the means; when per-image minima and
    maxima are given, their averages are reported instead. Skewness and kurtosis
    are NaN when the variance is zero.
    """
    x = np.asarray(per_image_means, dtype=np.float64)
    if x.size == 0:
        raise ValueError("no values")
    mean = float(x.mean())
    d = x - mean
    m2 = float(np.mean(d ** 2))
    m3 = float(np.mean(d ** 3))
    m4 = float(np.mean(d ** 4))
    if m2 > 0:
        skew = m3 / m2 ** 1.5
        kurt = m4 / m2 ** 2
        excess = kurt - 3.0
    else:
        skew = kurt = excess = UNDEFINED
    lo = float(np.mean(per_image_min)) if per_image_min is not None else float(x.min())
    hi = float(np.mean(per_image_max)) if per_image_max is not None else float(x.max())
    return StatsReport(lo, hi, mean, float(np.median(x)), m2, skew, kurt, excess)


def error_histogram(values, n_bins: int = 20, range: tuple[float, float] | None = None):
    """Counts over ``n_bins`` equal bins; bins are right-open except the last, which is closed."""
    values = np.asarray(values, dtype=np.float64)
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    if range is None:
        lo, hi = (float(values.min()), float(values.max())) if values.size else (0.0, 1.0)
        if hi == lo:
            hi = lo + 1.0
        range = (lo, hi)
    counts, edges = np.histogram(values, bins=n_bins, range=range)
    return edges, counts


@dataclass
class EvalReport:
    zone: ZoneId
    regime: str
    split: str
    per_image_mse: np.ndarray = field(repr=False)
    per_image_mae: np.ndarray = field(repr=False)
    skill_score: float = UNDEFINED

    @property
    def mse(self) -> float:
        return aggregate_errors(self.per_image_mse)

    @property
    def mae(self) -> float:
        return aggregate_errors(self.per_image_mae)

    @property
    def rmse(self) -> float:
        return rmse(self.mse)

    @property
    def n_images(self) -> int:
        return len(self.per_image_mse)


EVAL_HEADER = ("zone", "regime", "split", "n_images", "mse", "mae", "rmse", "skill_score")
STATS_HEADER = ("zone", "split") + StatsReport.FIELDS


def format_value(x: float) -> str:
    return "undefined" if isinstance(x, float) and math.isnan(x) else repr(float(x))


def parse_value(s: str) -> float:
    return UNDEFINED if s == "undefined" else float(s)


def write_csv(header, rows, path=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    return text


def read_csv(path, header) -> list[dict]:
    """Rows of a CSV written by :func:`write_csv`, after checking its header."""
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != tuple(header):
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        return list(reader)


def write_eval_reports(reports, path=None) -> str:
    return write_csv(EVAL_HEADER, [
        [r.zone.value, r.regime, r.split, r.n_images,
         format_value(r.mse), format_value(r.mae), format_value(r.rmse), format_value(r.skill_score)]
        for r in reports
    ], path)


def read_eval_rows(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != EVAL_HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        rows = []
        for r in reader:
            row = {"zone": ZoneId(r["zone"]), "regime": r["regime"], "split": r["split"],
                   "n_images": int(r["n_images"])}
            row.update({k: parse_value(r[k]) for k in ("mse", "mae", "rmse", "skill_score")})
            rows.append(row)
        return rows


def write_stats_reports(rows, path=None) -> str:
    """``rows`` is an iterable of (zone, split, StatsReport)."""
    return write_csv(STATS_HEADER, [
        [zone.value, split] + [format_value(getattr(s, f)) for f in StatsReport.FIELDS] for zone, split, s in rows
    ], path)


def read_stats_reports(path) -> list[tuple[ZoneId, str, StatsReport]]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != STATS_HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        return [(ZoneId(r["zone"]), r["split"], StatsReport(*(parse_value(r[f]) for f in StatsReport.FIELDS)))
                for r in reader]


def write_histogram(edges, counts, path=None) -> str:
    return write_csv(("bin_left_edge", "count"), [[repr(float(e)), int(c)] for e, c in zip(edges[:-1], counts)], path)


def read_histogram(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != ("bin_left_edge", "count"):
            raise ValueError(f"{path}: unexpected histogram header")
        rows = list(reader)
    return np.array([float(r["bin_left_edge"]) for r in rows]), np.array([int(r["count"]) for r in rows])


def write_matrix(keys, matrix, path=None) -> str:
    labels = [k.value if isinstance(k, ZoneId) else str(k) for k in keys]
    return write_csv(["zone"] + labels, [[lab] + [repr(float(x)) for x in row] for lab, row in zip(labels, matrix)], path)


def read_matrix(path) -> tuple[list[str], np.ndarray]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    labels = rows[0][1:]
    if [r[0] for r in rows[1:]] != labels:
        raise ValueError(f"{path}: row and column labels differ")
    return labels, np.array([[float(x) for x in r[1:]] for r in rows[1:]])
