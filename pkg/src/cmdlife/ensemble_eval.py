"""Weighted checkpoint ensemble, pooled two-target metrics, permutation importance."""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .context_features import FEATURE_NAMES
from .errors import BadSlot, IncompleteEnsemble, NonFinite, R2Undefined, ValidationError
from .neural.model import ModelConfig
from .neural.train import CATEGORIES, Checkpoint, load_checkpoint, predict_standardized

DEFAULT_WEIGHTS = {
    "offset": {"offset": 0.5, "overall": 0.3, "duration": 0.1},
    "duration": {"duration": 0.5, "overall": 0.3, "offset": 0.1},
}
TARGETS = ("offset", "duration")
PRED_HEADER = ["callsign", "onset_t", "offset_hat", "duration_hat", "offset_true", "duration_true"]


# ----------------------------------------------------------------------------
# members


class CheckpointModel:
    """Inference wrapper; predictions come back in seconds."""

    def __init__(self, ck: Checkpoint):
        self.ck = ck
        self.cfg: ModelConfig = ck.model_config
        self.params = ck.params
        self.t_mean = np.asarray(ck.norm["target_mean"])
        self.t_std = np.asarray(ck.norm["target_std"])

    @classmethod
    def load(cls, path) -> "CheckpointModel":
        return cls(load_checkpoint(path))

    def predict(self, arrays: Mapping[str, np.ndarray]) -> np.ndarray:
        return predict_standardized(self.params, self.cfg, arrays) * self.t_std + self.t_mean


class MeanBaseline:
    """Predicts the training-set mean of each target."""

    def __init__(self, means):
        self.means = np.asarray(means, dtype=np.float64)

    def predict(self, arrays: Mapping[str, np.ndarray]) -> np.ndarray:
        return np.tile(self.means, (len(arrays["struct"]), 1))


@dataclass
class EnsembleSpec:
    members: list  # (model with .predict, category)
    weights: dict = field(default_factory=lambda: {t: dict(w) for t, w in DEFAULT_WEIGHTS.items()})

    def __post_init__(self):
        for t in TARGETS:
            w = self.weights.get(t)
            if w is None or set(w) != set(CATEGORIES):
                raise ValidationError(f"weights for target {t!r} must cover {CATEGORIES}")
            if any(v < 0 for v in w.values()) or sum(w.values()) <= 0:
                raise ValidationError(f"weights for target {t!r} must be non-negative with positive sum")

    def normalized(self, target: str) -> dict[str, float]:
        w = self.weights[target]
        s = sum(w.values())
        return {c: w[c] / s for c in CATEGORIES}

    def by_category(self) -> dict[str, list]:
        out: dict[str, list] = {c: [] for c in CATEGORIES}
        for model, cat in self.members:
            if cat not in out:
                raise ValidationError(f"unknown member category {cat!r}")
            out[cat].append(model)
        return out


def _anchored_mean(preds: Sequence[np.ndarray]) -> np.ndarray:
    # mean written as first + mean of differences, so equal inputs come back bit-exact
    first = preds[0]
    return first + sum((p - first for p in preds[1:]), np.zeros_like(first)) / len(preds)


def combine(category_preds: Mapping[str, np.ndarray], spec: EnsembleSpec) -> np.ndarray:
    """Per-target weighted combination of per-category (N, 2) predictions.

    Evaluated as anchor + sum_c w_c (p_c - anchor) with the heaviest category
    as anchor: algebraically the plain weighted mean, but exact when all
    categories agree or when one category carries all the weight.
    """
    n = next(iter(category_preds.values())).shape[0]
    out = np.empty((n, 2))
    for col, target in enumerate(TARGETS):
        w = spec.normalized(target)
        anchor = max(CATEGORIES, key=lambda c: (w[c], -CATEGORIES.index(c)))
        base = category_preds[anchor][:, col]
        acc = np.zeros(n)
        for c in CATEGORIES:
            if c != anchor:
                acc += w[c] * (category_preds[c][:, col] - base)
        out[:, col] = base + acc
    return out


def weighted_predict(spec: EnsembleSpec, arrays: Mapping[str, np.ndarray], threads: int = 1) -> np.ndarray:
    """(N, 2) ensemble predictions in seconds."""
    cats = spec.by_category()
    empty = [c for c in CATEGORIES if not cats[c]]
    if empty:
        raise IncompleteEnsemble(f"no members for categories {empty}")
    models = [m for c in CATEGORIES for m in cats[c]]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            preds = list(pool.map(lambda m: np.asarray(m.predict(arrays), dtype=np.float64), models))
    else:
        preds = [np.asarray(m.predict(arrays), dtype=np.float64) for m in models]
    per_cat, k = {}, 0
    for c in CATEGORIES:
        per_cat[c] = _anchored_mean(preds[k:k + len(cats[c])])
        k += len(cats[c])
    return combine(per_cat, spec)


def ensemble_from_checkpoints(checkpoints: Sequence[Checkpoint], top_k: int = 2, weights: dict | None = None) -> EnsembleSpec:
    """Members = per loss variant, the top_k most recent improvers of each category."""
    by_variant: dict[str, list[Checkpoint]] = {}
    for ck in checkpoints:
        by_variant.setdefault(ck.train_config.loss_variant, []).append(ck)
    members = []
    for variant in sorted(by_variant):
        cks = sorted(by_variant[variant], key=lambda c: -c.epoch)
        for cat in CATEGORIES:
            for ck in [c for c in cks if cat in c.tags][:top_k]:
                members.append((CheckpointModel(ck), cat))
    return EnsembleSpec(members) if weights is None else EnsembleSpec(members, weights)


def ensemble_from_runs(runs: Mapping[str, object], top_k: int = 2, weights: dict | None = None) -> EnsembleSpec:
    return ensemble_from_checkpoints([ck for v in sorted(runs) for ck in runs[v].checkpoints], top_k, weights)


def load_checkpoint_dir(path) -> list[Checkpoint]:
    names = sorted(n for n in os.listdir(path) if n.startswith("ckpt_") and n.endswith(".bin"))
    return [load_checkpoint(os.path.join(path, n)) for n in names]


# ----------------------------------------------------------------------------
# metrics


@dataclass
class EvaluationSet:
    y_true: np.ndarray  # (N, 2): offset, duration
    y_pred: np.ndarray

    def __post_init__(self):
        self.y_true = np.asarray(self.y_true, dtype=np.float64).reshape(-1, 2)
        self.y_pred = np.asarray(self.y_pred, dtype=np.float64).reshape(-1, 2)
        if self.y_true.shape != self.y_pred.shape or len(self.y_true) < 1:
            raise ValidationError("evaluation set needs matching (N, 2) arrays with N >= 1")
        if not (np.all(np.isfinite(self.y_true)) and np.all(np.isfinite(self.y_pred))):
            raise NonFinite("evaluation values must be finite")

    @classmethod
    def from_lists(cls, y1, yhat1, y2, yhat2) -> "EvaluationSet":
        return cls(np.column_stack([y1, y2]), np.column_stack([yhat1, yhat2]))


@dataclass
class MetricsReport:
    mae_overall: float
    rmse_overall: float
    r2_overall: float | None
    mae_offset: float
    mae_duration: float
    rmse_offset: float
    rmse_duration: float
    r2_offset: float | None
    r2_duration: float | None
    n: int

    def to_dict(self) -> dict:
        return asdict(self)


def _r2(sse: float, sst: float) -> float | None:
    return None if sst == 0.0 else 1.0 - sse / sst


def compute_metrics(ev: EvaluationSet, require_r2: bool = False) -> MetricsReport:
    """Pooled MAE/RMSE over all 2N errors, pooled R^2 with per-target centring.

    R^2 values whose denominator vanishes (or N < 2) are reported as None;
    with require_r2 set, an undefined pooled R^2 raises R2Undefined instead.
    """
    y, yh = ev.y_true, ev.y_pred
    n = len(y)
    err = yh - y
    sq = err * err
    cen = y - y.mean(axis=0)
    sst_t = (cen * cen).sum(axis=0) if n >= 2 else np.zeros(2)
    sse_t = sq.sum(axis=0)
    r2_all = _r2(float(sse_t.sum()), float(sst_t.sum()))
    if r2_all is None and require_r2:
        raise R2Undefined("pooled target variance is zero")
    return MetricsReport(
        mae_overall=float(np.abs(err).sum() / (2 * n)),
        rmse_overall=math.sqrt(float(sse_t.sum()) / (2 * n)),
        r2_overall=r2_all,
        mae_offset=float(np.abs(err[:, 0]).mean()),
        mae_duration=float(np.abs(err[:, 1]).mean()),
        rmse_offset=math.sqrt(float(sse_t[0]) / n),
        rmse_duration=math.sqrt(float(sse_t[1]) / n),
        r2_offset=_r2(float(sse_t[0]), float(sst_t[0])),
        r2_duration=_r2(float(sse_t[1]), float(sst_t[1])),
        n=n,
    )


# ----------------------------------------------------------------------------
# permutation importance


def permutation_importance(
    predict: Callable[[Mapping[str, np.ndarray]], np.ndarray],
    arrays: Mapping[str, np.ndarray],
    y_true: np.ndarray,
    slot: str,
    seed: int = 0,
    feature_names: Sequence[str] = FEATURE_NAMES,
) -> float:
    """Increase of MAE_overall when one structured slot is shuffled across the split."""
    if slot not in feature_names:
        raise BadSlot(f"unknown feature slot {slot!r}")
    j = list(feature_names).index(slot)
    base = compute_metrics(EvaluationSet(y_true, predict(arrays))).mae_overall
    shuffled = dict(arrays)
    s = np.array(arrays["struct"], copy=True)
    s[:, j] = s[np.random.default_rng(seed).permutation(len(s)), j]
    shuffled["struct"] = s
    return compute_metrics(EvaluationSet(y_true, predict(shuffled))).mae_overall - base


def importance_ranking(predict, arrays, y_true, seed: int = 0, feature_names: Sequence[str] = FEATURE_NAMES):
    """[(slot, delta)] sorted by decreasing delta."""
    out = [(name, permutation_importance(predict, arrays, y_true, name, seed, feature_names)) for name in feature_names]
    return sorted(out, key=lambda kv: (-kv[1], kv[0]))


# ----------------------------------------------------------------------------
# IO


def write_predictions_csv(path, callsigns, onsets, y_pred, y_true) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PRED_HEADER)
        for cs, t, p, y in zip(callsigns, onsets, y_pred, y_true):
            w.writerow([cs, repr(float(t)), repr(float(p[0])), repr(float(p[1])), repr(float(y[0])), repr(float(y[1]))])


def read_predictions_csv(path) -> dict:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != PRED_HEADER:
            raise ValidationError(f"{path}: expected header {','.join(PRED_HEADER)}")
        rows = list(reader)
    return {
        "callsign": [r["callsign"] for r in rows],
        "onset_t": np.array([float(r["onset_t"]) for r in rows]),
        "y_pred": np.array([[float(r["offset_hat"]), float(r["duration_hat"])] for r in rows]).reshape(-1, 2),
        "y_true": np.array([[float(r["offset_true"]), float(r["duration_true"])] for r in rows]).reshape(-1, 2),
    }


def read_truth_labels(path) -> dict[tuple[str, float], tuple[float, float]]:
    """Labels keyed by (callsign, onset_t) from a predictions-format CSV or a truth JSON-lines file."""
    if str(path).endswith(".jsonl"):
        out = {}
        with open(path) as fh:
            for line in fh:
                if not line.strip():
                    continue
                r = json.loads(line)
                if r.get("kind", "maneuver") != "maneuver":
                    continue
                try:
                    out[(r["callsign"], float(r["onset_t"]))] = (float(r["time_offset_s"]), float(r["duration_s"]))
                except KeyError as exc:
                    raise ValidationError(f"{path}: label row lacks {exc.args[0]!r}") from exc
        return out
    d = read_predictions_csv(path)
    return {(cs, float(t)): tuple(y) for cs, t, y in zip(d["callsign"], d["onset_t"], d["y_true"])}


def match_labels(labels: Mapping[tuple[str, float], tuple[float, float]], callsigns, onsets,
                 tolerance_s: float = 10.0) -> np.ndarray:
    """(N, 2) labels for each (callsign, onset): exact key, else nearest onset of that callsign within tolerance."""
    by_cs: dict[str, list[float]] = {}
    for cs, t in labels:
        by_cs.setdefault(cs, []).append(t)
    out = []
    for cs, t in zip(callsigns, onsets):
        t = float(t)
        if (cs, t) in labels:
            out.append(labels[(cs, t)])
            continue
        near = [u for u in by_cs.get(cs, []) if abs(u - t) <= tolerance_s]
        if not near:
            raise ValidationError(f"no truth label for {cs} at {t}")
        out.append(labels[(cs, min(near, key=lambda u: (abs(u - t), u)))])
    return np.array(out, dtype=np.float64).reshape(-1, 2)


def metrics_json(report: MetricsReport) -> str:
    return json.dumps(report.to_dict(), sort_keys=True, indent=1)
