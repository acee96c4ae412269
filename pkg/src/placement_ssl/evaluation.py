"""Discriminative metrics, heatmap-based placement selection, and geometric
stand-ins for plausibility and diversity."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.distance import pdist

from .model import Heatmap, predict_record_scores
from .scene import oracle_labels


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @classmethod
    def from_labels(cls, predictions, truths) -> "ConfusionCounts":
        p = np.asarray(predictions).astype(bool).ravel()
        t = np.asarray(truths).astype(bool).ravel()
        if p.shape != t.shape:
            raise ValueError(f"length mismatch: {p.size} predictions vs {t.size} truths")
        return cls(int(np.sum(p & t)), int(np.sum(p & ~t)), int(np.sum(~p & ~t)), int(np.sum(~p & t)))

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def f1(self) -> float:
        denom = 2 * self.tp + self.fp + self.fn
        return 2 * self.tp / denom if self.tp else 0.0

    def balanced_accuracy(self) -> float | None:
        pos, neg = self.tp + self.fn, self.tn + self.fp
        if pos == 0 or neg == 0:
            warnings.warn("balanced accuracy is undefined when one class is absent", RuntimeWarning, 2)
            return None
        return (self.tp / pos + self.tn / neg) / 2


def f1_and_balanced_accuracy(predictions, truths) -> tuple[float, float | None]:
    """F1 of the positive class and balanced accuracy of hard predictions.

    F1 is 0 when nothing is predicted positive; balanced accuracy is ``None``
    (with a warning) when the truths hold a single class.
    """
    if len(predictions) != len(truths):
        raise ValueError(f"length mismatch: {len(predictions)} predictions vs {len(truths)} truths")
    if len(truths) == 0:
        raise ValueError("no placements to evaluate")
    counts = ConfusionCounts.from_labels(predictions, truths)
    return counts.f1(), counts.balanced_accuracy()


def split_scores(stack, records) -> tuple[np.ndarray, np.ndarray]:
    scores = predict_record_scores(stack, records)
    return np.concatenate(scores), np.concatenate([r.labels for r in records])


def evaluate_split(stack, records, gamma: float = 0.5) -> dict | None:
    """``{"f1", "bal"}`` at threshold ``gamma`` (strict), or ``None`` for an empty split."""
    if not records:
        return None
    scores, truths = split_scores(stack, records)
    f1, bal = f1_and_balanced_accuracy(scores > gamma, truths)
    return {"f1": f1, "bal": bal}


def evaluate_splits(stack, split, gamma: float = 0.5) -> dict:
    """Metrics on the seen and novel test splits, after auditing their categories."""
    split.audit()
    seen = evaluate_split(stack, split.test_seen, gamma)
    novel = evaluate_split(stack, split.test_novel, gamma)
    return {
        "f1_seen": seen and seen["f1"], "bal_seen": seen and seen["bal"],
        "f1_novel": novel and novel["f1"], "bal_novel": novel and novel["bal"],
    }


def f1_optimal_threshold(scores, truths) -> float:
    """Threshold maximizing F1 on a validation slice (midpoint between adjacent scores)."""
    s = np.asarray(scores, dtype=np.float64)
    t = np.asarray(truths).astype(bool)
    order = np.argsort(-s, kind="stable")
    s, t = s[order], t[order]
    tp = np.cumsum(t)
    fp = np.cumsum(~t)
    fn = t.sum() - tp
    f1 = 2 * tp / np.maximum(2 * tp + fp + fn, 1)
    # a cut after position i is only realizable where the score strictly drops
    drops = np.append(s[:-1] > s[1:], True)
    f1 = np.where(drops, f1, -1.0)
    i = int(np.argmax(f1))
    return float((s[i] + s[i + 1]) / 2) if i + 1 < len(s) else float(np.nextafter(s[i], -np.inf))


def top_k_sample(hm: Heatmap, k_pool: int = 50, k_out: int = 5, rng: np.random.Generator | None = None):
    """Pick ``k_out`` placements uniformly from the ``k_pool`` best valid heatmap cells.

    Ties are broken by row-major cell index. Returns ``(boxes, cells)`` where
    ``cells`` holds the ``(scale, row, col)`` of each pick.
    """
    rng = np.random.default_rng() if rng is None else rng
    scores = np.where(hm.valid, hm.scores, -np.inf).ravel()
    n_valid = int(hm.valid.sum())
    if n_valid < k_pool:
        warnings.warn(f"only {n_valid} valid cells; shrinking the pool from {k_pool}", RuntimeWarning, 2)
        k_pool = n_valid
    pool = np.argsort(-scores, kind="stable")[:k_pool]
    k_out = min(k_out, k_pool)
    picks = pool[rng.choice(k_pool, size=k_out, replace=False)]
    cells = np.stack(np.unravel_index(picks, hm.scores.shape), axis=1)
    boxes = np.array([hm.placement(*c) for c in cells]).reshape(-1, 4)
    return boxes, cells


def oracle_plausibility_accuracy(scenes, sampled_placements) -> float:
    """Share of sampled placements the oracle labels rational."""
    labels = [oracle_labels(s, np.asarray(b).reshape(-1, 4)) for s, b in zip(scenes, sampled_placements)]
    labels = np.concatenate(labels) if labels else np.zeros(0)
    if labels.size == 0:
        raise ValueError("no sampled placements to score")
    return float(labels.mean())


def placement_diversity(sampled_placements) -> float | None:
    """Mean pairwise distance of ``(x, y, w, h)`` per scene, averaged over scenes.

    Scenes with fewer than two placements are skipped; ``None`` if none remain.
    """
    per_scene = []
    for boxes in sampled_placements:
        b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        if len(b) >= 2:
            per_scene.append(pdist(b).mean())
    return float(np.mean(per_scene)) if per_scene else None


def export_heatmap(hm: Heatmap, out_dir, stem: str) -> list[Path]:
    """One 8-bit grayscale PNG per scale plus a CSV of raw scores."""
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for s in range(hm.scores.shape[0]):
        img = np.clip(np.round(hm.scores[s] * 255), 0, 255).astype(np.uint8)
        path = out_dir / f"{stem}_scale{s}.png"
        Image.fromarray(img, mode="L").save(path)
        written.append(path)
    path = out_dir / f"{stem}.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scale", "row", "col", "score", "valid"])
        for (s, r, c), v in np.ndenumerate(hm.scores):
            w.writerow([s, r, c, repr(float(v)), int(hm.valid[s, r, c])])
    written.append(path)
    return written
