"""Labeled/unlabeled pair records, dataset splits, pseudo-labels and JSON-lines I/O."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .scene import (
    Scene,
    SceneSpec,
    generate_scene,
    oracle_labels,
    sample_placements,
    scene_from_record,
    scene_to_record,
)
from .streams import rng_stream

FORMAT_NAME = "placement-ssl/split"
FORMAT_VERSION = 1
SECTIONS = ("train_S", "train_T", "test_seen", "test_novel")
# scene index namespaces keep the four sections on disjoint backgrounds
_INDEX_BASE = {"train_S": 0, "train_T": 10_000_000, "test_seen": 20_000_000, "test_novel": 30_000_000,
               "val": 40_000_000}


class DatasetFormatError(ValueError):
    """A dataset file could not be parsed; ``line`` is 1-based."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True, eq=False)
class PairRecord:
    pair_id: int
    scene: Scene
    placements: np.ndarray  # (K, 4) rows of x, y, w, h
    labels: np.ndarray  # (K,) in [0, 1]; NaN marks a pseudo-label not yet initialized
    domain: str  # "S" (labeled) or "T" (unlabeled)

    def __post_init__(self):
        p = np.array(self.placements, dtype=np.float64).reshape(-1, 4)
        y = np.array(self.labels, dtype=np.float64).reshape(-1)
        if len(p) < 1 or len(p) != len(y):
            raise ValueError(f"pair {self.pair_id}: need K >= 1 placements with one label each")
        if self.domain not in ("S", "T"):
            raise ValueError(f"pair {self.pair_id}: domain must be 'S' or 'T', got {self.domain!r}")
        known = y[~np.isnan(y)]
        if np.any((known < 0) | (known > 1)):
            raise ValueError(f"pair {self.pair_id}: labels must lie in [0, 1]")
        if self.domain == "S" and not np.all(np.isin(y, (0.0, 1.0))):
            raise ValueError(f"pair {self.pair_id}: labeled pairs need hard 0/1 labels")
        p.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "placements", p)
        object.__setattr__(self, "labels", y)

    @property
    def category(self) -> int:
        return self.scene.foreground.category

    @property
    def K(self) -> int:
        return len(self.labels)

    @property
    def initialized(self) -> bool:
        return not np.isnan(self.labels).any()

    def with_labels(self, labels) -> "PairRecord":
        return replace(self, labels=labels)

    def __eq__(self, other):
        if not isinstance(other, PairRecord):
            return NotImplemented
        return (
            self.pair_id == other.pair_id
            and self.domain == other.domain
            and self.scene == other.scene
            and np.array_equal(self.placements, other.placements)
            and np.array_equal(self.labels, other.labels, equal_nan=True)
        )

    __hash__ = None


@dataclass
class DatasetSplit:
    train_S: list = field(default_factory=list)
    train_T: list = field(default_factory=list)
    test_seen: list = field(default_factory=list)
    test_novel: list = field(default_factory=list)
    spec: SceneSpec | None = None
    novel_categories: tuple = ()

    def sections(self):
        return {name: getattr(self, name) for name in SECTIONS}

    def audit(self) -> None:
        """Raise if a labeled or seen-test pair belongs to a held-out category."""
        novel = set(self.novel_categories)
        for name in ("train_S", "test_seen"):
            leaked = [r.pair_id for r in getattr(self, name) if r.category in novel]
            if leaked:
                raise ValueError(f"{name} holds novel-category pairs {leaked[:5]}")
        stray = [r.pair_id for r in self.test_novel if r.category not in novel]
        if stray:
            raise ValueError(f"test_novel holds seen-category pairs {stray[:5]}")


def _draw_records(spec: SceneSpec, section: str, n: int, K: int, seed: int, domain: str,
                  keep, with_labels: bool) -> list[PairRecord]:
    rng = rng_stream(seed, "data", _INDEX_BASE[section])
    records = []
    index = _INDEX_BASE[section]
    while len(records) < n:
        scene = generate_scene(spec, index)
        index += 1
        if not keep(scene.foreground.category):
            continue
        boxes = sample_placements(scene, K, rng, spec.sampling_range)
        labels = oracle_labels(scene, boxes).astype(np.float64) if with_labels else np.full(K, np.nan)
        records.append(PairRecord(len(records), scene, boxes, labels, domain))
    return records


def build_splits(spec: SceneSpec, n_s: int, n_t: int, n_test: int, novel_category_ids=(),
                 seed: int = 0, k_s: int = 8, k_t: int = 30, k_test: int = 30) -> DatasetSplit:
    """Labeled pool from seen categories, unlabeled pool from all, and two test splits.

    Labeled and test placements carry oracle labels; unlabeled placements carry
    NaN until :func:`init_pseudo_labels` runs.
    """
    novel = tuple(sorted({int(c) for c in novel_category_ids}))
    if any(c < 0 or c >= spec.num_categories for c in novel):
        raise ValueError(f"novel category ids {novel} outside 0..{spec.num_categories - 1}")
    if len(novel) >= spec.num_categories:
        raise ValueError("novel categories cover every category; nothing left to label")
    if n_s < 1 or n_t < 1:
        raise ValueError("n_s and n_t must be at least 1")
    if min(k_s, k_t, k_test) < 1:
        raise ValueError("placement counts must be at least 1")

    def seen(c):
        return c not in novel

    def held_out(c):
        return c in novel

    split = DatasetSplit(
        train_S=_draw_records(spec, "train_S", n_s, k_s, seed, "S", seen, True),
        train_T=_draw_records(spec, "train_T", n_t, k_t, seed, "T", lambda c: True, False),
        test_seen=_draw_records(spec, "test_seen", n_test, k_test, seed, "S", seen, True),
        test_novel=_draw_records(spec, "test_novel", n_test if novel else 0, k_test, seed, "S",
                                 held_out, True),
        spec=spec,
        novel_categories=novel,
    )
    split.audit()
    return split


def build_validation(spec: SceneSpec, n_val: int, novel_category_ids=(), seed: int = 0,
                     k: int = 30) -> list[PairRecord]:
    """Held-out labeled pairs from seen categories, used only to pick a threshold."""
    novel = set(novel_category_ids)
    return _draw_records(spec, "val", n_val, k, seed, "S", lambda c: c not in novel, True)


def threshold_labels(scores, gamma: float) -> np.ndarray:
    """Hard pseudo-labels ``1[p > gamma]`` (strict)."""
    return (np.asarray(scores, dtype=np.float64) > gamma).astype(np.float64)


def binarize(labels) -> np.ndarray:
    """Soft labels to hard ones; ``0.5`` and above count as positive."""
    return (np.asarray(labels, dtype=np.float64) >= 0.5).astype(np.int64)


def similarity_label(y_i, y_j) -> int:
    """1 when two placements share a rationality label (after binarizing soft labels)."""
    for y in (y_i, y_j):
        if not 0.0 <= float(y) <= 1.0:
            raise ValueError(f"label {y} outside [0, 1]")
    return int(binarize(y_i) == binarize(y_j))


def init_pseudo_labels(stack, T: list[PairRecord], gamma: float) -> list[PairRecord]:
    """Threshold the scores of a trained model into hard pseudo-labels for ``T``."""
    from .model import predict_record_scores

    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must lie in (0, 1), got {gamma}")
    if stack is None or not getattr(stack, "pretrained", False):
        raise RuntimeError("init_pseudo_labels needs a trained model; run the supervised phase first")
    scores = predict_record_scores(stack, T)
    return [r.with_labels(threshold_labels(s, gamma)) for r, s in zip(T, scores)]


# ---------------------------------------------------------------------------
# JSON-lines persistence
# ---------------------------------------------------------------------------

def record_to_json(record: PairRecord, section: str) -> dict:
    d = {
        "pair_id": int(record.pair_id),
        "domain": record.domain,
        "section": section,
        "category": int(record.category),
        "placements": record.placements.tolist(),
        "labels": [None if np.isnan(v) else float(v) for v in record.labels],
    }
    d.update(scene_to_record(record.scene))
    return d


def record_from_json(d: dict) -> PairRecord:
    scene = scene_from_record(d)
    if int(d["category"]) != scene.foreground.category:
        raise ValueError("category field disagrees with the foreground record")
    labels = np.array([np.nan if v is None else float(v) for v in d["labels"]], dtype=np.float64)
    return PairRecord(int(d["pair_id"]), scene, np.array(d["placements"], dtype=np.float64), labels,
                      d["domain"])


def save_split(split: DatasetSplit, path, extra: dict | None = None) -> None:
    """Write a header line followed by one record per line; written atomically."""
    path = Path(path)
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "spec": split.spec.to_dict() if split.spec is not None else None,
        "novel_categories": list(split.novel_categories),
        "counts": {name: len(recs) for name, recs in split.sections().items()},
    }
    if extra:
        header.update(extra)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for name, recs in split.sections().items():
            for r in recs:
                fh.write(json.dumps(record_to_json(r, name), sort_keys=True) + "\n")
    os.replace(tmp, path)


def load_split(path) -> DatasetSplit:
    """Inverse of :func:`save_split`; any defect raises :class:`DatasetFormatError`."""
    sections = {name: [] for name in SECTIONS}
    header = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.endswith("\n"):
                raise DatasetFormatError("unterminated final line (truncated file?)", lineno)
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"invalid JSON: {exc.msg}", lineno) from None
            if header is None:
                if d.get("format") != FORMAT_NAME:
                    raise DatasetFormatError("missing dataset header", lineno)
                header = d
                continue
            section = d.get("section")
            if section not in sections:
                raise DatasetFormatError(f"unknown section {section!r}", lineno)
            try:
                sections[section].append(record_from_json(d))
            except (KeyError, TypeError, ValueError) as exc:
                raise DatasetFormatError(f"bad record: {exc}", lineno) from None
    if header is None:
        raise DatasetFormatError("empty dataset file", 1)
    for name, expected in header["counts"].items():
        if len(sections[name]) != expected:
            raise DatasetFormatError(
                f"section {name} has {len(sections[name])} records, header promises {expected} "
                f"(truncated file?)")
    spec = SceneSpec.from_dict(header["spec"]) if header.get("spec") else None
    return DatasetSplit(spec=spec, novel_categories=tuple(header["novel_categories"]), **sections)


def merge_splits(*splits: DatasetSplit) -> DatasetSplit:
    """Concatenate sections (used to join separately stored train and test files)."""
    out = DatasetSplit(spec=splits[0].spec, novel_categories=splits[0].novel_categories)
    for s in splits:
        for name in SECTIONS:
            getattr(out, name).extend(getattr(s, name))
    return out
