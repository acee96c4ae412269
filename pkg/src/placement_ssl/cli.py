"""``placement-ssl`` command line: dataset generation, training, ablation, evaluation, heatmaps.

Everything a command writes lives under ``output_dir``::

    datasets/     train.jsonl, test.jsonl, val.jsonl, manifest.json
    checkpoints/  pretrain cache, per-run phase checkpoints and final weights
    metrics/      per-run histories, ablation table, evaluation reports
    heatmaps/     PNG and CSV exports

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, load_config
from .data import DatasetFormatError, DatasetSplit, build_splits, build_validation, load_split, merge_splits, save_split
from .evaluation import (
    evaluate_splits,
    export_heatmap,
    f1_and_balanced_accuracy,
    f1_optimal_threshold,
    oracle_plausibility_accuracy,
    placement_diversity,
    split_scores,
    top_k_sample,
)
from .model import heatmap, load_checkpoint, save_checkpoint
from .streams import rng_stream
from .training import DivergenceError, run_ssl

log = logging.getLogger("placement_ssl")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE = 0, 2, 3, 4

DATA_KEYS = ("n_s", "n_t", "n_test", "n_val", "k_s", "k_t", "k_test", "num_categories", "novel_categories",
             "grid_size", "water_fraction", "seed")

# (label, L_sim, L_dom, label correction); a-g follow the usual one/two/three-component order
ABLATION_ROWS = (
    ("a", True, False, False),
    ("b", False, True, False),
    ("c", False, False, True),
    ("d", True, True, False),
    ("e", False, True, True),
    ("f", True, False, True),
    ("g", True, True, True),
    ("off", False, False, False),
)
METRIC_COLUMNS = (("F1-s", "f1_seen"), ("Bal-s", "bal_seen"), ("F1-e", "f1_novel"), ("Bal-e", "bal_novel"))


class DataError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# layout helpers
# ---------------------------------------------------------------------------

def _dirs(cfg: ExperimentConfig) -> dict[str, Path]:
    root = Path(cfg.output_dir)
    return {name: root / name for name in ("datasets", "checkpoints", "metrics", "heatmaps")}


def _data_fingerprint(cfg: ExperimentConfig) -> dict:
    d = cfg.to_dict()
    return {k: d[k] for k in DATA_KEYS}


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def _load_datasets(cfg: ExperimentConfig) -> tuple[DatasetSplit, list]:
    ddir = _dirs(cfg)["datasets"]
    manifest_path = ddir / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"no datasets under {ddir}; run `placement-ssl gen-data` with the same config first")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("data") != _data_fingerprint(cfg):
        raise DataError(f"datasets under {ddir} were generated with different data settings; "
                        "rerun `placement-ssl gen-data --force` or match the config")
    split = merge_splits(load_split(ddir / "train.jsonl"), load_split(ddir / "test.jsonl"))
    val = load_split(ddir / "val.jsonl").test_seen
    split.audit()
    return split, val


def _run_name(cfg: ExperimentConfig) -> str:
    if not cfg.use_unlabeled:
        mode = "supervised-only"
    elif cfg.use_sim and cfg.use_dom and cfg.label_correction:
        mode = "full"
    elif not (cfg.use_sim or cfg.use_dom):
        mode = "no-framework" if cfg.label_correction else "pseudo-label-only"
    else:
        mode = "sim{:d}-dom{:d}-corr{:d}".format(cfg.use_sim, cfg.use_dom, cfg.label_correction)
    return f"{cfg.style}_{mode}"


def _pretrain_cache(cfg: ExperimentConfig) -> Path:
    return _dirs(cfg)["checkpoints"] / "pretrain" / f"{cfg.pretrain_key()}.npz"


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(cfg: ExperimentConfig, force: bool = False) -> dict:
    ddir = _dirs(cfg)["datasets"]
    names = ("train.jsonl", "test.jsonl", "val.jsonl", "manifest.json")
    existing = [n for n in names if (ddir / n).exists()]
    if existing and not force:
        raise DataError(f"{ddir} already holds {existing}; pass --force to overwrite")
    ddir.mkdir(parents=True, exist_ok=True)
    spec = cfg.scene_spec()
    split = build_splits(spec, cfg.n_s, cfg.n_t, cfg.n_test, cfg.novel_categories, cfg.seed,
                         cfg.k_s, cfg.k_t, cfg.k_test)
    val = build_validation(spec, cfg.n_val, cfg.novel_categories, cfg.seed, cfg.k_test)
    tag = {"config_hash": cfg.config_hash(), "seed": cfg.seed}
    train = DatasetSplit(split.train_S, split.train_T, [], [], spec, split.novel_categories)
    test = DatasetSplit([], [], split.test_seen, split.test_novel, spec, split.novel_categories)
    save_split(train, ddir / "train.jsonl", {**tag, "role": "train"})
    save_split(test, ddir / "test.jsonl", {**tag, "role": "test"})
    save_split(DatasetSplit([], [], val, [], spec, split.novel_categories), ddir / "val.jsonl",
               {**tag, "role": "validation"})

    def rate(records):
        return float(np.mean(np.concatenate([r.labels for r in records]))) if records else None

    labeled = split.train_S + split.test_seen + split.test_novel
    manifest = {
        **tag,
        "data": _data_fingerprint(cfg),
        "spec_hash": spec.spec_hash(),
        "counts": {
            "N_s": len(split.train_S), "N_t": len(split.train_T), "test_seen": len(split.test_seen),
            "test_novel": len(split.test_novel), "val": len(val),
            "placements_S": int(sum(r.K for r in split.train_S)),
            "placements_T": int(sum(r.K for r in split.train_T)),
        },
        "base_positive_rate": rate(labeled),
        "positive_rate": {"train_S": rate(split.train_S), "test_seen": rate(split.test_seen),
                          "test_novel": rate(split.test_novel)},
        "novel_categories": list(split.novel_categories),
    }
    _write_json(ddir / "manifest.json", manifest)
    log.info("wrote datasets to %s: %s", ddir, manifest["counts"])
    return manifest


def _train_one(cfg: ExperimentConfig, split: DatasetSplit, resume: bool) -> dict:
    dirs = _dirs(cfg)
    name = _run_name(cfg)
    run_dir = dirs["checkpoints"] / name
    result = run_ssl(cfg, split, checkpoint_dir=run_dir, resume=resume, pretrain_cache=_pretrain_cache(cfg))
    meta = {"config_hash": cfg.config_hash(), "seed": cfg.seed, "config": cfg.settings(), "run": name,
            "history": result.history}
    save_checkpoint(dirs["checkpoints"] / f"{name}.npz", result.stack, meta=meta)
    report = {"run": name, "config_hash": cfg.config_hash(), "seed": cfg.seed, "config": cfg.settings(),
              "history": result.history}
    _write_json(dirs["metrics"] / f"{name}.json", report)
    return report


def cmd_train(cfg: ExperimentConfig, resume: bool = False) -> dict:
    split, _ = _load_datasets(cfg)
    return _train_one(cfg, split, resume)


def cmd_ablate(cfg: ExperimentConfig, resume: bool = False) -> list[dict]:
    split, _ = _load_datasets(cfg)
    rows = []
    for label, sim, dom, corr in ABLATION_ROWS:
        row_cfg = cfg.with_overrides(use_unlabeled=True, use_sim=sim, use_dom=dom, label_correction=corr)
        final = _train_one(row_cfg, split, resume)["history"][-1]
        row = {"row": label, "L_sim": sim, "L_dom": dom, "label_correction": corr,
               "config_hash": row_cfg.config_hash(), "seed": cfg.seed}
        row.update({col: final[key] for col, key in METRIC_COLUMNS})
        rows.append(row)
        log.info("ablation row %s: %s", label, {c: row[c] for c, _ in METRIC_COLUMNS})
    mdir = _dirs(cfg)["metrics"]
    _write_json(mdir / "ablation.json", {"config_hash": cfg.config_hash(), "seed": cfg.seed, "rows": rows})
    with open(mdir / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    return rows


def _load_model(path, cfg_style: str | None):
    try:
        stack, header, _, _ = load_checkpoint(path)
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot load checkpoint {path}: {exc}") from None
    if cfg_style is not None and stack.style != cfg_style:
        raise ConfigError(f"checkpoint {path} holds a {stack.style!r} model but --style {cfg_style!r} was given")
    return stack, header


def cmd_eval(cfg: ExperimentConfig, checkpoint, style: str | None = None) -> dict:
    stack, header = _load_model(checkpoint, style)
    split, val = _load_datasets(cfg)
    at_gamma = evaluate_splits(stack, split, cfg.gamma)
    report = {"checkpoint": str(checkpoint), "config_hash": header["meta"].get("config_hash", cfg.config_hash()),
              "seed": header["meta"].get("seed", cfg.seed), "gamma": cfg.gamma, "at_gamma": at_gamma}
    if val:
        threshold = f1_optimal_threshold(*split_scores(stack, val))
        tuned = {}
        for name, records in (("seen", split.test_seen), ("novel", split.test_novel)):
            if records:
                scores, truth = split_scores(stack, records)
                f1, bal = f1_and_balanced_accuracy(scores > threshold, truth)
            else:
                f1 = bal = None
            tuned[f"f1_{name}"], tuned[f"bal_{name}"] = f1, bal
        report["val_threshold"] = threshold
        report["at_val_threshold"] = tuned
    stem = Path(checkpoint).stem
    _write_json(_dirs(cfg)["metrics"] / f"eval_{stem}.json", report)
    return report


def cmd_heatmap(cfg: ExperimentConfig, checkpoint, scene_ids, section: str = "seen",
                style: str | None = None, k_pool: int = 50, k_out: int = 5) -> dict:
    stack, header = _load_model(checkpoint, style)
    split, _ = _load_datasets(cfg)
    records = split.test_seen if section == "seen" else split.test_novel
    by_id = {r.pair_id: r for r in records}
    missing = [i for i in scene_ids if i not in by_id]
    if missing:
        raise DataError(f"no {section} test pairs with ids {missing} (available 0..{len(records) - 1})")
    out_dir = _dirs(cfg)["heatmaps"] / Path(checkpoint).stem
    rng = rng_stream(cfg.seed, "sampling")
    scenes, samples, files = [], [], {}
    for i in scene_ids:
        scene = by_id[i].scene
        hm = heatmap(stack, scene)
        stem = f"{section}_{i}"
        files[stem] = [str(p) for p in export_heatmap(hm, out_dir, stem)]
        boxes, _ = top_k_sample(hm, k_pool, k_out, rng)
        scenes.append(scene)
        samples.append(boxes)
    summary = {
        "checkpoint": str(checkpoint), "config_hash": header["meta"].get("config_hash", cfg.config_hash()),
        "seed": cfg.seed, "section": section, "files": files,
        "samples": {f"{section}_{i}": b.tolist() for i, b in zip(scene_ids, samples)},
        "oracle_plausibility": oracle_plausibility_accuracy(scenes, samples),
        "diversity": placement_diversity(samples),
    }
    _write_json(out_dir / "summary.json", summary)
    return summary


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _parse_set(items) -> dict:
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat YAML/JSON file of config keys")
    common.add_argument("--output-dir", help="root of datasets/, checkpoints/, metrics/, heatmaps/")
    common.add_argument("--seed", type=int)
    common.add_argument("--style", choices=("sopa", "fopa"))
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="placement-ssl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate labeled, unlabeled and test pairs")
    p.add_argument("--force", action="store_true", help="overwrite existing datasets")

    p = sub.add_parser("train", parents=[common], help="train one model")
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--supervised-only", action="store_true", help="labeled pairs only")
    mode.add_argument("--no-framework", action="store_true",
                      help="pseudo-labels and label correction without the similarity and domain losses")
    p.add_argument("--resume", action="store_true", help="continue from the last phase checkpoint")

    p = sub.add_parser("ablate", parents=[common], help="run the 8-row component grid")
    p.add_argument("--resume", action="store_true")

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the test splits")
    p.add_argument("checkpoint")

    p = sub.add_parser("heatmap", parents=[common], help="export rationality heatmaps for test scenes")
    p.add_argument("checkpoint")
    p.add_argument("--scenes", type=int, nargs="+", default=[0], help="test pair ids")
    p.add_argument("--section", choices=("seen", "novel"), default="seen")
    p.add_argument("--k-pool", type=int, default=50)
    p.add_argument("--k-out", type=int, default=5)
    return parser


def config_from_args(args) -> ExperimentConfig:
    overrides = _parse_set(args.set)
    for key in ("output_dir", "seed", "style"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "supervised_only", False):
        overrides["use_unlabeled"] = False
    if getattr(args, "no_framework", False):
        overrides.update(use_unlabeled=True, use_sim=False, use_dom=False)
    return load_config(args.config, **overrides)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        # eval/heatmap take the model style from the checkpoint; --style there only asserts it
        style_check = args.style if args.command in ("eval", "heatmap") else None
        if style_check is not None:
            args.style = None
        cfg = config_from_args(args)
        if args.command == "gen-data":
            out = cmd_gen_data(cfg, force=args.force)
        elif args.command == "train":
            out = cmd_train(cfg, resume=args.resume)["history"][-1]
        elif args.command == "ablate":
            out = cmd_ablate(cfg, resume=args.resume)
        elif args.command == "eval":
            out = cmd_eval(cfg, args.checkpoint, style_check)
        else:
            out = cmd_heatmap(cfg, args.checkpoint, args.scenes, args.section, style_check,
                              args.k_pool, args.k_out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, DatasetFormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        try:
            _write_json(_dirs(cfg)["metrics"] / "divergence.json", exc.dump)
        except OSError:
            pass
        return EXIT_DIVERGENCE
    print(json.dumps(out, indent=2, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
