"""Command-line entry point for the full pipeline.

Subcommands: synth, split, train, evaluate, recommend, export-embeddings,
stats. Runs are driven by a JSON config file; a few global flags override
config values (flags win). Exit codes: 0 success, 1 runtime failure, 2
usage or config errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from bundlegen import data as bgdata
from bundlegen import evaluation as bgeval
from bundlegen import generator as bggen
from bundlegen import itemgraph as bgig
from bundlegen import retrieval as bgret
from bundlegen import training as bgtrain
from bundlegen.errors import BundlegenError, ConfigError

log = logging.getLogger("bundlegen")

_DATA_KEYS = {"dir", "user_bundle", "bundle_item", "user_item"}
_SPLIT_KEYS = {"seed", "ratios"}
_SYNTH_KEYS = {
    "num_users", "num_items", "num_bundles", "num_categories", "noise_rate",
    "interactions_per_user", "items_per_bundle", "seed",
}
_EVAL_KEYS = {"ks", "alpha", "query_mode"}
_TRAIN_KEYS = set(bgtrain.TrainConfig.__dataclass_fields__)
_TOP_KEYS = {"out_dir", "data", "split", "synth", "train", "eval"}


def _reject_unknown(section: dict, allowed: set, where: str):
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"unknown config key(s) in {where}: {', '.join(unknown)}")


def load_config(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a JSON object")
    _reject_unknown(cfg, _TOP_KEYS, "config root")
    for section, allowed in (
        ("data", _DATA_KEYS), ("split", _SPLIT_KEYS), ("synth", _SYNTH_KEYS),
        ("train", _TRAIN_KEYS), ("eval", _EVAL_KEYS),
    ):
        if section in cfg:
            if not isinstance(cfg[section], dict):
                raise ConfigError(f"config section {section!r} must be an object")
            _reject_unknown(cfg[section], allowed, f"section {section!r}")
    return cfg


def _apply_overrides(cfg: dict, args) -> dict:
    if args.seed is not None:
        for section in ("split", "synth", "train"):
            cfg.setdefault(section, {})["seed"] = args.seed
    if args.out is not None:
        cfg["out_dir"] = args.out
    return cfg


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg.get("out_dir", "."))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset_paths(cfg: dict):
    section = cfg.get("data")
    if not section:
        raise ConfigError("config needs a 'data' section naming the dataset files")
    if "dir" in section:
        d = Path(section["dir"])
        paths = (d / bgdata.UB_FILENAME, d / bgdata.BI_FILENAME, d / bgdata.UI_FILENAME)
    else:
        try:
            paths = (
                Path(section["user_bundle"]),
                Path(section["bundle_item"]),
                Path(section["user_item"]),
            )
        except KeyError as exc:
            raise ConfigError(f"data section is missing {exc.args[0]!r}") from None
    for p in paths:
        if not p.is_file():
            raise ConfigError(f"dataset file not found: {p}")
    return paths


def _load_dataset(cfg: dict) -> bgdata.InteractionDataset:
    ub, bi, ui = _dataset_paths(cfg)
    return bgdata.load_interactions(ub, bi, ui)


def _make_split(cfg: dict, ds) -> bgdata.DatasetSplit:
    section = cfg.get("split", {})
    ratios = tuple(section.get("ratios", (7, 1, 2)))
    seed = int(section.get("seed", 0))
    return bgdata.split(ds, ratios=ratios, seed=seed)


def _train_config(cfg: dict) -> bgtrain.TrainConfig:
    section = dict(cfg.get("train", {}))
    if "k_range" in section:
        section["k_range"] = tuple(section["k_range"])
    try:
        return bgtrain.TrainConfig(**section).validate()
    except TypeError as exc:
        raise ConfigError(f"bad train config: {exc}") from None


def _synth_config(cfg: dict) -> bgdata.SyntheticConfig:
    section = dict(cfg.get("synth") or {})
    if not section:
        raise ConfigError("config needs a 'synth' section for this command")
    for key in ("interactions_per_user", "items_per_bundle"):
        if key in section:
            section[key] = tuple(section[key])
    try:
        return bgdata.SyntheticConfig(**section)
    except TypeError as exc:
        raise ConfigError(f"bad synth config: {exc}") from None


def cmd_synth(cfg: dict, args) -> int:
    synth_cfg = _synth_config(cfg)
    ds = bgdata.generate_synthetic(synth_cfg)
    out = _out_dir(cfg)
    bgdata.export_interactions(ds, out)
    (out / "stats.json").write_text(bgdata.stats_json(ds), encoding="utf-8")
    log.info("wrote synthetic dataset to %s", out)
    return 0


def cmd_split(cfg: dict, args) -> int:
    ds = _load_dataset(cfg)
    sp = _make_split(cfg, ds)
    out = _out_dir(cfg)
    train_coo = sp.train.X.tocoo()
    order = np.lexsort((train_coo.col, train_coo.row))
    lines = [f"{train_coo.row[i]} {train_coo.col[i]}\n" for i in order]
    (out / "user_bundle.train.txt").write_text("".join(lines), encoding="utf-8")
    for name, held in (("val", sp.val), ("test", sp.test)):
        lines = [
            f"{u} {b}\n" for u in sorted(held) for b in held[u]
        ]
        (out / f"user_bundle.{name}.txt").write_text("".join(lines), encoding="utf-8")
    log.info("wrote split files to %s (seed %d)", out, sp.seed)
    return 0


def cmd_stats(cfg: dict, args) -> int:
    ds = _load_dataset(cfg)
    payload = bgdata.stats_json(ds)
    sys.stdout.write(payload)
    if cfg.get("out_dir"):
        (_out_dir(cfg) / "stats.json").write_text(payload, encoding="utf-8")
    return 0


def cmd_train(cfg: dict, args) -> int:
    ds = _load_dataset(cfg)
    sp = _make_split(cfg, ds)
    out = _out_dir(cfg)
    ckpt_path = out / "checkpoint.bin"
    if args.resume:
        ckpt = bgtrain.load_checkpoint(args.resume)
        state = bgtrain.state_from_checkpoint(ckpt, sp)
        log.info("resuming from %s at epoch %d", args.resume, state.epoch)
        train_cfg = state.config
    else:
        train_cfg = _train_config(cfg)
        state = None
    state = bgtrain.train(sp, train_cfg, state=state, checkpoint_path=ckpt_path)
    bgtrain.save_checkpoint(state, ckpt_path)
    bgtrain.write_loss_csv(state.history_rows, out / "losses.csv")
    log.info("checkpoint: %s", ckpt_path)
    return 0


def _state_from_args(cfg: dict, args):
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required for this command")
    ds = _load_dataset(cfg)
    sp = _make_split(cfg, ds)
    ckpt = bgtrain.load_checkpoint(args.checkpoint)
    return bgtrain.state_from_checkpoint(ckpt, sp), sp


def cmd_evaluate(cfg: dict, args) -> int:
    state, sp = _state_from_args(cfg, args)
    section = cfg.get("eval", {})
    ks = section.get("ks", [1, 2])
    alpha = section.get("alpha")
    query_mode = section.get("query_mode", "generated")
    report = bgeval.evaluate(
        state, sp, ks=ks, part="test", alpha=alpha, query_mode=query_mode
    )
    out = _out_dir(cfg)
    (out / "eval.csv").write_text(bgeval.report_csv(report), encoding="utf-8")
    table = bgeval.report_table(report)
    (out / "eval.txt").write_text(table, encoding="utf-8")
    sys.stdout.write(table)
    return 0


def cmd_recommend(cfg: dict, args) -> int:
    state, sp = _state_from_args(cfg, args)
    train = sp.train
    if args.users:
        users = [int(u) for u in args.users.split(",")]
    else:
        users = sorted(set(sp.test) | set(sp.val))
    for u in users:
        if not 0 <= u < train.num_users:
            raise BundlegenError(f"unknown user id {u}")
    X = train.X.tocsr()
    k = args.k
    lines = []
    for u in users:
        history = bgdata.user_history(train, u)
        pseudo = bggen.generate(state.generator, history).items if len(history) else []
        mask = X.indices[X.indptr[u] : X.indptr[u + 1]]
        scored = bgret.rank_topk(
            pseudo,
            state.catalog,
            state.config.alpha,
            k,
            mask=mask,
            r_hat_value=state.index.r_hat_value,
            fallback_items=history,
        )
        parts = " ".join(f"{sb.bundle_id}:{sb.y:.6f}" for sb in scored)
        lines.append(f"{u} {parts}\n")
    out = _out_dir(cfg)
    path = out / "recommendations.txt"
    path.write_text("".join(lines), encoding="utf-8")
    sys.stdout.write("".join(lines))
    return 0


def cmd_export_embeddings(cfg: dict, args) -> int:
    state, _ = _state_from_args(cfg, args)
    out = _out_dir(cfg)
    path = Path(args.output) if args.output else out / "embeddings.txt"
    bgig.export_embeddings(state.index.r_hat_value, path)
    log.info("wrote %d embedding rows to %s", state.index.r_hat_value.shape[0], path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bundlegen",
        description="Bundle recommendation pipeline: synthesize or load "
        "interaction data, train the generator, evaluate, and recommend.",
    )
    parser.add_argument("--config", default=None, help="JSON config file")
    parser.add_argument("--seed", type=int, default=None, help="override all seeds")
    parser.add_argument("--out", default=None, help="override the output directory")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", help="generate a synthetic dataset")
    sub.add_parser("split", help="write train/val/test interaction files")
    sub.add_parser("stats", help="print dataset statistics")
    p_train = sub.add_parser("train", help="train a model")
    p_train.add_argument("--resume", default=None, help="checkpoint to resume from")
    p_eval = sub.add_parser("evaluate", help="evaluate a checkpoint on the test split")
    p_eval.add_argument("--checkpoint", required=True)
    p_rec = sub.add_parser("recommend", help="write top-K bundles per user")
    p_rec.add_argument("--checkpoint", required=True)
    p_rec.add_argument("--users", default=None, help="comma-separated user ids")
    p_rec.add_argument("--k", type=int, default=5)
    p_exp = sub.add_parser("export-embeddings", help="dump normalized item vectors")
    p_exp.add_argument("--checkpoint", required=True)
    p_exp.add_argument("--output", default=None)
    return parser


_COMMANDS = {
    "synth": cmd_synth,
    "split": cmd_split,
    "stats": cmd_stats,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "recommend": cmd_recommend,
    "export-embeddings": cmd_export_embeddings,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = load_config(args.config) if args.config else {}
        cfg = _apply_overrides(cfg, args)
        return _COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except BundlegenError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
