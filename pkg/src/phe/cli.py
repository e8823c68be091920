"""Configuration-driven experiment runner.

One JSON config file describes one experiment: a model id, index-space and
training hyperparameters, the dataset schema, and the experiment kind.
Every number the package reports is reproducible from a checked-in config
plus a seed.

Exit codes separate failure classes: 2 = configuration, 3 = data,
4 = numerical.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import datasets
from .baselines import ADA_EPOCHS, AdaModel, EeModel, PeeModel
from .errors import ConfigError, DataError, NumericalError
from .exact_demo import alternating_demo, write_traces_csv
from .hashing import HashSpec
from .inference import PheModel, TrainConfig, save_checkpoint
from .likelihoods import (new_categorical_linear, new_gaussian_mlp,
                          new_poisson_linear)
from .phe_encoder import EncoderConfig, RecordLayout
from .streaming_harness import (Dataset, Preprocessor, Schema, ingest_csv,
                                partition_by_vocab, run_continual, run_stream)

MODEL_IDS = ("phe", "slow_ada", "medium_ada", "fast_ada", "ee", "pee")
EXPERIMENT_KINDS = ("online_stream", "continual_groups", "demo", "bench")

_TOP_KEYS = {"model", "seed", "hashing", "encoder", "training", "columns",
             "head", "experiment"}
_HASHING_KEYS = {"bucket_count", "num_hashes", "weight_buckets", "embed_dim",
                 "seed", "seeds"}
_ENCODER_KEYS = {"aggregation", "column_namespacing"}
_TRAINING_KEYS = {"learning_rate", "batch_size", "epochs_initial", "epochs_online",
                  "mc_samples_train", "mc_samples_predict", "kl_scale",
                  "reset_adam_per_stage"}
_HEAD_KEYS = {"kind", "hidden_dim", "sigma_y"}
_EXPERIMENT_KEYS = {"kind", "dataset", "output_dir", "init_fraction",
                    "dynamic_column", "update_all_columns", "n_groups",
                    "timestamp_order", "rating_mode", "repeats_per_item",
                    "cycles", "sigma_obs", "eta", "data_seed"}


def _check_keys(section: dict, allowed: set, where: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(sorted(unknown))}")


def load_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    _check_keys(cfg, _TOP_KEYS, "config")
    exp = cfg.get("experiment")
    if not isinstance(exp, dict):
        raise ConfigError("experiment section is required")
    _check_keys(exp, _EXPERIMENT_KEYS, "experiment")
    kind = exp.get("kind")
    if kind not in EXPERIMENT_KINDS:
        raise ConfigError(f"experiment.kind must be one of {EXPERIMENT_KINDS}, got {kind!r}")
    if kind == "demo":
        return
    model = cfg.get("model")
    if model not in MODEL_IDS:
        raise ConfigError(f"model must be one of {MODEL_IDS}, got {model!r}")
    if not isinstance(cfg.get("seed"), int):
        raise ConfigError("seed must be an integer")
    hashing = cfg.get("hashing")
    if not isinstance(hashing, dict):
        raise ConfigError("hashing section is required")
    _check_keys(hashing, _HASHING_KEYS, "hashing")
    for fld in ("bucket_count", "num_hashes", "weight_buckets", "embed_dim"):
        value = hashing.get(fld)
        if not isinstance(value, int) or value < 1:
            raise ConfigError(f"hashing.{fld} must be a positive integer, got {value!r}")
    if "encoder" in cfg:
        _check_keys(cfg["encoder"], _ENCODER_KEYS, "encoder")
    if "training" in cfg:
        _check_keys(cfg["training"], _TRAINING_KEYS, "training")
    if "head" in cfg:
        _check_keys(cfg["head"], _HEAD_KEYS, "head")
    columns = cfg.get("columns")
    if not isinstance(columns, list) or not columns:
        raise ConfigError("columns must be a non-empty list")
    for col in columns:
        if not isinstance(col, dict) or set(col) != {"name", "kind"}:
            raise ConfigError(f"each column needs exactly name and kind, got {col!r}")
    if "dataset" not in exp:
        raise ConfigError("experiment.dataset is required")
    if kind == "continual_groups":
        if not isinstance(exp.get("n_groups"), int) or exp["n_groups"] < 1:
            raise ConfigError("experiment.n_groups must be a positive integer")
        if not exp.get("dynamic_column"):
            raise ConfigError("experiment.dynamic_column is required for continual_groups")


def _schema_from_config(cfg: dict) -> Schema:
    try:
        return Schema.from_config(cfg["columns"])
    except DataError as exc:
        raise ConfigError(str(exc)) from exc


def _train_config(cfg: dict) -> TrainConfig:
    section = dict(cfg.get("training", {}))
    section["seed"] = cfg["seed"]
    try:
        return TrainConfig(**section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid training section: {exc}") from exc


def _head_factory(cfg: dict, schema: Schema, n_classes: int):
    head_cfg = cfg.get("head", {})
    kind = head_cfg.get("kind")
    target_kind = schema.target.kind
    if kind is None:
        kind = {"target_class": "categorical_linear",
                "target_real": "gaussian_mlp",
                "target_count": "poisson_linear"}[target_kind]
    if kind == "categorical_linear":
        if n_classes < 2:
            raise ConfigError("categorical head needs at least 2 classes in the data")
        return lambda fdim, rng: new_categorical_linear(fdim, n_classes, rng)
    if kind == "gaussian_mlp":
        hidden = head_cfg.get("hidden_dim", 64)
        sigma_y = head_cfg.get("sigma_y", 0.1)
        return lambda fdim, rng: new_gaussian_mlp(fdim, rng, hidden, sigma_y)
    if kind == "poisson_linear":
        return lambda fdim, rng: new_poisson_linear(fdim, rng)
    raise ConfigError(f"unknown head kind {kind!r}")


def build_model(cfg: dict, schema: Schema, n_classes: int):
    spec = HashSpec.from_config({**cfg["hashing"],
                                 **({} if "seed" in cfg["hashing"] or "seeds" in cfg["hashing"]
                                    else {"seed": cfg["seed"]})})
    enc_section = cfg.get("encoder", {})
    exp = cfg["experiment"]
    enc_cfg = EncoderConfig(spec, enc_section.get("aggregation", "weighted_sum"),
                            enc_section.get("column_namespacing", True))
    layout = RecordLayout(schema.categorical_columns, len(schema.numeric_columns),
                          rating_mode=exp.get("rating_mode", False),
                          missing_token=schema.missing_token)
    train_cfg = _train_config(cfg)
    head_factory = _head_factory(cfg, schema, n_classes)
    dynamic = None
    if exp.get("dynamic_column") and not exp.get("update_all_columns", False):
        dynamic = {exp["dynamic_column"]}
    model_id = cfg["model"]
    if model_id == "phe":
        return PheModel(enc_cfg, layout, head_factory, train_cfg, dynamic)
    if model_id in ADA_EPOCHS:
        return AdaModel(enc_cfg, layout, head_factory, train_cfg, dynamic, model_id=model_id)
    if model_id == "ee":
        return EeModel(layout, spec.embed_dim_d, head_factory, train_cfg, dynamic)
    if model_id == "pee":
        return PeeModel(layout, spec.embed_dim_d, head_factory, train_cfg, dynamic)
    raise ConfigError(f"unknown model {model_id!r}")


def _load_dataset(cfg: dict, schema: Schema) -> Dataset:
    path = cfg["experiment"]["dataset"]
    if not os.path.exists(path):
        raise DataError(f"dataset not found: {path}")
    return ingest_csv(path, schema)


def _write_outputs(out_dir: str, log, model, quiet: bool) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    log.to_jsonl(os.path.join(out_dir, "metrics.jsonl"))
    summary = log.summary(embedding_params=model.n_embedding_params())
    with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, sort_keys=True, indent=2)
        fh.write("\n")
    if isinstance(model, PheModel):
        save_checkpoint(model.state, os.path.join(out_dir, "checkpoint.json"))
    if not quiet:
        print(f"{summary['model']}: {summary['metric']} = {summary['final_metric']:.4f} "
              f"({summary['n_records']} records)")
    return summary


def run_online_stream(cfg: dict, quiet: bool = False) -> dict:
    schema = _schema_from_config(cfg)
    dataset = _load_dataset(cfg, schema)
    exp = cfg["experiment"]
    data_seed = exp.get("data_seed", cfg["hashing"].get("seed", cfg["seed"]))
    init_fraction = exp.get("init_fraction", 1 / 3)
    n = len(dataset)
    n_init = int(round(n * init_fraction))
    if exp.get("timestamp_order", False):
        order = np.argsort(dataset.timestamps, kind="stable")
    else:
        order = np.random.default_rng(data_seed).permutation(n)
    init_set = dataset.subset(order[:n_init])
    stream_set = dataset.subset(order[n_init:])
    pre = Preprocessor(schema).fit(dataset, norm_dataset=init_set)
    model = build_model(cfg, schema, pre.n_classes)
    cats, nums, targets = pre.model_inputs(init_set)
    model.fit_initial(cats, nums, targets)
    batch_size = _train_config(cfg).batch_size
    log = run_stream(model, stream_set, pre, batch_size, seed=data_seed + 1,
                     timestamp_order=exp.get("timestamp_order", False),
                     model_id=cfg["model"])
    return _write_outputs(exp["output_dir"], log, model, quiet)


def run_continual_groups(cfg: dict, quiet: bool = False) -> dict:
    schema = _schema_from_config(cfg)
    dataset = _load_dataset(cfg, schema)
    exp = cfg["experiment"]
    data_seed = exp.get("data_seed", cfg["hashing"].get("seed", cfg["seed"]))
    groups = partition_by_vocab(dataset, exp["dynamic_column"], exp["n_groups"], data_seed)
    pre = Preprocessor(schema).fit(dataset, norm_dataset=groups[0].train)
    model = build_model(cfg, schema, pre.n_classes)
    log = run_continual(model, groups, pre, model_id=cfg["model"])
    return _write_outputs(exp["output_dir"], log, model, quiet)


def run_demo(cfg: dict, quiet: bool = False) -> dict:
    exp = cfg["experiment"]
    result = alternating_demo(
        repeats_per_item=exp.get("repeats_per_item", 10),
        cycles=exp.get("cycles", 2),
        sigma_obs=exp.get("sigma_obs", 0.01),
        eta=exp.get("eta", 0.1),
    )
    out_dir = exp["output_dir"]
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "demo_traces.csv")
    write_traces_csv(result, path)
    summary = {
        "ogd_final": list(result["ogd_final"]),
        "bayes_final_mean": list(result["bayes_final_mean"]),
        "phe_final_means": list(result["phe_final_means"]),
        "traces_csv": path,
    }
    with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, sort_keys=True, indent=2)
        fh.write("\n")
    if not quiet:
        print(f"demo traces written to {path}")
    return summary


def param_counts(cfg: dict) -> dict:
    """Embedding parameter accounting: hashed-table size against the
    one-row-per-item alternative, plus their ratio."""
    schema = _schema_from_config(cfg)
    hashing = cfg["hashing"]
    phe_count = 2 * (hashing["bucket_count"] * hashing["embed_dim"]
                     + hashing["weight_buckets"] * hashing["num_hashes"])
    dataset = _load_dataset(cfg, schema)
    vocab = sum(len(dataset.vocabulary(c)) for c in schema.categorical_columns)
    pee_count = 2 * vocab * hashing["embed_dim"]
    return {
        "phe_params": phe_count,
        "pee_params": pee_count,
        "vocabulary": vocab,
        "compression_ratio": round(phe_count / pee_count, 2),
    }


def cmd_run(cfg: dict, quiet: bool = False) -> dict:
    kind = cfg["experiment"]["kind"]
    if kind == "online_stream":
        return run_online_stream(cfg, quiet)
    if kind == "continual_groups":
        return run_continual_groups(cfg, quiet)
    if kind == "demo":
        return run_demo(cfg, quiet)
    if kind == "bench":
        counts = param_counts(cfg)
        out_dir = cfg["experiment"].get("output_dir")
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)
            with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as fh:
                json.dump(counts, fh, sort_keys=True, indent=2)
                fh.write("\n")
        if not quiet:
            print(json.dumps(counts, sort_keys=True, indent=2))
        return counts
    raise ConfigError(f"unhandled experiment kind {kind!r}")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="phe",
                                     description="Bounded-memory probabilistic hash "
                                                 "embeddings for streaming categorical data")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute an experiment config end to end")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out", help="override experiment.output_dir")
    p_run.add_argument("--seed", type=int, help="override the experiment seed")
    p_run.add_argument("--quiet", action="store_true")

    p_pc = sub.add_parser("param-count", help="print embedding parameter counts")
    p_pc.add_argument("--config", required=True)
    p_pc.add_argument("--quiet", action="store_true")

    p_demo = sub.add_parser("demo", help="run the alternating two-item forgetting demo")
    p_demo.add_argument("--out", required=True)
    p_demo.add_argument("--cycles", type=int, default=2)
    p_demo.add_argument("--repeats", type=int, default=10)
    p_demo.add_argument("--quiet", action="store_true")

    p_val = sub.add_parser("validate-config", help="check a config file and exit")
    p_val.add_argument("--config", required=True)
    p_val.add_argument("--quiet", action="store_true")

    p_data = sub.add_parser("make-data", help="generate the bundled synthetic tables")
    p_data.add_argument("--out", required=True)
    p_data.add_argument("--quiet", action="store_true")

    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            cfg = load_config(args.config)
            if args.seed is not None:
                cfg["seed"] = args.seed
            if args.out:
                cfg.setdefault("experiment", {})["output_dir"] = args.out
            if cfg["experiment"]["kind"] != "demo" and "output_dir" not in cfg["experiment"]:
                raise ConfigError("experiment.output_dir is required (or pass --out)")
            cmd_run(cfg, args.quiet)
        elif args.command == "param-count":
            cfg = load_config(args.config)
            counts = param_counts(cfg)
            if not args.quiet:
                print(f"PHE embedding parameters: {counts['phe_params']}")
                print(f"P-EE embedding parameters: {counts['pee_params']}")
                print(f"Compression ratio: {counts['compression_ratio']}")
        elif args.command == "demo":
            cfg = {"experiment": {"kind": "demo", "output_dir": args.out,
                                  "cycles": args.cycles, "repeats_per_item": args.repeats}}
            validate_config(cfg)
            cmd_run(cfg, args.quiet)
        elif args.command == "validate-config":
            load_config(args.config)
            if not args.quiet:
                print("config ok")
        elif args.command == "make-data":
            paths = datasets.write_all(args.out)
            if not args.quiet:
                for name, path in sorted(paths.items()):
                    print(f"wrote {path}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
