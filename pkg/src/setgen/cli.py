"""Command-line entry point wiring dataset synthesis, training, evaluation,
few-shot episodes, one-off model fitting and the gradient-check oracles.

Every run is driven by one JSON config (copied into the output directory for
provenance) plus a few overriding flags.  Exit codes: 0 success, 1 usage or
config errors, 2 data errors, 3 numeric failures.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import gradcheck
from .datasynth import DatasetFormatError, SynthSpec, generate, load_dataset, save_dataset
from .embedding import init_net, load_net, save_net
from .gmm import ModelSpec, fit_concept_model, save_model, select_by_bic
from .implicit import ImplicitSolveError
from .retrieval import evaluate_split_map, run_fewshot_episodes
from .trainer import TrainerConfig, TrainingAborted, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(ValueError):
    """Bad flags or config contents."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # route argparse failures through our exit codes
        raise UsageError(message)


def _check_keys(section: dict, allowed, where: str) -> None:
    unknown = set(section) - set(allowed)
    if unknown:
        raise UsageError(f"unknown key(s) in {where}: {sorted(unknown)}")


def parse_model_spec(obj) -> ModelSpec:
    """Model kind from config: a dict or a compact string like "gmm2"."""
    if isinstance(obj, str):
        name = obj.strip().lower()
        if name in ("gauss", "avg", "nn", "svm"):
            return ModelSpec(name)
        if name.startswith("gmm") and name[3:].isdigit():
            return ModelSpec("gmm", k=int(name[3:]))
        if name.startswith("bic:"):
            ks = tuple(int(p) for p in name[4:].split(",") if p)
            return ModelSpec("bic", candidates=ks)
        raise UsageError(f"cannot parse model kind {obj!r}")
    _check_keys(obj, ("family", "k", "candidates"), "model")
    return ModelSpec(
        obj.get("family", "gauss"),
        k=int(obj.get("k", 1)),
        candidates=tuple(obj.get("candidates", ())),
    )


DEFAULT_CONFIG = {
    "seed": 0,
    "dataset": None,
    "net": None,
    "synth": {},
    "model": {"family": "gauss"},
    "train": {},
    "eval": {"methods": ["gauss", "gmm2", "avg", "nn", "svm"], "concept_size": 10, "noise_fraction": 0.2},
    "fewshot": {"ways": 5, "shots": 5, "episodes": 200, "split": "test", "concept_noise": 0.0},
}

TRAIN_KEYS = (
    "layer_dims",
    "learning_rate",
    "beta1",
    "beta2",
    "eps",
    "epochs",
    "batches_per_epoch",
    "tuples_per_batch",
    "bins",
    "concept_size",
    "relevant_size",
    "irrelevant_size",
    "noise_fraction",
    "validation_interval",
    "max_skip_fraction",
)

SYNTH_KEYS = (
    "num_classes",
    "items_per_class",
    "clusters_per_class",
    "latent_dim",
    "input_dim",
    "noise_fraction",
    "seed",
    "split_counts",
    "class_spread",
    "cluster_separation",
    "hidden_dim",
)


def load_config(path, seed_override=None) -> dict:
    cfg = json.loads(json.dumps(DEFAULT_CONFIG))  # deep copy of defaults
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            user = json.load(fh)
        _check_keys(user, DEFAULT_CONFIG.keys(), "config")
        for key, value in user.items():
            if isinstance(value, dict) and isinstance(cfg.get(key), dict):
                cfg[key].update(value)
            else:
                cfg[key] = value
    _check_keys(cfg["synth"], SYNTH_KEYS, "synth")
    _check_keys(cfg["train"], TRAIN_KEYS, "train")
    _check_keys(
        cfg["eval"],
        ("methods", "concept_size", "noise_fraction", "split", "csv"),
        "eval",
    )
    _check_keys(cfg["fewshot"], ("ways", "shots", "episodes", "split", "concept_noise"), "fewshot")
    if seed_override is not None:
        cfg["seed"] = int(seed_override)
    return cfg


def _out_dir(args) -> str:
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    return out


def _write_json(path, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def _stash_config(cfg, out):
    _write_json(os.path.join(out, "run_config.json"), cfg)


def _trainer_config(cfg) -> TrainerConfig:
    section = dict(cfg["train"])
    if "layer_dims" not in section:
        raise UsageError("train.layer_dims is required for training")
    section["layer_dims"] = tuple(int(d) for d in section.pop("layer_dims"))
    return TrainerConfig(model=parse_model_spec(cfg["model"]), seed=int(cfg["seed"]), **section)


def cmd_synth(args) -> int:
    cfg = load_config(args.config, args.seed)
    out = _out_dir(args)
    _stash_config(cfg, out)
    spec = SynthSpec(**cfg["synth"])
    if args.seed is not None:
        spec.seed = int(args.seed)
    spec.split_counts = tuple(spec.split_counts)
    dataset = generate(spec)
    manifest = os.path.join(out, "dataset.json")
    save_dataset(dataset, manifest)
    print(json.dumps({"dataset": manifest, "items": dataset.num_items, "classes": len(dataset.classes)}))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.seed)
    if not cfg["dataset"]:
        raise UsageError("config needs a 'dataset' path")
    out = _out_dir(args)
    _stash_config(cfg, out)
    dataset = load_dataset(cfg["dataset"])
    tcfg = _trainer_config(cfg)
    result = train(dataset, tcfg)
    net_path = os.path.join(out, "net.json")
    save_net(result.net, net_path)
    with open(os.path.join(out, "training_log.jsonl"), "w", encoding="utf-8") as fh:
        for record in result.log:
            fh.write(json.dumps(record) + "\n")
    summary = {
        "net": net_path,
        "initial_map": result.initial_map,
        "best_map": result.best_map,
    }
    _write_json(os.path.join(out, "summary.json"), summary)
    print(json.dumps(summary))
    return EXIT_OK


def _load_or_init_net(cfg):
    if cfg.get("net"):
        return load_net(cfg["net"])
    section = cfg["train"]
    if "layer_dims" not in section:
        raise UsageError("config needs either a 'net' path or train.layer_dims")
    return init_net([int(d) for d in section["layer_dims"]], seed=int(cfg["seed"]))


def cmd_eval(args) -> int:
    cfg = load_config(args.config, args.seed)
    if not cfg["dataset"]:
        raise UsageError("config needs a 'dataset' path")
    out = _out_dir(args)
    _stash_config(cfg, out)
    dataset = load_dataset(cfg["dataset"])
    net = _load_or_init_net(cfg)
    section = cfg["eval"]
    split = section.get("split", "test")
    classes = dataset.split_classes(split)
    if not classes:
        raise DatasetFormatError(f"split {split!r} contains no classes")
    report = {"split": split, "methods": {}}
    rows = []
    for method in section["methods"]:
        spec = parse_model_spec(method)
        rng = np.random.default_rng([int(cfg["seed"]), 77])
        mean_ap, per_query = evaluate_split_map(
            net,
            dataset,
            classes,
            spec,
            concept_size=int(section.get("concept_size", 10)),
            noise_fraction=float(section.get("noise_fraction", 0.0)),
            rng=rng,
            fit_seed=int(cfg["seed"]),
            threads=args.threads,
        )
        report["methods"][spec.label] = {
            "map": mean_ap,
            "per_query": [{"class": c, "ap": ap} for c, ap in per_query],
        }
        rows.append((spec.label, mean_ap))
        print(f"{spec.label}\tmAP={mean_ap:.4f}")
    _write_json(os.path.join(out, "eval_report.json"), report)
    if section.get("csv"):
        with open(os.path.join(out, "eval_map.csv"), "w", encoding="utf-8") as fh:
            fh.write("method,map\n")
            for label, val in rows:
                fh.write(f"{label},{val}\n")
    return EXIT_OK


def cmd_fewshot(args) -> int:
    cfg = load_config(args.config, args.seed)
    if not cfg["dataset"]:
        raise UsageError("config needs a 'dataset' path")
    out = _out_dir(args)
    _stash_config(cfg, out)
    dataset = load_dataset(cfg["dataset"])
    net = _load_or_init_net(cfg)
    section = cfg["fewshot"]
    split = section.get("split", "test")
    spec = parse_model_spec(cfg["model"])
    rng = np.random.default_rng([int(cfg["seed"]), 55])
    accuracy = run_fewshot_episodes(
        net,
        dataset,
        dataset.split_classes(split),
        ways=int(section["ways"]),
        shots=int(section["shots"]),
        episodes=int(section["episodes"]),
        spec=spec,
        rng=rng,
        fit_seed=int(cfg["seed"]),
    )
    payload = {
        "ways": section["ways"],
        "shots": section["shots"],
        "episodes": section["episodes"],
        "model": spec.label,
        "accuracy": accuracy,
    }
    _write_json(os.path.join(out, "fewshot_report.json"), payload)
    print(json.dumps(payload))
    return EXIT_OK


def cmd_fit(args) -> int:
    cfg = load_config(args.config, args.seed)
    out = _out_dir(args)
    _stash_config(cfg, out)
    with open(args.set, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if "vectors" not in doc:
        raise DatasetFormatError("descriptor set file needs a 'vectors' array")
    D = np.asarray(doc["vectors"], dtype=float)
    spec = parse_model_spec(cfg["model"])
    payload = {"model_kind": spec.label, "num_points": int(D.shape[0])}
    if spec.family == "bic":
        model, chosen, scores = select_by_bic(D, spec.candidates, seed=int(cfg["seed"]))
        payload["chosen_k"] = chosen
        payload["bic_scores"] = {str(k): v for k, v in scores.items()}
    else:
        model, _, _ = fit_concept_model(D, spec, seed=int(cfg["seed"]))
    model_path = os.path.join(out, "model.json")
    save_model(model, model_path)
    payload["model"] = model_path
    print(json.dumps(payload))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = load_config(args.config, args.seed)
    out = _out_dir(args)
    _stash_config(cfg, out)
    results = gradcheck.run_all(seed=int(cfg["seed"]))
    for res in results:
        print(res.line())
    payload = [
        {"name": r.name, "worst_error": r.worst_error, "tolerance": r.tolerance, "passed": r.passed}
        for r in results
    ]
    _write_json(os.path.join(out, "gradcheck_report.json"), payload)
    if not all(r.passed for r in results):
        raise ImplicitSolveError("one or more gradient checks failed")
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="setgen", description=__doc__)
    parser.add_argument("--config", default=None, help="JSON run config")
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--threads", type=int, default=1, help="worker cap for parallel sections")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", help="generate a synthetic dataset")
    sub.add_parser("train", help="meta-train the embedding")
    sub.add_parser("eval", help="retrieval mAP over the configured methods")
    sub.add_parser("fewshot", help="episodic c-way classification accuracy")
    fit = sub.add_parser("fit", help="fit one descriptor set from a JSON file")
    fit.add_argument("--set", required=True, help="JSON file with a 'vectors' array")
    sub.add_parser("gradcheck", help="run every finite-difference oracle")
    return parser


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "fewshot": cmd_fewshot,
    "fit": cmd_fit,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as err:
        print(json.dumps({"error": str(err), "code": EXIT_USAGE}), file=sys.stderr)
        return EXIT_USAGE
    except (DatasetFormatError, FileNotFoundError) as err:
        print(json.dumps({"error": str(err), "code": EXIT_DATA}), file=sys.stderr)
        return EXIT_DATA
    except (ImplicitSolveError, TrainingAborted, np.linalg.LinAlgError) as err:
        print(json.dumps({"error": str(err), "code": EXIT_NUMERIC}), file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as err:
        print(json.dumps({"error": str(err), "code": EXIT_DATA}), file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
