"""Command-line pipeline around the codec.

Verbs: sample, train, eval-recon, eval-gen, surrogate-train, explain,
dp-generate, cmaes-generate, grid.  A run is driven by one JSON config
(every field has a default; a partial file overrides only what it
names).  Reports land under the output root as report_<verb>.json and
embed the effective-config hash and the dataset manifest hash, so a
report can always be traced back to its inputs.  The output root is, in
priority order: $CONNECTOME_CODEC_OUT, --out, the config's out_dir.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import control, explain, stats
from .data import Dataset, build_dataset, load_connectome, synth_connectome
from .errors import CodecError
from .model import (
    DecodedGraph,
    GraphCodec,
    ModelConfig,
    discretize,
    load_checkpoint,
    save_checkpoint,
)
from .surrogate import (
    SurrogateConfig,
    SurrogateTrainConfig,
    load_surrogates,
    make_surrogates,
    save_surrogates,
    train_surrogates,
)
from .training import TrainConfig, evaluate_reconstruction, train_1_2n, write_history_csv

VERBS = ("sample", "train", "eval-recon", "eval-gen", "surrogate-train",
         "explain", "dp-generate", "cmaes-generate", "grid")

DEFAULT_CONFIG: dict = {
    "seed": 0,
    "out_dir": "runs/default",
    "data": {
        "source": "synthetic",  # "synthetic" | "files"
        "synthetic": {
            "n_neurons": 10000,
            "box": [[0.0, 300.0], [0.0, 300.0], [0.0, 60.0]],
            "label_mix": [0.005, 0.97, 0.02, 0.005],
            "edge_prob_scale": 0.9,
            "length_scale": 12.0,
            "seed": 7,
        },
        "neurons_csv": None,
        "edges_csv": None,
        "n_samples": 200,
        "dataset_dir": "dataset",
    },
    "model": {
        "n_nodes": 100,
        "n_classes": 5,
        "latent_dim": 16,
        "gat_heads": 4,
        "gat_out_dim": 16,
        "edge_embed_dim": 64,
        "enc_hidden": [512],
        "dec_hidden": [512],
        "edge_hidden": [256],
        # Calibrated so prior decodes land near the data's edge density;
        # reconstruction AUC and node accuracy are threshold-free.
        "threshold": 0.35,
        "init_seed": 0,
    },
    "train": {
        "n": 1,
        "epochs_pretrain": 200,
        "epochs_cd": 40,
        "epochs_full": 150,
        "lr_pretrain": 5e-3,
        "lr_cd": 1e-3,
        "lr_finetune": 5e-4,
        "batch_size": 32,
        "seed": 0,
        "loss_weights": [1.0, 2.0, 0.05],
        "kl_warmup_frac": 0.2,
    },
    "surrogate": {
        "model": {"row_width": 32, "hidden": 256, "guard_eps": 1e-3, "init_seed": 1},
        "train": {
            "n_draws": 1000,
            "holdout_frac": 0.2,
            "epochs": 600,
            "lr": 1e-3,
            "batch_size": 64,
            "seed": 0,
            "min_reciprocity_pairs": 20,
            "ratio_lr": 3e-4,
            "ratio_epochs": 600,
            "ratio_grad_clip": 1.0,
        },
    },
    "explain": {
        "features": ["edge_count", "reciprocity", "betweenness", "non_neuronal"],
        "n_samples": 96,
        "n_background": 32,
        "n_coalitions": 16,
        "bins": 11,
        "min_count": 1,
        "mode": None,
        "seed": 0,
        "sweep_dims": 2,
        "sweep_lo": -2.0,
        "sweep_hi": 2.0,
        "sweep_points": 9,
    },
    "dp": {
        "feature": "edge_count",
        "targets": None,  # explicit list, or None for n_targets even steps
        "n_targets": 10,
        "grid_resolution": None,
        "base_value": None,  # None: reuse the explain report's base value
    },
    "cmaes": {
        "objectives": ["full_adjacency", "degree_stats"],
        "generations": 150,
        "sigma0": 1.0,
        "seed": 0,
        "split": "test",
        "target_index": 0,
        "lam": None,
        "mu": None,
        "tol": None,
    },
    "eval": {
        "n_gen": 50,
        "estimator": "biased",
        "degree_mode": "out",
        "exclude_isolated": False,
        "kernel_bandwidth": None,  # None: pooled median heuristic, logged
    },
    "grid": {
        "mode": "n",  # "n" (schedule repetitions) | "latent" (latent-dim sweep)
        "values": [0, 1],
    },
}


def _deep_update(base: dict, override: dict) -> dict:
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_update(base[key], value)
        else:
            base[key] = value
    return base


def load_run_config(path: Path | None = None, seed: int | None = None,
                    out: Path | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        _deep_update(cfg, json.loads(Path(path).read_text()))
    if seed is not None:
        cfg["seed"] = seed
    env_out = os.environ.get("CONNECTOME_CODEC_OUT")
    if env_out:
        cfg["out_dir"] = env_out
    elif out is not None:
        cfg["out_dir"] = str(out)
    return cfg


def config_hash(cfg: dict) -> str:
    """Hash of the effective config, excluding the output location."""
    stripped = {k: v for k, v in cfg.items() if k != "out_dir"}
    text = json.dumps(stripped, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def _manifest_hash(dataset_dir: Path) -> str | None:
    manifest = dataset_dir / "manifest.json"
    if not manifest.exists():
        return None
    return hashlib.sha256(manifest.read_bytes()).hexdigest()


def _out_root(cfg: dict) -> Path:
    root = Path(cfg["out_dir"])
    root.mkdir(parents=True, exist_ok=True)
    return root


def _dataset_dir(cfg: dict) -> Path:
    return _out_root(cfg) / cfg["data"]["dataset_dir"]


def _write_report(cfg: dict, verb: str, payload: dict) -> Path:
    report = {
        "verb": verb,
        "config_hash": config_hash(cfg),
        "dataset_manifest_hash": _manifest_hash(_dataset_dir(cfg)),
        **payload,
    }
    path = _out_root(cfg) / f"report_{verb.replace('-', '_')}.json"
    path.write_text(json.dumps(report, indent=2, sort_keys=True))
    return path


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join("" if v is None else f"{v:.10g}" if isinstance(v, float) else str(v)
                              for v in row))
    path.write_text("\n".join(lines) + "\n")


def _default_checkpoint(cfg: dict) -> Path:
    return _out_root(cfg) / "checkpoints" / "checkpoint_final.ckpt"


def _load_model(cfg: dict, checkpoint: Path | None) -> tuple[GraphCodec, Path]:
    path = Path(checkpoint) if checkpoint is not None else _default_checkpoint(cfg)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    model, _ = load_checkpoint(path)
    model.eval()
    return model, path


def _load_dataset(cfg: dict) -> Dataset:
    ddir = _dataset_dir(cfg)
    if not (ddir / "manifest.json").exists():
        raise FileNotFoundError(f"no dataset at {ddir}; run `sample` first")
    return Dataset.load(ddir)


def _split_samples(dataset: Dataset, split: str | None):
    name = split or "test"
    return name, dataset.splits()[name]


def cmd_sample(cfg: dict, args) -> dict:
    dcfg = cfg["data"]
    if dcfg["source"] == "synthetic":
        s = dcfg["synthetic"]
        table = synth_connectome(
            n_neurons=s["n_neurons"], box=s["box"], label_mix=s["label_mix"],
            edge_prob_scale=s["edge_prob_scale"], length_scale=s["length_scale"],
            seed=s["seed"])
    elif dcfg["source"] == "files":
        if not dcfg["neurons_csv"] or not dcfg["edges_csv"]:
            raise ValueError("data.source=files requires neurons_csv and edges_csv")
        table = load_connectome(dcfg["neurons_csv"], dcfg["edges_csv"])
    else:
        raise ValueError(f"unknown data source {dcfg['source']!r}")

    dataset = build_dataset(table, n_samples=dcfg["n_samples"], seed=cfg["seed"])
    ddir = _dataset_dir(cfg)
    dataset.save(ddir)
    return {
        "dataset_dir": str(ddir),
        "n_neurons": len(table.neurons),
        "n_edges": int(len(table.edges)),
        "label_counts": table.label_counts(),
        "counts": {name: len(s) for name, s in dataset.splits().items()},
        "split_seed": dataset.split_seed,
    }


def cmd_train(cfg: dict, args) -> dict:
    dataset = _load_dataset(cfg)
    tc = TrainConfig.from_dict(cfg["train"])
    ckpt_dir = _out_root(cfg) / "checkpoints"
    resumed_from = None

    if args.checkpoint is not None:
        model, extra = load_checkpoint(args.checkpoint)
        resumed_from = str(args.checkpoint)
    else:
        model = GraphCodec(ModelConfig.from_dict(cfg["model"]))

    model, history = train_1_2n(dataset, model, tc, out_dir=ckpt_dir)

    history_path = _out_root(cfg) / "history.csv"
    if resumed_from is not None and history_path.exists():
        from .training import read_history_csv
        prior = read_history_csv(history_path)
        marker = {"phase": "resume", "epoch": 0, "loss_total": 0.0, "loss_edge": 0.0,
                  "loss_node": 0.0, "loss_kl": 0.0, "val_edge_auc": None, "val_node_acc": None}
        history = prior + [marker] + history
    write_history_csv(history, history_path)

    final_ckpt = _default_checkpoint(cfg)
    save_checkpoint(final_ckpt, model, extra={"train_config": tc.to_dict(),
                                              "resumed_from": resumed_from})
    val = dataset.validation if dataset.validation else dataset.test
    metrics = evaluate_reconstruction(model, val)
    return {
        "checkpoint": str(final_ckpt),
        "history_csv": str(history_path),
        "resumed_from": resumed_from,
        "epochs_run": len([h for h in history if h["phase"] != "resume"]),
        "validation": {**metrics, "split": "val" if dataset.validation else "test"},
    }


def cmd_eval_recon(cfg: dict, args) -> dict:
    model, ckpt = _load_model(cfg, args.checkpoint)
    dataset = _load_dataset(cfg)
    name, samples = _split_samples(dataset, args.split)
    metrics = evaluate_reconstruction(model, samples)
    return {"checkpoint": str(ckpt), "reconstruction": {**metrics, "split": name}}


def cmd_eval_gen(cfg: dict, args) -> dict:
    model, ckpt = _load_model(cfg, args.checkpoint)
    dataset = _load_dataset(cfg)
    name, reference = _split_samples(dataset, args.split)
    ecfg = cfg["eval"]

    rng = np.random.default_rng(cfg["seed"])
    z = rng.standard_normal((ecfg["n_gen"], model.config.latent_dim))
    dtype = next(model.parameters()).dtype
    generated = []
    with torch.no_grad():
        for start in range(0, len(z), 64):
            dg = model.decode_tensors(torch.as_tensor(z[start:start + 64], dtype=dtype))
            for i in range(len(dg.edge_probs)):
                one = DecodedGraph(edge_probs=dg.edge_probs[i], node_scores=dg.node_scores[i])
                generated.append(discretize(one, model.config.threshold))

    gen_desc = [stats.graph_descriptors(s, ecfg["degree_mode"], ecfg["exclude_isolated"])
                for s in generated]
    ref_desc = [stats.graph_descriptors(s, ecfg["degree_mode"], ecfg["exclude_isolated"])
                for s in reference]
    generation = {"split": name, "n_gen": len(generated), "n_reference": len(reference),
                  "estimator": ecfg["estimator"]}
    for part, family in enumerate(("deg", "clus", "orbit")):
        ga = np.stack([d[part] for d in gen_desc])
        rb = np.stack([d[part] for d in ref_desc])
        bw = (ecfg["kernel_bandwidth"] if ecfg["kernel_bandwidth"] is not None
              else stats.median_heuristic_bandwidth(ga, rb))
        generation[f"{family}_mmd"] = stats.mmd(ga, rb, kernel_bandwidth=bw,
                                                estimator=ecfg["estimator"])
        generation[f"{family}_bandwidth"] = bw
    return {"checkpoint": str(ckpt), "generation": generation}


def cmd_surrogate_train(cfg: dict, args) -> dict:
    model, ckpt = _load_model(cfg, args.checkpoint)
    scfg = SurrogateConfig(n_nodes=model.config.n_nodes, n_classes=model.config.n_classes,
                           **cfg["surrogate"]["model"])
    sset = make_surrogates(scfg)
    if next(model.parameters()).dtype == torch.float64:
        sset = sset.double()
    tcfg = SurrogateTrainConfig.from_dict(cfg["surrogate"]["train"])
    sset, report = train_surrogates(model, sset, tcfg)
    path = _out_root(cfg) / "surrogates.ckpt"
    save_surrogates(path, sset, extra={"checkpoint": str(ckpt)})
    return {"checkpoint": str(ckpt), "surrogates": str(path), "pearson": report}


def _load_surrogate_file(cfg: dict):
    path = _out_root(cfg) / "surrogates.ckpt"
    if not path.exists():
        raise FileNotFoundError(f"no surrogates at {path}; run `surrogate-train` first")
    sset, _ = load_surrogates(path)
    return sset


def cmd_explain(cfg: dict, args) -> dict:
    model, ckpt = _load_model(cfg, args.checkpoint)
    sset = _load_surrogate_file(cfg)
    ecfg = cfg["explain"]
    d = model.config.latent_dim
    out = _out_root(cfg)

    rng = np.random.default_rng(cfg["seed"])
    z_samples = rng.standard_normal((ecfg["n_samples"], d))
    background = rng.standard_normal((ecfg["n_background"], d))

    per_feature = {}
    for feature in ecfg["features"]:
        g = explain.surrogate_predictor(model, sset, feature)
        shap = explain.shap_values(g, z_samples, background,
                                   n_coalitions=ecfg["n_coalitions"],
                                   mode=ecfg["mode"], seed=ecfg["seed"])
        rows = []
        for i in range(shap.phi.shape[0]):
            for j in range(d):
                rows.append([i, j, float(z_samples[i, j]), float(shap.phi[i, j])])
        _write_csv(out / f"shap_{feature}.csv", ["sample_id", "dim", "z_value", "phi"], rows)

        table = explain.build_shap_table(shap, z_samples, bins=ecfg["bins"],
                                         min_count=ecfg["min_count"])
        table.save(out / f"shap_table_{feature}.json")

        mean_abs = np.abs(shap.phi).mean(axis=0)
        top = np.argsort(-mean_abs)[: ecfg["sweep_dims"]]
        grid = np.linspace(ecfg["sweep_lo"], ecfg["sweep_hi"], ecfg["sweep_points"])
        sweep_rows = []
        for dim in top:
            for value, stat in explain.dimension_sweep(model, feature, int(dim), grid):
                sweep_rows.append([int(dim), value, stat])
        _write_csv(out / f"sweep_{feature}.csv", ["dim", "z_value", "stat"], sweep_rows)

        per_feature[feature] = {
            "base_value": shap.base_value,
            "mode": shap.mode,
            "mean_abs_phi": [float(v) for v in mean_abs],
            "shap_csv": str(out / f"shap_{feature}.csv"),
            "table_json": str(out / f"shap_table_{feature}.json"),
            "sweep_csv": str(out / f"sweep_{feature}.csv"),
        }
    return {"checkpoint": str(ckpt), "features": per_feature}


def cmd_dp(cfg: dict, args) -> dict:
    model, ckpt = _load_model(cfg, args.checkpoint)
    sset = _load_surrogate_file(cfg)
    dcfg = cfg["dp"]
    feature = dcfg["feature"]
    out = _out_root(cfg)

    table_path = out / f"shap_table_{feature}.json"
    if not table_path.exists():
        raise FileNotFoundError(f"no table at {table_path}; run `explain` first")
    table = explain.ShapTable.load(table_path)

    base_value = dcfg["base_value"]
    if base_value is None:
        report_path = out / "report_explain.json"
        if not report_path.exists():
            raise FileNotFoundError(
                f"dp.base_value unset and {report_path} missing; run `explain` first")
        base_value = json.loads(report_path.read_text())["features"][feature]["base_value"]

    dp = control.dp_build(table, grid_resolution=dcfg["grid_resolution"])
    sums = dp.reachable_sums()
    lo = base_value + sums[0] * dp.resolution
    hi = base_value + sums[-1] * dp.resolution
    targets = dcfg["targets"]
    if targets is None:
        targets = list(np.linspace(lo, hi, dcfg["n_targets"]))

    g = explain.surrogate_predictor(model, sset, feature)
    true_stat = explain.feature_fn(feature)
    rows = []
    achieved = []
    for t in targets:
        gen = control.dp_generate(dp, base_value, float(t), predictor=g)
        dg = model.decode(gen.z)
        sample = discretize(dg, model.config.threshold)
        actual = true_stat(sample)
        achieved.append(actual)
        rows.append([float(t), gen.dp_prediction, gen.achieved_prediction,
                     actual, gen.gap])
    _write_csv(out / f"dp_{feature}.csv",
               ["target", "dp_prediction", "surrogate_prediction", "true_stat", "gap"], rows)

    defined = [(t, a) for t, a in zip(targets, achieved) if a is not None]
    trend = None
    if len(defined) >= 3:
        from scipy.stats import spearmanr
        trend = float(spearmanr([t for t, _ in defined], [a for _, a in defined]).statistic)
    return {
        "checkpoint": str(ckpt),
        "feature": feature,
        "base_value": base_value,
        "reachable_range": [lo, hi],
        "grid_resolution": dp.resolution,
        "targets": [float(t) for t in targets],
        "true_stats": [None if a is None else float(a) for a in achieved],
        "spearman_trend": trend,
        "table_csv": str(out / f"dp_{feature}.csv"),
    }


def cmd_cmaes(cfg: dict, args) -> dict:
    model, ckpt = _load_model(cfg, args.checkpoint)
    dataset = _load_dataset(cfg)
    ccfg = cfg["cmaes"]
    name, samples = _split_samples(dataset, args.split or ccfg["split"])
    target = samples[ccfg["target_index"]]
    out = _out_root(cfg)

    gen_cfg = control.CmaesGenConfig(generations=ccfg["generations"], seed=ccfg["seed"],
                                     sigma0=ccfg["sigma0"], lam=ccfg["lam"], mu=ccfg["mu"],
                                     tol=ccfg["tol"])
    runs = []
    for objective in ccfg["objectives"]:
        z_star, metrics = control.cmaes_generate(model, target, objective, gen_cfg)
        trace = metrics.pop("best_fitness_trace")
        _write_csv(out / f"cmaes_trace_{objective}.csv", ["generation", "best_fitness"],
                   [[i + 1, v] for i, v in enumerate(trace)])
        runs.append({**metrics, "z_star": [float(v) for v in z_star],
                     "trace_csv": str(out / f"cmaes_trace_{objective}.csv")})
    return {"checkpoint": str(ckpt), "split": name,
            "target_index": ccfg["target_index"], "runs": runs}


def cmd_grid(cfg: dict, args) -> dict:
    dataset = _load_dataset(cfg)
    gcfg = cfg["grid"]
    out = _out_root(cfg)
    rows = []
    for value in gcfg["values"]:
        mc = ModelConfig.from_dict(cfg["model"])
        tc = TrainConfig.from_dict(cfg["train"])
        if gcfg["mode"] == "n":
            tc = TrainConfig.from_dict({**cfg["train"], "n": int(value)})
            tag = f"n{value}"
        elif gcfg["mode"] == "latent":
            mc = ModelConfig.from_dict({**cfg["model"], "latent_dim": int(value)})
            tag = f"d{value}"
        else:
            raise ValueError(f"grid.mode must be 'n' or 'latent', got {gcfg['mode']!r}")
        model = GraphCodec(mc)
        model, history = train_1_2n(dataset, model, tc)
        write_history_csv(history, out / f"history_{tag}.csv")
        val = dataset.validation if dataset.validation else dataset.test
        metrics = evaluate_reconstruction(model, val)
        rows.append({"cell": tag, gcfg["mode"]: int(value), **metrics})

    _write_csv(out / "grid.csv",
               [gcfg["mode"], "edge_auc", "edge_acc", "node_acc", "node_f1"],
               [[r[gcfg["mode"]], r["edge_auc"], r["edge_acc"], r["node_acc"], r["node_f1"]]
                for r in rows])
    return {"mode": gcfg["mode"], "cells": rows, "grid_csv": str(out / "grid.csv")}


_DISPATCH = {
    "sample": cmd_sample,
    "train": cmd_train,
    "eval-recon": cmd_eval_recon,
    "eval-gen": cmd_eval_gen,
    "surrogate-train": cmd_surrogate_train,
    "explain": cmd_explain,
    "dp-generate": cmd_dp,
    "cmaes-generate": cmd_cmaes,
    "grid": cmd_grid,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="run config JSON")
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--out", type=Path, default=None, help="output root directory")
    common.add_argument("--checkpoint", type=Path, default=None, help="model checkpoint path")
    common.add_argument("--split", choices=("train", "test", "val"), default=None)
    parser = argparse.ArgumentParser(prog="connectome-codec",
                                     description="compress, explain, and steer connectome subgraphs")
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in VERBS:
        sub.add_parser(verb, parents=[common])
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_run_config(args.config, seed=args.seed, out=args.out)
        payload = _DISPATCH[args.verb](cfg, args)
        path = _write_report(cfg, args.verb, payload)
    except (CodecError, OSError, ValueError, KeyError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"report: {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
