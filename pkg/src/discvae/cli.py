"""Command-line entry point: gen-data, train, eval, sample, select-k, report.

Every run resolves one configuration (defaults < YAML file < flags), writes it
as ``config.yaml`` into its output directory and derives independent seeds for
data, initialisation, training and evaluation from one root seed.
"""

import argparse
import csv
import json
import logging
import os
import shutil
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import torch
import yaml

from . import dataset, evaluation, synthdata
from .checkpoint import MODEL_KINDS, build_model, load_checkpoint, restore_optimizer, save_checkpoint
from .core import ContractError
from .model import ModelConfig
from .training import TrainConfig, TrainingDiverged, make_optimizer, train, write_history

log = logging.getLogger("discvae")

OUT_ENV = "DISCVAE_OUT"
COMMANDS = ("gen-data", "train", "eval", "sample", "select-k", "report")
SUBSYSTEMS = ("data", "init", "train", "eval")

DATA_KEYS = {f.name for f in fields(dataset.DataConfig)} - {"seed"}
MODEL_KEYS = {f.name for f in fields(ModelConfig)} | {"kind"}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"seed"}
EVAL_KEYS = {"knn_k", "horizon", "candidates", "prefix_index", "samples", "plot"}
PATH_KEYS = {"data", "checkpoint", "out", "resume", "reports"}


def default_config():
    data = dataset.DataConfig()
    cfg = {
        "command": None,
        "seed": 0,
        "data": {f.name: getattr(data, f.name) for f in fields(data) if f.name != "seed"},
        "model": {"kind": "discvae", **ModelConfig().to_dict()},
        "train": {k: v for k, v in TrainConfig().to_dict().items() if k != "seed"},
        "eval": {"knn_k": evaluation.DEFAULT_KNN_K, "horizon": 10, "candidates": [5, 9, 13, 17],
                 "prefix_index": 0, "samples": 3, "plot": False},
        "paths": {k: None for k in sorted(PATH_KEYS)},
    }
    cfg["data"]["episodes_per_map"] = list(cfg["data"]["episodes_per_map"])
    return cfg


def merge_config(base, override, where="config"):
    """Recursive merge that rejects keys the base does not know."""
    out = dict(base)
    for k, v in override.items():
        if k not in base:
            raise ContractError(f"unknown key {where}.{k}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ContractError(f"{where}.{k} must be a mapping")
            out[k] = merge_config(base[k], v, f"{where}.{k}")
        else:
            out[k] = v
    return out


FLAG_TARGETS = {
    "seed": ("seed",),
    "model": ("model", "kind"),
    "k": ("model", "n_clusters"),
    "dim_global": ("model", "dim_global"),
    "dim_local": ("model", "dim_local"),
    "hidden": ("model", "hidden"),
    "local_hidden": ("model", "local_hidden"),
    "beams": ("data", "beams"),
    "horizon": ("eval", "horizon"),
    "epochs": ("train", "max_epochs"),
    "knn_k": ("eval", "knn_k"),
    "candidates": ("eval", "candidates"),
    "prefix_index": ("eval", "prefix_index"),
    "samples": ("eval", "samples"),
    "plot": ("eval", "plot"),
    "out": ("paths", "out"),
    "data": ("paths", "data"),
    "checkpoint": ("paths", "checkpoint"),
    "resume": ("paths", "resume"),
    "reports": ("paths", "reports"),
}


def resolve_config(args):
    cfg = default_config()
    explicit = set()
    if args.config:
        text = Path(args.config).read_text()
        loaded = yaml.safe_load(text) or {}
        if not isinstance(loaded, dict):
            raise ContractError("config file must hold a mapping")
        cfg = merge_config(cfg, loaded)
        explicit |= set(loaded.get("data") or {})
    if getattr(args, "beams", None) is not None:
        explicit.add("beams")
    for flag, target in FLAG_TARGETS.items():
        value = getattr(args, flag, None)
        if value is None or value is False:
            continue
        node = cfg
        for key in target[:-1]:
            node = node[key]
        node[target[-1]] = value
    # beams and window are shared between the data and the model
    cfg["model"]["beams"] = cfg["data"]["beams"]
    cfg["model"]["window"] = cfg["data"]["window"]
    if cfg["model"]["kind"] not in MODEL_KINDS:
        raise ContractError(f"unknown model kind {cfg['model']['kind']!r}; expected one of {MODEL_KINDS}")
    cfg["command"] = args.command
    return cfg, explicit


def subsystem_seeds(root_seed):
    """One independent integer seed per subsystem, spawned from the root seed."""
    children = np.random.SeedSequence(int(root_seed)).spawn(len(SUBSYSTEMS))
    return {name: int(child.generate_state(1)[0]) for name, child in zip(SUBSYSTEMS, children)}


def data_config(cfg):
    return dataset.DataConfig(seed=subsystem_seeds(cfg["seed"])["data"], **cfg["data"])


def model_config(cfg):
    return ModelConfig.from_dict({k: v for k, v in cfg["model"].items() if k != "kind"})


def train_config(cfg):
    return TrainConfig.from_dict({**cfg["train"], "seed": subsystem_seeds(cfg["seed"])["train"]})


def output_dir(cfg):
    out = cfg["paths"]["out"]
    if out is None:
        root = os.environ.get(OUT_ENV, "runs")
        public = {k: v for k, v in cfg.items() if not k.startswith("_")}
        out = str(Path(root) / f"{cfg['command']}-{evaluation.config_hash(public)}")
        cfg["paths"]["out"] = out
    return Path(out)


def write_config(directory, cfg):
    public = {k: v for k, v in cfg.items() if not k.startswith("_")}
    (Path(directory) / "config.yaml").write_text(yaml.safe_dump(public, sort_keys=True))


def _require(cfg, key):
    value = cfg["paths"][key]
    if value is None:
        raise ContractError(f"--{key} is required for {cfg['command']}")
    return Path(value)


def _check_data_matches(manifest, mcfg):
    if manifest["beams"] != mcfg.beams or manifest["window"] != mcfg.window:
        raise ContractError(f"dataset has beams={manifest['beams']} window={manifest['window']}, "
                            f"model expects beams={mcfg.beams} window={mcfg.window}")


def _load_data(cfg):
    """Load a dataset; its manifest fixes beams and window unless a flag contradicts it."""
    root = _require(cfg, "data")
    batches, stats, manifest = dataset.load_batches(root)
    for key in ("beams", "window"):
        if key in cfg.get("_explicit", ()) and cfg["data"][key] != manifest[key]:
            raise ContractError(f"requested {key}={cfg['data'][key]} but dataset {root} has {manifest[key]}")
        cfg["model"][key] = manifest[key]
    for key in DATA_KEYS & set(manifest):
        cfg["data"][key] = manifest[key]
    return batches, stats, manifest


# -- commands -----------------------------------------------------------------


def cmd_gen_data(cfg, out):
    dcfg = data_config(cfg)
    windows, stats = dataset.generate_dataset(dcfg)
    manifest = dataset.save_dataset(out, windows, stats, dcfg)
    log.info("wrote %s", {s: v["count"] for s, v in manifest["splits"].items()})
    return manifest


def cmd_train(cfg, out):
    batches, stats, manifest = _load_data(cfg)
    mcfg = model_config(cfg)
    _check_data_matches(manifest, mcfg)
    tcfg = train_config(cfg)
    seeds = subsystem_seeds(cfg["seed"])
    start_step = start_epoch = 0
    resume = cfg["paths"]["resume"]
    if resume:
        model, ck = load_checkpoint(resume)
        if ck["kind"] != cfg["model"]["kind"] or ck["config"] != mcfg.to_dict():
            raise ContractError("resume checkpoint does not match the requested model configuration")
        optimizer = make_optimizer(model, tcfg)
        restore_optimizer(resume, model, optimizer, ck)
        start_step, start_epoch = ck["step"], ck["epoch"]
    else:
        torch.manual_seed(seeds["init"])
        model = build_model(cfg["model"]["kind"], mcfg)
        optimizer = make_optimizer(model, tcfg)
    result = train(model, batches["train"], batches["validation"], tcfg, optimizer=optimizer,
                   start_step=start_step, start_epoch=start_epoch)
    save_checkpoint(out / "checkpoint", result.model, normalization=stats.to_dict(), seed=cfg["seed"],
                    step=result.step, epoch=result.epoch, optimizer=result.optimizer,
                    extra={"best_epoch": result.best_epoch, "stopped_early": result.stopped_early})
    write_history(out / "history.csv", result.history)
    log.info("trained %s: %d epochs, best %d", cfg["model"]["kind"], result.epoch, result.best_epoch)
    return result


def cmd_eval(cfg, out):
    batches, _, manifest = _load_data(cfg)
    model, ck = load_checkpoint(_require(cfg, "checkpoint"))
    _check_data_matches(manifest, model.config)
    torch.manual_seed(subsystem_seeds(cfg["seed"])["eval"])
    rep = evaluation.evaluate(model, batches["train"], batches["test"], knn_k=cfg["eval"]["knn_k"],
                              horizon=cfg["eval"]["horizon"], forecast_data=batches.get(dataset.FORECAST_SPLIT),
                              seeds={"root": cfg["seed"], "checkpoint": ck.get("seed")},
                              config={"model": ck["config"], "kind": ck["kind"], "eval": cfg["eval"]})
    rep.save(out)
    log.info("accuracy %.2f f1 %.3f", rep.accuracy, rep.f1)
    return rep


def cmd_sample(cfg, out):
    batches, stats, manifest = _load_data(cfg)
    model, _ = load_checkpoint(_require(cfg, "checkpoint"))
    _check_data_matches(manifest, model.config)
    if not hasattr(model, "predict_rollout"):
        raise ContractError(f"{model.kind} cannot generate rollouts")
    ev = cfg["eval"]
    horizon, n_samples = ev["horizon"], ev["samples"]
    test = batches["test"]
    if not 0 <= ev["prefix_index"] < len(test):
        raise ContractError(f"prefix_index {ev['prefix_index']} outside the {len(test)} test windows")
    b = test.subset(torch.tensor([ev["prefix_index"]]))
    gen = torch.Generator().manual_seed(subsystem_seeds(cfg["seed"])["eval"])
    K = getattr(model, "n_clusters", 1)
    if hasattr(model, "cluster_posterior"):
        probs = model.cluster_posterior(b.joystick, b.laser).probs[0].numpy()
    else:
        probs = np.ones(1)
    with open(out / "q_y.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["cluster", "probability"])
        for k, p in enumerate(probs):
            w.writerow([k, f"{p:.9g}"])
    paths = {}
    for c in range(K):
        rows, paths[c] = [], []
        for s in range(n_samples):
            override = c if model.kind == "discvae" else None
            roll = model.predict_rollout(b.joystick, b.laser, horizon, generator=gen, override_cluster=override)
            cmds = stats.denormalize_joystick(roll.joystick[0].numpy())
            poses = synthdata.integrate_commands(cmds)[1:]
            paths[c].append(poses)
            for t, ((v, om), (x, y, th)) in enumerate(zip(cmds, poses)):
                rows.append([s, t + 1, f"{v:.6g}", f"{om:.6g}", f"{x:.6g}", f"{y:.6g}", f"{th:.6g}"])
        with open(out / f"cluster_{c:02d}.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["sample", "step", "v", "omega", "x", "y", "theta"])
            w.writerows(rows)
    if ev["plot"]:
        _plot_samples(out / "samples.svg", probs, paths)
    return probs, paths


def _plot_samples(path, probs, paths):
    try:
        import matplotlib
    except ImportError as e:
        raise ContractError("--plot needs matplotlib; install the 'plot' extra") from e

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, (ax_h, ax_t) = plt.subplots(1, 2, figsize=(10, 4))
    ax_h.bar(range(len(probs)), probs)
    ax_h.set_xlabel("cluster")
    ax_h.set_ylabel("q(y | prefix)")
    cmap = plt.get_cmap("tab20")
    for c, runs in paths.items():
        for i, poses in enumerate(runs):
            ax_t.plot(poses[:, 0], poses[:, 1], color=cmap(c % 20), label=f"y={c}" if i == 0 else None)
    ax_t.set_aspect("equal", adjustable="datalim")
    ax_t.set_xlabel("x (m)")
    ax_t.set_ylabel("y (m)")
    ax_t.legend(fontsize=6, ncol=2)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def cmd_select_k(cfg, out):
    batches, _, manifest = _load_data(cfg)
    mcfg = model_config(cfg)
    _check_data_matches(manifest, mcfg)
    tcfg = train_config(cfg)
    rows = evaluation.select_k(batches["train"], batches["validation"], batches["test"],
                               cfg["eval"]["candidates"], mcfg, tcfg,
                               init_seed=subsystem_seeds(cfg["seed"])["init"])
    with open(out / "select_k.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["K", "nmi", "nmi_modes"], lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({"K": r["K"], "nmi": f"{r['nmi']:.6g}", "nmi_modes": f"{r['nmi_modes']:.6g}"})
    return rows


def cmd_report(cfg, out):
    """Gather report.json files under ``--reports`` into one comparison table."""
    root = _require(cfg, "reports")
    found = sorted(root.rglob("report.json"))
    if not found:
        raise ContractError(f"no report.json under {root}")
    cols = ["model", "accuracy", "f1", "a_mse", "l_mse", "nmi", "nmi_modes", "source"]
    rows = []
    for p in found:
        rep = json.loads(p.read_text())
        rows.append({**{k: rep.get(k) for k in cols[:-1]}, "source": str(p.parent)})
    with open(out / "summary.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: "-" if r[k] is None else r[k] for k in cols})
    by_model = {}
    for r in rows:
        by_model.setdefault(r["model"], []).append(r)
    lines = ["| model | runs | acc (%) | F1 | a_MSE | l_MSE |", "|---|---|---|---|---|---|"]
    for name, rs in sorted(by_model.items()):
        def stat(key):
            vals = [r[key] for r in rs if r[key] is not None]
            return f"{np.mean(vals):.3g} ± {np.std(vals):.2g}" if vals else "-"
        lines.append(f"| {name} | {len(rs)} | {stat('accuracy')} | {stat('f1')} | {stat('a_mse')} | {stat('l_mse')} |")
    (out / "summary.md").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return rows


HANDLERS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "sample": cmd_sample,
            "select-k": cmd_select_k, "report": cmd_report}


def build_parser():
    parser = argparse.ArgumentParser(prog="discvae", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML file; flags override its values")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help=f"output directory (default: ${OUT_ENV}/<command>-<hash>)")
        if name in ("gen-data", "train", "select-k"):
            p.add_argument("--beams", type=int)
        if name in ("train", "eval", "sample", "select-k"):
            p.add_argument("--data", help="dataset directory")
        if name in ("train", "select-k"):
            p.add_argument("--model", choices=MODEL_KINDS)
            p.add_argument("--k", type=int, help="cluster count K")
            p.add_argument("--dim-global", type=int)
            p.add_argument("--dim-local", type=int)
            p.add_argument("--hidden", type=int)
            p.add_argument("--local-hidden", type=int)
            p.add_argument("--epochs", type=int)
        if name == "train":
            p.add_argument("--resume", help="checkpoint directory to continue from")
        if name in ("eval", "sample"):
            p.add_argument("--checkpoint", help="checkpoint directory")
            p.add_argument("--horizon", type=int)
        if name == "eval":
            p.add_argument("--knn-k", type=int)
        if name == "sample":
            p.add_argument("--prefix-index", type=int, help="test window used as the prefix")
            p.add_argument("--samples", type=int, help="rollouts per cluster")
            p.add_argument("--plot", action="store_true", help="also write samples.svg")
        if name == "select-k":
            p.add_argument("--candidates", type=lambda s: [int(v) for v in s.split(",")])
        if name == "report":
            p.add_argument("--reports", help="directory searched for report.json files")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = None
    created = False
    try:
        cfg, explicit = resolve_config(args)
        cfg["_explicit"] = explicit
        out = output_dir(cfg)
        created = not out.exists()
        out.mkdir(parents=True, exist_ok=True)
        HANDLERS[args.command](cfg, out)
        write_config(out, cfg)
    except (ContractError, TrainingDiverged, FileNotFoundError, OSError, yaml.YAMLError, TypeError) as exc:
        if created and out is not None:
            shutil.rmtree(out, ignore_errors=True)
        print(f"discvae {args.command}: error: {exc}", file=sys.stderr)
        return 2
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
