"""Checkpoint directories: one raw little-endian float32 blob per tensor plus a JSON manifest."""

import json
from pathlib import Path

import numpy as np
import torch

from .baselines import VRNN, BiLSTMClassifier, DSeqVAE
from .core import ContractError
from .gmvae import GMVAE
from .model import DiSCVAE, ModelConfig

MODEL_KINDS = ("discvae", "gmvae", "vrnn", "dseqvae", "bilstm")
FORMAT_VERSION = 1


def build_model(kind, config: ModelConfig):
    if kind == "discvae":
        return DiSCVAE(config)
    if kind == "dseqvae":
        return DSeqVAE(config)
    if kind == "vrnn":
        return VRNN(config)
    if kind == "bilstm":
        return BiLSTMClassifier(config)
    if kind == "gmvae":
        step_var = [config.joystick_var] * config.joystick_dim + [config.laser_var] * config.beams
        m = GMVAE(config.window * (config.joystick_dim + config.beams), config.n_clusters,
                  config.dim_global, config.hidden, step_var * config.window)
        m.config = config
        return m
    raise ContractError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")


def _blob_name(name):
    return name + ".f32"


def _write(path, tensor):
    np.ascontiguousarray(tensor.detach().cpu().numpy(), dtype="<f4").tofile(path)


def _read(path, shape):
    return torch.from_numpy(np.fromfile(path, dtype="<f4").reshape(shape).copy())


def save_checkpoint(directory, model, *, normalization=None, seed=None, step=0, epoch=0,
                    optimizer=None, extra=None):
    d = Path(directory)
    (d / "tensors").mkdir(parents=True, exist_ok=True)
    tensors = []
    for name, t in model.state_dict().items():
        _write(d / "tensors" / _blob_name(name), t)
        tensors.append({"name": name, "shape": list(t.shape), "dtype": "float32", "file": f"tensors/{_blob_name(name)}"})
    manifest = {
        "format": FORMAT_VERSION,
        "kind": model.kind,
        "config": model.config.to_dict(),
        "normalization": normalization,
        "seed": seed,
        "step": step,
        "epoch": epoch,
        "tensors": tensors,
        "optimizer": None,
    }
    if optimizer is not None:
        manifest["optimizer"] = _save_optimizer(d, model, optimizer)
    if extra:
        manifest.update(extra)
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _save_optimizer(d, model, optimizer):
    (d / "optimizer").mkdir(exist_ok=True)
    entries = []
    for name, p in model.named_parameters():
        st = optimizer.state.get(p)
        if not st:
            continue
        for key in ("exp_avg", "exp_avg_sq"):
            _write(d / "optimizer" / _blob_name(f"{name}.{key}"), st[key])
        entries.append({"name": name, "shape": list(p.shape), "step": int(st["step"])})
    return {"params": entries}


def load_manifest(directory):
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {path}")
    return json.loads(path.read_text())


def load_checkpoint(directory):
    """(model, manifest); tensors are restored bit-exactly as float32."""
    d = Path(directory)
    manifest = load_manifest(d)
    model = build_model(manifest["kind"], ModelConfig.from_dict(manifest["config"]))
    state = {}
    expected = model.state_dict()
    for entry in manifest["tensors"]:
        if entry["name"] not in expected:
            raise ContractError(f"checkpoint tensor {entry['name']} does not belong to a {manifest['kind']} model")
        if list(expected[entry["name"]].shape) != entry["shape"]:
            raise ContractError(f"shape mismatch for {entry['name']}")
        state[entry["name"]] = _read(d / entry["file"], entry["shape"])
    model.load_state_dict(state)
    return model, manifest


def restore_optimizer(directory, model, optimizer, manifest):
    info = manifest.get("optimizer")
    if not info:
        return
    d = Path(directory)
    params = dict(model.named_parameters())
    for entry in info["params"]:
        p = params[entry["name"]]
        optimizer.state[p] = {
            "step": torch.tensor(float(entry["step"])),
            "exp_avg": _read(d / "optimizer" / _blob_name(f"{entry['name']}.exp_avg"), entry["shape"]),
            "exp_avg_sq": _read(d / "optimizer" / _blob_name(f"{entry['name']}.exp_avg_sq"), entry["shape"]),
        }
