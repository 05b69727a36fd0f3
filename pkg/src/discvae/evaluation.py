"""Measurement suite: latent KNN probe, accuracy/F1, NMI, forecast error and cluster reports."""

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import synthdata
from .core import ContractError

DEFAULT_KNN_K = 5


# -- metrics ----------------------------------------------------------------


def knn_classify(train_z, train_labels, test_z, k=DEFAULT_KNN_K):
    """Euclidean k-NN majority vote; a tied vote goes to the tied label seen nearest."""
    train_z = np.asarray(train_z, dtype=np.float64)
    test_z = np.asarray(test_z, dtype=np.float64)
    train_labels = np.asarray(train_labels)
    if len(train_z) == 0:
        raise ContractError("knn needs a non-empty training set")
    if not 1 <= k <= len(train_z):
        raise ContractError(f"k={k} must lie in [1, {len(train_z)}]")
    preds = np.empty(len(test_z), dtype=train_labels.dtype)
    for start in range(0, len(test_z), 512):
        chunk = test_z[start:start + 512]
        d2 = ((chunk[:, None, :] - train_z[None, :, :]) ** 2).sum(-1)
        nearest = np.argsort(d2, axis=1, kind="stable")[:, :k]
        for i, idx in enumerate(nearest):
            labs = train_labels[idx]
            values, counts = np.unique(labs, return_counts=True)
            tied = set(values[counts == counts.max()].tolist())
            preds[start + i] = next(lab for lab in labs if lab in tied)
    return preds


def accuracy_f1(predictions, labels, n_classes):
    """(accuracy in percent, macro-F1 over all n_classes; classes never seen score 0)."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ContractError("predictions and labels differ in length")
    acc = 100.0 * float(np.mean(predictions == labels)) if len(labels) else 0.0
    f1s = []
    for c in range(n_classes):
        tp = np.sum((predictions == c) & (labels == c))
        fp = np.sum((predictions == c) & (labels != c))
        fn = np.sum((predictions != c) & (labels == c))
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1s.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
    return acc, float(np.mean(f1s))


def _entropy(counts):
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def nmi(assignments, labels):
    """Mutual information over the arithmetic mean of the two entropies."""
    a = np.asarray(assignments)
    b = np.asarray(labels)
    if a.shape != b.shape:
        raise ContractError("assignments and labels differ in length")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1 if len(a) else 0, bi.max() + 1 if len(b) else 0))
    np.add.at(table, (ai, bi), 1)
    ha, hb = _entropy(table.sum(1)), _entropy(table.sum(0))
    if ha == 0 or hb == 0:
        return 0.0
    n = table.sum()
    nz = table > 0
    outer = np.outer(table.sum(1), table.sum(0))
    mi = float((table[nz] / n * np.log(table[nz] * n / outer[nz])).sum())
    return float(np.clip(mi / (0.5 * (ha + hb)), 0.0, 1.0))


# -- model probes -------------------------------------------------------------


@torch.no_grad()
def latents(model, data, chunk=512):
    return torch.cat([model.latent(b.joystick, b.laser) for b in data.batches(chunk)]).numpy()


@torch.no_grad()
def assignments(model, data, chunk=512):
    return torch.cat([model.assign_cluster(b.joystick, b.laser) for b in data.batches(chunk)]).numpy()


@torch.no_grad()
def forecast_mse(model, data, prefix_len=10, horizon=10, chunk=512):
    """Per-modality MSE of mean rollouts against the true continuation (normalised units)."""
    T = data.joystick.shape[1]
    if prefix_len < 1 or prefix_len + horizon > T:
        raise ContractError(f"windows of length {T} cannot hold prefix {prefix_len} + horizon {horizon}")
    sq_a, sq_l, n = 0.0, 0.0, 0
    for b in data.batches(chunk):
        roll = model.predict_rollout(b.joystick[:, :prefix_len], b.laser[:, :prefix_len], horizon, mean=True)
        truth_a = b.joystick[:, prefix_len:prefix_len + horizon]
        truth_l = b.laser[:, prefix_len:prefix_len + horizon]
        sq_a += float(((roll.joystick - truth_a) ** 2).mean(dim=(1, 2)).sum())
        sq_l += float(((roll.laser - truth_l) ** 2).mean(dim=(1, 2)).sum())
        n += len(b)
    return sq_a / n, sq_l / n


def cluster_histograms(assigned, manoeuvre, narrow, n_clusters):
    """(K x 6 counts by manoeuvre, K x 2 counts by wide/narrow)."""
    by_man = np.zeros((n_clusters, len(synthdata.MANOEUVRES)), dtype=np.int64)
    by_space = np.zeros((n_clusters, 2), dtype=np.int64)
    np.add.at(by_man, (assigned, manoeuvre), 1)
    np.add.at(by_space, (assigned, narrow), 1)
    return by_man, by_space


def cluster_report(model, data):
    assigned = assignments(model, data)
    return cluster_histograms(assigned, data.manoeuvre.numpy(), data.narrow.numpy(), model.n_clusters)


@torch.no_grad()
def cluster_trajectory_spread(model, data, stats, n_prefixes=8, samples_per_cluster=4, prefix_len=10,
                              horizon=10, seed=0):
    """Mean pairwise distance between integrated rollout paths across vs within clusters.

    Decoded joystick commands are denormalised and driven through unicycle
    kinematics from the origin; distance is the mean point-wise gap.
    """
    gen = torch.Generator().manual_seed(seed)
    K = model.n_clusters
    inter, intra = [], []
    for i in range(min(n_prefixes, len(data))):
        b = data.subset(torch.tensor([i]))
        paths = []
        for c in range(K):
            for _ in range(samples_per_cluster):
                roll = model.predict_rollout(b.joystick[:, :prefix_len], b.laser[:, :prefix_len], horizon,
                                             generator=gen, override_cluster=c)
                cmds = stats.denormalize_joystick(roll.joystick[0].numpy())
                paths.append((c, synthdata.integrate_commands(cmds)[1:, :2]))
        for a in range(len(paths)):
            for bb in range(a + 1, len(paths)):
                d = float(np.linalg.norm(paths[a][1] - paths[bb][1], axis=1).mean())
                (intra if paths[a][0] == paths[bb][0] else inter).append(d)
    return float(np.mean(inter)), float(np.mean(intra))


# -- reports ----------------------------------------------------------------


@dataclass
class EvalReport:
    model: str
    knn_k: int
    accuracy: float | None = None
    f1: float | None = None
    a_mse: float | None = None
    l_mse: float | None = None
    nmi: float | None = None
    nmi_modes: float | None = None
    n_train: int = 0
    n_test: int = 0
    prefix_len: int = 10
    horizon: int = 10
    seeds: dict = field(default_factory=dict)
    config_hash: str = ""
    by_manoeuvre: list | None = None
    by_space: list | None = None

    def to_dict(self):
        return asdict(self)

    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "report.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        with open(d / "metrics.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["model", "acc", "f1", "a_mse", "l_mse", "nmi"])
            w.writerow([self.model] + ["-" if v is None else f"{v:.6g}"
                                       for v in (self.accuracy, self.f1, self.a_mse, self.l_mse, self.nmi)])
        if self.by_manoeuvre is not None:
            _write_hist(d / "clusters_by_manoeuvre.csv", ["cluster", *synthdata.MANOEUVRES], self.by_manoeuvre)
            _write_hist(d / "clusters_by_space.csv", ["cluster", "wide", "narrow"], self.by_space)


def _write_hist(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for k, row in enumerate(rows):
            w.writerow([k, *row])


def config_hash(config):
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


def evaluate(model, train_data, test_data, knn_k=DEFAULT_KNN_K, horizon=10, forecast_data=None,
             seeds=None, config=None):
    """Every metric the model kind supports, on the test split.

    Forecasts roll out ``horizon`` steps after a full training-length prefix
    when ``forecast_data`` holds long enough windows; otherwise the test
    windows are split into prefix and continuation.
    """
    T = test_data.joystick.shape[1]
    if forecast_data is not None and forecast_data.joystick.shape[1] >= T + horizon:
        prefix_len, fdata = T, forecast_data
    else:
        prefix_len, fdata = T - horizon, test_data
    rep = EvalReport(model=model.kind, knn_k=knn_k, n_train=len(train_data), n_test=len(test_data),
                     prefix_len=prefix_len, horizon=horizon, seeds=seeds or {},
                     config_hash=config_hash(config or {}))
    n_classes = synthdata.N_CLASSES
    if model.kind == "bilstm":
        with torch.no_grad():
            preds = torch.cat([model.classify(b.joystick, b.laser).argmax(-1)
                               for b in test_data.batches(512)]).numpy()
    else:
        preds = knn_classify(latents(model, train_data), train_data.labels.numpy(),
                             latents(model, test_data), knn_k)
    rep.accuracy, rep.f1 = accuracy_f1(preds, test_data.labels.numpy(), n_classes)
    if hasattr(model, "predict_rollout"):
        rep.a_mse, rep.l_mse = forecast_mse(model, fdata, prefix_len, horizon)
    if model.kind in ("discvae", "gmvae"):
        assigned = assignments(model, test_data)
        rep.nmi = nmi(assigned, test_data.labels.numpy())
        rep.nmi_modes = nmi(assigned, test_data.mode.numpy())
        by_man, by_space = cluster_histograms(assigned, test_data.manoeuvre.numpy(), test_data.narrow.numpy(),
                                              model.n_clusters)
        rep.by_manoeuvre, rep.by_space = by_man.tolist(), by_space.tolist()
    for k in ("accuracy", "f1", "a_mse", "l_mse", "nmi", "nmi_modes"):
        v = getattr(rep, k)
        if v is not None and not math.isfinite(v):
            raise ContractError(f"non-finite metric {k}")
    return rep


def select_k(train_data, val_data, eval_data, candidates, model_config, train_config, init_seed=0):
    """Train one DiSCVAE per cluster count and tabulate NMI on ``eval_data``."""
    from dataclasses import replace

    from .checkpoint import build_model
    from .training import train

    rows = []
    for K in candidates:
        torch.manual_seed(init_seed)
        model = build_model("discvae", replace(model_config, n_clusters=K))
        train(model, train_data, val_data, train_config)
        assigned = assignments(model, eval_data)
        rows.append({"K": K, "nmi": nmi(assigned, eval_data.labels.numpy()),
                     "nmi_modes": nmi(assigned, eval_data.mode.numpy())})
    return rows
