"""Windowed sequence datasets: assembly from episodes, normalisation and on-disk format.

On disk a dataset is a directory with ``manifest.json`` and one directory per
split holding raw little-endian float32 blobs ``commands.f32`` (N, T, 2) and
``ranges.f32`` (N, T, B), the integer table ``labels.csv``
(class, manoeuvre, narrow) and ``meta.csv`` (episode, map, mode).
The ``forecast`` split cuts the test episodes into longer windows of
T + horizon steps so rollouts can be scored against a full-length prefix.
Blobs hold raw physical units; normalisation statistics live in the manifest.
"""

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import synthdata
from .core import ContractError

log = logging.getLogger(__name__)

SPLITS = ("train", "validation", "test")
FORECAST_SPLIT = "forecast"
TRAIN_MAPS = (1, 2)
TEST_MAPS = (3,)
FORMAT_VERSION = 1


@dataclass
class NormStats:
    joystick_mean: np.ndarray
    joystick_std: np.ndarray
    laser_mean: np.ndarray
    laser_std: np.ndarray

    @classmethod
    def fit(cls, commands, ranges):
        """Per-channel statistics over every (window, step) of the training split."""
        c = commands.reshape(-1, commands.shape[-1]).astype(np.float64)
        r = ranges.reshape(-1, ranges.shape[-1]).astype(np.float64)
        return cls(c.mean(0), np.maximum(c.std(0), 1e-6), r.mean(0), np.maximum(r.std(0), 1e-6))

    def to_dict(self):
        return {k: [float(v) for v in getattr(self, k)]
                for k in ("joystick_mean", "joystick_std", "laser_mean", "laser_std")}

    @classmethod
    def from_dict(cls, d):
        return cls(*(np.asarray(d[k], dtype=np.float64)
                     for k in ("joystick_mean", "joystick_std", "laser_mean", "laser_std")))

    def normalize(self, commands, ranges):
        return ((commands - self.joystick_mean) / self.joystick_std,
                (ranges - self.laser_mean) / self.laser_std)

    def denormalize_joystick(self, joystick):
        return np.asarray(joystick) * self.joystick_std + self.joystick_mean

    def denormalize_laser(self, laser):
        return np.asarray(laser) * self.laser_std + self.laser_mean


@dataclass
class WindowSet:
    """Raw (unnormalised) windows of one split."""

    commands: np.ndarray  # (N, T, 2) float32
    ranges: np.ndarray  # (N, T, B) float32
    labels: np.ndarray  # (N, 3) int: class, manoeuvre, narrow
    meta: np.ndarray  # (N, 3) int: episode, map, mode

    def __len__(self):
        return len(self.commands)


@dataclass
class SequenceBatch:
    """Normalised windows as tensors, plus labels and provenance."""

    joystick: torch.Tensor
    laser: torch.Tensor
    labels: torch.Tensor
    manoeuvre: torch.Tensor
    narrow: torch.Tensor
    mode: torch.Tensor
    episode: torch.Tensor
    map_id: torch.Tensor

    def __len__(self):
        return self.joystick.shape[0]

    def subset(self, idx):
        return SequenceBatch(*(getattr(self, f)[idx] for f in self.__dataclass_fields__))

    def to(self, dtype):
        return SequenceBatch(self.joystick.to(dtype), self.laser.to(dtype), self.labels, self.manoeuvre,
                             self.narrow, self.mode, self.episode, self.map_id)

    def batches(self, batch_size, generator=None, shuffle=False):
        n = len(self)
        order = torch.randperm(n, generator=generator) if shuffle else torch.arange(n)
        for i in range(0, n, batch_size):
            yield self.subset(order[i:i + batch_size])

    def steps(self, start, stop):
        """Time slice [start, stop) of every window."""
        return SequenceBatch(self.joystick[:, start:stop], self.laser[:, start:stop], self.labels,
                             self.manoeuvre, self.narrow, self.mode, self.episode, self.map_id)


def make_batch(windows: WindowSet, stats: NormStats, dtype=torch.float32):
    joy, las = stats.normalize(windows.commands.astype(np.float64), windows.ranges.astype(np.float64))
    lab = torch.as_tensor(windows.labels, dtype=torch.long)
    meta = torch.as_tensor(windows.meta, dtype=torch.long)
    return SequenceBatch(torch.as_tensor(joy, dtype=dtype), torch.as_tensor(las, dtype=dtype),
                         lab[:, 0], lab[:, 1], lab[:, 2], meta[:, 2], meta[:, 0], meta[:, 1])


def window_count(length, window, stride):
    if stride < 1:
        raise ContractError("stride must be >= 1")
    return 0 if length < window else (length - window) // stride + 1


def window_episodes(episodes, episode_ids, window=20, stride=10):
    """Cut each episode into labelled windows."""
    cmds, rngs, labels, meta = [], [], [], []
    for eid, ep in zip(episode_ids, episodes):
        for k in range(window_count(len(ep), window, stride)):
            s = slice(k * stride, k * stride + window)
            c, r = ep.commands[s], ep.ranges[s]
            cmds.append(c)
            rngs.append(r)
            labels.append(synthdata.label_window(c, r))
            meta.append((eid, ep.map_id, ep.mode))
    beams = episodes[0].ranges.shape[1] if episodes else 0
    return WindowSet(
        np.asarray(cmds, dtype=np.float32).reshape(-1, window, 2),
        np.asarray(rngs, dtype=np.float32).reshape(-1, window, beams),
        np.asarray(labels, dtype=np.int64).reshape(-1, 3),
        np.asarray(meta, dtype=np.int64).reshape(-1, 3),
    )


@dataclass
class DataConfig:
    seed: int = 0
    beams: int = synthdata.DEFAULT_BEAMS
    window: int = 20
    stride: int = 10
    episode_ticks: int = 50
    episodes_per_map: tuple = (500, 500, 250)
    validation_fraction: float = 0.2
    max_range: float = synthdata.MAX_RANGE
    forecast_horizon: int = 10

    def __post_init__(self):
        self.episodes_per_map = tuple(self.episodes_per_map)
        if len(self.episodes_per_map) != len(synthdata.MAPS):
            raise ContractError(f"episodes_per_map needs one count per map ({len(synthdata.MAPS)})")
        if self.beams < 1:
            raise ContractError("beam count must be >= 1")
        if self.window < 1 or self.stride < 1 or self.forecast_horizon < 0:
            raise ContractError("window and stride must be >= 1, forecast_horizon >= 0")
        if not 0 <= self.validation_fraction < 1:
            raise ContractError("validation_fraction must lie in [0, 1)")
        if not self.max_range > 0:
            raise ContractError("max_range must be positive")


def generate_dataset(cfg: DataConfig):
    """Simulate episodes on every map and split them: maps 1-2 train/validation, map 3 test."""
    root = np.random.SeedSequence(cfg.seed)
    map_seeds = root.spawn(len(synthdata.MAPS))
    by_split = {s: ([], []) for s in SPLITS}
    skipped = 0
    eid = 0
    for (map_id, world), n_eps, mseed in zip(sorted(synthdata.MAPS.items()), cfg.episodes_per_map, map_seeds):
        rng = np.random.default_rng(mseed)
        weights = np.asarray(synthdata.MODE_WEIGHTS[map_id])
        for _ in range(n_eps):
            mode = int(rng.choice(len(synthdata.MODES), p=weights / weights.sum()))
            eid += 1
            try:
                ep = synthdata.generate_episode(world, mode, rng, cfg.episode_ticks, cfg.beams, cfg.max_range)
            except synthdata.PlacementError:
                skipped += 1
                continue
            if map_id in TEST_MAPS:
                split = "test"
            else:
                split = "validation" if rng.random() < cfg.validation_fraction else "train"
            by_split[split][0].append(ep)
            by_split[split][1].append(eid)
    if skipped:
        log.info("skipped %d infeasible episodes", skipped)
    windows = {s: window_episodes(eps, ids, cfg.window, cfg.stride) for s, (eps, ids) in by_split.items()}
    if cfg.forecast_horizon:
        eps, ids = by_split["test"]
        windows[FORECAST_SPLIT] = window_episodes(eps, ids, cfg.window + cfg.forecast_horizon, cfg.stride)
    stats = NormStats.fit(windows["train"].commands, windows["train"].ranges)
    return windows, stats


# -- disk format -------------------------------------------------------------


def _write_blob(path, array):
    np.ascontiguousarray(array, dtype="<f4").tofile(path)


def _read_blob(path, shape):
    return np.fromfile(path, dtype="<f4").reshape(shape)


def _write_table(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows.tolist())


def _read_table(path):
    with open(path, newline="") as f:
        rows = list(csv.reader(f))[1:]
    return np.asarray(rows, dtype=np.int64).reshape(-1, 3)


def save_dataset(root, windows, stats, cfg: DataConfig):
    root = Path(root)
    manifest = {
        "format": FORMAT_VERSION,
        "window": cfg.window,
        "beams": cfg.beams,
        "stride": cfg.stride,
        "episode_ticks": cfg.episode_ticks,
        "episodes_per_map": list(cfg.episodes_per_map),
        "max_range": cfg.max_range,
        "forecast_horizon": cfg.forecast_horizon,
        "validation_fraction": cfg.validation_fraction,
        "tick_hz": synthdata.TICK_HZ,
        "seed": cfg.seed,
        "normalization": stats.to_dict(),
        "splits": {},
    }
    for split, ws in windows.items():
        d = root / split
        d.mkdir(parents=True, exist_ok=True)
        _write_blob(d / "commands.f32", ws.commands)
        _write_blob(d / "ranges.f32", ws.ranges)
        _write_table(d / "labels.csv", ["class", "manoeuvre", "narrow"], ws.labels)
        _write_table(d / "meta.csv", ["episode", "map", "mode"], ws.meta)
        manifest["splits"][split] = {
            "count": len(ws),
            "commands_shape": list(ws.commands.shape),
            "ranges_shape": list(ws.ranges.shape),
            "maps": sorted({int(m) for m in ws.meta[:, 1]}),
        }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_manifest(root):
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    return json.loads(path.read_text())


def load_dataset(root):
    """(windows by split, NormStats, manifest)."""
    root = Path(root)
    manifest = load_manifest(root)
    windows = {}
    for split, info in manifest["splits"].items():
        d = root / split
        windows[split] = WindowSet(
            _read_blob(d / "commands.f32", info["commands_shape"]),
            _read_blob(d / "ranges.f32", info["ranges_shape"]),
            _read_table(d / "labels.csv"),
            _read_table(d / "meta.csv"),
        )
    return windows, NormStats.from_dict(manifest["normalization"]), manifest


def load_batches(root, dtype=torch.float32):
    windows, stats, manifest = load_dataset(root)
    return {s: make_batch(w, stats, dtype) for s, w in windows.items()}, stats, manifest
