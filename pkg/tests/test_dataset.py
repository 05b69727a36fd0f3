import json

import numpy as np
import pytest
import torch

from discvae import dataset as ds
from discvae import synthdata as sd
from discvae.core import ContractError

SMALL = ds.DataConfig(seed=5, episodes_per_map=(30, 30, 16))


@pytest.fixture(scope="module")
def small():
    return ds.generate_dataset(SMALL)


def test_window_count_arithmetic():
    assert ds.window_count(50, 20, 10) == 4
    assert ds.window_count(20, 20, 10) == 1
    assert ds.window_count(19, 20, 10) == 0
    assert ds.window_count(57, 20, 3) == (57 - 20) // 3 + 1
    with pytest.raises(ContractError):
        ds.window_count(50, 20, 0)


def test_split_by_map(small):
    windows, _ = small
    assert set(windows["test"].meta[:, 1]) == {3}
    assert set(windows["forecast"].meta[:, 1]) == {3}
    for split in ("train", "validation"):
        assert set(windows[split].meta[:, 1]) <= {1, 2}


def test_no_episode_shared_across_splits(small):
    windows, _ = small
    ids = {s: set(windows[s].meta[:, 0]) for s in ds.SPLITS}
    assert not ids["train"] & ids["validation"]
    assert not ids["train"] & ids["test"]
    assert not ids["validation"] & ids["test"]


def test_window_counts_follow_episode_lengths(small):
    windows, _ = small
    per_episode = ds.window_count(SMALL.episode_ticks, SMALL.window, SMALL.stride)
    for s in ds.SPLITS:
        _, counts = np.unique(windows[s].meta[:, 0], return_counts=True)
        assert np.all(counts == per_episode)
    assert windows["forecast"].commands.shape[1] == SMALL.window + SMALL.forecast_horizon


def test_labels_match_labeller(small):
    windows, _ = small
    w = windows["train"]
    for i in range(0, len(w), 17):
        assert tuple(w.labels[i]) == sd.label_window(w.commands[i], w.ranges[i])


def test_normalisation_uses_train_statistics(small):
    windows, stats = small
    b = ds.make_batch(windows["train"], stats, torch.float64)
    joy = b.joystick.reshape(-1, 2)
    las = b.laser.reshape(-1, SMALL.beams)
    assert torch.allclose(joy.mean(0), torch.zeros(2, dtype=torch.float64), atol=1e-9)
    assert torch.allclose(joy.std(0, unbiased=False), torch.ones(2, dtype=torch.float64), atol=1e-9)
    assert las.mean().abs() < 1e-9
    # test statistics are not used: the test split is not centred
    t = ds.make_batch(windows["test"], stats, torch.float64)
    assert t.laser.mean().abs() > 1e-3


def test_normalise_round_trip(small):
    windows, stats = small
    w = windows["validation"]
    joy, las = stats.normalize(w.commands, w.ranges)
    assert np.allclose(stats.denormalize_joystick(joy), w.commands, atol=1e-5)
    assert np.allclose(stats.denormalize_laser(las), w.ranges, atol=1e-4)
    assert np.allclose(ds.NormStats.from_dict(stats.to_dict()).laser_std, stats.laser_std)


def test_same_seed_gives_identical_data():
    a, _ = ds.generate_dataset(ds.DataConfig(seed=9, episodes_per_map=(6, 6, 4)))
    b, _ = ds.generate_dataset(ds.DataConfig(seed=9, episodes_per_map=(6, 6, 4)))
    c, _ = ds.generate_dataset(ds.DataConfig(seed=10, episodes_per_map=(6, 6, 4)))
    assert a["train"].ranges.tobytes() == b["train"].ranges.tobytes()
    assert a["train"].ranges.tobytes() != c["train"].ranges.tobytes()


def test_disk_round_trip(small, tmp_path):
    windows, stats = small
    manifest = ds.save_dataset(tmp_path, windows, stats, SMALL)
    assert json.loads((tmp_path / "manifest.json").read_text()) == manifest
    assert manifest["beams"] == SMALL.beams and manifest["window"] == SMALL.window
    assert manifest["splits"]["test"]["maps"] == [3]
    raw = np.fromfile(tmp_path / "train" / "ranges.f32", dtype="<f4")
    assert raw.size == windows["train"].ranges.size
    loaded, stats2, _ = ds.load_dataset(tmp_path)
    for s in windows:
        assert np.array_equal(loaded[s].commands, windows[s].commands)
        assert np.array_equal(loaded[s].ranges, windows[s].ranges)
        assert np.array_equal(loaded[s].labels, windows[s].labels)
        assert np.array_equal(loaded[s].meta, windows[s].meta)
    assert np.allclose(stats2.joystick_std, stats.joystick_std)
    header = (tmp_path / "train" / "labels.csv").read_text().splitlines()[0]
    assert header == "class,manoeuvre,narrow"


def test_missing_manifest(tmp_path):
    with pytest.raises(FileNotFoundError):
        ds.load_dataset(tmp_path)


def test_batches_cover_every_window(small):
    windows, stats = small
    b = ds.make_batch(windows["train"], stats)
    gen = torch.Generator().manual_seed(0)
    seen = torch.cat([x.episode for x in b.batches(32, gen, shuffle=True)])
    assert sorted(seen.tolist()) == sorted(b.episode.tolist())
    assert len(b.steps(3, 8).joystick[0]) == 5


@pytest.mark.parametrize("kwargs", [
    {"beams": 0}, {"stride": 0}, {"validation_fraction": 1.0}, {"episodes_per_map": (1, 2)},
    {"max_range": 0.0},
])
def test_data_config_contract(kwargs):
    with pytest.raises(ContractError):
        ds.DataConfig(**kwargs)
