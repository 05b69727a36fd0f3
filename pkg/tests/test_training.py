import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from discvae.checkpoint import MODEL_KINDS, build_model, load_checkpoint, restore_optimizer, save_checkpoint
from discvae.core import ContractError
from discvae.dataset import DataConfig, generate_dataset, make_batch
from discvae.evaluation import forecast_mse
from discvae.model import ModelConfig
from discvae.training import (
    HISTORY_COLUMNS,
    TrainConfig,
    TrainingDiverged,
    anneal_temperature,
    lr_schedule,
    make_optimizer,
    read_history,
    train,
    write_history,
)
from helpers import random_batch

CFG = ModelConfig(beams=6, hidden=16, local_hidden=8, joystick_features=4, laser_features=8, n_clusters=3,
                  dim_global=4, dim_local=4, window=5)


def data(n, seed):
    return random_batch(n, 5, 6, dtype=torch.float32, seed=seed)


def test_lr_examples():
    assert lr_schedule(0) == pytest.approx(1e-3)
    assert lr_schedule(10_000) == pytest.approx(5e-4)
    assert lr_schedule(20_000) == pytest.approx(2.5e-4)
    assert lr_schedule(5_000) == pytest.approx(1e-3 / math.sqrt(2))


def test_temperature_examples():
    assert anneal_temperature(0) == 1.0
    assert anneal_temperature(10**9) == 0.3
    assert anneal_temperature(10_000) == pytest.approx(math.exp(-0.3))


@given(st.integers(0, 10**7), st.integers(0, 10**7))
def test_temperature_non_increasing(a, b):
    lo, hi = sorted((a, b))
    assert anneal_temperature(hi) <= anneal_temperature(lo)
    assert 0.3 <= anneal_temperature(hi) <= 1.0


@pytest.mark.parametrize("kwargs", [{"lr": 0.0}, {"lr_decay": 1.0}, {"batch_size": 0}, {"patience": -1}])
def test_train_config_contract(kwargs):
    with pytest.raises(ContractError):
        TrainConfig(**kwargs)
    with pytest.raises(ContractError):
        TrainConfig.from_dict({"bogus": 1})


def run(seed=0, epochs=3, kind="discvae"):
    torch.manual_seed(seed)
    m = build_model(kind, CFG)
    return train(m, data(40, 0), data(12, 1), TrainConfig(max_epochs=epochs, batch_size=8, seed=seed))


def test_same_seed_same_history():
    a, b = run(), run()
    assert a.history == b.history
    for (ka, va), (kb, vb) in zip(a.model.state_dict().items(), b.model.state_dict().items()):
        assert torch.equal(va, vb)
    assert run(seed=1).history != a.history


def test_history_rows_and_round_trip(tmp_path):
    r = run(epochs=2)
    assert [(h["epoch"], h["split"]) for h in r.history] == [(1, "train"), (1, "validation"),
                                                          (2, "train"), (2, "validation")]
    assert r.history[0]["lr"] == pytest.approx(lr_schedule(r.step // 2))
    write_history(tmp_path / "h.csv", r.history)
    rows = read_history(tmp_path / "h.csv")
    assert tuple(rows[0]) == HISTORY_COLUMNS
    assert float(rows[1]["objective"]) == pytest.approx(r.history[1]["objective"], rel=1e-8)


class Constant(torch.nn.Module):
    """Objective that never improves; exercises the stopping rule."""

    kind = "constant"

    def __init__(self, values=None):
        super().__init__()
        self.w = torch.nn.Parameter(torch.zeros(1))
        self.calls = 0

    def objective(self, batch, generator=None, temperature=1.0):
        return self.w.sum() * 0.0 - 1.0, {}


def test_early_stop_after_patience():
    r = train(Constant(), data(8, 0), data(4, 1), TrainConfig(max_epochs=50, patience=4, batch_size=4))
    assert r.stopped_early and r.best_epoch == 1 and r.epoch == 5
    assert len(r.history) == 10


class Exploding(Constant):
    def objective(self, batch, generator=None, temperature=1.0):
        return self.w.sum() + float("nan"), {"recon_a": torch.tensor(float("nan"))}


def test_non_finite_objective_aborts_with_terms():
    with pytest.raises(TrainingDiverged, match="recon_a"):
        train(Exploding(), data(8, 0), data(4, 1), TrainConfig(max_epochs=2))


def test_best_parameters_are_restored():
    r = run(epochs=4)
    vals = [h["objective"] for h in r.history if h["split"] == "validation"]
    assert r.best_epoch == 1 + int(np.argmax(vals))


@pytest.mark.parametrize("kind", MODEL_KINDS)
def test_checkpoint_round_trip(kind, tmp_path):
    torch.manual_seed(0)
    m = build_model(kind, CFG)
    batch = data(6, 3)
    save_checkpoint(tmp_path, m, seed=3, step=7)
    loaded, manifest = load_checkpoint(tmp_path)
    assert manifest["kind"] == kind and manifest["step"] == 7
    a, _ = m.objective(batch, torch.Generator().manual_seed(0))
    b, _ = loaded.objective(batch, torch.Generator().manual_seed(0))
    assert abs(a.item() - b.item()) <= 1e-6 * max(1.0, abs(a.item()))


def test_checkpoint_rejects_foreign_tensors(tmp_path):
    save_checkpoint(tmp_path, build_model("vrnn", CFG))
    manifest = (tmp_path / "manifest.json").read_text().replace('"vrnn"', '"discvae"')
    (tmp_path / "manifest.json").write_text(manifest)
    with pytest.raises(ContractError):
        load_checkpoint(tmp_path)
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing")


def test_optimizer_state_round_trip(tmp_path):
    r = run(epochs=1)
    save_checkpoint(tmp_path, r.model, optimizer=r.optimizer, step=r.step)
    model, manifest = load_checkpoint(tmp_path)
    opt = make_optimizer(model, TrainConfig())
    restore_optimizer(tmp_path, model, opt, manifest)
    for (name, p), q in zip(model.named_parameters(), r.model.parameters()):
        assert torch.equal(opt.state[p]["exp_avg"], r.optimizer.state[q]["exp_avg"])


def test_step_only_moves_parameters_with_gradient():
    torch.manual_seed(0)
    m = build_model("discvae", CFG)
    batch = data(1, 4)
    batch.laser[..., 0] = 0.0  # first laser input column sees no signal
    opt = make_optimizer(m, TrainConfig())
    before = {n: p.detach().clone() for n, p in m.named_parameters()}
    obj, _ = m.objective(batch, torch.Generator().manual_seed(0))
    (-obj).backward()
    grads = {n: p.grad.clone() for n, p in m.named_parameters()}
    opt.step()
    dead = grads["encoder.laser_encoder.net.0.weight"][:, 0]
    assert torch.all(dead == 0)
    for n, p in m.named_parameters():
        moved = p.detach() != before[n]
        assert torch.equal(moved, grads[n] != 0), n


def test_fifty_window_overfit_plateaus():
    windows, stats = generate_dataset(DataConfig(seed=2, episodes_per_map=(12, 12, 2)))
    fifty = make_batch(windows["train"], stats).subset(torch.arange(50))
    torch.manual_seed(0)
    m = build_model("discvae", ModelConfig(hidden=32, local_hidden=16, n_clusters=3))
    mse = []
    r = train(m, fifty, fifty, TrainConfig(max_epochs=60, batch_size=10, lr=1e-2, patience=200),
              on_epoch=lambda ep, model, hist: mse.append(forecast_mse(model, fifty, 10, 10)))
    obj = np.array([h["objective"] for h in r.history if h["split"] == "train"])
    plateau = obj[-10:].mean()
    close = np.abs(obj - plateau) <= 0.05 * abs(plateau)
    assert obj[-1] > obj[0] + 0.2 * abs(obj[0])
    assert close[-10:].all()
    assert np.argmax(close) < 40
    # forecast error falls in trend while the objective climbs
    smooth = np.stack([np.convolve(np.array(mse)[:, i], np.ones(10) / 10, "valid") for i in range(2)])
    assert np.all(smooth[:, -1] < 0.8 * smooth[:, 0])
