"""Adam training loop with step-size decay, relaxation-temperature annealing and early stopping."""

import copy
import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import torch

from .core import ContractError

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "split", "objective", "recon_a", "recon_l", "kl_local", "kl_global",
                   "entropy", "lr", "tau")


@dataclass
class TrainConfig:
    batch_size: int = 32
    lr: float = 1e-3
    lr_decay: float = 0.5
    lr_decay_steps: int = 10_000
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    max_epochs: int = 200
    patience: int = 10
    tau_floor: float = 0.3
    tau_rate: float = 3e-5
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name != "seed" and not v > 0:
                raise ContractError(f"{f.name} must be positive, got {v}")
        if not 0 < self.lr_decay < 1:
            raise ContractError("lr_decay must lie in (0, 1)")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


class TrainingDiverged(RuntimeError):
    pass


def lr_schedule(step, cfg: TrainConfig = TrainConfig()):
    """Continuous exponential decay: halves every ``lr_decay_steps``."""
    return cfg.lr * cfg.lr_decay ** (step / cfg.lr_decay_steps)


def anneal_temperature(step, cfg: TrainConfig = TrainConfig()):
    return max(cfg.tau_floor, math.exp(-cfg.tau_rate * step))


@dataclass
class TrainResult:
    model: torch.nn.Module
    history: list
    step: int
    epoch: int
    best_epoch: int
    optimizer: torch.optim.Optimizer
    stopped_early: bool = False
    extra: dict = field(default_factory=dict)


def make_optimizer(model, cfg: TrainConfig):
    return torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps)


def _row(epoch, split, objective, terms, lr, tau):
    row = {"epoch": epoch, "split": split, "objective": objective, "lr": lr, "tau": tau}
    for k in HISTORY_COLUMNS[3:8]:
        row[k] = terms.get(k)
    return row


@torch.no_grad()
def evaluate_objective(model, data, generator, temperature, chunk=256):
    """Size-weighted mean objective and terms over a whole split."""
    total, sums, n = 0.0, {}, 0
    for b in data.batches(chunk):
        obj, terms = model.objective(b, generator, temperature)
        w = len(b)
        total += float(obj) * w
        for k, v in terms.items():
            sums[k] = sums.get(k, 0.0) + float(v) * w
        n += w
    return total / n, {k: v / n for k, v in sums.items()}


def train(model, train_data, val_data, cfg: TrainConfig, *, optimizer=None, start_step=0, start_epoch=0,
          on_epoch=None):
    """Maximise the model objective; returns the best-validation parameters.

    Fully deterministic given ``cfg.seed``: shuffling and ELBO noise come from
    one generator, validation noise is redrawn from a fixed seed each epoch.
    """
    if len(train_data) == 0 or len(val_data) == 0:
        raise ContractError("training needs non-empty train and validation splits")
    gen = torch.Generator().manual_seed(cfg.seed)
    if optimizer is None:
        optimizer = make_optimizer(model, cfg)
    step = start_step
    history = []
    best = -math.inf
    best_state = copy.deepcopy(model.state_dict())
    best_epoch = start_epoch
    bad_epochs = 0
    stopped = False
    epoch = start_epoch
    for epoch in range(start_epoch + 1, start_epoch + cfg.max_epochs + 1):
        model.train()
        total, sums, n = 0.0, {}, 0
        for batch in train_data.batches(cfg.batch_size, gen, shuffle=True):
            lr = lr_schedule(step, cfg)
            tau = anneal_temperature(step, cfg)
            for group in optimizer.param_groups:
                group["lr"] = lr
            obj, terms = model.objective(batch, gen, tau)
            if not torch.isfinite(obj):
                dump = {k: float(v) for k, v in terms.items()}
                raise TrainingDiverged(f"non-finite objective at step {step}: {dump}")
            optimizer.zero_grad()
            (-obj).backward()
            optimizer.step()
            step += 1
            w = len(batch)
            total += float(obj.detach()) * w
            for k, v in terms.items():
                sums[k] = sums.get(k, 0.0) + float(v.detach()) * w
            n += w
        lr = lr_schedule(step, cfg)
        tau = anneal_temperature(step, cfg)
        history.append(_row(epoch, "train", total / n, {k: v / n for k, v in sums.items()}, lr, tau))

        model.eval()
        val_gen = torch.Generator().manual_seed(cfg.seed + 1)
        val_obj, val_terms = evaluate_objective(model, val_data, val_gen, tau)
        history.append(_row(epoch, "validation", val_obj, val_terms, lr, tau))
        log.info("epoch %d train %.3f val %.3f", epoch, total / n, val_obj)
        if on_epoch is not None:
            on_epoch(epoch, model, history)
        if not math.isfinite(val_obj):
            raise TrainingDiverged(f"non-finite validation objective at epoch {epoch}: {val_terms}")
        if val_obj > best:
            best, best_epoch, bad_epochs = val_obj, epoch, 0
            best_state = copy.deepcopy(model.state_dict())
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                stopped = True
                break
    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model, history, step, epoch, best_epoch, optimizer, stopped)


def write_history(path, history):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=HISTORY_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: ("" if row.get(k) is None else (f"{row[k]:.9g}" if isinstance(row[k], float) else row[k]))
                        for k in HISTORY_COLUMNS})


def read_history(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))
