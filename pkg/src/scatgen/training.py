"""NMSE training loop, dataset splits, few-shot transfer, ablations and the residual CNN baseline."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import evaluation
from .model import ModelConfig, ScattererNet


@dataclass
class TrainConfig:
    batch_size: int = 32
    lr0: float = 1e-3
    decay_factor: float = 0.1
    decay_every: int = 150
    epochs: int = 100
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    split_ratio: tuple[int, int, int] = (4, 1, 1)
    zero_guard: float = 1e-8
    max_steps: int | None = None
    grad_clip: float | None = 1.0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.split_ratio = tuple(int(r) for r in self.split_ratio)
        if self.decay_every < 1:
            raise ValueError("decay_every must be >= 1")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if sum(self.split_ratio) != 6 or min(self.split_ratio) < 1:
            raise ValueError("split ratio must have three positive parts summing to 6")

    @classmethod
    def full_scale(cls, **overrides) -> "TrainConfig":
        base = dict(batch_size=256, epochs=600, lr0=1e-2)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"], d["split_ratio"] = list(self.betas), list(self.split_ratio)
        return d


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    return cfg.lr0 * cfg.decay_factor ** (epoch // cfg.decay_every)


def nmse_loss(pred: torch.Tensor, truth: torch.Tensor, eps: float | None = None) -> torch.Tensor:
    """Batch-summed squared error over batch-summed squared truth."""
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(truth.shape)}")
    den = torch.sum(truth**2)
    if eps is None and float(den) == 0.0:
        raise ValueError("undefined normalization: truth batch is identically zero")
    return torch.sum((pred - truth) ** 2) / (den + (eps or 0.0))


@dataclass
class Split:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def to_dict(self) -> dict:
        return {k: [int(i) for i in getattr(self, k)] for k in ("train", "val", "test")}

    @classmethod
    def from_dict(cls, d) -> "Split":
        return cls(*(np.asarray(d[k], dtype=np.int64) for k in ("train", "val", "test")))


def split_dataset(n: int, ratio=(4, 1, 1), seed: int = 0) -> Split:
    if n < 6:
        raise ValueError("need at least 6 samples to split")
    total = sum(ratio)
    n_train = round(n * ratio[0] / total)
    n_val = round(n * ratio[1] / total)
    perm = np.random.default_rng(seed).permutation(n)
    return Split(np.sort(perm[:n_train]), np.sort(perm[n_train:n_train + n_val]), np.sort(perm[n_train + n_val:]))


@dataclass
class ArrayData:
    """In-memory samples: features (S, 3, m_x, m_y), normalized targets (S, n_x, n_y), carriers (S,)."""

    features: np.ndarray
    targets: np.ndarray
    freqs: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        self.targets = np.asarray(self.targets, dtype=np.float32)
        self.freqs = np.asarray(self.freqs, dtype=np.float64).reshape(-1)
        if not (len(self.features) == len(self.targets) == len(self.freqs)):
            raise ValueError("features, targets and freqs must have the same sample count")

    def __len__(self):
        return len(self.targets)

    def batch(self, idx, dtype=torch.float32):
        return (torch.as_tensor(self.features[idx], dtype=dtype),
                torch.as_tensor(self.targets[idx], dtype=dtype),
                torch.as_tensor(self.freqs[idx], dtype=dtype))


class NonFiniteLoss(RuntimeError):
    def __init__(self, message: str, dump: dict):
        super().__init__(message)
        self.dump = dump


@dataclass
class TrainResult:
    history: list[dict]
    best_epoch: int
    best_val: float
    steps: int
    digest_before: str | None = None
    digest_after: str | None = None
    guarded_batches: int = 0


def fit_input_scale(model: nn.Module, data: ArrayData, idx) -> np.ndarray:
    """Per-channel RMS over the given samples; the model divides inputs by it (no shift)."""
    x = data.features[idx].astype(np.float64)
    rms = np.sqrt(np.mean(x**2, axis=(0, 2, 3)))
    rms = np.where(rms > 0, rms, 1.0)
    model.set_feature_scale(rms)
    return rms


def _dtype(model) -> torch.dtype:
    return next(model.parameters()).dtype


@torch.no_grad()
def predict(model: nn.Module, data: ArrayData, idx, batch_size: int = 64) -> np.ndarray:
    model.eval()
    idx = np.asarray(idx, dtype=np.int64)
    out = []
    for s in range(0, len(idx), batch_size):
        x, _, f = data.batch(idx[s:s + batch_size], _dtype(model))
        out.append(model(x, f).cpu().numpy())
    n_x, n_y = data.targets.shape[1:]
    return np.concatenate(out) if out else np.zeros((0, n_x, n_y))


def _sums(model, data, idx, batch_size):
    num = den = 0.0
    with torch.no_grad():
        model.eval()
        for s in range(0, len(idx), batch_size):
            x, y, f = data.batch(idx[s:s + batch_size], _dtype(model))
            pred = model(x, f)
            num += float(torch.sum((pred - y) ** 2))
            den += float(torch.sum(y**2))
    return num, den


def train(model: nn.Module, data: ArrayData, split: Split, cfg: TrainConfig, scale_inputs: bool = True,
          dump_path: str | None = None) -> TrainResult:
    """Adam with step decay; keeps the best-validation weights (last epoch if there is no validation set)."""
    train_idx = np.asarray(split.train, dtype=np.int64)
    val_idx = np.asarray(split.val, dtype=np.int64)
    if len(train_idx) == 0:
        raise ValueError("empty training split")
    if scale_inputs:
        fit_input_scale(model, data, train_idx)
    digest = getattr(model, "backbone_digest", None)
    before = digest() if digest else None
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.lr0, betas=cfg.betas, eps=cfg.adam_eps)
    gen = np.random.default_rng(cfg.seed)
    history, best_state, best_val, best_epoch = [], None, math.inf, -1
    steps = guarded_total = 0
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        for g in opt.param_groups:
            g["lr"] = lr
        model.train()
        order = train_idx[gen.permutation(len(train_idx))]
        num_sum = den_sum = 0.0
        guarded = 0
        for s in range(0, len(order), cfg.batch_size):
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
            x, y, f = data.batch(order[s:s + cfg.batch_size], _dtype(model))
            pred = model(x, f)
            sq = torch.sum((pred - y) ** 2)
            den = torch.sum(y**2)
            if float(den) == 0.0:
                guarded += 1
                loss = sq / (den + cfg.zero_guard)
            else:
                loss = sq / den
            if not torch.isfinite(loss):
                dump = {"epoch": epoch, "step": steps, "lr": lr, "loss": float(loss.detach()),
                        "param_norms": {n: float(p.detach().norm()) for n, p in model.named_parameters()
                                        if p.requires_grad}}
                if dump_path:
                    with open(dump_path, "w") as fh:
                        json.dump(dump, fh, indent=1)
                raise NonFiniteLoss(f"non-finite loss at epoch {epoch}, step {steps}", dump)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            opt.step()
            steps += 1
            num_sum += float(sq.detach())
            den_sum += float(den)
        train_nmse = num_sum / (den_sum if den_sum > 0 else cfg.zero_guard)
        if len(val_idx):
            vn, vd = _sums(model, data, val_idx, max(cfg.batch_size, 64))
            val_nmse = vn / (vd if vd > 0 else cfg.zero_guard)
            guarded += int(vd == 0)
        else:
            val_nmse = float("nan")
        guarded_total += guarded
        history.append({"epoch": epoch, "lr": lr, "train_nmse": train_nmse, "val_nmse": val_nmse,
                        "guarded_batches": guarded})
        if len(val_idx) and val_nmse < best_val:
            best_val, best_epoch = val_nmse, epoch
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        if cfg.max_steps is not None and steps >= cfg.max_steps:
            break
    if best_state is not None:
        model.load_state_dict(best_state)
    elif history:
        best_epoch, best_val = history[-1]["epoch"], history[-1]["val_nmse"]
    after = digest() if digest else None
    if before != after:
        raise RuntimeError("frozen backbone weights changed during training")
    return TrainResult(history, best_epoch, best_val, steps, before, after, guarded_total)


def fit_model(model_cfg: ModelConfig, data: ArrayData, split: Split, cfg: TrainConfig):
    model = ScattererNet(model_cfg)
    return model, train(model, data, split, cfg)


def split_metrics(model, data: ArrayData, idx, metric_cfg=None) -> dict:
    pred = predict(model, data, idx)
    s = evaluation.summarize(pred, data.targets[idx], metric_cfg)
    return {"p_pos": s["p_pos"], "p_num": s["p_num"], "nmse": s["nmse"]}


def all_zero_metrics(data: ArrayData, idx, metric_cfg=None) -> dict:
    truth = data.targets[idx]
    s = evaluation.summarize(np.zeros_like(truth), truth, metric_cfg)
    return {"p_pos": s["p_pos"], "p_num": s["p_num"], "nmse": s["nmse"]}


# ---------------------------------------------------------------------- transfer

def few_shot_subset(train_idx, k: int, seed: int) -> np.ndarray:
    train_idx = np.asarray(train_idx, dtype=np.int64)
    if k > len(train_idx):
        raise ValueError(f"k = {k} exceeds the target training split ({len(train_idx)})")
    return np.sort(train_idx[np.random.default_rng(seed).permutation(len(train_idx))[:k]])


def few_shot_transfer(source_state: dict, model_cfg: ModelConfig, target: ArrayData, split: Split, ks,
                      seeds, cfg: TrainConfig, metric_cfg=None) -> list[dict]:
    """Fine-tune the trainable subset of the source model on k target samples; one row per (k, seed)."""
    ks = sorted(int(k) for k in ks)
    rows = []
    for k in ks:
        for seed in seeds:
            model = ScattererNet(model_cfg)
            model.load_state_dict(source_state)
            if k > 0:
                sub = Split(few_shot_subset(split.train, k, seed), split.val, split.test)
                train(model, target, sub, dataclasses.replace(cfg, seed=seed), scale_inputs=False)
            rows.append({"k": k, "seed": int(seed), **split_metrics(model, target, split.test, metric_cfg)})
    return rows


def scratch_few_shot(model_cfg: ModelConfig, target: ArrayData, split: Split, k: int, seed: int,
                     cfg: TrainConfig, metric_cfg=None) -> dict:
    """Reference for transfer: a fresh model trained only on the same k target samples."""
    model = ScattererNet(dataclasses.replace(model_cfg, seed=seed))
    sub = Split(few_shot_subset(split.train, k, seed), split.val, split.test)
    train(model, target, sub, dataclasses.replace(cfg, seed=seed))
    return {"k": k, "seed": int(seed), **split_metrics(model, target, split.test, metric_cfg)}


# ---------------------------------------------------------------------- ablation

def run_ablation(variant: str, data: ArrayData, split: Split, model_cfg: ModelConfig, cfg: TrainConfig,
                 metric_cfg=None) -> dict:
    mcfg = dataclasses.replace(model_cfg, variant=variant)
    model, result = fit_model(mcfg, data, split, cfg)
    return {"variant": variant, "seed": cfg.seed, "model_seed": mcfg.seed,
            **split_metrics(model, data, split.test, metric_cfg),
            "best_epoch": result.best_epoch, "backbone_digest": result.digest_after}


# ---------------------------------------------------------------------- baseline

class ResidualBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(c_out)
        self.skip = None
        if stride != 1 or c_in != c_out:
            self.skip = nn.Sequential(nn.Conv2d(c_in, c_out, 1, stride, bias=False), nn.BatchNorm2d(c_out))

    def forward(self, x):
        y = F.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        return F.relu(y + (x if self.skip is None else self.skip(x)))


class BaselineCNN(nn.Module):
    """Stem 3->32, residual stages 32->32->64->128 each halving resolution, pool to n_x x n_y, 1x1 to 1."""

    def __init__(self, n_x: int = 10, n_y: int = 10, channels: int = 3, seed: int = 0):
        super().__init__()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.register_buffer("feature_scale", torch.ones(channels))
            self.stem = nn.Sequential(nn.Conv2d(channels, 32, 3, 1, 1, bias=False), nn.BatchNorm2d(32), nn.ReLU())
            self.stages = nn.Sequential(ResidualBlock(32, 32, 2), ResidualBlock(32, 64, 2), ResidualBlock(64, 128, 2))
            self.pool = nn.AdaptiveAvgPool2d((n_x, n_y))
            self.out = nn.Conv2d(128, 1, 1)

    def set_feature_scale(self, scale):
        self.feature_scale.copy_(torch.as_tensor(np.asarray(scale), dtype=self.feature_scale.dtype))

    def forward(self, features, f_c=None):
        x = features / self.feature_scale.view(1, -1, 1, 1)
        return self.out(self.pool(self.stages(self.stem(x))))[:, 0]


def train_baseline_cnn(data: ArrayData, split: Split, cfg: TrainConfig, seed: int = 0):
    n_x, n_y = data.targets.shape[1:]
    model = BaselineCNN(n_x, n_y, data.features.shape[1], seed=seed)
    return model, train(model, data, split, cfg)
