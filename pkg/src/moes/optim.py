"""Adadelta, the mini-batch training loop, and flip augmentation.

Adadelta keeps running RMS estimates of gradients and updates per
parameter entry, so there is no global learning rate to tune; rho=0.95
and eps=1e-6 are the reference defaults of the method. Training runs
seeded shuffled mini-batches with 50% horizontal-flip augmentation,
evaluates the total loss on the validation split after every epoch,
keeps the best-validation parameter snapshot and stops once the best
value has not strictly improved for more than ``patience`` consecutive
epochs.

Randomness is split into named streams (shuffling, flipping, member
subsampling) derived from the training seed, so augmentation choices
are reproducible independently of architecture changes.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataset import SaliencySample
from .errors import ConfigurationError
from .metrics import nss
from .model import MixtureModel, ModelConfig, build_model, one_hot, total_loss


class NonFiniteGradient(RuntimeError):
    """Raised when a gradient turns NaN/Inf; the step is aborted."""


class Adadelta:
    """Per-parameter adaptive steps from running RMS of grads and updates."""

    def __init__(self, params: Sequence[Tensor], rho: float = 0.95,
                 eps: float = 1e-6, freeze: frozenset[str] | None = None):
        if not 0.0 < rho < 1.0:
            raise ConfigurationError(f"rho must be in (0, 1), got {rho}")
        if eps <= 0.0:
            raise ConfigurationError(f"eps must be positive, got {eps}")
        self.params = list(params)
        self.rho = rho
        self.eps = eps
        self.freeze = freeze or frozenset()
        self.sq_grad = [np.zeros_like(p.data) for p in self.params]
        self.sq_delta = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.name in self.freeze or p.grad is None:
                continue
            g = p.grad
            if not np.isfinite(g).all():
                raise NonFiniteGradient(
                    f"non-finite gradient in parameter {p.name or i}"
                )
            acc_g = self.sq_grad[i]
            acc_d = self.sq_delta[i]
            acc_g *= self.rho
            acc_g += (1.0 - self.rho) * g * g
            delta = -np.sqrt(acc_d + self.eps) / np.sqrt(acc_g + self.eps) * g
            acc_d *= self.rho
            acc_d += (1.0 - self.rho) * delta * delta
            p.data += delta


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    patience: int = 10
    flip_prob: float = 0.5
    max_epochs: int = 100
    seed: int = 0
    rho: float = 0.95
    eps: float = 1e-6
    freeze_gating: bool = False

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigurationError("flip_prob must lie in [0, 1]")
        if self.max_epochs < 1:
            raise ConfigurationError("max_epochs must be >= 1")
        if self.patience < 0:
            raise ConfigurationError("patience must be >= 0")

    def to_json_dict(self) -> dict:
        return {
            "batch_size": self.batch_size,
            "patience": self.patience,
            "flip_prob": self.flip_prob,
            "max_epochs": self.max_epochs,
            "seed": self.seed,
            "rho": self.rho,
            "eps": self.eps,
            "freeze_gating": self.freeze_gating,
        }

    @staticmethod
    def from_json_dict(doc: dict) -> "TrainConfig":
        doc = dict(doc)
        unknown = set(doc) - set(TrainConfig.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown train config keys: {sorted(unknown)}")
        return TrainConfig(**doc)


def hflip_augment(batch: Sequence[SaliencySample], flip_prob: float,
                  rng: np.random.Generator) -> list[SaliencySample]:
    """Mirror a random subset of samples about the vertical axis.

    Image, density and fixation map are all flipped together; category
    labels are unchanged (flipping preserves the category, and the
    generator's edge markers are mirrored pairs for exactly this
    reason). Inputs are never mutated.
    """
    out = []
    for sample in batch:
        if rng.random() < flip_prob:
            out.append(
                SaliencySample(
                    sample_id=sample.sample_id,
                    category=sample.category,
                    image=sample.image[..., ::-1].copy(),
                    density=sample.density[..., ::-1].copy(),
                    fixations=sample.fixations[..., ::-1].copy(),
                    attrs={**sample.attrs, "hflipped": True},
                )
            )
        else:
            out.append(sample)
    return out


def downsample_density(density: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize a (1, H, W) density to the model's map extent, max back to 1.

    Integer-factor block means when the extents divide evenly (the
    presets always do), align-corners bilinear sampling otherwise.
    """
    _, h, w = density.shape
    if h == out_h and w == out_w:
        small = density.copy()
    elif h % out_h == 0 and w % out_w == 0:
        fh, fw = h // out_h, w // out_w
        small = density.reshape(1, out_h, fh, out_w, fw).mean(axis=(2, 4))
    else:
        small = ad.upsample_bilinear(Tensor(density), out_h, out_w).data \
            if (out_h >= h and out_w >= w) else _bilinear_sample(density, out_h, out_w)
    peak = small.max()
    if peak > 0:
        small = small / peak
    return small


def _bilinear_sample(density: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    _, h, w = density.shape
    rr = np.linspace(0, h - 1, out_h)
    cc_ = np.linspace(0, w - 1, out_w)
    r0 = np.floor(rr).astype(int)
    c0 = np.floor(cc_).astype(int)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = (rr - r0)[:, None]
    fc = (cc_ - c0)[None, :]
    d = density[0]
    top = d[r0][:, c0] * (1 - fc) + d[r0][:, c1] * fc
    bot = d[r1][:, c0] * (1 - fc) + d[r1][:, c1] * fc
    return (top * (1 - fr) + bot * fr)[None]


@dataclass
class TrainResult:
    log_rows: list[dict]
    best_epoch: int
    best_val_loss: float
    best_state: list[np.ndarray]
    stopped: str  # "max_epochs" | "early_stop" | "non_finite"

    def write_log_csv(self, path) -> None:
        lines = ["epoch,train_loss,val_loss,val_class_acc,val_nss"]
        for row in self.log_rows:
            lines.append(
                f"{row['epoch']},{row['train_loss']!r},{row['val_loss']!r},"
                f"{row['val_class_acc']!r},{row['val_nss']!r}"
            )
        Path(path).write_text("\n".join(lines) + "\n")


def _batches(indices: np.ndarray, batch_size: int):
    for start in range(0, len(indices), batch_size):
        yield indices[start : start + batch_size]


def _batch_arrays(samples: Sequence[SaliencySample], cfg: ModelConfig):
    out_h, out_w = cfg.output_shape()
    x = np.stack([s.image for s in samples])
    y = np.stack([downsample_density(s.density, out_h, out_w) for s in samples])
    t = one_hot([s.category for s in samples], cfg.num_experts) if cfg.lambda_c > 0 else None
    return x, y, t


def evaluate_split(model: MixtureModel, samples: Sequence[SaliencySample],
                   batch_size: int) -> tuple[float, float, float]:
    """Mean total loss, gate classification accuracy and NSS on a split."""
    cfg = model.config
    total = 0.0
    correct = 0
    nss_sum = 0.0
    for chunk in _batches(np.arange(len(samples)), batch_size):
        batch = [samples[i] for i in chunk]
        x, y, t = _batch_arrays(batch, cfg)
        out = model.forward(x)
        total += total_loss(out, y, t, cfg).item() * len(batch)
        predicted = np.argmax(out.gate_probs_1.data, axis=1)
        correct += int(np.sum(predicted == np.array([s.category for s in batch])))
        full = ad.upsample_bilinear(out.saliency, cfg.input_h, cfg.input_w).data
        for j, sample in enumerate(batch):
            nss_sum += nss(np.maximum(full[j, 0], 0.0), sample.fixations)
    n = len(samples)
    return total / n, correct / n, nss_sum / n


def train(model: MixtureModel, train_set: Sequence[SaliencySample],
          val_set: Sequence[SaliencySample], train_cfg: TrainConfig) -> TrainResult:
    """Optimize the model in place and leave it at the best-validation state."""
    train_cfg.validate()
    if not train_set or not val_set:
        raise ConfigurationError("train and validation sets must be nonempty")
    cfg = model.config
    freeze = frozenset(
        name for name in model.parameter_names() if name.startswith("gating.")
    ) if train_cfg.freeze_gating else frozenset()
    optimizer = Adadelta(model.parameters(), rho=train_cfg.rho, eps=train_cfg.eps,
                         freeze=freeze)
    rng_shuffle = np.random.default_rng([train_cfg.seed, 1])
    rng_flip = np.random.default_rng([train_cfg.seed, 2])

    best_val = np.inf
    best_state = model.state_arrays()
    best_epoch = 0
    bad_epochs = 0
    rows: list[dict] = []
    stopped = "max_epochs"

    for epoch in range(1, train_cfg.max_epochs + 1):
        perm = rng_shuffle.permutation(len(train_set))
        epoch_loss = 0.0
        aborted = False
        for chunk in _batches(perm, train_cfg.batch_size):
            batch = hflip_augment([train_set[i] for i in chunk],
                                  train_cfg.flip_prob, rng_flip)
            x, y, t = _batch_arrays(batch, cfg)
            out = model.forward(x)
            loss = total_loss(out, y, t, cfg)
            value = loss.item()
            if not np.isfinite(value):
                aborted = True
                break
            model.zero_grad()
            loss.backward()
            try:
                optimizer.step()
            except NonFiniteGradient:
                aborted = True
                break
            epoch_loss += value * len(batch)
        if aborted:
            stopped = "non_finite"
            break

        train_loss = epoch_loss / len(train_set)
        val_loss, val_acc, val_nss = evaluate_split(model, val_set,
                                                    train_cfg.batch_size)
        rows.append({
            "epoch": epoch,
            "train_loss": train_loss,
            "val_loss": val_loss,
            "val_class_acc": val_acc,
            "val_nss": val_nss,
        })
        if not np.isfinite(val_loss):
            stopped = "non_finite"
            break
        if val_loss < best_val:
            best_val = val_loss
            best_state = model.state_arrays()
            best_epoch = epoch
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs > train_cfg.patience:
                stopped = "early_stop"
                break

    model.load_state_arrays(best_state)
    return TrainResult(
        log_rows=rows,
        best_epoch=best_epoch,
        best_val_loss=float(best_val),
        best_state=best_state,
        stopped=stopped,
    )


def _derived_seed(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence(entropy=seed, spawn_key=key).generate_state(1)[0])


def train_ensemble(model_cfg: ModelConfig, train_set: Sequence[SaliencySample],
                   val_set: Sequence[SaliencySample], n_members: int,
                   subsample: float, seed: int,
                   train_cfg: TrainConfig | None = None
                   ) -> list[tuple[MixtureModel, TrainResult]]:
    """Independently train ``n_members`` models on random data subsets."""
    if not 0.0 < subsample <= 1.0:
        raise ConfigurationError(f"subsample must lie in (0, 1], got {subsample}")
    count = int(len(train_set) * subsample)
    if count < 1:
        raise ConfigurationError(
            f"subsample {subsample} of {len(train_set)} samples is empty"
        )
    base_cfg = train_cfg or TrainConfig()
    members = []
    for m in range(n_members):
        picker = np.random.default_rng([seed, 30, m])
        subset_idx = picker.choice(len(train_set), size=count, replace=False)
        subset = [train_set[i] for i in subset_idx]
        model = build_model(model_cfg, seed=_derived_seed(seed, 20, m))
        member_cfg = replace(base_cfg, seed=_derived_seed(seed, 10, m))
        result = train(model, subset, val_set, member_cfg)
        members.append((model, result))
    return members


def ensemble_predict(models: Sequence[MixtureModel], images: np.ndarray) -> np.ndarray:
    """Average the members' full-resolution saliency maps."""
    if not models:
        raise ConfigurationError("ensemble needs at least one member")
    acc = None
    for model in models:
        pred = model.predict(images)
        acc = pred if acc is None else acc + pred
    return acc / len(models)
