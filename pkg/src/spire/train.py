"""Self-supervised training of the three-network model.

The only supervision signal is the measured pattern itself: the decoder,
evaluated at the encoder-predicted orientation's Ewald coordinates and
scaled by the predicted brightness, must reproduce the log-transformed
image. Optimization is Adam with decoupled weight decay on a warmup +
cosine learning-rate schedule, with explicit flat-vector parameter
updates so gradients stay checkable against finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .geometry import QGrid
from .model import SpiModel, flatten_grads, flatten_params, set_flat_params


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 1000
    warmup_epochs: int = 5
    lr_min: float = 1e-7
    lr_max: float = 3e-4
    weight_decay: float = 1e-4
    batch_size: int = 64
    seed: int = 42
    train_fraction: float = 0.95  # leading fraction trains, trailing validates
    input_premultiplier: float = 1.0
    pi_corrected_cosine: bool = True
    pixel_sample: int | None = None  # pixels per step; None trains on all
    dtype: str = "float32"

    def __post_init__(self):
        if not (0 < self.lr_min < self.lr_max):
            raise ValueError("need 0 < lr_min < lr_max")
        if not (0 <= self.warmup_epochs < self.epochs):
            raise ValueError("need 0 <= warmup_epochs < epochs")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def torch_dtype(self) -> torch.dtype:
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]


def lr_schedule(x: float, cfg: TrainConfig) -> float:
    """Learning rate as a function of the epoch index.

    Linear warmup from 0 to lr_max over warmup_epochs, then cosine decay
    to lr_min at epochs. The cosine argument carries a pi factor by
    default (so the endpoint actually reaches lr_min); with
    pi_corrected_cosine=False the bare ratio is used instead and the
    schedule ends at lr_min + (lr_max - lr_min) * (1 + cos 1) / 2.
    """
    if not (0 <= x <= cfg.epochs):
        raise ValueError(f"epoch {x} outside [0, {cfg.epochs}]")
    if x <= cfg.warmup_epochs:
        return cfg.lr_max * x / cfg.warmup_epochs
    t = (x - cfg.warmup_epochs) / (cfg.epochs - cfg.warmup_epochs)
    arg = math.pi * t if cfg.pi_corrected_cosine else t
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(arg))


def reconstruction_loss(
    y_pred: torch.Tensor,
    gamma_pred: torch.Tensor,
    target_log: torch.Tensor,
    pixel_mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Mean squared log-domain residual.

    y_pred (B, P) is the decoder output, gamma_pred (B,) the brightness,
    target_log (B, P) the log1p-transformed measured pixels. Masked-out
    pixels are excluded from each image's mean; an all-masked image
    contributes zero.
    """
    scaled = gamma_pred.unsqueeze(-1) * torch.expm1(y_pred)
    pred_log = torch.log1p(torch.clamp(scaled, min=0.0))
    sq = (target_log - pred_log) ** 2
    if pixel_mask is None:
        return sq.mean()
    m = pixel_mask.to(sq.dtype)
    n_eff = m.sum()
    if n_eff == 0:
        return sq.sum() * 0.0
    return (sq * m).sum(dim=1).div(n_eff).mean()


@dataclass
class AdamState:
    m: torch.Tensor
    v: torch.Tensor
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: torch.Tensor) -> "AdamState":
        return cls(m=torch.zeros_like(params), v=torch.zeros_like(params))


def adam_step(
    params: torch.Tensor,
    grads: torch.Tensor,
    state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
) -> AdamState:
    """One Adam update with decoupled weight decay, in place on params.

    w <- w - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * w)
    """
    if params.shape != grads.shape:
        raise ValueError(f"params shape {tuple(params.shape)} != grads {tuple(grads.shape)}")
    state.step += 1
    state.m.mul_(state.beta1).add_(grads, alpha=1 - state.beta1)
    state.v.mul_(state.beta2).addcmul_(grads, grads, value=1 - state.beta2)
    m_hat = state.m / (1 - state.beta1**state.step)
    v_hat = state.v / (1 - state.beta2**state.step)
    params.sub_(lr * (m_hat / (v_hat.sqrt() + state.eps) + weight_decay * params))
    return state


@dataclass
class FitResult:
    history: list[dict]  # per epoch: epoch, lr, train_loss, val_loss
    best_params: torch.Tensor
    best_epoch: int
    best_val_loss: float
    diverged: bool = False
    clamp_warnings: int = 0

    def history_csv(self) -> str:
        lines = ["epoch,lr,train_loss,val_loss"]
        for row in self.history:
            lines.append(
                f"{row['epoch']},{row['lr']!r},{row['train_loss']!r},{row['val_loss']!r}"
            )
        return "\n".join(lines) + "\n"


def _transform_images(images: np.ndarray, cfg: TrainConfig) -> torch.Tensor:
    x = np.log1p(cfg.input_premultiplier * np.asarray(images, dtype=np.float64))
    return torch.from_numpy(x).to(cfg.torch_dtype)


def _forward_loss(
    model: SpiModel,
    x: torch.Tensor,
    qpts: torch.Tensor,
    mask: torch.Tensor | None,
    pixel_idx: torch.Tensor | None = None,
) -> torch.Tensor:
    rot = model.encoder(x.unsqueeze(1))
    gamma = model.fluence(x.unsqueeze(1))
    flat = x.reshape(len(x), -1)
    pts = qpts
    m = mask
    if pixel_idx is not None:
        pts = qpts[pixel_idx]
        flat = flat[:, pixel_idx]
        m = mask[pixel_idx] if mask is not None else None
    q_rot = torch.matmul(pts.unsqueeze(0), rot)
    y = model.decoder(q_rot)
    return reconstruction_loss(y, gamma, flat, m)


@torch.no_grad()
def _eval_loss(
    model: SpiModel,
    x: torch.Tensor,
    qpts: torch.Tensor,
    mask: torch.Tensor | None,
    batch_size: int,
) -> float:
    total, count = 0.0, 0
    for start in range(0, len(x), batch_size):
        xb = x[start : start + batch_size]
        total += float(_forward_loss(model, xb, qpts, mask)) * len(xb)
        count += len(xb)
    return total / max(count, 1)


def fit(
    images: np.ndarray,
    qgrid: QGrid,
    model: SpiModel,
    cfg: TrainConfig,
    pixel_mask: np.ndarray | None = None,
) -> FitResult:
    """Train on the leading train_fraction of images, validate on the rest.

    Records one history row per epoch (plus an epoch-0 baseline before
    any update) and keeps the flat parameter vector achieving the lowest
    validation loss. A non-finite loss aborts the run with the history
    preserved and diverged=True.
    """
    images = np.asarray(images)
    n = len(images)
    if n < 2 * cfg.batch_size:
        raise ValueError(f"dataset of {n} images is too small for batch size {cfg.batch_size}")
    model = model.to(cfg.torch_dtype)
    x = _transform_images(images, cfg)
    qpts = torch.from_numpy(np.ascontiguousarray(qgrid.flat)).to(cfg.torch_dtype)
    mask = None
    if pixel_mask is not None:
        mask = torch.from_numpy(np.asarray(pixel_mask).reshape(-1).astype(bool))

    n_train = int(math.floor(cfg.train_fraction * n))
    n_train = min(max(n_train, 1), n - 1)
    x_train, x_val = x[:n_train], x[n_train:]

    gen = torch.Generator().manual_seed(cfg.seed)
    flat = flatten_params(model)
    state = AdamState.zeros_like(flat)
    n_pix = qpts.shape[0]

    history: list[dict] = []
    val0 = _eval_loss(model, x_val, qpts, mask, cfg.batch_size)
    train0 = _eval_loss(model, x_train, qpts, mask, cfg.batch_size)
    history.append({"epoch": 0, "lr": lr_schedule(0, cfg), "train_loss": train0, "val_loss": val0})
    best_params, best_epoch, best_val = flat.clone(), 0, val0
    diverged = False

    for epoch in range(1, cfg.epochs + 1):
        lr = lr_schedule(epoch, cfg)
        perm = torch.randperm(n_train, generator=gen)
        running, seen = 0.0, 0
        for start in range(0, n_train, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            pixel_idx = None
            if cfg.pixel_sample is not None and cfg.pixel_sample < n_pix:
                pixel_idx = torch.randperm(n_pix, generator=gen)[: cfg.pixel_sample]
            loss = _forward_loss(model, x_train[idx], qpts, mask, pixel_idx)
            if not torch.isfinite(loss):
                diverged = True
                break
            model.zero_grad(set_to_none=True)
            loss.backward()
            state = adam_step(flat, flatten_grads(model), state, lr, cfg.weight_decay)
            set_flat_params(model, flat)
            running += float(loss) * len(idx)
            seen += len(idx)
        if diverged:
            break
        val = _eval_loss(model, x_val, qpts, mask, cfg.batch_size)
        history.append(
            {"epoch": epoch, "lr": lr, "train_loss": running / max(seen, 1), "val_loss": val}
        )
        if val < best_val:
            best_params, best_epoch, best_val = flat.clone(), epoch, val

    set_flat_params(model, best_params)
    return FitResult(
        history=history,
        best_params=best_params,
        best_epoch=best_epoch,
        best_val_loss=best_val,
        diverged=diverged,
    )


@torch.no_grad()
def predict_dataset(
    model: SpiModel,
    images: np.ndarray,
    qgrid: QGrid,
    cfg: TrainConfig,
    batch_size: int = 64,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Predicted (rotations, brightness factors, reconstructed images).

    Reconstructions are returned in raw photon units, i.e.
    gamma * (exp(y) - 1) / input_premultiplier at the predicted pose.
    """
    images = np.asarray(images)
    n = len(images)
    side = images.shape[-1] if n else 0
    x = _transform_images(images, cfg)
    qpts = torch.from_numpy(np.ascontiguousarray(qgrid.flat)).to(cfg.torch_dtype)
    rots = np.zeros((n, 3, 3))
    gammas = np.zeros(n)
    recon = np.zeros((n, side, side))
    for start in range(0, n, batch_size):
        xb = x[start : start + batch_size]
        rot = model.encoder(xb.unsqueeze(1))
        gamma = model.fluence(xb.unsqueeze(1))
        q_rot = torch.matmul(qpts.unsqueeze(0), rot)
        y = model.decoder(q_rot)
        pattern = gamma.unsqueeze(-1) * torch.expm1(y) / cfg.input_premultiplier
        stop = start + len(xb)
        rots[start:stop] = rot.double().numpy()
        gammas[start:stop] = gamma.double().numpy()
        recon[start:stop] = pattern.double().numpy().reshape(len(xb), side, side)
    return rots, gammas, recon


def batch_gradient(
    model: SpiModel,
    x: torch.Tensor,
    qpts: torch.Tensor,
    mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Flat analytic gradient of the reconstruction loss over one batch."""
    model.zero_grad(set_to_none=True)
    loss = _forward_loss(model, x, qpts, mask)
    loss.backward()
    grad = flatten_grads(model)
    if not torch.all(torch.isfinite(grad)):
        from .model import parameter_index_map

        bad = int(torch.nonzero(~torch.isfinite(grad))[0])
        for name, offset, shape in parameter_index_map(model):
            if offset <= bad < offset + int(np.prod(shape)):
                raise FloatingPointError(f"non-finite gradient in parameter block {name!r}")
    return grad


def finite_difference_gradient(
    model: SpiModel,
    x: torch.Tensor,
    qpts: torch.Tensor,
    indices: np.ndarray,
    mask: torch.Tensor | None = None,
    step: float = 1e-5,
) -> np.ndarray:
    """Central-difference loss derivatives at the given flat-parameter
    indices; the independent oracle for batch_gradient."""
    flat = flatten_params(model)
    out = np.zeros(len(indices))
    with torch.no_grad():
        for k, idx in enumerate(indices):
            for sign in (+1.0, -1.0):
                bumped = flat.clone()
                bumped[idx] += sign * step
                set_flat_params(model, bumped)
                val = float(_forward_loss(model, x, qpts, mask))
                out[k] += sign * val
        set_flat_params(model, flat)
    return out / (2.0 * step)
