"""Orientation encoder, brightness predictor, and intensity decoder.

All three are pure parameterized functions of their inputs; parameters can
be flattened into a single vector with a stable index map, which is what
the optimizer and the finite-difference gradient checks operate on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .geometry import SIX_D_EPS, DegenerateRotationInput, QGrid


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    The convolutional trunk is a reduced residual network: a 7x7 stride-2
    stem followed by three stages of normalization-free residual blocks;
    trunk_widths and blocks_per_stage restore larger trunks when needed.
    q_scale maps physical momentum coordinates into roughly [-1, 1]^3 for
    the sinusoidal decoder (1 / detector-corner |q|).
    """

    trunk_widths: tuple[int, int, int] = (16, 32, 64)
    blocks_per_stage: int = 2
    siren_width: int = 256
    siren_hidden_layers: int = 5
    siren_omega_first: float = 30.0
    siren_omega_hidden: float = 1.0
    q_scale: float = 1.0


def six_d_to_rotation_torch(v: torch.Tensor) -> torch.Tensor:
    """Batched, differentiable Gram-Schmidt map (B, 6) -> (B, 3, 3) rows."""
    a, b = v[:, :3], v[:, 3:]
    na = torch.linalg.norm(a, dim=1, keepdim=True)
    if torch.any(na <= SIX_D_EPS):
        raise DegenerateRotationInput("first half-vector has (near-)zero norm")
    r1 = a / na
    b_perp = b - (r1 * b).sum(dim=1, keepdim=True) * r1
    nb = torch.linalg.norm(b_perp, dim=1, keepdim=True)
    if torch.any(nb <= SIX_D_EPS):
        raise DegenerateRotationInput("second half-vector is (near-)parallel to the first")
    r2 = b_perp / nb
    r3 = torch.cross(r1, r2, dim=1)
    return torch.stack([r1, r2, r3], dim=1)


class ResidualBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.proj = (
            nn.Conv2d(c_in, c_out, 1, stride=stride)
            if (stride != 1 or c_in != c_out)
            else None
        )

    def forward(self, x):
        h = self.conv2(torch.relu(self.conv1(x)))
        skip = x if self.proj is None else self.proj(x)
        return torch.relu(skip + h)


class ConvTrunk(nn.Module):
    """Stem conv + residual stages + global average pooling."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w1, w2, w3 = cfg.trunk_widths
        self.stem = nn.Conv2d(1, w1, 7, stride=2, padding=3)
        stages = []
        for c_in, c_out, stride in ((w1, w1, 1), (w1, w2, 2), (w2, w3, 2)):
            blocks = [ResidualBlock(c_in, c_out, stride)]
            blocks += [ResidualBlock(c_out, c_out) for _ in range(cfg.blocks_per_stage - 1)]
            stages.append(nn.Sequential(*blocks))
        self.stages = nn.Sequential(*stages)
        self.out_width = w3

    def forward(self, x):
        h = self.stages(torch.relu(self.stem(x)))
        return h.mean(dim=(2, 3))


class OrientationEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.trunk = ConvTrunk(cfg)
        self.head = nn.Linear(self.trunk.out_width, 6)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        return six_d_to_rotation_torch(self.head(self.trunk(img)))


class FluencePredictor(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.trunk = ConvTrunk(cfg)
        self.head = nn.Linear(self.trunk.out_width, 1)
        # Start near gamma = 1 so the rectifier begins in its active region.
        nn.init.constant_(self.head.bias, 1.0)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        return torch.relu(self.head(self.trunk(img))).squeeze(-1)


class SineLayer(nn.Module):
    def __init__(self, f_in: int, f_out: int, omega: float):
        super().__init__()
        self.linear = nn.Linear(f_in, f_out)
        self.omega = omega
        bound = math.sqrt(6.0 / f_in) / omega
        nn.init.uniform_(self.linear.weight, -bound, bound)
        nn.init.uniform_(self.linear.bias, -bound, bound)

    def forward(self, x):
        return torch.sin(self.omega * self.linear(x))


class SymmetricSiren(nn.Module):
    """Sinusoidal coordinate network with built-in inversion symmetry.

    The raw network maps a momentum coordinate to a rectified scalar; the
    symmetric output sums evaluations at q and -q, so y(q) == y(-q) holds
    exactly for any parameters.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        layers = [SineLayer(3, cfg.siren_width, cfg.siren_omega_first)]
        for _ in range(cfg.siren_hidden_layers - 1):
            layers.append(SineLayer(cfg.siren_width, cfg.siren_width, cfg.siren_omega_hidden))
        self.layers = nn.Sequential(*layers)
        self.readout = nn.Linear(cfg.siren_width, 1)
        nn.init.constant_(self.readout.bias, 0.5)
        self.q_scale = cfg.q_scale

    def one_sided(self, q: torch.Tensor) -> torch.Tensor:
        return torch.relu(self.readout(self.layers(q * self.q_scale))).squeeze(-1)

    def forward(self, q: torch.Tensor) -> torch.Tensor:
        return self.one_sided(q) + self.one_sided(-q)


class SpiModel(nn.Module):
    """The full three-network bundle."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = OrientationEncoder(cfg)
        self.fluence = FluencePredictor(cfg)
        self.decoder = SymmetricSiren(cfg)


def encoder_forward(model: SpiModel, img_log: torch.Tensor) -> torch.Tensor:
    """Log-transformed image batch (B, 1, H, W) -> rotations (B, 3, 3)."""
    return model.encoder(img_log)


def fluence_forward(model: SpiModel, img_log: torch.Tensor) -> torch.Tensor:
    """Log-transformed image batch -> non-negative brightness factors (B,)."""
    return model.fluence(img_log)


def siren_forward(model: SpiModel, q: torch.Tensor) -> torch.Tensor:
    """Physical momentum coordinates (..., 3) -> symmetric log-intensity."""
    return model.decoder(q)


def intensity_from_y(y: torch.Tensor) -> torch.Tensor:
    """Invert the log-domain transform: I = exp(y) - 1."""
    return torch.expm1(y)


def predict_pattern(
    rotations: torch.Tensor,
    model: SpiModel,
    qgrid_pts: torch.Tensor,
    gammas: torch.Tensor,
) -> torch.Tensor:
    """Decoder-rendered patterns gamma * (exp(y) - 1) at rotated Ewald
    coordinates; rotations (B, 3, 3), qgrid_pts (P, 3) -> (B, P)."""
    q_rot = torch.matmul(qgrid_pts.unsqueeze(0), rotations)  # rows are (R^T q)^T
    y = model.decoder(q_rot)
    return gammas.unsqueeze(-1) * torch.expm1(y)


def qgrid_tensor(qgrid: QGrid, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(qgrid.flat)).to(dtype)


@torch.no_grad()
def predict_intensity_volume(
    model: SpiModel,
    m: int,
    q_spacing: float,
    gauge: np.ndarray | None = None,
    batch: int = 65536,
):
    """Evaluate the decoder intensity on an m^3 centered grid.

    Coordinates beyond the decoder's trained support (|q| > 1/q_scale) are
    set to zero rather than extrapolated. A gauge rotation, when given,
    rotates the evaluation coordinates so the volume lands in an external
    reference frame.
    """
    from .simulate import IntensityVolume

    ax = (np.arange(m) - m // 2) * q_spacing
    x, y, z = np.meshgrid(ax, ax, ax, indexing="ij")
    pts = np.stack([x, y, z], axis=-1).reshape(-1, 3)
    if gauge is not None:
        pts = pts @ np.asarray(gauge).T  # evaluate at g q
    inside = np.linalg.norm(pts, axis=1) <= 1.0 / model.cfg.q_scale
    dtype = next(model.parameters()).dtype
    out = np.zeros(len(pts))
    idx = np.nonzero(inside)[0]
    for start in range(0, len(idx), batch):
        sel = idx[start : start + batch]
        q = torch.from_numpy(pts[sel]).to(dtype)
        out[sel] = torch.expm1(model.decoder(q)).double().numpy()
    return IntensityVolume(grid=out.reshape(m, m, m), q_spacing=q_spacing)


def parameter_index_map(model: nn.Module) -> list[tuple[str, int, tuple[int, ...]]]:
    """Stable (name, offset, shape) triples covering every parameter once."""
    out = []
    offset = 0
    for name, p in model.named_parameters():
        out.append((name, offset, tuple(p.shape)))
        offset += p.numel()
    return out


def flatten_params(model: nn.Module) -> torch.Tensor:
    return torch.cat([p.detach().reshape(-1) for p in model.parameters()]).clone()


def set_flat_params(model: nn.Module, flat: torch.Tensor) -> None:
    offset = 0
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(flat[offset : offset + p.numel()].reshape(p.shape))
            offset += p.numel()
    if offset != flat.numel():
        raise ValueError(f"flat vector length {flat.numel()} != parameter count {offset}")


def flatten_grads(model: nn.Module) -> torch.Tensor:
    chunks = []
    for p in model.parameters():
        if p.grad is None:
            chunks.append(torch.zeros(p.numel(), dtype=p.dtype))
        else:
            chunks.append(p.grad.detach().reshape(-1))
    return torch.cat(chunks).clone()
