"""Desk-scale U-shaped residual segmentation network and training primitives.

The encoder is four stride-2 residual stages named res1..res4; statistics
perturbation can be applied to the output of any named stage during training.
Evaluation bypasses the perturbation path entirely. The ``mode`` argument of
the forward pass controls only that path; batch-normalization statistics
follow the usual module train/eval flag, so the two switches can be exercised
independently.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from collections.abc import Iterable, Mapping
from typing import BinaryIO

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .style_ops import PerturbConfig, perturb
from .tensor_core import RandomSource

INSERTION_POINTS = ("res1", "res2", "res3", "res4")
CHECKPOINT_VERSION = 1
DICE_SMOOTH = 1e-5


@dataclasses.dataclass(frozen=True)
class NetworkConfig:
    """Static architecture description; perturbation settings live elsewhere."""

    in_channels: int = 1
    num_classes: int = 3
    stage_widths: tuple[int, ...] = (16, 32, 64, 128)
    blocks_per_stage: int = 2
    insertion_points: frozenset[str] = frozenset({"res1", "res2"})

    def __post_init__(self) -> None:
        object.__setattr__(self, "stage_widths", tuple(self.stage_widths))
        object.__setattr__(self, "insertion_points", frozenset(self.insertion_points))
        if self.in_channels < 1:
            raise ValueError("in_channels must be positive")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if len(self.stage_widths) != 4:
            raise ValueError("exactly four encoder stage widths are required")
        if any(w < 1 for w in self.stage_widths):
            raise ValueError("stage widths must be positive")
        if self.blocks_per_stage < 1:
            raise ValueError("blocks_per_stage must be positive")
        unknown = self.insertion_points - set(INSERTION_POINTS)
        if unknown:
            raise ValueError(f"unknown insertion points {sorted(unknown)}")


@dataclasses.dataclass(frozen=True)
class TrainSchedule:
    """Optimization schedule: polynomial learning-rate decay over T epochs."""

    l0: float
    T: int
    momentum: float = 0.99
    batch_size: int = 8

    def __post_init__(self) -> None:
        if self.l0 <= 0.0:
            raise ValueError("l0 must be positive")
        if self.T < 1:
            raise ValueError("T must be at least 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")


def config_to_dict(cfg: NetworkConfig) -> dict:
    return {
        "in_channels": cfg.in_channels,
        "num_classes": cfg.num_classes,
        "stage_widths": list(cfg.stage_widths),
        "blocks_per_stage": cfg.blocks_per_stage,
        "insertion_points": sorted(cfg.insertion_points),
    }


def config_from_dict(data: Mapping) -> NetworkConfig:
    return NetworkConfig(
        in_channels=int(data["in_channels"]),
        num_classes=int(data["num_classes"]),
        stage_widths=tuple(int(w) for w in data["stage_widths"]),
        blocks_per_stage=int(data["blocks_per_stage"]),
        insertion_points=frozenset(data["insertion_points"]),
    )


class ResidualBlock(nn.Module):
    """Two 3x3 conv-BN pairs with an additive shortcut, ReLU after the join."""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1) -> None:
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_channels)
        if stride != 1 or in_channels != out_channels:
            self.shortcut: nn.Module = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_channels),
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class DecoderBlock(nn.Module):
    """Nearest-neighbor upsample, skip concatenation, one conv-BN-ReLU."""

    def __init__(self, in_channels: int, skip_channels: int, out_channels: int) -> None:
        super().__init__()
        self.conv = nn.Conv2d(in_channels + skip_channels, out_channels, 3, padding=1, bias=False)
        self.bn = nn.BatchNorm2d(out_channels)

    def forward(self, x: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = torch.cat([x, skip], dim=1)
        return F.relu(self.bn(self.conv(x)))


class SegNet(nn.Module):
    """Stem, four stride-2 residual stages, mirrored decoder, 1x1 head."""

    def __init__(self, cfg: NetworkConfig) -> None:
        super().__init__()
        self.cfg = cfg
        w1, w2, w3, w4 = cfg.stage_widths
        self.stem = nn.Sequential(
            nn.Conv2d(cfg.in_channels, w1, 3, padding=1, bias=False),
            nn.BatchNorm2d(w1),
            nn.ReLU(inplace=False),
        )
        self.stages = nn.ModuleList()
        in_ch = w1
        for width in cfg.stage_widths:
            blocks = [ResidualBlock(in_ch, width, stride=2)]
            blocks += [
                ResidualBlock(width, width, stride=1) for _ in range(cfg.blocks_per_stage - 1)
            ]
            self.stages.append(nn.Sequential(*blocks))
            in_ch = width
        self.decoders = nn.ModuleList(
            [
                DecoderBlock(w4, w3, w3),
                DecoderBlock(w3, w2, w2),
                DecoderBlock(w2, w1, w1),
                DecoderBlock(w1, w1, w1),
            ]
        )
        self.head = nn.Conv2d(w1, cfg.num_classes, 1)

    def forward(
        self,
        images: torch.Tensor,
        perturb_cfg: PerturbConfig | None = None,
        mode: str = "eval",
        rng: RandomSource | None = None,
        capture: dict[str, torch.Tensor] | None = None,
    ) -> torch.Tensor:
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        if images.ndim != 4 or images.shape[1] != self.cfg.in_channels:
            raise ValueError(
                f"expected (B, {self.cfg.in_channels}, H, W) input, got {tuple(images.shape)}"
            )
        if images.shape[2] % 16 != 0 or images.shape[3] % 16 != 0:
            raise ValueError("spatial dims must be divisible by 16 (four stride-2 stages)")
        active = mode == "train" and perturb_cfg is not None
        if active and perturb_cfg.operator != "none" and rng is None:
            raise ValueError("train-mode perturbation requires a RandomSource")

        x = self.stem(images)
        skips = [x]
        for index, stage in enumerate(self.stages):
            x = stage(x)
            point = INSERTION_POINTS[index]
            if active and point in self.cfg.insertion_points:
                x = perturb(x, perturb_cfg, mode, rng)
            if capture is not None:
                capture[point] = x
            skips.append(x)
        # skips = [stem, res1, res2, res3, res4]; res4 is the decoder input
        x = self.decoders[0](x, skips[3])
        x = self.decoders[1](x, skips[2])
        x = self.decoders[2](x, skips[1])
        x = self.decoders[3](x, skips[0])
        return self.head(x)


def build_network(cfg: NetworkConfig) -> SegNet:
    return SegNet(cfg)


def init_parameters(net: SegNet, rng: RandomSource) -> None:
    """Deterministic initialization from the given source.

    Convolutions get He-normal weights keyed by module name, biases zero;
    batch-norm layers reset to weight 1, bias 0, fresh running statistics.
    Every parameter must be touched, so two builds from equal seeds are
    bit-identical regardless of the ambient torch RNG state.
    """
    covered: set[str] = set()
    for name, module in net.named_modules():
        if isinstance(module, nn.Conv2d):
            fan_in = module.in_channels // module.groups * module.kernel_size[0] * module.kernel_size[1]
            std = (2.0 / fan_in) ** 0.5
            draws = rng.substream("init", name).generator.standard_normal(
                tuple(module.weight.shape)
            )
            with torch.no_grad():
                module.weight.copy_(torch.from_numpy(draws * std).to(module.weight.dtype))
                if module.bias is not None:
                    module.bias.zero_()
            covered.add(f"{name}.weight" if name else "weight")
            if module.bias is not None:
                covered.add(f"{name}.bias" if name else "bias")
        elif isinstance(module, nn.BatchNorm2d):
            with torch.no_grad():
                module.weight.fill_(1.0)
                module.bias.zero_()
            module.reset_running_stats()
            covered.add(f"{name}.weight")
            covered.add(f"{name}.bias")
    all_params = {name for name, _ in net.named_parameters()}
    missed = all_params - covered
    if missed:
        raise RuntimeError(f"initialization missed parameters: {sorted(missed)}")


def dice_ce_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Soft Dice over foreground classes plus mean pixelwise cross-entropy."""
    if logits.ndim != 4:
        raise ValueError("logits must be (B, K, H, W)")
    if target.shape != (logits.shape[0], logits.shape[2], logits.shape[3]):
        raise ValueError("target must be (B, H, W) labels")
    num_classes = logits.shape[1]
    if target.min().item() < 0 or target.max().item() >= num_classes:
        raise ValueError(f"target labels must lie in [0, {num_classes})")
    probs = F.softmax(logits, dim=1)
    one_hot = F.one_hot(target.long(), num_classes).permute(0, 3, 1, 2).to(probs.dtype)
    dice_terms = []
    for k in range(1, num_classes):
        p = probs[:, k]
        g = one_hot[:, k]
        inter = (p * g).sum()
        ratio = (2.0 * inter + DICE_SMOOTH) / (p.sum() + g.sum() + DICE_SMOOTH)
        dice_terms.append(ratio)
    dice_loss = 1.0 - torch.stack(dice_terms).mean()
    ce_loss = F.cross_entropy(logits, target.long())
    return dice_loss + ce_loss


def poly_lr(schedule: TrainSchedule, t: int) -> float:
    """l_t = l0 * (1 - t/T)^0.9 with t an epoch index in [0, T]."""
    if not 0 <= t <= schedule.T:
        raise ValueError(f"epoch index {t} outside [0, {schedule.T}]")
    return schedule.l0 * (1.0 - t / schedule.T) ** 0.9


def sgd_step(
    params: list[torch.Tensor],
    grads: list[torch.Tensor],
    lr: float,
    momentum: float,
    velocity: list[torch.Tensor],
) -> tuple[list[torch.Tensor], list[torch.Tensor]]:
    """Classical momentum update in place: v <- momentum*v + g; p <- p - lr*v."""
    if not (len(params) == len(grads) == len(velocity)):
        raise ValueError("params, grads, and velocity lengths disagree")
    for i, (p, g, v) in enumerate(zip(params, grads, velocity)):
        if not torch.isfinite(g).all():
            raise ValueError(f"non-finite gradient at parameter index {i} (shape {tuple(g.shape)})")
        with torch.no_grad():
            v.mul_(momentum).add_(g)
            p.add_(v, alpha=-lr)
    return params, velocity


class MomentumSGD:
    """Stateful wrapper around sgd_step tied to a module's parameters."""

    def __init__(self, parameters: Iterable[torch.Tensor], momentum: float = 0.99) -> None:
        self.params = list(parameters)
        self.momentum = momentum
        self.velocity = [torch.zeros_like(p) for p in self.params]

    def step(self, lr: float) -> None:
        grads = []
        for i, p in enumerate(self.params):
            if p.grad is None:
                grads.append(torch.zeros_like(p))
            else:
                grads.append(p.grad)
        sgd_step(self.params, grads, lr, self.momentum, self.velocity)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def _write_tensor(fh: BinaryIO, name: str, tensor: torch.Tensor) -> None:
    data = tensor.detach().to(torch.float32).contiguous().cpu().numpy()
    name_bytes = name.encode("utf-8")
    fh.write(struct.pack("<H", len(name_bytes)))
    fh.write(name_bytes)
    fh.write(struct.pack("<B", data.ndim))
    for dim in data.shape:
        fh.write(struct.pack("<I", dim))
    fh.write(data.astype("<f4").tobytes())


def save_checkpoint(
    path, net: SegNet, extra: Mapping | None = None
) -> None:
    """Single-file format: version byte, JSON config echo, named float32 tensors.

    Integer buffers (the batch-norm step counters) are stored as float32 and
    cast back on load; exact below 2^24 steps, far beyond desk scale.
    """
    echo = {"network": config_to_dict(net.cfg), "extra": dict(extra or {})}
    echo_bytes = json.dumps(echo, sort_keys=True, separators=(",", ":")).encode("utf-8")
    state = net.state_dict()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<B", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(echo_bytes)))
        fh.write(echo_bytes)
        fh.write(struct.pack("<I", len(state)))
        for name, tensor in state.items():
            _write_tensor(fh, name, tensor)


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise ValueError("truncated checkpoint file")
    return data


def load_checkpoint(path) -> tuple[dict, dict[str, torch.Tensor]]:
    """Read back the config echo and the float32 tensor table."""
    with open(path, "rb") as fh:
        (version,) = struct.unpack("<B", _read_exact(fh, 1))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (echo_len,) = struct.unpack("<I", _read_exact(fh, 4))
        echo = json.loads(_read_exact(fh, echo_len).decode("utf-8"))
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        tensors: dict[str, torch.Tensor] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1))
            shape = tuple(
                struct.unpack("<I", _read_exact(fh, 4))[0] for _ in range(ndim)
            )
            numel = 1
            for dim in shape:
                numel *= dim
            raw = _read_exact(fh, 4 * numel)
            arr = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
            tensors[name] = torch.from_numpy(arr)
        if fh.read(1):
            raise ValueError("trailing bytes after checkpoint payload")
    return echo, tensors


def build_from_checkpoint(path) -> tuple[SegNet, dict]:
    """Rebuild the network described by a checkpoint and load its weights."""
    echo, tensors = load_checkpoint(path)
    cfg = config_from_dict(echo["network"])
    net = build_network(cfg)
    reference = net.state_dict()
    if set(reference) != set(tensors):
        raise ValueError("checkpoint tensor names do not match the configured network")
    state = {name: tensors[name].to(reference[name].dtype) for name in reference}
    net.load_state_dict(state, strict=True)
    return net, echo
