"""Feature-batch primitives: per-channel statistics, normalization, rank
matching, and the seeded random source every stochastic operator consumes.

Feature batches are plain ``torch.Tensor`` objects of shape (B, C, H, W).
Statistics are always detached: they act as constants under differentiation,
so the normalization Jacobian is exactly diag(1/std).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import torch

DEFAULT_EPS = 1e-6

_U64 = 0xFFFFFFFFFFFFFFFF


def _key_to_uint(key) -> int:
    """Map a sub-stream key (int or string-like) to a stable uint64."""
    if isinstance(key, (int, np.integer)):
        return int(key) & _U64
    digest = hashlib.blake2b(str(key).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class RandomSource:
    """Seeded PCG64 stream with hierarchically derivable sub-streams.

    The generator algorithm is numpy's PCG64 seeded through SeedSequence, so
    the same seed yields the same draw sequence on every platform.
    ``substream(*keys)`` derives an independent child keyed by the given
    (fold, epoch, module, ...) path; derivation depends only on the seed path,
    never on how many draws the parent has consumed. A single instance must
    not be shared across concurrent callers — hand each one a sub-stream.
    """

    def __init__(self, seed: int | np.random.SeedSequence):
        if isinstance(seed, np.random.SeedSequence):
            self._seq = seed
        else:
            self._seq = np.random.SeedSequence(int(seed) & _U64)
        self._gen = np.random.Generator(np.random.PCG64(self._seq))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def substream(self, *keys) -> "RandomSource":
        spawn = tuple(_key_to_uint(k) for k in keys)
        child = np.random.SeedSequence(
            entropy=self._seq.entropy, spawn_key=tuple(self._seq.spawn_key) + spawn
        )
        return RandomSource(child)

    def __repr__(self) -> str:
        return f"RandomSource(entropy={self._seq.entropy}, spawn_key={self._seq.spawn_key})"


# ---------------------------------------------------------------------------
# distribution descriptors for sample()


@dataclass(frozen=True)
class Uniform:
    lo: float = 0.0
    hi: float = 1.0

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"Uniform requires lo < hi, got [{self.lo}, {self.hi})")


@dataclass(frozen=True)
class Beta:
    """Symmetric Beta(alpha, alpha)."""

    alpha: float

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"Beta requires alpha > 0, got {self.alpha}")


@dataclass(frozen=True)
class Bernoulli:
    """Element-wise Bernoulli; ``p`` is a tensor of per-element probabilities."""

    p: torch.Tensor

    def __post_init__(self):
        p = self.p
        if not torch.is_tensor(p):
            raise ValueError("Bernoulli.p must be a tensor")
        if p.numel() and (p.min().item() < 0.0 or p.max().item() > 1.0):
            raise ValueError("Bernoulli probabilities must lie in [0, 1]")


@dataclass(frozen=True)
class Normal:
    mean: float
    std: float

    def __post_init__(self):
        if self.std < 0:
            raise ValueError(f"Normal requires std >= 0, got {self.std}")


Distribution = Uniform | Beta | Bernoulli | Normal


def sample(
    dist: Distribution,
    shape: tuple[int, ...],
    rng: RandomSource,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Draw an independent tensor of ``shape`` from ``dist``.

    Consuming the same sub-stream twice yields identical tensors. Draws are
    generated in float64 and cast, so the value sequence does not depend on
    the requested dtype.
    """
    shape = tuple(int(s) for s in shape)
    gen = rng.generator
    if isinstance(dist, Uniform):
        values = gen.random(shape) * (dist.hi - dist.lo) + dist.lo
    elif isinstance(dist, Beta):
        values = gen.beta(dist.alpha, dist.alpha, shape)
    elif isinstance(dist, Bernoulli):
        if tuple(dist.p.shape) != shape:
            raise ValueError(f"Bernoulli p shape {tuple(dist.p.shape)} != requested {shape}")
        u = gen.random(shape)
        values = (u < dist.p.detach().cpu().numpy()).astype(np.float64)
    elif isinstance(dist, Normal):
        values = gen.normal(dist.mean, dist.std, shape)
    else:
        raise TypeError(f"unknown distribution descriptor: {dist!r}")
    return torch.from_numpy(np.asarray(values)).to(dtype)


# ---------------------------------------------------------------------------
# channel statistics


@dataclass
class ChannelStats:
    """Per-(sample, channel) mean and standard deviation, shapes (B, C).

    ``std`` is sqrt(unbiased variance + eps), hence always >= sqrt(eps).
    Both tensors are detached constants.
    """

    mean: torch.Tensor
    std: torch.Tensor
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        if self.mean.shape != self.std.shape or self.mean.dim() != 2:
            raise ValueError(
                f"mean/std must share a (B, C) shape, got {tuple(self.mean.shape)} "
                f"and {tuple(self.std.shape)}"
            )


def check_feature_batch(f: torch.Tensor) -> None:
    """Validate the (B, C, H, W) feature-batch contract; raises ValueError."""
    if not torch.is_tensor(f) or not f.is_floating_point():
        raise ValueError("feature batch must be a floating-point tensor")
    if f.dim() != 4:
        raise ValueError(f"feature batch must be rank 4 (B, C, H, W), got rank {f.dim()}")
    b, c, h, w = f.shape
    if b < 1 or c < 1:
        raise ValueError(f"feature batch needs B >= 1 and C >= 1, got B={b}, C={c}")
    if h * w < 2:
        raise ValueError(f"feature batch needs H*W >= 2 spatial positions, got {h}x{w}")
    if not torch.isfinite(f).all():
        raise ValueError("feature batch contains non-finite values")


def channel_mean_std(f: torch.Tensor, eps: float = DEFAULT_EPS) -> ChannelStats:
    """Per-channel spatial mean and std with the unbiased (N-1) divisor.

    Accumulation runs in float64; results are cast back to ``f``'s dtype and
    detached, so downstream gradients treat them as constants.
    """
    check_feature_batch(f)
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    with torch.no_grad():
        f64 = f.to(torch.float64)
        mean = f64.mean(dim=(2, 3))
        var = f64.var(dim=(2, 3), unbiased=True)
        std = torch.sqrt(var + eps)
    return ChannelStats(mean.to(f.dtype), std.to(f.dtype), eps)


def normalize(f: torch.Tensor, stats: ChannelStats) -> torch.Tensor:
    """Standardize each channel: (f - mean) / std with frozen statistics."""
    check_feature_batch(f)
    b, c = f.shape[0], f.shape[1]
    if tuple(stats.mean.shape) != (b, c):
        raise ValueError(
            f"stats shape {tuple(stats.mean.shape)} does not match batch ({b}, {c})"
        )
    mean = stats.mean.detach().unsqueeze(-1).unsqueeze(-1)
    std = stats.std.detach().unsqueeze(-1).unsqueeze(-1)
    return (f - mean) / std


def apply_affine(
    f_normed: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor
) -> torch.Tensor:
    """Per-channel affine map: gamma * f_normed + beta, gamma/beta of shape (B, C)."""
    check_feature_batch(f_normed)
    b, c = f_normed.shape[0], f_normed.shape[1]
    if tuple(gamma.shape) != (b, c) or tuple(beta.shape) != (b, c):
        raise ValueError(
            f"gamma/beta must have shape ({b}, {c}), got {tuple(gamma.shape)} "
            f"and {tuple(beta.shape)}"
        )
    return gamma.unsqueeze(-1).unsqueeze(-1) * f_normed + beta.unsqueeze(-1).unsqueeze(-1)


def rank_match(source: torch.Tensor, reference: torch.Tensor) -> torch.Tensor:
    """Exact rank matching of two spatial vectors of equal length.

    The position holding the k-th smallest source value receives the k-th
    smallest reference value, so the output's multiset equals the reference's
    and (for distinct source values) its spatial ordering equals the source's.
    Ties in the source are broken by spatial index via a stable sort.
    """
    if source.dim() != 1 or reference.dim() != 1:
        raise ValueError("rank_match expects 1-D vectors")
    if source.shape[0] != reference.shape[0]:
        raise ValueError(
            f"length mismatch: source {source.shape[0]} vs reference {reference.shape[0]}"
        )
    order = torch.argsort(source, stable=True)
    ref_sorted, _ = torch.sort(reference)
    out = torch.empty_like(reference)
    out[order] = ref_sorted
    return out
