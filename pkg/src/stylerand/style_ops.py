"""Feature-statistics perturbation operators.

Each operator factors into a statistics provider (where do the replacement
channel statistics come from) and an application strategy (how they are
blended back into the feature map), so ablation variants are configuration
rather than separate code paths.

Gradient contract: every provider output and every mask is detached, so the
backward pass of an affine-path operator is diagonal with entries
``gamma_mix[b, c] / sigma(f)[b, c]``, and the rank-matching path applies its
correction through a stop-gradient delta, leaving an exact identity gradient.
"""

from __future__ import annotations

import dataclasses
from typing import IO, NamedTuple

import torch

from .tensor_core import (
    Bernoulli,
    Beta,
    ChannelStats,
    Normal,
    RandomSource,
    Uniform,
    apply_affine,
    channel_mean_std,
    check_feature_batch,
    normalize,
    sample,
)

OPERATORS: frozenset[str] = frozenset(
    {
        "none",
        "trid",
        "mixstyle",
        "efdm",
        "dsu",
        "mixstyle+sm",
        "efdm+sm",
        "trid-normal",
        "sr-only",
        "sr+mixup",
    }
)

_PROVENANCE_TAGS = ("uniform", "shuffle-mix", "shuffle-mix-identity", "dsu", "normal-ablation")


@dataclasses.dataclass(frozen=True)
class AugStats:
    """Replacement channel statistics, shaped (B, C), always detached."""

    sigma_r: torch.Tensor
    mu_r: torch.Tensor
    provenance: str

    def __post_init__(self) -> None:
        if self.sigma_r.shape != self.mu_r.shape or self.sigma_r.ndim != 2:
            raise ValueError("sigma_r and mu_r must share a (B, C) shape")
        if self.provenance not in _PROVENANCE_TAGS:
            raise ValueError(f"unknown provenance tag {self.provenance!r}")
        if self.provenance == "uniform":
            for t in (self.sigma_r, self.mu_r):
                if t.min().item() < 0.0 or t.max().item() >= 1.0:
                    raise ValueError("uniform provenance requires entries in [0, 1)")


@dataclasses.dataclass(frozen=True)
class MixMask:
    """Channel-wise Bernoulli selection: lam[b, c] = 1 picks the augmented side."""

    P: torch.Tensor
    lam: torch.Tensor
    alpha: float = 0.1

    def __post_init__(self) -> None:
        if self.P.shape != self.lam.shape or self.P.ndim != 2:
            raise ValueError("P and lam must share a (B, C) shape")
        if self.P.min().item() < 0.0 or self.P.max().item() > 1.0:
            raise ValueError("P must lie in [0, 1]")
        if not torch.all((self.lam == 0.0) | (self.lam == 1.0)):
            raise ValueError("lam must be binary")


@dataclasses.dataclass(frozen=True)
class BlendWeights:
    """Continuous batch-wise mixing weights, shaped (B,), weighting the original side."""

    lambda_m: torch.Tensor

    def __post_init__(self) -> None:
        if self.lambda_m.ndim != 1:
            raise ValueError("lambda_m must be one-dimensional (per sample)")
        if self.lambda_m.min().item() < 0.0 or self.lambda_m.max().item() > 1.0:
            raise ValueError("lambda_m must lie in [0, 1]")


@dataclasses.dataclass(frozen=True)
class MixedStats:
    """Final affine parameters after blending original and augmented statistics."""

    gamma_mix: torch.Tensor
    beta_mix: torch.Tensor
    mask: MixMask | BlendWeights | None

    def __post_init__(self) -> None:
        if self.gamma_mix.shape != self.beta_mix.shape or self.gamma_mix.ndim != 2:
            raise ValueError("gamma_mix and beta_mix must share a (B, C) shape")


@dataclasses.dataclass(frozen=True)
class PerturbConfig:
    """Operator selection plus the knobs shared by every variant.

    p is the activation probability of the whole module per forward call;
    alpha parameterizes every Beta draw; normal_params feeds the
    normal-distribution ablation and is ignored by the other operators.
    """

    operator: str
    p: float = 0.5
    alpha: float = 0.1
    normal_params: tuple[float, float] = (0.5, 1.0)

    def __post_init__(self) -> None:
        if self.operator not in OPERATORS:
            raise ValueError(
                f"unknown operator {self.operator!r}; expected one of {sorted(OPERATORS)}"
            )
        if not 0.0 <= self.p <= 1.0:
            raise ValueError("p must lie in [0, 1]")
        if self.alpha <= 0.0:
            raise ValueError("alpha must be positive")
        mean, std = self.normal_params
        if std < 0.0:
            raise ValueError("normal_params std must be non-negative")


class StatsRecord(NamedTuple):
    domain: str
    sample: int
    channel: int
    mean: float
    std: float


STATS_HEADER = "domain,sample,channel,mean,std"


def provide_uniform(
    shape: tuple[int, int], rng: RandomSource, dtype: torch.dtype = torch.float32
) -> AugStats:
    """Draw sigma_r then mu_r i.i.d. from Uniform[0, 1) at the given (B, C) shape."""
    sigma_r = sample(Uniform(0.0, 1.0), shape, rng, dtype=dtype)
    mu_r = sample(Uniform(0.0, 1.0), shape, rng, dtype=dtype)
    return AugStats(sigma_r=sigma_r, mu_r=mu_r, provenance="uniform")


def provide_shuffle_mix(
    stats: ChannelStats, alpha: float, rng: RandomSource
) -> tuple[AugStats, torch.Tensor]:
    """Partner statistics from a uniform batch permutation plus Beta(alpha, alpha) weights.

    The permutation may leave fixed points; a degenerate j = i draw simply
    reproduces the sample's own statistics. With B = 1 there is no partner,
    so the original statistics come back with lambda_m = 1 and the
    provenance flags the no-op.
    """
    b = stats.mean.shape[0]
    dtype = stats.std.dtype
    if b < 2:
        aug = AugStats(
            sigma_r=stats.std.clone(),
            mu_r=stats.mean.clone(),
            provenance="shuffle-mix-identity",
        )
        return aug, torch.ones(b, dtype=dtype)
    perm = torch.from_numpy(rng.generator.permutation(b))
    aug = AugStats(
        sigma_r=stats.std[perm].clone(),
        mu_r=stats.mean[perm].clone(),
        provenance="shuffle-mix",
    )
    lambda_m = sample(Beta(alpha), (b,), rng, dtype=dtype)
    return aug, lambda_m


def provide_dsu(stats: ChannelStats, rng: RandomSource) -> AugStats:
    """Gaussian resampling around the original statistics.

    The per-channel scale is the unbiased batch standard deviation of the
    statistics themselves; mu noise is drawn before sigma noise. B = 1 makes
    both scales zero and the provider degenerates to the identity.
    """
    b, c = stats.mean.shape
    dtype = stats.std.dtype
    if b < 2:
        return AugStats(sigma_r=stats.std.clone(), mu_r=stats.mean.clone(), provenance="dsu")
    scale_mu = stats.mean.std(dim=0, unbiased=True)
    scale_sigma = stats.std.std(dim=0, unbiased=True)
    eps_mu = sample(Normal(0.0, 1.0), (b, c), rng, dtype=dtype)
    eps_sigma = sample(Normal(0.0, 1.0), (b, c), rng, dtype=dtype)
    return AugStats(
        sigma_r=stats.std + eps_sigma * scale_sigma.unsqueeze(0),
        mu_r=stats.mean + eps_mu * scale_mu.unsqueeze(0),
        provenance="dsu",
    )


def provide_normal_ablation(
    shape: tuple[int, int],
    rng: RandomSource,
    params: tuple[float, float] = (0.5, 1.0),
    dtype: torch.dtype = torch.float32,
) -> AugStats:
    """Draw sigma_r then mu_r i.i.d. from Normal(params), used unclipped.

    Negative sigma_r draws flip the channel's sign; that degradation is the
    point of the ablation, so no clamping is applied.
    """
    mean, std = params
    sigma_r = sample(Normal(mean, std), shape, rng, dtype=dtype)
    mu_r = sample(Normal(mean, std), shape, rng, dtype=dtype)
    return AugStats(sigma_r=sigma_r, mu_r=mu_r, provenance="normal-ablation")


def sm_mix(orig: ChannelStats, aug: AugStats, alpha: float, rng: RandomSource) -> MixedStats:
    """Channel-wise Bernoulli selection between augmented and original statistics.

    P ~ Beta(alpha, alpha) per (b, c), lam ~ Bernoulli(P); lam = 1 takes the
    augmented side. By Beta symmetry the marginal of lam is exactly 1/2.
    """
    if orig.std.shape != aug.sigma_r.shape:
        raise ValueError("original and augmented statistics shapes disagree")
    shape = tuple(orig.std.shape)
    dtype = orig.std.dtype
    prob = sample(Beta(alpha), shape, rng, dtype=dtype)
    lam = sample(Bernoulli(prob), shape, rng, dtype=dtype)
    gamma_mix = lam * aug.sigma_r + (1.0 - lam) * orig.std
    beta_mix = lam * aug.mu_r + (1.0 - lam) * orig.mean
    return MixedStats(
        gamma_mix=gamma_mix, beta_mix=beta_mix, mask=MixMask(P=prob, lam=lam, alpha=alpha)
    )


def batch_mixup(orig: ChannelStats, aug: AugStats, lambda_m: torch.Tensor) -> MixedStats:
    """Convex combination with batch-wise weights; lambda_m weights the original side."""
    if orig.std.shape != aug.sigma_r.shape:
        raise ValueError("original and augmented statistics shapes disagree")
    weights = BlendWeights(lambda_m=lambda_m)
    if lambda_m.shape[0] != orig.std.shape[0]:
        raise ValueError("lambda_m must carry one weight per batch sample")
    lam = lambda_m.to(orig.std.dtype).unsqueeze(1)
    gamma_mix = lam * orig.std + (1.0 - lam) * aug.sigma_r
    beta_mix = lam * orig.mean + (1.0 - lam) * aug.mu_r
    return MixedStats(gamma_mix=gamma_mix, beta_mix=beta_mix, mask=weights)


def _apply_mixed(f: torch.Tensor, stats: ChannelStats, mixed: MixedStats) -> torch.Tensor:
    return apply_affine(normalize(f, stats), mixed.gamma_mix, mixed.beta_mix)


def perturb(
    f: torch.Tensor, cfg: PerturbConfig, mode: str, rng: RandomSource
) -> torch.Tensor:
    """Apply the configured operator to a feature batch.

    Eval mode, the "none" operator, and a closed gate all return the input
    tensor itself. The gate is one uniform scalar per invocation, open when
    the draw is strictly below cfg.p, so p = 0 never fires and p = 1 always
    fires.
    """
    check_feature_batch(f)
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or cfg.operator == "none":
        return f
    if not rng.generator.random() < cfg.p:
        return f

    if cfg.operator in ("efdm", "efdm+sm"):
        return efdm_perturb(f, cfg, rng)

    b, c = f.shape[0], f.shape[1]
    stats = channel_mean_std(f)
    if cfg.operator == "trid":
        aug = provide_uniform((b, c), rng, dtype=f.dtype)
        mixed = sm_mix(stats, aug, cfg.alpha, rng)
    elif cfg.operator == "sr-only":
        aug = provide_uniform((b, c), rng, dtype=f.dtype)
        mixed = MixedStats(gamma_mix=aug.sigma_r, beta_mix=aug.mu_r, mask=None)
    elif cfg.operator == "sr+mixup":
        aug = provide_uniform((b, c), rng, dtype=f.dtype)
        lambda_m = sample(Beta(cfg.alpha), (b,), rng, dtype=f.dtype)
        mixed = batch_mixup(stats, aug, lambda_m)
    elif cfg.operator == "mixstyle":
        aug, lambda_m = provide_shuffle_mix(stats, cfg.alpha, rng)
        mixed = batch_mixup(stats, aug, lambda_m)
    elif cfg.operator == "mixstyle+sm":
        aug, _ = provide_shuffle_mix(stats, cfg.alpha, rng)
        mixed = sm_mix(stats, aug, cfg.alpha, rng)
    elif cfg.operator == "dsu":
        aug = provide_dsu(stats, rng)
        mixed = MixedStats(gamma_mix=aug.sigma_r, beta_mix=aug.mu_r, mask=None)
    elif cfg.operator == "trid-normal":
        aug = provide_normal_ablation((b, c), rng, cfg.normal_params, dtype=f.dtype)
        mixed = sm_mix(stats, aug, cfg.alpha, rng)
    else:  # pragma: no cover - PerturbConfig rejects unknown tags at load
        raise ValueError(f"unhandled operator {cfg.operator!r}")
    return _apply_mixed(f, stats, mixed)


def efdm_perturb(f: torch.Tensor, cfg: PerturbConfig, rng: RandomSource) -> torch.Tensor:
    """Exact-distribution matching against a permuted batch partner.

    Per (b, c) the spatial values are reordered copies of the partner
    channel's order statistics; the correction enters through a
    stop-gradient delta, so the gradient w.r.t. f is exactly the identity.
    Draw order: partner permutation, then per-sample Beta weights (base
    variant) or the channel-wise Beta-Bernoulli mask (+sm variant).
    """
    check_feature_batch(f)
    b, c, h, w = f.shape
    if b < 2:
        return f
    perm = torch.from_numpy(rng.generator.permutation(b))
    flat = f.reshape(b, c, h * w)
    order = torch.argsort(flat.detach(), dim=-1, stable=True)
    ref_sorted = torch.sort(flat.detach()[perm], dim=-1).values
    matched = torch.empty_like(flat).scatter_(-1, order, ref_sorted).reshape(b, c, h, w)
    if cfg.operator == "efdm+sm":
        prob = sample(Beta(cfg.alpha), (b, c), rng, dtype=f.dtype)
        lam = sample(Bernoulli(prob), (b, c), rng, dtype=f.dtype)
        weight = lam.unsqueeze(-1).unsqueeze(-1)
    else:
        lambda_m = sample(Beta(cfg.alpha), (b,), rng, dtype=f.dtype)
        weight = lambda_m.reshape(b, 1, 1, 1)
    return f + weight * (matched - f).detach()


def format_stat(value: float) -> str:
    """Render with 9 significant digits, enough for float32 to round-trip."""
    return f"{value:.9g}"


def write_stats_header(sink: IO[str]) -> None:
    sink.write(STATS_HEADER + "\n")


def export_stats(
    f: torch.Tensor,
    domain_label: str,
    sink: IO[str] | None = None,
    sample_offset: int = 0,
) -> list[StatsRecord]:
    """Emit one (domain, sample, channel, mean, std) record per (b, c).

    Sample indices are offset so successive batches from one domain number
    contiguously. When a sink is given, rows are appended in record order.
    """
    stats = channel_mean_std(f)
    b, c = stats.mean.shape
    records = [
        StatsRecord(
            domain=domain_label,
            sample=sample_offset + bi,
            channel=ci,
            mean=stats.mean[bi, ci].item(),
            std=stats.std[bi, ci].item(),
        )
        for bi in range(b)
        for ci in range(c)
    ]
    if sink is not None:
        for rec in records:
            sink.write(
                f"{rec.domain},{rec.sample},{rec.channel},"
                f"{format_stat(rec.mean)},{format_stat(rec.std)}\n"
            )
    return records
