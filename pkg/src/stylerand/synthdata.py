"""Procedural multi-domain 2-D segmentation dataset.

Every sample is a pair of nested ellipses (labels: 0 background, 1 outer
ring, 2 inner core) rendered under a domain-specific appearance style.
Geometry is drawn from a sub-stream keyed only by sample index while
appearance is keyed by (domain, index), so the same index yields an
identical mask in every domain and the domain shift is appearance-only.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .tensor_core import RandomSource

MANIFEST_NAME = "manifest.json"
MANIFEST_FORMAT_VERSION = 1
DEFAULT_IMAGE_SIZE = 128
NUM_STRATA = 4
MAX_GEOMETRY_ATTEMPTS = 100
BASE_INTENSITIES = (0.25, 0.55, 0.85)
BASE_JITTER = 0.05
TEXTURE_GRID = 8

STYLE_RANGES: dict[str, tuple[float, float]] = {
    "gamma": (0.7, 1.45),
    "brightness": (-0.35, 0.35),
    "contrast": (0.45, 1.7),
    "noise_std": (0.0, 0.05),
    "bias_amplitude": (0.0, 0.18),
    "texture_scale": (0.0, 0.04),
}

# fixed per-parameter stratum offsets decorrelate the domain orderings
_STRATUM_OFFSETS: dict[str, int] = {
    "gamma": 0,
    "brightness": 1,
    "contrast": 2,
    "noise_std": 3,
    "bias_amplitude": 1,
    "texture_scale": 2,
}


@dataclasses.dataclass(frozen=True)
class DomainStyle:
    """Appearance parameters of one domain; all values inside declared ranges."""

    domain_id: int
    gamma: float
    brightness: float
    contrast: float
    noise_std: float
    bias_amplitude: float
    texture_scale: float

    def __post_init__(self) -> None:
        if self.domain_id < 0:
            raise ValueError("domain_id must be non-negative")
        for field, (lo, hi) in STYLE_RANGES.items():
            value = getattr(self, field)
            if not lo <= value <= hi:
                raise ValueError(f"{field}={value} outside [{lo}, {hi}]")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclasses.dataclass
class Sample:
    """One image/mask pair; image in [0, 1], mask labels a subset of {0, 1, 2}."""

    image: np.ndarray
    mask: np.ndarray
    domain_id: int
    sample_id: str


@dataclasses.dataclass
class LoadedDataset:
    """Eagerly loaded dataset grouped by domain and split."""

    root: Path
    manifest: dict
    dataset_hash: str
    samples: dict[int, dict[str, list[Sample]]]

    @property
    def image_size(self) -> int:
        return int(self.manifest["image_size"])

    @property
    def num_domains(self) -> int:
        return int(self.manifest["K"])

    @property
    def num_classes(self) -> int:
        return 2 if self.manifest["single_class"] else 3

    def split(self, domain_id: int, part: str) -> list[Sample]:
        return self.samples[domain_id][part]


def make_domain_style(global_seed: int, domain_id: int) -> DomainStyle:
    """Deterministic style for one domain, stratified across parameter ranges.

    Each parameter's range splits into NUM_STRATA bins; the bin index walks
    with domain_id (shifted per parameter), so consecutive domains land in
    different bins of every parameter and are visually distinct.
    """
    if domain_id < 0:
        raise ValueError("domain_id must be non-negative")
    rng = RandomSource(global_seed).substream("style", domain_id)
    values: dict[str, float] = {}
    for field, (lo, hi) in STYLE_RANGES.items():
        stratum = (domain_id + _STRATUM_OFFSETS[field]) % NUM_STRATA
        width = (hi - lo) / NUM_STRATA
        u = rng.generator.random()
        values[field] = lo + (stratum + u) * width
    return DomainStyle(domain_id=domain_id, **values)


@dataclasses.dataclass(frozen=True)
class _Geometry:
    mask: np.ndarray


def draw_geometry(geo_rng: RandomSource, image_size: int) -> _Geometry:
    """Rasterize one nested-ellipse mask.

    Outer semi-axes are 15 to 30 percent of the image; the inner ellipse is
    scaled 30 to 60 percent with a center offset up to 40 percent of the
    outer semi-axes, resampled until strictly contained (at most 100 draws).
    """
    if image_size < 64:
        raise ValueError("image_size must be at least 64")
    gen = geo_rng.generator
    s = float(image_size)
    a = gen.uniform(0.15, 0.30) * s
    b = gen.uniform(0.15, 0.30) * s
    cy = gen.uniform(a + 1.0, s - 1.0 - a)
    cx = gen.uniform(b + 1.0, s - 1.0 - b)
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    outer = ((yy - cy) / a) ** 2 + ((xx - cx) / b) ** 2 <= 1.0
    for _ in range(MAX_GEOMETRY_ATTEMPTS):
        scale = gen.uniform(0.3, 0.6)
        off_y = gen.uniform(-0.4, 0.4) * a
        off_x = gen.uniform(-0.4, 0.4) * b
        ia, ib = scale * a, scale * b
        icy, icx = cy + off_y, cx + off_x
        inner = ((yy - icy) / ia) ** 2 + ((xx - icx) / ib) ** 2 <= 1.0
        contained = not np.any(inner & ~outer)
        ring_nonempty = np.any(outer & ~inner)
        if contained and inner.any() and ring_nonempty:
            mask = np.zeros((image_size, image_size), dtype=np.uint8)
            mask[outer] = 1
            mask[inner] = 2
            return _Geometry(mask=mask)
    raise ValueError("could not draw a strictly nested inner ellipse in 100 attempts")


def apply_appearance(
    mask: np.ndarray, style: DomainStyle, app_rng: RandomSource
) -> np.ndarray:
    """Render a mask into an image under one domain style.

    Pipeline order: region bases with per-sample jitter plus a smooth
    texture field, contrast, brightness, gamma, multiplicative low-order
    polynomial bias, additive Gaussian noise, clamp to [0, 1].
    """
    gen = app_rng.generator
    size = mask.shape[0]
    jitter = gen.uniform(-BASE_JITTER, BASE_JITTER, 3)
    levels = np.array(BASE_INTENSITIES) + jitter
    img = levels[mask.astype(np.int64)]

    grid = gen.normal(0.0, 1.0, (TEXTURE_GRID, TEXTURE_GRID))
    field = ndimage.zoom(grid, size / TEXTURE_GRID, order=1)
    field = field / max(np.abs(field).max(), 1e-8)
    img = img + style.texture_scale * field

    img = (img - 0.5) * style.contrast + 0.5
    img = img + style.brightness
    img = np.clip(img, 0.0, 1.0) ** style.gamma

    axis = np.linspace(-1.0, 1.0, size)
    yy, xx = np.meshgrid(axis, axis, indexing="ij")
    coeffs = gen.uniform(-1.0, 1.0, 5)
    poly = (
        coeffs[0] * yy
        + coeffs[1] * xx
        + coeffs[2] * yy * xx
        + coeffs[3] * yy**2
        + coeffs[4] * xx**2
    )
    poly = poly / max(np.abs(poly).max(), 1e-8)
    img = img * (1.0 + style.bias_amplitude * poly)

    img = img + gen.normal(0.0, 1.0, (size, size)) * style.noise_std
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_sample(
    style: DomainStyle,
    geo_rng: RandomSource,
    app_rng: RandomSource,
    image_size: int = DEFAULT_IMAGE_SIZE,
    index: int = 0,
) -> Sample:
    """One sample from separate geometry and appearance streams.

    Keeping the streams separate lets callers pin geometry across domains,
    which is what guarantees identical masks for one index everywhere.
    """
    geometry = draw_geometry(geo_rng, image_size)
    image = apply_appearance(geometry.mask, style, app_rng)
    return Sample(
        image=image,
        mask=geometry.mask,
        domain_id=style.domain_id,
        sample_id=f"d{style.domain_id}_s{index}",
    )


def _quantize(image: np.ndarray) -> np.ndarray:
    return np.round(image * 255.0).astype(np.uint8)


def _file_sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _split_counts(per_domain: int) -> tuple[int, int]:
    n_test = max(1, per_domain // 5)
    return per_domain - n_test, n_test


def generate_dataset(
    K: int,
    per_domain: int,
    seed: int,
    out_path,
    image_size: int = DEFAULT_IMAGE_SIZE,
    single_class: bool = False,
    overwrite: bool = False,
) -> dict:
    """Write K domains of per_domain samples each and return the manifest.

    The split is deterministic: the first 80 percent of indices train, the
    rest test. All PNGs are written before manifest.json, whose presence
    marks the dataset complete.
    """
    if K < 2:
        raise ValueError("at least two domains are required")
    if per_domain < 2:
        raise ValueError("per_domain must be at least 2")
    root = Path(out_path)
    if root.exists() and any(root.iterdir()):
        if not overwrite:
            raise ValueError(f"output path {root} is not empty (pass overwrite to replace)")
        for item in sorted(root.iterdir()):
            if item.is_file():
                item.unlink()
    root.mkdir(parents=True, exist_ok=True)

    source = RandomSource(seed)
    styles = [make_domain_style(seed, d) for d in range(K)]
    n_train, _ = _split_counts(per_domain)
    files: dict[str, str] = {}
    domains = []
    masks = []
    for index in range(per_domain):
        geometry = draw_geometry(source.substream("geometry", index), image_size)
        masks.append(geometry.mask)
    for style in styles:
        train_ids, test_ids = [], []
        for index in range(per_domain):
            app_rng = source.substream("appearance", style.domain_id, index)
            image = apply_appearance(masks[index], style, app_rng)
            mask = masks[index]
            if single_class:
                mask = (mask > 0).astype(np.uint8)
            sample_id = f"d{style.domain_id}_s{index}"
            img_name = f"{sample_id}_img.png"
            mask_name = f"{sample_id}_mask.png"
            Image.fromarray(_quantize(image), mode="L").save(root / img_name)
            Image.fromarray(mask, mode="L").save(root / mask_name)
            files[img_name] = _file_sha256(root / img_name)
            files[mask_name] = _file_sha256(root / mask_name)
            (train_ids if index < n_train else test_ids).append(sample_id)
        domains.append(
            {
                "domain_id": style.domain_id,
                "style": style.to_dict(),
                "train": train_ids,
                "test": test_ids,
            }
        )
    manifest = {
        "format_version": MANIFEST_FORMAT_VERSION,
        "K": K,
        "per_domain": per_domain,
        "image_size": image_size,
        "seed": seed,
        "single_class": single_class,
        "domains": domains,
        "files": files,
    }
    manifest_bytes = json.dumps(manifest, sort_keys=True, indent=2).encode("utf-8")
    (root / MANIFEST_NAME).write_bytes(manifest_bytes)
    return manifest


def dataset_fingerprint(path) -> str:
    """Content hash of a dataset: sha256 of its manifest bytes.

    The manifest embeds per-file checksums, so this digest changes whenever
    any pixel, split, or style changes.
    """
    manifest_path = Path(path) / MANIFEST_NAME
    if not manifest_path.exists():
        raise ValueError(f"missing {MANIFEST_NAME} under {path}")
    return hashlib.sha256(manifest_path.read_bytes()).hexdigest()


def load_dataset(path) -> LoadedDataset:
    """Load and verify a generated dataset.

    Every referenced file must exist, match its manifest checksum, decode to
    the declared image size, and carry only legal labels; the first
    violation raises with the offending file named.
    """
    root = Path(path)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.exists():
        raise ValueError(f"missing {MANIFEST_NAME} under {root}")
    manifest = json.loads(manifest_path.read_text("utf-8"))
    if manifest.get("format_version") != MANIFEST_FORMAT_VERSION:
        raise ValueError(f"unsupported manifest format {manifest.get('format_version')}")
    size = int(manifest["image_size"])
    allowed_labels = {0, 1} if manifest["single_class"] else {0, 1, 2}

    def read_png(name: str) -> np.ndarray:
        file_path = root / name
        if not file_path.exists():
            raise ValueError(f"manifest references missing file {name}")
        digest = _file_sha256(file_path)
        if digest != manifest["files"].get(name):
            raise ValueError(f"checksum mismatch for {name}")
        arr = np.asarray(Image.open(file_path))
        if arr.shape != (size, size):
            raise ValueError(f"unexpected shape {arr.shape} in {name}")
        return arr

    samples: dict[int, dict[str, list[Sample]]] = {}
    for domain in manifest["domains"]:
        d = int(domain["domain_id"])
        samples[d] = {"train": [], "test": []}
        for part in ("train", "test"):
            for sample_id in domain[part]:
                image = read_png(f"{sample_id}_img.png").astype(np.float32) / 255.0
                mask = read_png(f"{sample_id}_mask.png")
                labels = set(np.unique(mask).tolist())
                if not labels <= allowed_labels:
                    raise ValueError(
                        f"illegal labels {sorted(labels - allowed_labels)} in {sample_id}_mask.png"
                    )
                samples[d][part].append(
                    Sample(
                        image=image,
                        mask=mask.astype(np.int64),
                        domain_id=d,
                        sample_id=sample_id,
                    )
                )
        expected = _split_counts(int(manifest["per_domain"]))
        if (len(samples[d]["train"]), len(samples[d]["test"])) != expected:
            raise ValueError(f"split counts for domain {d} do not match per_domain")
    return LoadedDataset(
        root=root,
        manifest=manifest,
        dataset_hash=hashlib.sha256(manifest_path.read_bytes()).hexdigest(),
        samples=samples,
    )
