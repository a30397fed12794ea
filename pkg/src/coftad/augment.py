"""Positive and negative image augmentations plus training-batch assembly.

Positive augmentations simulate benign variation within normal data
(affine pose jitter, color jitter, blur, grayscale); negative augmentations
synthesize pseudo-anomalies (patch transplant, scar, corruption). Images
are CHW float tensors in [0, 1]; every output is clamped back to that range
and keeps the input shape.

All randomness comes from an explicit numpy Generator, so a fixed seed
reproduces batches bit for bit. Parameter draws that come out as exact
identities are skipped entirely, which keeps zero-strength policies
bitwise no-ops.

Angle convention: positive degrees rotate clockwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
import torch
import torchvision.transforms.functional as TF
from torch import Tensor

from .errors import DataError


def _check_prob(p: float, name: str) -> None:
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {p}")


def _check_range(r: tuple[float, float], name: str) -> None:
    if r[0] > r[1]:
        raise ValueError(f"{name} must satisfy lo <= hi, got {r}")


@dataclass
class RandomAffine:
    """Rotation / translation / isotropic-scale jitter."""

    degrees: tuple[float, float] = (-15.0, 15.0)
    translate: tuple[float, float] = (0.1, 0.1)
    scale: tuple[float, float] = (0.9, 1.1)
    p: float = 1.0

    def __post_init__(self) -> None:
        _check_prob(self.p, "p")
        _check_range(self.degrees, "degrees")
        _check_range(self.scale, "scale")
        if self.scale[0] <= 0:
            raise ValueError("scale must be positive")
        if not (0.0 <= self.translate[0] <= 1.0 and 0.0 <= self.translate[1] <= 1.0):
            raise ValueError("translate fractions must lie in [0, 1]")


@dataclass
class ColorJitter:
    """Brightness / contrast / saturation / hue jitter, applied in that order."""

    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.2
    hue: float = 0.05
    p: float = 1.0

    def __post_init__(self) -> None:
        _check_prob(self.p, "p")
        for name in ("brightness", "contrast", "saturation"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.hue <= 0.5:
            raise ValueError("hue must lie in [0, 0.5]")


@dataclass
class GaussianBlur:
    kernel: int = 5
    sigma: tuple[float, float] = (0.1, 1.5)
    p: float = 0.5

    def __post_init__(self) -> None:
        _check_prob(self.p, "p")
        _check_range(self.sigma, "sigma")
        if self.kernel <= 0 or self.kernel % 2 == 0:
            raise ValueError("kernel must be a positive odd integer")
        if self.sigma[0] < 0:
            raise ValueError("sigma must be >= 0")


@dataclass
class RandomGrayscale:
    p: float = 0.2

    def __post_init__(self) -> None:
        _check_prob(self.p, "p")


PositiveTransform = Union[RandomAffine, ColorJitter, GaussianBlur, RandomGrayscale]


@dataclass
class PositivePolicy:
    """Ordered recipe of positive transforms, each with its own probability."""

    transforms: list[PositiveTransform] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.transforms:
            raise ValueError("positive policy requires at least one transform")


@dataclass
class CutPasteParams:
    """Patch-transplant pseudo-anomaly; conventional parameter defaults."""

    area_range: tuple[float, float] = (0.02, 0.15)
    aspect_range: tuple[float, float] = (0.3, 1.0 / 0.3)

    def __post_init__(self) -> None:
        lo, hi = self.area_range
        if not (0.0 < lo <= hi < 1.0):
            raise ValueError(f"area_range must satisfy 0 < lo <= hi < 1, got {self.area_range}")
        _check_range(self.aspect_range, "aspect_range")
        if self.aspect_range[0] <= 0:
            raise ValueError("aspect_range must be positive")


@dataclass
class ScarParams:
    """Thin rotated rectangle painted in a random color."""

    length_range: tuple[float, float] = (10.0, 25.0)
    width_range: tuple[float, float] = (2.0, 5.0)
    rotation_range: tuple[float, float] = (0.0, 180.0)

    def __post_init__(self) -> None:
        _check_range(self.length_range, "length_range")
        _check_range(self.width_range, "width_range")
        _check_range(self.rotation_range, "rotation_range")
        if self.length_range[0] <= 0 or self.width_range[0] <= 0:
            raise ValueError("scar dimensions must be positive")


@dataclass
class CorruptionParams:
    """Blur followed by brightness/contrast perturbation."""

    sigma_range: tuple[float, float] = (0.5, 1.5)
    brightness: float = 0.3
    contrast: float = 0.3

    def __post_init__(self) -> None:
        _check_range(self.sigma_range, "sigma_range")
        if self.sigma_range[0] < 0:
            raise ValueError("sigma_range must be >= 0")
        if self.brightness < 0 or self.contrast < 0:
            raise ValueError("jitter amplitudes must be >= 0")


NegativePolicy = Union[CutPasteParams, ScarParams, CorruptionParams]

Box = tuple[int, int, int, int]  # (top, left, height, width)


def _apply_affine(image: Tensor, spec: RandomAffine, rng: np.random.Generator) -> Tensor:
    angle = float(rng.uniform(*spec.degrees))
    _, h, w = image.shape
    tx = float(rng.uniform(-spec.translate[0], spec.translate[0]) * w)
    ty = float(rng.uniform(-spec.translate[1], spec.translate[1]) * h)
    scale = float(rng.uniform(*spec.scale))
    if angle == 0.0 and tx == 0.0 and ty == 0.0 and scale == 1.0:
        return image
    return TF.affine(
        image,
        angle=angle,
        translate=[tx, ty],
        scale=scale,
        shear=[0.0, 0.0],
        interpolation=TF.InterpolationMode.BILINEAR,
    )


def _apply_color_jitter(image: Tensor, spec: ColorJitter, rng: np.random.Generator) -> Tensor:
    b = float(rng.uniform(max(0.0, 1.0 - spec.brightness), 1.0 + spec.brightness))
    c = float(rng.uniform(max(0.0, 1.0 - spec.contrast), 1.0 + spec.contrast))
    s = float(rng.uniform(max(0.0, 1.0 - spec.saturation), 1.0 + spec.saturation))
    h = float(rng.uniform(-spec.hue, spec.hue))
    if b != 1.0:
        image = TF.adjust_brightness(image, b)
    if c != 1.0:
        image = TF.adjust_contrast(image, c)
    if s != 1.0:
        image = TF.adjust_saturation(image, s)
    if h != 0.0:
        image = TF.adjust_hue(image, h)
    return image


def _apply_blur(image: Tensor, kernel: int, sigma: float) -> Tensor:
    if sigma <= 0.0:
        return image
    return TF.gaussian_blur(image, kernel_size=[kernel, kernel], sigma=[sigma, sigma])


def apply_positive(image: Tensor, policy: PositivePolicy, rng: np.random.Generator) -> Tensor:
    """Apply the positive recipe in order; output clamped to [0, 1]."""
    out = image
    for spec in policy.transforms:
        if rng.random() >= spec.p:
            continue
        if isinstance(spec, RandomAffine):
            out = _apply_affine(out, spec, rng)
        elif isinstance(spec, ColorJitter):
            out = _apply_color_jitter(out, spec, rng)
        elif isinstance(spec, GaussianBlur):
            sigma = float(rng.uniform(*spec.sigma))
            out = _apply_blur(out, spec.kernel, sigma)
        elif isinstance(spec, RandomGrayscale):
            out = TF.rgb_to_grayscale(out, num_output_channels=out.shape[0]).contiguous()
        else:
            raise TypeError(f"unknown positive transform {type(spec).__name__}")
    return out if out is image else out.clamp(0.0, 1.0)


def _patch_dims(
    img_h: int,
    img_w: int,
    area_range: tuple[float, float],
    aspect_range: tuple[float, float],
    rng: np.random.Generator,
) -> tuple[int, int]:
    """Sample integer patch dims whose pixel count lands inside the area range.

    The ideal (height, width) comes from a uniform area fraction and a
    log-uniform aspect ratio; rounding is then repaired by searching nearby
    heights for an integer width that keeps the realized pixel count within
    [lo, hi] of the image area. A degenerate range lo == hi forces the count
    to exactly round(lo * H * W).
    """
    lo, hi = area_range
    n_pixels = img_h * img_w
    if lo == hi:
        n_lo = n_hi = int(round(lo * n_pixels))
    else:
        n_lo = max(1, math.ceil(lo * n_pixels - 1e-9))
        n_hi = math.floor(hi * n_pixels + 1e-9)
    if n_lo < 1 or n_lo > n_hi:
        raise DataError(f"image {img_h}x{img_w} cannot host a patch with area fraction in {area_range}")

    target = float(rng.uniform(lo, hi)) * n_pixels
    aspect = float(np.exp(rng.uniform(np.log(aspect_range[0]), np.log(aspect_range[1]))))
    h_ideal = int(np.clip(round(math.sqrt(target * aspect)), 1, img_h))

    for dh in range(0, img_h):
        for h in (h_ideal + dh, h_ideal - dh) if dh else (h_ideal,):
            if not 1 <= h <= img_h:
                continue
            w_min = max(1, math.ceil(n_lo / h))
            w_max = min(img_w, n_hi // h)
            if w_min > w_max:
                continue
            w = int(np.clip(round(target / h), w_min, w_max))
            return h, w
    raise DataError(f"image {img_h}x{img_w} too small for any patch with area fraction in {area_range}")


def cut_paste(
    image: Tensor,
    area_range: tuple[float, float],
    aspect_range: tuple[float, float],
    rng: np.random.Generator,
) -> tuple[Tensor, Box, Box]:
    """Copy a random rectangle of the image onto another random location.

    Returns the augmented image together with the cut and paste boxes
    (top, left, height, width); pixels outside the paste box are bitwise
    unchanged.
    """
    _, img_h, img_w = image.shape
    h, w = _patch_dims(img_h, img_w, area_range, aspect_range, rng)
    cut_top = int(rng.integers(0, img_h - h + 1))
    cut_left = int(rng.integers(0, img_w - w + 1))
    paste_top = int(rng.integers(0, img_h - h + 1))
    paste_left = int(rng.integers(0, img_w - w + 1))
    out = image.clone()
    patch = image[:, cut_top : cut_top + h, cut_left : cut_left + w].clone()
    out[:, paste_top : paste_top + h, paste_left : paste_left + w] = patch
    return out, (cut_top, cut_left, h, w), (paste_top, paste_left, h, w)


def scar_mask(
    img_h: int,
    img_w: int,
    center: tuple[float, float],
    length: float,
    width: float,
    angle_deg: float,
) -> np.ndarray:
    """Boolean mask of pixels inside a rotated length x width rectangle.

    A pixel (row, col) belongs to the scar iff its projections onto the
    rectangle axes are within half-length and half-width of the center.
    """
    cy, cx = center
    theta = math.radians(angle_deg)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    rows, cols = np.mgrid[0:img_h, 0:img_w]
    du = (cols - cx) * cos_t + (rows - cy) * sin_t
    dv = -(cols - cx) * sin_t + (rows - cy) * cos_t
    return (np.abs(du) <= length / 2.0) & (np.abs(dv) <= width / 2.0)


def apply_scar(image: Tensor, params: ScarParams, rng: np.random.Generator) -> Tensor:
    """Paint one rotated thin rectangle in a random color."""
    _, img_h, img_w = image.shape
    length = float(rng.uniform(*params.length_range))
    width = float(rng.uniform(*params.width_range))
    angle = float(rng.uniform(*params.rotation_range))
    margin = math.hypot(length, width) / 2.0
    if 2 * margin >= min(img_h, img_w):
        raise DataError(f"image {img_h}x{img_w} too small for a scar of length {length:.1f}")
    cy = float(rng.uniform(margin, img_h - 1 - margin))
    cx = float(rng.uniform(margin, img_w - 1 - margin))
    color = rng.uniform(0.0, 1.0, size=image.shape[0])
    mask = torch.from_numpy(scar_mask(img_h, img_w, (cy, cx), length, width, angle))
    out = image.clone()
    out[:, mask] = torch.as_tensor(color, dtype=image.dtype).unsqueeze(1)
    return out


def apply_corruption(image: Tensor, params: CorruptionParams, rng: np.random.Generator) -> Tensor:
    """Blur, then jitter brightness and contrast."""
    sigma = float(rng.uniform(*params.sigma_range))
    b = float(rng.uniform(1.0 - params.brightness, 1.0 + params.brightness))
    c = float(rng.uniform(1.0 - params.contrast, 1.0 + params.contrast))
    out = image
    if sigma > 0.0:
        kernel = 2 * math.ceil(3.0 * sigma) + 1
        out = _apply_blur(out, kernel, sigma)
    if b != 1.0:
        out = TF.adjust_brightness(out, b)
    if c != 1.0:
        out = TF.adjust_contrast(out, c)
    return out if out is image else out.clamp(0.0, 1.0)


def apply_negative(image: Tensor, policy: NegativePolicy, rng: np.random.Generator) -> Tensor:
    """Synthesize one pseudo-anomaly according to the recipe."""
    if isinstance(policy, CutPasteParams):
        out, _, _ = cut_paste(image, policy.area_range, policy.aspect_range, rng)
        return out
    if isinstance(policy, ScarParams):
        return apply_scar(image, policy, rng)
    if isinstance(policy, CorruptionParams):
        return apply_corruption(image, policy, rng)
    raise TypeError(f"unknown negative policy {type(policy).__name__}")


def fixed_point_free_permutation(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform permutation of 0..n-1 with no fixed points (n >= 2)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if n == 1:
        return np.zeros(1, dtype=np.int64)
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm.astype(np.int64)


@dataclass
class TrainingBatch:
    """Two positive views, negatives, and originals for one training step."""

    view1: Tensor
    view2: Tensor
    negatives: Tensor
    originals: Tensor
    pairing: np.ndarray
    rng_state: dict

    def __post_init__(self) -> None:
        b = self.view1.shape[0]
        if not (self.view2.shape[0] == self.negatives.shape[0] == self.originals.shape[0] == b):
            raise ValueError("all batch tensors must share the same batch size")


def make_training_batch(
    images: Sequence[Tensor],
    batch_size: int,
    pos: PositivePolicy,
    neg: NegativePolicy,
    rng: np.random.Generator,
) -> TrainingBatch:
    """Assemble one training batch from the few-shot normal set.

    Base images are drawn uniformly with replacement (the few-shot set is
    far smaller than the batch). Each base gets two independent positive
    views and one negative view; the pairing permutation for the
    cross-instance loss is fixed-point free.
    """
    if len(images) == 0:
        raise DataError("cannot build a training batch from an empty few-shot set")
    state = rng.bit_generator.state
    idx = rng.integers(0, len(images), size=batch_size)
    originals, v1, v2, negs = [], [], [], []
    for i in idx:
        base = images[int(i)]
        originals.append(base)
        v1.append(apply_positive(base, pos, rng))
        v2.append(apply_positive(base, pos, rng))
        negs.append(apply_negative(base, neg, rng))
    pairing = fixed_point_free_permutation(batch_size, rng)
    return TrainingBatch(
        view1=torch.stack(v1),
        view2=torch.stack(v2),
        negatives=torch.stack(negs),
        originals=torch.stack(originals),
        pairing=pairing,
        rng_state=state,
    )


def default_policies(family: str) -> tuple[PositivePolicy, NegativePolicy]:
    """Default augmentation recipes per dataset family.

    ``flowers``    -- affine + color jitter positives, patch-transplant negatives.
    ``cifar_c``    -- affine positives, blur + brightness/contrast negatives.
    ``industrial`` -- affine + blur + grayscale positives, patch-transplant negatives.
    """
    affine = RandomAffine(degrees=(-15.0, 15.0), translate=(0.1, 0.1), scale=(0.9, 1.1))
    if family == "flowers":
        return PositivePolicy([affine, ColorJitter()]), CutPasteParams()
    if family == "cifar_c":
        return PositivePolicy([affine]), CorruptionParams()
    if family == "industrial":
        return (
            PositivePolicy([affine, GaussianBlur(), RandomGrayscale()]),
            CutPasteParams(),
        )
    raise ValueError(f"unknown dataset family {family!r}; expected flowers, cifar_c, or industrial")
