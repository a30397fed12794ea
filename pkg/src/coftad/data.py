"""Dataset ingestion, split protocols, corruption builders, and the
synthetic desk-scale benchmark.

Folder convention: ``root/normal/*.png`` plus optional ``root/abnormal/*.png``.
Split manifests (``split.json``) and dataset manifests are JSON; images are
PNG. Sample ids are root-relative paths (``normal/x.png``) so splits and
score files are portable across machines and run directories; the dataset
root travels separately. All protocol builders are deterministic under
their seed, with random streams keyed per image so results do not depend on
enumeration order.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torchvision.transforms.functional as TF
from PIL import Image
from torch import Tensor

from . import augment
from .errors import DataError
from .seeding import seed_stream

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp")


@dataclass
class ImageSample:
    """A loaded image with its label and path-qualified id."""

    image: Tensor
    label: str
    sample_id: str


@dataclass
class ManifestEntry:
    path: str  # root-relative id, or absolute when referencing another root
    label: str
    group: str = ""


def resolve_path(root: str | Path | None, sample_id: str) -> Path:
    p = Path(sample_id)
    if p.is_absolute():
        return p
    return Path(root or ".") / p


@dataclass
class DatasetManifest:
    root: str
    entries: list[ManifestEntry]
    image_size: int | None = None
    skipped: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        paths = [e.path for e in self.entries]
        if len(set(paths)) != len(paths):
            raise DataError("manifest contains duplicate paths")
        if not any(e.label == "normal" for e in self.entries):
            raise DataError("manifest needs at least one normal entry")

    def normals(self) -> list[ManifestEntry]:
        return [e for e in self.entries if e.label == "normal"]

    def abnormals(self) -> list[ManifestEntry]:
        return [e for e in self.entries if e.label == "abnormal"]

    def by_id(self, sample_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.path == sample_id:
                return e
        raise DataError(f"id not in manifest: {sample_id}")

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(asdict(self), indent=2))
        return path

    @staticmethod
    def load(path: str | Path) -> "DatasetManifest":
        raw = json.loads(Path(path).read_text())
        entries = [ManifestEntry(**e) for e in raw["entries"]]
        return DatasetManifest(
            root=raw["root"], entries=entries, image_size=raw.get("image_size"), skipped=raw.get("skipped", [])
        )


def load_image(path: str | Path, image_size: int | None = None) -> Tensor:
    """Read an image file into a CHW float tensor in [0, 1]."""
    with Image.open(path) as img:
        img = img.convert("RGB")
        if image_size is not None and img.size != (image_size, image_size):
            img = img.resize((image_size, image_size), Image.BILINEAR)
        array = np.array(img, dtype=np.uint8)
    return torch.from_numpy(array).permute(2, 0, 1).contiguous().float() / 255.0


def save_image(image: Tensor, path: str | Path) -> Path:
    """Write a CHW float tensor in [0, 1] as 8-bit PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    array = (image.clamp(0, 1) * 255.0).round().byte().permute(1, 2, 0).numpy()
    Image.fromarray(array).save(path)
    return path


def load_sample(root: str | Path | None, entry: ManifestEntry, image_size: int | None = None) -> ImageSample:
    return ImageSample(
        image=load_image(resolve_path(root, entry.path), image_size), label=entry.label, sample_id=entry.path
    )


def load_samples(
    manifest: DatasetManifest, entries: Sequence[ManifestEntry], image_size: int | None = None
) -> list[ImageSample]:
    return [load_sample(manifest.root, e, image_size) for e in entries]


def samples_for_ids(
    root: str | Path | None, ids: Sequence[str], label: str, image_size: int | None = None
) -> list[ImageSample]:
    return [
        ImageSample(image=load_image(resolve_path(root, i), image_size), label=label, sample_id=i) for i in ids
    ]


def load_image_folder(root: str | Path) -> DatasetManifest:
    """Enumerate ``root/normal`` and optional ``root/abnormal`` images.

    Entries are ordered lexicographically; unreadable files are recorded in
    the manifest's ``skipped`` list rather than aborting the scan.
    """
    root = Path(root)
    normal_dir = root / "normal"
    if not normal_dir.is_dir():
        raise DataError(f"missing required folder: {normal_dir}")
    entries: list[ManifestEntry] = []
    skipped: list[str] = []
    for label in ("normal", "abnormal"):
        folder = root / label
        if not folder.is_dir():
            continue
        for path in sorted(folder.iterdir()):
            if path.suffix.lower() not in IMAGE_EXTENSIONS:
                continue
            try:
                with Image.open(path) as img:
                    img.verify()
            except Exception:
                skipped.append(f"{label}/{path.name}")
                continue
            entries.append(ManifestEntry(path=f"{label}/{path.name}", label=label))
    return DatasetManifest(root=str(root.resolve()), entries=entries, skipped=skipped)


@dataclass
class FewShotSplit:
    """k-shot train ids plus reserved normal/abnormal test ids."""

    train_ids: list[str]
    test_normal_ids: list[str]
    test_abnormal_ids: list[str]
    seed: int
    protocol: str
    root: str | None = None

    def __post_init__(self) -> None:
        train = set(self.train_ids)
        if train & (set(self.test_normal_ids) | set(self.test_abnormal_ids)):
            raise DataError("train and test ids overlap")

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2))
        return path

    @staticmethod
    def load(path: str | Path) -> "FewShotSplit":
        return FewShotSplit(**json.loads(Path(path).read_text()))


def sample_few_shot(
    manifest: DatasetManifest,
    k: int,
    seed: int,
    reserve_test: tuple[int, int],
) -> FewShotSplit:
    """Draw k normal train ids and reserved test ids without replacement."""
    n_norm, n_abn = reserve_test
    normals = [e.path for e in manifest.normals()]
    abnormals = [e.path for e in manifest.abnormals()]
    if len(normals) < k + n_norm:
        raise DataError(f"need {k + n_norm} normal samples ({k} train + {n_norm} test), have {len(normals)}")
    if len(abnormals) < n_abn:
        raise DataError(f"need {n_abn} abnormal test samples, have {len(abnormals)}")
    rng = seed_stream(seed, "split")
    norm_perm = [normals[i] for i in rng.permutation(len(normals))]
    abn_perm = [abnormals[i] for i in rng.permutation(len(abnormals))]
    return FewShotSplit(
        train_ids=norm_perm[:k],
        test_normal_ids=norm_perm[k : k + n_norm],
        test_abnormal_ids=abn_perm[:n_abn],
        seed=seed,
        protocol=f"fewshot-k{k}",
        root=manifest.root,
    )


def subsample_anomalies(split: FewShotSplit, n_abn: int, seed: int) -> FewShotSplit:
    """Reduce the abnormal test set to n_abn ids; normals untouched."""
    if n_abn > len(split.test_abnormal_ids):
        raise DataError(f"requested {n_abn} abnormal samples, split has {len(split.test_abnormal_ids)}")
    rng = seed_stream(seed, "subsample-abnormal")
    chosen = sorted(rng.choice(len(split.test_abnormal_ids), size=n_abn, replace=False).tolist())
    return FewShotSplit(
        train_ids=list(split.train_ids),
        test_normal_ids=list(split.test_normal_ids),
        test_abnormal_ids=[split.test_abnormal_ids[i] for i in chosen],
        seed=seed,
        protocol=f"{split.protocol}-abn{n_abn}",
        root=split.root,
    )


def crop_patches(image: Tensor, size: int = 256, n: int = 5, rng: np.random.Generator | None = None) -> list[Tensor]:
    """Crop n size x size patches at uniform positions."""
    rng = rng if rng is not None else seed_stream(0, "crop")
    _, h, w = image.shape
    if h < size or w < size:
        raise DataError(f"image {h}x{w} smaller than patch size {size}")
    patches = []
    for _ in range(n):
        top = int(rng.integers(0, h - size + 1))
        left = int(rng.integers(0, w - size + 1))
        patches.append(image[:, top : top + size, left : left + size].clone())
    return patches


# ---------------------------------------------------------------------------
# Corruption-as-anomaly protocol
# ---------------------------------------------------------------------------

_SEVERITY = {1: 0.2, 2: 0.4, 3: 0.6, 4: 0.8, 5: 1.0}


def _sev(severity: int) -> float:
    if severity not in _SEVERITY:
        raise ValueError(f"severity must be 1..5, got {severity}")
    return _SEVERITY[severity]


def _corrupt_noise(image: Tensor, severity: int, rng: np.random.Generator) -> Tensor:
    sigma = 0.02 + 0.12 * _sev(severity)
    noise = torch.from_numpy(rng.normal(0.0, sigma, size=tuple(image.shape))).float()
    return (image + noise).clamp(0, 1)


def _corrupt_blur(image: Tensor, severity: int, rng: np.random.Generator) -> Tensor:
    sigma = 0.4 + 1.2 * _sev(severity)
    kernel = 2 * math.ceil(3 * sigma) + 1
    return TF.gaussian_blur(image, [kernel, kernel], [sigma, sigma])


def _corrupt_haze(image: Tensor, severity: int, rng: np.random.Generator) -> Tensor:
    t = 0.15 + 0.4 * _sev(severity)
    return image * (1 - t) + t


def _corrupt_brightness(image: Tensor, severity: int, rng: np.random.Generator) -> Tensor:
    return (image + 0.1 + 0.25 * _sev(severity)).clamp(0, 1)


def _corrupt_contrast(image: Tensor, severity: int, rng: np.random.Generator) -> Tensor:
    factor = 1.0 - 0.7 * _sev(severity)
    return TF.adjust_contrast(image, factor)


def _corrupt_pixelate(image: Tensor, severity: int, rng: np.random.Generator) -> Tensor:
    _, h, w = image.shape
    factor = 1.5 + 2.5 * _sev(severity)
    small = TF.resize(image, [max(1, int(h / factor)), max(1, int(w / factor))], antialias=True)
    return TF.resize(small, [h, w], interpolation=TF.InterpolationMode.NEAREST).clamp(0, 1)


def _corrupt_blocking(image: Tensor, severity: int, rng: np.random.Generator) -> Tensor:
    # 8x8 block-mean flattening, a cheap stand-in for compression artifacts
    block = 8
    alpha = 0.3 + 0.6 * _sev(severity)
    _, h, w = image.shape
    ph, pw = (block - h % block) % block, (block - w % block) % block
    padded = torch.nn.functional.pad(image.unsqueeze(0), (0, pw, 0, ph), mode="replicate")
    pooled = torch.nn.functional.avg_pool2d(padded, block)
    coarse = torch.nn.functional.interpolate(pooled, scale_factor=block, mode="nearest")[0, :, :h, :w]
    return ((1 - alpha) * image + alpha * coarse).clamp(0, 1)


def _corrupt_elastic(image: Tensor, severity: int, rng: np.random.Generator) -> Tensor:
    _, h, w = image.shape
    amplitude = (0.5 + 2.5 * _sev(severity)) * 2.0 / max(h, w)
    phase_x, phase_y = rng.uniform(0, 2 * np.pi, size=2)
    ys = torch.linspace(-1, 1, h)
    xs = torch.linspace(-1, 1, w)
    grid_y, grid_x = torch.meshgrid(ys, xs, indexing="ij")
    shift_x = amplitude * torch.sin(3 * np.pi * grid_y + phase_x)
    shift_y = amplitude * torch.sin(3 * np.pi * grid_x + phase_y)
    grid = torch.stack((grid_x + shift_x, grid_y + shift_y), dim=-1).unsqueeze(0).float()
    warped = torch.nn.functional.grid_sample(
        image.unsqueeze(0), grid, mode="bilinear", padding_mode="border", align_corners=True
    )
    return warped[0].clamp(0, 1)


def _corrupt_saturate(image: Tensor, severity: int, rng: np.random.Generator) -> Tensor:
    return TF.adjust_saturation(image, 1.5 + 2.0 * _sev(severity))


CORRUPTIONS: dict[str, Callable[[Tensor, int, np.random.Generator], Tensor]] = {
    "noise": _corrupt_noise,
    "blur": _corrupt_blur,
    "haze": _corrupt_haze,
    "brightness": _corrupt_brightness,
    "contrast": _corrupt_contrast,
    "pixelate": _corrupt_pixelate,
    "blocking": _corrupt_blocking,
    "elastic": _corrupt_elastic,
    "saturate": _corrupt_saturate,
}

DEFAULT_CORRUPTIONS = tuple(CORRUPTIONS)


@dataclass
class CorruptionSpec:
    types: list[str] = field(default_factory=lambda: list(DEFAULT_CORRUPTIONS))
    severity: int = 4

    def __post_init__(self) -> None:
        if not self.types:
            raise ValueError("corruption spec needs at least one type")
        unknown = [t for t in self.types if t not in CORRUPTIONS]
        if unknown:
            raise ValueError(f"unknown corruption types {unknown}; known: {sorted(CORRUPTIONS)}")
        _sev(self.severity)


def corrupt_image(image: Tensor, name: str, severity: int, rng: np.random.Generator) -> Tensor:
    if name not in CORRUPTIONS:
        raise ValueError(f"unknown corruption {name!r}; known: {sorted(CORRUPTIONS)}")
    return CORRUPTIONS[name](image, severity, rng)


def build_corruption_protocol(
    clean: DatasetManifest,
    spec: CorruptionSpec,
    out_dir: str | Path,
    corrupt_fn: Callable[[Tensor, str, int, np.random.Generator], Tensor] = corrupt_image,
    seed: int = 0,
) -> DatasetManifest:
    """Clean entries stay normal; each selected corruption adds abnormal copies.

    Corrupted images are written under ``out_dir/abnormal`` with the
    corruption name as their group tag. Random corruption kernels draw from
    a stream keyed per (type, source id).
    """
    if any(e.label != "normal" for e in clean.entries):
        raise DataError("corruption protocol expects an all-normal input manifest")
    out_dir = Path(out_dir)
    # clean test images stay where they are (absolute refs); corrupted copies
    # land under the new root
    entries = [
        ManifestEntry(path=str(resolve_path(clean.root, e.path)), label="normal", group="clean")
        for e in clean.entries
    ]
    for name in spec.types:
        for e in clean.entries:
            image = load_image(resolve_path(clean.root, e.path))
            rng = seed_stream(seed, "corruption", name, e.path)
            corrupted = corrupt_fn(image, name, spec.severity, rng)
            rel = f"abnormal/{name}__{Path(e.path).stem}.png"
            save_image(corrupted, out_dir / rel)
            entries.append(ManifestEntry(path=rel, label="abnormal", group=name))
    return DatasetManifest(root=str(out_dir.resolve()), entries=entries, image_size=clean.image_size)


# ---------------------------------------------------------------------------
# Synthetic benchmark
# ---------------------------------------------------------------------------


@dataclass
class SynthSpec:
    n_normal: int = 120
    n_abnormal: int = 100
    image_size: int = 64
    shape_family: str = "disk"
    defect_family: str = "paste"

    def __post_init__(self) -> None:
        if self.n_normal < 0 or self.n_abnormal < 0:
            raise ValueError("sample counts must be >= 0")
        if self.shape_family not in ("disk", "box"):
            raise ValueError(f"unknown shape family {self.shape_family!r}")
        if self.defect_family not in ("paste", "scar", "blur"):
            raise ValueError(f"unknown defect family {self.defect_family!r}")


def render_normal_image(spec: SynthSpec, rng: np.random.Generator) -> Tensor:
    """One normal sample: textured background + jittered canonical shape."""
    size = spec.image_size
    # low-frequency background texture from an upsampled coarse noise field
    coarse = rng.uniform(0.25, 0.6, size=(3, 5, 5)).astype(np.float32)
    bg = torch.nn.functional.interpolate(
        torch.from_numpy(coarse).unsqueeze(0), size=(size, size), mode="bilinear", align_corners=False
    )[0]

    center = size / 2.0 + rng.uniform(-0.08, 0.08, size=2) * size
    half = rng.uniform(0.22, 0.3) * size
    color = np.clip(np.array([0.75, 0.35, 0.3]) + rng.uniform(-0.12, 0.12, size=3), 0, 1)

    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    if spec.shape_family == "disk":
        dist = np.hypot(ys - center[0], xs - center[1]) - half
    else:
        dist = np.maximum(np.abs(ys - center[0]), np.abs(xs - center[1])) - half
    mask = torch.from_numpy(np.clip(0.5 - dist, 0.0, 1.0).astype(np.float32))  # 1px soft edge

    fg = torch.tensor(color, dtype=torch.float32).view(3, 1, 1)
    out = bg * (1 - mask) + fg * mask
    out = out + torch.from_numpy(rng.normal(0, 0.015, size=(3, size, size)).astype(np.float32))
    return out.clamp(0, 1)


def _apply_synth_defect(image: Tensor, spec: SynthSpec, rng: np.random.Generator) -> tuple[Tensor, dict]:
    size = spec.image_size
    if spec.defect_family == "paste":
        for _ in range(20):
            out, cut_box, paste_box = augment.cut_paste(image, (0.03, 0.10), (0.5, 2.0), rng)
            if not torch.equal(out, image):
                return out, {"defect": "paste", "box": list(paste_box), "cut_box": list(cut_box)}
        raise DataError("could not synthesize a visible paste defect")
    if spec.defect_family == "scar":
        params = augment.ScarParams(
            length_range=(0.12 * size, 0.28 * size), width_range=(2.0, 4.0), rotation_range=(0.0, 180.0)
        )
        return augment.apply_scar(image, params, rng), {"defect": "scar"}
    # local blur: heavy blur composited inside one rectangle
    h, w = rng.integers(size // 5, size // 2, size=2)
    top = int(rng.integers(0, size - h + 1))
    left = int(rng.integers(0, size - w + 1))
    blurred = TF.gaussian_blur(image, [9, 9], [3.0, 3.0])
    out = image.clone()
    out[:, top : top + h, left : left + w] = blurred[:, top : top + h, left : left + w]
    return out, {"defect": "blur", "box": [top, left, int(h), int(w)]}


def synth_dataset(spec: SynthSpec, root: str | Path, seed: int) -> DatasetManifest:
    """Render the synthetic benchmark to disk and return its manifest.

    Normal images land in ``root/normal``, defective ones in
    ``root/abnormal``; ``root/synth.json`` records the generator spec, the
    seed, and per-abnormal ground truth (defect kind and region). Abnormal
    image i is its own base normal image (stream ``("synth", "abnormal", i)``)
    plus one defect, so the pre-defect pixels can be re-rendered exactly.
    """
    root = Path(root)
    if spec.n_normal == 0:
        raise DataError("synthetic dataset needs at least one normal image")
    entries: list[ManifestEntry] = []
    truth: list[dict] = []
    for i in range(spec.n_normal):
        rng = seed_stream(seed, "synth", "normal", i)
        rel = f"normal/normal_{i:04d}.png"
        save_image(render_normal_image(spec, rng), root / rel)
        entries.append(ManifestEntry(path=rel, label="normal"))
    for i in range(spec.n_abnormal):
        rng = seed_stream(seed, "synth", "abnormal", i)
        base = render_normal_image(spec, rng)
        defective, info = _apply_synth_defect(base, spec, rng)
        rel = f"abnormal/abnormal_{i:04d}.png"
        save_image(defective, root / rel)
        entries.append(ManifestEntry(path=rel, label="abnormal", group=info["defect"]))
        truth.append({"id": rel, "index": i, **info})
    ground_truth = {"spec": asdict(spec), "seed": seed, "abnormal": truth}
    (root / "synth.json").write_text(json.dumps(ground_truth, indent=2))
    manifest = DatasetManifest(root=str(root.resolve()), entries=entries, image_size=spec.image_size)
    manifest.save(root / "manifest.json")
    return manifest
