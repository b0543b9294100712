"""Procedural toy face renderer.

Each sample is a deterministic function of ``(age, seed, index)``: the
``(seed, index)`` pair fixes identity (head shape, skin tone, background,
gender, smile) and ``age`` drives three monotone attributes:

* hair brightness (dark to white),
* forehead wrinkle stripes (frequency and contrast grow with age),
* head contour thickness.

Images are quantized to 8 bits at render time so that the PNG cache round
trips exactly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from agediff import K_MAX_AGE
from agediff.errors import InputError

BASE = 32.0


@dataclass(frozen=True)
class Identity:
    gender: str
    smile: bool
    skin: float
    background: float
    rx: float
    ry: float
    eye_dx: float


@dataclass(frozen=True)
class ToyDatasetSpec:
    image_size: int = 32
    num_samples: int = 150
    age_range: tuple[int, int] = (1, K_MAX_AGE)
    rng_seed: int = 0
    # per-image channel gain/offset spread; 0 renders the canonical domain
    color_jitter: float = 0.0

    def __post_init__(self):
        lo, hi = self.age_range
        if not 1 <= lo <= hi <= K_MAX_AGE:
            raise InputError(f"invalid age_range {self.age_range}")
        if self.num_samples < 0 or self.image_size < 16:
            raise InputError("invalid dataset size")
        if not 0.0 <= self.color_jitter < 1.0:
            raise InputError(f"color_jitter {self.color_jitter} outside [0, 1)")


@dataclass
class ToyDataset:
    images: torch.Tensor  # (N, 3, H, W) in [0, 1]
    ages: list[int]
    identities: list[Identity] = field(default_factory=list)
    indices: list[int] = field(default_factory=list)
    seed: int = 0

    def __len__(self):
        return len(self.ages)

    def __getitem__(self, i):
        return self.images[i], self.ages[i]

    @property
    def genders(self) -> list[str]:
        return [idn.gender for idn in self.identities]


def identity_for(seed: int, index: int) -> Identity:
    rng = np.random.default_rng([seed, index, 7177])
    return Identity(
        gender="female" if rng.random() < 0.5 else "male",
        smile=bool(rng.random() < 0.5),
        skin=float(rng.uniform(0.50, 0.66)),
        background=float(rng.uniform(0.12, 0.36)),
        rx=float(rng.uniform(9.4, 10.6)),
        ry=float(rng.uniform(11.4, 12.6)),
        eye_dx=float(rng.uniform(3.6, 4.4)),
    )


def _coverage(dist_px):
    return np.clip(0.5 - dist_px, 0.0, 1.0)


def hair_level(age: float) -> float:
    return 0.08 + 0.84 * (age - 1) / (K_MAX_AGE - 1)


def stripe_cycles(age: float) -> float:
    return 1.0 + 4.0 * (age - 1) / (K_MAX_AGE - 1)


def contour_width(age: float) -> float:
    return 0.8 + 1.6 * (age - 1) / (K_MAX_AGE - 1)


def render_face(age: float, idn: Identity, size: int = 32) -> np.ndarray:
    """Render one face as a float32 array (3, size, size) in [0, 1]."""
    s = size / BASE
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    yy = (yy + 0.5) / s - 0.5
    xx = (xx + 0.5) / s - 0.5
    cy, cx = 17.0, 15.5

    gray = np.full((size, size), idn.background)
    tint = np.zeros((size, size))

    d = np.sqrt(((yy - cy) / idn.ry) ** 2 + ((xx - cx) / idn.rx) ** 2)
    dist = (d - 1.0) * min(idn.rx, idn.ry)  # approx. signed px distance to the outline
    head = _coverage(dist)

    face = np.full((size, size), idn.skin)
    tint_sign = 1.0 if idn.gender == "female" else -1.0

    # wrinkles: vertical stripes across the forehead band
    band = (yy >= cy - 4.5) & (yy < cy - 1.5) & (np.abs(xx - cx) <= 6.5)
    cyc = stripe_cycles(age)
    amp = 0.10 + 0.35 * (age - 1) / (K_MAX_AGE - 1)
    phase = 2 * np.pi * cyc * (xx - (cx - 6.5)) / 13.0
    face = np.where(band, face * (1 - amp * (0.5 - 0.5 * np.cos(phase))), face)

    # hair cap
    hair = _coverage((yy - (cy - 4.5)) * 1.0)
    face = face * (1 - hair) + hair_level(age) * hair

    # eyes
    for sx in (-1, 1):
        de = np.sqrt((yy - (cy + 1.0)) ** 2 + (xx - (cx + sx * idn.eye_dx)) ** 2) - 1.2
        face = face * (1 - _coverage(de)) + 0.06 * _coverage(de)

    # mouth: arc for a smile, flat line otherwise
    mx = np.clip((xx - cx) / 4.0, -1.0, 1.0)
    bend = 1.6 if idn.smile else 0.0
    mouth_y = cy + 6.0 + bend * (1 - mx**2) - bend * 0.5
    dm = np.abs(yy - mouth_y) - 0.55
    dm = np.where(np.abs(xx - cx) <= 4.2, dm, 10.0)
    face = face * (1 - _coverage(dm)) + 0.12 * _coverage(dm)

    skin_mask = (1 - hair) * head
    tint += tint_sign * 0.09 * skin_mask

    gray = gray * (1 - head) + face * head

    # outline ring, thicker with age
    ring = _coverage(np.abs(dist) - contour_width(age) / 2.0)
    gray = gray * (1 - ring) + 0.04 * ring

    rgb = np.stack([gray + tint, gray, gray - tint])
    rgb = np.clip(rgb, 0.0, 1.0)
    return (np.round(rgb * 255.0) / 255.0).astype(np.float32)


def render_sample(age: int, seed: int, index: int, size: int = 32) -> torch.Tensor:
    return torch.from_numpy(render_face(age, identity_for(seed, index), size))


def age_feature_mask(idn: Identity, size: int = 32) -> np.ndarray:
    """Pixels whose value depends on age: forehead band, hair cap and outline ring."""
    s = size / BASE
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    yy = (yy + 0.5) / s - 0.5
    xx = (xx + 0.5) / s - 0.5
    cy, cx = 17.0, 15.5
    d = np.sqrt(((yy - cy) / idn.ry) ** 2 + ((xx - cx) / idn.rx) ** 2)
    dist = (d - 1.0) * min(idn.rx, idn.ry)
    band = (yy >= cy - 4.5) & (yy < cy - 1.5) & (np.abs(xx - cx) <= 6.5)
    hair = (yy < cy - 4.5) & (d <= 1.0)
    ring = np.abs(dist) <= contour_width(K_MAX_AGE) / 2.0 + 0.5
    return band | hair | ring


def jitter_colors(imgs: np.ndarray, amount: float, rng: np.random.Generator) -> np.ndarray:
    """Random per-image, per-channel gain and offset, re-quantized to 8 bits."""
    n = imgs.shape[0]
    gain = 1.0 + rng.uniform(-amount, amount, size=(n, 3, 1, 1))
    offset = rng.uniform(-amount / 2, amount / 2, size=(n, 3, 1, 1))
    out = np.clip(imgs * gain + offset, 0.0, 1.0)
    return (np.round(out * 255.0) / 255.0).astype(np.float32)


def spread_ages(n: int, lo: int, hi: int, rng: np.random.Generator) -> list[int]:
    """Stratified ages covering [lo, hi] evenly, in shuffled order."""
    span = hi - lo + 1
    ages = [lo + int((i + rng.random()) * span / n) for i in range(n)] if n else []
    rng.shuffle(ages)
    return [min(a, hi) for a in ages]


def generate_toy_dataset(spec: ToyDatasetSpec) -> ToyDataset:
    rng = np.random.default_rng([spec.rng_seed, 1])
    ages = spread_ages(spec.num_samples, *spec.age_range, rng)
    idns = [identity_for(spec.rng_seed, i) for i in range(spec.num_samples)]
    if spec.num_samples:
        imgs = np.stack([render_face(a, idn, spec.image_size) for a, idn in zip(ages, idns)])
        if spec.color_jitter > 0:
            imgs = jitter_colors(imgs, spec.color_jitter, np.random.default_rng([spec.rng_seed, 2]))
    else:
        imgs = np.zeros((0, 3, spec.image_size, spec.image_size), np.float32)
    return ToyDataset(torch.from_numpy(imgs), ages, idns, list(range(spec.num_samples)), spec.rng_seed)


# -- PNG / CSV cache ----------------------------------------------------------


def save_image(img: torch.Tensor, path) -> None:
    arr = (img.clamp(0, 1).permute(1, 2, 0).numpy() * 255.0).round().astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_image(path, size: int | None = None) -> torch.Tensor:
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if size is not None and im.size != (size, size):
                im = im.resize((size, size), Image.BICUBIC)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot decode image {path}: {exc}") from exc
    return torch.from_numpy(arr.copy()).permute(2, 0, 1).contiguous()


INDEX_COLUMNS = ["filename", "age", "gender", "smile", "seed", "index"]


def save_dataset(ds: ToyDataset, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(len(ds)):
        name = f"{i:05d}.png"
        save_image(ds.images[i], out / name)
        idn = ds.identities[i]
        rows.append([name, ds.ages[i], idn.gender, int(idn.smile), ds.seed, ds.indices[i]])
    with open(out / "index.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(INDEX_COLUMNS)
        w.writerows(rows)
    return out / "index.csv"


def load_dataset(path) -> ToyDataset:
    root = Path(path)
    index = root / "index.csv" if root.is_dir() else root
    root = index.parent
    if not index.exists():
        raise InputError(f"missing dataset index {index}")
    images, ages, idns, indices = [], [], [], []
    seed = 0
    with open(index, newline="") as f:
        for row in csv.DictReader(f):
            images.append(load_image(root / row["filename"]))
            ages.append(int(row["age"]))
            if "seed" in row and row["seed"]:
                seed = int(row["seed"])
                indices.append(int(row["index"]))
                idns.append(identity_for(seed, int(row["index"])))
    if not images:
        raise InputError(f"empty dataset at {index}")
    return ToyDataset(torch.stack(images), ages, idns, indices, seed)
