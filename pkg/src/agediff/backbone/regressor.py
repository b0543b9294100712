"""Independent toy oracles: ridge age regressor and attribute classifiers.

They read handcrafted measurements of the procedural renderer and never
touch the diffusion model, so they can judge its outputs without
circularity.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
import torch

from agediff.backbone.dataset import ToyDatasetSpec, generate_toy_dataset

CY, CX = 17.0, 15.5
CALIBRATION_SEED = 90210
CALIBRATION_SAMPLES = 1200


def _as_batch(images) -> np.ndarray:
    x = images.detach().cpu().numpy() if isinstance(images, torch.Tensor) else np.asarray(images)
    if x.ndim == 3:
        x = x[None]
    return x.astype(np.float64)


def _resample32(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    if h == 32 and w == 32:
        return x
    t = torch.from_numpy(x)
    return torch.nn.functional.interpolate(t, size=(32, 32), mode="area").numpy()


def stripe_spectrum(gray: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-image (centroid, energy) of the forehead stripe profile."""
    band = gray[:, 13:16, 9:22].mean(axis=1)  # (N, 13)
    band = band - band.mean(axis=1, keepdims=True)
    mag = np.abs(np.fft.rfft(band, axis=1))[:, 1:]
    freqs = np.arange(1, mag.shape[1] + 1)
    energy = mag.sum(axis=1)
    centroid = (mag * freqs).sum(axis=1) / np.maximum(energy, 1e-8)
    return centroid, energy


def mouth_bend(gray: np.ndarray) -> np.ndarray:
    """Darkness-weighted row of the mouth centre minus that of its corners."""
    rows = np.arange(20, 26, dtype=np.float64)[None, :, None]
    region = gray[:, 20:26, :]
    dark = np.clip(0.45 - region, 0, None)

    def centroid(cols):
        d = dark[:, :, cols]
        return (d * rows).sum(axis=(1, 2)) / np.maximum(d.sum(axis=(1, 2)), 1e-8)

    return centroid(slice(14, 18)) - centroid([11, 12, 19, 20])


FEATURE_NAMES = (
    "hair",
    "stripe_centroid",
    "stripe_energy",
    "contour",
    "skin",
    "tint",
    "background",
    "mouth_bend",
) + tuple(f"pool{i}" for i in range(16))

AGE_FEATURES = (0, 1, 2, 3)


def extract_features(images) -> np.ndarray:
    x = _resample32(_as_batch(images))
    gray = x.mean(axis=1)
    hair = gray[:, 8:12, 12:20].mean(axis=(1, 2))
    centroid, energy = stripe_spectrum(gray)
    row = gray[:, 16:19, :]
    contour = np.clip(0.3 - row, 0, None)
    contour = contour[:, :, :9].sum(axis=(1, 2)) + contour[:, :, 23:].sum(axis=(1, 2))
    skin = gray[:, 19:22, 10:22].mean(axis=(1, 2))
    tint = (x[:, 0] - x[:, 2])[:, 19:22, 10:22].mean(axis=(1, 2))
    background = np.concatenate([gray[:, :3, :3], gray[:, :3, -3:]], axis=2).mean(axis=(1, 2))
    pooled = gray.reshape(-1, 4, 8, 4, 8).mean(axis=(2, 4)).reshape(-1, 16)
    return np.column_stack([hair, centroid, energy, contour, skin, tint, background, mouth_bend(gray), pooled])


@dataclass
class ToyAgeRegressor:
    """Ridge regression from renderer measurements to age in years."""

    mean: np.ndarray
    scale: np.ndarray
    coef: np.ndarray
    intercept: float
    feat_mean: np.ndarray
    feat_scale: np.ndarray

    kind = "age_estimator"

    @classmethod
    def fit(cls, seed: int = CALIBRATION_SEED, n: int = CALIBRATION_SAMPLES, alpha: float = 1e-3):
        ds = generate_toy_dataset(ToyDatasetSpec(num_samples=n, rng_seed=seed))
        feats = extract_features(ds.images)
        y = np.asarray(ds.ages, dtype=np.float64)
        X = feats[:, AGE_FEATURES]
        mean, scale = X.mean(0), X.std(0) + 1e-12
        Z = (X - mean) / scale
        A = Z.T @ Z + alpha * len(y) * np.eye(Z.shape[1])
        coef = np.linalg.solve(A, Z.T @ (y - y.mean()))
        return cls(mean, scale, coef, float(y.mean()), feats.mean(0), feats.std(0) + 1e-12)

    def predict(self, images) -> np.ndarray:
        X = extract_features(images)[:, AGE_FEATURES]
        return (X - self.mean) / self.scale @ self.coef + self.intercept

    def features(self, images) -> np.ndarray:
        """Standardized measurement vector (the regressor's penultimate layer)."""
        return (extract_features(images) - self.feat_mean) / self.feat_scale

    def __call__(self, image):
        return float(self.predict(image)[0])


@functools.lru_cache(maxsize=4)
def default_regressor(seed: int = CALIBRATION_SEED) -> ToyAgeRegressor:
    return ToyAgeRegressor.fit(seed)


def gender_of(images) -> list[tuple[str, float]]:
    tint = extract_features(images)[:, 5]
    conf = 1.0 / (1.0 + np.exp(-np.abs(tint) / 0.02))
    return [("female" if t > 0 else "male", float(c)) for t, c in zip(tint, conf)]


def smile_of(images) -> list[tuple[str, float]]:
    bend = extract_features(images)[:, 7]
    conf = 1.0 / (1.0 + np.exp(-np.abs(bend - 0.5) / 0.15))
    return [("smiling" if b > 0.5 else "not_smiling", float(c)) for b, c in zip(bend, conf)]


def expression_of(images) -> list[tuple[str, float]]:
    return [("happy" if s == "smiling" else "neutral", c) for s, c in smile_of(images)]


class _BatchOracle:
    def __init__(self, kind, fn):
        self.kind = kind
        self.fn = fn

    def __call__(self, image):
        return self.fn(image)[0]


def toy_oracle(kind: str, seed: int = CALIBRATION_SEED):
    if kind == "age_estimator":
        return default_regressor(seed)
    fns = {"gender": gender_of, "smile": smile_of, "expression": expression_of}
    if kind not in fns:
        from agediff.errors import AdapterError

        raise AdapterError(f"no toy oracle for {kind!r}")
    return _BatchOracle(kind, fns[kind])
