"""Evaluation harness: age MAE, attribute preservation, blur and KID.

Blur is the variance of a 3x3 Laplacian response (higher means sharper); it
is a local proxy and its absolute values are not comparable to proprietary
blur scores. KID is the unbiased squared MMD under the cubic polynomial
kernel ``k(a, b) = (a.b / d + 1) ** 3``, averaged over random subsets.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Protocol, Sequence

import numpy as np
import torch

from agediff.errors import InputError
from agediff.prompt import AGE_GROUPS, age_group_of, classify_attribute, estimate_age

REPORT_COLUMNS = ["group", "mae", "gender", "smile", "expression", "blur", "kid_x100", "n"]
CLASSIFIER_DISCREPANCY_NOTE = (
    "age predictions depend on the estimator; estimators can disagree by several years, "
    "no cross-estimator calibration is applied"
)


def age_mae(predictions: Sequence[float], targets: Sequence[float]) -> float:
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape or p.ndim != 1:
        raise InputError(f"length mismatch: {p.shape} vs {t.shape}")
    if p.size == 0:
        raise InputError("age_mae of empty input")
    return float(np.abs(p - t).mean())


def attribute_preservation(orig_labels: Sequence, edited_labels: Sequence) -> float:
    if len(orig_labels) != len(edited_labels):
        raise InputError("label lists differ in length")
    if not orig_labels:
        raise InputError("attribute_preservation of empty input")
    matches = sum(a == b for a, b in zip(orig_labels, edited_labels))
    return 100.0 * matches / len(orig_labels)


LAPLACIAN = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])


def _gray(image) -> np.ndarray:
    x = image.detach().cpu().numpy() if isinstance(image, torch.Tensor) else np.asarray(image)
    x = x.astype(np.float64)
    if x.ndim == 3:
        x = x.mean(axis=0) if x.shape[0] in (1, 3) else x.mean(axis=-1)
    if x.ndim != 2:
        raise InputError(f"cannot convert shape {x.shape} to grayscale")
    return x


def blur_score(image) -> float:
    g = _gray(image)
    if min(g.shape) < 3:
        raise InputError(f"image {g.shape} too small for a 3x3 Laplacian")
    resp = (
        g[:-2, 1:-1] + g[2:, 1:-1] + g[1:-1, :-2] + g[1:-1, 2:] - 4.0 * g[1:-1, 1:-1]
    )
    return float(resp.var())


def polynomial_kernel(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = a.shape[1]
    return (a @ b.T / d + 1.0) ** 3


def mmd2_unbiased(x: np.ndarray, y: np.ndarray) -> float:
    m, n = len(x), len(y)
    kxx = polynomial_kernel(x, x)
    kyy = polynomial_kernel(y, y)
    kxy = polynomial_kernel(x, y)
    sxx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    syy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(sxx + syy - 2.0 * kxy.mean())


def kid(features_x, features_y, subset_size: int = 100, num_subsets: int = 100, seed: int = 0) -> float:
    x = np.asarray(features_x, dtype=np.float64)
    y = np.asarray(features_y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise InputError(f"feature shapes {x.shape} / {y.shape} are incompatible")
    if subset_size < 2 or subset_size > min(len(x), len(y)):
        raise InputError(f"subset_size {subset_size} must be in [2, {min(len(x), len(y))}]")
    if num_subsets < 1:
        raise InputError("num_subsets must be >= 1")
    rng = np.random.default_rng(seed)
    vals = []
    for _ in range(num_subsets):
        xs = x if subset_size == len(x) else x[rng.choice(len(x), subset_size, replace=False)]
        ys = y if subset_size == len(y) else y[rng.choice(len(y), subset_size, replace=False)]
        vals.append(mmd2_unbiased(xs, ys))
    return float(np.mean(vals))


class FeatureExtractor(Protocol):
    dim: int

    def __call__(self, images: torch.Tensor) -> np.ndarray: ...


class ToyFeatureExtractor:
    """Standardized renderer measurements from the toy age regressor."""

    def __init__(self, regressor=None):
        if regressor is None:
            from agediff.backbone.regressor import default_regressor

            regressor = default_regressor()
        self.regressor = regressor
        self.dim = len(regressor.feat_mean)

    def __call__(self, images):
        return self.regressor.features(images)


@dataclass
class EvalConfig:
    subset_size: int = 100
    num_subsets: int = 100
    seed: int = 0


@dataclass
class EvalRow:
    group: str
    mae: Optional[float]
    gender: Optional[float]
    smile: Optional[float]
    expression: Optional[float]
    blur: Optional[float]
    kid_x100: Optional[float]
    n: int


@dataclass
class EvalReport:
    rows: list[EvalRow]
    config: dict = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    def row(self, group: str) -> EvalRow:
        for r in self.rows:
            if r.group == group:
                return r
        raise KeyError(group)

    def to_json(self) -> str:
        return json.dumps(
            {"rows": [asdict(r) for r in self.rows], "config": self.config, "notes": self.notes},
            indent=2,
            sort_keys=True,
        ) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        return cls([EvalRow(**r) for r in d["rows"]], d["config"], d["notes"])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in self.rows:
            w.writerow(["" if getattr(r, c) is None else getattr(r, c) for c in REPORT_COLUMNS])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "EvalReport":
        rows = []
        for rec in csv.DictReader(io.StringIO(text)):
            vals = {c: (None if rec[c] == "" else float(rec[c])) for c in REPORT_COLUMNS[1:-1]}
            rows.append(EvalRow(group=rec["group"], n=int(rec["n"]), **vals))
        return cls(rows)


def _labels(adapter, images) -> Optional[list]:
    if adapter is None:
        return None
    return [classify_attribute(adapter, im) for im in images]


def evaluate_run(
    originals: torch.Tensor,
    edited: torch.Tensor,
    targets: Sequence[int],
    adapters: dict,
    extractor: Optional[FeatureExtractor] = None,
    config: EvalConfig = EvalConfig(),
) -> EvalReport:
    """Score edited images against their originals and target ages.

    ``adapters`` maps kinds (``age_estimator``, ``gender``, ``smile``,
    ``expression``) to classifier adapters; missing kinds leave their column
    empty. KID compares the distinct originals whose estimated age falls in
    a group with edits targeted at that group; cells with fewer than
    ``subset_size`` samples on either side are left empty.
    """
    n = len(targets)
    if n == 0 or len(originals) != n or len(edited) != n:
        raise InputError(f"need aligned non-empty inputs, got {len(originals)}/{len(edited)}/{n}")
    age_ad = adapters.get("age_estimator")
    if age_ad is None:
        raise InputError("evaluation needs an age estimator")
    # raw (unclamped) estimates for the error, integer estimates for grouping
    pred = np.array([float(age_ad(im)) for im in edited])
    orig_age = np.array([estimate_age(age_ad, im) for im in originals])
    labels = {k: (_labels(adapters.get(k), originals), _labels(adapters.get(k), edited)) for k in ("gender", "smile", "expression")}
    blur = np.array([blur_score(im) for im in edited])
    fx = extractor(originals) if extractor is not None else None
    fy = extractor(edited) if extractor is not None else None
    tgt = np.asarray(targets, dtype=np.float64)
    tgt_groups = [age_group_of(a).label for a in tgt]
    orig_groups = [age_group_of(a).label for a in orig_age]

    def cell(sel_edit: np.ndarray, sel_orig: np.ndarray, label: str) -> EvalRow:
        idx = np.flatnonzero(sel_edit)
        pres = {}
        for k, (lo, le) in labels.items():
            pres[k] = None if lo is None else attribute_preservation([lo[i] for i in idx], [le[i] for i in idx])
        k_val = None
        if fx is not None:
            # paired inputs repeat an original once per target; count each once
            xo = np.unique(fx[sel_orig], axis=0)
            if min(len(xo), len(idx)) >= config.subset_size:
                k_val = 100.0 * kid(xo, fy[idx], config.subset_size, config.num_subsets, config.seed)
        return EvalRow(label, age_mae(pred[idx], tgt[idx]), pres["gender"], pres["smile"], pres["expression"],
                       float(blur[idx].mean()), k_val, int(len(idx)))

    rows = []
    for g in AGE_GROUPS:
        sel = np.array([tg == g.label for tg in tgt_groups])
        if sel.any():
            rows.append(cell(sel, np.array([og == g.label for og in orig_groups]), g.label))
    everything = np.ones(n, dtype=bool)
    rows.append(cell(everything, everything, "all"))
    return EvalReport(rows, asdict(config), [CLASSIFIER_DISCREPANCY_NOTE])
