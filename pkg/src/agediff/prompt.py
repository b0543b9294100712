"""Prompt construction, age groups and classifier adapters."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from typing import Callable, Literal, Optional, Protocol

import torch

from agediff import K_MAX_AGE
from agediff.errors import AdapterError, InputError, RangeError

log = logging.getLogger(__name__)

Gender = Literal["male", "female"]
NOUNS = ("person", "man", "woman", "boy", "girl")
CHILD_AGE_LIMIT = 15
GENDER_CONFIDENCE_WARN = 0.6

TEMPLATES = {
    "age": "photo of a {age} year old {noun}",
    "plain": "photo of a {noun}",
    "empty": "",
}


def check_age(age, lo: int = 1, hi: int = K_MAX_AGE) -> int:
    if isinstance(age, bool) or int(age) != age:
        raise InputError(f"age must be an integer, got {age!r}")
    age = int(age)
    if not lo <= age <= hi:
        raise InputError(f"age {age} outside [{lo}, {hi}]")
    return age


@dataclass(frozen=True)
class PromptSpec:
    template_id: str
    age_word: Optional[str]
    subject_noun: Optional[str]
    rendered: str

    @property
    def words(self) -> tuple[str, ...]:
        return tuple(self.rendered.split())

    @property
    def slots(self) -> dict[int, str]:
        """word index -> slot name ('age' or 'noun')."""
        out = {}
        template_words = TEMPLATES[self.template_id].split()
        for i, w in enumerate(template_words):
            if w == "{age}":
                out[i] = "age"
            elif w == "{noun}":
                out[i] = "noun"
        return out

    @property
    def age(self) -> Optional[int]:
        return int(self.age_word) if self.age_word is not None else None

    def __str__(self):
        return self.rendered


def render(template_id: str, age_word: Optional[str] = None, noun: Optional[str] = None) -> PromptSpec:
    if template_id not in TEMPLATES:
        raise InputError(f"unknown template {template_id!r}")
    if noun is not None and noun not in NOUNS:
        raise InputError(f"unknown subject noun {noun!r}")
    text = TEMPLATES[template_id].format(age=age_word, noun=noun)
    return PromptSpec(template_id, age_word, noun, text)


_AGE_RE = re.compile(r"^photo of a (\d+) year old (\w+)$")
_PLAIN_RE = re.compile(r"^photo of a (\w+)$")


def parse_prompt(text: str) -> PromptSpec:
    """Inverse of :func:`render`; recovers the slots from a rendered string."""
    text = " ".join(text.split())
    if text == "":
        return render("empty")
    m = _AGE_RE.match(text)
    if m:
        return render("age", m.group(1), m.group(2))
    m = _PLAIN_RE.match(text)
    if m:
        return render("plain", None, m.group(1))
    raise InputError(f"prompt does not match any template: {text!r}")


def subject_noun(age: Optional[int], gender: Optional[Gender], enhanced: bool) -> str:
    if not enhanced:
        return "person"
    if gender not in ("male", "female"):
        raise InputError("enhanced prompts require a gender")
    if age is not None and age < CHILD_AGE_LIMIT:
        return "boy" if gender == "male" else "girl"
    return "man" if gender == "male" else "woman"


def build_prompt(age: Optional[int] = None, gender: Optional[Gender] = None, enhanced: bool = False) -> PromptSpec:
    noun = subject_noun(age, gender, enhanced)
    if age is None:
        return render("plain", None, noun)
    age = check_age(age)
    return render("age", str(age), noun)


def empty_prompt() -> PromptSpec:
    return render("empty")


def build_training_prompts(age: int) -> tuple[PromptSpec, PromptSpec]:
    """(age-agnostic P, age-specific P_age) pair used by specialization."""
    return build_prompt(None), build_prompt(check_age(age))


# -- age groups ---------------------------------------------------------------


@dataclass(frozen=True)
class AgeGroup:
    label: str
    lo: int
    hi: Optional[int]  # inclusive; None for the open-ended top group
    central_age: int

    def contains(self, age: float) -> bool:
        return age >= self.lo and (self.hi is None or age < self.hi + 1)


AGE_GROUPS = (
    AgeGroup("0-2", 0, 2, 1),
    AgeGroup("3-6", 3, 6, 5),
    AgeGroup("7-9", 7, 9, 8),
    AgeGroup("10-14", 10, 14, 12),
    AgeGroup("15-19", 15, 19, 17),
    AgeGroup("20-29", 20, 29, 25),
    AgeGroup("30-39", 30, 39, 35),
    AgeGroup("40-49", 40, 49, 45),
    AgeGroup("50-69", 50, 69, 60),
    AgeGroup("70+", 70, None, 80),
)
_GROUPS_BY_LABEL = {g.label: g for g in AGE_GROUPS}


def get_group(label: str) -> AgeGroup:
    try:
        return _GROUPS_BY_LABEL[label]
    except KeyError:
        raise InputError(f"unknown age group {label!r}") from None


def central_age(group) -> int:
    if isinstance(group, str):
        group = get_group(group)
    return group.central_age


def age_group_of(age: float) -> AgeGroup:
    if age < 0:
        raise RangeError(f"negative age {age}")
    for g in AGE_GROUPS:
        if g.contains(age):
            return g
    raise RangeError(f"age {age} not covered by any group")  # pragma: no cover


# -- classifier adapters ------------------------------------------------------


class ClassifierAdapter(Protocol):
    kind: str

    def __call__(self, image: torch.Tensor):
        """Raw prediction for one image tensor (C, H, W) in [0, 1]."""


@dataclass
class ConstantAdapter:
    kind: str
    value: object
    confidence: float = 1.0

    def __call__(self, image):
        if self.kind == "age_estimator":
            return self.value
        return self.value, self.confidence


@dataclass
class CallableAdapter:
    """Wraps any function ``image -> prediction`` as an adapter."""

    kind: str
    fn: Callable
    name: str = "callable"

    def __call__(self, image):
        return self.fn(image)


@dataclass
class TorchScriptAdapter:
    """``external:<path>`` adapter: a TorchScript module.

    Age estimators return a scalar in years; binary classifiers return two
    logits ordered as ``labels``.
    """

    kind: str
    path: str
    labels: tuple = ("male", "female")

    def __post_init__(self):
        try:
            self.module = torch.jit.load(self.path, map_location="cpu").eval()
        except Exception as exc:  # noqa: BLE001 - backend errors are opaque
            raise AdapterError(f"cannot load adapter {self.path}: {exc}") from exc

    @torch.no_grad()
    def __call__(self, image):
        out = self.module(image.unsqueeze(0).float()).reshape(-1)
        if self.kind == "age_estimator":
            return float(out[0])
        p = torch.softmax(out, 0)
        i = int(p.argmax())
        return self.labels[i], float(p[i])


def load_adapter(kind: str, descriptor: str, **kwargs) -> ClassifierAdapter:
    """Resolve an adapter descriptor (``toy-oracle``, ``const:<v>``, ``external:<path>``)."""
    if descriptor == "toy-oracle":
        from agediff.backbone import regressor

        return regressor.toy_oracle(kind, **kwargs)
    if descriptor.startswith("const:"):
        raw = descriptor.split(":", 1)[1]
        return ConstantAdapter(kind, float(raw) if kind == "age_estimator" else raw)
    if descriptor.startswith("external:"):
        return TorchScriptAdapter(kind, descriptor.split(":", 1)[1])
    raise AdapterError(f"unknown adapter descriptor {descriptor!r}")


def _call(adapter, image):
    try:
        return adapter(image)
    except AdapterError:
        raise
    except Exception as exc:  # noqa: BLE001
        raise AdapterError(f"{getattr(adapter, 'kind', 'adapter')} failed: {exc}") from exc


def estimate_age(adapter: ClassifierAdapter, image: torch.Tensor) -> int:
    raw = float(_call(adapter, image))
    if raw != raw:
        raise AdapterError("age estimator returned NaN")
    return int(min(max(round(raw), 1), K_MAX_AGE))


def classify_gender(adapter: ClassifierAdapter, image: torch.Tensor) -> tuple[Gender, float]:
    label, conf = _call(adapter, image)
    if label not in ("male", "female"):
        raise AdapterError(f"gender adapter returned {label!r}")
    if conf < GENDER_CONFIDENCE_WARN:
        log.warning("low-confidence gender prediction %s (%.2f)", label, conf)
    return label, float(conf)


def classify_attribute(adapter: ClassifierAdapter, image: torch.Tensor):
    """Categorical label from any binary/categorical adapter (smile, expression)."""
    out = _call(adapter, image)
    return out[0] if isinstance(out, tuple) else out
