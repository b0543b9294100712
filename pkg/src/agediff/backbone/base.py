"""Backbone interface, conditioning types and the cross-attention probe."""

from __future__ import annotations

import abc
from dataclasses import dataclass, field
from typing import Iterable, Literal, Optional, Union

import torch

from agediff.errors import ProbeUnderflowError, ShapeError
from agediff.schedule import NoiseSchedule


@dataclass(frozen=True)
class LayerInfo:
    layer_id: str
    resolution: int
    heads: int


@dataclass
class TextEmbedding:
    tokens: list[int]
    embedding: torch.Tensor  # (max_tokens, embed_dim)
    token_spans: dict[int, tuple[int, int]]  # word index -> [start, end) token range
    prompt: object = None


@dataclass
class NullEmbedding:
    embedding: torch.Tensor  # (max_tokens, embed_dim)


Conditioning = Union[TextEmbedding, NullEmbedding, torch.Tensor]


def conditioning_tensor(cond: Conditioning) -> torch.Tensor:
    if isinstance(cond, (TextEmbedding, NullEmbedding)):
        return cond.embedding
    return cond


@dataclass
class AttentionRecord:
    """Cross-attention probabilities keyed by (sampling step, layer id).

    Each map has shape (heads, pixels, tokens) and is row-stochastic over
    tokens.
    """

    maps: dict[tuple[int, str], torch.Tensor] = field(default_factory=dict)
    prompt_tokens: list[str] = field(default_factory=list)
    step_count: int = 0

    def covers(self, steps: Iterable[int], layers: Iterable[str]) -> bool:
        return all((s, l) in self.maps for s in steps for l in layers)

    def max_row_error(self) -> float:
        if not self.maps:
            return 0.0
        return max(float((m.double().sum(-1) - 1).abs().max()) for m in self.maps.values())


class AttentionProbeContext:
    """Per-pass hook state for cross-attention recording / injection.

    ``step_cursor`` is advanced by the sampling loop. In ``inject`` mode the
    stored map replaces the computed probabilities while
    ``step_cursor < horizon``; later steps use free attention. ``token_map``
    re-indexes source token columns onto the target prompt; duplicated
    columns are re-normalized per row.
    """

    def __init__(
        self,
        mode: Literal["off", "record", "inject"] = "off",
        store: Optional[AttentionRecord] = None,
        layer_filter: Optional[set[str]] = None,
        horizon: Optional[int] = None,
        token_map: Optional[list[int]] = None,
    ):
        if mode not in ("off", "record", "inject"):
            raise ValueError(f"bad probe mode {mode!r}")
        self.mode = mode
        self.store = store if store is not None else AttentionRecord()
        self.layer_filter = layer_filter
        self.horizon = horizon
        self.token_map = token_map
        self.step_cursor = 0
        self.injected_rows_error = 0.0

    def applies(self, layer_id: str) -> bool:
        return self.layer_filter is None or layer_id in self.layer_filter

    def __call__(self, layer_id: str, probs: torch.Tensor) -> torch.Tensor:
        if self.mode == "off" or not self.applies(layer_id):
            return probs
        if probs.shape[0] != 1:
            raise ShapeError("attention probing needs batch size 1")
        key = (self.step_cursor, layer_id)
        if self.mode == "record":
            self.store.maps[key] = probs[0].detach().clone()
            return probs
        if self.horizon is not None and self.step_cursor >= self.horizon:
            return probs
        if key not in self.store.maps:
            raise ProbeUnderflowError(f"no recorded map for step {key[0]}, layer {key[1]}")
        ref = self.store.maps[key]
        if self.token_map is not None:
            ref = ref[..., self.token_map]
            ref = ref / ref.sum(-1, keepdim=True)
        if ref.shape != probs.shape[1:]:
            raise ShapeError(f"recorded map {tuple(ref.shape)} != computed {tuple(probs.shape[1:])}")
        err = float((ref.double().sum(-1) - 1).abs().max())
        self.injected_rows_error = max(self.injected_rows_error, err)
        return ref.unsqueeze(0).to(probs.dtype)


class Backbone(abc.ABC):
    """Noise predictor + autoencoder + text encoder behind one interface."""

    schedule: NoiseSchedule
    latent_shape: tuple[int, int, int]
    image_size: int

    @property
    @abc.abstractmethod
    def text_embedding_shape(self) -> tuple[int, int]: ...

    @property
    @abc.abstractmethod
    def cross_attention_layers(self) -> list[LayerInfo]: ...

    @abc.abstractmethod
    def encode_image(self, image: torch.Tensor) -> torch.Tensor: ...

    @abc.abstractmethod
    def decode_latent(self, z: torch.Tensor) -> torch.Tensor: ...

    @abc.abstractmethod
    def encode_prompt(self, prompt) -> TextEmbedding: ...

    @abc.abstractmethod
    def predict_noise(
        self,
        z_t: torch.Tensor,
        t: int,
        conditioning: Conditioning,
        probe: Optional[AttentionProbeContext] = None,
    ) -> torch.Tensor: ...

    def null_embedding(self) -> NullEmbedding:
        from agediff.prompt import empty_prompt

        return NullEmbedding(self.encode_prompt(empty_prompt()).embedding)

    def token_strings(self, emb: TextEmbedding) -> list[str]:
        return [str(t) for t in emb.tokens]

    def noise_parameters(self) -> list[torch.nn.Parameter]:
        return []

    def default_layer_filter(self, max_resolution: int = 32) -> set[str]:
        return {l.layer_id for l in self.cross_attention_layers if l.resolution <= max_resolution}


def check_image(image: torch.Tensor, size: int, channels: int = 3) -> torch.Tensor:
    if image.dim() == 3:
        image = image.unsqueeze(0)
    if image.dim() != 4 or image.shape[1:] != (channels, size, size):
        raise ShapeError(f"expected image (*, {channels}, {size}, {size}), got {tuple(image.shape)}")
    return image
