"""Stub backbones with closed-form noise predictions."""

import torch

from agediff.backbone.base import Backbone, LayerInfo, TextEmbedding, check_image
from agediff.schedule import NoiseSchedule


class ZeroBackbone(Backbone):
    """Predicts zero noise everywhere; identity autoencoder on small images."""

    def __init__(self, size=8, schedule=None):
        self.schedule = schedule or NoiseSchedule()
        self.image_size = size
        self.latent_shape = (3, size, size)
        self.calls = 0

    @property
    def text_embedding_shape(self):
        return (4, 2)

    @property
    def cross_attention_layers(self):
        return [LayerInfo("only", self.image_size, 1)]

    def encode_image(self, image):
        return check_image(image, self.image_size) * 2.0 - 1.0

    def decode_latent(self, z):
        return (z + 1.0) / 2.0

    def encode_prompt(self, prompt):
        return TextEmbedding([0, 1, 2, 3], torch.zeros(4, 2), {0: (1, 2)}, prompt)

    def predict_noise(self, z_t, t, conditioning, probe=None):
        self.calls += 1
        if z_t.dim() == 3:
            z_t = z_t.unsqueeze(0)
        return torch.zeros_like(z_t)


class ScriptedBackbone(ZeroBackbone):
    """Returns a fixed tensor per call in order, for loss algebra checks."""

    def __init__(self, outputs, size=8):
        super().__init__(size)
        self.outputs = list(outputs)

    def predict_noise(self, z_t, t, conditioning, probe=None):
        self.calls += 1
        return self.outputs.pop(0)
