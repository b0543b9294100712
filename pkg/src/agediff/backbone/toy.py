"""Self-contained pixel-space toy backbone.

A small two-level U-Net noise predictor with cross-attention at 16x16 and
8x8, an identity autoencoder (latents are images rescaled to [-1, 1]) and a
word-level text encoder over a micro-vocabulary.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from agediff import K_MAX_AGE
from agediff.backbone.base import (
    AttentionProbeContext,
    Backbone,
    Conditioning,
    LayerInfo,
    TextEmbedding,
    check_image,
    conditioning_tensor,
)
from agediff.errors import InputError, ShapeError, TrainingError, VocabularyError
from agediff.prompt import NOUNS, PromptSpec, build_prompt, empty_prompt, parse_prompt
from agediff.schedule import NoiseSchedule, toy_schedule

log = logging.getLogger(__name__)

SPECIAL = ["<bos>", "<pad>"]
TEMPLATE_WORDS = ["photo", "of", "a", "year", "old"]
VOCAB = SPECIAL + TEMPLATE_WORDS + list(NOUNS) + [str(a) for a in range(1, K_MAX_AGE + 1)]


@dataclass(frozen=True)
class ToyArch:
    image_size: int = 32
    channels: int = 3
    base_channels: int = 16
    embed_dim: int = 32
    max_tokens: int = 10
    heads: int = 2
    seed: int = 0


class ToyTextEncoder(nn.Module):
    """Embedding lookup; numerals start from a smooth function of their value."""

    def __init__(self, arch: ToyArch):
        super().__init__()
        self.arch = arch
        self.vocab = {w: i for i, w in enumerate(VOCAB)}
        self.table = nn.Embedding(len(VOCAB), arch.embed_dim)
        g = torch.Generator().manual_seed(arch.seed + 101)
        with torch.no_grad():
            self.table.weight.normal_(0.0, 1.0, generator=g)
            ages = torch.arange(1, K_MAX_AGE + 1, dtype=torch.float32)[:, None] / K_MAX_AGE
            freqs = torch.arange(1, arch.embed_dim // 2 + 1, dtype=torch.float32)[None] * 0.5
            smooth = torch.cat([torch.sin(math.pi * freqs * ages), torch.cos(math.pi * freqs * ages)], 1)
            first = self.vocab["1"]
            self.table.weight[first : first + K_MAX_AGE] = smooth * math.sqrt(2.0)

    def tokenize(self, prompt: PromptSpec) -> tuple[list[int], dict[int, tuple[int, int]]]:
        words = prompt.words
        if len(words) + 1 > self.arch.max_tokens:
            raise VocabularyError(f"prompt too long for {self.arch.max_tokens} tokens: {prompt.rendered!r}")
        ids = [self.vocab["<bos>"]]
        spans = {}
        for i, w in enumerate(words):
            if w not in self.vocab:
                raise VocabularyError(f"word {w!r} not in toy vocabulary")
            spans[i] = (len(ids), len(ids) + 1)
            ids.append(self.vocab[w])
        ids += [self.vocab["<pad>"]] * (self.arch.max_tokens - len(ids))
        return ids, spans

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        return self.table(ids)


class ResBlock(nn.Module):
    def __init__(self, cin, cout, temb):
        super().__init__()
        self.norm1 = nn.GroupNorm(4, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb, cout)
        self.norm2 = nn.GroupNorm(4, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, t):
        h = self.conv1(F.silu(self.norm1(x))) + self.temb(t)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class CrossAttention(nn.Module):
    def __init__(self, layer_id, channels, ctx_dim, heads):
        super().__init__()
        self.layer_id = layer_id
        self.heads = heads
        self.norm = nn.GroupNorm(4, channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(ctx_dim, channels, bias=False)
        self.to_v = nn.Linear(ctx_dim, channels, bias=False)
        self.to_out = nn.Linear(channels, channels)

    def forward(self, x, ctx, probe: Optional[AttentionProbeContext] = None):
        b, c, h, w = x.shape
        hd = c // self.heads
        q = self.to_q(self.norm(x).flatten(2).transpose(1, 2))
        q = q.view(b, h * w, self.heads, hd).transpose(1, 2)
        k = self.to_k(ctx).view(b, -1, self.heads, hd).transpose(1, 2)
        v = self.to_v(ctx).view(b, -1, self.heads, hd).transpose(1, 2)
        probs = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(hd), dim=-1)
        if probe is not None:
            probs = probe(self.layer_id, probs)
        out = (probs @ v).transpose(1, 2).reshape(b, h * w, c)
        return x + self.to_out(out).transpose(1, 2).reshape(b, c, h, w)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ToyUNet(nn.Module):
    LAYERS = (("down16", 16), ("mid8", 8), ("up16", 16))

    def __init__(self, arch: ToyArch):
        super().__init__()
        c, te, ctx = arch.base_channels, 4 * arch.base_channels, arch.embed_dim
        self.base = c
        self.time_mlp = nn.Sequential(nn.Linear(c, te), nn.SiLU(), nn.Linear(te, te))
        self.conv_in = nn.Conv2d(arch.channels, c, 3, padding=1)
        self.res1 = ResBlock(c, c, te)
        self.down1 = nn.Conv2d(c, 2 * c, 3, stride=2, padding=1)
        self.res2 = ResBlock(2 * c, 2 * c, te)
        self.attn2 = CrossAttention("down16", 2 * c, ctx, arch.heads)
        self.down2 = nn.Conv2d(2 * c, 2 * c, 3, stride=2, padding=1)
        self.res3 = ResBlock(2 * c, 2 * c, te)
        self.attn3 = CrossAttention("mid8", 2 * c, ctx, arch.heads)
        self.res4 = ResBlock(2 * c, 2 * c, te)
        self.res5 = ResBlock(4 * c, 2 * c, te)
        self.attn5 = CrossAttention("up16", 2 * c, ctx, arch.heads)
        self.res6 = ResBlock(3 * c, c, te)
        self.norm_out = nn.GroupNorm(4, c)
        self.conv_out = nn.Conv2d(c, arch.channels, 3, padding=1)

    def forward(self, x, t, ctx, probe=None):
        temb = self.time_mlp(timestep_embedding(t, self.base))
        h1 = self.res1(self.conv_in(x), temb)
        h2 = self.attn2(self.res2(self.down1(h1), temb), ctx, probe)
        h = self.attn3(self.res3(self.down2(h2), temb), ctx, probe)
        h = self.res4(h, temb)
        h = F.interpolate(h, scale_factor=2.0, mode="nearest")
        h = self.attn5(self.res5(torch.cat([h, h2], 1), temb), ctx, probe)
        h = F.interpolate(h, scale_factor=2.0, mode="nearest")
        h = self.res6(torch.cat([h, h1], 1), temb)
        return self.conv_out(F.silu(self.norm_out(h)))


class ToyBackbone(Backbone):
    def __init__(self, arch: ToyArch = ToyArch(), schedule: Optional[NoiseSchedule] = None):
        self.arch = arch
        self.schedule = schedule or toy_schedule()
        self.image_size = arch.image_size
        self.latent_shape = (arch.channels, arch.image_size, arch.image_size)
        torch.manual_seed(arch.seed)
        self.unet = ToyUNet(arch)
        self.text_encoder = ToyTextEncoder(arch)
        self.text_encoder.requires_grad_(False)
        self.meta: dict = {}

    @property
    def text_embedding_shape(self):
        return (self.arch.max_tokens, self.arch.embed_dim)

    @property
    def cross_attention_layers(self):
        r = self.arch.image_size / 32
        return [LayerInfo(name, int(res * r), self.arch.heads) for name, res in ToyUNet.LAYERS]

    def encode_image(self, image):
        image = check_image(image, self.image_size, self.arch.channels)
        return image * 2.0 - 1.0

    def decode_latent(self, z):
        if z.dim() == 3:
            z = z.unsqueeze(0)
        if tuple(z.shape[1:]) != self.latent_shape:
            raise ShapeError(f"latent shape {tuple(z.shape[1:])} != {self.latent_shape}")
        return ((z + 1.0) / 2.0).clamp(0.0, 1.0)

    def encode_prompt(self, prompt) -> TextEmbedding:
        if isinstance(prompt, str):
            prompt = parse_prompt(prompt)
        ids, spans = self.text_encoder.tokenize(prompt)
        with torch.no_grad():
            emb = self.text_encoder(torch.tensor(ids)).clone()
        return TextEmbedding(ids, emb, spans, prompt)

    def token_strings(self, emb: TextEmbedding) -> list[str]:
        return [VOCAB[i] for i in emb.tokens]

    def predict_noise(self, z_t, t, conditioning: Conditioning, probe=None):
        if z_t.dim() == 3:
            z_t = z_t.unsqueeze(0)
        if tuple(z_t.shape[1:]) != self.latent_shape:
            raise ShapeError(f"latent shape {tuple(z_t.shape[1:])} != {self.latent_shape}")
        ctx = conditioning_tensor(conditioning)
        if ctx.dim() == 2:
            ctx = ctx.unsqueeze(0)
        if ctx.shape[0] != z_t.shape[0]:
            ctx = ctx.expand(z_t.shape[0], -1, -1)
        if isinstance(t, int) or (torch.is_tensor(t) and t.dim() == 0):
            t = torch.full((z_t.shape[0],), int(t), dtype=torch.long)
        return self.unet(z_t, t, ctx, probe)

    def noise_parameters(self):
        return list(self.unet.parameters())

    def clone(self) -> "ToyBackbone":
        return copy.deepcopy(self)

    def state(self) -> dict[str, torch.Tensor]:
        out = {f"unet.{k}": v for k, v in self.unet.state_dict().items()}
        out.update({f"text.{k}": v for k, v in self.text_encoder.state_dict().items()})
        return out

    def load_state(self, state: dict[str, torch.Tensor]):
        unet = {k[5:]: v for k, v in state.items() if k.startswith("unet.")}
        text = {k[5:]: v for k, v in state.items() if k.startswith("text.")}
        self.unet.load_state_dict(unet)
        self.text_encoder.load_state_dict(text)

    def parameter_hash(self, part: str = "all") -> str:
        h = hashlib.sha256()
        for k, v in sorted(self.state().items()):
            if part == "all" or k.startswith(part + "."):
                h.update(k.encode())
                h.update(v.detach().contiguous().numpy().astype("<f4").tobytes())
        return h.hexdigest()


# -- training -----------------------------------------------------------------


@dataclass
class ToyTrainConfig:
    steps: int = 2500
    batch_size: int = 32
    learning_rate: float = 2e-3
    seed: int = 0
    p_empty: float = 0.1
    p_plain: float = 0.2
    p_enhanced: float = 0.5
    grad_clip: float = 1.0
    warmup: int = 50


def training_prompt(age: int, gender: str, rng: np.random.Generator, cfg: ToyTrainConfig) -> PromptSpec:
    r = rng.random()
    enhanced = rng.random() < cfg.p_enhanced
    if r < cfg.p_empty:
        return empty_prompt()
    if r < cfg.p_empty + cfg.p_plain:
        return build_prompt(None, gender, enhanced)
    return build_prompt(age, gender, enhanced)


def diffusion_loss(backbone, z0, eps, t, ctx) -> torch.Tensor:
    """Mean-squared noise-prediction error, averaged per sample then over the batch."""
    a = torch.tensor(backbone.schedule.alpha_bar_table, dtype=torch.float32)[t][:, None, None, None]
    z_t = a.sqrt() * z0 + (1 - a).sqrt() * eps
    pred = backbone.unet(z_t, t, ctx)
    return (pred - eps).pow(2).mean()


def train_toy_backbone(dataset, config: ToyTrainConfig = ToyTrainConfig(), arch: Optional[ToyArch] = None, schedule=None):
    """Train the toy noise predictor with the standard reconstruction loss.

    Returns ``(backbone, losses)``. Text embeddings stay frozen.
    """
    if len(dataset) == 0:
        raise InputError("cannot train on an empty dataset")
    arch = arch or ToyArch(seed=config.seed)
    bb = ToyBackbone(arch, schedule)
    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed + 1)
    rng = np.random.default_rng([config.seed, 3])
    z_all = bb.encode_image(dataset.images)
    genders = dataset.genders or ["male"] * len(dataset)
    prompts_cache: dict[str, torch.Tensor] = {}

    def ctx_for(p: PromptSpec):
        if p.rendered not in prompts_cache:
            prompts_cache[p.rendered] = bb.encode_prompt(p).embedding
        return prompts_cache[p.rendered]

    opt = torch.optim.Adam(bb.unet.parameters(), lr=config.learning_rate)
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda s: min(1.0, (s + 1) / max(config.warmup, 1)) * 0.5 * (1 + math.cos(math.pi * s / max(config.steps, 1)))
    )
    n = len(dataset)
    T = bb.schedule.total_train_steps
    losses = []
    bb.unet.train()
    for step in range(config.steps):
        idx = torch.randint(0, n, (config.batch_size,), generator=gen)
        z0 = z_all[idx]
        eps = torch.randn(z0.shape, generator=gen)
        t = torch.randint(1, T + 1, (config.batch_size,), generator=gen)
        ctx = torch.stack([ctx_for(training_prompt(dataset.ages[i], genders[i], rng, config)) for i in idx.tolist()])
        loss = diffusion_loss(bb, z0, eps, t, ctx)
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite loss at step {step}", step, {"last_losses": losses[-5:]})
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(bb.unet.parameters(), config.grad_clip)
        opt.step()
        sched.step()
        losses.append(loss.item())
        if step % 100 == 0:
            log.info("toy train step %d loss %.4f", step, losses[-1])
    bb.unet.eval()
    bb.meta = {"train_config": asdict(config), "final_loss": losses[-1] if losses else None}
    return bb, losses


@torch.no_grad()
def heldout_denoising_mse(backbone, images, n_noise: int = 4, seed: int = 0, prompts=None) -> tuple[float, float]:
    """(model MSE, zero-predictor MSE) on fixed q-samples of ``images``."""
    gen = torch.Generator().manual_seed(seed)
    z0 = backbone.encode_image(images)
    null = backbone.null_embedding().embedding
    tot, zero = 0.0, 0.0
    for _ in range(n_noise):
        eps = torch.randn(z0.shape, generator=gen)
        t = torch.randint(1, backbone.schedule.total_train_steps + 1, (z0.shape[0],), generator=gen)
        a = torch.tensor(backbone.schedule.alpha_bar_table, dtype=torch.float32)[t][:, None, None, None]
        z_t = a.sqrt() * z0 + (1 - a).sqrt() * eps
        ctx = null.expand(z0.shape[0], -1, -1) if prompts is None else torch.stack(
            [backbone.encode_prompt(p).embedding for p in prompts]
        )
        pred = backbone.unet(z_t, t, ctx)
        tot += float((pred - eps).pow(2).mean())
        zero += float(eps.pow(2).mean())
    return tot / n_noise, zero / n_noise


# -- checkpoint I/O -----------------------------------------------------------

CHECKPOINT_FORMAT = "agediff-toy-checkpoint/1"


def save_checkpoint(backbone: ToyBackbone, out_dir, extra: Optional[dict] = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    params = []
    for name, tensor in sorted(backbone.state().items()):
        arr = tensor.detach().contiguous().numpy().astype("<f4")
        fname = name.replace("/", "_") + ".f32"
        (out / fname).write_bytes(arr.tobytes())
        params.append({"name": name, "file": fname, "shape": list(arr.shape)})
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "arch": asdict(backbone.arch),
        "latent_shape": list(backbone.latent_shape),
        "text_embedding_shape": list(backbone.text_embedding_shape),
        "vocabulary": VOCAB,
        "schedule": backbone.schedule.to_dict(),
        "seed": backbone.arch.seed,
        "meta": backbone.meta,
        "parameters": params,
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def load_checkpoint(path) -> ToyBackbone:
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise InputError(f"no checkpoint manifest at {mpath}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise InputError(f"unsupported checkpoint format {manifest.get('format')!r}")
    if manifest["vocabulary"] != VOCAB:
        raise InputError("checkpoint vocabulary does not match this build")
    arch = ToyArch(**manifest["arch"])
    bb = ToyBackbone(arch, NoiseSchedule.from_dict(manifest["schedule"]))
    state = {}
    for p in manifest["parameters"]:
        raw = (root / p["file"]).read_bytes()
        arr = np.frombuffer(raw, dtype="<f4").reshape(p["shape"])
        state[p["name"]] = torch.from_numpy(arr.astype(np.float32))
    bb.load_state(state)
    bb.unet.eval()
    bb.meta = manifest.get("meta", {})
    return bb

