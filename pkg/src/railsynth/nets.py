"""Small torch networks: the reference denoiser, latent codecs and the segmenter."""

from __future__ import annotations

import hashlib
import math
import zlib
from contextlib import contextmanager

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError

ENCODER_PATH = ("down0", "down1", "down2", "down3", "mid")


@contextmanager
def seeded(seed):
    """Run module construction under a private torch RNG state."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


def _groups(channels):
    for g in (8, 4, 2, 1):
        if channels % g == 0:
            return g
    return 1


def timestep_embedding(t, dim):
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=1)


def tokenize(prompt):
    return [tok for tok in prompt.lower().replace(",", " ").split() if tok]


class TextHashEmbedding(nn.Module):
    """Bag of hashed tokens; the empty prompt embeds to zero."""

    def __init__(self, dim, buckets=512):
        super().__init__()
        self.buckets = buckets
        self.bag = nn.EmbeddingBag(buckets, dim, mode="mean")

    def forward(self, prompts):
        ids, offsets = [], []
        for p in prompts:
            offsets.append(len(ids))
            ids.extend(zlib.crc32(tok.encode()) % self.buckets for tok in tokenize(p))
        device = self.bag.weight.device
        return self.bag(torch.tensor(ids, dtype=torch.long, device=device),
                        torch.tensor(offsets, dtype=torch.long, device=device))


class ResBlock(nn.Module):
    def __init__(self, cin, cout, emb_dim=None):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.emb = nn.Linear(emb_dim, cout) if emb_dim else None
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb=None):
        h = self.conv1(F.silu(self.norm1(x)))
        if self.emb is not None:
            h = h + self.emb(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class TinyUNet(nn.Module):
    """Noise predictor: four resolution levels with skip connections.

    Named top-level children are the parameter groups; ``freeze(name)`` turns
    off gradients for a group and records it in ``frozen``.  Optional
    ``residuals`` (keyed by encoder block name) are added to that block's
    skip output, which is how a control branch injects features.
    """

    def __init__(self, in_channels=3, base=16, emb_dim=64, buckets=512):
        super().__init__()
        self.config = {"in_channels": in_channels, "base": base, "emb_dim": emb_dim, "buckets": buckets}
        ch = (base, base * 2, base * 2, base * 4)
        self.channels = ch
        self.emb_dim = emb_dim
        self.time_embed = nn.Sequential(nn.Linear(emb_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.text_embed = TextHashEmbedding(emb_dim, buckets)
        self.stem = nn.Conv2d(in_channels, ch[0], 3, padding=1)
        self.down0 = ResBlock(ch[0], ch[0], emb_dim)
        self.down1 = ResBlock(ch[0], ch[1], emb_dim)
        self.down2 = ResBlock(ch[1], ch[2], emb_dim)
        self.down3 = ResBlock(ch[2], ch[3], emb_dim)
        self.mid = ResBlock(ch[3], ch[3], emb_dim)
        self.up3 = ResBlock(ch[3] + ch[3], ch[3], emb_dim)
        self.up2 = ResBlock(ch[3] + ch[2], ch[2], emb_dim)
        self.up1 = ResBlock(ch[2] + ch[1], ch[1], emb_dim)
        self.up0 = ResBlock(ch[1] + ch[0], ch[0], emb_dim)
        self.head = nn.Sequential(nn.GroupNorm(_groups(ch[0]), ch[0]), nn.SiLU(),
                                  nn.Conv2d(ch[0], in_channels, 3, padding=1))
        self.frozen = set()

    @property
    def block_channels(self):
        return {"down0": self.channels[0], "down1": self.channels[1], "down2": self.channels[2],
                "down3": self.channels[3], "mid": self.channels[3]}

    def groups(self):
        return dict(self.named_children())

    def freeze(self, *names):
        groups = self.groups()
        for name in names or tuple(groups):
            for p in groups[name].parameters():
                p.requires_grad_(False)
            self.frozen.add(name)
        return self

    def embed(self, t, prompts):
        dtype = self.stem.weight.dtype
        temb = self.time_embed(timestep_embedding(torch.as_tensor(t), self.emb_dim).to(dtype))
        return temb + self.text_embed(list(prompts)).to(dtype)

    def encode_path(self, h, emb, blocks=None, taps=None):
        """Run the encoder blocks; ``blocks`` overrides modules by name, ``taps``
        collects each overridden block's output."""
        blocks = blocks or {}
        skips = []
        for i, name in enumerate(ENCODER_PATH[:4]):
            h = blocks.get(name, getattr(self, name))(h, emb)
            if taps is not None and name in blocks:
                taps[name] = h
            skips.append(h)
            if i < 3:
                h = F.avg_pool2d(h, 2)
        h = blocks.get("mid", self.mid)(h, emb)
        if taps is not None and "mid" in blocks:
            taps["mid"] = h
        return h, skips

    def forward(self, x, t, prompts, residuals=None):
        if x.shape[-1] % 8 or x.shape[-2] % 8:
            raise ShapeError(f"spatial dims must be divisible by 8, got {tuple(x.shape[-2:])}")
        residuals = residuals or {}
        emb = self.embed(t, prompts)
        h, skips = self.encode_path(self.stem(x), emb)
        if "mid" in residuals:
            h = h + residuals["mid"]
        for i in (3, 2, 1, 0):
            skip = skips[i]
            name = f"down{i}"
            if name in residuals:
                skip = skip + residuals[name]
            if i < 3:
                h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = getattr(self, f"up{i}")(torch.cat([h, skip], dim=1), emb)
        return self.head(h)

    def predict(self, x_t, t, prompts, condition=None):
        return self(x_t, t, prompts)


def make_denoiser(seed=0, **kwargs):
    with seeded(seed):
        return TinyUNet(**kwargs)


def state_hash(module):
    """sha256 over every state tensor, in name order."""
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def snapshot(module):
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


# --- latent codecs ----------------------------------------------------------


class IdentityCodec:
    codec_id = "identity"
    factor = 1

    def encode(self, x):
        return x

    def decode(self, z):
        return z

    def latent_shape(self, image_shape):
        return tuple(image_shape)


class ConvAutoencoder(nn.Module):
    """Tiny learned codec downsampling by ``factor`` (a power of two)."""

    codec_id = "conv-ae"

    def __init__(self, channels=3, latent_channels=4, factor=2, width=32):
        super().__init__()
        self.factor = factor
        self.latent_channels = latent_channels
        n = int(math.log2(factor))
        enc = [nn.Conv2d(channels, width, 3, padding=1), nn.SiLU()]
        dec = []
        for _ in range(n):
            enc += [nn.Conv2d(width, width, 4, stride=2, padding=1), nn.SiLU()]
            dec += [nn.ConvTranspose2d(width, width, 4, stride=2, padding=1), nn.SiLU()]
        enc.append(nn.Conv2d(width, latent_channels, 3, padding=1))
        self.enc = nn.Sequential(*enc)
        self.dec = nn.Sequential(nn.Conv2d(latent_channels, width, 3, padding=1), nn.SiLU(), *dec,
                                 nn.Conv2d(width, channels, 3, padding=1))

    def encode(self, x):
        return self.enc(x)

    def decode(self, z):
        return self.dec(z)

    def latent_shape(self, image_shape):
        b, _, h, w = image_shape
        return (b, self.latent_channels, h // self.factor, w // self.factor)

    def fit(self, images, steps=200, lr=2e-3, batch_size=8, seed=0):
        gen = torch.Generator().manual_seed(seed)
        opt = torch.optim.Adam(self.parameters(), lr=lr)
        losses = []
        for _ in range(steps):
            idx = torch.randint(0, images.shape[0], (min(batch_size, images.shape[0]),), generator=gen)
            batch = images[idx]
            loss = F.mse_loss(self.decode(self.encode(batch)), batch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss))
        for p in self.parameters():
            p.requires_grad_(False)
        return losses


# --- segmentation -------------------------------------------------------------


class SegUNet(nn.Module):
    """Binary segmentation U-Net returning per-pixel logits (N, 1, H, W)."""

    def __init__(self, in_channels=3, base=8, depth=3):
        super().__init__()
        widths = [base * 2**i for i in range(depth + 1)]
        self.widths = widths
        self.inc = ResBlock(in_channels, widths[0])
        self.downs = nn.ModuleList(ResBlock(widths[i], widths[i + 1]) for i in range(depth))
        self.ups = nn.ModuleList(ResBlock(widths[i + 1] + widths[i], widths[i]) for i in reversed(range(depth)))
        self.out = nn.Conv2d(widths[0], 1, 1)

    def forward(self, x):
        h = self.inc(x)
        skips = [h]
        for down in self.downs:
            h = down(F.max_pool2d(h, 2))
            skips.append(h)
        skips.pop()
        for up in self.ups:
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = up(torch.cat([h, skips.pop()], dim=1))
        return self.out(h)
