"""Control branch: frozen base denoiser, trainable clone, zero links, condition encoder."""

from __future__ import annotations

import copy
import math

import torch
import torch.nn as nn

from .diffusion import NoiseSchedule, training_step
from .errors import HashMismatch, MissingCondition, ShapeError, UnknownBlock
from .nets import ENCODER_PATH, TinyUNet, seeded, state_hash


def zero_conv(cin, cout):
    conv = nn.Conv2d(cin, cout, 1)
    nn.init.zeros_(conv.weight)
    nn.init.zeros_(conv.bias)
    return conv


class ConditionEncoder(nn.Module):
    """Maps a normalised HxWx3 condition to the latent injection shape.

    Three conv stages widen 16 -> 32 -> 64 channels; the first
    ``log2(in_size / latent_size)`` of them use stride 2 (all three for the
    usual 8x latent codec, none for pixel-space diffusion).  The final
    projection to ``latent_channels`` starts at zero.
    """

    widths = (16, 32, 64)

    def __init__(self, in_size, latent_size, latent_channels, in_channels=3):
        super().__init__()
        ratio = in_size // latent_size
        n_down = int(round(math.log2(ratio))) if ratio >= 1 else -1
        if ratio * latent_size != in_size or 2**n_down != ratio or n_down > len(self.widths):
            raise ShapeError(f"cannot map {in_size} to {latent_size} with {len(self.widths)} stride-2 stages")
        self.in_size = in_size
        self.latent_size = latent_size
        self.latent_channels = latent_channels
        layers = [nn.Conv2d(in_channels, self.widths[0], 3, padding=1), nn.SiLU()]
        cin = self.widths[0]
        for i, cout in enumerate(self.widths):
            stride = 2 if i < n_down else 1
            layers += [nn.Conv2d(cin, cout, 3, stride=stride, padding=1), nn.SiLU()]
            cin = cout
        self.body = nn.Sequential(*layers)
        self.out = nn.Conv2d(cin, latent_channels, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, cond):
        if cond.dim() != 4 or cond.shape[1] != 3 or tuple(cond.shape[-2:]) != (self.in_size, self.in_size):
            raise ShapeError(
                f"condition must be (N, 3, {self.in_size}, {self.in_size}), got {tuple(cond.shape)}",
                shape=tuple(cond.shape),
            )
        return self.out(self.body(cond))


def encode_condition(encoder, condition):
    """Accepts an HxWx3 array/tensor or an NCHW batch."""
    cond = torch.as_tensor(condition)
    if cond.dim() == 3:
        if cond.shape[-1] != 3:
            raise ShapeError(f"expected HxWx3 condition, got {tuple(cond.shape)}")
        cond = cond.permute(2, 0, 1)[None].contiguous()
    cond = cond.to(encoder.out.weight.dtype)
    return encoder(cond)


class ControlledDenoiser(nn.Module):
    """Base denoiser plus a trainable control branch.

    The clone sees ``x_t + E(condition)``, runs the encoder path with cloned
    blocks in place of the named base blocks, and each cloned block's output
    is added (through its zero link) to the matching skip of the frozen base.
    """

    def __init__(self, base, blocks_to_clone=ENCODER_PATH, image_size=None, latent_size=None,
                 clone_prompt=True, seed=0):
        super().__init__()
        unknown = [b for b in blocks_to_clone if b not in ENCODER_PATH]
        if unknown:
            raise UnknownBlock(f"cannot clone {unknown}; choose from {list(ENCODER_PATH)}", blocks=unknown)
        if image_size is None:
            raise ShapeError("image_size is required")
        latent_size = latent_size or image_size
        self.base = base.freeze()
        self.block_names = tuple(b for b in ENCODER_PATH if b in blocks_to_clone)
        self.clone = nn.ModuleDict({name: copy.deepcopy(getattr(base, name)) for name in self.block_names})
        for p in self.clone.parameters():
            p.requires_grad_(True)
        chans = base.block_channels
        self.zero_links = nn.ModuleDict({name: zero_conv(chans[name], chans[name]) for name in self.block_names})
        with seeded(seed):
            self.encoder = ConditionEncoder(image_size, latent_size, base.config["in_channels"])
        self.clone_prompt = clone_prompt
        self.base_hash = state_hash(base)
        self.config = {
            "blocks": list(self.block_names),
            "image_size": image_size,
            "latent_size": latent_size,
            "clone_prompt": clone_prompt,
        }

    def groups(self):
        groups = {f"base.{name}": mod for name, mod in self.base.groups().items()}
        groups.update(clone=self.clone, zero_links=self.zero_links, encoder=self.encoder)
        return groups

    @property
    def frozen(self):
        return {f"base.{name}" for name in self.base.frozen}

    def control_residuals(self, x_t, t, prompts, condition):
        base = self.base
        prompts = list(prompts)
        emb = base.embed(t, prompts if self.clone_prompt else [""] * len(prompts))
        h = base.stem(x_t + self.encoder(condition))
        taps = {}
        base.encode_path(h, emb, blocks=dict(self.clone.items()), taps=taps)
        return {name: self.zero_links[name](taps[name]) for name in self.block_names}

    def forward(self, x_t, t, prompts, condition=None):
        if condition is None:
            raise MissingCondition("a condition is required once a control branch is attached")
        residuals = self.control_residuals(x_t, t, prompts, condition)
        return self.base(x_t, t, prompts, residuals=residuals)

    def predict(self, x_t, t, prompts, condition=None):
        return self(x_t, t, prompts, condition)

    def trainable_state(self):
        return {
            "clone": self.clone.state_dict(),
            "zero_links": self.zero_links.state_dict(),
            "encoder": self.encoder.state_dict(),
        }

    def save(self, path, extra=None):
        torch.save({"config": self.config, "base_hash": self.base_hash, **self.trainable_state(),
                    **(extra or {})}, path)

    @classmethod
    def load(cls, path, base):
        blob = torch.load(path, weights_only=False)
        if state_hash(base) != blob["base_hash"]:
            raise HashMismatch("control checkpoint was attached to a different base", path=str(path))
        cfg = blob["config"]
        cd = cls(base, cfg["blocks"], cfg["image_size"], cfg["latent_size"], cfg["clone_prompt"])
        cd.clone.load_state_dict(blob["clone"])
        cd.zero_links.load_state_dict(blob["zero_links"])
        cd.encoder.load_state_dict(blob["encoder"])
        return cd, blob


def attach_control(base, blocks_to_clone=ENCODER_PATH, image_size=None, latent_size=None, clone_prompt=True,
                   seed=0):
    return ControlledDenoiser(base, blocks_to_clone, image_size, latent_size, clone_prompt, seed)


def controlled_predict(cd, x_t, t, prompts, condition):
    return cd.predict(x_t, t, prompts, condition)


def control_training_step(cd, codec, schedule, batch, prompts, conditions, generator, optimizer=None, step=0,
                          **kwargs):
    if conditions is None or conditions.shape[0] != batch.shape[0]:
        raise MissingCondition("every batch item needs a condition")
    return training_step(cd, codec, schedule, batch, prompts, conditions, generator, optimizer, step, **kwargs)


def save_denoiser(model, path, schedule=None, config_hash=""):
    torch.save(
        {
            "arch": model.config,
            "groups": {name: mod.state_dict() for name, mod in model.groups().items()},
            "frozen": sorted(model.frozen),
            "schedule": schedule.to_dict() if schedule is not None else None,
            "config_hash": config_hash,
        },
        path,
    )


def load_denoiser(path):
    blob = torch.load(path, weights_only=False)
    model = TinyUNet(**blob["arch"])
    groups = model.groups()
    for name, state in blob["groups"].items():
        groups[name].load_state_dict(state)
    if blob["frozen"]:
        model.freeze(*blob["frozen"])
    schedule = NoiseSchedule.from_dict(blob["schedule"]) if blob["schedule"] else None
    return model, schedule, blob

