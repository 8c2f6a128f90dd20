"""Three-scale pyramid segmentation network with RFB refinement and dense aggregation.

Desk-scale: the encoder is a small strided conv stack that yields the same
stride-8/16/32 feature pyramid a pretrained transformer backbone would. An
external backbone can be plugged in through ``encoder_kind="external-backbone-hook"``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .losses import ConfigError

ENCODER_KINDS = ("toy-pyramid", "external-backbone-hook")
ACTIVATIONS = {"gelu": nn.GELU, "relu": nn.ReLU}
CHECKPOINT_FORMAT = "dcsd-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    encoder_kind: str = "toy-pyramid"
    base_channels: int = 16
    rfb_channels: int = 32
    input_size: tuple[int, int] = (256, 256)
    seed: int = 0
    # smooth by default so finite-difference checks never straddle a kink
    activation: str = "gelu"
    # channel widths of the external backbone's (stride 8, 16, 32) maps
    external_channels: tuple[int, int, int] | None = None

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        if self.external_channels is not None:
            self.external_channels = tuple(int(v) for v in self.external_channels)
        self.validate()

    def validate(self) -> None:
        if self.encoder_kind not in ENCODER_KINDS:
            raise ConfigError(f"encoder_kind must be one of {ENCODER_KINDS}, got {self.encoder_kind!r}")
        if self.base_channels < 1 or self.rfb_channels < 1:
            raise ConfigError("base_channels and rfb_channels must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {tuple(ACTIVATIONS)}, got {self.activation!r}")
        if len(self.input_size) != 2:
            raise ConfigError(f"input_size must be (H, W), got {self.input_size}")
        check_spatial(*self.input_size)
        if self.encoder_kind == "external-backbone-hook":
            if self.external_channels is None or len(self.external_channels) != 3:
                raise ConfigError("external-backbone-hook needs external_channels=(c8, c16, c32)")


def check_spatial(h: int, w: int) -> None:
    if h < 32 or w < 32 or h % 32 or w % 32:
        raise ConfigError(f"spatial size {h}x{w} must be a positive multiple of 32")


class FeaturePyramid(NamedTuple):
    f8: Tensor
    f16: Tensor
    f32: Tensor


def _conv(cin, cout, k=3, stride=1, padding=None, dilation=1):
    if padding is None:
        padding = tuple(dilation * (kk // 2) for kk in (k if isinstance(k, tuple) else (k, k)))
    return nn.Conv2d(cin, cout, k, stride=stride, padding=padding, dilation=dilation)


class ConvAct(nn.Sequential):
    def __init__(self, cin, cout, k=3, stride=1, padding=None, dilation=1, act=nn.GELU):
        super().__init__(_conv(cin, cout, k, stride, padding, dilation), act())


class ToyPyramidEncoder(nn.Module):
    """Five stride-2 stages; the last three are returned."""

    def __init__(self, base: int, act=nn.GELU):
        super().__init__()
        widths = [base, base, 2 * base, 4 * base, 4 * base]
        stages, cin = [], 3
        for w in widths:
            stages.append(nn.Sequential(ConvAct(cin, w, 3, stride=2, act=act), ConvAct(w, w, 3, act=act)))
            cin = w
        self.stages = nn.ModuleList(stages)
        self.out_channels = tuple(widths[2:])

    def forward(self, x: Tensor) -> FeaturePyramid:
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return FeaturePyramid(*feats[2:])


class RFB(nn.Module):
    """Receptive field block: a pointwise branch plus three factorized-kernel
    branches ending in dilated 3x3 convs, fused by 1x1 with a 1x1 residual."""

    def __init__(self, cin: int, cout: int, kernels=(3, 5, 7), dilations=(1, 3, 5), act=nn.GELU):
        super().__init__()
        self.branch0 = ConvAct(cin, cout, 1, act=act)
        self.branches = nn.ModuleList(
            nn.Sequential(
                ConvAct(cin, cout, 1, act=act),
                ConvAct(cout, cout, (1, k), act=act),
                ConvAct(cout, cout, (k, 1), act=act),
                ConvAct(cout, cout, 3, dilation=d, act=act),
            )
            for k, d in zip(kernels, dilations)
        )
        self.fuse = _conv(4 * cout, cout, 1)
        self.residual = _conv(cin, cout, 1)
        self.act = act()

    def forward(self, x: Tensor) -> Tensor:
        parts = [self.branch0(x)] + [b(x) for b in self.branches]
        return self.act(self.fuse(torch.cat(parts, dim=1)) + self.residual(x))


def _up_to(x: Tensor, ref: Tensor) -> Tensor:
    return F.interpolate(x, size=ref.shape[-2:], mode="bilinear", align_corners=False)


class DenseAggregation(nn.Module):
    """Partial-decoder aggregation: deeper maps gate shallower ones
    multiplicatively, then are concatenated and convolved down to stride 8."""

    def __init__(self, c: int, act=nn.GELU):
        super().__init__()
        self.conv_up1 = ConvAct(c, c, act=act)
        self.conv_up2 = ConvAct(c, c, act=act)
        self.conv_up3 = ConvAct(c, c, act=act)
        self.conv_up4 = ConvAct(c, c, act=act)
        self.conv_up5 = ConvAct(2 * c, 2 * c, act=act)
        self.conv_concat2 = ConvAct(2 * c, 2 * c, act=act)
        self.conv_concat3 = ConvAct(3 * c, 3 * c, act=act)
        self.conv_out = ConvAct(3 * c, 3 * c, act=act)
        self.out_channels = 3 * c

    def forward(self, x8: Tensor, x16: Tensor, x32: Tensor) -> Tensor:
        up32_16 = _up_to(x32, x16)
        up32_8 = _up_to(x32, x8)
        x16_1 = self.conv_up1(up32_16) * x16
        x8_1 = self.conv_up2(up32_8) * self.conv_up3(_up_to(x16, x8)) * x8
        x16_2 = self.conv_concat2(torch.cat([x16_1, self.conv_up4(up32_16)], dim=1))
        x8_2 = self.conv_concat3(torch.cat([x8_1, self.conv_up5(_up_to(x16_2, x8))], dim=1))
        return self.conv_out(x8_2)


FeatureProvider = Callable[[Tensor], "FeaturePyramid | tuple[Tensor, Tensor, Tensor]"]


class DCSDNet(nn.Module):
    """Encoder -> RFB x3 -> dense aggregation -> 1-channel head -> upsample to input size."""

    def __init__(self, config: ModelConfig, backbone: nn.Module | FeatureProvider | None = None):
        super().__init__()
        config.validate()
        self.config = config
        act = ACTIVATIONS[config.activation]
        if config.encoder_kind == "toy-pyramid":
            self.encoder = ToyPyramidEncoder(config.base_channels, act)
            chans = self.encoder.out_channels
        else:
            if backbone is None:
                raise ConfigError("encoder_kind='external-backbone-hook' requires a backbone provider")
            # plain callables are not registered as submodules
            self.encoder = backbone
            chans = config.external_channels
        c = config.rfb_channels
        self.rfb8, self.rfb16, self.rfb32 = (RFB(ch, c, act=act) for ch in chans)
        self.aggregate = DenseAggregation(c, act)
        self.head = _conv(self.aggregate.out_channels, 1, 1)
        self.step_count = 0
        init_parameters_(self, config.seed)

    def encode(self, image: Tensor) -> FeaturePyramid:
        check_spatial(*image.shape[-2:])
        pyr = FeaturePyramid(*self.encoder(image))
        h, w = image.shape[-2:]
        for f, s in zip(pyr, (8, 16, 32)):
            if tuple(f.shape[-2:]) != (h // s, w // s):
                raise ConfigError(f"backbone map {tuple(f.shape)} is not at stride {s} of {h}x{w}")
        return pyr

    def forward(self, image: Tensor) -> Tensor:
        pyr = self.encode(image)
        fused = self.aggregate(self.rfb8(pyr.f8), self.rfb16(pyr.f16), self.rfb32(pyr.f32))
        return F.interpolate(self.head(fused), size=image.shape[-2:], mode="bilinear", align_corners=False)


@torch.no_grad()
def init_parameters_(model: nn.Module, seed: int) -> None:
    """Seeded fan-in-scaled uniform conv weights, zero biases."""
    gen = torch.Generator().manual_seed(int(seed))
    for name, p in model.named_parameters():
        if name.startswith("encoder.") and not isinstance(model.encoder, ToyPyramidEncoder):
            continue
        if name.endswith("bias"):
            p.zero_()
        else:
            fan_in = p[0].numel()
            bound = math.sqrt(6.0 / fan_in)
            p.copy_(torch.rand(p.shape, generator=gen, dtype=torch.float64).mul_(2 * bound).sub_(bound))


def init_parameters(config: ModelConfig, backbone=None) -> DCSDNet:
    return DCSDNet(config, backbone)


def save_checkpoint(path, model: DCSDNet, mode: str, extra: dict | None = None) -> Path:
    """Write a versioned ``.npz`` archive.

    Keys: ``param/<name>`` (float arrays) and ``meta`` (a JSON string with
    format, version, model_config, step_count, mode and ``extra``).
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": asdict(model.config),
        "step_count": int(model.step_count),
        "mode": mode,
        "extra": extra or {},
    }
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)
    return path


def load_checkpoint(path, backbone=None) -> tuple[DCSDNet, dict]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("format") != CHECKPOINT_FORMAT or meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint format/version")
        arrays = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
    model = DCSDNet(ModelConfig(**meta["model_config"]), backbone)
    expected = model.state_dict()
    if set(arrays) != set(expected):
        raise ValueError(f"{path}: parameter names do not match the model config")
    for k, v in expected.items():
        if tuple(arrays[k].shape) != tuple(v.shape):
            raise ValueError(f"{path}: {k} has shape {arrays[k].shape}, config implies {tuple(v.shape)}")
    dtype = next(iter(arrays.values())).dtype
    if dtype == np.float64:
        model.double()
    model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in arrays.items()})
    model.step_count = meta["step_count"]
    return model, meta
