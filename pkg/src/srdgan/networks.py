"""Architectures and forward passes for the four networks and the fixed feature extractor."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import DimensionError, FormatError, NotFound, SpecError
from .imaging import Image

H2L_GEN = "H2L_GEN"
L2H_GEN = "L2H_GEN"
DISCRIMINATOR = "DISCRIMINATOR"
FEATURE_EXTRACTOR = "FEATURE_EXTRACTOR"
KINDS = (H2L_GEN, L2H_GEN, DISCRIMINATOR, FEATURE_EXTRACTOR)

DEFAULT_BLOCKS = {H2L_GEN: 4, L2H_GEN: 25, DISCRIMINATOR: 4, FEATURE_EXTRACTOR: 5}

CHECKPOINT_FORMAT = "srdgan-network"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetworkSpec:
    kind: str
    base_channels: int = 64
    num_blocks: int | None = None
    scale_factor: int = 4
    growth_channels: int = 32
    in_channels: int = 3
    out_channels: int = 3
    noise_channels: int = 1
    # discriminator only: side length of the square patches it judges
    input_size: int = 48
    residual_scale: float = 0.2

    def __post_init__(self):
        if self.num_blocks is None and self.kind in DEFAULT_BLOCKS:
            object.__setattr__(self, "num_blocks", DEFAULT_BLOCKS[self.kind])

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise SpecError(f"unknown spec fields: {sorted(unknown)}")
        return cls(**d)

    def validate(self):
        if self.kind not in KINDS:
            raise SpecError(f"unknown network kind {self.kind!r}")
        for name in ("base_channels", "num_blocks", "scale_factor", "growth_channels",
                     "in_channels", "out_channels", "input_size"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise SpecError(f"{name} must be a positive integer, got {v!r}")
        if self.kind == H2L_GEN and self.noise_channels < 0:
            raise SpecError("noise_channels must be >= 0")
        if self.kind == L2H_GEN:
            stages = math.log2(self.scale_factor)
            if stages != int(stages):
                raise SpecError(f"L2H scale_factor must be a power of two, got {self.scale_factor}")
        if self.kind == DISCRIMINATOR and self.input_size % (2 ** self.num_blocks):
            raise SpecError(
                f"discriminator input_size {self.input_size} not divisible by 2^{self.num_blocks}")
        return self


def conv3x3(cin: int, cout: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, 3, stride, 1)


def _scaled_kaiming_(module: nn.Module, scale: float):
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, a=0, mode="fan_in")
            m.weight.data.mul_(scale)
            nn.init.zeros_(m.bias)


class ResBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = conv3x3(channels, channels)
        self.conv2 = conv3x3(channels, channels)
        self.act = nn.LeakyReLU(0.2)
        _scaled_kaiming_(self, 0.1)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.act(self.conv2(self.act(self.conv1(x))))


class H2LGenerator(nn.Module):
    """Clean HR image + noise plane -> degraded LR image.

    Every block input is also summed into the trunk output before the strided
    output convolution.
    """

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        c = spec.base_channels
        self.head = conv3x3(spec.in_channels + spec.noise_channels, c)
        self.blocks = nn.ModuleList([ResBlock(c) for _ in range(spec.num_blocks)])
        self.tail = conv3x3(c, spec.out_channels, stride=spec.scale_factor)

    def forward(self, hr: Tensor, noise: Tensor) -> Tensor:
        x = self.head(torch.cat([hr, noise], 1))
        shortcut = torch.zeros_like(x)
        for block in self.blocks:
            shortcut = shortcut + x
            x = block(x)
        return self.tail(x + shortcut)


class DenseBlock(nn.Module):
    def __init__(self, channels: int, growth: int, residual_scale: float):
        super().__init__()
        self.convs = nn.ModuleList(
            [conv3x3(channels + i * growth, growth) for i in range(4)]
            + [conv3x3(channels + 4 * growth, channels)]
        )
        self.act = nn.LeakyReLU(0.2)
        self.residual_scale = residual_scale
        _scaled_kaiming_(self, 0.1)

    def forward(self, x: Tensor) -> Tensor:
        feats = [x]
        for conv in self.convs[:-1]:
            feats.append(self.act(conv(torch.cat(feats, 1))))
        return x + self.residual_scale * self.convs[-1](torch.cat(feats, 1))


class RRDB(nn.Module):
    def __init__(self, channels: int, growth: int, residual_scale: float):
        super().__init__()
        self.rdbs = nn.Sequential(*[DenseBlock(channels, growth, residual_scale) for _ in range(3)])
        self.residual_scale = residual_scale

    def forward(self, x: Tensor) -> Tensor:
        return x + self.residual_scale * self.rdbs(x)


class L2HGenerator(nn.Module):
    def __init__(self, spec: NetworkSpec):
        super().__init__()
        c = spec.base_channels
        self.head = conv3x3(spec.in_channels, c)
        self.trunk = nn.Sequential(
            *[RRDB(c, spec.growth_channels, spec.residual_scale) for _ in range(spec.num_blocks)])
        self.trunk_conv = conv3x3(c, c)
        self.up_convs = nn.ModuleList(
            [conv3x3(c, c) for _ in range(int(math.log2(spec.scale_factor)))])
        self.hr_conv = conv3x3(c, c)
        self.last = conv3x3(c, spec.out_channels)
        self.act = nn.LeakyReLU(0.2)

    def forward(self, lr: Tensor) -> Tensor:
        x = self.head(lr)
        x = x + self.trunk_conv(self.trunk(x))
        for conv in self.up_convs:
            x = self.act(conv(F.interpolate(x, scale_factor=2, mode="nearest")))
        return self.last(self.act(self.hr_conv(x)))


class Discriminator(nn.Module):
    def __init__(self, spec: NetworkSpec):
        super().__init__()
        c = spec.base_channels
        layers: list[nn.Module] = [conv3x3(spec.in_channels, c), nn.LeakyReLU(0.2)]
        for _ in range(spec.num_blocks):
            layers += [conv3x3(c, 2 * c, stride=2), nn.LeakyReLU(0.2)]
            c *= 2
        self.features = nn.Sequential(*layers)
        side = spec.input_size // 2 ** spec.num_blocks
        self.classifier = nn.Linear(c * side * side, 1)

    def forward(self, x: Tensor) -> Tensor:
        return self.classifier(self.features(x).flatten(1)).squeeze(1)


def feature_extractor_layout(spec: NetworkSpec) -> list[tuple[int, int, int]]:
    """(in_channels, out_channels, stride) for every conv of the fixed feature net."""
    layout, cin = [], spec.in_channels
    for i in range(spec.num_blocks):
        cout = spec.base_channels * 2 ** (i // 2)
        stride = 2 if i % 2 == 1 else 1
        layout.append((cin, cout, stride))
        cin = cout
    return layout


class ConvFeatureNet(nn.Module):
    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.convs = nn.ModuleList(
            [conv3x3(cin, cout, s) for cin, cout, s in feature_extractor_layout(spec)])

    def forward(self, x: Tensor, tap: int | None = None) -> Tensor:
        tap = len(self.convs) - 1 if tap is None else tap
        for i, conv in enumerate(self.convs[: tap + 1]):
            x = conv(x)
            if i < tap:
                x = F.relu(x)
        return x


_BUILDERS = {
    H2L_GEN: H2LGenerator,
    L2H_GEN: L2HGenerator,
    DISCRIMINATOR: Discriminator,
    FEATURE_EXTRACTOR: ConvFeatureNet,
}


@dataclass
class NetworkState:
    spec: NetworkSpec
    module: nn.Module
    init_seed: int

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self.module.named_parameters())

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.module.parameters())

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for name, t in sorted(self.module.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()

    def clone(self) -> "NetworkState":
        import copy
        return NetworkState(self.spec, copy.deepcopy(self.module), self.init_seed)


def build_network(spec: NetworkSpec, init_seed: int = 0, dtype=torch.float32) -> NetworkState:
    spec.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(init_seed)
        module = _BUILDERS[spec.kind](spec)
    module = module.to(dtype)
    if spec.kind == FEATURE_EXTRACTOR:
        module.requires_grad_(False)
    module.eval()
    return NetworkState(spec, module, init_seed)


def receptive_radius(spec: NetworkSpec) -> int:
    """Input pixels of context each side that can influence an output pixel."""
    if spec.kind == L2H_GEN:
        stages = int(math.log2(spec.scale_factor))
        hr_side = sum(2.0 ** -k for k in range(1, stages + 1)) + 2 / spec.scale_factor
        return int(math.ceil(2 + 15 * spec.num_blocks + hr_side))
    if spec.kind == H2L_GEN:
        return 2 + 2 * spec.num_blocks
    raise SpecError(f"receptive radius not defined for {spec.kind}")


def _expect(state: NetworkState, kind: str):
    if state.spec.kind != kind:
        raise SpecError(f"expected a {kind} network, got {state.spec.kind}")


def module_dtype(module: nn.Module) -> torch.dtype:
    p = next(module.parameters(), None)
    return torch.float32 if p is None else p.dtype


def image_to_tensor(img: Image, dtype=torch.float32) -> Tensor:
    """HxWxC Image -> 1xCxHxW tensor."""
    return torch.from_numpy(np.ascontiguousarray(img.data.transpose(2, 0, 1))).unsqueeze(0).to(dtype)


def tensor_to_image(t: Tensor, color_space: str = "RGB", provenance: str = "") -> Image:
    arr = t.detach().cpu().double().clamp(0, 1)[0].numpy().transpose(1, 2, 0)
    if arr.shape[2] == 1:
        color_space = "Y"
    return Image(arr, color_space, provenance)


def _noise_tensor(noise, like: Tensor) -> Tensor:
    if isinstance(noise, Image):
        return image_to_tensor(noise).to(like.dtype)
    if isinstance(noise, np.ndarray):
        t = torch.from_numpy(noise)
        if t.ndim == 2:
            t = t[None, None]
        elif t.ndim == 3:
            t = t.permute(2, 0, 1)[None]
        return t.to(like.dtype)
    return noise


def forward_h2l(state: NetworkState, hr, noise):
    """Degrade ``hr`` to LR.

    Tensor inputs give the raw (unclamped) training output; an :class:`Image`
    input gives a clamped :class:`Image`.
    """
    _expect(state, H2L_GEN)
    as_img = isinstance(hr, Image)
    x = image_to_tensor(hr, module_dtype(state.module)) if as_img else hr
    n = _noise_tensor(noise, x)
    s = state.spec.scale_factor
    if x.ndim != 4 or x.shape[2] % s or x.shape[3] % s:
        raise DimensionError(f"HR shape {tuple(x.shape)} not divisible by scale {s}")
    if n.shape[0] != x.shape[0] or n.shape[2:] != x.shape[2:] or n.shape[1] != state.spec.noise_channels:
        raise DimensionError(f"noise shape {tuple(n.shape)} does not match HR {tuple(x.shape)}")
    if x.shape[1] != state.spec.in_channels:
        raise DimensionError(f"expected {state.spec.in_channels} channels, got {x.shape[1]}")
    out = state.module(x, n)
    return tensor_to_image(out, provenance="h2l") if as_img else out


def forward_l2h(state: NetworkState, lr):
    _expect(state, L2H_GEN)
    as_img = isinstance(lr, Image)
    x = image_to_tensor(lr, module_dtype(state.module)) if as_img else lr
    if x.ndim != 4 or x.shape[1] != state.spec.in_channels:
        raise DimensionError(f"bad LR shape {tuple(x.shape)}")
    out = state.module(x)
    return tensor_to_image(out, provenance="l2h") if as_img else out


def forward_discriminator(state: NetworkState, img):
    """Scalar logits, one per batch element (a float for a single Image)."""
    _expect(state, DISCRIMINATOR)
    as_img = isinstance(img, Image)
    x = image_to_tensor(img, module_dtype(state.module)) if as_img else img
    size = state.spec.input_size
    if x.ndim != 4 or tuple(x.shape[2:]) != (size, size) or x.shape[1] != state.spec.in_channels:
        raise DimensionError(f"discriminator expects {size}x{size}, got {tuple(x.shape)}")
    logits = state.module(x)
    return float(logits[0].detach()) if as_img else logits


class FeatureExtractor:
    """A frozen network whose activations at one tap layer define the feature loss.

    ``network`` is either a FEATURE_EXTRACTOR NetworkState or any torch module
    mapping N x 3 x H x W to a feature tensor (e.g. a scripted pretrained
    classifier truncated at the desired layer).
    """

    def __init__(self, network, tap: int | None = None):
        self.network = network
        module = network.module if isinstance(network, NetworkState) else network
        for p in module.parameters():
            p.requires_grad_(False)
        module.eval()
        self.module = module
        if isinstance(network, NetworkState):
            n = network.spec.num_blocks
            self.tap = n - 1 if tap is None else tap
            if not 0 <= self.tap < n:
                raise SpecError(f"tap {self.tap} out of range for {n} layers")
        else:
            self.tap = tap

    @classmethod
    def random(cls, base_channels: int = 16, num_layers: int = 5, tap: int | None = None,
               seed: int = 1234, dtype=torch.float32) -> "FeatureExtractor":
        spec = NetworkSpec(FEATURE_EXTRACTOR, base_channels=base_channels, num_blocks=num_layers)
        return cls(build_network(spec, seed, dtype), tap)

    @classmethod
    def from_torchscript(cls, path) -> "FeatureExtractor":
        path = Path(path)
        if not path.is_file():
            raise NotFound(f"no such feature extractor: {path}")
        return cls(torch.jit.load(str(path), map_location="cpu"))

    @classmethod
    def from_config(cls, cfg: dict | None, dtype=torch.float32) -> "FeatureExtractor":
        cfg = dict(cfg or {})
        kind = cfg.pop("kind", "random")
        if kind == "random":
            return cls.random(dtype=dtype, **cfg)
        if kind == "torchscript":
            return cls.from_torchscript(cfg["path"])
        raise SpecError(f"unknown feature extractor kind {kind!r}")

    def to(self, dtype) -> "FeatureExtractor":
        self.module.to(dtype)
        return self

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for name, t in sorted(self.module.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()

    def __call__(self, x: Tensor) -> Tensor:
        if isinstance(self.network, NetworkState):
            return self.module(x, self.tap)
        return self.module(x)


def extract_features(fx: FeatureExtractor, img):
    if isinstance(img, Image):
        if img.color_space != "RGB":
            raise DimensionError("feature extraction needs an RGB image")
        return fx(image_to_tensor(img, module_dtype(fx.module)))
    return fx(img)


def feature_shape(spec: NetworkSpec, tap: int, height: int, width: int) -> tuple[int, int, int]:
    """Analytic (C, H, W) of the tap-layer output for a given input size."""
    c = spec.in_channels
    for cin, cout, stride in feature_extractor_layout(spec)[: tap + 1]:
        height = (height + 2 - 3) // stride + 1
        width = (width + 2 - 3) // stride + 1
        c = cout
    return c, height, width


def save_checkpoint(state: NetworkState, path, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "spec": json.dumps(state.spec.to_dict(), sort_keys=True),
        "init_seed": state.init_seed,
        "meta": dict(meta or {}),
        "parameters": {k: v.detach().clone() for k, v in state.module.state_dict().items()},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path, expected: NetworkSpec | None = None, kind: str | None = None) -> NetworkState:
    path = Path(path)
    if not path.is_file():
        raise NotFound(f"no such checkpoint: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise FormatError(f"cannot read checkpoint {path}: {e}") from e
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{path} is not a network checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {payload.get('version')}")
    spec = NetworkSpec.from_dict(json.loads(payload["spec"]))
    if expected is not None and spec != expected:
        raise SpecError(f"checkpoint spec {spec} does not match expected {expected}")
    if kind is not None and spec.kind != kind:
        raise SpecError(f"checkpoint holds a {spec.kind} network, expected {kind}")
    params = payload["parameters"]
    dtype = next(iter(params.values())).dtype if params else torch.float32
    state = build_network(spec, payload["init_seed"], dtype)
    try:
        state.module.load_state_dict(params, strict=True)
    except RuntimeError as e:
        raise SpecError(f"checkpoint parameters do not fit spec: {e}") from e
    return state
