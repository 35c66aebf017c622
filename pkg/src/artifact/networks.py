"""Generator, discriminator, segmentation U-Net and frozen feature extractor."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .conv import avg_pool2, conv, conv_transpose2, upsample_nearest2
from .fanbeam import FanBeamGeometry, build_lifting_pyramid, lift_2d_to_3d, pad_detector
from .tensor import Tensor, concat, leaky_relu, parameters_checksum, reshape, sigmoid, softmax, transpose


class Module:
    """Holds named parameters; submodules and layers register in attribute order."""

    def __init__(self):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.frozen = False
        self.calls = 0

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=not self.frozen, name=name)
        self._params[name] = t
        return t

    def named_parameters(self) -> "OrderedDict[str, Tensor]":
        return self._params

    def parameters(self) -> list[Tensor]:
        return list(self._params.values())

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self._params.values()))

    def freeze(self) -> "Module":
        self.frozen = True
        for p in self._params.values():
            p.requires_grad = False
            p.grad = None
        return self

    def set_trainable(self, flag: bool) -> None:
        if self.frozen and flag:
            raise RuntimeError(f"{type(self).__name__} is frozen")
        for p in self._params.values():
            p.requires_grad = flag

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def checksum(self) -> str:
        return parameters_checksum(self._params.values())

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data.copy()) for k, v in self._params.items())

    def load_state_dict(self, state) -> None:
        missing = set(self._params) - set(state)
        if missing:
            raise KeyError(f"{type(self).__name__}: missing parameters {sorted(missing)}")
        for name, p in self._params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{type(self).__name__}.{name}: shape {arr.shape} != {p.shape}")
            p.data[...] = arr

    def save(self, path: Path, meta: dict | None = None) -> str:
        info = {"class": type(self).__name__, "frozen": self.frozen, "checksum": self.checksum()}
        info.update(meta or {})
        return save_checkpoint(path, self.state_dict(), info)


def _he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    std = np.sqrt(2.0 / ((1 + 0.2 ** 2) * fan_in))
    return rng.normal(0.0, std, size=shape)


class _Conv:
    def __init__(self, owner: Module, name: str, dims: int, cin: int, cout: int, k: int,
                 rng: np.random.Generator, stride: int = 1, padding: int | None = None, bias: bool = True):
        shape = (cout, cin) + (k,) * dims
        self.weight = owner.add_param(f"{name}.weight", _he_normal(rng, shape, cin * k ** dims))
        self.bias = owner.add_param(f"{name}.bias", np.zeros(cout)) if bias else None
        self.stride = stride
        self.padding = (k - 1) // 2 if padding is None else padding

    def __call__(self, x: Tensor) -> Tensor:
        return conv(x, self.weight, self.bias, self.stride, self.padding)


class _UpConv:
    def __init__(self, owner: Module, name: str, dims: int, cin: int, cout: int, rng: np.random.Generator):
        shape = (cin, cout) + (2,) * dims
        self.weight = owner.add_param(f"{name}.weight", _he_normal(rng, shape, cin))
        self.bias = owner.add_param(f"{name}.bias", np.zeros(cout))

    def __call__(self, x: Tensor) -> Tensor:
        return conv_transpose2(x, self.weight, self.bias)


def _batched(x: Tensor, tail: int) -> tuple[Tensor, bool]:
    """Add a leading batch axis to an unbatched ``tail``-rank input."""
    if x.ndim == tail:
        return reshape(x, (1,) + x.shape), True
    return x, False


# ---------------------------------------------------------------------------
# generator
# ---------------------------------------------------------------------------


@dataclass
class GeneratorConfig:
    encoder_channels: tuple[int, ...] = (16, 32, 64)
    bottleneck_channels: int = 64
    decoder_channels: tuple[int, ...] = (64, 32, 16)
    seed: int = 1


class GeneratorNet(Module):
    """Two 2D encoders (one per view), per-scale backprojection lifting and a
    3D decoder with lifted skip connections.

    The detector axis is zero-padded at both ends to a multiple of
    ``2**levels`` so every encoder scale has a matching coarsened geometry.
    """

    def __init__(self, geometry: FanBeamGeometry, config: GeneratorConfig | None = None,
                 cache_dir: Path | None = None):
        super().__init__()
        cfg = config or GeneratorConfig()
        self.config = cfg
        self.levels = len(cfg.encoder_channels)
        if len(cfg.decoder_channels) != self.levels:
            raise ValueError("decoder_channels must have one entry per encoder level")
        self.geometry = geometry
        self.padded_geometry, self.pad_lo = pad_detector(geometry, 2 ** self.levels)
        if geometry.grid_n % 2 ** self.levels:
            raise ValueError(f"grid {geometry.grid_n} must be divisible by 2^{self.levels}")
        self.pyramid = build_lifting_pyramid(self.padded_geometry, self.levels, cache_dir)
        rng = np.random.default_rng(cfg.seed)
        enc = list(cfg.encoder_channels) + [cfg.bottleneck_channels]
        self.enc_channels = enc
        self.encoders = {}
        for view in ("ap", "lat"):
            layers = []
            cin = 1
            for k, c in enumerate(enc):
                layers.append(_Conv(self, f"enc_{view}.{k}", 2, cin, c, 3, rng))
                cin = c
            self.encoders[view] = layers
        dec = list(cfg.decoder_channels)
        self.dec_first = _Conv(self, f"dec.{self.levels}", 3, enc[-1], dec[0], 3, rng)
        self.dec_layers = []
        for i, k in enumerate(range(self.levels - 1, 0, -1)):
            self.dec_layers.append(_Conv(self, f"dec.{k}", 3, dec[i] + enc[k], dec[i + 1], 3, rng))
        self.head = _Conv(self, "dec.0", 3, dec[-1] + enc[0], 1, 3, rng)

    def _encode(self, view: str, x: Tensor) -> list[Tensor]:
        feats = []
        h = x
        for k, layer in enumerate(self.encoders[view]):
            if k > 0:
                h = avg_pool2(h)
            h = leaky_relu(layer(h))
            feats.append(h)
        return feats

    def _prepare(self, x: Tensor, name: str) -> Tensor:
        x, _ = _batched(x, 2)
        u, z = x.shape[1:]
        if u != self.geometry.n_detector_bins:
            raise ValueError(f"{name} projection has {u} detector bins, geometry expects {self.geometry.n_detector_bins}")
        if z % 2 ** self.levels:
            raise ValueError(f"{name} projection has {z} rows; need a multiple of {2 ** self.levels}")
        pad_hi = self.padded_geometry.n_detector_bins - u - self.pad_lo
        x = reshape(x, (x.shape[0], 1, u, z))
        if self.pad_lo or pad_hi:
            b = x.shape[0]
            x = concat([Tensor(np.zeros((b, 1, self.pad_lo, z))), x, Tensor(np.zeros((b, 1, pad_hi, z)))], axis=2)
        return x

    def __call__(self, x_ap: Tensor, x_lat: Tensor) -> Tensor:
        return generator_forward(self, x_ap, x_lat)


def generator_forward(net: GeneratorNet, x_ap: Tensor, x_lat: Tensor) -> Tensor:
    """Reconstruct ``(B, N, N, Z)`` volumes in (0, 1) from ``(B, U, Z)`` projection pairs."""
    squeeze = x_ap.ndim == 2
    if x_ap.shape != x_lat.shape:
        raise ValueError(f"a.p. and lat. projections differ in shape: {x_ap.shape} vs {x_lat.shape}")
    fa = net._encode("ap", net._prepare(x_ap, "a.p."))
    fl = net._encode("lat", net._prepare(x_lat, "lat."))
    lifted = []
    for k in range(net.levels + 1):
        expect_u = net.pyramid.geometries[k].n_detector_bins
        if fa[k].shape[2] != expect_u:
            raise ValueError(f"level {k}: features have {fa[k].shape[2]} detector bins, lifting expects {expect_u}")
        lifted.append(lift_2d_to_3d(net.pyramid.ap[k], net.pyramid.lat[k], fa[k], fl[k]))
    h = leaky_relu(net.dec_first(lifted[net.levels]))
    for layer, k in zip(net.dec_layers, range(net.levels - 1, 0, -1)):
        h = leaky_relu(layer(concat([upsample_nearest2(h), lifted[k]], axis=1)))
    out = sigmoid(net.head(concat([upsample_nearest2(h), lifted[0]], axis=1)))
    b = out.shape[0]
    out = reshape(out, (b,) + out.shape[2:])
    if squeeze:
        out = reshape(out, out.shape[1:])
    net.calls += 1
    return out


# ---------------------------------------------------------------------------
# discriminator
# ---------------------------------------------------------------------------


@dataclass
class DiscriminatorConfig:
    channels: tuple[int, ...] = (16, 32, 64)
    seed: int = 2


class DiscriminatorNet(Module):
    """3D patch classifier: stride-2 convolutions, then a linear score map."""

    def __init__(self, config: DiscriminatorConfig | None = None, grid: tuple[int, int, int] | None = None):
        super().__init__()
        cfg = config or DiscriminatorConfig()
        self.config = cfg
        self.grid = grid
        rng = np.random.default_rng(cfg.seed)
        self.layers = []
        cin = 1
        for i, c in enumerate(cfg.channels):
            self.layers.append(_Conv(self, f"down.{i}", 3, cin, c, 4, rng, stride=2, padding=1))
            cin = c
        self.out = _Conv(self, "score", 3, cin, 1, 3, rng)

    @property
    def reduction(self) -> int:
        return 2 ** len(self.layers)

    def __call__(self, v: Tensor) -> Tensor:
        return discriminator_forward(self, v)


def discriminator_forward(net: DiscriminatorNet, v: Tensor) -> Tensor:
    """Patch scores of shape ``(B, N/8, N/8, Z/8)`` for ``(B, N, N, Z)`` volumes."""
    v, squeeze = _batched(v, 3)
    if v.ndim != 4:
        raise ValueError(f"discriminator expects (B, N, N, Z) volumes, got {v.shape}")
    if net.grid is not None and tuple(v.shape[1:]) != tuple(net.grid):
        raise ValueError(f"discriminator configured for grid {net.grid}, got {v.shape[1:]}")
    if any(s % net.reduction for s in v.shape[1:]):
        raise ValueError(f"volume sizes {v.shape[1:]} must be divisible by {net.reduction}")
    h = reshape(v, (v.shape[0], 1) + v.shape[1:])
    for layer in net.layers:
        h = leaky_relu(layer(h))
    h = net.out(h)
    h = reshape(h, (h.shape[0],) + h.shape[2:])
    return reshape(h, h.shape[1:]) if squeeze else h


# ---------------------------------------------------------------------------
# segmentation U-Net
# ---------------------------------------------------------------------------


@dataclass
class SegNetConfig:
    channels: tuple[int, ...] = (8, 16, 32)
    n_classes: int = 4
    seed: int = 3


class SegNet(Module):
    """3D U-Net with two convolutions per resolution level and a softmax head."""

    def __init__(self, config: SegNetConfig | None = None):
        super().__init__()
        cfg = config or SegNetConfig()
        self.config = cfg
        rng = np.random.default_rng(cfg.seed)
        ch = list(cfg.channels)
        self.down = []
        cin = 1
        for i, c in enumerate(ch):
            self.down.append((_Conv(self, f"enc.{i}.a", 3, cin, c, 3, rng), _Conv(self, f"enc.{i}.b", 3, c, c, 3, rng)))
            cin = c
        self.up = []
        for i in range(len(ch) - 1, 0, -1):
            self.up.append((
                _UpConv(self, f"up.{i}", 3, ch[i], ch[i - 1], rng),
                _Conv(self, f"dec.{i - 1}.a", 3, 2 * ch[i - 1], ch[i - 1], 3, rng),
                _Conv(self, f"dec.{i - 1}.b", 3, ch[i - 1], ch[i - 1], 3, rng),
            ))
        self.head = _Conv(self, "head", 3, ch[0], cfg.n_classes, 1, rng)

    @property
    def levels(self) -> int:
        return len(self.config.channels)

    def logits(self, v: Tensor) -> Tensor:
        v, _ = _batched(v, 3)
        if v.ndim != 4:
            raise ValueError(f"segnet expects (B, N, N, Z) volumes, got {v.shape}")
        f = 2 ** (self.levels - 1)
        if any(s % f for s in v.shape[1:]):
            raise ValueError(f"volume sizes {v.shape[1:]} must be divisible by {f}")
        h = reshape(v, (v.shape[0], 1) + v.shape[1:])
        skips = []
        for i, (a, b) in enumerate(self.down):
            if i > 0:
                h = avg_pool2(h)
            h = leaky_relu(b(leaky_relu(a(h))))
            skips.append(h)
        for (up, a, b), skip in zip(self.up, reversed(skips[:-1])):
            h = up(h)
            h = leaky_relu(b(leaky_relu(a(concat([h, skip], axis=1)))))
        return self.head(h)

    def __call__(self, v: Tensor) -> Tensor:
        return segnet_forward(self, v)


def segnet_forward(net: SegNet, v: Tensor) -> Tensor:
    """Per-voxel class probabilities ``(B, 4, N, N, Z)``."""
    squeeze = v.ndim == 3
    out = softmax(net.logits(v), axis=1)
    net.calls += 1
    return reshape(out, out.shape[1:]) if squeeze else out


def predict_labels(probs: np.ndarray | Tensor) -> np.ndarray:
    p = probs.data if isinstance(probs, Tensor) else probs
    axis = 0 if p.ndim == 4 else 1
    return np.argmax(p, axis=axis).astype(np.uint8)


# ---------------------------------------------------------------------------
# frozen perceptual feature extractor
# ---------------------------------------------------------------------------


@dataclass
class FeatureExtractorConfig:
    channels: tuple[int, ...] = (16, 32, 64, 128)
    seed: int = 4
    weights_path: str | None = None


def _orthogonal(rng: np.random.Generator, cout: int, fan_in: int, gain: float) -> np.ndarray:
    a = rng.standard_normal((max(cout, fan_in), min(cout, fan_in)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    w = q if cout >= fan_in else q.T
    return gain * w.reshape(cout, fan_in)


class FeatureExtractor(Module):
    """Fixed multi-scale 2D filter bank: 3x3 conv + leaky-relu per level,
    2x average pooling between levels.  Weights are never trained."""

    def __init__(self, config: FeatureExtractorConfig | None = None):
        super().__init__()
        cfg = config or FeatureExtractorConfig()
        self.config = cfg
        rng = np.random.default_rng(cfg.seed)
        gain = np.sqrt(2.0 / (1 + 0.2 ** 2))
        self.layers = []
        cin = 1
        for i, c in enumerate(cfg.channels):
            w = _orthogonal(rng, c, cin * 9, gain).reshape(c, cin, 3, 3)
            self.layers.append(self.add_param(f"level.{i}.weight", w))
            cin = c
        if cfg.weights_path:
            state, _ = load_checkpoint(Path(cfg.weights_path))
            self.load_state_dict(state)
        self.freeze()

    @property
    def levels(self) -> int:
        return len(self.layers)

    def __call__(self, slices: Tensor) -> list[Tensor]:
        return feature_extract(self, slices)


def feature_extract(net: FeatureExtractor, slices: Tensor) -> list[Tensor]:
    """Features of ``(S, 1, N, N)`` (or ``(1, N, N)``) slices at N, N/2, N/4, N/8."""
    if slices.ndim == 3:
        slices = reshape(slices, (1,) + slices.shape)
    if slices.ndim != 4 or slices.shape[1] != 1:
        raise ValueError(f"feature extractor expects (S, 1, N, N) slices, got {slices.shape}")
    f = 2 ** (net.levels - 1)
    if any(s % f for s in slices.shape[2:]):
        raise ValueError(f"slice size {slices.shape[2:]} must be divisible by {f}")
    feats = []
    h = slices
    for i, w in enumerate(net.layers):
        if i > 0:
            h = avg_pool2(h)
        h = leaky_relu(conv(h, w, None, 1, 1))
        feats.append(h)
    net.calls += 1
    return feats


def axial_slices(vol: Tensor) -> Tensor:
    """``(B, N, N, Z)`` volume -> ``(B*Z, 1, N, N)`` stack of axial slices."""
    vol, _ = _batched(vol, 3)
    b, n1, n2, z = vol.shape
    s = transpose(vol, (0, 3, 1, 2))
    return reshape(s, (b * z, 1, n1, n2))
