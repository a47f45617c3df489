"""U-like segmentation network with pluggable decoders.

The encoder is a plain UNet contracting path.  Skip features ``x^l`` pass
through per-level g-functions (3x3 conv -> nearest upsample to full
resolution -> activation) and drive a parameter-free upward path whose
update rule is one of three explicit discretizations of

    dy/dt = -y + f(y + g(x))

with ``f`` an affine-free batch norm.  ``ORIGINAL`` / ``THIN_ORIGINAL``
are conventional resolution-doubling decoders kept as baselines, and
``SKIP_SUM`` is the ablation ``y^{l-1} = y^l + g(x^l)``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .errors import LayerRangeError, ShapeError
from .tensor_ops import (
    BatchNormParams,
    ConvParams,
    Tensor,
    batchnorm,
    concat,
    conv2d,
    kaiming_uniform,
    maxpool2d,
    relu,
    sigmoid,
    upsample_nearest,
)


class Decoder(str, enum.Enum):
    ORIGINAL = "original"
    THIN_ORIGINAL = "thin_original"
    SKIP_SUM = "skip_sum"
    EED = "eed"
    HD = "hd"
    LMD = "lmd"

    @property
    def is_nmode(self) -> bool:
        return self in (Decoder.EED, Decoder.HD, Decoder.LMD)

    @property
    def uses_g(self) -> bool:
        return self not in (Decoder.ORIGINAL, Decoder.THIN_ORIGINAL)


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 4
    encoder_channels: tuple = (16, 32, 64, 128)
    input_channels: int = 3
    y_channels: int = 3
    decoder: Decoder = Decoder.EED
    delta: Optional[float] = None
    num_classes: int = 1
    share_g_across_sites: bool = False
    g_activation: str = "relu"
    thin_channels: int = 3
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "decoder", Decoder(self.decoder))
        object.__setattr__(self, "encoder_channels", tuple(int(c) for c in self.encoder_channels))
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        if len(self.encoder_channels) != self.depth:
            raise ValueError(f"need {self.depth} encoder channel widths, got {len(self.encoder_channels)}")
        if any(b <= a for a, b in zip(self.encoder_channels, self.encoder_channels[1:])):
            raise ValueError(f"encoder channels must be strictly increasing: {self.encoder_channels}")
        if self.delta is not None and not 0 < self.delta <= 1:
            raise ValueError(f"delta must lie in (0, 1], got {self.delta}")
        if self.g_activation not in _ACTIVATIONS:
            raise ValueError(f"unknown g activation {self.g_activation!r}")
        if min(self.y_channels, self.num_classes, self.input_channels) < 1:
            raise ValueError("channel counts must be positive")

    @property
    def step_size(self) -> float:
        return 1.0 / self.depth if self.delta is None else self.delta

    def replace(self, **changes) -> "UNetConfig":
        return replace(self, **changes)

    # key = value text form -------------------------------------------------
    def to_text(self) -> str:
        lines = [
            f"depth = {self.depth}",
            f"channels = {','.join(map(str, self.encoder_channels))}",
            f"input_channels = {self.input_channels}",
            f"y_channels = {self.y_channels}",
            f"decoder = {self.decoder.value}",
            f"delta = {self.step_size!r}",
            f"num_classes = {self.num_classes}",
            f"share_g = {str(self.share_g_across_sites).lower()}",
            f"g_activation = {self.g_activation}",
            f"thin_channels = {self.thin_channels}",
            f"seed = {self.seed}",
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, **overrides) -> "UNetConfig":
        values = parse_key_values(text)
        kwargs = {}
        for key, raw in values.items():
            name = _CONFIG_KEYS.get(key)
            if name is None:
                raise ValueError(f"unknown config key {key!r}")
            kwargs[name] = _coerce(name, raw)
        kwargs.update({k: v for k, v in overrides.items() if v is not None})
        if "encoder_channels" in kwargs and "depth" not in kwargs:
            kwargs["depth"] = len(kwargs["encoder_channels"])
        return cls(**kwargs)

    @classmethod
    def load(cls, path, **overrides) -> "UNetConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"), **overrides)


_CONFIG_KEYS = {
    "depth": "depth",
    "channels": "encoder_channels",
    "encoder_channels": "encoder_channels",
    "input_channels": "input_channels",
    "y_channels": "y_channels",
    "decoder": "decoder",
    "delta": "delta",
    "num_classes": "num_classes",
    "share_g": "share_g_across_sites",
    "share_g_across_sites": "share_g_across_sites",
    "g_activation": "g_activation",
    "thin_channels": "thin_channels",
    "seed": "seed",
}


def parse_key_values(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.lower()] = value
    return out


def _coerce(name: str, raw: str):
    if name == "encoder_channels":
        return tuple(int(c) for c in raw.split(",") if c.strip())
    if name == "delta":
        return None if raw.lower() in ("", "none", "auto") else float(raw)
    if name == "share_g_across_sites":
        return raw.lower() in ("1", "true", "yes", "on")
    if name in ("decoder", "g_activation"):
        return raw.lower()
    return int(raw)


_ACTIVATIONS: dict[str, Callable] = {"relu": relu, "sigmoid": sigmoid}


# ---------------------------------------------------------------------------
# decoder update rules (work on Tensors, arrays or floats)


def _check_same(a, b, what: str):
    if np.shape(a) != np.shape(b):
        raise ShapeError(f"{what}: shapes {np.shape(a)} and {np.shape(b)} differ")


def eed_step(y_l, g_out, delta: float, f):
    """Explicit-Euler decoder: ``(1 - d) y + d f(y + g)``."""
    _check_same(y_l, g_out, "eed_step")
    return (1.0 - delta) * y_l + delta * f(y_l + g_out)


def hd_step(y_l, g_out_l, g_out_lm1, delta: float, f, f_pred=None, layer: Optional[int] = None):
    """Heun decoder step for layers 2..L.

    The slope ``-y + f(y + g_l)`` is formed once and reused by both the
    predictor and the corrector.  ``f_pred`` is the f-instance used at the
    predictor site (defaults to ``f``).
    """
    if layer is not None and layer < 2:
        raise LayerRangeError(f"Heun decoder needs the next skip input; layer {layer} must use eed_step")
    _check_same(y_l, g_out_l, "hd_step")
    _check_same(y_l, g_out_lm1, "hd_step")
    f_pred = f if f_pred is None else f_pred
    slope = -y_l + f(y_l + g_out_l)
    half = 0.5 * delta
    return (1.0 - half) * y_l + half * ((1.0 - delta) * slope + f_pred(y_l + delta * slope + g_out_lm1))


def lmd_step(y_lp1, y_l, g_out_l, delta: float, f, layer: Optional[int] = None, depth: Optional[int] = None):
    """Two-step decoder: ``y^{l+1} - 2d y^l + 2d f(y^l + g^l)`` for layers 1..L-1."""
    if layer is not None and depth is not None and layer >= depth:
        raise LayerRangeError(f"two-step decoder needs y^(l+1); layer {layer} of {depth} must use eed_step")
    _check_same(y_lp1, y_l, "lmd_step")
    _check_same(y_l, g_out_l, "lmd_step")
    two_d = 2.0 * delta
    return y_lp1 - two_d * y_l + two_d * f(y_l + g_out_l)


def skip_sum_step(y_l, g_out):
    _check_same(y_l, g_out, "skip_sum_step")
    return y_l + g_out


def upward_pass(cfg: UNetConfig, g_out: dict, f_for: Callable[[int, str], Callable], g_pred: Optional[dict] = None):
    """Run the parameter-free upward path from ``y^L = 0`` to ``y^0``.

    ``g_out[l]`` is the g-function output for skip level ``l`` (1..L);
    ``g_pred[l]`` is the predictor-site output HD uses for level ``l``.
    ``f_for(layer, site)`` returns the f-map for that call site.

    Returns ``(y0, trace)`` where ``trace`` lists the rule used per layer,
    top to bottom.
    """
    L, d = cfg.depth, cfg.step_size
    kind = cfg.decoder
    if not kind.uses_g:
        raise ValueError(f"{kind.value} decoder has no parameter-free upward path")
    g_pred = g_out if g_pred is None else g_pred
    y = g_out[L] * 0.0
    y_prev = None
    trace = []
    for l in range(L, 0, -1):
        if kind is Decoder.SKIP_SUM:
            new, rule = skip_sum_step(y, g_out[l]), "skip_sum"
        elif kind is Decoder.HD and l >= 2:
            new, rule = hd_step(y, g_out[l], g_pred[l - 1], d, f_for(l, "y"), f_for(l, "pred"), layer=l), "hd"
        elif kind is Decoder.LMD and l < L:
            new, rule = lmd_step(y_prev, y, g_out[l], d, f_for(l, "y"), layer=l, depth=L), "lmd"
        else:
            new, rule = eed_step(y, g_out[l], d, f_for(l, "y")), "eed"
        y_prev, y = y, new
        trace.append(rule)
    return y, trace


def f_sites(cfg: UNetConfig) -> list[tuple[int, str]]:
    """Every (layer, site) at which the upward path evaluates f."""
    if not cfg.decoder.is_nmode:
        return []
    sites = [(l, "y") for l in range(cfg.depth, 0, -1)]
    if cfg.decoder is Decoder.HD:
        sites += [(l, "pred") for l in range(cfg.depth, 1, -1)]
    return sites


def g_sites(cfg: UNetConfig) -> list[tuple[int, str]]:
    """Every (level, site) that owns its own g-function parameters."""
    if not cfg.decoder.uses_g:
        return []
    sites = [(l, "y") for l in range(1, cfg.depth + 1)]
    if cfg.decoder is Decoder.HD and not cfg.share_g_across_sites:
        sites += [(l, "pred") for l in range(1, cfg.depth)]
    return sites


# ---------------------------------------------------------------------------
# model


@dataclass
class ConvBlock:
    """(conv3x3 -> batchnorm -> relu) x 2."""

    conv1: ConvParams
    bn1: BatchNormParams
    conv2: ConvParams
    bn2: BatchNormParams

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        x = relu(batchnorm(conv2d(x, self.conv1), self.bn1, training))
        return relu(batchnorm(conv2d(x, self.conv2), self.bn2, training))


@dataclass
class UpBlock:
    """Baseline decoder stage: 1x1 channel reduction, 2x upsample, concat, ConvBlock."""

    reduce: ConvParams
    block: ConvBlock


def original_decoder_step(y: Tensor, skip: Tensor, stage: UpBlock, training: bool) -> Tensor:
    # nearest upsampling commutes with a 1x1 conv, so reduce first at low resolution
    up = upsample_nearest(conv2d(y, stage.reduce), 2)
    if up.shape[2:] != skip.shape[2:] or up.shape[0] != skip.shape[0]:
        raise ShapeError(f"upsampled state {up.shape} does not align with skip {skip.shape}")
    return stage.block(concat([up, skip], axis=1), training)


@dataclass
class UNet:
    """Parameters, buffers and forward pass for one :class:`UNetConfig`."""

    cfg: UNetConfig
    dtype: type = np.float32
    encoder: list = field(init=False)
    g: dict = field(init=False)
    f: dict = field(init=False)
    stages: dict = field(init=False)
    head: ConvParams = field(init=False)

    def __post_init__(self):
        cfg, dt = self.cfg, self.dtype
        rng = np.random.default_rng(cfg.seed)

        def conv(c_in, c_out, k, bias):
            w = Tensor(kaiming_uniform((c_out, c_in, k, k), rng, dt), requires_grad=True)
            b = Tensor(np.zeros(c_out, dtype=dt), requires_grad=True) if bias else None
            return ConvParams(w, b, stride=1, padding=k // 2)

        def block(c_in, c_out):
            return ConvBlock(
                conv(c_in, c_out, 3, False),
                BatchNormParams(c_out, affine=True, dtype=dt),
                conv(c_out, c_out, 3, False),
                BatchNormParams(c_out, affine=True, dtype=dt),
            )

        chans = cfg.encoder_channels
        self.encoder = []
        c_prev = cfg.input_channels
        for c in chans:
            self.encoder.append(block(c_prev, c))
            c_prev = c

        self.g = {site: conv(chans[site[0] - 1], cfg.y_channels, 3, True) for site in g_sites(cfg)}
        self.f = {site: BatchNormParams(cfg.y_channels, affine=False, dtype=dt) for site in f_sites(cfg)}

        self.stages = {}
        if cfg.decoder in (Decoder.ORIGINAL, Decoder.THIN_ORIGINAL):
            thin = cfg.decoder is Decoder.THIN_ORIGINAL
            width_in = chans[-1]
            for l in range(cfg.depth, 1, -1):
                skip_c = chans[l - 2]
                width = cfg.thin_channels if thin else skip_c
                self.stages[l] = UpBlock(conv(width_in, width, 1, True), block(width + skip_c, width))
                width_in = width
            head_in = width_in
        else:
            head_in = cfg.y_channels
        self.head = conv(head_in, cfg.num_classes, 1, True)

    # registry -----------------------------------------------------------
    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []

        def add_conv(prefix, p: ConvParams):
            out.append((f"{prefix}.weight", p.weight))
            if p.bias is not None:
                out.append((f"{prefix}.bias", p.bias))

        def add_block(prefix, b: ConvBlock):
            for name in ("conv1", "bn1", "conv2", "bn2"):
                part = getattr(b, name)
                if isinstance(part, ConvParams):
                    add_conv(f"{prefix}.{name}", part)
                elif part.affine:
                    out.append((f"{prefix}.{name}.weight", part.weight))
                    out.append((f"{prefix}.{name}.bias", part.bias))

        for i, b in enumerate(self.encoder, 1):
            add_block(f"enc{i}", b)
        for (l, site), p in self.g.items():
            add_conv(f"g{l}.{site}", p)
        for l, st in self.stages.items():
            add_conv(f"dec{l}.reduce", st.reduce)
            add_block(f"dec{l}", st.block)
        add_conv("head", self.head)
        for t_name, t in out:
            t.name = t_name
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        out = []

        def add_bn(prefix, bn):
            out.append((f"{prefix}.running_mean", bn.running_mean))
            out.append((f"{prefix}.running_var", bn.running_var))

        for i, b in enumerate(self.encoder, 1):
            add_bn(f"enc{i}.bn1", b.bn1)
            add_bn(f"enc{i}.bn2", b.bn2)
        for (l, site), bn in self.f.items():
            add_bn(f"f{l}.{site}", bn)
        for l, st in self.stages.items():
            add_bn(f"dec{l}.bn1", st.block.bn1)
            add_bn(f"dec{l}.bn2", st.block.bn2)
        return out

    def buffers(self) -> list[np.ndarray]:
        return [b for _, b in self.named_buffers()]

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict) -> None:
        targets = {name: p.data for name, p in self.named_parameters()}
        targets.update(self.named_buffers())
        missing = set(targets) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks entries: {sorted(missing)[:5]}")
        for name, dst in targets.items():
            src = np.asarray(state[name])
            if src.shape != dst.shape:
                raise ShapeError(f"{name}: checkpoint shape {src.shape} != model shape {dst.shape}")
            dst[...] = src

    # forward ------------------------------------------------------------
    def encode(self, x: Tensor, training: bool = False) -> list[Tensor]:
        """Skip features x^1..x^L (level l at 1/2^(l-1) resolution)."""
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        L = self.cfg.depth
        if x.ndim != 4 or x.shape[1] != self.cfg.input_channels:
            raise ShapeError(f"expected (N, {self.cfg.input_channels}, H, W) image, got {x.shape}")
        if x.shape[2] % 2 ** (L - 1) or x.shape[3] % 2 ** (L - 1):
            raise ShapeError(f"spatial dims {x.shape[2:]} not divisible by 2^{L - 1}")
        skips = []
        for i, blk in enumerate(self.encoder):
            if i:
                x = maxpool2d(x, 2)
            x = blk(x, training)
            skips.append(x)
        return skips

    def g_function(self, skip: Tensor, level: int, site: str = "y") -> Tensor:
        act = _ACTIVATIONS[self.cfg.g_activation]
        return act(upsample_nearest(conv2d(skip, self.g[(level, site)]), 2 ** (level - 1)))

    def g_outputs(self, skips: list[Tensor]) -> tuple[dict, dict]:
        g_out = {l: self.g_function(skips[l - 1], l) for l in range(1, self.cfg.depth + 1)}
        g_pred = {l: self.g_function(skips[l - 1], l, site) for (l, site) in self.g if site == "pred"}
        return g_out, (g_pred or g_out)

    def f_map(self, layer: int, site: str, training: bool) -> Callable:
        bn = self.f[(layer, site)]
        return lambda z: batchnorm(z, bn, training)

    def upward(self, g_out: dict, g_pred: Optional[dict] = None, training: bool = False):
        return upward_pass(self.cfg, g_out, lambda l, s: self.f_map(l, s, training), g_pred)

    def features(self, image, training: bool = False) -> Tensor:
        """Final decoder state before the 1x1 head."""
        skips = self.encode(image, training)
        if self.cfg.decoder.uses_g:
            g_out, g_pred = self.g_outputs(skips)
            y, _ = self.upward(g_out, g_pred, training)
            return y
        y = skips[-1]
        for l in range(self.cfg.depth, 1, -1):
            y = original_decoder_step(y, skips[l - 2], self.stages[l], training)
        return y

    def forward(self, image, training: bool = False) -> Tensor:
        """Per-pixel foreground probabilities, shape (N, num_classes, H, W)."""
        return sigmoid(conv2d(self.features(image, training), self.head))

    __call__ = forward


def forward(image, cfg: UNetConfig, model: Optional[UNet] = None, training: bool = False) -> Tensor:
    model = UNet(cfg) if model is None else model
    return model.forward(image, training)
