"""Static parameter and multiply-accumulate counts for a :class:`UNetConfig`.

Counts come from closed forms over the configuration alone; they never
look at a constructed network.  Conventions:

* conv: ``K*K*C_in*C_out (+C_out bias)`` params and ``K*K*C_in*C_out*H_out*W_out`` MACs
* affine batch norm: ``2*C`` params; affine-free batch norm: 0
* pooling, upsampling, activations, normalization: 0 MACs
* elementwise adds/subtracts on the upward path go in a separate column
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

from .network import Decoder, UNetConfig, f_sites, g_sites

SECTIONS = ("encoder", "skip_g", "upward", "head")

# adds per state element for one application of each update rule
_STEP_ADDS = {"eed": 2, "hd": 6, "lmd": 3, "skip_sum": 1}


@dataclass(frozen=True)
class CostRow:
    module: str
    section: str
    params: int
    macs: int
    elementwise: int = 0


@dataclass
class CostReport:
    rows: list[CostRow] = field(default_factory=list)
    flop_convention: str = "MAC"

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.rows)

    @property
    def total_elementwise(self) -> int:
        return sum(r.elementwise for r in self.rows)

    @property
    def total_flops(self) -> int:
        """Headline count under the report's convention (MAC or 2*MAC)."""
        return self.total_macs * (2 if self.flop_convention == "FLOP" else 1)

    def section_params(self, section: str) -> int:
        return sum(r.params for r in self.rows if r.section == section)

    def section_macs(self, section: str) -> int:
        return sum(r.macs for r in self.rows if r.section == section)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["module", "params", "macs"])
        for r in self.rows:
            w.writerow([r.module, r.params, r.macs])
        w.writerow(["total", self.total_params, self.total_macs])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "flop_convention": self.flop_convention,
            "headline_label": "GFLOPs(MAC-convention)" if self.flop_convention == "MAC" else "GFLOPs(2*MAC)",
            "totals": {
                "params": self.total_params,
                "macs": self.total_macs,
                "flops_2mac": 2 * self.total_macs,
                "headline_gflops": self.total_flops / 1e9,
                "elementwise": self.total_elementwise,
            },
            "sections": {s: {"params": self.section_params(s), "macs": self.section_macs(s)} for s in SECTIONS},
            "rows": [asdict(r) for r in self.rows],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _spatial(input_shape) -> tuple[int, int, int]:
    if isinstance(input_shape, int):
        return 1, input_shape, input_shape
    shape = tuple(input_shape)
    if len(shape) == 2:
        return 1, shape[0], shape[1]
    if len(shape) == 4:
        return shape[0], shape[2], shape[3]
    raise ValueError(f"input_shape must be int, (H, W) or (N, C, H, W); got {input_shape!r}")


def _conv(name, section, k, c_in, c_out, bias, hw):
    params = k * k * c_in * c_out + (c_out if bias else 0)
    return CostRow(name, section, params, k * k * c_in * c_out * hw)


def _block(prefix, section, c_in, c_out, hw):
    return [
        _conv(f"{prefix}.conv1", section, 3, c_in, c_out, False, hw),
        CostRow(f"{prefix}.bn1", section, 2 * c_out, 0),
        _conv(f"{prefix}.conv2", section, 3, c_out, c_out, False, hw),
        CostRow(f"{prefix}.bn2", section, 2 * c_out, 0),
    ]


def cost_report(cfg: UNetConfig, input_shape=64, convention: str = "MAC") -> CostReport:
    """Per-module parameter and MAC rows for ``cfg`` at ``input_shape``."""
    if convention not in ("MAC", "FLOP"):
        raise ValueError("convention must be 'MAC' or 'FLOP'")
    n, h, w = _spatial(input_shape)
    L = cfg.depth
    if h % 2 ** (L - 1) or w % 2 ** (L - 1):
        raise ValueError(f"input {h}x{w} not divisible by 2^{L - 1}")
    chans = cfg.encoder_channels

    def hw(level):  # pixels at encoder level l (1-based)
        return (h >> (level - 1)) * (w >> (level - 1)) * n

    rows: list[CostRow] = []
    c_prev = cfg.input_channels
    for l, c in enumerate(chans, 1):
        rows += _block(f"enc{l}", "encoder", c_prev, c, hw(l))
        c_prev = c

    cy = cfg.y_channels
    for level, site in g_sites(cfg):
        rows.append(_conv(f"g{level}.{site}", "skip_g", 3, chans[level - 1], cy, True, hw(level)))

    if cfg.decoder.uses_g:
        state = cy * hw(1)
        for layer, site in f_sites(cfg):
            rows.append(CostRow(f"f{layer}.{site}", "upward", 0, 0))
        for layer in range(L, 0, -1):
            rule = _rule(cfg.decoder, layer, L)
            rows.append(CostRow(f"step{layer}.{rule}", "upward", 0, 0, _STEP_ADDS[rule] * state))
        head_in = cy
    else:
        thin = cfg.decoder is Decoder.THIN_ORIGINAL
        width_in = chans[-1]
        for l in range(L, 1, -1):
            skip_c = chans[l - 2]
            width = cfg.thin_channels if thin else skip_c
            rows.append(_conv(f"dec{l}.reduce", "upward", 1, width_in, width, True, hw(l)))
            rows += _block(f"dec{l}", "upward", width + skip_c, width, hw(l - 1))
            width_in = width
        head_in = width_in
    rows.append(_conv("head", "head", 1, head_in, cfg.num_classes, True, hw(1)))
    return CostReport(rows, convention)


def _rule(kind: Decoder, layer: int, depth: int) -> str:
    if kind is Decoder.SKIP_SUM:
        return "skip_sum"
    if kind is Decoder.HD and layer >= 2:
        return "hd"
    if kind is Decoder.LMD and layer < depth:
        return "lmd"
    return "eed"


def count_params(cfg: UNetConfig) -> CostReport:
    """Parameter rows (MACs evaluated at the smallest admissible input)."""
    return cost_report(cfg, 2 ** (cfg.depth - 1))


def count_macs(cfg: UNetConfig, input_shape=64, convention: str = "MAC") -> CostReport:
    return cost_report(cfg, input_shape, convention)


def reduction(a: float, b: float) -> float:
    """Percentage saved going from ``a`` to ``b``."""
    return (1.0 - b / a) * 100.0


def compare(cfg_a: UNetConfig, cfg_b: UNetConfig, input_shape=64) -> dict:
    ra, rb = cost_report(cfg_a, input_shape), cost_report(cfg_b, input_shape)
    return {
        "a": {"decoder": cfg_a.decoder.value, "params": ra.total_params, "macs": ra.total_macs},
        "b": {"decoder": cfg_b.decoder.value, "params": rb.total_params, "macs": rb.total_macs},
        "params_reduction_pct": reduction(ra.total_params, rb.total_params),
        "macs_reduction_pct": reduction(ra.total_macs, rb.total_macs),
    }
