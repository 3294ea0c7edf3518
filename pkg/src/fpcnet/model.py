"""Network assembly: encoder blocks, multi-dilation module, SE-upsampling
decoder, prediction head, plus parameter initialization.

Layer naming (= checkpoint tensor names):
  enc{i}.conv{1,2}.{weight,bias}     two padded 3x3 convs + ReLU per stage
  md.dil{j}.{weight,bias}            dilated 3x3 branches, j in config order
  md.global.{weight,bias}            1x1 conv on the pooled global vector
  md.fuse.{weight,bias}              1x1 fusion of the 6-way concat
  seu{i}.up.{weight,bias}            2x2 stride-2 transposed conv
  seu{i}.squeeze.{weight,bias}       bottleneck FC (ratio * C)
  seu{i}.excite.{weight,bias}        expansion FC back to C
  head.{weight,bias}                 1x1 conv to one logit channel
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import tape as T
from . import tensor
from .checkpoint import ParamStore
from .config import NetworkConfig
from .errors import ShapeError
from .ops import same_padding
from .tape import GradTape, Node


def parameter_plan(config: NetworkConfig) -> list[tuple[str, tuple[int, ...], int | None]]:
    """Ordered (name, shape, fan_in) triples; fan_in None means zero init."""
    plan: list[tuple[str, tuple[int, ...], int | None]] = []

    def conv(name, out_c, in_c, k):
        plan.append((f"{name}.weight", (out_c, in_c, k, k), in_c * k * k))
        plan.append((f"{name}.bias", (out_c,), None))

    def fc(name, out_c, in_c):
        plan.append((f"{name}.weight", (out_c, in_c), in_c))
        plan.append((f"{name}.bias", (out_c,), None))

    in_c = config.input_channels
    for i, out_c in enumerate(config.encoder_channels, start=1):
        conv(f"enc{i}.conv1", out_c, in_c, 3)
        conv(f"enc{i}.conv2", out_c, out_c, 3)
        in_c = out_c

    c = config.encoder_channels[-1]
    for j in range(1, len(config.dilation_rates) + 1):
        conv(f"md.dil{j}", c, c, 3)
    conv("md.global", c, c, 1)
    concat_c = (len(config.dilation_rates) + 2) * c
    conv("md.fuse", config.md_output_channels, concat_c, 1)

    c_in = config.md_output_channels
    for i, c_out in enumerate(config.decoder_channels, start=1):
        plan.append((f"seu{i}.up.weight", (c_in, c_out, 2, 2), c_in * 4))
        if config.transposed_conv_bias:
            plan.append((f"seu{i}.up.bias", (c_out,), None))
        bottleneck = config.se_bottleneck(c_out)
        fc(f"seu{i}.squeeze", bottleneck, c_out)
        fc(f"seu{i}.excite", c_out, bottleneck)
        c_in = c_out

    conv("head", 1, config.decoder_channels[-1], 1)
    return plan


def init_parameters(config: NetworkConfig, rng: tensor.Rng) -> ParamStore:
    """He-normal weights (std = sqrt(2 / fan_in)), zero biases."""
    tensors: dict[str, np.ndarray] = {}
    for name, shape, fan_in in parameter_plan(config):
        if fan_in is None:
            tensors[name] = tensor.zeros(shape)
        else:
            tensors[name] = tensor.randn(shape, 0.0, math.sqrt(2.0 / fan_in), rng)
    return ParamStore(config, tensors)


@dataclass
class MDModule:
    """Dilated branches + global branch + identity, fused by a 1x1 conv."""

    rates: tuple[int, ...]
    dilated: list[tuple[Node, Node]]        # (weight, bias) per rate
    global_conv: tuple[Node, Node]
    fuse: tuple[Node, Node]


@dataclass
class SEUModule:
    """Transposed-conv upsample, lateral add, squeeze/excite channel weights."""

    up_weight: Node
    up_bias: Node | None
    squeeze: tuple[Node, Node]
    excite: tuple[Node, Node]


def encoder_forward(
    tp: GradTape | None, x: Node, blocks: list[tuple[tuple[Node, Node], tuple[Node, Node]]]
) -> tuple[list[Node], Node]:
    """Runs the conv stages; returns (pre-pool features per stage, pooled bottom)."""
    n, _, h, w = x.value.shape
    divisor = 2 ** len(blocks)
    if h % divisor or w % divisor:
        raise ShapeError(f"input {h}x{w} must be divisible by {divisor}")
    laterals: list[Node] = []
    cur = x
    for (w1, b1), (w2, b2) in blocks:
        cur = T.relu(tp, T.conv2d(tp, cur, w1, b1, padding=1))
        cur = T.relu(tp, T.conv2d(tp, cur, w2, b2, padding=1))
        laterals.append(cur)
        cur = T.maxpool2x2(tp, cur)
    return laterals, cur


def md_forward(tp: GradTape | None, x: Node, module: MDModule) -> Node:
    hw = x.value.shape[2:]
    branches: list[Node] = []
    for rate, (w, b) in zip(module.rates, module.dilated):
        branch = T.conv2d(tp, x, w, b, dilation=rate, padding=same_padding(3, rate))
        assert branch.value.shape[2:] == hw, "dilated branch must preserve resolution"
        branches.append(branch)
    gw, gb = module.global_conv
    pooled = T.conv2d(tp, T.global_avg_pool(tp, x), gw, gb)
    branches.append(T.broadcast_hw(tp, pooled, hw))
    branches.append(x)   # identity branch keeps the raw input features
    fused_in = T.concat_channels(tp, branches)
    fw, fb = module.fuse
    return T.conv2d(tp, fused_in, fw, fb)


def seu_forward(tp: GradTape | None, md: Node, mc_lateral: Node, module: SEUModule) -> Node:
    up = T.transposed_conv2d(tp, md, module.up_weight, module.up_bias)
    if up.value.shape != mc_lateral.value.shape:
        raise ShapeError(
            f"lateral features {mc_lateral.value.shape} do not match upsampled {up.value.shape}"
        )
    added = T.add(tp, up, mc_lateral)
    n, c = added.value.shape[:2]
    vec = T.reshape(tp, T.global_avg_pool(tp, added), (n, c))
    sw, sb = module.squeeze
    ew, eb = module.excite
    hidden = T.relu(tp, T.fully_connected(tp, vec, sw, sb))
    weights = T.sigmoid(tp, T.fully_connected(tp, hidden, ew, eb))
    return T.scale_channels(tp, added, T.reshape(tp, weights, (n, c, 1, 1)))


class FPCNet:
    """Encoder -> multi-dilation context module -> SEU decoder -> sigmoid head."""

    def __init__(self, config: NetworkConfig, store: ParamStore):
        if store.config != config:
            raise ShapeError("parameter store was built for a different config")
        self.config = config
        self.store = store

    @classmethod
    def initialized(cls, config: NetworkConfig, rng: tensor.Rng) -> "FPCNet":
        return cls(config, init_parameters(config, rng))

    def parameter_nodes(self) -> dict[str, Node]:
        return {name: Node(value) for name, value in self.store.tensors.items()}

    # assembly of per-module views over the flat node dict

    def _blocks(self, p: dict[str, Node]):
        return [
            (
                (p[f"enc{i}.conv1.weight"], p[f"enc{i}.conv1.bias"]),
                (p[f"enc{i}.conv2.weight"], p[f"enc{i}.conv2.bias"]),
            )
            for i in range(1, self.config.num_blocks + 1)
        ]

    def _md(self, p: dict[str, Node]) -> MDModule:
        rates = self.config.dilation_rates
        return MDModule(
            rates=rates,
            dilated=[(p[f"md.dil{j}.weight"], p[f"md.dil{j}.bias"])
                     for j in range(1, len(rates) + 1)],
            global_conv=(p["md.global.weight"], p["md.global.bias"]),
            fuse=(p["md.fuse.weight"], p["md.fuse.bias"]),
        )

    def _seu(self, p: dict[str, Node], i: int) -> SEUModule:
        return SEUModule(
            up_weight=p[f"seu{i}.up.weight"],
            up_bias=p.get(f"seu{i}.up.bias"),
            squeeze=(p[f"seu{i}.squeeze.weight"], p[f"seu{i}.squeeze.bias"]),
            excite=(p[f"seu{i}.excite.weight"], p[f"seu{i}.excite.bias"]),
        )

    def forward_nodes(self, tp: GradTape | None, x: Node, p: dict[str, Node]) -> Node:
        if x.value.ndim != 4 or x.value.shape[1] != self.config.input_channels:
            raise ShapeError(
                f"expected [N, {self.config.input_channels}, H, W], got {x.value.shape}"
            )
        laterals, bottom = encoder_forward(tp, x, self._blocks(p))
        feat = md_forward(tp, bottom, self._md(p))
        for i in range(1, self.config.num_blocks + 1):
            feat = seu_forward(tp, feat, laterals[-i], self._seu(p, i))
        logits = T.conv2d(tp, feat, p["head.weight"], p["head.bias"])
        return T.sigmoid(tp, logits)

    def forward(self, image: np.ndarray) -> np.ndarray:
        """Inference: probability map in (0, 1) with the input's H and W."""
        return self.forward_nodes(None, Node(image), self.parameter_nodes()).value

    def forward_stages(self, image: np.ndarray) -> tuple[np.ndarray, dict[str, float]]:
        """Inference with wall-clock seconds per stage, for benchmarking."""
        p = self.parameter_nodes()
        times: dict[str, float] = {}
        t0 = time.perf_counter()
        laterals, bottom = encoder_forward(None, Node(image), self._blocks(p))
        t1 = time.perf_counter()
        feat = md_forward(None, bottom, self._md(p))
        t2 = time.perf_counter()
        for i in range(1, self.config.num_blocks + 1):
            feat = seu_forward(None, feat, laterals[-i], self._seu(p, i))
        prob = T.sigmoid(None, T.conv2d(None, feat, p["head.weight"], p["head.bias"]))
        t3 = time.perf_counter()
        times["encoder"] = t1 - t0
        times["md"] = t2 - t1
        times["decoder"] = t3 - t2
        return prob.value, times


def fpcnet_forward(model: FPCNet, image: np.ndarray) -> np.ndarray:
    return model.forward(image)
