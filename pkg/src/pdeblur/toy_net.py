"""Desk-scale U-Net-style encoder-decoder with PDE global layers at the
bottleneck.

Encoder blocks are conv-relu-conv-relu with 2x average-pool downsampling
between levels; the configured number of PDE layers runs sequentially at the
coarsest scale; decoder blocks upsample (nearest neighbor), concatenate the
skip connection, and apply conv-relu-conv-relu; a final 3x3 conv maps back
to image channels and is added to the input, so the net learns a residual
correction to the degraded observation. All PDE nodes share one mutable discretization so the
trainer can switch (K, dt) per epoch network-wide.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import pde_layer
from .autograd import DiscretizationBox, Graph, forward_graph
from .core import BoundaryMode, ShapeError
from .pde_layer import VelocityMode


@dataclass
class NetConfig:
    depth: int = 2
    base_channels: int = 8
    pde_layers: int = 5  # 0 = baseline without PDE nodes
    velocity_mode: VelocityMode = VelocityMode.SPATIAL
    boundary_mode: BoundaryMode = BoundaryMode.REPLICATE
    skip_connections: bool = True
    in_channels: int = 3
    input_size: tuple = (32, 32)

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.pde_layers < 0:
            raise ValueError("pde_layers must be >= 0")
        h, w = self.input_size
        if h % (1 << self.depth) or w % (1 << self.depth):
            raise ShapeError(
                f"input size {h}x{w} not divisible by 2^depth = {1 << self.depth}")

    @property
    def bottleneck_channels(self) -> int:
        return self.base_channels << (self.depth - 1)

    @property
    def bottleneck_size(self) -> tuple:
        h, w = self.input_size
        return (h >> self.depth, w >> self.depth)

    def level_channels(self, level: int) -> int:
        return self.base_channels << level

    def to_dict(self) -> dict:
        return {
            "depth": self.depth,
            "base_channels": self.base_channels,
            "pde_layers": self.pde_layers,
            "velocity_mode": self.velocity_mode.value,
            "boundary_mode": self.boundary_mode.value,
            "skip_connections": self.skip_connections,
            "in_channels": self.in_channels,
            "input_size": list(self.input_size),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(
            depth=d["depth"],
            base_channels=d["base_channels"],
            pde_layers=d["pde_layers"],
            velocity_mode=VelocityMode(d["velocity_mode"]),
            boundary_mode=BoundaryMode(d["boundary_mode"]),
            skip_connections=d["skip_connections"],
            in_channels=d["in_channels"],
            input_size=tuple(d["input_size"]),
        )


@dataclass
class Model:
    """Graph template plus its parameter dict and shared discretization."""

    config: NetConfig
    graph: Graph
    params: dict
    disc_box: DiscretizationBox
    seed: int = 0

    def set_discretization(self, disc: pde_layer.Discretization) -> None:
        self.disc_box.disc = disc


def _conv_init(rng, c_in: int, c_out: int):
    # Xavier-uniform over the 3x3 receptive field
    bound = np.sqrt(6.0 / ((c_in + c_out) * 9))
    w = rng.uniform(-bound, bound, (c_out, c_in, 3, 3))
    return w, np.zeros(c_out)


def build(config: NetConfig, seed: int = 0) -> Model:
    """Deterministic graph + parameters for the given configuration.

    Convolution parameters are drawn first from one stream, so nets that
    differ only in `pde_layers` share identical conv initializations.
    """
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    graph = Graph()

    def conv(name, parent, c_in, c_out):
        w, b = _conv_init(rng, c_in, c_out)
        params[f"{name}.w"] = w
        params[f"{name}.b"] = b
        return graph.add("conv2d", [parent], w=f"{name}.w", b=f"{name}.b")

    def conv_block(name, parent, c_in, c_out):
        x = conv(f"{name}.conv1", parent, c_in, c_out)
        x = graph.add("relu", [x])
        x = conv(f"{name}.conv2", x, c_out, c_out)
        return graph.add("relu", [x])

    node = graph.input("image")
    skips = []
    c_prev = config.in_channels
    for level in range(config.depth):
        ch = config.level_channels(level)
        node = conv_block(f"enc{level}", node, c_prev, ch)
        skips.append((node, ch))
        node = graph.add("downsample2x", [node])
        c_prev = ch

    disc_box = DiscretizationBox(pde_layer.Discretization(delta_t=1.0, k=1))
    bh, bw = config.bottleneck_size
    for i in range(config.pde_layers):
        prefix = f"pde{i}"
        lp = pde_layer.init_params(c_prev, bh, bw, mode=config.velocity_mode,
                                   seed=seed + 1 + i)
        for pname, arr in lp.arrays().items():
            params[f"{prefix}.{pname}"] = arr
        node = graph.add("pde_layer", [node], prefix=prefix,
                         velocity_mode=config.velocity_mode,
                         mode=config.boundary_mode, disc_box=disc_box)

    for level in range(config.depth - 1, -1, -1):
        ch = config.level_channels(level)
        node = graph.add("upsample2x", [node])
        c_in = c_prev
        if config.skip_connections:
            skip_node, skip_ch = skips[level]
            node = graph.add("concat_channels", [node, skip_node])
            c_in += skip_ch
        node = conv_block(f"dec{level}", node, c_in, ch)
        c_prev = ch

    node = conv("final", node, c_prev, config.in_channels)
    # global residual: the net predicts a correction to the degraded input
    image_node = graph.nodes[0]
    graph.add("add", [node, image_node])
    return Model(config=config, graph=graph, params=params,
                 disc_box=disc_box, seed=seed)


def predict(model: Model, image: np.ndarray, clamp: bool = True) -> np.ndarray:
    """Restore a batch of images; clamps to [0, 1] at evaluation only."""
    out = forward_graph(model.graph, model.params, {"image": image})
    return np.clip(out, 0.0, 1.0) if clamp else out


def param_count(model: Model) -> int:
    return sum(int(a.size) for a in model.params.values())
