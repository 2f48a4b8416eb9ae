"""Minimal reverse-mode differentiation over the toy network's op set.

Graphs are static DAGs built append-only (parents must already be in the
graph, so cycles cannot form). Parameters live in a flat name -> array dict
shared by the graph's nodes; the PDE layer participates as a single custom
differentiable node that delegates to its analytic adjoint.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import metrics, pde_layer
from .core import BoundaryMode, ShapeError

OPS = ("input", "conv2d", "relu", "add", "downsample2x", "upsample2x",
       "concat_channels", "pde_layer", "scale")


class DiscretizationBox:
    """Mutable holder so the trainer can swap (K, dt) on live graphs."""

    def __init__(self, disc: pde_layer.Discretization):
        self.disc = disc


class Node:
    __slots__ = ("id", "op", "parents", "payload", "output", "trace")

    def __init__(self, node_id, op, parents, payload):
        self.id = node_id
        self.op = op
        self.parents = tuple(parents)
        self.payload = payload
        self.output = None
        self.trace = None

    def __repr__(self):
        return f"Node({self.id}, {self.op})"


class Graph:
    def __init__(self):
        self.nodes: list[Node] = []

    def add(self, op, parents=(), **payload) -> Node:
        if op not in OPS:
            raise ValueError(f"unknown op {op!r}")
        for p in parents:
            if not isinstance(p, Node) or p.id >= len(self.nodes) or self.nodes[p.id] is not p:
                raise ValueError("parents must already belong to this graph")
        node = Node(len(self.nodes), op, parents, payload)
        self.nodes.append(node)
        return node

    def input(self, name: str) -> Node:
        return self.add("input", name=name)

    @property
    def output_node(self) -> Node:
        return self.nodes[-1]

    def nodes_by_op(self, op: str):
        return [n for n in self.nodes if n.op == op]


@dataclass
class GradientStore:
    """Accumulated gradients keyed by node id and by parameter name."""

    by_node: dict = field(default_factory=dict)
    by_param: dict = field(default_factory=dict)

    def add_param(self, name, grad):
        if name in self.by_param:
            self.by_param[name] = self.by_param[name] + grad
        else:
            self.by_param[name] = grad


def _pad_replicate(x):
    return np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="edge")


def _unpad_adjoint(g):
    """Adjoint of 1-pixel replicate padding: fold border grads onto edges."""
    out = g[:, :, 1:-1, 1:-1].copy()
    out[:, :, 0, :] += g[:, :, 0, 1:-1]
    out[:, :, -1, :] += g[:, :, -1, 1:-1]
    out[:, :, :, 0] += g[:, :, 1:-1, 0]
    out[:, :, :, -1] += g[:, :, 1:-1, -1]
    out[:, :, 0, 0] += g[:, :, 0, 0]
    out[:, :, 0, -1] += g[:, :, 0, -1]
    out[:, :, -1, 0] += g[:, :, -1, 0]
    out[:, :, -1, -1] += g[:, :, -1, -1]
    return out


def conv2d_forward(x, w, b):
    """3x3 convolution, stride 1, replicate padding, per-channel bias."""
    bsz, cin, h, wd = x.shape
    if w.shape[1] != cin or w.shape[2:] != (3, 3):
        raise ShapeError(f"kernel {w.shape} incompatible with input {x.shape}")
    xp = _pad_replicate(x)
    out = np.broadcast_to(b[None, :, None, None], (bsz, w.shape[0], h, wd)).copy()
    for dy in range(3):
        for dx in range(3):
            patch = xp[:, :, dy:dy + h, dx:dx + wd]
            out += np.moveaxis(np.tensordot(patch, w[:, :, dy, dx], axes=([1], [1])), 3, 1)
    return out


def conv2d_backward(g, x, w):
    bsz, cin, h, wd = x.shape
    xp = _pad_replicate(x)
    g_b = g.sum(axis=(0, 2, 3))
    g_w = np.empty_like(w)
    g_xp = np.zeros_like(xp)
    for dy in range(3):
        for dx in range(3):
            patch = xp[:, :, dy:dy + h, dx:dx + wd]
            g_w[:, :, dy, dx] = np.tensordot(g, patch, axes=([0, 2, 3], [0, 2, 3]))
            g_xp[:, :, dy:dy + h, dx:dx + wd] += np.moveaxis(
                np.tensordot(g, w[:, :, dy, dx], axes=([1], [0])), 3, 1)
    return _unpad_adjoint(g_xp), g_w, g_b


def _assemble_pde_params(params: dict, node: Node) -> pde_layer.PdeLayerParams:
    prefix = node.payload["prefix"]
    return pde_layer.PdeLayerParams(
        u=params[f"{prefix}.u"],
        v=params[f"{prefix}.v"],
        dx_raw=params[f"{prefix}.dx_raw"],
        dy_raw=params[f"{prefix}.dy_raw"],
        source_scale=params[f"{prefix}.source_scale"],
        source_bias=params[f"{prefix}.source_bias"],
        velocity_mode=node.payload["velocity_mode"],
    )


def forward_graph(graph: Graph, params: dict, inputs: dict,
                  counter: "metrics.MacCounter | None" = None) -> np.ndarray:
    """Populate every node's cached output; returns the last node's output."""
    for node in graph.nodes:
        p = [q.output for q in node.parents]
        op = node.op
        if op == "input":
            name = node.payload["name"]
            if name not in inputs:
                raise KeyError(f"missing graph input {name!r}")
            node.output = np.asarray(inputs[name], dtype=np.float64)
        elif op == "conv2d":
            w = params[node.payload["w"]]
            node.output = conv2d_forward(p[0], w, params[node.payload["b"]])
            if counter is not None:
                counter.add("conv", metrics.conv2d_macs(p[0].shape, w.shape[0]))
        elif op == "relu":
            node.output = np.maximum(p[0], 0.0)
        elif op == "add":
            if p[0].shape != p[1].shape:
                raise ShapeError(f"add: {p[0].shape} vs {p[1].shape}")
            node.output = p[0] + p[1]
        elif op == "scale":
            node.output = node.payload["factor"] * p[0]
        elif op == "downsample2x":
            b, c, h, w_ = p[0].shape
            if h % 2 or w_ % 2:
                raise ShapeError(f"downsample2x needs even spatial size, got {h}x{w_}")
            node.output = p[0].reshape(b, c, h // 2, 2, w_ // 2, 2).mean(axis=(3, 5))
        elif op == "upsample2x":
            node.output = np.repeat(np.repeat(p[0], 2, axis=2), 2, axis=3)
        elif op == "concat_channels":
            node.output = np.concatenate(p, axis=1)
        elif op == "pde_layer":
            lp = _assemble_pde_params(params, node)
            disc = node.payload["disc_box"].disc
            node.output, node.trace = pde_layer.forward(
                p[0], lp, disc, node.payload["mode"], counter=counter)
        else:  # pragma: no cover
            raise ValueError(f"unknown op {op!r}")
    return graph.output_node.output


def backward_graph(graph: Graph, params: dict, loss_grad: np.ndarray) -> GradientStore:
    """Reverse sweep from the output node; fan-out gradients sum."""
    out_node = graph.output_node
    if out_node.output is None:
        raise RuntimeError("forward_graph must run before backward_graph")
    if loss_grad.shape != out_node.output.shape:
        raise ShapeError("loss gradient shape must match the graph output")

    store = GradientStore()
    grads = {out_node.id: np.asarray(loss_grad, dtype=np.float64)}
    for node in reversed(graph.nodes):
        g = grads.pop(node.id, None)
        if g is None:
            continue
        store.by_node[node.id] = g
        p = [q.output for q in node.parents]
        op = node.op
        if op == "input":
            continue
        if node.parents and any(q.output is None for q in node.parents):
            raise RuntimeError("missing cached output; rerun forward_graph")

        if op == "conv2d":
            g_x, g_w, g_b = conv2d_backward(g, p[0], params[node.payload["w"]])
            store.add_param(node.payload["w"], g_w)
            store.add_param(node.payload["b"], g_b)
            parent_grads = [g_x]
        elif op == "relu":
            parent_grads = [g * (p[0] > 0.0)]
        elif op == "add":
            parent_grads = [g, g]
        elif op == "scale":
            parent_grads = [node.payload["factor"] * g]
        elif op == "downsample2x":
            parent_grads = [np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) / 4.0]
        elif op == "upsample2x":
            b, c, h, w_ = g.shape
            parent_grads = [g.reshape(b, c, h // 2, 2, w_ // 2, 2).sum(axis=(3, 5))]
        elif op == "concat_channels":
            parent_grads = []
            off = 0
            for q in node.parents:
                nch = q.output.shape[1]
                parent_grads.append(g[:, off:off + nch])
                off += nch
        elif op == "pde_layer":
            if node.trace is None:
                raise RuntimeError("missing PDE trace; rerun forward_graph")
            g_in, lg = pde_layer.backward(node.trace, g)
            prefix = node.payload["prefix"]
            for name, arr in lg.arrays().items():
                store.add_param(f"{prefix}.{name}", arr)
            parent_grads = [g_in]
        else:  # pragma: no cover
            raise ValueError(f"unknown op {op!r}")

        for q, pg in zip(node.parents, parent_grads):
            if q.id in grads:
                grads[q.id] = grads[q.id] + pg
            else:
                grads[q.id] = pg
    return store


def relu_inputs_near_zero(graph: Graph, margin: float) -> bool:
    """True when any relu sees a pre-activation within `margin` of zero,
    i.e. the finite-difference probe would straddle the kink."""
    for node in graph.nodes_by_op("relu"):
        x = node.parents[0].output
        if x is not None and np.any(np.abs(x) < margin):
            return True
    return False


@dataclass
class GradCheckReport:
    passed: bool
    worst_rel_err: float
    per_param: dict
    failures: list
    tolerance: float
    epsilon: float
    relu_warning: bool = False

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        lines = [f"gradcheck {status}: worst relative error {self.worst_rel_err:.3e} "
                 f"(tolerance {self.tolerance:g}, step {self.epsilon:g})"]
        for name in self.failures:
            lines.append(f"  FAIL {name}: rel err {self.per_param[name]:.3e}")
        if self.relu_warning:
            lines.append("  warning: relu input near zero; consider resampling")
        return "\n".join(lines)


ABS_GRAD_FLOOR = 1e-8  # absolute slack for near-zero gradients


def _rel_err(analytic: float, fd: float) -> float:
    denom = max(abs(analytic), abs(fd))
    return abs(analytic - fd) / denom if denom > ABS_GRAD_FLOOR else 0.0


def grad_check(graph: Graph, params: dict, inputs: dict,
               epsilon: float = 1e-6, tolerance: float = 1e-5,
               check_inputs: bool = True, seed: int = 0) -> GradCheckReport:
    """Compare the analytic backward pass against central finite differences.

    The scalar probe loss is sum(r * output) for a fixed random r, which
    exercises every output entry without cancellation. Every parameter entry
    (and optionally every input entry) is perturbed independently.
    """
    out = forward_graph(graph, params, inputs)
    rng = np.random.default_rng(seed)
    r = rng.uniform(0.5, 1.5, out.shape)
    relu_warning = relu_inputs_near_zero(graph, 10.0 * epsilon)
    store = backward_graph(graph, params, r)

    def loss(pars, ins):
        return float(np.sum(r * forward_graph(graph, pars, ins)))

    per_param: dict[str, float] = {}

    def check_array(label, arr, analytic, mutate):
        worst = 0.0
        flat = arr.reshape(-1)
        ana = np.asarray(analytic).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            lp = mutate()
            flat[i] = orig - epsilon
            lm = mutate()
            flat[i] = orig
            fd = (lp - lm) / (2.0 * epsilon)
            # central differences carry irreducible rounding noise of about
            # eps_machine * |loss| / step; differences below that bound are
            # indistinguishable from an exact gradient
            fd_noise = 4.0 * np.finfo(np.float64).eps * max(abs(lp), abs(lm)) / (2.0 * epsilon)
            if abs(float(ana[i]) - fd) > fd_noise:
                worst = max(worst, _rel_err(float(ana[i]), fd))
        per_param[label] = worst

    for name in sorted(params):
        analytic = store.by_param.get(name, np.zeros_like(params[name]))
        check_array(name, params[name], analytic, lambda: loss(params, inputs))
    if check_inputs:
        for name in sorted(inputs):
            node = next(n for n in graph.nodes_by_op("input")
                        if n.payload["name"] == name)
            analytic = store.by_node.get(node.id, np.zeros_like(inputs[name]))
            check_array(f"input:{name}", np.asarray(inputs[name]), analytic,
                        lambda: loss(params, inputs))

    # restore cached outputs for the unperturbed point
    forward_graph(graph, params, inputs)
    failures = [k for k, v in per_param.items() if v > tolerance]
    worst = max(per_param.values()) if per_param else 0.0
    return GradCheckReport(passed=not failures, worst_rel_err=worst,
                           per_param=per_param, failures=failures,
                           tolerance=tolerance, epsilon=epsilon,
                           relu_warning=relu_warning)
