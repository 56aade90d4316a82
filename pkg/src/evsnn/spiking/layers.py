"""Spiking layers and the network graph runtime.

A network is described declaratively as a ``NetworkSpec`` (a DAG of layer
descriptors, JSON-serializable) and instantiated as a ``Network`` holding
parameter tensors. Execution is stepwise: one (N, C, H, W) frame per
timestep, with PLIF membrane state carried between steps.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .. import autograd as ag
from ..autograd import Tensor


@dataclass(frozen=True)
class PLIFConfig:
    tau_init: float = 2.0
    v_threshold: float = 1.0
    v_reset: float = 0.0
    reset_mode: str = "hard"  # or "soft"
    alpha: float = 2.0  # surrogate width
    learnable_tau: bool = True

    def __post_init__(self):
        if self.tau_init <= 1.0:
            raise ValueError("tau_init must be > 1 for a stable leak")
        if self.v_threshold <= self.v_reset:
            raise ValueError("v_threshold must exceed v_reset")
        if self.reset_mode not in ("hard", "soft"):
            raise ValueError(f"unknown reset mode {self.reset_mode!r}")


def plif_step(state, x, config: PLIFConfig, inv_tau):
    """One membrane update: V <- V + (X - (V - v_reset)) / tau, spike on
    V >= v_threshold, then hard reset to v_reset (or soft: subtract the
    threshold). Returns (spikes, new_state).

    ``inv_tau`` is 1/tau, either a float or a scalar Tensor (learnable).
    ``state`` may be None for the first step (treated as v_reset).
    """
    if state is None:
        state = Tensor(np.full(x.data.shape, config.v_reset, dtype=x.data.dtype))
    drive = x - (state - config.v_reset)
    v = state + drive * inv_tau
    spikes = ag.heaviside_surrogate(v - config.v_threshold, config.alpha)
    if config.reset_mode == "hard":
        v_next = v * (1.0 - spikes) + spikes * config.v_reset
    else:
        v_next = v - spikes * config.v_threshold
    return spikes, v_next


class ConvLayer:
    def __init__(self, name, in_channels, out_channels, kernel, stride=1, padding=None, groups=1, bias=False, rng=None):
        self.name = name
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        self.groups = groups
        fan_in = (in_channels // groups) * kernel * kernel
        if rng is None:
            w = np.zeros((out_channels, in_channels // groups, kernel, kernel), dtype=np.float32)
        else:
            w = ag.kaiming_uniform_init((out_channels, in_channels // groups, kernel, kernel), fan_in, rng)
        self.weight = Tensor(w, requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(np.zeros(out_channels, dtype=np.float32), requires_grad=True, name=f"{name}.bias") if bias else None
        # per-input-channel constant used instead of zero padding; set by BN
        # fusion so a folded bn -> conv stays exact at the borders
        self.pad_value = None

    def __call__(self, x):
        if self.pad_value is not None and self.padding:
            p = self.padding
            n, c, h, w = x.data.shape
            data = np.empty((n, c, h + 2 * p, w + 2 * p), dtype=x.data.dtype)
            data[:] = np.asarray(self.pad_value, dtype=x.data.dtype).reshape(1, c, 1, 1)
            data[:, :, p:-p, p:-p] = x.data
            xp = Tensor.from_op(data, (x,), lambda g: x.accumulate_grad(g[:, :, p:-p, p:-p]))
            return ag.conv2d(xp, self.weight, self.bias, stride=self.stride, padding=0, groups=self.groups)
        return ag.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding, groups=self.groups)

    def out_shape(self, shape):
        c, h, w = shape
        ho = (h + 2 * self.padding - self.kernel) // self.stride + 1
        wo = (w + 2 * self.padding - self.kernel) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ValueError(f"{self.name}: spatial size {h}x{w} too small for kernel/stride")
        return (self.out_channels, ho, wo)

    def params(self):
        out = {f"{self.name}.weight": self.weight}
        if self.bias is not None:
            out[f"{self.name}.bias"] = self.bias
        return out


class BatchNormLayer:
    momentum = 0.1
    eps = 1e-5

    def __init__(self, name, channels):
        self.name = name
        self.channels = channels
        self.gamma = Tensor(np.ones(channels, dtype=np.float32), requires_grad=True, name=f"{name}.gamma")
        self.beta = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True, name=f"{name}.beta")
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self.training = True

    def __call__(self, x):
        return ag.batchnorm2d(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            training=self.training, momentum=self.momentum, eps=self.eps,
        )

    def out_shape(self, shape):
        return shape

    def params(self):
        return {f"{self.name}.gamma": self.gamma, f"{self.name}.beta": self.beta}


class PLIFLayer:
    def __init__(self, name, config: PLIFConfig):
        self.name = name
        self.config = config
        self.state = None
        if config.learnable_tau:
            # 1/tau = sigmoid(w); w chosen so tau starts at tau_init
            w0 = -math.log(config.tau_init - 1.0)
            self.w = Tensor(np.asarray([w0], dtype=np.float32), requires_grad=True, name=f"{name}.w")
        else:
            self.w = None
        self.record = None  # optional SpikeRecord hook

    def inv_tau(self):
        if self.w is not None:
            return ag.sigmoid(self.w)
        return 1.0 / self.config.tau_init

    def __call__(self, x):
        spikes, self.state = plif_step(self.state, x, self.config, self.inv_tau())
        if self.record is not None:
            self.record.add(self.name, float(spikes.data.sum()), spikes.data.size)
        return spikes

    def reset_state(self):
        self.state = None

    def out_shape(self, shape):
        return shape

    def params(self):
        return {f"{self.name}.w": self.w} if self.w is not None else {}


class MaxPoolLayer:
    def __init__(self, name, kernel, stride=None, padding=0):
        self.name = name
        self.kernel = kernel
        self.stride = stride if stride is not None else kernel
        self.padding = padding

    def __call__(self, x):
        if self.padding:
            p = self.padding
            data = x.data
            padded = ag.Tensor.from_op(
                np.pad(data, ((0, 0), (0, 0), (p, p), (p, p))),
                (x,),
                lambda g, x=x, p=p: x.accumulate_grad(g[:, :, p:-p, p:-p]),
            )
            return ag.maxpool2d(padded, self.kernel, self.stride)
        return ag.maxpool2d(x, self.kernel, self.stride)

    def out_shape(self, shape):
        c, h, w = shape
        ho = (h + 2 * self.padding - self.kernel) // self.stride + 1
        wo = (w + 2 * self.padding - self.kernel) // self.stride + 1
        return (c, ho, wo)

    def params(self):
        return {}


class ConcatLayer:
    def __init__(self, name):
        self.name = name

    def __call__(self, *xs):
        return ag.concat_channels(list(xs))

    def out_shape(self, *shapes):
        c = sum(s[0] for s in shapes)
        return (c, shapes[0][1], shapes[0][2])

    def params(self):
        return {}


class SpatialSumLayer:
    """Sum over H and W, producing (N, C) class scores per timestep."""

    def __init__(self, name):
        self.name = name

    def __call__(self, x):
        return x.sum(axis=(2, 3))

    def out_shape(self, shape):
        return (shape[0], 1, 1)

    def params(self):
        return {}


@dataclass
class NetworkSpec:
    """Declarative architecture graph; single source of truth for the
    trainer and the counting tools."""

    input_channels: int
    nodes: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    name: str = "net"

    def add(self, name, type, inputs, **params):
        self.nodes.append({"name": name, "type": type, "inputs": list(inputs), **params})
        return name

    def to_json(self, indent=2):
        return json.dumps(
            {"name": self.name, "input_channels": self.input_channels, "outputs": self.outputs, "nodes": self.nodes},
            indent=indent,
        )

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(input_channels=d["input_channels"], nodes=d["nodes"], outputs=d["outputs"], name=d.get("name", "net"))

    def node(self, name):
        for n in self.nodes:
            if n["name"] == name:
                return n
        raise KeyError(name)


class SpikeRecord:
    """Per-PLIF-layer spike and element counts, accumulated per timestep."""

    def __init__(self):
        self.spikes = {}
        self.elements = {}
        self.steps = 0

    def add(self, layer, n_spikes, n_elements):
        self.spikes[layer] = self.spikes.get(layer, 0.0) + n_spikes
        self.elements[layer] = self.elements.get(layer, 0) + n_elements

    def layer_rates(self):
        return {k: (self.spikes[k] / self.elements[k] if self.elements[k] else 0.0) for k in self.spikes}

    def global_rate(self):
        tot_e = sum(self.elements.values())
        return sum(self.spikes.values()) / tot_e if tot_e else 0.0

    def merge(self, other):
        for k in other.spikes:
            self.add(k, other.spikes[k], other.elements[k])


def _plif_config_from_node(node):
    return PLIFConfig(
        tau_init=node.get("tau_init", 2.0),
        v_threshold=node.get("v_threshold", 1.0),
        v_reset=node.get("v_reset", 0.0),
        reset_mode=node.get("reset_mode", "hard"),
        alpha=node.get("alpha", 2.0),
        learnable_tau=node.get("learnable_tau", True),
    )


class Network:
    """Runtime instantiation of a NetworkSpec."""

    def __init__(self, spec: NetworkSpec, rng=None):
        if rng is None:
            rng = np.random.default_rng(0)
        self.spec = spec
        self.layers = {}
        self.channels = {"input": spec.input_channels}
        for node in spec.nodes:
            name, typ = node["name"], node["type"]
            cin = sum(self.channels[i] for i in node["inputs"])
            if typ == "conv":
                layer = ConvLayer(
                    name, cin, node["out_channels"], node["kernel"],
                    stride=node.get("stride", 1), padding=node.get("padding"),
                    groups=cin if node.get("depthwise") else node.get("groups", 1),
                    bias=node.get("bias", False), rng=rng,
                )
                self.channels[name] = node["out_channels"]
            elif typ == "bn":
                layer = BatchNormLayer(name, cin)
                self.channels[name] = cin
            elif typ == "plif":
                layer = PLIFLayer(name, _plif_config_from_node(node))
                self.channels[name] = cin
            elif typ == "maxpool":
                layer = MaxPoolLayer(name, node["kernel"], node.get("stride"), node.get("padding", 0))
                self.channels[name] = cin
            elif typ == "concat":
                layer = ConcatLayer(name)
                self.channels[name] = cin
            elif typ == "spatial_sum":
                layer = SpatialSumLayer(name)
                self.channels[name] = cin
            else:
                raise ValueError(f"unknown layer type {typ!r}")
            self.layers[name] = layer

    # -- bookkeeping ----------------------------------------------------------

    def params(self):
        out = {}
        for node in self.spec.nodes:
            out.update(self.layers[node["name"]].params())
        return out

    def param_list(self):
        return list(self.params().values())

    def plif_layers(self):
        return [self.layers[n["name"]] for n in self.spec.nodes if n["type"] == "plif"]

    def bn_layers(self):
        return [self.layers[n["name"]] for n in self.spec.nodes if n["type"] == "bn"]

    def set_training(self, training):
        for layer in self.bn_layers():
            layer.training = training

    def reset_state(self):
        for layer in self.plif_layers():
            layer.reset_state()

    def load_params(self, arrays):
        params = self.params()
        for name, arr in arrays.items():
            if name in params:
                params[name].data = arr.reshape(params[name].data.shape).astype(np.float32)

    # -- execution ------------------------------------------------------------

    def step(self, x: Tensor):
        """One timestep through the whole graph; returns {tap: Tensor}."""
        values = {"input": x}
        for node in self.spec.nodes:
            layer = self.layers[node["name"]]
            inputs = [values[i] for i in node["inputs"]]
            values[node["name"]] = layer(*inputs)
        return {o: values[o] for o in self.spec.outputs}

    def forward(self, batch, record: SpikeRecord | None = None):
        """Run a (N, C, T, H, W) batch over all timesteps.

        Returns {tap: [Tensor per timestep]}. PLIF states are reset first.
        """
        if batch.shape[1] != self.spec.input_channels:
            raise ValueError(f"batch has {batch.shape[1]} channels, network expects {self.spec.input_channels}")
        self.reset_state()
        for layer in self.plif_layers():
            layer.record = record
        try:
            outputs = {o: [] for o in self.spec.outputs}
            for t in range(batch.shape[2]):
                frame = Tensor(np.ascontiguousarray(batch[:, :, t]))
                taps = self.step(frame)
                for o, v in taps.items():
                    outputs[o].append(v)
            if record is not None:
                record.steps += batch.shape[2]
            return outputs
        finally:
            for layer in self.plif_layers():
                layer.record = None

    def trace_shapes(self, height, width):
        """Propagate (C, H, W) shapes through the graph without executing."""
        shapes = {"input": (self.spec.input_channels, height, width)}
        for node in self.spec.nodes:
            layer = self.layers[node["name"]]
            in_shapes = [shapes[i] for i in node["inputs"]]
            if node["type"] == "concat":
                shapes[node["name"]] = layer.out_shape(*in_shapes)
            else:
                shapes[node["name"]] = layer.out_shape(in_shapes[0])
        return shapes


def run_network(net: Network, cube, record_spikes=True):
    """Classify-style helper: feed one voxel cube (or a (N,C,T,H,W) batch)
    and return (per-timestep tap outputs, SpikeRecord)."""
    data = cube.data if hasattr(cube, "data") else np.asarray(cube)
    if data.ndim == 4:
        data = data[None]
    record = SpikeRecord() if record_spikes else None
    outputs = net.forward(data.astype(np.float32), record=record)
    return outputs, record


def classifier_scores(outputs, tap="scores"):
    """Sum per-timestep (N, num_classes) head outputs over time."""
    per_t = outputs[tap]
    total = per_t[0]
    for v in per_t[1:]:
        total = total + v
    return total


def audit_spike_purity(spec: NetworkSpec, allow_dwsep=False):
    """Check that convolutions only ever see binary spike tensors or the
    immediately preceding BN output. Returns a list of violations."""
    kind = {"input": "binary"}
    violations = []
    for node in spec.nodes:
        name, typ = node["name"], node["type"]
        in_kinds = [kind[i] for i in node["inputs"]]
        if typ == "plif":
            kind[name] = "binary"
        elif typ == "bn":
            if in_kinds[0] != "binary":
                violations.append(f"{name}: bn input is {in_kinds[0]}, not spikes")
            kind[name] = "bn"
        elif typ == "conv":
            ok = in_kinds[0] in ("binary", "bn")
            if not ok and allow_dwsep and node.get("pointwise_of"):
                ok = True
            if not ok:
                violations.append(f"{name}: conv input is {in_kinds[0]}, not spikes or a preceding bn")
            kind[name] = "conv"
        elif typ in ("maxpool", "concat"):
            if all(k == "binary" for k in in_kinds):
                kind[name] = "binary"
            else:
                kind[name] = "real"
        elif typ == "spatial_sum":
            kind[name] = "real"
        else:
            kind[name] = "real"
    return violations
