"""Declarative layer DAG with reverse-mode differentiation.

A network is an ordered list of :class:`LayerSpec`. Each spec names its
sources, which must appear earlier in the list. The plain-text form, one
layer per line, is::

    <id> <kind> [key=value ...] [<- src1,src2]

and is what checkpoints store next to the parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from ..sparse_conv import MaskedTensor, SparseConvKernel, sparse_conv2d_backward, sparse_conv2d_forward
from . import ops

KINDS = {
    "input": {"channels": int, "scale": float, "sparse": int},
    "conv": {"k": int, "s": int, "out": int, "mask": int},
    "sparseconv": {"k": int, "s": int, "out": int},
    "tconv": {"k": int, "s": int, "out": int},
    "maxpool": {"k": int, "s": int},
    "relu": {},
    "batchnorm": {"enabled": int},
    "concat": {},
    "regression_head": {"k": int, "scale": float},
    "softmax_head": {"k": int, "classes": int},
}
DEFAULTS = {"k": 3, "s": 1, "scale": 1.0, "sparse": 0, "mask": 0, "enabled": 1}
CONV_KINDS = ("conv", "sparseconv")
HEAD_KINDS = ("regression_head", "softmax_head")


class GraphError(ValueError):
    """Invalid architecture: bad DAG, shape or resolution mismatch, or a forbidden layer order."""


class GraphInputError(ValueError):
    """Missing or malformed network input."""


class GraphStateError(RuntimeError):
    """Operation called in the wrong order (e.g. backward before forward)."""


@dataclass
class LayerSpec:
    id: str
    kind: str
    inputs: tuple[str, ...] = ()
    attrs: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise GraphError(f"layer {self.id!r}: unknown kind {self.kind!r}")
        allowed = KINDS[self.kind]
        unknown = set(self.attrs) - set(allowed)
        if unknown:
            raise GraphError(f"layer {self.id!r}: unknown attributes {sorted(unknown)} for {self.kind}")
        self.attrs = {k: allowed[k](v) for k, v in self.attrs.items()}
        self.inputs = tuple(self.inputs)

    def __getitem__(self, key):
        if key in self.attrs:
            return self.attrs[key]
        if key in DEFAULTS:
            return DEFAULTS[key]
        raise GraphError(f"layer {self.id!r} ({self.kind}) needs attribute {key!r}")

    def to_line(self) -> str:
        parts = [self.id, self.kind] + [f"{k}={v}" for k, v in self.attrs.items()]
        if self.inputs:
            parts += ["<-", ",".join(self.inputs)]
        return " ".join(parts)

    @classmethod
    def from_line(cls, line: str) -> "LayerSpec":
        head, _, srcs = line.partition("<-")
        tokens = head.split()
        if len(tokens) < 2:
            raise GraphError(f"cannot parse layer line {line!r}")
        attrs = {}
        for tok in tokens[2:]:
            key, sep, value = tok.partition("=")
            if not sep:
                raise GraphError(f"expected key=value in {line!r}, got {tok!r}")
            attrs[key] = float(value) if "." in value or "e" in value.lower() else int(value)
        inputs = tuple(s.strip() for s in srcs.split(",") if s.strip())
        return cls(tokens[0], tokens[1], inputs, attrs)


def specs_to_text(specs) -> str:
    return "\n".join(s.to_line() for s in specs) + "\n"


def specs_from_text(text: str) -> list[LayerSpec]:
    return [LayerSpec.from_line(line) for line in text.splitlines()
            if line.strip() and not line.lstrip().startswith("#")]


# ---------------------------------------------------------------------------
# nodes


class _Node:
    """One executable layer. ``forward`` maps [(features, mask)] to (features, mask)."""

    params: tuple[str, ...] = ()

    def __init__(self, spec: LayerSpec, in_channels: list[int]):
        self.spec = spec
        self.in_channels = in_channels

    def init(self, store, rng, dtype):
        pass

    def out_channels(self) -> int:
        return self.in_channels[0]

    def factor(self, in_factors) -> Fraction:
        return in_factors[0]

    def name(self, p):
        return f"{self.spec.id}.{p}"


def _he(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class _Input(_Node):
    def out_channels(self):
        return self.spec["channels"]

    def factor(self, in_factors):
        return Fraction(1)


class _Conv(_Node):
    params = ("weight", "bias")

    def __init__(self, spec, in_channels):
        super().__init__(spec, in_channels)
        self.k, self.s, self.out = spec["k"], spec["s"], spec["out"]
        self.cin = in_channels[0] + (1 if spec.kind == "conv" and spec["mask"] else 0)
        if self.k % 2 == 0:
            raise GraphError(f"layer {spec.id!r}: kernel size must be odd, got {self.k}")

    def init(self, store, rng, dtype):
        store[self.name("weight")] = _he(rng, (self.out, self.cin, self.k, self.k), self.cin * self.k**2, dtype)
        store[self.name("bias")] = np.zeros(self.out, dtype=dtype)

    def out_channels(self):
        return self.out

    def factor(self, in_factors):
        return in_factors[0] * self.s

    def forward(self, ins, P, train):
        x, mask = ins[0]
        use_mask = bool(self.spec["mask"])
        if use_mask:
            if mask is None:
                raise GraphError(f"layer {self.spec.id!r} concatenates a mask but its input carries none")
            x = np.concatenate([x, mask[:, None].astype(x.dtype)], axis=1)
        y, cache = ops.dense_conv2d_forward(x, P[self.name("weight")], P[self.name("bias")], self.s)
        out_mask = None
        if use_mask:
            out_mask = (ops.maxpool_forward(mask[:, None], self.k, self.s)[0][:, 0] > 0).astype(x.dtype)
        return y, out_mask, cache

    def backward(self, cache, g, P, G):
        gx, gw, gb = ops.dense_conv2d_backward(g, P[self.name("weight")], cache, self.s)
        G[self.name("weight")] = gw
        G[self.name("bias")] = gb
        if self.spec["mask"]:
            gx = gx[:, :-1]
        return [gx]


class _SparseConv(_Conv):
    def init(self, store, rng, dtype):
        # the window sum is divided by the valid count, so the effective fan-in is the channel count
        store[self.name("weight")] = _he(rng, (self.out, self.cin, self.k, self.k), self.cin, dtype)
        store[self.name("bias")] = np.zeros(self.out, dtype=dtype)

    def forward(self, ins, P, train):
        x, mask = ins[0]
        if mask is None:
            raise GraphError(f"sparse conv {self.spec.id!r} needs a masked input")
        mt = MaskedTensor(x, mask)
        kern = SparseConvKernel(P[self.name("weight")], P[self.name("bias")], self.s)
        y, cache = sparse_conv2d_forward(mt, kern)
        return y.features, y.mask, (mt, kern, cache)

    def backward(self, cache, g, P, G):
        mt, kern, conv_cache = cache
        gx, gw, gb = sparse_conv2d_backward(mt, kern, g, conv_cache)
        G[self.name("weight")] = gw
        G[self.name("bias")] = gb
        return [gx]


class _TConv(_Conv):
    def __init__(self, spec, in_channels):
        _Node.__init__(self, spec, in_channels)
        self.k, self.s, self.out = spec["k"], spec["s"], spec["out"]
        self.cin = in_channels[0]

    def init(self, store, rng, dtype):
        fan_in = self.cin * self.k**2 / self.s**2
        store[self.name("weight")] = _he(rng, (self.cin, self.out, self.k, self.k), fan_in, dtype)
        store[self.name("bias")] = np.zeros(self.out, dtype=dtype)

    def factor(self, in_factors):
        return in_factors[0] / self.s

    def forward(self, ins, P, train):
        y, cache = ops.transposed_conv2d_forward(ins[0][0], P[self.name("weight")], P[self.name("bias")], self.s)
        return y, None, cache

    def backward(self, cache, g, P, G):
        gx, gw, gb = ops.transposed_conv2d_backward(g, P[self.name("weight")], cache)
        G[self.name("weight")] = gw
        G[self.name("bias")] = gb
        return [gx]


class _MaxPool(_Node):
    def factor(self, in_factors):
        return in_factors[0] * self.spec["s"]

    def forward(self, ins, P, train):
        x, mask = ins[0]
        k, s = self.spec["k"], self.spec["s"]
        y, cache = ops.maxpool_forward(x, k, s)
        if mask is not None:
            mask = ops.maxpool_forward(mask[:, None], k, s)[0][:, 0]
        return y, mask, cache

    def backward(self, cache, g, P, G):
        return [ops.maxpool_backward(g, cache)]


class _ReLU(_Node):
    def forward(self, ins, P, train):
        y, cache = ops.relu_forward(ins[0][0])
        return y, ins[0][1], cache

    def backward(self, cache, g, P, G):
        return [ops.relu_backward(g, cache)]


class _BatchNorm(_Node):
    params = ("gamma", "beta")
    buffers = ("running_mean", "running_var")

    def init(self, store, rng, dtype):
        c = self.in_channels[0]
        store[self.name("gamma")] = np.ones(c, dtype=dtype)
        store[self.name("beta")] = np.zeros(c, dtype=dtype)

    def init_buffers(self, buffers, dtype):
        c = self.in_channels[0]
        buffers[self.name("running_mean")] = np.zeros(c, dtype=dtype)
        buffers[self.name("running_var")] = np.ones(c, dtype=dtype)

    def forward(self, ins, P, train, buffers=None):
        x, mask = ins[0]
        y, cache = ops.batchnorm_forward(
            x, P[self.name("gamma")], P[self.name("beta")],
            buffers[self.name("running_mean")], buffers[self.name("running_var")], train=train)
        return y, mask, cache

    def backward(self, cache, g, P, G):
        gx, gg, gb = ops.batchnorm_backward(g, cache)
        G[self.name("gamma")] = gg
        G[self.name("beta")] = gb
        return [gx]


class _Identity(_Node):
    """A batchnorm slot switched off."""

    def forward(self, ins, P, train):
        return ins[0][0], ins[0][1], None

    def backward(self, cache, g, P, G):
        return [g]


class _Concat(_Node):
    def out_channels(self):
        return sum(self.in_channels)

    def forward(self, ins, P, train):
        shapes = {x.shape[2:] for x, _ in ins}
        if len(shapes) != 1:
            raise GraphInputError(f"concat {self.spec.id!r} received spatial shapes {sorted(shapes)}")
        return np.concatenate([x for x, _ in ins], axis=1), None, None

    def backward(self, cache, g, P, G):
        edges = np.cumsum(self.in_channels)[:-1]
        return np.split(g, edges, axis=1)


class _RegressionHead(_Conv):
    """Conv to one channel, ReLU clamp, fixed output scale: non-negative inverse depth."""

    def __init__(self, spec, in_channels):
        _Node.__init__(self, spec, in_channels)
        self.k, self.s, self.out, self.cin = spec["k"], 1, 1, in_channels[0]

    def out_channels(self):
        return 1

    def forward(self, ins, P, train):
        z, conv_cache = ops.dense_conv2d_forward(ins[0][0], P[self.name("weight")], P[self.name("bias")], 1)
        return np.maximum(z, 0) * self.dtype_scale(z), None, (conv_cache, z > 0)

    def dtype_scale(self, z):
        return z.dtype.type(self.spec["scale"])

    def backward(self, cache, g, P, G):
        conv_cache, active = cache
        gz = g * active * self.spec["scale"]
        gx, gw, gb = ops.dense_conv2d_backward(gz, P[self.name("weight")], conv_cache, 1)
        G[self.name("weight")] = gw
        G[self.name("bias")] = gb
        return [gx]


class _SoftmaxHead(_Conv):
    """Conv to ``classes`` channels followed by softmax.

    Backward expects the gradient with respect to the logits (the fused
    softmax + cross-entropy form returned by ``objective.cross_entropy``).
    """

    def __init__(self, spec, in_channels):
        _Node.__init__(self, spec, in_channels)
        self.k, self.s, self.out, self.cin = spec["k"], 1, spec["classes"], in_channels[0]
        if self.out < 2:
            raise GraphError(f"softmax head {spec.id!r} needs classes >= 2")

    def init(self, store, rng, dtype):
        # small logits at init: the first prediction is close to uniform over classes
        super().init(store, rng, dtype)
        store[self.name("weight")] *= 0.01

    def forward(self, ins, P, train):
        z, cache = ops.dense_conv2d_forward(ins[0][0], P[self.name("weight")], P[self.name("bias")], 1)
        return ops.softmax(z), None, cache

    def backward(self, cache, g, P, G):
        gx, gw, gb = ops.dense_conv2d_backward(g, P[self.name("weight")], cache, 1)
        G[self.name("weight")] = gw
        G[self.name("bias")] = gb
        return [gx]


_NODE_TYPES = {
    "input": _Input, "conv": _Conv, "sparseconv": _SparseConv, "tconv": _TConv,
    "maxpool": _MaxPool, "relu": _ReLU, "concat": _Concat,
    "regression_head": _RegressionHead, "softmax_head": _SoftmaxHead,
}


# ---------------------------------------------------------------------------
# graph


class NetworkGraph:
    """Executable network built from an ordered list of layer specs.

    ``params`` and ``grads`` map ``"<layer>.<name>"`` to arrays; ``buffers``
    holds non-trainable state (batchnorm running statistics).
    """

    def __init__(self, specs, seed: int = 0, dtype=np.float64):
        self.specs = list(specs)
        self.dtype = np.dtype(dtype)
        self.seed = seed
        self.nodes: dict[str, _Node] = {}
        self.factors: dict[str, Fraction] = {}
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._consumers: dict[str, list[str]] = {}
        self._build()
        rng = np.random.Generator(np.random.PCG64(seed))
        for node in self.nodes.values():
            node.init(self.params, rng, self.dtype)
            if isinstance(node, _BatchNorm):
                node.init_buffers(self.buffers, self.dtype)
        self._caches = None

    # -- construction -----------------------------------------------------

    def _build(self):
        if not self.specs:
            raise GraphError("empty network")
        for spec in self.specs:
            if spec.id in self.nodes:
                raise GraphError(f"duplicate layer id {spec.id!r}")
            for src in spec.inputs:
                if src not in self.nodes:
                    raise GraphError(f"layer {spec.id!r} reads {src!r}, which is not defined before it")
            if spec.kind == "input":
                if spec.inputs:
                    raise GraphError(f"input {spec.id!r} cannot have sources")
            elif spec.kind == "concat":
                if len(spec.inputs) < 2:
                    raise GraphError(f"concat {spec.id!r} needs at least two sources")
            elif len(spec.inputs) != 1:
                raise GraphError(f"layer {spec.id!r} ({spec.kind}) takes exactly one source")
            in_ch = [self.nodes[s].out_channels() for s in spec.inputs]
            in_f = [self.factors[s] for s in spec.inputs]
            if spec.kind == "concat":
                for src, f in zip(spec.inputs[1:], in_f[1:]):
                    if f != in_f[0]:
                        raise GraphError(
                            f"concat {spec.id!r}: resolution mismatch between {spec.inputs[0]!r} "
                            f"(1/{in_f[0]}) and {src!r} (1/{f})")
            if spec.kind == "batchnorm":
                cls = _BatchNorm if spec["enabled"] else _Identity
            else:
                cls = _NODE_TYPES[spec.kind]
            node = cls(spec, in_ch)
            self.nodes[spec.id] = node
            self.factors[spec.id] = node.factor(in_f)
            self._consumers[spec.id] = []
            for src in spec.inputs:
                self._consumers[src].append(spec.id)
        consumed = {s for spec in self.specs for s in spec.inputs}
        outputs = [s.id for s in self.specs if s.id not in consumed and s.kind != "input"]
        if len(outputs) != 1:
            raise GraphError(f"network must have exactly one output layer, found {outputs}")
        self.output = outputs[0]
        self._last_use = {}
        for spec in self.specs:
            for src in spec.inputs:
                self._last_use[src] = spec.id
        if self.factors[self.output] != 1:
            raise GraphError(f"output {self.output!r} is at resolution 1/{self.factors[self.output]}, not full")
        self._check_batchnorm_rule()

    def _check_batchnorm_rule(self):
        """No active batchnorm right after the first strided conv that sees sparse depth."""
        for slot in self.sparse_slots:
            frontier = list(self._consumers[slot])
            first_convs = []
            while frontier:
                nid = frontier.pop()
                kind = self.nodes[nid].spec.kind
                if kind in CONV_KINDS:
                    first_convs.append(nid)
                elif kind in ("concat", "relu"):
                    frontier.extend(self._consumers[nid])
            for cid in first_convs:
                if self.nodes[cid].spec["s"] <= 1:
                    continue
                after = list(self._consumers[cid])
                while after:
                    nid = after.pop()
                    spec = self.nodes[nid].spec
                    if spec.kind == "batchnorm" and spec["enabled"]:
                        raise GraphError(
                            f"batchnorm {nid!r} directly follows strided conv {cid!r} on sparse input "
                            f"{slot!r}; it must be disabled")
                    if spec.kind == "relu":
                        after.extend(self._consumers[nid])

    # -- introspection ----------------------------------------------------

    @property
    def slots(self) -> list[str]:
        return [s.id for s in self.specs if s.kind == "input"]

    @property
    def sparse_slots(self) -> list[str]:
        return [s.id for s in self.specs if s.kind == "input" and s["sparse"]]

    @property
    def out_channels(self) -> int:
        return self.nodes[self.output].out_channels()

    @property
    def head_kind(self) -> str:
        return self.nodes[self.output].spec.kind

    def channels(self, layer_id: str) -> int:
        return self.nodes[layer_id].out_channels()

    def num_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def arch_text(self) -> str:
        return specs_to_text(self.specs)

    @property
    def downsampling(self) -> int:
        return int(max(f for f in self.factors.values()))

    # -- execution --------------------------------------------------------

    def _prepare_input(self, spec, value):
        if isinstance(value, MaskedTensor):
            x, mask = value.features, value.mask
        else:
            x = np.asarray(value)
            mask = None
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4 or x.shape[1] != spec["channels"]:
            raise GraphInputError(
                f"input {spec.id!r} expects (N, {spec['channels']}, H, W), got shape {x.shape}")
        x = x.astype(self.dtype, copy=False)
        if spec["sparse"]:
            if mask is None:
                mask = np.any(x > 0, axis=1)
            mask = np.asarray(mask).astype(self.dtype)
            x = x * mask[:, None]
        else:
            mask = None
        if spec["scale"] != 1.0:
            x = x * self.dtype.type(spec["scale"])
        return x, mask

    def forward(self, inputs: dict, train: bool = False, retain: bool | None = None) -> np.ndarray:
        """Run the network. ``retain`` (default: ``train``) keeps activations for backward."""
        missing = [s for s in self.slots if s not in inputs]
        if missing:
            raise GraphInputError(f"missing network inputs {missing}; expected {self.slots}")
        retain = train if retain is None else retain
        values = {}
        caches = {}
        batch = None
        for spec in self.specs:
            node = self.nodes[spec.id]
            if spec.kind == "input":
                values[spec.id] = self._prepare_input(spec, inputs[spec.id])
                n, _, h, w = values[spec.id][0].shape
                if batch is None:
                    batch = (n, h, w)
                elif batch != (n, h, w):
                    raise GraphInputError(f"input {spec.id!r} has batch/size {(n, h, w)}, expected {batch}")
                if h % self.downsampling or w % self.downsampling:
                    raise GraphInputError(
                        f"input size {(h, w)} must be divisible by the network downsampling {self.downsampling}")
                continue
            ins = [values[s] for s in spec.inputs]
            if isinstance(node, _BatchNorm):
                y, mask, cache = node.forward(ins, self.params, train, self.buffers)
            else:
                y, mask, cache = node.forward(ins, self.params, train)
            values[spec.id] = (y, mask)
            if retain:
                caches[spec.id] = cache
            else:
                # drop activations whose last consumer has run
                for src in spec.inputs:
                    if self._last_use[src] == spec.id:
                        values.pop(src, None)
        if retain:
            self._caches = caches
        return values[self.output][0]

    def backward(self, loss_grad) -> dict[str, np.ndarray]:
        """Backpropagate ``loss_grad`` (gradient w.r.t. the network output).

        For a softmax head the gradient is taken with respect to the logits.
        Returns the freshly computed gradient store.
        """
        if self._caches is None:
            raise GraphStateError("backward called without a retained forward pass")
        grads_at = {self.output: np.asarray(loss_grad, dtype=self.dtype)}
        self.grads = {name: np.zeros_like(p) for name, p in self.params.items()}
        for spec in reversed(self.specs):
            if spec.kind == "input" or spec.id not in grads_at:
                continue
            g = grads_at.pop(spec.id)
            node = self.nodes[spec.id]
            local = {}
            in_grads = node.backward(self._caches[spec.id], g, self.params, local)
            for name, value in local.items():
                self.grads[name] += value
            for src, gi in zip(spec.inputs, in_grads):
                if self.nodes[src].spec.kind == "input":
                    continue
                if src in grads_at:
                    grads_at[src] = grads_at[src] + gi
                else:
                    grads_at[src] = gi
        return self.grads

    def zero_grad(self):
        self.grads = {name: np.zeros_like(p) for name, p in self.params.items()}

    def copy(self) -> "NetworkGraph":
        other = NetworkGraph(self.specs, seed=self.seed, dtype=self.dtype)
        other.params = {k: v.copy() for k, v in self.params.items()}
        other.buffers = {k: v.copy() for k, v in self.buffers.items()}
        return other
