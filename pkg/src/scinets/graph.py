"""Explicit DAG description of a network and its executor.

Nodes are feature-map slots and edges are the operators between them. A node
aggregates everything arriving on its incoming edges (sum or channel concat),
adds its bias when at least one incoming edge carries weights, then runs its
``post_ops`` in order. All four builders in :mod:`scinets.builders` emit this
one representation, so the executor has no architecture-specific branches.
"""

from __future__ import annotations

import json
import zlib
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor
from .errors import ConfigError, DimensionError
from .tensorfile import load_archive, save_archive

EDGE_KINDS = ("conv", "transpose_conv", "identity", "linear")
PARAM_KINDS = ("conv", "transpose_conv", "linear")
AGGREGATIONS = ("sum", "concat")


def kernel_span(k, dilation=1):
    """Width in pixels covered by a ``k``-tap kernel with the given dilation."""
    if k < 1 or k % 2 == 0:
        raise ConfigError(f"kernel size must be odd and positive, got {k}")
    if dilation < 1:
        raise ConfigError(f"dilation must be >= 1, got {dilation}")
    return dilation * (k - 1) + 1


def _parse_post_op(op):
    if op in ("batchnorm", "relu"):
        return op, None
    for name in ("maxpool", "upsample"):
        if op.startswith(name):
            tail = op[len(name):]
            if tail.isdigit() and int(tail) >= 1:
                return name, int(tail)
    raise ConfigError(f"unknown post-op {op!r}")


@dataclass(frozen=True)
class NodeSpec:
    index: int
    channels: int
    aggregation: str = "sum"
    post_ops: tuple = ()
    label: str = ""

    def to_dict(self):
        return {"index": self.index, "channels": self.channels, "aggregation": self.aggregation,
                "post_ops": list(self.post_ops), "label": self.label}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["index"]), int(d["channels"]), d.get("aggregation", "sum"),
                   tuple(d.get("post_ops", ())), d.get("label", ""))


@dataclass(frozen=True)
class EdgeSpec:
    """One operator between two nodes.

    ``linear`` edges flatten the source map and need both spatial shapes
    (``in_hw`` and ``out_hw``) to size their weight matrix.
    """

    src: int
    dst: int
    kernel: int = 3
    dilation: int = 1
    kind: str = "conv"
    in_hw: tuple | None = None
    out_hw: tuple | None = None

    def to_dict(self):
        d = {"from": self.src, "to": self.dst, "kernel": self.kernel,
             "dilation": self.dilation, "kind": self.kind}
        if self.kind == "linear":
            d["in_hw"] = list(self.in_hw)
            d["out_hw"] = list(self.out_hw)
        return d

    @classmethod
    def from_dict(cls, d):
        in_hw = tuple(d["in_hw"]) if d.get("in_hw") is not None else None
        out_hw = tuple(d["out_hw"]) if d.get("out_hw") is not None else None
        return cls(int(d["from"]), int(d["to"]), int(d.get("kernel", 3)),
                   int(d.get("dilation", 1)), d.get("kind", "conv"), in_hw, out_hw)


@dataclass
class ArchSpec:
    nodes: list
    edges: list
    input_channels: int
    output_channels: int
    metadata: dict = field(default_factory=dict)

    @property
    def output_index(self):
        return len(self.nodes) - 1

    def incoming(self):
        inc = defaultdict(list)
        for i, e in enumerate(self.edges):
            inc[e.dst].append(i)
        return inc

    def to_dict(self):
        return {
            "input_channels": self.input_channels,
            "output_channels": self.output_channels,
            "nodes": [n.to_dict() for n in self.nodes],
            "edges": [e.to_dict() for e in self.edges],
            "metadata": self.metadata,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_dict(cls, d):
        return cls([NodeSpec.from_dict(n) for n in d["nodes"]],
                   [EdgeSpec.from_dict(e) for e in d["edges"]],
                   int(d["input_channels"]), int(d["output_channels"]),
                   d.get("metadata", {}))

    @classmethod
    def from_json(cls, text):
        try:
            return cls.from_dict(json.loads(text))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed architecture document: {exc}") from exc

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


# -- validation ---------------------------------------------------------------

def validate(spec: ArchSpec):
    """Return a list of human-readable invariant violations (empty when valid)."""
    out = []
    nodes, n = spec.nodes, len(spec.nodes)
    if n < 2:
        return ["spec needs at least an input and an output node"]
    for i, node in enumerate(nodes):
        if node.index != i:
            out.append(f"node at position {i} carries index {node.index}")
        if node.channels < 1:
            out.append(f"node {i}: channels must be >= 1, got {node.channels}")
        if node.aggregation not in AGGREGATIONS:
            out.append(f"node {i}: unknown aggregation {node.aggregation!r}")
        try:
            names = [_parse_post_op(p)[0] for p in node.post_ops]
        except ConfigError as exc:
            out.append(f"node {i}: {exc}")
            names = []
        if names.count("batchnorm") > 1:
            out.append(f"node {i}: at most one batchnorm post-op")
    if nodes[0].post_ops:
        out.append("input node must not have post-ops")
    if nodes[0].channels != spec.input_channels:
        out.append(f"input node has {nodes[0].channels} channels, spec says {spec.input_channels}")
    if nodes[-1].channels != spec.output_channels:
        out.append(f"output node has {nodes[-1].channels} channels, spec says {spec.output_channels}")

    seen = set()
    succ, pred = defaultdict(set), defaultdict(set)
    for k, e in enumerate(spec.edges):
        tag = f"edge {k} ({e.src}->{e.dst})"
        if not (0 <= e.src < n and 0 <= e.dst < n):
            out.append(f"{tag}: references a missing node")
            continue
        if e.src >= e.dst:
            out.append(f"{tag}: back edge")
            continue
        if e.kind not in EDGE_KINDS:
            out.append(f"{tag}: unknown kind {e.kind!r}")
        if e.kernel < 1 or e.kernel % 2 == 0:
            out.append(f"{tag}: kernel must be odd and positive, got {e.kernel}")
        if e.dilation < 1:
            out.append(f"{tag}: dilation must be >= 1")
        if e.kernel == 1 and e.dilation != 1:
            out.append(f"{tag}: 1x1 kernel with dilation {e.dilation}")
        if e.kind == "linear" and (e.in_hw is None or e.out_hw is None):
            out.append(f"{tag}: linear edge needs in_hw and out_hw")
        key = (e.src, e.dst, e.kind)
        if key in seen:
            out.append(f"{tag}: duplicate edge")
        seen.add(key)
        succ[e.src].add(e.dst)
        pred[e.dst].add(e.src)

    inc = spec.incoming()
    for j in range(1, n):
        edges = [spec.edges[k] for k in inc.get(j, []) if 0 <= spec.edges[k].src < j]
        node = nodes[j]
        if node.aggregation == "concat":
            if any(e.kind != "identity" for e in edges):
                out.append(f"node {j}: concat nodes accept identity edges only")
            total = sum(nodes[e.src].channels for e in edges)
            if edges and total != node.channels:
                out.append(f"node {j}: concat of {total} channels into a {node.channels}-channel node")
        else:
            for e in edges:
                if e.kind == "identity" and nodes[e.src].channels != node.channels:
                    out.append(f"node {j}: identity edge from {e.src} carries "
                               f"{nodes[e.src].channels} channels, node has {node.channels}")

    # every hidden node must sit on an input->output path
    fwd = {0}
    for j in range(1, n):
        if pred[j] & fwd:
            fwd.add(j)
    bwd = {n - 1}
    for j in range(n - 2, -1, -1):
        if succ[j] & bwd:
            bwd.add(j)
    if n - 1 not in fwd:
        out.append("output node is not reachable from the input")
    for j in range(1, n - 1):
        if not succ[j]:
            out.append(f"node {j}: dead node (no outgoing edge)")
        elif j not in bwd:
            out.append(f"node {j}: dead node (does not reach the output)")
        if not pred[j]:
            out.append(f"node {j}: unreachable node (no incoming edge)")
        elif j not in fwd:
            out.append(f"node {j}: unreachable node (not fed by the input)")
    return out


def check(spec):
    problems = validate(spec)
    if problems:
        raise ConfigError("invalid architecture: " + "; ".join(problems))


def required_multiple(spec):
    """Smallest integer the input height/width must be divisible by."""
    mult = [1] * len(spec.nodes)
    inc = spec.incoming()
    for j, node in enumerate(spec.nodes):
        m = max((mult[spec.edges[k].src] for k in inc.get(j, [])), default=1)
        for op in node.post_ops:
            name, k = _parse_post_op(op)
            if name == "maxpool":
                m *= k
        mult[j] = m
    return max(mult)


# -- parameters ---------------------------------------------------------------

def _edge_weight_shape(spec, e):
    cs, cd = spec.nodes[e.src].channels, spec.nodes[e.dst].channels
    if e.kind == "conv":
        return (cd, cs, e.kernel, e.kernel)
    if e.kind == "transpose_conv":
        return (cs, cd, e.kernel, e.kernel)
    if e.kind == "linear":
        return (cd * e.out_hw[0] * e.out_hw[1], cs * e.in_hw[0] * e.in_hw[1])
    return None


def _fan_in(spec, e):
    cs = spec.nodes[e.src].channels
    if e.kind == "linear":
        return cs * e.in_hw[0] * e.in_hw[1]
    return cs * e.kernel * e.kernel


def _has_bias(spec, j, inc):
    node = spec.nodes[j]
    return node.aggregation == "sum" and any(spec.edges[k].kind in PARAM_KINDS for k in inc.get(j, []))


def param_shapes(spec):
    """Ordered ``{name: (shape, trainable)}`` for every parameter and buffer."""
    shapes = {}
    inc = spec.incoming()
    for i, e in enumerate(spec.edges):
        s = _edge_weight_shape(spec, e)
        if s is not None:
            shapes[f"edge{i}.weight"] = (s, True)
    for j, node in enumerate(spec.nodes):
        if j and _has_bias(spec, j, inc):
            shapes[f"node{j}.bias"] = ((node.channels,), True)
        if "batchnorm" in node.post_ops:
            c = (node.channels,)
            shapes[f"node{j}.bn.gamma"] = (c, True)
            shapes[f"node{j}.bn.beta"] = (c, True)
            shapes[f"node{j}.bn.running_mean"] = (c, False)
            shapes[f"node{j}.bn.running_var"] = (c, False)
    return shapes


@dataclass
class ParamCount:
    total: int
    non_trainable: int
    breakdown: dict

    def __int__(self):
        return self.total


def param_count(spec):
    """Count trainable values; running statistics are reported separately."""
    check(spec)
    breakdown, buffers = {}, 0
    for name, (shape, trainable) in param_shapes(spec).items():
        size = int(np.prod(shape))
        if trainable:
            breakdown[name] = size
        else:
            buffers += size
    return ParamCount(sum(breakdown.values()), buffers, breakdown)


def _substream(seed, name):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())])))


class ParamStore:
    """Named tensors for one :class:`ArchSpec` (weights, biases, bn state)."""

    def __init__(self, tensors=None):
        self.tensors: dict = dict(tensors or {})

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def __len__(self):
        return len(self.tensors)

    @classmethod
    def init(cls, spec, seed=0, dtype=np.float32):
        """He-normal weights scaled by the total fan-in of the target node."""
        check(spec)
        fan = defaultdict(int)
        for e in spec.edges:
            if e.kind in PARAM_KINDS:
                fan[e.dst] += _fan_in(spec, e)
        tensors = {}
        for name, (shape, trainable) in param_shapes(spec).items():
            if name.startswith("edge"):
                e = spec.edges[int(name[4:name.index(".")])]
                gain = 2.0 if "relu" in spec.nodes[e.dst].post_ops else 1.0
                std = np.sqrt(gain / max(fan[e.dst], 1))
                data = _substream(seed, name).normal(0.0, std, size=shape)
            elif name.endswith("gamma") or name.endswith("running_var"):
                data = np.ones(shape)
            else:
                data = np.zeros(shape)
            tensors[name] = Tensor(np.asarray(data, dtype=dtype), requires_grad=trainable)
        return cls(tensors)

    def trainable(self):
        return [(k, t) for k, t in self.tensors.items() if t.requires_grad]

    def buffers(self):
        return [(k, t) for k, t in self.tensors.items() if not t.requires_grad]

    def bn_state(self, j):
        return BatchNormState(self.tensors[f"node{j}.bn.running_mean"].data,
                              self.tensors[f"node{j}.bn.running_var"].data)

    def copy(self):
        return ParamStore({k: Tensor(t.data.copy(), requires_grad=t.requires_grad)
                           for k, t in self.tensors.items()})

    def arrays(self):
        return {k: t.data for k, t in self.tensors.items()}

    def save(self, path):
        save_archive(path, self.arrays())

    @classmethod
    def load(cls, path, spec=None):
        entries = load_archive(path)
        store = cls()
        trainable = None
        if spec is not None:
            shapes = param_shapes(spec)
            missing = set(shapes) - set(entries)
            if missing:
                raise ConfigError(f"archive lacks parameters: {sorted(missing)[:5]}")
            trainable = {k: v[1] for k, v in shapes.items()}
        for k, arr in entries.items():
            grad = not (".running_" in k) if trainable is None else trainable.get(k, False)
            store.tensors[k] = Tensor(arr, requires_grad=grad)
        return store


# -- execution ----------------------------------------------------------------

def _apply_edge(e, x, w, spec):
    if e.kind == "identity":
        return x
    if e.kind == "conv":
        pad = e.dilation * (e.kernel - 1) // 2
        return ad.conv2d(x, w, None, dilation=e.dilation, padding=pad)
    if e.kind == "transpose_conv":
        pad = e.dilation * (e.kernel - 1) // 2
        return ad.conv_transpose2d(x, w, None, stride=2, padding=pad, output_padding=1,
                                   dilation=e.dilation)
    n, c, h, wd = x.shape
    if (h, wd) != tuple(e.in_hw):
        raise DimensionError(f"linear edge {e.src}->{e.dst} expects {tuple(e.in_hw)} maps, got {(h, wd)}")
    flat = ad.matmul(ad.reshape(x, (n, c * h * wd)), w)
    cd = spec.nodes[e.dst].channels
    return ad.reshape(flat, (n, cd, e.out_hw[0], e.out_hw[1]))


def forward(spec, params, x, train=False, until=None):
    """Run ``spec`` on ``x`` and return the output (or node ``until``) tensor."""
    if not isinstance(x, Tensor):
        x = Tensor(x)
    if x.ndim != 4 or x.shape[1] != spec.input_channels:
        raise DimensionError(f"input of shape {x.shape} does not match {spec.input_channels} input channels")
    mult = required_multiple(spec)
    if x.shape[2] % mult or x.shape[3] % mult:
        raise ConfigError(
            f"input spatial dims {x.shape[2]}x{x.shape[3]} must be multiples of {mult}"
        )
    stop = spec.output_index if until is None else int(until)
    inc = spec.incoming()
    vals = {0: x}
    consumers = defaultdict(int)
    for e in spec.edges:
        if e.dst <= stop:
            consumers[e.src] += 1
    for j in range(1, stop + 1):
        node = spec.nodes[j]
        ks = inc.get(j, [])
        if node.aggregation == "concat":
            h = ad.concat_channels([vals[spec.edges[k].src] for k in ks])
        else:
            parts = []
            groups = defaultdict(list)
            for k in ks:
                e = spec.edges[k]
                if e.kind == "conv":
                    groups[(e.kernel, e.dilation)].append(k)
                else:
                    w = params[f"edge{k}.weight"] if e.kind in PARAM_KINDS else None
                    parts.append(_apply_edge(e, vals[e.src], w, spec))
            for (kern, dil), members in groups.items():
                # sum of convs == one conv over stacked inputs and weights
                xs = ad.concat_channels([vals[spec.edges[k].src] for k in members])
                ws = ad.concat([params[f"edge{k}.weight"] for k in members], axis=1)
                parts.append(ad.conv2d(xs, ws, None, dilation=dil, padding=dil * (kern - 1) // 2))
            if not parts:
                raise ConfigError(f"node {j} has no incoming edges")
            h = parts[0]
            for p in parts[1:]:
                if p.shape != h.shape:
                    raise DimensionError(f"node {j}: cannot sum maps of shape {h.shape} and {p.shape}")
                h = ad.add(h, p)
            bias = f"node{j}.bias"
            if bias in params:
                h = ad.add(h, ad.reshape(params[bias], (1, node.channels, 1, 1)))
        for op in node.post_ops:
            name, k = _parse_post_op(op)
            if name == "batchnorm":
                h = ad.batchnorm2d(h, params[f"node{j}.bn.gamma"], params[f"node{j}.bn.beta"],
                                   params.bn_state(j), train=train)
            elif name == "relu":
                h = ad.relu(h)
            elif name == "maxpool":
                if h.shape[2] % k or h.shape[3] % k:
                    raise ConfigError(f"node {j} ({node.label or 'unnamed'}): maxpool {k} "
                                      f"cannot divide {h.shape[2]}x{h.shape[3]}")
                h = ad.maxpool2d(h, k)
            elif name == "upsample":
                h = ad.upsample2d(h, k)
        vals[j] = h
        for k in ks:
            src = spec.edges[k].src
            consumers[src] -= 1
            if consumers[src] == 0 and src != 0:
                del vals[src]
    return vals[stop]


# -- DOT export -----------------------------------------------------------------

def to_dot(spec, name="arch"):
    lines = [f"digraph {name} {{", "  rankdir=LR;", "  node [shape=box];"]
    last = spec.output_index
    for node in spec.nodes:
        tag = node.label or ("I" if node.index == 0 else "O" if node.index == last else f"L{node.index}")
        parts = [tag, f"{node.channels} ch"]
        if node.post_ops:
            parts.append(",".join(node.post_ops))
        label = "\\n".join(parts)
        lines.append(f'  n{node.index} [label="{label}"];')
    for e in spec.edges:
        if e.kind == "identity":
            label = "id"
        elif e.kind == "linear":
            label = "linear"
        else:
            label = f"{e.kernel}x{e.kernel} d={e.dilation}"
            if e.kind == "transpose_conv":
                label = "up " + label
        style = ' style=dashed' if e.kernel == 1 and e.kind == "conv" else ""
        lines.append(f'  n{e.src} -> n{e.dst} [label="{label}"{style}];')
    lines.append("}")
    return "\n".join(lines) + "\n"
