"""Hyperparameter records and the four architecture builders.

Each builder is a pure function from its config record to an
:class:`~scinets.graph.ArchSpec`; the stochastic SMSNet builder draws all of
its randomness from counter-based streams keyed by ``(seed, step, ids)`` so
every generation step can be replayed on its own.
"""

from __future__ import annotations

import dataclasses
import json
import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .graph import ArchSpec, EdgeSpec, NodeSpec, check

BN_RELU = ("batchnorm", "relu")


def round_half_up(x):
    return int(math.floor(x + 0.5))


class _Config:
    """Strict JSON (de)serialization shared by the config records."""

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d.pop("arch", None)
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"{cls.__name__}: unknown field(s) {unknown}")
        missing = [f.name for f in dataclasses.fields(cls)
                   if f.name not in d and f.default is dataclasses.MISSING
                   and f.default_factory is dataclasses.MISSING]
        if missing:
            raise ConfigError(f"{cls.__name__}: missing field(s) {missing}")
        try:
            cfg = cls(**d)
        except TypeError as exc:
            raise ConfigError(f"{cls.__name__}: {exc}") from exc
        cfg.check()
        return cfg

    def to_dict(self):
        return dataclasses.asdict(self)

    def check(self):
        pass


@dataclass
class TunetConfig(_Config):
    depth: int
    base_channels: int
    growth_rate: float = 2.0
    hidden_rate: float = 1.0
    c_in: int = 1
    c_out: int = 1

    def channels(self, i):
        """Block output channels at 1-based layer ``i``."""
        return max(1, round_half_up(self.base_channels * self.growth_rate ** (i - 1)))

    def hidden(self, i):
        return max(1, round_half_up(self.channels(i) * self.hidden_rate))

    def check(self):
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.base_channels < 1 or self.c_in < 1 or self.c_out < 1:
            raise ConfigError("base_channels, c_in and c_out must be >= 1")
        if self.growth_rate <= 0 or self.hidden_rate <= 0:
            raise ConfigError("growth_rate and hidden_rate must be > 0")
        for i in range(1, self.depth + 1):
            raw = self.base_channels * self.growth_rate ** (i - 1)
            if round_half_up(raw) < 1 or round_half_up(round_half_up(raw) * self.hidden_rate) < 1:
                raise ConfigError(f"channel formula yields 0 channels at layer {i}")


@dataclass
class AutoConfig(_Config):
    depth: int
    base_channels: int
    latent_len: int
    growth_rate: float = 2.0
    c_in: int = 1
    m: int = 64
    n: int = 64

    channels = TunetConfig.channels

    def hidden(self, i):
        return self.channels(i)

    def check(self):
        if self.depth < 1:
            raise ConfigError("autoencoder depth must be >= 1 (a bottleneck needs a pooling step)")
        if self.base_channels < 1 or self.latent_len < 1 or self.c_in < 1:
            raise ConfigError("base_channels, latent_len and c_in must be >= 1")
        if self.growth_rate <= 0:
            raise ConfigError("growth_rate must be > 0")
        q = 2 ** self.depth
        if self.m % q or self.n % q:
            raise ConfigError(f"input dims {self.m}x{self.n} must be multiples of {q} for depth {self.depth}")
        for i in range(1, self.depth + 1):
            if round_half_up(self.base_channels * self.growth_rate ** (i - 1)) < 1:
                raise ConfigError(f"channel formula yields 0 channels at layer {i}")


@dataclass
class MsdConfig(_Config):
    depth: int
    max_dilation: int = 10
    custom_dilations: list | None = None
    width: int = 1
    c_in: int = 1
    c_out: int = 1

    def dilation(self, i):
        """Dilation of hidden layer ``i`` (1-based): cycles 1..max_dilation."""
        if self.custom_dilations is not None:
            return int(self.custom_dilations[i - 1])
        return (i - 1) % self.max_dilation + 1

    def check(self):
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.max_dilation < 1:
            raise ConfigError("max_dilation must be >= 1")
        if self.width < 1 or self.c_in < 1 or self.c_out < 1:
            raise ConfigError("width, c_in and c_out must be >= 1")
        if self.custom_dilations is not None:
            if len(self.custom_dilations) != self.depth:
                raise ConfigError(
                    f"custom_dilations has {len(self.custom_dilations)} entries for depth {self.depth}"
                )
            if any(int(v) < 1 for v in self.custom_dilations):
                raise ConfigError("custom dilations must be >= 1")


@dataclass
class SmsConfig(_Config):
    hidden_nodes: int
    k_min: int = 1
    k_max: int | None = None
    gamma: float = 0.0
    alpha: float = 0.0
    p_il: float = 0.5
    p_lo: float = 0.5
    p_io: bool = False
    dilation_choices: list = field(default_factory=lambda: [1, 2, 4, 8, 16])
    hidden_channels: int = 1
    seed: int = 0
    c_in: int = 1
    c_out: int = 1

    @property
    def kmax(self):
        return self.hidden_nodes + 1 if self.k_max is None else self.k_max

    def check(self):
        d = self.hidden_nodes
        if d < 1:
            raise ConfigError("hidden_nodes must be >= 1")
        if not (1 <= self.k_min <= self.kmax <= d + 1):
            raise ConfigError(f"need 1 <= k_min <= k_max <= d+1, got k_min={self.k_min}, k_max={self.kmax}")
        if self.gamma < 0 or self.alpha < 0:
            raise ConfigError("gamma and alpha must be >= 0")
        for name in ("p_il", "p_lo"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {p}")
        if not self.dilation_choices:
            raise ConfigError("dilation_choices must not be empty")
        if any(int(v) < 1 for v in self.dilation_choices):
            raise ConfigError("dilation choices must be positive")
        if self.hidden_channels < 1 or self.c_in < 1 or self.c_out < 1:
            raise ConfigError("hidden_channels, c_in and c_out must be >= 1")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")


class _Graph:
    def __init__(self):
        self.nodes, self.edges = [], []

    def node(self, channels, post_ops=(), aggregation="sum", label=""):
        self.nodes.append(NodeSpec(len(self.nodes), int(channels), aggregation, tuple(post_ops), label))
        return len(self.nodes) - 1

    def edge(self, src, dst, kernel=3, dilation=1, kind="conv", **kw):
        self.edges.append(EdgeSpec(src, dst, kernel, dilation, kind, **kw))

    def spec(self, c_in, c_out, metadata):
        spec = ArchSpec(self.nodes, self.edges, c_in, c_out, metadata)
        check(spec)
        return spec


def _meta(name, cfg, seed=None):
    return {"builder": name, "config": cfg.to_dict(), "seed": seed}


def _dual_conv(g, src, cfg, i, tag):
    a = g.node(cfg.hidden(i), BN_RELU, label=f"{tag}{i}a")
    g.edge(src, a)
    b = g.node(cfg.channels(i), BN_RELU, label=f"{tag}{i}b")
    g.edge(a, b)
    return b


def build_tunet(cfg: TunetConfig) -> ArchSpec:
    """Encoder/decoder U-Net with concatenation skips.

    ``depth`` dual-conv blocks on the way down with ``depth - 1`` pooling
    steps between them; the way up mirrors it with transposed convolutions and
    joins the matching encoder block by channel concatenation.
    """
    cfg.check()
    g = _Graph()
    src = g.node(cfg.c_in, label="I")
    skips = {}
    for i in range(1, cfg.depth + 1):
        if i > 1:
            pool = g.node(cfg.channels(i - 1), ("maxpool2",), label=f"pool{i - 1}")
            g.edge(src, pool, kernel=1, kind="identity")
            src = pool
        src = skips[i] = _dual_conv(g, src, cfg, i, "enc")
    for i in range(cfg.depth - 1, 0, -1):
        up = g.node(cfg.channels(i), label=f"up{i}")
        g.edge(src, up, kind="transpose_conv")
        join = g.node(2 * cfg.channels(i), aggregation="concat", label=f"cat{i}")
        g.edge(skips[i], join, kernel=1, kind="identity")
        g.edge(up, join, kernel=1, kind="identity")
        src = _dual_conv(g, join, cfg, i, "dec")
    out = g.node(cfg.c_out, label="O")
    g.edge(src, out, kernel=1)
    return g.spec(cfg.c_in, cfg.c_out, _meta("tunet", cfg))


def build_autoencoder(cfg: AutoConfig) -> ArchSpec:
    """Convolutional autoencoder with a fully connected ``latent_len`` bottleneck.

    No skip connections: the only route from encoder to decoder is the latent
    node, whose index is stored in ``metadata["latent_node"]``.
    """
    cfg.check()
    g = _Graph()
    src = g.node(cfg.c_in, label="I")
    for i in range(1, cfg.depth + 1):
        src = _dual_conv(g, src, cfg, i, "enc")
        pool = g.node(cfg.channels(i), ("maxpool2",), label=f"pool{i}")
        g.edge(src, pool, kernel=1, kind="identity")
        src = pool
    q = 2 ** cfg.depth
    hw = (cfg.m // q, cfg.n // q)
    latent = g.node(cfg.latent_len, label="latent")
    g.edge(src, latent, kernel=1, kind="linear", in_hw=hw, out_hw=(1, 1))
    src = g.node(cfg.channels(cfg.depth), label="unflatten")
    g.edge(latent, src, kernel=1, kind="linear", in_hw=(1, 1), out_hw=hw)
    for i in range(cfg.depth, 0, -1):
        up = g.node(cfg.channels(i), label=f"up{i}")
        g.edge(src, up, kind="transpose_conv")
        src = _dual_conv(g, up, cfg, i, "dec")
    out = g.node(cfg.c_in, label="O")
    g.edge(src, out, kernel=1)
    meta = _meta("autoencoder", cfg)
    meta["latent_node"] = latent
    return g.spec(cfg.c_in, cfg.c_in, meta)


def build_msdnet(cfg: MsdConfig) -> ArchSpec:
    """Mixed-scale dense network: every hidden layer sees the input and all
    earlier hidden layers through 3x3 convolutions sharing that layer's
    dilation; the output is a 1x1 combination of everything before it."""
    cfg.check()
    g = _Graph()
    g.node(cfg.c_in, label="I")
    for i in range(1, cfg.depth + 1):
        j = g.node(cfg.width, BN_RELU, label=f"L{i}")
        dil = cfg.dilation(i)
        for src in range(j):
            g.edge(src, j, kernel=3, dilation=dil)
    out = g.node(cfg.c_out, label="O")
    for src in range(out):
        g.edge(src, out, kernel=1)
    return g.spec(cfg.c_in, cfg.c_out, _meta("msdnet", cfg))


# -- SMSNet ---------------------------------------------------------------------

def stream(seed, label, *ids):
    """Independent Philox stream for one generation step."""
    key = [int(seed) & 0xFFFFFFFF, int(seed) >> 32, zlib.crc32(label.encode()), *map(int, ids)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


def degree_support(cfg, j):
    d = cfg.hidden_nodes
    return min(cfg.k_min, d - j), min(cfg.kmax, d - j)


def degree_pmf(cfg, j):
    """Truncated density over out-degrees of hidden node ``j``, proportional to exp(-gamma*n)."""
    lo, hi = degree_support(cfg, j)
    n = np.arange(lo, hi + 1)
    if math.isinf(cfg.gamma):
        w = (n == lo).astype(float)
    else:
        w = np.exp(-cfg.gamma * (n - lo))
    return n, w / w.sum()


def _inverse_cdf(rng, p):
    c = np.cumsum(p)
    return min(int(np.searchsorted(c, rng.random() * c[-1], side="right")), len(p) - 1)


def sample_targets(cfg, j, count):
    """Draw ``count`` distinct later hidden nodes, each draw weighted by exp(-alpha*|j-t|)."""
    d = cfg.hidden_nodes
    cands = list(range(j + 1, d + 1))
    rng = stream(cfg.seed, "targets", j)
    chosen = []
    for _ in range(count):
        w = np.exp(-cfg.alpha * (np.asarray(cands) - j))
        k = _inverse_cdf(rng, w)
        chosen.append(cands.pop(k))
    return chosen


def build_smsnet(cfg: SmsConfig) -> ArchSpec:
    """Sample a sparse mixed-scale network.

    Steps, each with its own random stream: out-degrees, hidden targets,
    input links, output links, optional 1x1 input->output edge, a repair pass
    that connects orphaned hidden nodes, then per-edge dilations.
    """
    cfg.check()
    d, seed = cfg.hidden_nodes, int(cfg.seed)
    out_idx = d + 1
    links = []
    for j in range(1, d + 1):
        support, pmf = degree_pmf(cfg, j)
        n_j = int(support[_inverse_cdf(stream(seed, "degree", j), pmf)])
        links += [(j, t) for t in sample_targets(cfg, j, n_j)]
    for j in range(1, d + 1):
        if stream(seed, "input", j).random() < cfg.p_il:
            links.append((0, j))
    for j in range(1, d + 1):
        if stream(seed, "output", j).random() < cfg.p_lo:
            links.append((j, out_idx))
    has_in = {t for _, t in links}
    has_out = {s for s, _ in links}
    for j in range(1, d + 1):
        if j not in has_in:
            links.append((0, j))
        if j not in has_out:
            links.append((j, out_idx))
    g = _Graph()
    g.node(cfg.c_in, label="I")
    for j in range(1, d + 1):
        g.node(cfg.hidden_channels, BN_RELU, label=f"L{j}")
    g.node(cfg.c_out, label="O")
    choices = [int(v) for v in cfg.dilation_choices]
    for s, t in sorted(links):
        dil = choices[int(stream(seed, "dilation", s, t).integers(len(choices)))]
        g.edge(s, t, kernel=3, dilation=dil)
    if cfg.p_io:
        g.edge(0, out_idx, kernel=1)
    return g.spec(cfg.c_in, cfg.c_out, _meta("smsnet", cfg, seed))


BUILDERS = {
    "tunet": (TunetConfig, build_tunet),
    "autoencoder": (AutoConfig, build_autoencoder),
    "msdnet": (MsdConfig, build_msdnet),
    "smsnet": (SmsConfig, build_smsnet),
}


def parse_config(doc):
    """Turn ``{"arch": name, ...fields}`` into the matching config record."""
    if isinstance(doc, str):
        try:
            doc = json.loads(doc)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or "arch" not in doc:
        raise ConfigError('config document needs an "arch" field')
    arch = doc["arch"]
    if arch not in BUILDERS:
        raise ConfigError(f"unknown arch {arch!r}; expected one of {sorted(BUILDERS)}")
    return arch, BUILDERS[arch][0].from_dict(doc)


def build(doc, seed=None):
    arch, cfg = parse_config(doc)
    if seed is not None and arch == "smsnet":
        cfg.seed = int(seed)
        cfg.check()
    return BUILDERS[arch][1](cfg)
