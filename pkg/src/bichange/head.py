"""Trainable change head: from bi-temporal backbone features to a binary map.

Stages, all built on the autodiff graph so the whole head trains end to end:

1. pyramid modulation: per tap layer, a shared 1x1 projection then a
   level-specific rescale (deconv x4, deconv x2, identity, strided conv /2),
   giving spatial sizes (4G, 2G, G, G/2) over the token grid G.
2. difference fusion: sigmoid-gated attention over |F1 - F2| enhances each
   timestamp, then the pair is concatenated and re-gated into one fused
   difference map per level.
3. windowed query attention: difference features query guidance features
   (difference || timestamp features) inside S_w x S_w windows, with a
   learned relative-position bias per head, followed by a per-position
   mixture-of-experts MLP.
4. residual upsampling: per-level 1x1 reduction to a shared width, then a
   coarse-to-fine accumulator of residual conv units with 2x bilinear steps,
   closed by a two-channel output head resized to the input resolution.

The change map is the argmax over the two output channels, ties resolving
to "no change".  A parallel branch pools the modulated pyramids into one
embedding per timestamp for the unchanged-region similarity loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .autodiff import Graph, Node, ShapeError
from .backbone import RawFeatures
from .tensorio import load_archive, save_archive

# level rescale factors over the token grid, finest to coarsest
LEVEL_SCALES = (4, 2, 1, 0.5)


@dataclass(frozen=True)
class HeadConfig:
    channels: tuple[int, ...] = (48, 64, 80, 96)
    window: int = 9
    experts: int = 4
    heads: int = 4
    up_dim: int = 48
    embed_dim: int = 48
    moe_hidden_ratio: int = 2

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if len(self.channels) != 4:
            raise ValueError("expected one channel width per pyramid level (4)")
        if self.window < 1 or self.experts < 1 or self.heads < 1:
            raise ValueError("window, experts and heads must be positive")
        for i, c in enumerate(self.channels):
            if c % self.heads:
                raise ValueError(
                    f"channels[{i}]={c} is not divisible by heads={self.heads}")


def level_sizes(grid: int) -> list[int]:
    """Spatial sizes of the four pyramid levels for a G x G token grid."""
    if grid % 2:
        raise ShapeError(f"token grid {grid} must be even for the half-scale level")
    return [grid * 4, grid * 2, grid, grid // 2]


def relative_position_index(window: int) -> np.ndarray:
    """[T,T] indices into a (2S-1)^2 bias table, T = window^2 tokens."""
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window),
                                  indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :]
    rel = rel.transpose(1, 2, 0) + (window - 1)
    return rel[..., 0] * (2 * window - 1) + rel[..., 1]


def window_partition(g: Graph, x: Node, window: int) -> Node:
    """[C,h,w] -> [N_w, window*window, C]; windows and tokens row-major."""
    c, h, w = x.value.shape
    if h % window or w % window:
        raise ShapeError(f"spatial size {h}x{w} not divisible by window {window}")
    nh, nw = h // window, w // window
    t = g.reshape(x, (c, nh, window, nw, window))
    t = g.transpose(t, (1, 3, 2, 4, 0))
    return g.reshape(t, (nh * nw, window * window, c))


def window_reverse(g: Graph, x: Node, window: int, h: int, w: int) -> Node:
    """Exact inverse of :func:`window_partition`."""
    nh, nw = h // window, w // window
    c = x.value.shape[-1]
    t = g.reshape(x, (nh, nw, window, window, c))
    t = g.transpose(t, (4, 0, 2, 1, 3))
    return g.reshape(t, (c, h, w))


class ChangeHead:
    """Parameter store plus graph-building forward for the change head."""

    def __init__(self, cfg: HeadConfig, input_dim: int, seed: int = 0):
        self.cfg = cfg
        self.input_dim = int(input_dim)
        self.params: dict[str, np.ndarray] = {}
        self._init_params(np.random.default_rng(seed))
        self._rel_index = relative_position_index(cfg.window)

    # -- parameter initialization -----------------------------------------

    def _conv(self, rng, name, c_out, c_in, k, bias=True, gain=1.0):
        w = rng.normal(size=(c_out, c_in, k, k)) * (gain * np.sqrt(2.0 / (c_in * k * k)))
        self.params[f"{name}.w"] = w
        if bias:
            self.params[f"{name}.b"] = np.zeros(c_out)

    def _deconv(self, rng, name, c_in, c_out, k):
        self.params[f"{name}.w"] = (
            rng.normal(size=(c_in, c_out, k, k)) * np.sqrt(2.0 / (c_in * k * k)))

    def _linear(self, rng, name, c_out, c_in, gain=1.0):
        self.params[f"{name}.w"] = (
            rng.normal(size=(c_out, c_in)) * (gain * np.sqrt(1.0 / c_in)))
        self.params[f"{name}.b"] = np.zeros(c_out)

    def _init_params(self, rng):
        cfg = self.cfg
        table = (2 * cfg.window - 1) ** 2
        for i, c in enumerate(cfg.channels):
            self._conv(rng, f"fmm.l{i}.proj", c, self.input_dim, 1)
            if i == 0:
                self._deconv(rng, "fmm.l0.up", c, c, 4)
            elif i == 1:
                self._deconv(rng, "fmm.l1.up", c, c, 2)
            elif i == 3:
                self._conv(rng, "fmm.l3.down", c, c, 3)

            self._conv(rng, f"bdfm.l{i}.att", c, c, 3)
            self._conv(rng, f"bdfm.l{i}.enh", c, c, 3)
            self._conv(rng, f"bdfm.l{i}.cat", c, 2 * c, 3)
            self._conv(rng, f"bdfm.l{i}.out", c, c, 3)

            self._conv(rng, f"edqa.l{i}.guide", c, 2 * c, 1)
            for proj in ("q", "k", "v1", "v2", "proj1", "proj2"):
                self._linear(rng, f"edqa.l{i}.{proj}", c, c)
            self.params[f"edqa.l{i}.relbias"] = 0.02 * rng.normal(size=(table, cfg.heads))
            self._conv(rng, f"edqa.l{i}.fuse1", c, 2 * c, 3)
            self._conv(rng, f"edqa.l{i}.fuse2", c, c, 3)
            self._linear(rng, f"edqa.l{i}.moe.gate", cfg.experts, c)
            hidden = cfg.moe_hidden_ratio * c
            for j in range(cfg.experts):
                self._linear(rng, f"edqa.l{i}.moe.e{j}.h", hidden, c)
                self._linear(rng, f"edqa.l{i}.moe.e{j}.o", c, hidden, gain=2.0)

            # decoder-entry and logit convs start hot: at a small fixed
            # learning rate, traversing logit scale dominates training time
            self._conv(rng, f"resup.l{i}.reduce", cfg.up_dim, c, 1, gain=2.0)
            for unit in (1, 2):
                self._conv(rng, f"resup.l{i}.res{unit}.c1", cfg.up_dim, cfg.up_dim, 1)
                self._conv(rng, f"resup.l{i}.res{unit}.c2", cfg.up_dim, cfg.up_dim, 1)
            self._conv(rng, f"resup.aux{i}", 2, cfg.up_dim, 1, gain=2.0)

        self._conv(rng, "resup.head.mix", cfg.up_dim, cfg.up_dim, 3)
        self._conv(rng, "resup.head.out", 2, cfg.up_dim, 1, gain=2.0)
        self._conv(rng, "sim.proj", cfg.embed_dim, sum(cfg.channels), 1)

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def param_shapes(self) -> dict[str, tuple]:
        return {name: tuple(p.shape) for name, p in self.params.items()}

    # -- checkpointing ------------------------------------------------------

    def save_checkpoint(self, path) -> None:
        save_archive(path, self.params,
                     {"head": asdict(self.cfg), "input_dim": self.input_dim})

    @classmethod
    def from_checkpoint(cls, path) -> "ChangeHead":
        _, manifest = load_archive(path)
        raw = dict(manifest["head"])
        raw["channels"] = tuple(raw["channels"])
        cfg = HeadConfig(**raw)
        head = cls(cfg, int(manifest["input_dim"]))
        tensors, _ = load_archive(path, head.param_shapes())
        head.params = tensors
        return head

    # -- graph construction ---------------------------------------------------

    def bind(self, g: Graph) -> dict[str, Node]:
        """Register every learnable tensor; unused ones get zero gradients."""
        return {name: g.parameter(name, value) for name, value in self.params.items()}

    def _conv_apply(self, g, pn, name, x, stride=1, padding=0):
        bias = pn.get(f"{name}.b")
        return g.conv2d(x, pn[f"{name}.w"], bias, stride=stride, padding=padding)

    def _linear_apply(self, g, pn, name, x):
        return g.linear(x, pn[f"{name}.w"], pn[f"{name}.b"])

    def modulate(self, g: Graph, pn, raw: RawFeatures) -> dict[int, list[Node]]:
        """Project and rescale each tap layer; weights shared across timestamps."""
        taps = raw.tap_layers
        gh, gw = raw.grid
        if gh != gw:
            raise ShapeError(f"expected a square token grid, got {gh}x{gw}")
        sizes = level_sizes(gh)
        sw = self.cfg.window
        for i, size in enumerate(sizes):
            if size % sw:
                raise ShapeError(
                    f"pyramid level {i} size {size} not divisible by window {sw}")
        out: dict[int, list[Node]] = {1: [], 2: []}
        for t in (1, 2):
            for i, layer in enumerate(taps):
                x = g.constant(raw.get(t, layer))
                x = self._conv_apply(g, pn, f"fmm.l{i}.proj", x)
                if i == 0:
                    x = g.deconv2d(x, pn["fmm.l0.up.w"], stride=4)
                elif i == 1:
                    x = g.deconv2d(x, pn["fmm.l1.up.w"], stride=2)
                elif i == 3:
                    x = self._conv_apply(g, pn, "fmm.l3.down", x, stride=2, padding=1)
                out[t].append(x)
        return out

    def difference_attention(self, g: Graph, pn, i: int, f1: Node, f2: Node) -> Node:
        """Sigmoid gate over the absolute bi-temporal difference (symmetric)."""
        if f1.value.shape != f2.value.shape:
            raise ShapeError("difference_attention: timestamp shapes differ")
        diff = g.absval(g.sub(f1, f2))
        return g.sigmoid(self._conv_apply(g, pn, f"bdfm.l{i}.att", diff, padding=1))

    def difference_fuse(self, g: Graph, pn, i: int, f1: Node, f2: Node,
                        att: Node) -> tuple[Node, Node, Node]:
        """Enhance each timestamp with the gate, then fuse the pair."""
        def enhance(f):
            gated = g.add(f, g.mul(att, f))
            return g.relu(self._conv_apply(g, pn, f"bdfm.l{i}.enh", gated, padding=1))
        x1, x2 = enhance(f1), enhance(f2)
        cat = g.relu(self._conv_apply(g, pn, f"bdfm.l{i}.cat",
                                      g.concat_channels(x1, x2), padding=1))
        fused = g.relu(self._conv_apply(g, pn, f"bdfm.l{i}.out",
                                        g.mul(cat, att), padding=1))
        return x1, x2, fused

    def query_attend(self, g: Graph, pn, i: int, fused: Node, f1: Node,
                     f2: Node) -> tuple[Node, Node]:
        """Windowed multi-head attention: difference queries guide each timestamp."""
        cfg = self.cfg
        c, h, w = fused.value.shape
        heads, sw = cfg.heads, cfg.window
        dh = c // heads
        tokens = sw * sw

        def split_heads(x):
            nw = x.value.shape[0]
            return g.transpose(g.reshape(x, (nw, tokens, heads, dh)), (0, 2, 1, 3))

        def merge_heads(x):
            nw = x.value.shape[0]
            return g.reshape(g.transpose(x, (0, 2, 1, 3)), (nw, tokens, c))

        dw = window_partition(g, fused, sw)
        q = split_heads(self._linear_apply(g, pn, f"edqa.l{i}.q", dw))
        k = split_heads(self._linear_apply(g, pn, f"edqa.l{i}.k", dw))
        scores = g.scale(g.matmul(q, g.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))

        bias = g.take_rows(pn[f"edqa.l{i}.relbias"], self._rel_index.reshape(-1))
        bias = g.transpose(g.reshape(bias, (tokens, tokens, heads)), (2, 0, 1))
        bias = g.expand(g.reshape(bias, (1, heads, tokens, tokens)), scores.value.shape)
        attn = g.softmax(g.add(scores, bias))

        out = []
        for t, f in ((1, f1), (2, f2)):
            guide = self._conv_apply(g, pn, f"edqa.l{i}.guide",
                                     g.concat_channels(fused, f))
            v = split_heads(self._linear_apply(
                g, pn, f"edqa.l{i}.v{t}", window_partition(g, guide, sw)))
            mixed = merge_heads(g.matmul(attn, v))
            proj = self._linear_apply(g, pn, f"edqa.l{i}.proj{t}", mixed)
            out.append(window_reverse(g, proj, sw, h, w))
        return out[0], out[1]

    def query_fuse(self, g: Graph, pn, i: int, d1: Node, d2: Node) -> Node:
        x = g.relu(self._conv_apply(g, pn, f"edqa.l{i}.fuse1",
                                    g.concat_channels(d1, d2), padding=1))
        return g.relu(self._conv_apply(g, pn, f"edqa.l{i}.fuse2", x, padding=1))

    def moe(self, g: Graph, pn, i: int, x: Node) -> Node:
        """Per-position softmax-gated mixture of two-layer GELU experts."""
        cfg = self.cfg
        c, h, w = x.value.shape
        flat = g.reshape(g.transpose(x, (1, 2, 0)), (h * w, c))
        gates = g.softmax(self._linear_apply(g, pn, f"edqa.l{i}.moe.gate", flat))
        experts = []
        for j in range(cfg.experts):
            hidden = g.gelu(self._linear_apply(g, pn, f"edqa.l{i}.moe.e{j}.h", flat))
            expert = self._linear_apply(g, pn, f"edqa.l{i}.moe.e{j}.o", hidden)
            experts.append(g.reshape(expert, (h * w, 1, c)))
        stack = g.concat(experts, axis=1)
        mixed = g.matmul(g.reshape(gates, (h * w, 1, cfg.experts)), stack)
        return g.transpose(g.reshape(mixed, (h, w, c)), (2, 0, 1))

    def _resconv(self, g, pn, name, z):
        inner = g.relu(self._conv_apply(g, pn, f"{name}.c1", g.relu(z)))
        return g.add(self._conv_apply(g, pn, f"{name}.c2", inner), z)

    def decode(self, g: Graph, pn, refined: list[Node],
               target_hw: tuple[int, int]) -> tuple[Node, list[Node]]:
        """Coarse-to-fine residual accumulator ending in 2-channel logits."""
        sizes = [x.value.shape[1] for x in refined]
        if not all(sizes[j] == 2 * sizes[j + 1] for j in range(3)):
            raise ShapeError(f"pyramid sizes {sizes} do not form a 2x ladder")
        reduced = [self._conv_apply(g, pn, f"resup.l{i}.reduce", x)
                   for i, x in enumerate(refined)]
        th, tw = target_hw
        acc = g.constant(np.zeros((self.cfg.up_dim, sizes[3], sizes[3])))
        for i in (3, 2, 1, 0):
            z = g.add(self._resconv(g, pn, f"resup.l{i}.res1", reduced[i]), acc)
            z = self._resconv(g, pn, f"resup.l{i}.res2", z)
            acc = g.bilinear_resize(z, 2 * sizes[i], 2 * sizes[i])
        logits = self._conv_apply(
            g, pn, "resup.head.out",
            g.relu(self._conv_apply(g, pn, "resup.head.mix", acc, padding=1)))
        logits = g.bilinear_resize(logits, th, tw)
        aux = [g.bilinear_resize(self._conv_apply(g, pn, f"resup.aux{i}", reduced[i]),
                                 th, tw)
               for i in range(4)]
        return logits, aux

    def similarity_embedding(self, g: Graph, pn, pyramid: list[Node],
                             target_hw: tuple[int, int]) -> Node:
        """Pool all levels to the finest scale and project to embed_dim."""
        finest = pyramid[0].value.shape[1]
        aligned = [pyramid[0]] + [g.bilinear_resize(x, finest, finest)
                                  for x in pyramid[1:]]
        stacked = g.concat(aligned, axis=0)
        emb = self._conv_apply(g, pn, "sim.proj", stacked)
        return g.bilinear_resize(emb, *target_hw)


@dataclass
class ForwardResult:
    logits: Node
    aux_logits: list[Node]
    embeddings: tuple[Node, Node]
    pyramids: dict[int, list[Node]]
    change_map: np.ndarray = field(init=False)

    def __post_init__(self):
        p = self.logits.value
        self.change_map = (p[1] > p[0]).astype(np.float64)[None]


def forward(head: ChangeHead, g: Graph, raw: RawFeatures,
            target_hw: tuple[int, int], pn: dict[str, Node] | None = None) -> ForwardResult:
    """Full head forward; binds parameters unless a binding is supplied."""
    if pn is None:
        pn = head.bind(g)
    pyramids = head.modulate(g, pn, raw)
    refined = []
    for i in range(4):
        f1, f2 = pyramids[1][i], pyramids[2][i]
        att = head.difference_attention(g, pn, i, f1, f2)
        _, _, fused = head.difference_fuse(g, pn, i, f1, f2, att)
        d1, d2 = head.query_attend(g, pn, i, fused, f1, f2)
        refined.append(head.moe(g, pn, i, head.query_fuse(g, pn, i, d1, d2)))
    logits, aux = head.decode(g, pn, refined, target_hw)
    emb1 = head.similarity_embedding(g, pn, pyramids[1], target_hw)
    emb2 = head.similarity_embedding(g, pn, pyramids[2], target_hw)
    return ForwardResult(logits, aux, (emb1, emb2), pyramids)


__all__ = [
    "HeadConfig", "ChangeHead", "ForwardResult", "forward",
    "window_partition", "window_reverse", "relative_position_index",
    "level_sizes", "LEVEL_SCALES",
]
