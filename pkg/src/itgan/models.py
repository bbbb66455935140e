"""Networks (embedder ConvNet, conditional generator, discriminator, evaluation
classifiers), the ITGW weights format and the embedder snapshot pool."""
from __future__ import annotations

import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from . import tensor as T

WEIGHTS_MAGIC = b"ITGW"
WEIGHTS_VERSION = 1

ModelWeights = "OrderedDict[str, torch.Tensor]"


class WeightsFormatError(ValueError):
    pass


# ------------------------------------------------------------------- embedder


class ConvNet(nn.Module):
    """Blocks of conv3x3 -> instance norm (affine) -> relu -> avgpool 2x2, plus a linear head.

    ``embed`` returns the flattened final feature map; ``forward`` returns class logits.
    """

    def __init__(
        self,
        channels: int = 1,
        n_classes: int = 10,
        width: int = 128,
        depth: int = 3,
        image_size: int = 16,
    ):
        super().__init__()
        if image_size % (2**depth):
            raise ValueError(f"image size {image_size} not divisible by {2**depth}")
        self.channels, self.n_classes, self.width, self.depth = channels, n_classes, width, depth
        self.image_size = image_size
        self.convs = nn.ParameterList()
        self.biases = nn.ParameterList()
        self.norm_w = nn.ParameterList()
        self.norm_b = nn.ParameterList()
        c_in = channels
        for _ in range(depth):
            self.convs.append(nn.Parameter(torch.empty(width, c_in, 3, 3)))
            self.biases.append(nn.Parameter(torch.zeros(width)))
            self.norm_w.append(nn.Parameter(torch.ones(width)))
            self.norm_b.append(nn.Parameter(torch.zeros(width)))
            c_in = width
        side = image_size // 2**depth
        self.feature_dim = width * side * side
        self.head = nn.Linear(self.feature_dim, n_classes)

    def reset(self, gen: torch.Generator) -> ConvNet:
        with torch.no_grad():
            for w in self.convs:
                nn.init.kaiming_uniform_(w, nonlinearity="relu", generator=gen)
            for b in self.biases:
                b.zero_()
            for w in self.norm_w:
                w.fill_(1.0)
            for b in self.norm_b:
                b.zero_()
            bound = 1 / math.sqrt(self.feature_dim)
            nn.init.uniform_(self.head.weight, -bound, bound, generator=gen)
            self.head.bias.zero_()
        return self

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != self.channels:
            raise T.ShapeError(f"embed: expected (N, {self.channels}, H, W), got {tuple(x.shape)}")
        if x.shape[2] % 2**self.depth or x.shape[3] % 2**self.depth:
            raise T.ShapeError(f"embed: spatial size {tuple(x.shape[2:])} not divisible by {2**self.depth}")
        h = x
        for w, b, nw, nb in zip(self.convs, self.biases, self.norm_w, self.norm_b):
            h = T.conv2d(h, w, b, padding=1)
            h = T.instance_norm(h, nw, nb)
            h = T.avgpool2x2(T.relu(h))
        return h.flatten(1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.embed(x))


def embedder_init_random(
    seed: int,
    channels: int = 1,
    n_classes: int = 10,
    width: int = 128,
    image_size: int = 16,
) -> ConvNet:
    return ConvNet(channels, n_classes, width, 3, image_size).reset(T.generator(seed))


def embed(net: ConvNet, images: torch.Tensor) -> torch.Tensor:
    return net.embed(images)


# ------------------------------------------------------------------ generator


class ConditionalGenerator(nn.Module):
    """DCGAN-style generator conditioned by concatenating a learned class embedding to z.

    Normalization uses batch statistics while training. :meth:`freeze` replaces
    them with fixed statistics measured on a calibration sample, after which
    ``G(z, y)`` depends only on ``(z, y)``.
    """

    def __init__(
        self,
        n_classes: int = 10,
        latent_dim: int = 64,
        channels: int = 1,
        image_size: int = 16,
        embed_dim: int = 32,
        base: int = 128,
    ):
        super().__init__()
        if image_size % 4:
            raise ValueError("image size must be divisible by 4")
        self.n_classes, self.latent_dim, self.channels = n_classes, latent_dim, channels
        self.image_size, self.base = image_size, base
        self.s0 = image_size // 4
        widths = [base, base // 2, base // 4]
        self.widths = widths
        self.class_embed = nn.Parameter(torch.empty(n_classes, embed_dim))
        self.fc = nn.Linear(latent_dim + embed_dim, base * self.s0 * self.s0)
        self.conv1 = nn.Parameter(torch.empty(widths[1], widths[0], 3, 3))
        self.conv2 = nn.Parameter(torch.empty(widths[2], widths[1], 3, 3))
        self.out = nn.Parameter(torch.empty(channels, widths[2], 3, 3))
        self.out_bias = nn.Parameter(torch.zeros(channels))
        self.bn_w = nn.ParameterList([nn.Parameter(torch.ones(w)) for w in widths])
        self.bn_b = nn.ParameterList([nn.Parameter(torch.zeros(w)) for w in widths])
        for i, w in enumerate(widths):
            self.register_buffer(f"bn_mean{i}", torch.zeros(w))
            self.register_buffer(f"bn_var{i}", torch.ones(w))
        self.register_buffer("frozen_flag", torch.zeros(1))

    @property
    def frozen(self) -> bool:
        return bool(self.frozen_flag.item())

    def reset(self, gen: torch.Generator) -> ConditionalGenerator:
        with torch.no_grad():
            nn.init.normal_(self.class_embed, 0.0, 1.0, generator=gen)
            nn.init.normal_(self.fc.weight, 0.0, 0.02, generator=gen)
            self.fc.bias.zero_()
            for w in (self.conv1, self.conv2, self.out):
                nn.init.normal_(w, 0.0, 0.02, generator=gen)
            self.out_bias.zero_()
            for w in self.bn_w:
                nn.init.normal_(w, 1.0, 0.02, generator=gen)
            for b in self.bn_b:
                b.zero_()
        return self

    def _norm(self, h: torch.Tensor, i: int, stats: list | None) -> torch.Tensor:
        w, b = self.bn_w[i], self.bn_b[i]
        if self.frozen:
            shape = (1, -1, 1, 1)
            mean = getattr(self, f"bn_mean{i}").view(shape)
            var = getattr(self, f"bn_var{i}").view(shape)
            return (h - mean) / torch.sqrt(var + T.NORM_EPS) * w.view(shape) + b.view(shape)
        if stats is not None:
            m = h.detach().mean(dim=(0, 2, 3))
            stats.append((m, ((h.detach() - m.view(1, -1, 1, 1)) ** 2).mean(dim=(0, 2, 3))))
        return T.batch_norm_lite(h, w, b)

    def forward(self, z: torch.Tensor, y: torch.Tensor, _stats: list | None = None) -> torch.Tensor:
        if z.dim() != 2 or z.shape[1] != self.latent_dim:
            raise T.ShapeError(f"generate: z must be (N, {self.latent_dim}), got {tuple(z.shape)}")
        y = torch.as_tensor(y, dtype=torch.long)
        if y.shape != (z.shape[0],):
            raise T.ShapeError("generate: one label per latent required")
        if y.numel() and (int(y.min()) < 0 or int(y.max()) >= self.n_classes):
            raise ValueError(f"generate: label outside [0, {self.n_classes})")
        e = T.embed_lookup(self.class_embed, y)
        h = T.linear(T.concat([z, e], dim=1), self.fc.weight, self.fc.bias)
        h = T.relu(self._norm(h.view(len(z), self.base, self.s0, self.s0), 0, _stats))
        h = T.conv2d(T.upsample_nearest2x(h), self.conv1, padding=1)
        h = T.relu(self._norm(h, 1, _stats))
        h = T.conv2d(T.upsample_nearest2x(h), self.conv2, padding=1)
        h = T.relu(self._norm(h, 2, _stats))
        return T.tanh(T.conv2d(h, self.out, self.out_bias, padding=1))

    @torch.no_grad()
    def freeze(self, n_batches: int = 16, batch: int = 256, seed: int = 0) -> ConditionalGenerator:
        """Fix normalization statistics from ``n_batches`` random (z, y) batches and mark frozen."""
        self.frozen_flag.zero_()
        gen = T.generator(seed)
        acc: list[list[torch.Tensor]] = [[torch.zeros(w), torch.zeros(w)] for w in self.widths]
        for _ in range(n_batches):
            z = torch.randn(batch, self.latent_dim, generator=gen)
            y = torch.randint(0, self.n_classes, (batch,), generator=gen)
            stats: list = []
            self.forward(z, y, stats)
            for a, (m, v) in zip(acc, stats):
                a[0] += m / n_batches
                a[1] += v / n_batches
        for i, (m, v) in enumerate(acc):
            getattr(self, f"bn_mean{i}").copy_(m)
            getattr(self, f"bn_var{i}").copy_(v)
        self.frozen_flag.fill_(1.0)
        for p in self.parameters():
            p.requires_grad_(False)
        return self


def generator_init(seed: int, **kw) -> ConditionalGenerator:
    return ConditionalGenerator(**kw).reset(T.generator(seed))


def generate(G: ConditionalGenerator, z: torch.Tensor, y) -> torch.Tensor:
    return G(z, y)


# -------------------------------------------------------------- discriminator


class Discriminator(nn.Module):
    """Two strided convs ending in a minibatch standard-deviation plane, so a batch of
    near-identical samples is detectable, with two heads: the real/fake logit and an
    auxiliary class head.

    ``conditioning="planes"`` concatenates one one-hot plane per class to the input;
    ``"projection"`` keeps the features label-free and adds ``<embed(y), h>`` to the logit.
    """

    CONDITIONING = ("planes", "projection")

    def __init__(
        self,
        n_classes: int = 10,
        channels: int = 1,
        image_size: int = 16,
        base: int = 64,
        conditioning: str = "planes",
    ):
        super().__init__()
        if conditioning not in self.CONDITIONING:
            raise ValueError(f"conditioning must be one of {self.CONDITIONING}, got {conditioning!r}")
        self.n_classes, self.channels, self.image_size = n_classes, channels, image_size
        self.conditioning = conditioning
        c_in = channels + (n_classes if conditioning == "planes" else 0)
        self.conv1 = nn.Parameter(torch.empty(base, c_in, 4, 4))
        self.b1 = nn.Parameter(torch.zeros(base))
        self.conv2 = nn.Parameter(torch.empty(2 * base, base, 4, 4))
        self.b2 = nn.Parameter(torch.zeros(2 * base))
        side = image_size // 4
        feat = (2 * base + 1) * side * side
        self.fc = nn.Linear(feat, 1)
        self.proj = nn.Parameter(torch.empty(n_classes, feat)) if conditioning == "projection" else None
        self.cls = nn.Linear(feat, n_classes)

    def reset(self, gen: torch.Generator) -> Discriminator:
        with torch.no_grad():
            for w in (self.conv1, self.conv2, self.fc.weight, self.proj, self.cls.weight):
                if w is not None:
                    nn.init.normal_(w, 0.0, 0.02, generator=gen)
            for b in (self.b1, self.b2, self.fc.bias, self.cls.bias):
                b.zero_()
        return self

    def label_planes(self, y: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
        """One-hot conditioning planes, one per class, each the image's spatial shape."""
        y = torch.as_tensor(y, dtype=torch.long)
        onehot = F.one_hot(y, self.n_classes).to(like.dtype)
        return onehot[:, :, None, None].expand(len(y), self.n_classes, like.shape[2], like.shape[3])

    def features(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        if self.conditioning == "planes":
            x = T.concat([x, self.label_planes(y, x)], dim=1)
        h = T.leaky_relu(T.conv2d(x, self.conv1, self.b1, stride=2, padding=1))
        h = T.leaky_relu(T.conv2d(h, self.conv2, self.b2, stride=2, padding=1))
        spread = torch.sqrt(h.var(dim=0, unbiased=False) + 1e-8).mean() if len(h) > 1 else h.new_zeros(())
        plane = spread.expand(len(h), 1, h.shape[2], h.shape[3])
        return T.concat([h, plane], dim=1).flatten(1)

    def logit(self, h: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        out = self.fc(h).squeeze(1)
        if self.proj is None:
            return out
        y = torch.as_tensor(y, dtype=torch.long)
        return out + (T.embed_lookup(self.proj, y) * h).sum(1)

    def class_logits(self, h: torch.Tensor) -> torch.Tensor:
        return self.cls(h)

    def forward(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        return self.logit(self.features(x, y), y)


def discriminator_init(seed: int, **kw) -> Discriminator:
    return Discriminator(**kw).reset(T.generator(seed))


# ---------------------------------------------------- cross-architecture nets


class VGGish(nn.Module):
    """Six 3x3 convs in three pooled stages."""

    def __init__(self, channels: int = 1, n_classes: int = 10, width: int = 64, image_size: int = 16):
        super().__init__()
        layers: list[nn.Module] = []
        c_in = channels
        for stage in range(3):
            c_out = width * (1 if stage == 0 else 2)
            for _ in range(2):
                layers += [nn.Conv2d(c_in, c_out, 3, padding=1), nn.GroupNorm(c_out, c_out), nn.ReLU()]
                c_in = c_out
            layers.append(nn.AvgPool2d(2))
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(c_in * (image_size // 8) ** 2, n_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x).flatten(1))


class _ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False)
        self.n1 = nn.GroupNorm(c_out, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1, bias=False)
        self.n2 = nn.GroupNorm(c_out, c_out)
        self.skip = (
            nn.Sequential(nn.Conv2d(c_in, c_out, 1, stride=stride, bias=False), nn.GroupNorm(c_out, c_out))
            if stride != 1 or c_in != c_out
            else nn.Identity()
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = torch.relu(self.n1(self.conv1(x)))
        return torch.relu(self.n2(self.conv2(h)) + self.skip(x))


class ResNetish(nn.Module):
    """Stem conv and two residual stages (second one strided), global average pool, linear head."""

    def __init__(self, channels: int = 1, n_classes: int = 10, width: int = 32, image_size: int = 16):
        super().__init__()
        self.stem = nn.Sequential(nn.Conv2d(channels, width, 3, padding=1, bias=False), nn.GroupNorm(width, width), nn.ReLU())
        self.stage1 = _ResBlock(width, width, 1)
        self.stage2 = _ResBlock(width, 2 * width, 2)
        self.head = nn.Linear(2 * width, n_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.stage2(self.stage1(self.stem(x)))
        return self.head(h.mean(dim=(2, 3)))


ARCHITECTURES = ("convnet", "vggish", "resnetish")


def build_classifier(arch: str, seed: int, channels: int, n_classes: int, width: int, image_size: int) -> nn.Module:
    if arch == "convnet":
        return embedder_init_random(seed, channels, n_classes, width, image_size)
    torch.manual_seed(seed)
    if arch == "vggish":
        return VGGish(channels, n_classes, max(width // 2, 8), image_size)
    if arch == "resnetish":
        return ResNetish(channels, n_classes, max(width // 2, 8), image_size)
    raise ValueError(f"unknown architecture {arch!r}; expected one of {ARCHITECTURES}")


# ------------------------------------------------------------ weights format


def weights_bytes(weights: "OrderedDict[str, torch.Tensor]") -> bytes:
    out = [WEIGHTS_MAGIC, struct.pack("<II", WEIGHTS_VERSION, len(weights))]
    seen = set()
    for name, t in weights.items():
        if name in seen:
            raise WeightsFormatError(f"duplicate tensor name {name!r}")
        seen.add(name)
        raw = name.encode("utf-8")
        arr = t.detach().cpu().to(torch.float32).contiguous().numpy()
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<BB", 0, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.astype("<f4").tobytes())
    return b"".join(out)


def save_weights(weights: "OrderedDict[str, torch.Tensor]", path: str | Path) -> None:
    Path(path).write_bytes(weights_bytes(weights))


def parse_weights(buf: bytes) -> "OrderedDict[str, torch.Tensor]":
    def take(fmt: str, off: int) -> tuple[tuple, int]:
        size = struct.calcsize(fmt)
        if off + size > len(buf):
            raise WeightsFormatError("truncated weights file")
        return struct.unpack_from(fmt, buf, off), off + size

    if buf[:4] != WEIGHTS_MAGIC:
        raise WeightsFormatError(f"bad magic {buf[:4]!r}")
    (version, count), off = take("<II", 4)
    if version > WEIGHTS_VERSION:
        raise WeightsFormatError(f"unsupported weights version {version}")
    weights: OrderedDict[str, torch.Tensor] = OrderedDict()
    for _ in range(count):
        (n,), off = take("<H", off)
        if off + n > len(buf):
            raise WeightsFormatError("truncated weights file")
        name = buf[off : off + n].decode("utf-8")
        off += n
        (dtype, ndim), off = take("<BB", off)
        if dtype != 0:
            raise WeightsFormatError(f"unsupported dtype code {dtype}")
        dims, off = take(f"<{ndim}I", off)
        numel = int(np.prod(dims)) if ndim else 1
        if off + 4 * numel > len(buf):
            raise WeightsFormatError("truncated weights file")
        arr = np.frombuffer(buf, dtype="<f4", count=numel, offset=off).reshape(dims).copy()
        off += 4 * numel
        if name in weights:
            raise WeightsFormatError(f"duplicate tensor name {name!r}")
        weights[name] = torch.from_numpy(arr)
    return weights


def load_weights(path: str | Path) -> "OrderedDict[str, torch.Tensor]":
    return parse_weights(Path(path).read_bytes())


def state(module: nn.Module) -> "OrderedDict[str, torch.Tensor]":
    return OrderedDict((k, v.detach().clone()) for k, v in module.state_dict().items())


def weights_equal(a: "OrderedDict[str, torch.Tensor]", b: "OrderedDict[str, torch.Tensor]") -> bool:
    return list(a) == list(b) and all(torch.equal(a[k], b[k]) for k in a)


# Architecture hyper-parameters travel with the weights as scalar tensors.
def _with_meta(module: nn.Module, meta: dict[str, int]) -> "OrderedDict[str, torch.Tensor]":
    w = OrderedDict((f"meta.{k}", torch.tensor([float(v)])) for k, v in meta.items())
    w.update(state(module))
    return w


def _split_meta(weights: "OrderedDict[str, torch.Tensor]") -> tuple[dict[str, int], "OrderedDict[str, torch.Tensor]"]:
    meta = {k[5:]: int(v.item()) for k, v in weights.items() if k.startswith("meta.")}
    rest = OrderedDict((k, v) for k, v in weights.items() if not k.startswith("meta."))
    return meta, rest


def generator_weights(G: ConditionalGenerator) -> "OrderedDict[str, torch.Tensor]":
    meta = dict(
        n_classes=G.n_classes,
        latent_dim=G.latent_dim,
        channels=G.channels,
        image_size=G.image_size,
        embed_dim=G.class_embed.shape[1],
        base=G.base,
    )
    return _with_meta(G, meta)


def generator_from_weights(weights) -> ConditionalGenerator:
    meta, rest = _split_meta(weights)
    G = ConditionalGenerator(**meta)
    G.load_state_dict(rest)
    if G.frozen:
        for p in G.parameters():
            p.requires_grad_(False)
    return G


def discriminator_weights(D: Discriminator) -> "OrderedDict[str, torch.Tensor]":
    meta = dict(
        n_classes=D.n_classes,
        channels=D.channels,
        image_size=D.image_size,
        base=D.conv1.shape[0],
        conditioning=Discriminator.CONDITIONING.index(D.conditioning),
    )
    return _with_meta(D, meta)


def discriminator_from_weights(weights) -> Discriminator:
    meta, rest = _split_meta(weights)
    meta["conditioning"] = Discriminator.CONDITIONING[meta.get("conditioning", 0)]
    D = Discriminator(**meta)
    D.load_state_dict(rest)
    return D


def convnet_meta(net: ConvNet) -> dict[str, int]:
    return dict(channels=net.channels, n_classes=net.n_classes, width=net.width, depth=net.depth, image_size=net.image_size)


# --------------------------------------------------------------- snapshot pool

DEFAULT_BINS = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 1.0)


@dataclass
class Snapshot:
    weights: "OrderedDict[str, torch.Tensor]"
    val_acc: float


@dataclass
class SnapshotPool:
    snapshots: list[Snapshot]
    bin_edges: tuple[float, ...] = DEFAULT_BINS
    arch: dict[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        edges = tuple(float(e) for e in self.bin_edges)
        if len(edges) < 2 or any(b <= a for a, b in zip(edges, edges[1:])):
            raise ValueError(f"bin edges must be strictly increasing: {edges}")
        if edges[0] > 0.0 or edges[-1] < 1.0:
            raise ValueError("bin edges must cover [0, 1]")
        self.bin_edges = edges
        for s in self.snapshots:
            if not 0.0 <= s.val_acc <= 1.0:
                raise ValueError(f"validation accuracy {s.val_acc} outside [0, 1]")

    def __len__(self) -> int:
        return len(self.snapshots)

    def bin_of(self, acc: float) -> int:
        edges = self.bin_edges
        for i in range(len(edges) - 1):
            last = i == len(edges) - 2
            if edges[i] <= acc < edges[i + 1] or (last and acc <= edges[i + 1]):
                return i
        raise ValueError(f"accuracy {acc} outside bins")

    def bins(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in range(len(self.bin_edges) - 1)]
        for i, s in enumerate(self.snapshots):
            out[self.bin_of(s.val_acc)].append(i)
        return out

    def members(self, lo: float, hi: float) -> list[int]:
        """Snapshots whose bin lies inside [lo, hi]."""
        out = []
        for b, idx in enumerate(self.bins()):
            if self.bin_edges[b] >= lo - 1e-12 and self.bin_edges[b + 1] <= hi + 1e-12:
                out.extend(idx)
        return sorted(out)

    def top_bin(self) -> list[int]:
        for idx in reversed(self.bins()):
            if idx:
                return idx
        raise ValueError("empty pool")

    def net(self, i: int) -> ConvNet:
        net = ConvNet(**self.arch)
        net.load_state_dict(self.snapshots[i].weights)
        return net

    def best(self) -> int:
        return max(range(len(self.snapshots)), key=lambda i: (self.snapshots[i].val_acc, -i))


class EmptyBinError(ValueError):
    pass


def pool_sample(pool: SnapshotPool | None, selector, rng: np.random.Generator, arch: dict | None = None) -> ConvNet:
    """Draw an embedder: ``"random-init"``, ``"all"``, ``"top"`` or a ``(lo, hi)`` accuracy range."""
    if selector == "random-init":
        a = dict(arch or (pool.arch if pool is not None else {}))
        a.pop("depth", None)
        # Offset keeps fresh-init seeds disjoint from the seeds pool training used.
        return embedder_init_random(int(rng.integers(2**40, 2**62)), **a)
    if pool is None:
        raise EmptyBinError(f"selector {selector!r} needs a snapshot pool")
    if selector == "all":
        group = list(range(len(pool)))
    elif selector == "top":
        group = pool.top_bin()
    else:
        lo, hi = selector
        group = pool.members(lo, hi)
    if not group:
        raise EmptyBinError(f"no snapshots for selector {selector!r}")
    return pool.net(group[int(rng.integers(len(group)))])


def pool_weights(pool: SnapshotPool) -> "OrderedDict[str, torch.Tensor]":
    w: OrderedDict[str, torch.Tensor] = OrderedDict()
    for k, v in pool.arch.items():
        w[f"meta.{k}"] = torch.tensor([float(v)])
    w["pool.val_acc"] = torch.tensor([s.val_acc for s in pool.snapshots], dtype=torch.float32)
    # Edges in parts-per-million: integers below 2**24 are exact in f32.
    w["pool.bin_edges_ppm"] = torch.tensor([round(e * 1e6) for e in pool.bin_edges], dtype=torch.float32)
    for i, s in enumerate(pool.snapshots):
        for k, v in s.weights.items():
            w[f"snap{i:04d}.{k}"] = v
    return w


def pool_from_weights(weights) -> SnapshotPool:
    meta, rest = _split_meta(weights)
    accs = [float(a) for a in rest.pop("pool.val_acc").tolist()] if "pool.val_acc" in rest else []
    edges = tuple(int(e) / 1e6 for e in rest.pop("pool.bin_edges_ppm").tolist())
    snaps: list[OrderedDict[str, torch.Tensor]] = [OrderedDict() for _ in accs]
    for k, v in rest.items():
        i, name = k[4:].split(".", 1)
        snaps[int(i)][name] = v
    return SnapshotPool([Snapshot(w, a) for w, a in zip(snaps, accs)], edges, meta)


def save_pool(pool: SnapshotPool, path: str | Path) -> None:
    save_weights(pool_weights(pool), path)


def load_pool(path: str | Path) -> SnapshotPool:
    return pool_from_weights(load_weights(path))


def f32(x: float) -> float:
    """Round to the nearest float32 so values survive the weights format bit-exactly."""
    return float(np.float32(x))


def parameters(modules: Iterable[nn.Module]) -> list[torch.Tensor]:
    return [p for m in modules for p in m.parameters()]


def pool_build(
    train,
    val,
    count: int,
    bins: tuple[float, ...] = DEFAULT_BINS,
    epochs: int = 3,
    width: int = 128,
    seed: int = 0,
    lr: float = 0.01,
    batch: int = 64,
) -> SnapshotPool:
    """Train embedder+head nets and keep a snapshot after every epoch (the untrained
    net included) until ``count`` snapshots exist; each is scored on ``val``."""
    from .training import FitConfig, accuracy, fit

    if count < 1:
        raise ValueError("count must be >= 1")
    if len(train) == 0:
        raise ValueError("empty dataset")
    ch, h, _ = train.image_shape
    arch = dict(channels=ch, n_classes=train.n_classes, width=width, depth=3, image_size=h)
    x, y = train.images(), train.targets()
    xv, yv = val.images(), val.targets()
    snaps: list[Snapshot] = []
    cfg = FitConfig(epochs=epochs, lr=lr, batch=batch, lr_decay_at=1.0)
    j = 0
    while len(snaps) < count:
        net = embedder_init_random(seed * 1000 + j, ch, train.n_classes, width, h)

        def keep(epoch: int, model: nn.Module) -> None:
            if len(snaps) < count:
                snaps.append(Snapshot(state(model), f32(accuracy(model, xv, yv))))

        if epochs == 0:
            keep(0, net)
        else:
            fit(net, x, y, cfg, seed=seed * 1000 + j, on_epoch=keep)
        j += 1
    return SnapshotPool(snaps, bins, arch)
