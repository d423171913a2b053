"""The three architectures: Inception-style montage CNN, plane transformer, P-ResNet."""
import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from .tensor import Tensor, functional as F
from .tensor.functional import ConfigError, ShapeError
from .tensor.nn import (
    BatchNorm2d, Conv2d, Dropout, Linear, Module, ReLU, Sequential, TransformerLayer,
)

KINDS = ("inception_grid", "plane_transformer", "pruned_resnet")
DEFAULT_DROPOUT = {"inception_grid": 0.6, "plane_transformer": 0.4, "pruned_resnet": 0.4}
PLANE_SIZES = {"axial": 77, "coronal": 128, "sagittal": 128}
PRESNET_WIDTHS = (16, 32, 64, 128)
RESNET18_WIDTHS = (64, 128, 256, 512)


class ActivationError(FloatingPointError):
    pass


@dataclass
class ModelConfig:
    kind: str
    num_classes: int = 2
    slices: int = 16
    dropout: float = None
    width: float = 1.0
    token_dim: int = 64
    heads: int = 4
    layers: int = 1
    image_size: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.num_classes not in (2, 3):
            raise ConfigError(f"num_classes must be 2 or 3, got {self.num_classes}")
        if self.slices not in (16, 77):
            raise ConfigError(f"slices must be 16 or 77, got {self.slices}")
        if self.kind in ("inception_grid", "pruned_resnet") and self.slices != 16:
            raise ConfigError(f"{self.kind} requires slices = 16, got {self.slices}")
        if self.dropout is None:
            self.dropout = DEFAULT_DROPOUT[self.kind]
        if self.kind == "plane_transformer" and self.token_dim % self.heads:
            raise ConfigError(f"token_dim {self.token_dim} is not divisible by heads={self.heads}")
        if self.width <= 0 or self.image_size < 8:
            raise ConfigError("width must be > 0 and image_size >= 8")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def config_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @property
    def tokens(self):
        if self.kind != "plane_transformer" or self.slices == 16:
            return 16
        return sum(PLANE_SIZES.values())

    def input_shape(self):
        """Per-sample input shape expected by ``forward``."""
        s = self.image_size
        if self.kind == "inception_grid":
            return (1, 4 * s, 4 * s)
        return (self.tokens, s, s)


def _ch(n, width):
    return max(1, int(round(n * width)))


def _check(t, where):
    if not np.all(np.isfinite(t.data)):
        raise ActivationError(f"non-finite activation in {where}")
    return t


class ConvBNReLU(Module):
    def __init__(self, c_in, c_out, k, rng, stride=1, padding=0):
        super().__init__()
        self.conv = Conv2d(c_in, c_out, k, rng, stride, padding)
        self.bn = BatchNorm2d(c_out)

    def forward(self, x):
        return F.relu(self.bn(self.conv(x)))


# -- ResNet-18 topology --------------------------------------------------------------
class BasicBlock(Module):
    def __init__(self, c_in, c_out, stride, rng):
        super().__init__()
        self.conv1 = Conv2d(c_in, c_out, 3, rng, stride, 1)
        self.bn1 = BatchNorm2d(c_out)
        self.conv2 = Conv2d(c_out, c_out, 3, rng, 1, 1)
        self.bn2 = BatchNorm2d(c_out)
        self.shortcut = None
        if stride != 1 or c_in != c_out:
            self.shortcut = Sequential(Conv2d(c_in, c_out, 1, rng, stride), BatchNorm2d(c_out))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        skip = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + skip)


class ResNet18Encoder(Module):
    """1-channel ResNet-18 trunk ending in global average pooling."""

    def __init__(self, widths, rng):
        super().__init__()
        w1, w2, w3, w4 = widths
        self.stem = ConvBNReLU(1, w1, 7, rng, stride=2, padding=3)
        self.layer1 = Sequential(BasicBlock(w1, w1, 1, rng), BasicBlock(w1, w1, 1, rng))
        self.layer2 = Sequential(BasicBlock(w1, w2, 2, rng), BasicBlock(w2, w2, 1, rng))
        self.layer3 = Sequential(BasicBlock(w2, w3, 2, rng), BasicBlock(w3, w3, 1, rng))
        self.layer4 = Sequential(BasicBlock(w3, w4, 2, rng), BasicBlock(w4, w4, 1, rng))
        self.out_dim = w4

    def forward(self, x):
        x = self.stem(x)
        x = F.max_pool2d(x, 3, 2, 1)
        x = self.layer4(self.layer3(self.layer2(self.layer1(x))))
        return F.global_avg_pool2d(x)


class SliceEmbedder(Module):
    """Encode (N, T, S, S) slices to (N, T, d) tokens with a shared encoder."""

    def __init__(self, widths, d, rng):
        super().__init__()
        self.encoder = ResNet18Encoder(widths, rng)
        self.proj = Linear(self.encoder.out_dim, d, rng)

    def forward(self, x):
        N, T, H, W = x.shape
        feats = self.encoder(x.reshape(N * T, 1, H, W))
        return self.proj(feats).reshape(N, T, -1)


# -- models ------------------------------------------------------------------------------
class Classifier(Module):
    """Common surface: ``logits``, ``forward`` (softmax), ``config``."""

    def __init__(self, cfg):
        super().__init__()
        object.__setattr__(self, "config", cfg)

    def _check_input(self, x):
        want = self.config.input_shape()
        if x.ndim != 4 or tuple(x.shape[1:]) != want:
            raise ShapeError(f"{self.config.kind} expects input (N, {', '.join(map(str, want))}), got {tuple(x.shape)}")

    def forward(self, x):
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x), dtype=self.dtype)
        return F.softmax(_check(self.logits(x), "logits"), axis=-1)

    @property
    def dtype(self):
        return self.parameters()[0].dtype


class PrunedResNet(Classifier):
    def __init__(self, cfg, rng):
        super().__init__(cfg)
        widths = tuple(_ch(w, cfg.width) for w in PRESNET_WIDTHS)
        self.embed = SliceEmbedder(widths, 1, rng)
        self.drop = Dropout(cfg.dropout, rng)
        self.fc = Linear(16, cfg.num_classes, rng)

    def features(self, x):
        """Penultimate (N, 16) vector: one scalar per axial slice."""
        self._check_input(x)
        z = _check(self.embed(x), "slice encoder")
        return z.reshape(x.shape[0], 16)

    def logits(self, x):
        return self.fc(self.drop(self.features(x)))


class PlaneTransformer(Classifier):
    def __init__(self, cfg, rng):
        super().__init__(cfg)
        widths = tuple(_ch(w, cfg.width) for w in RESNET18_WIDTHS)
        d = cfg.token_dim
        planes = ("axial",) if cfg.slices == 16 else ("axial", "coronal", "sagittal")
        object.__setattr__(self, "planes", planes)
        for p in planes:
            setattr(self, p, SliceEmbedder(widths, d, rng))
        self.blocks = Sequential(*[TransformerLayer(d, cfg.heads, 2 * d, rng) for _ in range(cfg.layers)])
        self.drop = Dropout(cfg.dropout, rng)
        self.fc1 = Linear(d, d, rng)
        self.fc2 = Linear(d, cfg.num_classes, rng)

    def plane_counts(self):
        return (16,) if self.config.slices == 16 else tuple(PLANE_SIZES[p] for p in self.planes)

    def tokens(self, x):
        """(N, L, d) token sequence with positional encodings added."""
        self._check_input(x)
        parts, start = [], 0
        for p, n in zip(self.planes, self.plane_counts()):
            parts.append(getattr(self, p)(x[:, start:start + n]))
            start += n
        seq = parts[0] if len(parts) == 1 else F.concat(parts, axis=1)
        return F.add_positional_encoding(_check(seq, "slice encoders"))

    def logits(self, x):
        h = _check(self.blocks(self.tokens(x)), "transformer")
        h = self.drop(h).mean(axis=1)
        return self.fc2(F.relu(self.fc1(h)))


class InceptionA(Module):
    def __init__(self, c_in, pool_features, w, rng):
        super().__init__()
        self.b1 = ConvBNReLU(c_in, _ch(64, w), 1, rng)
        self.b3 = Sequential(ConvBNReLU(c_in, _ch(48, w), 1, rng), ConvBNReLU(_ch(48, w), _ch(64, w), 3, rng, padding=1))
        self.bd = Sequential(
            ConvBNReLU(c_in, _ch(64, w), 1, rng),
            ConvBNReLU(_ch(64, w), _ch(96, w), 3, rng, padding=1),
            ConvBNReLU(_ch(96, w), _ch(96, w), 3, rng, padding=1),
        )
        self.bp = ConvBNReLU(c_in, _ch(pool_features, w), 1, rng)
        self.out_ch = _ch(64, w) + _ch(64, w) + _ch(96, w) + _ch(pool_features, w)

    def forward(self, x):
        pooled = F.avg_pool2d(x, 3, 1, 1)
        return F.concat([self.b1(x), self.b3(x), self.bd(x), self.bp(pooled)], axis=1)


class ReductionA(Module):
    def __init__(self, c_in, w, rng):
        super().__init__()
        self.b3 = ConvBNReLU(c_in, _ch(384, w), 3, rng, stride=2)
        self.bd = Sequential(
            ConvBNReLU(c_in, _ch(64, w), 1, rng),
            ConvBNReLU(_ch(64, w), _ch(96, w), 3, rng, padding=1),
            ConvBNReLU(_ch(96, w), _ch(96, w), 3, rng, stride=2),
        )
        self.out_ch = _ch(384, w) + _ch(96, w) + c_in

    def forward(self, x):
        return F.concat([self.b3(x), self.bd(x), F.max_pool2d(x, 3, 2)], axis=1)


class InceptionGrid(Classifier):
    def __init__(self, cfg, rng):
        super().__init__(cfg)
        w = cfg.width
        self.stem = Sequential(
            ConvBNReLU(1, _ch(32, w), 3, rng, stride=2),
            ConvBNReLU(_ch(32, w), _ch(32, w), 3, rng),
            ConvBNReLU(_ch(32, w), _ch(64, w), 3, rng, padding=1),
        )
        self.stem2 = Sequential(ConvBNReLU(_ch(64, w), _ch(80, w), 1, rng), ConvBNReLU(_ch(80, w), _ch(128, w), 3, rng))
        self.mixed1 = InceptionA(_ch(128, w), 32, w, rng)
        self.mixed2 = InceptionA(self.mixed1.out_ch, 64, w, rng)
        self.reduce = ReductionA(self.mixed2.out_ch, w, rng)
        self.mixed3 = InceptionA(self.reduce.out_ch, 64, w, rng)
        self.drop = Dropout(cfg.dropout, rng)
        self.fc = Linear(self.mixed3.out_ch, cfg.num_classes, rng)

    def logits(self, x):
        self._check_input(x)
        h = F.max_pool2d(self.stem(x), 3, 2)
        h = F.max_pool2d(self.stem2(h), 3, 2)
        h = _check(self.mixed2(self.mixed1(h)), "inception blocks")
        h = self.mixed3(self.reduce(h))
        return self.fc(self.drop(F.global_avg_pool2d(h)))


_BUILDERS = {"inception_grid": InceptionGrid, "plane_transformer": PlaneTransformer, "pruned_resnet": PrunedResNet}


def build_model(cfg):
    rng = np.random.default_rng(cfg.seed)
    return _BUILDERS[cfg.kind](cfg, rng)


def build_inception(cfg):
    if cfg.kind != "inception_grid":
        raise ConfigError(f"build_inception needs kind inception_grid, got {cfg.kind}")
    return build_model(cfg)


def build_transformer(cfg):
    if cfg.kind != "plane_transformer":
        raise ConfigError(f"build_transformer needs kind plane_transformer, got {cfg.kind}")
    return build_model(cfg)


def build_presnet(cfg):
    if cfg.kind != "pruned_resnet":
        raise ConfigError(f"build_presnet needs kind pruned_resnet, got {cfg.kind}")
    return build_model(cfg)


def forward(model, batch):
    """Class probabilities for a batch."""
    return model.forward(batch)


def count_parameters(model):
    """(total, [(block name, shape, count), ...])."""
    table = [(name, p.shape, int(p.size)) for name, p in model.named_parameters()]
    return sum(n for _, _, n in table), table


def describe(model):
    total, table = count_parameters(model)
    width = max(len(n) for n, _, _ in table)
    lines = [f"{'block':{width}s}  {'shape':>20s}  {'params':>10s}"]
    for name, shape, n in table:
        lines.append(f"{name:{width}s}  {str(tuple(shape)):>20s}  {n:10d}")
    lines.append(f"{'total':{width}s}  {'':>20s}  {total:10d}")
    return "\n".join(lines)
