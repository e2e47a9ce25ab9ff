"""SRENet-mini and its standard-convolution twin.

Topology (one residual block per stage by default)::

    stem: conv(k0) - norm - relu
    stage 1: block(k0)                      -> tap 1   (H, W)
    stage s>1: avgpool2 - conv1x1 - block(ks) -> tap s (H / 2**(s-1))
    head: global average pool - linear

A block is conv-norm-relu-conv-norm plus identity skip, then relu.  The
``sre`` variant uses ring-symmetric kernels for every k > 1 convolution, so
all four taps commute with quarter-turn rotation.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import nn
from .imaging import read_bundle, write_bundle
from .nn import SRE, STANDARD

VARIANTS = (SRE, STANDARD)


@dataclass
class ModelConfig:
    variant: str = SRE
    stage_channels: tuple = (16, 32, 64, 128)
    blocks_per_stage: int = 1
    sre_kernel_sizes: tuple = (9, 9, 5, 5)
    # the baseline keeps ResNet's 3x3 kernels
    standard_kernel_sizes: tuple = (3, 3, 3, 3)
    num_classes: int = 4
    in_channels: int = 3
    input_size: int = 64
    seed: int = 0

    def __post_init__(self):
        self.variant = str(self.variant).lower()
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.sre_kernel_sizes = tuple(int(k) for k in self.sre_kernel_sizes)
        self.standard_kernel_sizes = tuple(int(k) for k in self.standard_kernel_sizes)
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        for name in ("stage_channels", "sre_kernel_sizes", "standard_kernel_sizes"):
            if len(getattr(self, name)) != 4:
                raise ValueError(f"{name} needs exactly four entries")
        for k in self.sre_kernel_sizes + self.standard_kernel_sizes:
            if k < 1 or k % 2 == 0:
                raise ValueError(f"kernel sizes must be odd and positive, got {k}")
        if any(c < 1 for c in self.stage_channels):
            raise ValueError("channel counts must be positive")
        if any(b < a for a, b in zip(self.stage_channels, self.stage_channels[1:])):
            raise ValueError("stage_channels must be non-decreasing")
        if self.blocks_per_stage < 1 or self.num_classes < 1 or self.in_channels < 1:
            raise ValueError("blocks_per_stage, num_classes and in_channels must be positive")

    @property
    def kernel_sizes(self):
        return self.sre_kernel_sizes if self.variant == SRE else self.standard_kernel_sizes


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 24
    base_lr: float = 2e-2
    momentum: float = 0.9

    def lr_at(self, epoch: int) -> float:
        return cosine_lr(self.base_lr, epoch, self.epochs)


def cosine_lr(base_lr, epoch, epochs):
    """Cosine annealing from ``base_lr`` at epoch 0 towards 0 at ``epochs``."""
    return base_lr * (1.0 + math.cos(math.pi * epoch / epochs)) / 2.0


class ResidualBlock(nn.Layer):
    """conv-norm-relu-conv-norm + identity, then relu."""

    def __init__(self, conv_factory, channels, dtype):
        super().__init__()
        self.conv1 = conv_factory()
        self.norm1 = nn.BatchNorm2d(channels, dtype=dtype)
        self.relu1 = nn.ReLU()
        self.conv2 = conv_factory()
        self.norm2 = nn.BatchNorm2d(channels, dtype=dtype)
        self.relu_out = nn.ReLU()

    def children(self):
        return [("conv1", self.conv1), ("norm1", self.norm1), ("conv2", self.conv2), ("norm2", self.norm2)]

    def forward(self, x, train=False, need_grad=None):
        h = self.relu1(self.norm1(self.conv1(x, train, need_grad), train, need_grad), train, need_grad)
        h = self.norm2(self.conv2(h, train, need_grad), train, need_grad)
        return self.relu_out(h + x, train, need_grad)

    def backward(self, dout):
        g = self.relu_out.backward(dout)
        dh = self.conv1.backward(self.norm1.backward(self.relu1.backward(
            self.conv2.backward(self.norm2.backward(g)))))
        return dh + g


class Network:
    """Layered parameter container with feature taps 1..4 and a linear head."""

    def __init__(self, config: ModelConfig, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(np.random.SeedSequence(config.seed))
        ks = config.kernel_sizes
        ch = config.stage_channels

        def conv(cin, cout, k):
            child = rng.integers(2**63)
            if config.variant == SRE and k > 1:
                return nn.SREConv2d(cin, cout, k, rng=child, dtype=self.dtype)
            return nn.Conv2d(cin, cout, k, rng=child, dtype=self.dtype)

        # (name, layer) in execution order; tap_after[s] = index of the last layer of stage s
        seq = [
            ("stem.conv", conv(config.in_channels, ch[0], ks[0])),
            ("stem.norm", nn.BatchNorm2d(ch[0], dtype=self.dtype)),
            ("stem.relu", nn.ReLU()),
        ]
        self.tap_after = {}
        for s in range(4):
            if s > 0:
                seq.append((f"stage{s + 1}.pool", nn.AvgPool2()))
                seq.append((f"stage{s + 1}.expand", conv(ch[s - 1], ch[s], 1)))
            for b in range(config.blocks_per_stage):
                factory = (lambda c=ch[s], k=ks[s]: conv(c, c, k))
                seq.append((f"stage{s + 1}.block{b}", ResidualBlock(factory, ch[s], self.dtype)))
            self.tap_after[s + 1] = len(seq) - 1
        self.body = seq
        self.pool = nn.GlobalAvgPool()
        self.fc = nn.Linear(ch[3], config.num_classes, dtype=self.dtype, zero_init=True)

    # -- parameter access ----------------------------------------------------

    def named_layers(self):
        for name, layer in self.body:
            if isinstance(layer, ResidualBlock):
                for sub, child in layer.children():
                    yield f"{name}.{sub}", child
            else:
                yield name, layer
        yield "head.fc", self.fc

    def named_params(self):
        for name, layer in self.named_layers():
            for p in layer.params:
                yield f"{name}.{p}", layer, p

    def param_count(self):
        return int(sum(layer.params[p].size for _, layer, p in self.named_params()))

    def state_dict(self):
        out = {}
        for name, layer in self.named_layers():
            for p, arr in layer.params.items():
                out[f"{name}.{p}"] = arr
            for p, arr in layer.state.items():
                out[f"{name}.{p}"] = arr
        return out

    def load_state_dict(self, arrays):
        for name, layer in self.named_layers():
            for store in (layer.params, layer.state):
                for p in store:
                    key = f"{name}.{p}"
                    if key not in arrays:
                        raise KeyError(f"missing tensor {key}")
                    if arrays[key].shape != store[p].shape:
                        raise ValueError(f"shape mismatch for {key}: {arrays[key].shape} vs {store[p].shape}")
                    store[p] = np.asarray(arrays[key], dtype=store[p].dtype).copy()

    # -- forward / backward --------------------------------------------------

    def _check_input(self, x, depth):
        x = np.asarray(x)
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ValueError(f"expected (N, {self.config.in_channels}, H, W) input, got {x.shape}")
        f = 2 ** (depth - 1)
        if x.shape[2] % f or x.shape[3] % f:
            raise ValueError(f"spatial dims must be divisible by {f}, got {x.shape[2:]}")
        return x

    def forward_features(self, x, layer=4, train=False, need_grad=None):
        if layer not in self.tap_after:
            raise ValueError(f"tap index must be in 1..4, got {layer!r}")
        x = self._check_input(x, layer)
        for _, lay in self.body[: self.tap_after[layer] + 1]:
            x = lay(x, train, need_grad)
        return x

    def forward_logits(self, x, train=False, need_grad=None):
        h = self.forward_features(x, 4, train, need_grad)
        return self.fc(self.pool(h, train, need_grad), train, need_grad)

    def backward(self, dlogits):
        g = self.pool.backward(self.fc.backward(dlogits))
        for _, lay in reversed(self.body):
            g = lay.backward(g)
        return g

    def astype(self, dtype):
        """Copy of the network with parameters and running stats cast to ``dtype``."""
        net = Network(self.config, dtype=dtype)
        net.load_state_dict(self.state_dict())
        return net

    # -- persistence ---------------------------------------------------------

    def save(self, directory):
        meta = {f"config.{k}": _fmt(v) for k, v in asdict(self.config).items()}
        meta["kinds"] = {}
        for name, layer in self.named_layers():
            kind = getattr(layer, "kind", type(layer).__name__)
            for p in list(layer.params) + list(layer.state):
                meta["kinds"][f"{name}.{p}"] = kind
        write_bundle(directory, self.state_dict(), meta)

    @classmethod
    def load(cls, directory, dtype=np.float32):
        arrays, meta = read_bundle(directory)
        cfg = {k[len("config."):]: v for k, v in meta.items() if k.startswith("config.")}
        net = cls(_parse_config(cfg), dtype=dtype)
        net.load_state_dict(arrays)
        return net


def _fmt(v):
    if isinstance(v, (tuple, list)):
        return ",".join(str(i) for i in v)
    return str(v)


def _parse_config(d):
    ints = ("blocks_per_stage", "num_classes", "in_channels", "input_size", "seed")
    tuples = ("stage_channels", "sre_kernel_sizes", "standard_kernel_sizes")
    kw = {}
    for k, v in d.items():
        if k in ints:
            kw[k] = int(v)
        elif k in tuples:
            kw[k] = tuple(int(i) for i in v.split(","))
        else:
            kw[k] = v
    return ModelConfig(**kw)


def build_model(config: ModelConfig | None = None, dtype=np.float32, **overrides) -> Network:
    if config is None:
        config = ModelConfig(**overrides)
    elif overrides:
        config = ModelConfig(**{**asdict(config), **overrides})
    return Network(config, dtype=dtype)


def forward_features(model: Network, x, layer=4):
    """Eval-mode features at tap ``layer``."""
    return model.forward_features(x, layer)


def forward_logits(model: Network, x):
    return model.forward_logits(x)


def _batches(n, batch_size):
    for start in range(0, n, batch_size):
        yield slice(start, min(start + batch_size, n))


def train(model: Network, X, y, config: TrainConfig | None = None, seed=0, callback=None):
    """SGD with momentum and per-epoch cosine annealing; returns per-epoch history.

    ``X`` is (N, C, H, W).  Mini-batches are drawn from a seeded shuffle; no
    augmentation is applied.
    """
    config = config or TrainConfig()
    X = np.asarray(X, dtype=model.dtype)
    y = np.asarray(y)
    if len(X) == 0:
        raise ValueError("training set is empty")
    if len(X) != len(y):
        raise ValueError("X and y lengths differ")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    velocity = {key: np.zeros_like(layer.params[p]) for key, layer, p in model.named_params()}
    history = []
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        order = rng.permutation(len(X))
        total_loss, correct = 0.0, 0
        for sl in _batches(len(X), config.batch_size):
            idx = order[sl]
            logits = model.forward_logits(X[idx], train=True)
            loss, dlogits = nn.softmax_cross_entropy(logits, y[idx])
            model.backward(dlogits.astype(model.dtype))
            for key, layer, p in model.named_params():
                v = velocity[key]
                v *= config.momentum
                v += layer.grads[p]
                layer.params[p] -= model.dtype.type(lr) * v
            total_loss += loss * len(idx)
            correct += int((logits.argmax(axis=1) == y[idx]).sum())
        record = {"epoch": epoch, "lr": lr, "loss": total_loss / len(X), "accuracy": correct / len(X)}
        history.append(record)
        if callback is not None:
            callback(record)
    return model, history


def predict_logits(model: Network, X, batch_size=64):
    X = np.asarray(X)
    out = [model.forward_logits(X[sl]) for sl in _batches(len(X), batch_size)]
    return np.concatenate(out, axis=0)


def nhwc_to_nchw(images):
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[..., None]
    return np.ascontiguousarray(images.transpose(0, 3, 1, 2))


class CNNClassifier(ClassifierMixin, BaseEstimator):
    """Image classifier backed by SRENet-mini or its standard twin.

    ``fit`` takes images shaped (n_samples, H, W, C) with values in [0, 1].

    Parameters
    ----------
    variant : {'sre', 'standard'}
    stage_channels, blocks_per_stage, sre_kernel_sizes, standard_kernel_sizes
        Topology, see :class:`ModelConfig`.
    epochs, batch_size, learning_rate, momentum
        SGD schedule, see :class:`TrainConfig`.
    random_state : int
        Seeds both parameter initialization and batch shuffling.
    """

    def __init__(self, variant=SRE, stage_channels=(16, 32, 64, 128), blocks_per_stage=1,
                 sre_kernel_sizes=(9, 9, 5, 5), standard_kernel_sizes=(3, 3, 3, 3), epochs=10,
                 batch_size=24, learning_rate=2e-2, momentum=0.9, random_state=0, verbose=False):
        self.variant = variant
        self.stage_channels = stage_channels
        self.blocks_per_stage = blocks_per_stage
        self.sre_kernel_sizes = sre_kernel_sizes
        self.standard_kernel_sizes = standard_kernel_sizes
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.random_state = random_state
        self.verbose = verbose

    def _model_config(self, n_classes, in_channels, size):
        init_seed, _ = np.random.SeedSequence(self.random_state).generate_state(2)
        return ModelConfig(
            variant=self.variant, stage_channels=self.stage_channels,
            blocks_per_stage=self.blocks_per_stage, sre_kernel_sizes=self.sre_kernel_sizes,
            standard_kernel_sizes=self.standard_kernel_sizes, num_classes=n_classes,
            in_channels=in_channels, input_size=size, seed=int(init_seed),
        )

    def fit(self, X, y):
        X = nhwc_to_nchw(X).astype(np.float32)
        y = np.asarray(y)
        if len(X) == 0:
            raise ValueError("training set is empty")
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        cfg = self._model_config(len(self.classes_), X.shape[1], X.shape[2])
        self.network_ = Network(cfg)
        tc = TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                         base_lr=self.learning_rate, momentum=self.momentum)
        _, shuffle_seed = np.random.SeedSequence(self.random_state).generate_state(2)
        callback = (lambda r: print(r, flush=True)) if self.verbose else None
        _, self.history_ = train(self.network_, X, y_idx, tc, seed=int(shuffle_seed), callback=callback)
        return self

    @classmethod
    def from_network(cls, network: Network, classes=None):
        """Wrap an already trained network."""
        cfg = network.config
        clf = cls(variant=cfg.variant, stage_channels=cfg.stage_channels,
                  blocks_per_stage=cfg.blocks_per_stage, sre_kernel_sizes=cfg.sre_kernel_sizes,
                  standard_kernel_sizes=cfg.standard_kernel_sizes)
        clf.network_ = network
        clf.classes_ = np.arange(cfg.num_classes) if classes is None else np.asarray(classes)
        clf.history_ = []
        return clf

    def decision_function(self, X):
        check_is_fitted(self, "network_")
        return predict_logits(self.network_, nhwc_to_nchw(X).astype(np.float32))

    def predict_proba(self, X):
        z = self.decision_function(X)
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X):
        return self.classes_[self.decision_function(X).argmax(axis=1)]

    def transform(self, X):
        """Globally pooled stage-4 features, (n_samples, channels)."""
        check_is_fitted(self, "network_")
        X = nhwc_to_nchw(X).astype(np.float32)
        feats = [self.network_.pool(self.network_.forward_features(X[sl], 4)) for sl in _batches(len(X), 64)]
        return np.concatenate(feats, axis=0)[:, :, 0, 0]
