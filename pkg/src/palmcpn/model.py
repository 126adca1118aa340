"""The 3D convolutional palmprint network.

Pipeline: frozen Gabor bank (2D conv) -> rearrange to (groups, K directions)
-> two conv3d + batch-norm + ReLU modules -> max over directions -> 3x3 block
split. Blocks are supervised through a shared classifier (block loss) and fused
with softmax-normalized learnable weights into the descriptor.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .gabor import BankConfig, build_bank, config_from_dict, describe
from .tensor import (OptimizerState, Parameter, Tensor, load_arrays, no_grad, save_arrays, sgd_step,
                     zero_grad)
from .tensor import functional as F
from .tensor.functional import conv_output_size

log = logging.getLogger(__name__)

N_BLOCKS = 9


@dataclass(frozen=True)
class ArcMarginConfig:
    s: float = 16.0
    m: float = 0.5
    target_only: bool = True

    def __post_init__(self):
        if self.s <= 0:
            raise ValueError("arc-margin scale must be positive")
        if not 0 <= self.m < math.pi / 2:
            raise ValueError("arc-margin m must lie in [0, pi/2)")


@dataclass(frozen=True)
class CpnConfig:
    bank: BankConfig = field(default_factory=BankConfig)
    input_size: int = 128
    n_classes: int = 2
    descriptor_dim: int = 1024
    conv_kernel: Tuple[int, int, int] = (3, 3, 3)
    conv_padding: Tuple[int, int, int] = (1, 1, 1)
    strides: Tuple[Tuple[int, int, int], Tuple[int, int, int]] = ((2, 3, 3), (1, 1, 1))
    channel_factor: int = 4
    classifier: str = "arc"
    arc: ArcMarginConfig = field(default_factory=ArcMarginConfig)
    mu: float = 0.5
    init_std: float = 0.01
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    conv_accumulate64: bool = True

    def __post_init__(self):
        if self.classifier not in ("arc", "softmax"):
            raise ValueError(f"classifier must be 'arc' or 'softmax', got {self.classifier!r}")
        if self.mu < 0:
            raise ValueError("mu must be non-negative")
        if self.n_classes < 1:
            raise ValueError("need at least one class")

    @property
    def channels(self) -> int:
        """Output channels of both 3D modules: channel_factor times the bank size."""
        return self.channel_factor * self.bank.n_kernels

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bank"] = describe(self.bank)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CpnConfig":
        d = dict(d)
        d["bank"] = config_from_dict(d["bank"])
        d["arc"] = ArcMarginConfig(**d["arc"])
        d["conv_kernel"] = tuple(d["conv_kernel"])
        d["conv_padding"] = tuple(d["conv_padding"])
        d["strides"] = tuple(tuple(s) for s in d["strides"])
        return cls(**d)


def full_config(n_classes: int = 2, **overrides) -> CpnConfig:
    return CpnConfig(n_classes=n_classes, **overrides)


def tiny_config(n_classes: int = 2, **overrides) -> CpnConfig:
    """Desk-scale configuration: n1 = n2 = 1, K = 4, 11x11 kernels, 64x64 input, 64-d descriptor."""
    bank = overrides.pop("bank", BankConfig(lambdas=(10.0,), sigmas=(3.0,), n_directions=4, size=11))
    base = dict(bank=bank, input_size=64, descriptor_dim=64, n_classes=n_classes)
    base.update(overrides)
    return CpnConfig(**base)


def shape_table(config: CpnConfig) -> Dict[str, Tuple[int, ...]]:
    """Per-sample tensor shape after every stage (batch axis omitted)."""
    b = config.bank
    size = config.input_size
    g, k = b.n_groups, b.n_directions
    out: Dict[str, Tuple[int, ...]] = {"input": (1, size, size), "gabor": (b.n_kernels, size, size),
                                       "rearranged": (g, k, size, size)}
    dims = (k, size, size)
    for i, stride in enumerate(config.strides, start=1):
        dims = tuple(conv_output_size(s, kk, st, p)
                     for s, kk, st, p in zip(dims, config.conv_kernel, stride, config.conv_padding))
        out[f"conv3d_{i}"] = (config.channels,) + dims
    h2, w2 = dims[1], dims[2]
    out["F2"] = (config.channels, h2, w2)
    hp, wp = _round_up(h2, 3), _round_up(w2, 3)
    out["F2_padded"] = (config.channels, hp, wp)
    out["block"] = (config.channels, hp // 3, wp // 3)
    out["descriptor"] = (config.descriptor_dim,)
    return out


def _round_up(n: int, m: int) -> int:
    return -(-n // m) * m


# ------------------------------------------------------------------- layers
class GaborFrontEnd:
    """Frozen first layer: every bank kernel applied with stride 1 and same padding."""

    def __init__(self, bank_config: BankConfig, dtype=np.float32, accumulate64: bool = True):
        self.bank = build_bank(bank_config)
        k = bank_config.size
        w = self.bank.kernels.reshape(-1, 1, k, k).astype(dtype)
        # envelope tails underflow to subnormals in float32, which stalls BLAS
        w[np.abs(w) < np.finfo(w.dtype).tiny] = 0.0
        self.weight = Parameter(w, frozen=True, name="front.gabor", dtype=dtype)
        self.padding = k // 2
        self.accumulate64 = accumulate64

    def __call__(self, x: Tensor) -> Tensor:
        c = self.bank.config
        f1 = F.conv2d(x, self.weight, stride=1, padding=self.padding, accumulate64=self.accumulate64)
        n, _, h, w = f1.shape
        return f1.reshape(n, c.n_groups, c.n_directions, h, w)


class Conv3dModule:
    """conv3d (no bias) -> batch-norm -> ReLU."""

    def __init__(self, name: str, c_in: int, c_out: int, kernel, stride, padding, rng: np.random.Generator,
                 init_std: float, dtype, eps: float, momentum: float, accumulate64: bool):
        self.weight = Parameter(rng.normal(0.0, init_std, size=(c_out, c_in) + tuple(kernel)), name=f"{name}.weight",
                                dtype=dtype)
        self.gamma = Parameter(np.ones(c_out), name=f"{name}.bn.gamma", dtype=dtype)
        self.beta = Parameter(np.zeros(c_out), name=f"{name}.bn.beta", dtype=dtype)
        self.running_mean = np.zeros(c_out, dtype=dtype)
        self.running_var = np.ones(c_out, dtype=dtype)
        self.name = name
        self.stride, self.padding = tuple(stride), tuple(padding)
        self.eps, self.momentum = eps, momentum
        self.accumulate64 = accumulate64
        self.training = True

    def parameters(self) -> List[Parameter]:
        return [self.weight, self.gamma, self.beta]

    def buffers(self) -> Dict[str, np.ndarray]:
        return {f"{self.name}.bn.running_mean": self.running_mean, f"{self.name}.bn.running_var": self.running_var}

    def __call__(self, x: Tensor) -> Tensor:
        y = F.conv3d(x, self.weight, self.stride, self.padding, accumulate64=self.accumulate64)
        y = F.batch_norm(y, self.gamma, self.beta, self.running_mean, self.running_var, self.training,
                         self.momentum, self.eps)
        return F.relu(y)


class Linear:
    def __init__(self, name: str, in_features: int, out_features: int, rng, init_std: float, dtype, bias=True):
        self.weight = Parameter(rng.normal(0.0, init_std, size=(out_features, in_features)), name=f"{name}.weight",
                                dtype=dtype)
        self.bias = Parameter(np.zeros(out_features), name=f"{name}.bias", dtype=dtype) if bias else None

    def parameters(self) -> List[Parameter]:
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def __call__(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class ClassifierHead:
    """Classification layer plus its loss: plain softmax or additive angular margin."""

    def __init__(self, name: str, in_features: int, n_classes: int, kind: str, arc: ArcMarginConfig, rng,
                 init_std: float, dtype):
        self.kind = kind
        self.arc = arc
        self.fc = Linear(name, in_features, n_classes, rng, init_std, dtype, bias=(kind == "softmax"))

    def parameters(self) -> List[Parameter]:
        return self.fc.parameters()

    def loss(self, x: Tensor, labels) -> Tensor:
        if self.kind == "softmax":
            return F.softmax_cross_entropy(self.fc(x), labels)
        return arc_margin_loss(x, self.fc.weight, labels, self.arc)


# --------------------------------------------------------------- operations
def arc_margin_loss(embeddings: Tensor, class_weights: Tensor, labels, cfg: ArcMarginConfig) -> Tensor:
    """Softmax cross-entropy over s * cos(theta_j) with the margin m added to the target angle."""
    if not np.all(np.isfinite(embeddings.data)):
        raise ValueError("arc_margin_loss: non-finite embedding")
    cosine = F.matmul(F.l2_normalize(embeddings, axis=1), F.transpose(F.l2_normalize(class_weights, axis=1)))
    logits = F.arc_margin_logits(cosine, labels, cfg.s, cfg.m, target_only=cfg.target_only)
    return F.softmax_cross_entropy(logits, labels)


@dataclass
class BlockSet:
    """Nine equal spatial blocks, stacked as (N, 9, C, h, w) in row-major block order."""

    stacked: Tensor
    padded_shape: Tuple[int, ...]

    @property
    def blocks(self) -> List[Tensor]:
        return [self.stacked[:, i] for i in range(N_BLOCKS)]

    def reconstruct(self) -> np.ndarray:
        """Reassemble the padded feature map from the blocks."""
        n, _, c, h, w = self.stacked.shape
        grid = self.stacked.data.reshape(n, 3, 3, c, h, w)
        rows = [np.concatenate([grid[:, r, col] for col in range(3)], axis=-1) for r in range(3)]
        return np.concatenate(rows, axis=-2)


def split_blocks(f2: Tensor) -> BlockSet:
    """Zero-pad (bottom/right) to multiples of 3 and cut into a 3x3 grid of blocks."""
    n, c, h, w = f2.shape
    if h < 3 or w < 3:
        raise ValueError(f"split_blocks: feature map {h}x{w} is smaller than 3x3")
    hp, wp = _round_up(h, 3), _round_up(w, 3)
    if (hp, wp) != (h, w):
        f2 = F.pad(f2, ((0, 0), (0, 0), (0, hp - h), (0, wp - w)))
    bh, bw = hp // 3, wp // 3
    x = f2.reshape(n, c, 3, bh, 3, bw).transpose(0, 2, 4, 1, 3, 5).reshape(n, N_BLOCKS, c, bh, bw)
    return BlockSet(x, (n, c, hp, wp))


def block_loss(blocks: BlockSet, head: ClassifierHead, labels) -> Tensor:
    """Sum over the nine blocks of the shared-head classification loss."""
    labels = np.asarray(labels)
    n = blocks.stacked.shape[0]
    flat = blocks.stacked.transpose(1, 0, 2, 3, 4).reshape(N_BLOCKS * n, -1)
    # the op averages over 9N rows; scaling by 9 gives the per-block sum of batch means
    return head.loss(flat, np.tile(labels, N_BLOCKS)) * float(N_BLOCKS)


def fusion_weights(w: Tensor) -> Tensor:
    return F.softmax(w, axis=0)


def fuse_blocks(blocks: BlockSet, w: Tensor, fc: Linear) -> Tensor:
    """Descriptor = FC(sum_i softmax(w)_i * B_i)."""
    a = fusion_weights(w).reshape(1, N_BLOCKS, 1, 1, 1)
    fused = (blocks.stacked * a).sum(axis=1)
    return fc(F.flatten(fused))


def total_loss(loss_d: Tensor, loss_b: Tensor, mu: float) -> Tensor:
    if mu < 0:
        raise ValueError("mu must be non-negative")
    if mu == 0:
        return loss_d
    return loss_d + loss_b * mu


# --------------------------------------------------------------------- model
class FeatureExtractor:
    """Gabor front end through the depth max-pool, producing F2 as (N, C, H2, W2)."""

    def __init__(self, config: CpnConfig, rng: np.random.Generator, dtype=np.float32):
        self.config = config
        b = config.bank
        self.front = GaborFrontEnd(b, dtype, config.conv_accumulate64)
        kw = dict(kernel=config.conv_kernel, padding=config.conv_padding, rng=rng, init_std=config.init_std,
                  dtype=dtype, eps=config.bn_eps, momentum=config.bn_momentum,
                  accumulate64=config.conv_accumulate64)
        self.conv1 = Conv3dModule("conv1", b.n_groups, config.channels, stride=config.strides[0], **kw)
        self.conv2 = Conv3dModule("conv2", config.channels, config.channels, stride=config.strides[1], **kw)

    def modules(self):
        return [self.conv1, self.conv2]

    def __call__(self, x: Tensor, trace: Optional[dict] = None) -> Tensor:
        if x.ndim != 4 or x.shape[1] != 1:
            raise ValueError(f"expected input (N, 1, H, W), got {x.shape}")
        if x.shape[2:] != (self.config.input_size,) * 2:
            raise ValueError(f"input is {x.shape[2:]}, config expects {self.config.input_size}")
        f1 = self.front(x)
        h = self.conv1(f1)
        h2 = self.conv2(h)
        pooled = F.max_pool_depth(h2)
        n, c, _, hh, ww = pooled.shape
        f2 = pooled.reshape(n, c, hh, ww)
        if trace is not None:
            trace.update(gabor=f1.shape[:1] + (f1.shape[1] * f1.shape[2],) + f1.shape[3:], rearranged=f1.shape,
                         conv3d_1=h.shape, conv3d_2=h2.shape, F2=f2.shape)
        return f2


@dataclass
class ForwardResult:
    f2: Tensor
    blocks: BlockSet
    descriptor: Tensor


class CpnModel:
    def __init__(self, config: CpnConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.features = FeatureExtractor(config, rng, dtype)
        shapes = shape_table(config)
        block_dim = int(np.prod(shapes["block"]))
        std = config.init_std
        self.fusion_w = Parameter(rng.normal(0.0, std, size=N_BLOCKS), name="fusion.w", dtype=dtype)
        self.fc = Linear("fusion.fc", block_dim, config.descriptor_dim, rng, std, dtype)
        self.block_head = ClassifierHead("head1", block_dim, config.n_classes, config.classifier, config.arc, rng,
                                         std, dtype)
        self.desc_head = ClassifierHead("head2", config.descriptor_dim, config.n_classes, config.classifier,
                                        config.arc, rng, std, dtype)

    # -- bookkeeping
    def parameters(self, include_frozen: bool = False) -> List[Parameter]:
        params = [self.features.front.weight] if include_frozen else []
        for m in self.features.modules():
            params += m.parameters()
        params += [self.fusion_w] + self.fc.parameters() + self.block_head.parameters() + self.desc_head.parameters()
        return params

    def buffers(self) -> Dict[str, np.ndarray]:
        out = {}
        for m in self.features.modules():
            out.update(m.buffers())
        return out

    def train(self, mode: bool = True) -> "CpnModel":
        for m in self.features.modules():
            m.training = mode
        return self

    def eval(self) -> "CpnModel":
        return self.train(False)

    @property
    def training(self) -> bool:
        return self.features.conv1.training

    # -- forward
    def forward(self, x: Tensor) -> ForwardResult:
        f2 = self.features(x)
        blocks = split_blocks(f2)
        d = fuse_blocks(blocks, self.fusion_w, self.fc)
        return ForwardResult(f2, blocks, d)

    def losses(self, x: Tensor, labels) -> Dict[str, Tensor]:
        labels = np.asarray(labels)
        if labels.size and labels.max() >= self.config.n_classes:
            raise ValueError(f"label {labels.max()} outside the {self.config.n_classes} configured classes")
        out = self.forward(x)
        loss_d = self.desc_head.loss(out.descriptor, labels)
        loss_b = block_loss(out.blocks, self.block_head, labels)
        return {"total": total_loss(loss_d, loss_b, self.config.mu), "descriptor": loss_d, "block": loss_b}

    def embed(self, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
        """Descriptors (N, descriptor_dim) for normalized images (N, 1, H, W); heads are not used."""
        was_training = self.training
        self.eval()
        outs = []
        with no_grad():
            for i in range(0, len(images), batch_size):
                x = Tensor(np.asarray(images[i:i + batch_size], dtype=self.dtype))
                outs.append(self.forward(x).descriptor.data)
        self.train(was_training)
        return np.concatenate(outs) if outs else np.zeros((0, self.config.descriptor_dim), self.dtype)

    # -- persistence
    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {p.name: p.data for p in self.parameters(include_frozen=True)}
        state.update(self.buffers())
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = {p.name: p for p in self.parameters(include_frozen=True)}
        bufs = self.buffers()
        missing = (set(own) | set(bufs)) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks {sorted(missing)}")
        for name, p in own.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {state[name].shape} != model shape {p.shape}")
            p.data = np.asarray(state[name], dtype=self.dtype).copy()
        for name, buf in bufs.items():
            buf[...] = state[name]


def save_model(path, model: CpnModel, extra: Optional[dict] = None) -> None:
    meta = {"kind": "cpn-model", "config": model.config.to_dict()}
    if extra:
        meta.update(extra)
    save_arrays(path, model.state_dict(), meta)


def load_model(path) -> CpnModel:
    arrays, meta = load_arrays(path)
    if meta.get("kind") != "cpn-model":
        raise ValueError(f"{path} is not a model checkpoint")
    model = CpnModel(CpnConfig.from_dict(meta["config"]))
    model.load_state_dict(arrays)
    model.eval()
    return model


# ------------------------------------------------------------------ training
@dataclass
class TrainConfig:
    epochs: int = 150
    batch_size: int = 64
    lr_max: float = 1e-2
    lr_min: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0


@dataclass
class TrainResult:
    model: CpnModel
    epoch_loss: List[float]
    epoch_lr: List[float]
    epoch_parts: List[Dict[str, float]] = field(default_factory=list)


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    order = rng.permutation(n)
    chunks = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    # batch-norm needs two samples; fold a trailing singleton into the previous batch
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        chunks[-2] = np.concatenate([chunks[-2], chunks.pop()])
    return chunks


def train(images: np.ndarray, labels: Sequence[int], config: CpnConfig, train_config: TrainConfig,
          model: Optional[CpnModel] = None, progress=None) -> TrainResult:
    """Mini-batch SGD with momentum, weight decay and a per-epoch cosine learning rate."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) != len(labels):
        raise ValueError("images and labels differ in length")
    if len(images) < 2:
        raise ValueError("need at least two training images")
    if labels.min() < 0 or labels.max() >= config.n_classes:
        raise ValueError(f"labels span [{labels.min()}, {labels.max()}] but n_classes = {config.n_classes}")
    model = model or CpnModel(config, seed=train_config.seed)
    model.train()
    params = model.parameters()
    state = OptimizerState(train_config.momentum, train_config.weight_decay, train_config.lr_max,
                           train_config.lr_min, train_config.epochs)
    rng = np.random.default_rng(train_config.seed + 1)
    images = np.asarray(images, dtype=model.dtype)

    result = TrainResult(model, [], [])
    for epoch in range(train_config.epochs):
        lr = state.learning_rate(epoch)
        sums = {"total": 0.0, "descriptor": 0.0, "block": 0.0}
        for idx in _batches(len(images), train_config.batch_size, rng):
            zero_grad(params)
            losses = model.losses(Tensor(images[idx]), labels[idx])
            losses["total"].backward()
            sgd_step(params, state, lr)
            for k in sums:
                sums[k] += losses[k].item() * len(idx)
        parts = {k: v / len(images) for k, v in sums.items()}
        result.epoch_loss.append(parts["total"])
        result.epoch_lr.append(lr)
        result.epoch_parts.append(parts)
        log.info("epoch %d lr %.5f loss %.4f", epoch, lr, parts["total"])
        if progress is not None:
            progress(epoch, parts)
    model.eval()
    return result


def with_classes(config: CpnConfig, n_classes: int) -> CpnConfig:
    return replace(config, n_classes=n_classes)
