"""ST-GCN blocks, per-joint BiLSTM, spatial/temporal attention pooling and the classifier head.

Tensors are laid out [N, C, T, J] (batch, channels, frames, joints) throughout the
convolutional stack.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor
from .features import CHANNELS, channel_mask
from .graph import Partition, SkeletonGraph, build_graph

PROB_FLOOR = 1e-12
STD_FLOOR = 1e-8


@dataclass(frozen=True)
class ModelConfig:
    block_specs: tuple[tuple[int, int, int], ...] = ((9, 64, 1), (64, 64, 2), (64, 128, 2))
    temporal_kernel: int = 9
    lstm_hidden: int = 64
    attention_hidden: int = 64
    num_classes: int = 2
    use_bilstm: bool = True
    use_attention: bool = True
    feature_groups: tuple[str, ...] = ("coords", "vel", "ang")
    # per-channel input statistics fitted on training data; None leaves inputs untouched
    input_mean: tuple[float, ...] | None = None
    input_std: tuple[float, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "block_specs", tuple(tuple(int(v) for v in b) for b in self.block_specs))
        object.__setattr__(self, "feature_groups", tuple(self.feature_groups))
        for name in ("input_mean", "input_std"):
            value = getattr(self, name)
            if value is not None:
                value = tuple(float(v) for v in value)
                if len(value) != len(CHANNELS) or not all(np.isfinite(value)):
                    raise ValueError(f"{name} needs {len(CHANNELS)} finite values")
                object.__setattr__(self, name, value)
        if (self.input_mean is None) != (self.input_std is None):
            raise ValueError("input_mean and input_std must be given together")
        if self.input_std is not None and min(self.input_std) <= 0:
            raise ValueError("input_std must be positive")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.temporal_kernel < 1 or self.temporal_kernel % 2 == 0:
            raise ValueError("temporal_kernel must be odd")
        if not self.block_specs:
            raise ValueError("at least one ST-GCN block is required")
        if self.block_specs[0][0] != len(CHANNELS):
            raise ValueError(f"first block must take {len(CHANNELS)} input channels")
        for prev, nxt in zip(self.block_specs, self.block_specs[1:]):
            if prev[1] != nxt[0]:
                raise ValueError(f"block channel chain broken between {prev} and {nxt}")
        if any(b[2] < 1 for b in self.block_specs):
            raise ValueError("temporal strides must be >= 1")

    @property
    def out_channels(self) -> int:
        return 2 * self.lstm_hidden if self.use_bilstm else self.block_specs[-1][1]

    def output_length(self, T: int) -> int:
        for _, _, stride in self.block_specs:
            T = -(-T // stride)
        return T

    def to_dict(self) -> dict:
        d = asdict(self)
        d["block_specs"] = [list(b) for b in self.block_specs]
        d["feature_groups"] = list(self.feature_groups)
        for name in ("input_mean", "input_std"):
            if d[name] is not None:
                d[name] = list(d[name])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["block_specs"] = tuple(tuple(b) for b in d["block_specs"])
        d["feature_groups"] = tuple(d["feature_groups"])
        return cls(**d)

    def standardized(self, X: np.ndarray) -> "ModelConfig":
        """Copy with per-channel mean and std of X [N, C, T, J] as fixed input statistics."""
        X = np.asarray(X, dtype=np.float64)
        mean = X.mean(axis=(0, 2, 3))
        std = X.std(axis=(0, 2, 3))
        std = np.where(std > STD_FLOOR, std, 1.0)  # constant channels are only shifted
        return replace(self, input_mean=tuple(mean.tolist()), input_std=tuple(std.tolist()))


TINY_CONFIG = ModelConfig(
    block_specs=((9, 4, 1), (4, 4, 2)),
    temporal_kernel=3,
    lstm_hidden=4,
    attention_hidden=4,
)


def param_shapes(config: ModelConfig, J: int) -> "OrderedDict[str, tuple[int, ...]]":
    shapes: OrderedDict[str, tuple[int, ...]] = OrderedDict()
    K = config.temporal_kernel
    for i, (c_in, c_out, _) in enumerate(config.block_specs):
        shapes[f"block{i}.W"] = (3, c_out, c_in)
        shapes[f"block{i}.M"] = (J, J)
        shapes[f"block{i}.tconv.weight"] = (c_out, c_out, K)
        shapes[f"block{i}.tconv.bias"] = (c_out,)
    c = config.block_specs[-1][1]
    H = config.lstm_hidden
    if config.use_bilstm:
        for d in ("fwd", "bwd"):
            shapes[f"lstm.{d}.W_ih"] = (4 * H, c)
            shapes[f"lstm.{d}.W_hh"] = (4 * H, H)
            shapes[f"lstm.{d}.b"] = (4 * H,)
    c_out = config.out_channels
    if config.use_attention:
        A = config.attention_hidden
        for stage in ("spatial", "temporal"):
            shapes[f"att.{stage}.W1"] = (A, c_out)
            shapes[f"att.{stage}.b1"] = (A,)
            shapes[f"att.{stage}.w2"] = (A,)
    shapes["head.W"] = (config.num_classes, c_out)
    shapes["head.b"] = (config.num_classes,)
    return shapes


def _fans(name: str, shape: tuple[int, ...]) -> tuple[int, int]:
    if name.endswith("tconv.weight"):
        d, c, k = shape
        return c * k, d * k
    if name.endswith(".W"):
        if len(shape) == 3:
            return shape[2], shape[1]
    if name.endswith("w2"):
        return shape[0], 1
    return shape[-1], shape[0]


def init_params(config: ModelConfig, J: int, seed: int = 0, dtype=np.float32) -> ParameterStore:
    """Glorot-uniform weights, zero biases, all-ones edge-importance masks."""
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    for name, shape in param_shapes(config, J).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "M":
            value = np.ones(shape)
        elif leaf in ("b", "b1", "bias"):
            value = np.zeros(shape)
        else:
            fan_in, fan_out = _fans(name, shape)
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            value = rng.uniform(-limit, limit, size=shape)
        store[name] = ad.parameter(value.astype(dtype), name=name)
    return store


# -- layers ------------------------------------------------------------------

def spatial_graph_conv(F: Tensor, partition: Partition, M: Tensor, W: Tensor) -> Tensor:
    """Sum over the three groups of normalized (A_m * M) mixing joints, then W_m mixing channels.

    F is [N, C_in, T, J], W is [3, C_out, C_in]; the result is [N, C_out, T, J].
    """
    F, M, W = ad.constant(F), ad.constant(M), ad.constant(W)
    if F.ndim != 4:
        raise ValueError(f"expected [N, C, T, J] features, got shape {F.shape}")
    J = F.shape[3]
    if partition.A.shape[1] != J or M.shape != (J, J):
        raise ValueError(f"joint count mismatch: features {J}, partition {partition.A.shape[1]}, M {M.shape}")
    if W.shape[0] != 3 or W.shape[2] != F.shape[1]:
        raise ValueError(f"W shape {W.shape} does not fit {F.shape[1]} input channels")
    structure = (partition.A * partition.scale()).astype(F.dtype)
    return ad.graph_conv(F, ad.mul(structure, M), W)


def temporal_conv(F: Tensor, weight: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    return ad.temporal_conv(ad.constant(F), ad.constant(weight), ad.constant(bias), stride)


def stgcn_block(F: Tensor, params: ParameterStore, index: int, partition: Partition,
                stride: int) -> Tensor:
    p = f"block{index}."
    h = ad.relu(spatial_graph_conv(F, partition, params[p + "M"], params[p + "W"]))
    h = temporal_conv(h, params[p + "tconv.weight"], params[p + "tconv.bias"], stride)
    if h.shape == F.shape:
        h = ad.add(h, F)
    return ad.relu(h)


def _linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """x[..., C] @ W.T (+ b) with W [D, C]."""
    lead = x.shape[:-1]
    y = ad.matmul(ad.reshape(x, (-1, x.shape[-1])), ad.transpose(W, (1, 0)))
    if b is not None:
        y = ad.add(y, b)
    return ad.reshape(y, lead + (W.shape[0],))


def bilstm(F: Tensor, params: ParameterStore) -> Tensor:
    """Shared BiLSTM over every joint's time series: [N, C, T, J] -> [N, 2H, T, J]."""
    N, C, T, J = F.shape
    xs = ad.reshape(ad.transpose(F, (2, 0, 3, 1)), (T, N * J, C))
    fwd = ad.lstm(xs, params["lstm.fwd.W_ih"], params["lstm.fwd.W_hh"], params["lstm.fwd.b"])
    bwd = ad.lstm(xs, params["lstm.bwd.W_ih"], params["lstm.bwd.W_hh"], params["lstm.bwd.b"],
                  reverse=True)
    hs = ad.concat([fwd, bwd], axis=2)
    hs = ad.reshape(hs, (T, N, J, hs.shape[2]))
    return ad.transpose(hs, (1, 3, 0, 2))


def _attention_scores(x: Tensor, params: ParameterStore, stage: str) -> Tensor:
    hidden = ad.tanh(_linear(x, params[f"att.{stage}.W1"], params[f"att.{stage}.b1"]))
    lead = hidden.shape[:-1]
    w2 = ad.reshape(params[f"att.{stage}.w2"], (-1, 1))
    return ad.reshape(ad.matmul(ad.reshape(hidden, (-1, hidden.shape[-1])), w2), lead)


def attention_pool(z: Tensor, params: ParameterStore) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Softmax over joints per frame, then over frames. Returns (z_out, alpha, beta, v)."""
    zt = ad.transpose(z, (0, 2, 3, 1))  # [N, T, J, C]
    alpha = ad.softmax(_attention_scores(zt, params, "spatial"), axis=2)
    v = ad.einsum("ntj,ntjc->ntc", alpha, zt)
    beta = ad.softmax(_attention_scores(v, params, "temporal"), axis=1)
    z_out = ad.einsum("nt,ntc->nc", beta, v)
    return z_out, alpha, beta, v


@dataclass
class Activations:
    blocks: list[Tensor]
    z: Tensor
    z_out: Tensor
    logits: Tensor
    probs: Tensor
    alpha: Tensor | None = None
    beta: Tensor | None = None
    v: Tensor | None = None
    extra: dict = field(default_factory=dict)

    def predictions(self) -> np.ndarray:
        return self.probs.value.argmax(axis=1)


def forward(X, params: ParameterStore, config: ModelConfig, partition: Partition) -> Activations:
    """Run the full network on a batch X [N, 9, T, J] (a single [9, T, J] sample is promoted)."""
    X = ad.constant(X)
    if X.ndim == 3:
        X = ad.reshape(X, (1,) + X.shape)
    if X.ndim != 4 or X.shape[1] != len(CHANNELS):
        raise ValueError(f"expected input [N, {len(CHANNELS)}, T, J], got {X.shape}")
    if X.shape[3] != partition.A.shape[1]:
        raise ValueError(f"input has {X.shape[3]} joints, graph has {partition.A.shape[1]}")
    if config.input_mean is not None:
        shift = np.asarray(config.input_mean, dtype=X.dtype)[None, :, None, None]
        scale = (1.0 / np.asarray(config.input_std, dtype=np.float64)).astype(X.dtype)[None, :, None, None]
        X = ad.mul(ad.sub(X, shift), scale)
    mask = channel_mask(config.feature_groups)
    if not mask.all():
        X = ad.mul(X, mask.astype(X.dtype)[None, :, None, None])

    h = X
    blocks = []
    for i, (_, _, stride) in enumerate(config.block_specs):
        h = stgcn_block(h, params, i, partition, stride)
        blocks.append(h)
    z = bilstm(h, params) if config.use_bilstm else h

    alpha = beta = v = None
    if config.use_attention:
        z_out, alpha, beta, v = attention_pool(z, params)
    else:
        z_out = ad.mean(z, axis=(2, 3))
    logits = _linear(z_out, params["head.W"], params["head.b"])
    probs = ad.softmax(logits, axis=1)
    return Activations(blocks, z, z_out, logits, probs, alpha, beta, v)


def one_hot(labels, num_classes: int, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    out = np.zeros((labels.size, num_classes), dtype=dtype)
    out[np.arange(labels.size), labels] = 1
    return out


def cross_entropy(probs: Tensor, y) -> Tensor:
    """Batch-mean of -sum_k y_k log(probs_k), probabilities floored at 1e-12."""
    y = np.asarray(y.value if isinstance(y, Tensor) else y)
    probs = ad.constant(probs)
    if y.shape != probs.shape:
        raise ValueError(f"target shape {y.shape} != prediction shape {probs.shape}")
    if not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=1) == 1)):
        raise ValueError("targets must be one-hot")
    logp = ad.log(ad.clip(probs, PROB_FLOOR, 1.0))
    return ad.mul(ad.sum(ad.mul(logp, y.astype(probs.dtype))), -1.0 / y.shape[0])


def loss_fn(X, y_onehot, config: ModelConfig, partition: Partition):
    """Closure mapping a ParameterStore to the scalar training loss."""
    return lambda params: cross_entropy(forward(X, params, config, partition).probs, y_onehot)


# -- checkpoints -------------------------------------------------------------

CHECKPOINT_MAGIC = b"FIMGCNCK"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def graph_to_dict(graph: SkeletonGraph) -> dict:
    names = graph.joint_names
    return {
        "joints": list(names),
        "root": names[graph.root],
        "edges": [[names[a], names[b]] for a, b in graph.edges],
        "reference_pose": {n: [float(v) for v in graph.reference_pose[i]] for i, n in enumerate(names)},
    }


def graph_from_dict(d: dict) -> SkeletonGraph:
    return build_graph([tuple(e) for e in d["edges"]], d["reference_pose"], d["root"], d["joints"])


def save_checkpoint(path: str | Path, params: ParameterStore, config: ModelConfig,
                    graph: SkeletonGraph, metadata: dict | None = None):
    shapes = param_shapes(config, graph.node_count)
    if list(shapes) != list(params):
        raise CheckpointError("parameter names do not match the model configuration")
    header = {
        "config": config.to_dict(),
        "skeleton": graph_to_dict(graph),
        "groups": [{"name": n, "shape": list(s)} for n, s in shapes.items()],
        "metadata": metadata or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for name, p in params.items():
            encoded = name.encode("utf-8")
            data = np.ascontiguousarray(p.value, dtype="<f4")
            fh.write(struct.pack("<H", len(encoded)) + encoded)
            fh.write(struct.pack("<Q", data.size))
            fh.write(data.tobytes())


def load_checkpoint(path: str | Path) -> tuple[ParameterStore, ModelConfig, SkeletonGraph, dict]:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, length = struct.unpack_from("<II", data, 8)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    offset = 16
    header = json.loads(data[offset:offset + length].decode("utf-8"))
    offset += length
    config = ModelConfig.from_dict(header["config"])
    graph = graph_from_dict(header["skeleton"])
    expected = param_shapes(config, graph.node_count)
    declared = [(g["name"], tuple(g["shape"])) for g in header["groups"]]
    if declared != list(expected.items()):
        raise CheckpointError(f"{path}: parameter groups do not match the stored configuration")
    params = ParameterStore()
    for name, shape in declared:
        (n,) = struct.unpack_from("<H", data, offset)
        offset += 2
        stored = data[offset:offset + n].decode("utf-8")
        offset += n
        (count,) = struct.unpack_from("<Q", data, offset)
        offset += 8
        if stored != name or count != int(np.prod(shape)):
            raise CheckpointError(f"{path}: group {stored!r} has unexpected name or size")
        value = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(shape)
        offset += 4 * count
        params[name] = ad.parameter(value.astype(np.float32), name=name)
    if offset != len(data):
        raise CheckpointError(f"{path}: trailing bytes after parameter data")
    return params, config, graph, header.get("metadata", {})
