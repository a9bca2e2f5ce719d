"""Encoder-decoder SVDF keyword-spotting network.

An SVDF node is a rank-1 factored convolution: a feature filter ``alpha``
projects each input frame to a scalar, and a time filter ``beta`` mixes the
last ``memory`` such scalars::

    y_n(t) = act(sum_tau beta[n, tau] * (alpha[n] . x[t - tau]) + bias[n])

Frames before t=0 are zeros, so the layer is strictly causal. Streaming keeps
a ring buffer of the last ``memory`` projected vectors per layer and
reproduces the batch output frame by frame.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import _kernels
from .errors import CheckpointError, ShapeError, StateError
from .frontend import FEATURE_DIM, FeatureSequence

MAGIC = b"KWSF"
FORMAT_VERSION = 1


@dataclasses.dataclass(frozen=True)
class SvdfLayerConfig:
    nodes: int
    input_dim: int
    memory: int
    activation: str = "relu"
    kind: str = dataclasses.field(default="svdf", init=False)

    @property
    def output_dim(self) -> int:
        return self.nodes

    def param_count(self) -> int:
        return self.nodes * (self.input_dim + self.memory + 1)


@dataclasses.dataclass(frozen=True)
class ProjectionConfig:
    """Linear bottleneck projection (no activation)."""

    output_dim: int
    input_dim: int
    kind: str = dataclasses.field(default="projection", init=False)

    def param_count(self) -> int:
        return self.output_dim * self.input_dim + self.output_dim


LayerConfig = Union[SvdfLayerConfig, ProjectionConfig]


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    layers: Tuple[LayerConfig, ...]
    split_index: int  # layers[:split_index] form the encoder

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        self.validate()

    def validate(self) -> None:
        if not self.layers:
            return
        for layer in self.layers:
            dims = [layer.input_dim, layer.output_dim]
            if isinstance(layer, SvdfLayerConfig):
                dims.append(layer.memory)
                if layer.activation not in ("relu", "none"):
                    raise ValueError(f"unknown activation {layer.activation!r}")
            if min(dims) < 1:
                raise ValueError(f"layer {layer} has a count below 1")
        if self.layers[0].input_dim != FEATURE_DIM:
            raise ValueError(f"first layer must take {FEATURE_DIM}-dim features")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.output_dim != nxt.input_dim:
                raise ValueError(f"layer dims do not chain: {prev.output_dim} -> {nxt.input_dim}")
        if not 1 <= self.split_index < len(self.layers):
            raise ValueError(f"split_index {self.split_index} out of range")
        if self.decoder_output_dim != 2:
            raise ValueError("decoder must produce 2 logits")

    @property
    def encoder_output_dim(self) -> int:
        return self.layers[self.split_index - 1].output_dim

    @property
    def decoder_output_dim(self) -> int:
        return self.layers[-1].output_dim

    @property
    def output_dim(self) -> int:
        return self.encoder_output_dim + self.decoder_output_dim

    def to_dict(self) -> dict:
        layers = []
        for layer in self.layers:
            d = dataclasses.asdict(layer)
            layers.append(d)
        return {"split_index": self.split_index, "layers": layers}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        layers = []
        for spec in d["layers"]:
            spec = dict(spec)
            kind = spec.pop("kind", "svdf")
            layers.append(SvdfLayerConfig(**spec) if kind == "svdf" else ProjectionConfig(**spec))
        return cls(tuple(layers), int(d["split_index"]))

    @classmethod
    def encoder_decoder(cls, hidden: int, memory: int, bottleneck: int, n_units: int,
                        decoder_hidden: Optional[int] = None,
                        decoder_memory: Optional[int] = None) -> "ModelConfig":
        """Seven SVDF layers and three projections.

        Encoder: S P S S P S(n_units, linear). Decoder: S P S S(2, linear).
        """
        dh = decoder_hidden or hidden
        dm = decoder_memory or memory
        layers = [
            SvdfLayerConfig(hidden, FEATURE_DIM, memory),
            ProjectionConfig(bottleneck, hidden),
            SvdfLayerConfig(hidden, bottleneck, memory),
            SvdfLayerConfig(hidden, hidden, memory),
            ProjectionConfig(bottleneck, hidden),
            SvdfLayerConfig(n_units, bottleneck, memory, activation="none"),
            SvdfLayerConfig(dh, n_units, dm),
            ProjectionConfig(bottleneck, dh),
            SvdfLayerConfig(dh, bottleneck, dm),
            SvdfLayerConfig(2, dh, dm, activation="none"),
        ]
        return cls(tuple(layers), split_index=6)


def desk_config(n_units: int = 16) -> ModelConfig:
    """Small config (~27k parameters) for desk-scale experiments and tests."""
    return ModelConfig.encoder_decoder(hidden=64, memory=8, bottleneck=32, n_units=n_units)


def paper_config(n_units: int = 16) -> ModelConfig:
    """Reconstruction sized to the ~320k parameter budget of the production model."""
    return ModelConfig.encoder_decoder(hidden=256, memory=40, bottleneck=128, n_units=n_units)


def param_count(config: ModelConfig) -> int:
    return sum(layer.param_count() for layer in config.layers)


Params = List[Dict[str, np.ndarray]]


def _tensor_shapes(layer: LayerConfig) -> Dict[str, Tuple[int, ...]]:
    if isinstance(layer, SvdfLayerConfig):
        return {"alpha": (layer.nodes, layer.input_dim),
                "beta": (layer.nodes, layer.memory),
                "bias": (layer.nodes,)}
    return {"weight": (layer.output_dim, layer.input_dim), "bias": (layer.output_dim,)}


@dataclasses.dataclass
class KwsModel:
    config: ModelConfig
    params: Params

    def tensors(self):
        """(layer_index, name, array) in declaration order."""
        for i, layer_params in enumerate(self.params):
            for name in _tensor_shapes(self.config.layers[i]):
                yield i, name, layer_params[name]

    def copy(self) -> "KwsModel":
        return KwsModel(self.config, [{k: v.copy() for k, v in p.items()} for p in self.params])

    def check(self) -> None:
        if len(self.params) != len(self.config.layers):
            raise ShapeError("parameter list does not match layer count")
        for i, layer in enumerate(self.config.layers):
            for name, shape in _tensor_shapes(layer).items():
                arr = self.params[i].get(name)
                if arr is None or arr.shape != shape:
                    raise ShapeError(f"layer {i} {name}: expected {shape}")
                if not np.all(np.isfinite(arr)):
                    raise ValueError(f"layer {i} {name} has non-finite values")


def glorot_bound(shape: Tuple[int, ...]) -> float:
    fan_out, fan_in = shape
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_model(config: ModelConfig, rng: Union[np.random.Generator, int, None] = None) -> KwsModel:
    rng = np.random.default_rng(rng)
    params: Params = []
    for layer in config.layers:
        p = {}
        for name, shape in _tensor_shapes(layer).items():
            if name == "bias":
                p[name] = np.zeros(shape)
            else:
                s = glorot_bound(shape)
                p[name] = rng.uniform(-s, s, size=shape)
        params.append(p)
    return KwsModel(config, params)


# --------------------------------------------------------------------------
# batch forward / backward


def _as_batch(model: KwsModel, feats) -> Tuple[np.ndarray, bool]:
    x = feats.vectors if isinstance(feats, FeatureSequence) else np.asarray(feats)
    x = x.astype(model.params[0]["bias"].dtype if model.params else np.float64, copy=False)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3:
        raise ShapeError(f"features must be (T, F) or (B, T, F), got shape {x.shape}")
    if x.shape[-1] != model.config.layers[0].input_dim:
        raise ShapeError(f"feature dim {x.shape[-1]} != model input dim {model.config.layers[0].input_dim}")
    return x, single


class _Cache:
    __slots__ = ("inputs", "pre", "proj")

    def __init__(self):
        self.inputs: List[np.ndarray] = []
        self.pre: List[Optional[np.ndarray]] = []
        self.proj: List[Optional[np.ndarray]] = []


def _forward(model: KwsModel, x: np.ndarray, keep: bool = False):
    cache = _Cache() if keep else None
    h = x
    enc_out = None
    for i, (layer, p) in enumerate(zip(model.config.layers, model.params)):
        if cache is not None:
            cache.inputs.append(h)
        if isinstance(layer, SvdfLayerConfig):
            a = h @ p["alpha"].T
            pre = _kernels.time_filter(a, p["beta"]) + p["bias"]
            h = np.maximum(pre, 0.0) if layer.activation == "relu" else pre
            if cache is not None:
                cache.proj.append(a)
                cache.pre.append(pre)
        else:
            h = h @ p["weight"].T + p["bias"]
            if cache is not None:
                cache.proj.append(None)
                cache.pre.append(None)
        if i == model.config.split_index - 1:
            enc_out = h
    return np.concatenate([enc_out, h], axis=-1), cache


def forward_batch(model: KwsModel, feats) -> np.ndarray:
    """Logits [Y^E, Y^D] per frame: (T, N+2), or (B, T, N+2) for batched input."""
    x, single = _as_batch(model, feats)
    y, _ = _forward(model, x)
    return y[0] if single else y


def forward_with_cache(model: KwsModel, feats):
    x, single = _as_batch(model, feats)
    y, cache = _forward(model, x, keep=True)
    return y, cache


def backward_from_cache(model: KwsModel, cache: _Cache, upstream: np.ndarray) -> Params:
    layers = model.config.layers
    n_enc = model.config.encoder_output_dim
    if upstream.ndim == 2:
        upstream = upstream[None]
    d_enc = upstream[..., :n_enc]
    dh = upstream[..., n_enc:]
    grads: Params = [None] * len(layers)  # type: ignore[list-item]
    for i in range(len(layers) - 1, -1, -1):
        layer, p, x = layers[i], model.params[i], cache.inputs[i]
        if i == model.config.split_index - 1:
            dh = dh + d_enc
        flat_x = x.reshape(-1, x.shape[-1])
        if isinstance(layer, SvdfLayerConfig):
            pre, a = cache.pre[i], cache.proj[i]
            dpre = dh * (pre > 0.0) if layer.activation == "relu" else dh
            da, dbeta = _kernels.time_filter_backward(dpre, a, p["beta"])
            flat_da = da.reshape(-1, da.shape[-1])
            grads[i] = {"alpha": flat_da.T @ flat_x, "beta": dbeta.astype(a.dtype), "bias": dpre.sum(axis=(0, 1))}
            dh = da @ p["alpha"]
        else:
            flat_dy = dh.reshape(-1, dh.shape[-1])
            grads[i] = {"weight": flat_dy.T @ flat_x, "bias": flat_dy.sum(axis=0)}
            dh = dh @ p["weight"]
    return grads


def backward(model: KwsModel, feats, upstream) -> Params:
    """Exact gradients of sum(upstream * forward_batch(model, feats)) wrt every parameter."""
    x, single = _as_batch(model, feats)
    upstream = np.asarray(upstream, dtype=np.float64)
    expected = (x.shape[0], x.shape[1], model.config.output_dim)
    if (upstream[None] if single else upstream).shape != expected:
        raise ShapeError(f"upstream gradient shape {upstream.shape} does not match logits {expected}")
    _, cache = _forward(model, x, keep=True)
    return backward_from_cache(model, cache, upstream)


# --------------------------------------------------------------------------
# streaming


def _signature(config: ModelConfig) -> Tuple:
    return tuple((l.kind, l.input_dim, l.output_dim, getattr(l, "memory", 0)) for l in config.layers)


@dataclasses.dataclass
class StreamState:
    """Ring buffers of projected inputs, one per SVDF layer (None for projections)."""

    signature: Tuple
    buffers: List[Optional[np.ndarray]]
    cursor: int = 0


def stream_init(model: KwsModel) -> StreamState:
    buffers = [np.zeros((l.memory, l.nodes)) if isinstance(l, SvdfLayerConfig) else None
               for l in model.config.layers]
    return StreamState(_signature(model.config), buffers, 0)


def forward_stream(model: KwsModel, state: StreamState, x_t) -> Tuple[np.ndarray, StreamState]:
    """Advance one 20 ms frame. The state is updated in place and returned."""
    if state.signature != _signature(model.config):
        raise StateError("stream state was created for a different model config")
    h = np.asarray(x_t, dtype=np.float64)
    if h.shape != (model.config.layers[0].input_dim,):
        raise ShapeError(f"frame must be a {model.config.layers[0].input_dim}-vector, got {h.shape}")
    enc_out = None
    for i, (layer, p) in enumerate(zip(model.config.layers, model.params)):
        if isinstance(layer, SvdfLayerConfig):
            buf = state.buffers[i]
            memory = layer.memory
            slot = state.cursor % memory
            buf[slot] = p["alpha"] @ h
            # buffer row for lag tau sits at (slot - tau) mod memory
            lags = (slot - np.arange(memory)) % memory
            pre = np.einsum("nt,tn->n", p["beta"], buf[lags]) + p["bias"]
            h = np.maximum(pre, 0.0) if layer.activation == "relu" else pre
        else:
            h = p["weight"] @ h + p["bias"]
        if i == model.config.split_index - 1:
            enc_out = h
    state.cursor += 1
    return np.concatenate([enc_out, h]), state


def forward_streaming(model: KwsModel, feats) -> np.ndarray:
    """Run a whole sequence through the streaming path; returns (T, N+2)."""
    x, single = _as_batch(model, feats)
    if not single:
        raise ShapeError("streaming runs one sequence at a time")
    state = stream_init(model)
    out = np.zeros((x.shape[1], model.config.output_dim))
    for t in range(x.shape[1]):
        out[t], state = forward_stream(model, state, x[0, t])
    return out


# --------------------------------------------------------------------------
# checkpoint I/O


def save_checkpoint(model: KwsModel, path) -> None:
    """Binary checkpoint plus a ``.json`` sidecar describing it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    config_blob = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(config_blob)))
        f.write(config_blob)
        for _, _, arr in model.tensors():
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    sidecar = {
        "format": "KWSF",
        "version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "param_count": param_count(model.config),
        "tensors": [{"layer": i, "name": name, "shape": list(arr.shape)} for i, name, arr in model.tensors()],
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load_checkpoint(path) -> KwsModel:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
    version, n_cfg = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    offset = 12
    config = ModelConfig.from_dict(json.loads(data[offset:offset + n_cfg].decode("utf-8")))
    offset += n_cfg
    params: Params = []
    for layer in config.layers:
        p = {}
        for name, shape in _tensor_shapes(layer).items():
            n = int(np.prod(shape))
            if offset + 4 * n > len(data):
                raise CheckpointError(f"{path}: truncated tensor data")
            p[name] = np.frombuffer(data, dtype="<f4", count=n, offset=offset).astype(np.float64).reshape(shape)
            offset += 4 * n
        params.append(p)
    if offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - offset} trailing bytes")
    return KwsModel(config, params)
