"""ECAPA-lite and DepAudioNet-lite on raw audio, with FE/FP parameter tagging."""

from __future__ import annotations

import dataclasses
from collections import OrderedDict
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable

import numpy as np

from .autodiff import (
    Tensor,
    attentive_stats_pool,
    concat,
    conv1d,
    linear,
    lstm_sequence,
    relu,
    se_res2_block,
)
from .errors import ConfigError, ShapeError
from .seeding import substream

FE = "FE"
FP = "FP"
ARCHITECTURES = ("ecapa_lite", "depaudionet_lite")

BASE_CHANNELS = 128
INPUT_KERNEL = 1024
INPUT_STRIDE = 512
# (kernel, dilation) for SE-Res2-1..3; padding equals dilation
SE_RES2_CONFIG = ((3, 2), (3, 3), (3, 4))


@dataclass(frozen=True)
class ModelSpec:
    architecture: str = "ecapa_lite"
    channel_multiplier: float = 1.0
    embedding_dim: int = 128
    num_speakers: int = 107
    segment_len: int = 61440
    seed: int = 0
    res2_scale: int = 4
    se_ratio: int = 8
    attention_dim: int = 128
    # DepAudioNet-lite front end; channels are scaled by channel_multiplier
    dan_kernels: tuple[int, int] = (1024, 3)
    dan_strides: tuple[int, int] = (512, 1)
    dtype: str = "float32"

    def __post_init__(self):
        self.validate()

    @property
    def channels(self) -> int:
        return _scaled(BASE_CHANNELS, self.channel_multiplier)

    def validate(self) -> None:
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"architecture must be one of {ARCHITECTURES}, got {self.architecture!r}")
        scaled = Fraction(self.channel_multiplier).limit_denominator(10**6) * BASE_CHANNELS
        if self.channel_multiplier <= 0 or scaled.denominator != 1:
            raise ConfigError(
                f"channel_multiplier * {BASE_CHANNELS} must be a positive integer, got {self.channel_multiplier}"
            )
        if self.num_speakers < 2:
            raise ConfigError("num_speakers must be >= 2")
        if self.embedding_dim < 1:
            raise ConfigError("embedding_dim must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        c = self.channels
        if self.architecture == "ecapa_lite":
            if c % self.res2_scale:
                raise ConfigError(f"{c} channels not divisible by res2_scale={self.res2_scale}")
            if c // self.se_ratio < 1:
                raise ConfigError(f"se_ratio={self.se_ratio} leaves no bottleneck channels for C={c}")
            if _scaled(self.attention_dim, self.channel_multiplier) < 1:
                raise ConfigError("attention_dim too small for channel_multiplier")
        k0 = INPUT_KERNEL if self.architecture == "ecapa_lite" else self.dan_kernels[0]
        if self.segment_len < k0:
            raise ConfigError(f"segment_len={self.segment_len} shorter than the input kernel {k0}")

    def replace(self, **changes) -> "ModelSpec":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["dan_kernels"] = list(self.dan_kernels)
        d["dan_strides"] = list(self.dan_strides)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        for key in ("dan_kernels", "dan_strides"):
            if key in d:
                d[key] = tuple(d[key])
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model spec fields: {sorted(unknown)}")
        return cls(**d)


def _scaled(n: int, multiplier: float) -> int:
    return int(round(n * multiplier))


@dataclass(frozen=True)
class LayerInfo:
    name: str
    tag: str
    prediction: bool = False


@dataclass
class ForwardOut:
    mdd_logit: Tensor
    spk_logits: Tensor
    embedding: Tensor
    activations: "OrderedDict[str, Tensor]"
    layers: list[LayerInfo] = field(default_factory=list)

    def analysis_layers(self) -> list[str]:
        """Layer names eligible for separability analysis (prediction layers excluded)."""
        return [info.name for info in self.layers if not info.prediction]

    def is_prediction(self, name: str) -> bool:
        return any(info.name == name and info.prediction for info in self.layers)


class Model:
    """Ordered named layers with every parameter tagged FE or FP."""

    def __init__(self, spec: ModelSpec, layers: list[LayerInfo], params: "OrderedDict[str, Tensor]"):
        self.spec = spec
        self.layers = layers
        self.params = params
        layer_tags = {info.name: info.tag for info in layers}
        self.tags: dict[str, str] = {}
        for name in params:
            layer = name.split(".", 1)[0]
            if layer not in layer_tags:
                raise ConfigError(f"parameter {name} belongs to no declared layer")
            self.tags[name] = layer_tags[layer]

    @property
    def architecture(self) -> str:
        return self.spec.architecture

    @property
    def layer_names(self) -> list[str]:
        return [info.name for info in self.layers]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def group(self, tag: str) -> list[str]:
        return [n for n, t in self.tags.items() if t == tag]

    def parameter_count(self, include_speaker_head: bool = True) -> int:
        return sum(
            p.size
            for name, p in self.params.items()
            if include_speaker_head or not name.startswith("speaker_prediction.")
        )

    def layer_parameter_names(self, layer: str) -> list[str]:
        return [n for n in self.params if n.split(".", 1)[0] == layer]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data.copy()) for k, v in self.params.items())

    def load_state_dict(self, state: dict) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ConfigError(f"state dict mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ShapeError(f"{k}: expected shape {p.shape}, got {arr.shape}", dim=k)
            p.data = arr.astype(p.dtype, copy=True)
            p.grad = None

    def copy(self) -> "Model":
        clone = build_model(self.spec)
        clone.load_state_dict(self.state_dict())
        return clone

    def forward(self, segments) -> ForwardOut:
        x = segments.data if isinstance(segments, Tensor) else np.asarray(segments)
        unbatched = x.ndim == 1
        if unbatched:
            x = x[None]
        if x.ndim != 2 or x.shape[1] != self.spec.segment_len:
            raise ShapeError(
                f"expected segments of length {self.spec.segment_len}, got shape {tuple(segments.shape)}",
                dim="segment_len",
            )
        x = Tensor(x.astype(self.spec.dtype, copy=False)[:, None, :])
        if self.architecture == "ecapa_lite":
            acts = self._forward_ecapa(x)
        else:
            acts = self._forward_depaudionet(x)
        out = ForwardOut(
            mdd_logit=acts["depression_prediction"],
            spk_logits=acts["speaker_prediction"],
            embedding=acts.pop("__embedding__"),
            activations=acts,
            layers=list(self.layers),
        )
        if unbatched:
            out.mdd_logit = out.mdd_logit.reshape(-1)
            out.spk_logits = out.spk_logits.reshape(-1)
            out.embedding = out.embedding.reshape(-1)
            out.activations = OrderedDict((k, v.reshape(v.shape[1:])) for k, v in acts.items())
        return out

    __call__ = forward

    def _sub(self, prefix: str) -> dict[str, Tensor]:
        n = len(prefix) + 1
        return {k[n:]: v for k, v in self.params.items() if k.startswith(prefix + ".")}

    def _forward_ecapa(self, x: Tensor) -> "OrderedDict[str, Tensor]":
        p = self.params
        acts: OrderedDict[str, Tensor] = OrderedDict()
        h = relu(conv1d(x, p["input_conv.weight"], p["input_conv.bias"], stride=INPUT_STRIDE))
        acts["input_conv"] = h
        blocks = []
        for i, (k, d) in enumerate(SE_RES2_CONFIG, start=1):
            name = f"se_res2_{i}"
            h = se_res2_block(h, self._sub(name), kernel=k, dilation=d, scale=self.spec.res2_scale)
            acts[name] = h
            blocks.append(h)
        h = concat(blocks, axis=-2)
        acts["feature_aggregation"] = h
        h = relu(conv1d(h, p["concat_conv.weight"], p["concat_conv.bias"]))
        acts["concat_conv"] = h
        h = attentive_stats_pool(h, self._sub("attentive_stats_pool"))
        acts["attentive_stats_pool"] = h
        emb = linear(h, p["embedding.weight"], p["embedding.bias"])
        acts["embedding"] = emb
        acts["speaker_prediction"] = linear(emb, p["speaker_prediction.weight"], p["speaker_prediction.bias"])
        acts["depression_prediction"] = linear(emb, p["depression_prediction.weight"], p["depression_prediction.bias"])
        acts["__embedding__"] = emb
        return acts

    def _forward_depaudionet(self, x: Tensor) -> "OrderedDict[str, Tensor]":
        p = self.params
        s = self.spec
        acts: OrderedDict[str, Tensor] = OrderedDict()
        h = relu(conv1d(x, p["conv1.weight"], p["conv1.bias"], stride=s.dan_strides[0]))
        acts["conv1"] = h
        k2 = s.dan_kernels[1]
        h = relu(conv1d(h, p["conv2.weight"], p["conv2.bias"], stride=s.dan_strides[1], pad=(k2 - 1) // 2))
        acts["conv2"] = h
        seq = h.transpose(0, 2, 1)
        for name in ("lstm1", "lstm2"):
            seq = lstm_sequence(seq, p[f"{name}.w_ih"], p[f"{name}.w_hh"], p[f"{name}.bias"])
            # channel-first like the conv layers: [B, H, T]
            acts[name] = seq.transpose(0, 2, 1)
        emb = seq[:, -1, :]
        acts["speaker_prediction"] = linear(emb, p["speaker_prediction.weight"], p["speaker_prediction.bias"])
        acts["depression_prediction"] = linear(emb, p["depression_prediction.weight"], p["depression_prediction.bias"])
        acts["__embedding__"] = emb
        return acts


# ---------------------------------------------------------------------------
# construction


class _Init:
    def __init__(self, rng: np.random.Generator, dtype: str):
        self.rng = rng
        self.dtype = dtype
        self.params: OrderedDict[str, Tensor] = OrderedDict()

    def kaiming(self, name: str, shape: tuple[int, ...], fan_in: int) -> None:
        bound = np.sqrt(6.0 / fan_in)
        self._add(name, self.rng.uniform(-bound, bound, size=shape))

    def uniform(self, name: str, shape: tuple[int, ...], bound: float) -> None:
        self._add(name, self.rng.uniform(-bound, bound, size=shape))

    def zeros(self, name: str, shape: tuple[int, ...]) -> None:
        self._add(name, np.zeros(shape))

    def conv(self, prefix: str, c_out: int, c_in: int, k: int) -> None:
        self.kaiming(f"{prefix}.weight", (c_out, c_in, k), c_in * k)
        self.zeros(f"{prefix}.bias", (c_out,))

    def dense(self, prefix: str, out: int, inp: int) -> None:
        self.kaiming(f"{prefix}.weight", (out, inp), inp)
        self.zeros(f"{prefix}.bias", (out,))

    def _add(self, name: str, arr: np.ndarray) -> None:
        self.params[name] = Tensor(arr.astype(self.dtype), requires_grad=True)


def build_ecapa_lite(spec: ModelSpec) -> Model:
    if spec.architecture != "ecapa_lite":
        spec = spec.replace(architecture="ecapa_lite")
    c = spec.channels
    init = _Init(substream(spec.seed, "init"), spec.dtype)
    init.conv("input_conv", c, 1, INPUT_KERNEL)
    width = c // spec.res2_scale
    bottleneck = c // spec.se_ratio
    for i, (k, _) in enumerate(SE_RES2_CONFIG, start=1):
        name = f"se_res2_{i}"
        init.conv(f"{name}.tdnn1", c, c, 1)
        for j in range(1, spec.res2_scale):
            init.conv(f"{name}.res2.{j}", width, width, k)
        init.conv(f"{name}.tdnn2", c, c, 1)
        init.conv(f"{name}.se.conv1", bottleneck, c, 1)
        init.conv(f"{name}.se.conv2", c, bottleneck, 1)
    agg = 3 * c
    init.conv("concat_conv", agg, agg, 1)
    att = _scaled(spec.attention_dim, spec.channel_multiplier)
    init.conv("attentive_stats_pool.attention.conv1", att, agg, 1)
    init.conv("attentive_stats_pool.attention.conv2", agg, att, 1)
    init.dense("embedding", spec.embedding_dim, 2 * agg)
    init.dense("speaker_prediction", spec.num_speakers, spec.embedding_dim)
    init.dense("depression_prediction", 1, spec.embedding_dim)
    layers = [
        LayerInfo("input_conv", FE),
        LayerInfo("se_res2_1", FE),
        LayerInfo("se_res2_2", FE),
        LayerInfo("se_res2_3", FE),
        LayerInfo("feature_aggregation", FP),
        LayerInfo("concat_conv", FP),
        LayerInfo("attentive_stats_pool", FP),
        LayerInfo("embedding", FP),
        LayerInfo("speaker_prediction", FP, prediction=True),
        LayerInfo("depression_prediction", FP, prediction=True),
    ]
    return Model(spec, layers, init.params)


def build_depaudionet_lite(spec: ModelSpec) -> Model:
    if spec.architecture != "depaudionet_lite":
        spec = spec.replace(architecture="depaudionet_lite")
    c = spec.channels
    h = spec.embedding_dim
    init = _Init(substream(spec.seed, "init"), spec.dtype)
    init.conv("conv1", c, 1, spec.dan_kernels[0])
    init.conv("conv2", c, c, spec.dan_kernels[1])
    for name, d_in in (("lstm1", c), ("lstm2", h)):
        bound = 1.0 / np.sqrt(h)
        init.uniform(f"{name}.w_ih", (4 * h, d_in), bound)
        init.uniform(f"{name}.w_hh", (4 * h, h), bound)
        init.uniform(f"{name}.bias", (4 * h,), bound)
    init.dense("speaker_prediction", spec.num_speakers, h)
    init.dense("depression_prediction", 1, h)
    layers = [
        LayerInfo("conv1", FE),
        LayerInfo("conv2", FE),
        LayerInfo("lstm1", FP),
        LayerInfo("lstm2", FP),
        LayerInfo("speaker_prediction", FP, prediction=True),
        LayerInfo("depression_prediction", FP, prediction=True),
    ]
    return Model(spec, layers, init.params)


def build_model(spec: ModelSpec) -> Model:
    if spec.architecture == "ecapa_lite":
        return build_ecapa_lite(spec)
    return build_depaudionet_lite(spec)


def forward(model: Model, segment) -> ForwardOut:
    return model.forward(segment)


def assert_partition(model: Model, names: Iterable[str] | None = None) -> None:
    names = set(model.params if names is None else names)
    fe, fp = set(model.group(FE)), set(model.group(FP))
    if fe & fp or (fe | fp) != names:
        raise ConfigError("FE/FP tags do not partition the parameters")
