"""Shared backbone, per-attribute branches and heads, optional graph attention.

Parameter tags route gradients during training:

* ``FLN``    backbone and branches (feature learning)
* ``HEAD_F`` per-attribute classifiers on branch features
* ``CLN``    per-attribute projections feeding the attention layer
* ``HEAD_C`` per-attribute classifiers on refined nodes

The attention path reads detached branch outputs, so nothing computed on it
can send gradient into FLN or HEAD_F.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from galnet import autodiff as ad
from galnet.autodiff import Tensor
from galnet.errors import ConfigError, DimensionError, ParseError
from galnet.gal import PriorGraph, gal_forward, prior_affinity
from galnet.layers import BatchNormLayer, Conv2dLayer, LinearLayer, PseModule

VARIANTS = ("baseline", "gal_j", "gal_c", "gal_p")
TAGS = ("FLN", "CLN", "HEAD_F", "HEAD_C")


def normalize_variant(name: str) -> str:
    v = name.strip().lower().replace("-", "_")
    if v not in VARIANTS:
        raise ConfigError(f"variant: expected one of {VARIANTS}, got {name!r}")
    return v


@dataclass(frozen=True)
class BlockSpec:
    channels: int
    kernel: int = 3
    stride: int = 1
    pool: bool = True


DEFAULT_BACKBONE = (BlockSpec(16), BlockSpec(32), BlockSpec(64))


@dataclass
class ModelConfig:
    num_attributes: int
    input_shape: tuple[int, int, int] = (32, 32, 1)
    backbone: tuple[BlockSpec, ...] = DEFAULT_BACKBONE
    branch_channels: int = 32
    projection_channels: int = 8
    pse_hidden: int = 4
    variant: str = "gal_j"
    prior_groups: list[tuple[str, list[int]]] | None = None
    scale_affinity: bool = False
    projection_init_gain: float = 1.0
    bn_momentum: float = 0.9
    bn_epsilon: float = 1e-5

    def __post_init__(self):
        self.variant = normalize_variant(self.variant)
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.backbone = tuple(b if isinstance(b, BlockSpec) else BlockSpec(**b) for b in self.backbone)
        if self.prior_groups is not None:
            self.prior_groups = [(str(n), [int(i) for i in m]) for n, m in self.prior_groups]
        self.validate()

    def validate(self) -> None:
        if self.num_attributes < 2:
            raise ConfigError(f"num_attributes: need at least 2, got {self.num_attributes}")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigError(f"input_shape: need three positive dims, got {self.input_shape}")
        for name in ("branch_channels", "projection_channels", "pse_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be positive")
        if self.projection_init_gain <= 0:
            raise ConfigError("projection_init_gain: must be positive")
        for i, b in enumerate(self.backbone):
            if b.channels < 1 or b.kernel < 1 or b.stride < 1:
                raise ConfigError(f"backbone[{i}]: dims must be positive, got {b}")
        if self.variant == "gal_p":
            if not self.prior_groups:
                raise ConfigError("prior_groups: required for variant gal_p")
            try:
                prior_affinity(self.prior_groups, self.num_attributes)
            except ValueError as exc:
                raise ConfigError(f"prior_groups: {exc}") from None
        h, w, _ = self.input_shape
        for i, b in enumerate(self.backbone):
            h = (h + 2 * (b.kernel // 2) - b.kernel) // b.stride + 1
            w = (w + 2 * (b.kernel // 2) - b.kernel) // b.stride + 1
            if b.pool:
                h, w = h // 2, w // 2
            if h < 1 or w < 1:
                raise ConfigError(f"backbone[{i}]: spatial size collapses below 1 for input {self.input_shape}")

    @property
    def feature_shape(self) -> tuple[int, int]:
        h, w, _ = self.input_shape
        for b in self.backbone:
            h = (h + 2 * (b.kernel // 2) - b.kernel) // b.stride + 1
            w = (w + 2 * (b.kernel // 2) - b.kernel) // b.stride + 1
            if b.pool:
                h, w = h // 2, w // 2
        return h, w

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["backbone"] = tuple(BlockSpec(**b) for b in d.get("backbone", ()))
        return cls(**d)


class ParamRegistry:
    """Named trainable tensors, each tagged with its subnetwork."""

    def __init__(self):
        self.entries: dict[str, tuple[Tensor, str]] = {}

    def add(self, name: str, tensor: Tensor, tag: str) -> Tensor:
        if tag not in TAGS:
            raise ValueError(f"unknown tag {tag!r}")
        if name in self.entries:
            raise ValueError(f"duplicate parameter name {name!r}")
        if any(t is tensor for t, _ in self.entries.values()):
            raise ValueError(f"tensor registered twice (as {name!r})")
        tensor.name = name
        self.entries[name] = (tensor, tag)
        return tensor

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[tuple[str, Tensor, str]]:
        for name, (t, tag) in self.entries.items():
            yield name, t, tag

    def tagged(self, *tags: str) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t, tag in self if tag in tags]

    def tag_of(self, name: str) -> str:
        return self.entries[name][1]

    def count(self, *tags: str) -> int:
        """Total scalar parameter count, optionally restricted to tags."""
        return int(sum(t.size for _, t, tag in self if not tags or tag in tags))

    def zero_grad(self) -> None:
        for _, t, _ in self:
            t.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t, _ in self}


@dataclass
class ForwardOutput:
    logits_f: Tensor
    logits_c: Tensor | None = None
    attention: Tensor | None = None
    branch_features: list[Tensor] = field(default_factory=list)


def _rng_for(seed: int, name: str) -> np.random.Generator:
    # one stream per parameter: adding or removing a subnetwork never shifts
    # the initial values of the others
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


class AttributeModel:
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.registry = ParamRegistry()
        self.batchnorms: dict[str, BatchNormLayer] = {}
        c = config
        m = c.num_attributes

        self.backbone: list[tuple[Conv2dLayer, BatchNormLayer, bool]] = []
        cin = c.input_shape[2]
        for i, block in enumerate(c.backbone):
            conv = Conv2dLayer.create(
                _rng_for(seed, f"backbone.{i}.conv"), block.kernel, block.kernel, cin, block.channels,
                bias=False, stride=block.stride, padding=block.kernel // 2,
            )
            bn = BatchNormLayer.create(block.channels, c.bn_momentum, c.bn_epsilon)
            self._register(f"backbone.{i}.conv", conv.params(), "FLN")
            self._register_bn(f"backbone.{i}.bn", bn, "FLN")
            self.backbone.append((conv, bn, block.pool))
            cin = block.channels

        fh, fw = c.feature_shape
        cb, cp = c.branch_channels, c.projection_channels
        self.branches: list[tuple[Conv2dLayer, BatchNormLayer, PseModule]] = []
        self.heads_f: list[LinearLayer] = []
        self.projections: list[Conv2dLayer] = []
        self.heads_c: list[LinearLayer] = []
        for i in range(m):
            conv = Conv2dLayer.create(_rng_for(seed, f"branch.{i}.conv"), 1, 1, cin, cb, bias=False)
            bn = BatchNormLayer.create(cb, c.bn_momentum, c.bn_epsilon)
            pse = PseModule.create(_rng_for(seed, f"branch.{i}.pse"), c.pse_hidden)
            self._register(f"branch.{i}.conv", conv.params(), "FLN")
            self._register_bn(f"branch.{i}.bn", bn, "FLN")
            self._register(f"branch.{i}.pse", pse.params(), "FLN")
            self.branches.append((conv, bn, pse))
            head = LinearLayer.create(_rng_for(seed, f"head_f.{i}"), fh * fw * cb, 2)
            self._register(f"head_f.{i}", head.params(), "HEAD_F")
            self.heads_f.append(head)

        self.prior: PriorGraph | None = None
        if c.variant != "baseline":
            for i in range(m):
                proj = Conv2dLayer.create(_rng_for(seed, f"proj.{i}"), 1, 1, cb, cp)
                proj.kernel.data = proj.kernel.data * c.projection_init_gain
                self._register(f"proj.{i}", proj.params(), "CLN")
                self.projections.append(proj)
                head = LinearLayer.create(_rng_for(seed, f"head_c.{i}"), fh * fw * cp, 2)
                self._register(f"head_c.{i}", head.params(), "HEAD_C")
                self.heads_c.append(head)
            if c.variant == "gal_p":
                self.prior = prior_affinity(c.prior_groups, m)

    def _register(self, prefix: str, params: dict[str, Tensor], tag: str) -> None:
        for k, t in params.items():
            self.registry.add(f"{prefix}.{k}", t, tag)

    def _register_bn(self, prefix: str, bn: BatchNormLayer, tag: str) -> None:
        self._register(prefix, bn.params(), tag)
        self.batchnorms[prefix] = bn

    @property
    def variant(self) -> str:
        return self.config.variant

    def branch_features(self, batch: Tensor, bn_mode: str) -> list[Tensor]:
        h = batch
        for conv, bn, pool in self.backbone:
            h = ad.relu(bn(conv(h), bn_mode))
            if pool:
                h = ad.max_pool2d(h)
        return [pse(ad.relu(bn(conv(h), bn_mode))) for conv, bn, pse in self.branches]

    def forward(self, batch, mode: str = "train", freeze_fln: bool = False) -> ForwardOutput:
        """Run the network. ``freeze_fln`` evaluates FLN batch norms with
        running statistics so a frozen feature net stays bit-for-bit fixed."""
        x = batch if isinstance(batch, Tensor) else Tensor(batch)
        if x.data.ndim != 4 or tuple(x.shape[1:]) != self.config.input_shape:
            raise DimensionError(f"batch shape {x.shape} does not match input {self.config.input_shape}")
        feats = self.branch_features(x, "infer" if freeze_fln or mode == "infer" else "train")
        b = x.shape[0]
        logits_f = ad.stack([head(ad.reshape(f, (b, -1))) for head, f in zip(self.heads_f, feats)], axis=1)
        out = ForwardOutput(logits_f, branch_features=feats)
        if self.variant == "baseline":
            return out
        refined, weights = gal_forward(
            [ad.detach(f) for f in feats], self.projections, self.prior, self.config.scale_affinity
        )
        out.logits_c = ad.stack([head(refined[:, i, :]) for i, head in enumerate(self.heads_c)], axis=1)
        out.attention = weights
        return out

    __call__ = forward

    def predict(self, batch, use_f: bool = False) -> np.ndarray:
        """Binary labels B x M. Ties go to class 0."""
        out = self.forward(batch, mode="infer")
        logits = out.logits_f if use_f or out.logits_c is None else out.logits_c
        return np.argmax(logits.data, axis=-1).astype(np.int64)


def build_model(config: ModelConfig, seed: int = 0) -> tuple[AttributeModel, ParamRegistry]:
    model = AttributeModel(config, seed)
    return model, model.registry


def predict(model: AttributeModel, batch, use_f: bool = False) -> np.ndarray:
    return model.predict(batch, use_f)


# checkpoint container --------------------------------------------------------
#
#   8 bytes  magic "GALCKPT\0"
#   4 bytes  uint32 LE format version
#   8 bytes  uint64 LE header length
#   header   UTF-8 JSON: config echo, entries (name, kind, tag, shape, offset)
#   payload  float64 LE values, concatenated in entry order

CKPT_MAGIC = b"GALCKPT\0"
CKPT_VERSION = 1


def save_checkpoint(path, model: AttributeModel, extra: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name, t, tag in model.registry:
        entries.append({"name": name, "kind": "param", "tag": tag, "shape": list(t.shape), "offset": offset})
        blobs.append(t.data)
        offset += t.size
    for prefix, bn in model.batchnorms.items():
        tag = model.registry.tag_of(f"{prefix}.gamma")
        for key, arr in bn.buffers().items():
            entries.append({"name": f"{prefix}.{key}", "kind": "buffer", "tag": tag, "shape": list(arr.shape), "offset": offset})
            blobs.append(arr)
            offset += arr.size
    header = {
        "version": CKPT_VERSION,
        "config": model.config.to_dict(),
        "entries": entries,
        "extra": extra or {},
    }
    raw = json.dumps(header, sort_keys=True).encode()
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in blobs)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<IQ", CKPT_VERSION, len(raw)) + raw + payload)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise ParseError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<IQ", data, 8)
    if version != CKPT_VERSION:
        raise ParseError(f"{path}: unsupported checkpoint version {version}")
    start = 20 + hlen
    header = json.loads(data[20:start].decode())
    values = np.frombuffer(data, dtype="<f8", offset=start)
    arrays = {}
    for e in header["entries"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        arrays[e["name"]] = values[e["offset"] : e["offset"] + n].reshape(e["shape"]).astype(np.float64)
    return header, arrays


def load_checkpoint(path) -> tuple[AttributeModel, dict]:
    """Rebuild the model stored at ``path``; returns (model, extra metadata)."""
    header, arrays = read_checkpoint(path)
    config = ModelConfig.from_dict(header["config"])
    model = AttributeModel(config, seed=0)
    load_state(model, arrays)
    return model, header.get("extra", {})


def load_state(model: AttributeModel, arrays: dict[str, np.ndarray], tags: tuple[str, ...] | None = None) -> None:
    """Copy parameters (and batch-norm statistics) whose tag is in ``tags``."""
    for name, t, tag in model.registry:
        if tags is not None and tag not in tags:
            continue
        if name not in arrays:
            raise ParseError(f"checkpoint lacks parameter {name!r}")
        if arrays[name].shape != t.shape:
            raise ParseError(f"{name}: shape {arrays[name].shape} != {t.shape}")
        t.data = arrays[name].copy()
    for prefix, bn in model.batchnorms.items():
        if tags is not None and model.registry.tag_of(f"{prefix}.gamma") not in tags:
            continue
        bn.running_mean = arrays[f"{prefix}.running_mean"].copy()
        bn.running_var = arrays[f"{prefix}.running_var"].copy()
