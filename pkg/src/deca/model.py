"""The capsule autoencoder: conv/instance-norm/GELU stack into four capsule
layers (encoder) and independent per-task fully connected heads (decoders).

Variants fix the task set: D1=[3d], D2=[3d,w], D3=[3d,2d,w] on depth input;
R4=[3d,2d,dm,w] and H4=[3d,2d,dm_j,w] on RGB input.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .capsules import (
    ClassCapsules,
    ConvCapsules,
    PrimaryCapsules,
    RoutingConfig,
    extract_entities,
)
from .errors import ConfigError, ContractError, DimensionError
from .layers import Conv2d, InstanceNorm2d, Linear, Module, conv_output_hw, dropout, gelu
from .tensor import Tensor

VARIANT_TASKS = {
    "D1": ("3d",),
    "D2": ("3d", "w"),
    "D3": ("3d", "2d", "w"),
    "R4": ("3d", "2d", "dm", "w"),
    "H4": ("3d", "2d", "dm_j", "w"),
}

VARIANT_CHANNELS = {"D1": 1, "D2": 1, "D3": 1, "R4": 3, "H4": 3}

DECODED_TASKS = ("3d", "2d", "dm", "dm_j")  # "w" is served by the encoder


@dataclass
class DecaConfig:
    variant: str = "D1"
    joints: int = 15
    input_channels: int | None = None
    input_resolution: tuple = (64, 64)
    recon_resolution: tuple = (64, 64)
    capsule_types: int = 8
    conv_channels: tuple = (64, 128, 256, 256)
    decoder_hidden: int = 128
    heatmap_sigma_px: float = 2.0
    routing: RoutingConfig = field(default_factory=RoutingConfig)
    tasks: tuple | None = None

    def __post_init__(self):
        if self.variant not in VARIANT_TASKS:
            raise ConfigError(f"unknown variant {self.variant!r}, pick one of {sorted(VARIANT_TASKS)}")
        expected = VARIANT_TASKS[self.variant]
        if self.tasks is None:
            self.tasks = expected
        elif tuple(self.tasks) != expected:
            raise ConfigError(f"variant {self.variant} fixes tasks {expected}, got {tuple(self.tasks)}")
        ch = VARIANT_CHANNELS[self.variant]
        if self.input_channels is None:
            self.input_channels = ch
        elif self.input_channels != ch:
            raise ConfigError(
                f"variant {self.variant} uses {ch} input channel(s), got {self.input_channels}"
            )
        if self.joints < 1:
            raise ConfigError("need at least one joint")
        if len(self.conv_channels) != 4:
            raise ConfigError("the encoder stack has exactly four conv layers")
        if self.conv_channels[-1] < 17 * self.capsule_types:
            raise ConfigError(
                f"last conv width {self.conv_channels[-1]} cannot feed "
                f"{self.capsule_types} capsule types (needs >= {17 * self.capsule_types})"
            )
        self.input_resolution = tuple(self.input_resolution)
        self.recon_resolution = tuple(self.recon_resolution)
        if isinstance(self.routing, dict):
            self.routing = _routing_from_dict(self.routing)
        # Fail fast if the stride plan collapses the feature map.
        h, w = self.input_resolution
        for _ in range(4):
            h, w = conv_output_hw(h, w, 3, 2, 1)

    def grid_after_convs(self):
        h, w = self.input_resolution
        for _ in range(4):
            h, w = conv_output_hw(h, w, 3, 2, 1)
        return h, w

    def head_units(self, task):
        hr, wr = self.recon_resolution
        return {
            "3d": self.joints * 3,
            "2d": self.joints * 2,
            "dm": hr * wr,
            "dm_j": self.joints * hr * wr,
        }[task]

    def to_dict(self):
        d = asdict(self)
        d["routing"] = {
            "iterations": self.routing.iterations,
            "prior_strength": self.routing.prior_strength,
            "inv_temperature_schedule": list(self.routing.inv_temperature_schedule),
            "var_epsilon": self.routing.var_epsilon,
        }
        d["tasks"] = list(self.tasks)
        d["input_resolution"] = list(self.input_resolution)
        d["recon_resolution"] = list(self.recon_resolution)
        d["conv_channels"] = list(self.conv_channels)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("input_resolution", "recon_resolution", "conv_channels", "tasks"):
            if key in d and d[key] is not None:
                d[key] = tuple(d[key])
        return cls(**d)


def _routing_from_dict(d):
    known = {f.name for f in fields(RoutingConfig)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown routing config keys: {sorted(unknown)}")
    return RoutingConfig(**d)


@dataclass
class EncoderOutput:
    entities: Tensor  # [B, J, 16], the flattened class-capsule poses
    inverse_graphics: Tensor  # [J, 4, 4]
    class_activations: Tensor  # [B, J]


@dataclass
class Predictions:
    y3d: Tensor
    y2d: Tensor | None = None
    ydm: Tensor | None = None  # depth map [B,H',W'] or joint heatmaps [B,J,H',W']

    def for_task(self, task):
        t = {"3d": self.y3d, "2d": self.y2d, "dm": self.ydm, "dm_j": self.ydm}.get(task)
        if t is None:
            raise ConfigError(f"no prediction head for task {task!r}")
        return t


class Encoder(Module):
    def __init__(self, cfg, rng):
        chans = (cfg.input_channels,) + tuple(cfg.conv_channels)
        self.convs = [Conv2d(chans[i], chans[i + 1], rng) for i in range(4)]
        self.norms = [InstanceNorm2d(c) for c in cfg.conv_channels]
        self.primary = PrimaryCapsules(cfg.conv_channels[-1], cfg.capsule_types, rng)
        t = cfg.capsule_types
        self.caps1 = ConvCapsules(t, t, rng, cfg.routing)
        self.caps2 = ConvCapsules(t, t, rng, cfg.routing)
        self.class_caps = ClassCapsules(t, cfg.joints, rng, cfg.routing)
        self.joints = cfg.joints

    def __call__(self, x):
        for conv, norm in zip(self.convs, self.norms):
            x = gelu(norm(conv(x)))
        state = self.primary(x)
        state = self.caps1(state)
        state = self.caps2(state)
        routed, y_w = self.class_caps(state)
        b = routed.batch
        entities = routed.poses.reshape(b, self.joints, 16)
        return EncoderOutput(entities, y_w, routed.activations)


class TaskDecoder(Module):
    """Dropout -> Linear -> GELU -> Linear; heads share nothing."""

    def __init__(self, in_features, hidden, out_units, rng):
        self.fc1 = Linear(in_features, hidden, rng)
        self.fc2 = Linear(hidden, out_units, rng)

    def __call__(self, x, training, rng):
        x = dropout(x, 0.5, training, rng)
        return self.fc2(gelu(self.fc1(x)))


class DecaModel(Module):
    def __init__(self, cfg, seed=0):
        if not isinstance(cfg, DecaConfig):
            raise ConfigError("DecaModel needs a DecaConfig")
        rng = np.random.default_rng([int(seed), 0])
        self.cfg = cfg
        self.encoder = Encoder(cfg, rng)
        in_f = cfg.joints * 16
        self.decoders = {
            task: TaskDecoder(in_f, cfg.decoder_hidden, cfg.head_units(task), rng)
            for task in DECODED_TASKS
            if task in cfg.tasks
        }
        self._training = False

    # Dropout is the only stochastic piece; train mode requires an rng.
    def train(self):
        self._training = True
        return self

    def eval(self):
        self._training = False
        return self

    @property
    def training(self):
        return self._training

    def encode(self, x):
        x = Tensor._coerce(x)
        if x.ndim != 4:
            raise DimensionError(f"model input must be [B,C,H,W], got {x.shape}")
        if x.shape[1] != self.cfg.input_channels:
            raise DimensionError(
                f"model expects {self.cfg.input_channels} channel(s), got {x.shape[1]}"
            )
        return self.encoder(x)

    def decode(self, entities, dropout_rng=None):
        if self._training and dropout_rng is None:
            raise ContractError("train-mode decode needs a dropout rng")
        b = entities.shape[0]
        j = self.cfg.joints
        x = entities.reshape(b, j * 16)
        hr, wr = self.cfg.recon_resolution
        out = {}
        for task in ("3d", "2d", "dm", "dm_j"):
            head = self.decoders.get(task)
            if head is None:
                continue
            y = head(x, self._training, dropout_rng)
            if task == "3d":
                out["y3d"] = y.reshape(b, j, 3)
            elif task == "2d":
                out["y2d"] = y.reshape(b, j, 2)
            elif task == "dm":
                out["ydm"] = y.reshape(b, hr, wr)
            else:
                out["ydm"] = y.reshape(b, j, hr, wr)
        return Predictions(**out)

    def forward(self, x, dropout_rng=None):
        enc = self.encode(x)
        return self.decode(enc.entities, dropout_rng), enc.inverse_graphics

    __call__ = forward

    def class_transforms(self):
        return self.encoder.class_caps.weights

    def entity_split(self, flat_features):
        return extract_entities(flat_features, self.cfg.joints)
