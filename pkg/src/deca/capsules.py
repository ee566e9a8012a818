"""Matrix capsule layers with iterative variational-Bayes-style routing.

A capsule is an activation in (0,1) plus a 4x4 pose matrix (16-d entity).
Lower capsules vote for higher ones through trainable 4x4 transforms; routing
fits a diagonal Gaussian mixture over the votes, unrolled and differentiable
end to end.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, DegenerateInputError, DimensionError
from .layers import Conv2d, Module, Parameter, xavier_uniform_init
from .tensor import (
    Tensor,
    concat,
    get_default_dtype,
    index_select,
    log_sigmoid,
    sigmoid,
    softmax,
)

POSE_DIM = 16
_TINY = 1e-12
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class RoutingConfig:
    """Knobs of the routing loop.

    prior_strength is a pseudo-count pulling the per-cluster variance toward
    one; the inverse temperatures sharpen activations across iterations.
    """

    iterations: int = 3
    prior_strength: float = 1.0
    inv_temperature_schedule: tuple = (1.0, 2.0, 3.0)
    var_epsilon: float = 1e-8

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError("routing needs at least one iteration")
        if self.prior_strength < 0:
            raise ConfigError("prior_strength must be >= 0")
        sched = tuple(float(x) for x in self.inv_temperature_schedule)
        if len(sched) != self.iterations:
            raise ConfigError(
                f"inv_temperature_schedule length {len(sched)} != iterations {self.iterations}"
            )
        if any(x <= 0 for x in sched) or any(b < a for a, b in zip(sched, sched[1:])):
            raise ConfigError("inverse temperatures must be positive and non-decreasing")
        self.inv_temperature_schedule = sched


@dataclass
class CapsuleState:
    """One capsule layer: activations [B,N] in (0,1), poses [B,N,4,4].

    spatial_layout = (H, W, types) for grid layers; capsule index is
    position-major: i = (h*W + w)*types + t.
    """

    activations: Tensor
    poses: Tensor
    spatial_layout: tuple | None = None

    @property
    def batch(self):
        return self.activations.shape[0]

    @property
    def count(self):
        return self.activations.shape[1]


class TransformWeights(Module):
    """Trainable pose transforms W[type, out_slot, 4, 4], shared across
    spatial positions of each lower capsule type."""

    def __init__(self, in_types, out_slots, rng):
        self.in_types = in_types
        self.out_slots = out_slots
        self.W = Parameter(xavier_uniform_init((in_types, out_slots, 4, 4), rng))


class InverseGraphicsMatrix(Module):
    """One learnable approximate render-inverse per class capsule."""

    def __init__(self, n_classes, rng):
        self.n_classes = n_classes
        self.Y = Parameter(xavier_uniform_init((n_classes, 4, 4), rng))


def compute_votes(state, weights):
    """Votes V[i,j] = M_i @ W[type(i), j], batched over samples.

    type(i) comes from the state's spatial layout (capsule index mod types);
    without a layout the lower count must equal the weight type count.
    """
    poses = state.poses if isinstance(state, CapsuleState) else Tensor._coerce(state)
    unbatched = poses.ndim == 3
    if unbatched:
        poses = poses.reshape(1, *poses.shape)
    b, n_i = poses.shape[0], poses.shape[1]
    layout = state.spatial_layout if isinstance(state, CapsuleState) else None
    if layout is not None:
        types = layout[2]
        if types != weights.in_types:
            raise DimensionError(
                f"weight types {weights.in_types} != lower capsule types {types}"
            )
        type_idx = np.arange(n_i) % types
    else:
        if n_i != weights.in_types:
            raise DimensionError(
                f"without a spatial layout, lower count {n_i} must equal weight types {weights.in_types}"
            )
        type_idx = np.arange(n_i)
    w_g = index_select(weights.W, 0, type_idx)  # [N_i, N_j, 4, 4]
    votes = poses.reshape(b, n_i, 1, 4, 4) @ w_g.reshape(1, n_i, weights.out_slots, 4, 4)
    return votes[0] if unbatched else votes


def vb_routing(a_lower, votes, cfg, beta_a=None, beta_u=None):
    """Route lower capsules to N_j higher ones by fitting a Gaussian per slot.

    a_lower: [B,N_i] (or [N_i]); votes: [B,N_i,N_j,16] (or unbatched).
    Responsibilities start uniform over j; each iteration re-fits weighted
    means/variances (M-step) and, except after the last fit, re-assigns
    responsibilities from the posterior densities (E-step). Activations come
    from a tempered sigmoid over the weighted fit cost.
    """
    a_lower = Tensor._coerce(a_lower)
    votes = Tensor._coerce(votes)
    unbatched = a_lower.ndim == 1
    if unbatched:
        a_lower = a_lower.reshape(1, *a_lower.shape)
        votes = votes.reshape(1, *votes.shape)
    b, n_i = a_lower.shape
    if votes.ndim == 5 and votes.shape[-2:] == (4, 4):
        votes = votes.reshape(votes.shape[0], votes.shape[1], votes.shape[2], POSE_DIM)
    if votes.ndim != 4 or votes.shape[0] != b or votes.shape[1] != n_i or votes.shape[3] != POSE_DIM:
        raise DimensionError(f"votes shape {votes.shape} does not match activations {a_lower.shape}")
    n_j = votes.shape[2]
    if n_j == 0:
        raise ConfigError("routing needs at least one output capsule")
    if float(np.max(a_lower.data)) < 1e-12:
        raise DegenerateInputError("all lower activations are (near) zero")

    if beta_a is None:
        beta_a = Tensor(np.asarray(0.0, dtype=votes.dtype))
    if beta_u is None:
        beta_u = Tensor(np.asarray(1.0, dtype=votes.dtype))

    kappa = cfg.prior_strength
    r = Tensor(np.full((b, n_i, n_j), 1.0 / n_j, dtype=votes.dtype))
    a_j = mu = None
    for t, lam in enumerate(cfg.inv_temperature_schedule):
        # M-step: responsibility-weighted Gaussian fit per output slot.
        w = r * a_lower.reshape(b, n_i, 1)  # [B, N_i, N_j]
        s = w.sum(axis=1)  # [B, N_j]
        s_den = s + _TINY
        mu = (w.reshape(b, n_i, n_j, 1) * votes).sum(axis=1) / s_den.reshape(b, n_j, 1)
        diff = votes - mu.reshape(b, 1, n_j, POSE_DIM)
        wsq = (w.reshape(b, n_i, n_j, 1) * (diff * diff)).sum(axis=1)  # [B, N_j, 16]
        var = (wsq + kappa) / (s_den.reshape(b, n_j, 1) + kappa) + cfg.var_epsilon
        # Expected per-dimension negative log-likelihood, weighted by total
        # assigned activation, drives the slot activation.
        e_sq = wsq / s_den.reshape(b, n_j, 1)
        nll = ((var * (2.0 * math.pi)).log() + e_sq / var).mean(axis=2) * 0.5  # [B, N_j]
        logits = (beta_a - beta_u * (s * nll)) * lam
        a_j = sigmoid(logits)
        if t + 1 < cfg.iterations:
            # E-step: r[i,j] ~ a_j * N(votes | mu_j, var_j), normalized over j.
            log_pdf = (
                diff * diff / var.reshape(b, 1, n_j, POSE_DIM)
                + var.reshape(b, 1, n_j, POSE_DIM).log()
            ).sum(axis=3) * -0.5 - (0.5 * POSE_DIM * _LOG_2PI)
            r = softmax(log_sigmoid(logits).reshape(b, 1, n_j) + log_pdf, axis=2)

    out = CapsuleState(
        activations=a_j if not unbatched else a_j.reshape(n_j),
        poses=mu.reshape(b, n_j, 4, 4) if not unbatched else mu.reshape(n_j, 4, 4),
    )
    return out


class PrimaryCapsules(Module):
    """1x1 conv packs feature maps into capsules: 16 pose values plus one
    sigmoid activation logit per capsule type and position."""

    def __init__(self, in_channels, types, rng):
        if in_channels < 17 * types:
            raise ConfigError(
                f"primary capsules need >= {17 * types} input channels for {types} types, got {in_channels}"
            )
        self.types = types
        self.conv = Conv2d(in_channels, types * 17, rng, kernel=1, stride=1, padding=0)

    def __call__(self, features):
        y = self.conv(features)
        b, _, h, w = y.shape
        t = self.types
        y = y.reshape(b, t, 17, h, w)
        poses = y[:, :, :16].transpose(0, 3, 4, 1, 2).reshape(b, h * w * t, 4, 4)
        acts = sigmoid(y[:, :, 16].transpose(0, 2, 3, 1).reshape(b, h * w * t))
        return CapsuleState(acts, poses, spatial_layout=(h, w, t))


def _receptive_fields(h, w, types, kernel, stride, padding):
    """Per output position: (lower capsule indices, transform row indices).

    Transform rows are indexed by (kernel offset, type) so votes depend on
    where a lower capsule sits inside the receptive field.
    """
    oh = (h + 2 * padding - kernel) // stride + 1
    ow = (w + 2 * padding - kernel) // stride + 1
    if oh < 1 or ow < 1:
        raise ConfigError(f"capsule grid {h}x{w} collapses under kernel {kernel}/stride {stride}")
    fields = []
    t_range = np.arange(types)
    for oy in range(oh):
        for ox in range(ow):
            cap_idx, w_idx = [], []
            for di in range(kernel):
                for dj in range(kernel):
                    iy, ix = oy * stride - padding + di, ox * stride - padding + dj
                    if 0 <= iy < h and 0 <= ix < w:
                        cap_idx.append((iy * w + ix) * types + t_range)
                        w_idx.append((di * kernel + dj) * types + t_range)
            fields.append((np.concatenate(cap_idx), np.concatenate(w_idx)))
    return (oh, ow), fields


class ConvCapsules(Module):
    """Grid-to-grid capsule layer: each output position routes the capsules
    in its kernel window into `out_types` fresh capsules."""

    def __init__(self, in_types, out_types, rng, cfg, kernel=3, stride=2, padding=1):
        self.in_types = in_types
        self.out_types = out_types
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        self.cfg = cfg
        self.weights = TransformWeights(in_types * kernel * kernel, out_types, rng)
        dt = get_default_dtype()
        self.beta_a = Parameter(np.zeros((), dtype=dt))
        self.beta_u = Parameter(np.ones((), dtype=dt))
        self._field_cache = {}

    def __call__(self, state):
        if state.spatial_layout is None:
            raise ContractError("conv capsules need a spatial layout")
        h, w, t = state.spatial_layout
        if t != self.in_types:
            raise DimensionError(f"expected {self.in_types} lower types, got {t}")
        key = (h, w)
        if key not in self._field_cache:
            self._field_cache[key] = _receptive_fields(h, w, t, self.kernel, self.stride, self.padding)
        (oh, ow), fields = self._field_cache[key]

        b = state.batch
        acts_out, poses_out = [], []
        for cap_idx, w_idx in fields:
            g = len(cap_idx)
            poses_g = index_select(state.poses, 1, cap_idx)  # [B, G, 4, 4]
            a_g = index_select(state.activations, 1, cap_idx)  # [B, G]
            w_g = index_select(self.weights.W, 0, w_idx)  # [G, T_out, 4, 4]
            votes = poses_g.reshape(b, g, 1, 4, 4) @ w_g.reshape(1, g, self.out_types, 4, 4)
            routed = vb_routing(
                a_g, votes.reshape(b, g, self.out_types, POSE_DIM), self.cfg, self.beta_a, self.beta_u
            )
            acts_out.append(routed.activations)
            poses_out.append(routed.poses)
        return CapsuleState(
            concat(acts_out, axis=1),
            concat(poses_out, axis=1),
            spatial_layout=(oh, ow, self.out_types),
        )


class ClassCapsules(Module):
    """Final routing stage: every remaining capsule votes for each of the J
    class capsules; also owns the inverse-graphics matrices fed to the loss."""

    def __init__(self, in_types, n_classes, rng, cfg):
        self.n_classes = n_classes
        self.cfg = cfg
        self.weights = TransformWeights(in_types, n_classes, rng)
        self.inverse_graphics = InverseGraphicsMatrix(n_classes, rng)
        dt = get_default_dtype()
        self.beta_a = Parameter(np.zeros((), dtype=dt))
        self.beta_u = Parameter(np.ones((), dtype=dt))

    def __call__(self, state):
        votes = compute_votes(state, self.weights)
        b, n_i = state.activations.shape
        routed = vb_routing(
            state.activations,
            votes.reshape(b, n_i, self.n_classes, POSE_DIM),
            self.cfg,
            self.beta_a,
            self.beta_u,
        )
        return routed, self.inverse_graphics.Y


def extract_entities(feature_vector, n_entities):
    """Slice a flat feature vector into contiguous 16-d entities.

    Accepts [L] or [B, L]; round-trips exactly with concatenation.
    """
    fv = Tensor._coerce(feature_vector)
    length = fv.shape[-1]
    if n_entities < 1 or length % n_entities != 0:
        raise ContractError(f"feature length {length} not divisible by {n_entities} entities")
    if length // n_entities != POSE_DIM:
        raise ContractError(
            f"entities must be {POSE_DIM}-dimensional, got {length // n_entities}"
        )
    if fv.ndim == 1:
        return fv.reshape(n_entities, POSE_DIM)
    return fv.reshape(fv.shape[0], n_entities, POSE_DIM)
