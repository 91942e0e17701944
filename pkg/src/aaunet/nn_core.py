"""Differentiable tensor primitives and a finite-difference gradient checker.

Feature maps are plain ``torch.Tensor`` in NCHW layout; parameters are
``torch.nn.Parameter`` whose unique names come from the module registry
(``named_parameters``).  The functions below are thin, validated wrappers
around the torch kernels so every block in the network goes through one
audited code path with consistent error reporting.

All parameter-holding layers take an explicit numpy ``Generator`` for
initialization, so a model is a pure function of its seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DimensionError, GradCheckError

GN_EPS = 1e-5


def _check_rank(x: torch.Tensor, rank: int, name: str) -> None:
    if x.dim() != rank:
        raise DimensionError(f"{name}: expected rank {rank}, got rank {x.dim()} (shape {tuple(x.shape)})")


def default_groups(channels: int, cap: int = 8) -> int:
    """Largest divisor of ``channels`` that does not exceed ``cap``."""
    for g in range(min(cap, channels), 0, -1):
        if channels % g == 0:
            return g
    return 1


def conv2d(x, weight, bias=None, stride=1, padding=0, groups=1):
    """2-D cross-correlation; output dims floor((H + 2p - k)/s) + 1."""
    _check_rank(x, 4, "conv2d input")
    _check_rank(weight, 4, "conv2d weight")
    if stride < 1:
        raise ConfigError(f"conv2d: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ConfigError(f"conv2d: padding must be >= 0, got {padding}")
    if x.shape[1] != weight.shape[1] * groups:
        raise DimensionError(
            f"conv2d: channel axis mismatch, input has {x.shape[1]} channels "
            f"but weight expects {weight.shape[1] * groups}"
        )
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(
            f"conv2d: bias axis mismatch, expected ({weight.shape[0]},), got {tuple(bias.shape)}"
        )
    return F.conv2d(x, weight, bias, stride=stride, padding=padding, groups=groups)


def group_norm(x, groups, gamma, beta, eps=GN_EPS):
    """Normalize each (sample, channel-group) slice to zero mean / unit variance, then affine."""
    _check_rank(x, 4, "group_norm input")
    c = x.shape[1]
    if groups < 1 or c % groups != 0:
        raise ConfigError(f"group_norm: {c} channels not divisible by {groups} groups")
    if eps <= 0:
        raise ConfigError(f"group_norm: eps must be > 0, got {eps}")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(
            f"group_norm: affine params must have shape ({c},), got {tuple(gamma.shape)} / {tuple(beta.shape)}"
        )
    return F.group_norm(x, groups, gamma, beta, eps)


def instance_norm(x, gamma, beta, eps=GN_EPS):
    """group_norm with one group per channel."""
    _check_rank(x, 4, "instance_norm input")
    return group_norm(x, x.shape[1], gamma, beta, eps)


def relu(x):
    return F.relu(x)


def sigmoid(x):
    return torch.sigmoid(x)


def softmax(x, axis):
    if not -x.dim() <= axis < x.dim():
        raise DimensionError(f"softmax: axis {axis} out of range for rank {x.dim()}")
    return F.softmax(x, dim=axis)


def global_avg_pool(x):
    """Mean over the spatial extent of each channel, kept as N x C x 1 x 1."""
    _check_rank(x, 4, "global_avg_pool input")
    return x.mean(dim=(2, 3), keepdim=True)


def upsample_bilinear(x, factor):
    """Bilinear upsampling by an integer factor (align_corners=False)."""
    _check_rank(x, 4, "upsample_bilinear input")
    if factor < 2:
        raise ConfigError(f"upsample_bilinear: factor must be >= 2, got {factor}")
    return F.interpolate(x, scale_factor=factor, mode="bilinear", align_corners=False)


def resize_bilinear(x, size):
    """Bilinear resampling to an explicit (H, W), up or down."""
    _check_rank(x, 4, "resize_bilinear input")
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=tuple(size), mode="bilinear", align_corners=False)


def fully_connected(x, weight, bias=None):
    """Affine map rows -> rows: y = x W^T + b."""
    _check_rank(x, 2, "fully_connected input")
    _check_rank(weight, 2, "fully_connected weight")
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(
            f"fully_connected: input axis 1 has {x.shape[1]} features, weight expects {weight.shape[1]}"
        )
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(
            f"fully_connected: bias must have shape ({weight.shape[0]},), got {tuple(bias.shape)}"
        )
    return F.linear(x, weight, bias)


def max_pool2d(x, kernel_size, stride, padding=0):
    _check_rank(x, 4, "max_pool2d input")
    return F.max_pool2d(x, kernel_size, stride=stride, padding=padding)


# ---------------------------------------------------------------------------
# Parameter-holding layers.  Weights come from the caller's rng (Kaiming
# fan-in normal), biases start at zero, so model construction is a pure
# function of the seed.
# ---------------------------------------------------------------------------


def _kaiming(rng: np.random.Generator, shape, fan_in: int) -> torch.Tensor:
    std = float(np.sqrt(2.0 / fan_in))
    return torch.from_numpy(rng.normal(0.0, std, size=shape).astype(np.float32))


class Conv2d(nn.Module):
    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0,
                 groups=1, bias=True, *, rng: np.random.Generator):
        super().__init__()
        if in_channels % groups != 0 or out_channels % groups != 0:
            raise ConfigError(
                f"Conv2d: channels ({in_channels} -> {out_channels}) not divisible by groups={groups}"
            )
        self.stride = stride
        self.padding = padding
        self.groups = groups
        fan_in = (in_channels // groups) * kernel_size * kernel_size
        self.weight = nn.Parameter(
            _kaiming(rng, (out_channels, in_channels // groups, kernel_size, kernel_size), fan_in)
        )
        self.bias = nn.Parameter(torch.zeros(out_channels)) if bias else None

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class Linear(nn.Module):
    def __init__(self, in_features, out_features, bias=True, *, rng: np.random.Generator):
        super().__init__()
        self.weight = nn.Parameter(_kaiming(rng, (out_features, in_features), in_features))
        self.bias = nn.Parameter(torch.zeros(out_features)) if bias else None

    def forward(self, x):
        return fully_connected(x, self.weight, self.bias)


class GroupNorm2d(nn.Module):
    def __init__(self, channels, groups=None, eps=GN_EPS):
        super().__init__()
        self.groups = default_groups(channels) if groups is None else groups
        if channels % self.groups != 0:
            raise ConfigError(f"GroupNorm2d: {channels} channels not divisible by {self.groups} groups")
        self.eps = eps
        self.gamma = nn.Parameter(torch.ones(channels))
        self.beta = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        return group_norm(x, self.groups, self.gamma, self.beta, self.eps)


class InstanceNorm2d(nn.Module):
    def __init__(self, channels, eps=GN_EPS):
        super().__init__()
        self.eps = eps
        self.gamma = nn.Parameter(torch.ones(channels))
        self.beta = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        return instance_norm(x, self.gamma, self.beta, self.eps)


# ---------------------------------------------------------------------------
# Finite-difference gradient checking.
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    rel_tol: float
    passed: bool
    probes: int
    per_input: list = field(default_factory=list)

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"grad_check {status}: max rel error {self.max_rel_error:.3e} "
                f"(tol {self.rel_tol:.1e}, {self.probes} probed coordinates)")


def grad_check(fn, inputs, rel_tol=1e-4, step=1e-4, max_probes=400, seed=0):
    """Compare autograd gradients of ``fn`` against central finite differences.

    ``fn`` is called as ``fn(*inputs)`` and may return a tensor or a tuple of
    tensors; the output is reduced to a scalar with a fixed random projection.
    Gradients are checked for every input tensor with ``requires_grad`` set.
    Inputs must be double precision; finite differences at step 1e-4 are not
    trustworthy in float32.  When the total number of gradient coordinates
    exceeds ``max_probes``, a deterministic random subset is probed.

    Perturbations are applied in place through ``.data``, so closures that
    reference the same tensor objects (e.g. module parameters) are supported.
    """
    wrt = [t for t in inputs if t.requires_grad]
    if not wrt:
        raise GradCheckError("grad_check: no input has requires_grad set")
    for t in wrt:
        if t.dtype != torch.float64:
            raise GradCheckError(f"grad_check: inputs must be float64, got {t.dtype}")

    rng = np.random.default_rng(seed)

    def scalar_loss():
        out = fn(*inputs)
        outs = out if isinstance(out, tuple) else (out,)
        total = None
        for k, o in enumerate(outs):
            proj_rng = np.random.default_rng(seed + 1 + k)
            u = torch.from_numpy(proj_rng.standard_normal(tuple(o.shape)))
            term = (o * u).sum()
            total = term if total is None else total + term
        return total

    loss = scalar_loss()
    if not torch.isfinite(loss):
        raise GradCheckError("grad_check: non-finite output")
    analytic = torch.autograd.grad(loss, wrt, allow_unused=False)
    for t, g in zip(wrt, analytic):
        if not torch.isfinite(g).all():
            raise GradCheckError(f"grad_check: non-finite analytic gradient for input of shape {tuple(t.shape)}")

    sizes = [t.numel() for t in wrt]
    total = sum(sizes)
    if total <= max_probes:
        flat_coords = np.arange(total)
    else:
        flat_coords = np.sort(rng.choice(total, size=max_probes, replace=False))
    offsets = np.cumsum([0] + sizes)

    max_rel = 0.0
    per_input = [0.0] * len(wrt)
    with torch.no_grad():
        for fc in flat_coords:
            i = int(np.searchsorted(offsets, fc, side="right") - 1)
            j = int(fc - offsets[i])
            flat = wrt[i].data.view(-1)
            orig = flat[j].item()
            flat[j] = orig + step
            plus = scalar_loss().item()
            flat[j] = orig - step
            minus = scalar_loss().item()
            flat[j] = orig
            numeric = (plus - minus) / (2.0 * step)
            a = analytic[i].view(-1)[j].item()
            rel = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            per_input[i] = max(per_input[i], rel)
            max_rel = max(max_rel, rel)

    return GradCheckReport(
        max_rel_error=max_rel,
        rel_tol=rel_tol,
        passed=max_rel < rel_tol,
        probes=len(flat_coords),
        per_input=[(tuple(t.shape), e) for t, e in zip(wrt, per_input)],
    )
