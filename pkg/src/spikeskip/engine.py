"""Discrete-time leaky integrate-and-fire primitives.

Spike tensors are time-major: ``(T, batch, channels, H, W)`` for convolutional
layers or ``(T, batch, features)`` for dense ones.  A single time slice drops
the leading axis.  Channel (or feature) axis is always axis 1 of a slice.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import Tensor

RESET_MODES = ("subtract", "zero")
SURROGATE_KINDS = ("fast_sigmoid",)


@dataclass(frozen=True)
class LifParams:
    beta: float = 0.9
    threshold: float = 1.0
    reset_mode: str = "subtract"

    def __post_init__(self):
        if not (0.0 < self.beta <= 1.0):
            raise ValueError(f"beta must lie in (0, 1], got {self.beta}")
        if not self.threshold > 0.0:
            raise ValueError(f"threshold must be positive, got {self.threshold}")
        if self.reset_mode not in RESET_MODES:
            raise ValueError(f"reset_mode must be one of {RESET_MODES}, got {self.reset_mode!r}")


@dataclass(frozen=True)
class SurrogateSpec:
    kind: str = "fast_sigmoid"
    slope: float = 25.0

    def __post_init__(self):
        if self.kind not in SURROGATE_KINDS:
            raise ValueError(f"unknown surrogate kind {self.kind!r}")
        if not self.slope > 0.0:
            raise ValueError(f"surrogate slope must be positive, got {self.slope}")


def surrogate_derivative(u, spec: SurrogateSpec = SurrogateSpec()):
    """Fast-sigmoid pseudo-derivative ``1 / (slope*|u| + 1)**2``.

    ``u`` is the membrane potential minus the threshold.  Works on python
    floats, numpy arrays and torch tensors alike.
    """
    if isinstance(u, Tensor):
        return 1.0 / (spec.slope * u.abs() + 1.0) ** 2
    if isinstance(u, np.ndarray):
        return 1.0 / (spec.slope * np.abs(u) + 1.0) ** 2
    return 1.0 / (spec.slope * abs(u) + 1.0) ** 2


class FastSigmoidSpike(torch.autograd.Function):
    """Heaviside forward, fast-sigmoid surrogate backward."""

    @staticmethod
    def forward(ctx, u: Tensor, slope: float):
        ctx.save_for_backward(u)
        ctx.slope = slope
        return (u >= 0).to(u.dtype)

    @staticmethod
    def backward(ctx, grad_output: Tensor):
        (u,) = ctx.saved_tensors
        grad = grad_output / (ctx.slope * u.abs() + 1.0) ** 2
        return grad, None


def spike_fn(u: Tensor, spec: SurrogateSpec = SurrogateSpec(), smooth: bool = False) -> Tensor:
    """Spike nonlinearity applied to ``u = membrane - threshold``.

    With ``smooth=True`` the forward pass itself is the logistic sigmoid
    ``sigmoid(slope*u)`` so that the unrolled graph is differentiable end to
    end; this is the mode used to check BPTT against finite differences.
    """
    if smooth:
        return torch.sigmoid(spec.slope * u)
    return FastSigmoidSpike.apply(u, spec.slope)


def lif_step(
    membrane: Tensor,
    input_current: Tensor,
    params: LifParams = LifParams(),
    surrogate: SurrogateSpec = SurrogateSpec(),
    smooth: bool = False,
    check: bool = True,
) -> tuple[Tensor, Tensor]:
    """Advance one LIF time step.

    ``v' = beta*v + i``; a spike is emitted where ``v' >= threshold`` and the
    returned membrane has the reset applied.  Returns ``(membrane, spikes)``.
    """
    if check:
        if membrane.shape != input_current.shape:
            raise ValueError(
                f"membrane shape {tuple(membrane.shape)} does not match "
                f"input shape {tuple(input_current.shape)}"
            )
        if not bool(torch.isfinite(input_current).all()):
            raise ValueError("input current contains non-finite values")
    v = params.beta * membrane + input_current
    spikes = spike_fn(v - params.threshold, surrogate, smooth=smooth)
    if params.reset_mode == "subtract":
        v = v - spikes * params.threshold
    else:
        v = v * (1.0 - spikes)
    return v, spikes


def merge_asc(inputs: Sequence[Tensor]) -> Tensor:
    """Element-wise sum of same-shape slices (addition-type skip)."""
    if len(inputs) == 0:
        raise ValueError("merge_asc needs at least one input")
    shape = inputs[0].shape
    out = inputs[0]
    for x in inputs[1:]:
        if x.shape != shape:
            raise ValueError(f"merge_asc shape mismatch: {tuple(x.shape)} vs {tuple(shape)}")
        out = out + x
    return out


def merge_dsc(sequential: Tensor, skips: Sequence[Tensor], selections: Sequence[Sequence[int]]) -> Tensor:
    """Concatenate selected channels of skip sources after the sequential input.

    ``skips`` must already be ordered by ascending source vertex; ``selections``
    holds one channel index list per source.  An empty selection contributes
    nothing.
    """
    if len(skips) != len(selections):
        raise ValueError(f"{len(skips)} skip sources but {len(selections)} selections")
    parts = [sequential]
    for src, sel in zip(skips, selections):
        if src.shape[0] != sequential.shape[0] or src.shape[2:] != sequential.shape[2:]:
            raise ValueError(
                f"merge_dsc dimension mismatch: source {tuple(src.shape)} vs "
                f"sequential {tuple(sequential.shape)}"
            )
        idx = torch.as_tensor(sel, dtype=torch.long)
        if idx.numel() == 0:
            continue
        n = src.shape[1]
        if int(idx.min()) < 0 or int(idx.max()) >= n:
            bad = [int(c) for c in idx if not 0 <= c < n]
            raise IndexError(f"channel indices {bad} out of range for source with {n} channels")
        parts.append(src.index_select(1, idx))
    if len(parts) == 1:
        return sequential
    return torch.cat(parts, dim=1)


def spike_count(record) -> tuple[int, int]:
    """Return ``(number of ones, number of entries)`` of a spike record."""
    if isinstance(record, Tensor):
        return int(record.sum().item()), record.numel()
    arr = np.asarray(record)
    return int(arr.sum()), arr.size


def firing_rate(record) -> float:
    """Fraction of entries that are spikes."""
    spikes, total = spike_count(record)
    if total == 0:
        raise ValueError("firing rate of an empty record is undefined")
    return spikes / total


def pooled_rate(counts: Sequence[tuple[int, int]]) -> float:
    """Combine ``(spikes, entries)`` pairs into one rate.

    Equivalent to the size-weighted mean of the constituent rates, i.e. the
    rate of the concatenated record.
    """
    spikes = sum(c[0] for c in counts)
    total = sum(c[1] for c in counts)
    if total == 0:
        raise ValueError("firing rate of an empty record is undefined")
    return spikes / total


def poisson_encode(image, T: int, seed: int) -> Tensor:
    """Rate-code intensities in [0, 1] as ``T`` independent Bernoulli draws.

    Values outside [0, 1] are clamped.  Output is float32, shape ``(T, *image.shape)``.
    """
    if T < 1:
        raise ValueError(f"T must be at least 1, got {T}")
    p = torch.as_tensor(np.asarray(image, dtype=np.float32)).clamp(0.0, 1.0)
    gen = torch.Generator().manual_seed(int(seed))
    draws = torch.rand((T,) + tuple(p.shape), generator=gen)
    return (draws < p).to(torch.float32)

