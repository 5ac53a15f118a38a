"""Arithmetic-intensity and bandwidth-vs-efficiency model.

Training efficiency without compute/communication overlap is
``ait * bw / (ait * bw + peak_tp)``: the fraction of time spent computing
when data movement at bandwidth ``bw`` is fully serialized against compute
running at ``peak_tp``. Arithmetic intensity (flops moved per byte) is
derived per state category from the per-iteration compute cost.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

from .memory import ModelConfig, param_count

# Achievable (not theoretical) per-device peak, flops/s. Empirically around
# 70 TFlops on V100-class parts; override per cluster profile.
DEFAULT_PEAK_TP = 70e12


class AitKind(enum.Enum):
    PARAM_GRAD = "param_grad"
    OPTIMIZER_STATES = "optimizer_states"
    ACTIVATION_CKPT = "activation_ckpt"


@dataclass(frozen=True)
class EfficiencyPoint:
    bandwidth: float  # bytes/s
    ait: float  # flops/byte
    peak_tp: float  # flops/s
    efficiency: float  # in [0, 1]


def compute_per_iter(cfg: ModelConfig):
    """Total flops per training iteration.

    Forward is 2*bsz*seq*params; backward costs twice the forward, and
    checkpoint recomputation adds one more forward: 8*bsz*seq*params total,
    i.e. 96*bsz*seq*nl*hd^2.
    """
    return 8 * cfg.bsz * cfg.seq * param_count(cfg)


def ait(kind: AitKind, cfg: ModelConfig) -> float:
    """Arithmetic intensity (flops/byte) of one state category for a full iteration.

    Parameters+gradients move 4x params elements (2 bytes each); optimizer
    states move 2x their 16 bytes/param; checkpoints move twice their stored
    size. Dividing the iteration compute by each movement volume gives:

      param_grad        -> seq * bsz
      optimizer_states  -> seq * bsz / 4
      activation_ckpt   -> 24 * hd * ci
    """
    if kind is AitKind.PARAM_GRAD:
        return float(cfg.seq * cfg.bsz)
    if kind is AitKind.OPTIMIZER_STATES:
        return float(cfg.seq * cfg.bsz) / 4.0
    if kind is AitKind.ACTIVATION_CKPT:
        return float(24 * cfg.hd * cfg.ci)
    raise ValueError(f"unknown AIT kind: {kind!r}")


def efficiency(ait_value: float, bw: float, peak_tp: float = DEFAULT_PEAK_TP) -> float:
    """Fraction of peak sustained when movement at ``bw`` serializes with compute."""
    if not ait_value > 0:
        raise ValueError(f"ait must be positive, got {ait_value}")
    if not peak_tp > 0:
        raise ValueError(f"peak_tp must be positive, got {peak_tp}")
    if bw < 0:
        raise ValueError(f"bandwidth must be nonnegative, got {bw}")
    if math.isinf(bw):
        return 1.0
    moved = ait_value * bw
    return moved / (moved + peak_tp)


def required_bandwidth(ait_value: float, peak_tp: float, target_eff: float) -> float:
    """Bandwidth (bytes/s) needed to sustain ``target_eff``: inverse of efficiency()."""
    if not ait_value > 0:
        raise ValueError(f"ait must be positive, got {ait_value}")
    if not peak_tp > 0:
        raise ValueError(f"peak_tp must be positive, got {peak_tp}")
    if not 0.0 < target_eff < 1.0:
        raise ValueError(f"target efficiency must lie in (0, 1), got {target_eff}")
    return (target_eff / (1.0 - target_eff)) * peak_tp / ait_value


def efficiency_sweep(
    kind: AitKind,
    cfgs: Sequence[ModelConfig] | Iterable[ModelConfig],
    peak_tp: float,
    bws: Sequence[float],
) -> list[EfficiencyPoint]:
    """One EfficiencyPoint per (cfg, bw) pair, bandwidth-major within each cfg."""
    cfgs = list(cfgs)
    if not cfgs or not bws:
        raise ValueError("cfg grid and bandwidth grid must be nonempty")
    points = []
    for cfg in cfgs:
        a = ait(kind, cfg)
        for bw in bws:
            points.append(
                EfficiencyPoint(
                    bandwidth=bw, ait=a, peak_tp=peak_tp,
                    efficiency=efficiency(a, bw, peak_tp),
                )
            )
    return points


def log_spaced(lo: float, hi: float, points: int) -> list[float]:
    """Log-spaced grid from lo to hi inclusive."""
    if not (0 < lo < hi):
        raise ValueError("need 0 < lo < hi")
    if points < 2:
        raise ValueError("need at least 2 points")
    ratio = hi / lo
    return [lo * ratio ** (i / (points - 1)) for i in range(points)]
