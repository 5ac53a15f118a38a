"""Memory requirements of mixed-precision Adam training for transformer-shaped models.

All sizing formulas here are closed-form in the model shape. Byte quantities
are exact integers (fractional batch sizes are handled with rational
arithmetic and rounded up), so the results are safe to compare exactly and
never lose precision at the multi-trillion-parameter scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

# Per-parameter byte layout of mixed-precision Adam model states.
# fp16 working copy + fp16 gradient + fp32 momentum/variance/master/gradient.
STATE_BYTES_PER_PARAM = {
    "fp16_param": 2,
    "fp16_grad": 2,
    "fp32_momentum": 4,
    "fp32_variance": 4,
    "fp32_master_param": 4,
    "fp32_grad": 4,
}
MODEL_STATE_BYTES_PER_PARAM = sum(STATE_BYTES_PER_PARAM.values())  # 20

HALF_BYTES = 2  # activations are stored in half precision

_DECIMAL_UNITS = [("TB", 10**12), ("GB", 10**9), ("MB", 10**6), ("KB", 10**3)]
_BINARY_UNITS = [("TiB", 2**40), ("GiB", 2**30), ("MiB", 2**20), ("KiB", 2**10)]


@dataclass(frozen=True)
class ModelConfig:
    """Transformer shape and batch parameters.

    nl: layer (transformer block) count
    hd: hidden dimension
    attn_heads: attention head count
    seq: sequence length in tokens
    bsz: per-device batch size, possibly fractional
    ci: transformer blocks per activation checkpoint
    """

    nl: int
    hd: int
    attn_heads: int = 32
    seq: int = 1024
    bsz: float = 1
    ci: int = 1

    def __post_init__(self):
        if self.nl < 1 or self.hd < 1 or self.seq < 1 or self.attn_heads < 1:
            raise ValueError("nl, hd, seq, attn_heads must all be >= 1")
        if self.ci < 1:
            raise ValueError("ci must be >= 1")
        if self.ci > self.nl:
            raise ValueError(f"ci ({self.ci}) must not exceed nl ({self.nl})")
        if not self.bsz > 0:
            raise ValueError("bsz must be positive")


@dataclass(frozen=True)
class MemoryReport:
    params: int
    model_state_bytes: int
    act_ckpt_bytes: int
    full_activation_bytes: int
    mswm_bytes: int
    awm_bytes: int


def _frac(x) -> Fraction:
    # Fraction(float) is exact for the binary value actually stored, which is
    # what we want for configs like bsz=1.25.
    return Fraction(x) if not isinstance(x, Fraction) else x


def _ceil_bytes(x: Fraction) -> int:
    return int(math.ceil(x))


def param_count(cfg: ModelConfig) -> int:
    """Total parameters: the four linear layers of each block give 12*nl*hd^2."""
    return 12 * cfg.nl * cfg.hd * cfg.hd


def model_state_bytes(cfg: ModelConfig) -> int:
    """Bytes for parameters, gradients, and Adam states: 20 bytes/param."""
    return MODEL_STATE_BYTES_PER_PARAM * param_count(cfg)


def activation_checkpoint_bytes(cfg: ModelConfig) -> int:
    """Bytes to hold one checkpoint every ci blocks: 2*bsz*seq*hd*nl/ci."""
    exact = Fraction(2 * cfg.seq * cfg.hd * cfg.nl, cfg.ci) * _frac(cfg.bsz)
    return _ceil_bytes(exact)


def per_block_activation_elems(cfg: ModelConfig) -> Fraction:
    """Half-precision activation element count of a single transformer block."""
    return _frac(cfg.bsz) * cfg.seq * (16 * cfg.hd + 2 * cfg.attn_heads * cfg.seq)


def full_activation_bytes(cfg: ModelConfig) -> int:
    """Activation bytes with no checkpointing: every block's activations held."""
    return _ceil_bytes(HALF_BYTES * cfg.nl * per_block_activation_elems(cfg))


def mswm_bytes(cfg: ModelConfig) -> int:
    """Model state working memory: fp16 param+grad of the largest (hd -> 4hd) linear."""
    return 16 * cfg.hd * cfg.hd


def awm_elems(cfg: ModelConfig) -> int:
    """Activation working memory in elements: activations live between two checkpoints."""
    return _ceil_bytes(cfg.ci * per_block_activation_elems(cfg))


def awm_bytes(cfg: ModelConfig) -> int:
    """Activation working memory in bytes (half precision, 2 bytes/element)."""
    return _ceil_bytes(HALF_BYTES * cfg.ci * per_block_activation_elems(cfg))


def memory_report(cfg: ModelConfig) -> MemoryReport:
    return MemoryReport(
        params=param_count(cfg),
        model_state_bytes=model_state_bytes(cfg),
        act_ckpt_bytes=activation_checkpoint_bytes(cfg),
        full_activation_bytes=full_activation_bytes(cfg),
        mswm_bytes=mswm_bytes(cfg),
        awm_bytes=awm_bytes(cfg),
    )


def format_bytes(n: int, binary: bool = False) -> str:
    """Human-readable byte count. Decimal units by default, binary behind the flag."""
    units = _BINARY_UNITS if binary else _DECIMAL_UNITS
    for suffix, scale in units:
        if n >= scale:
            return f"{n / scale:.2f} {suffix}"
    return f"{n} B"
