"""Sigmoid attention: reference and tiled kernels, theory checks, toy transformer and CLI."""

from .attn import AttnConfig, GradTriple, attn_backward, attn_forward, multihead_attn
from .flash import BlockSpec, MemReport, flash_backward, flash_forward, kernel_bench

__version__ = "0.1.0"

__all__ = [
    "AttnConfig", "BlockSpec", "GradTriple", "MemReport", "attn_backward", "attn_forward", "flash_backward",
    "flash_forward", "kernel_bench", "multihead_attn",
]
