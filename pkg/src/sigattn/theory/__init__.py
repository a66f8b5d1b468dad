"""Computable pieces of the sigmoid attention theory."""

from .bias import bias_bracket, order_optimal_bias, solve_bias
from .lipschitz import (
    LipschitzReport,
    attn_jacobian_adjoint,
    attn_jacobian_apply,
    dense_jacobian,
    empirical_jacobian_norm,
    lipschitz_bound,
    sigmoid_attn_map,
)
from .metrics import FlopCount, flop_count, hoyer_sparsity, row_hoyer
from .uap import (
    ContextualReport,
    GridSeq,
    c_threshold,
    contextual_mapping_check,
    heaviside,
    ltilde_closed_form,
    selective_shift,
    selective_shift_stack,
)

__all__ = [
    "ContextualReport", "FlopCount", "GridSeq", "LipschitzReport", "attn_jacobian_adjoint",
    "attn_jacobian_apply", "bias_bracket", "c_threshold", "contextual_mapping_check",
    "dense_jacobian", "empirical_jacobian_norm", "flop_count", "heaviside", "hoyer_sparsity",
    "lipschitz_bound", "ltilde_closed_form", "order_optimal_bias", "row_hoyer", "selective_shift",
    "selective_shift_stack", "sigmoid_attn_map", "solve_bias",
]
