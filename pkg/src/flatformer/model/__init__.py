from .bias import BiasMasks, build_masks, causal_mask, forgetting_bias, key_padding_bias, multi_rate_ladder
from .config import VARIANTS, ModelConfig
from .network import (
    FlatFormer,
    ForwardOutput,
    build_variant,
    init_parameters,
    parameter_shapes,
    sinusoidal_pe,
    truncated_normal,
)
