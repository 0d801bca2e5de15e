"""Closed-form parameter and FLOP accounting."""

from __future__ import annotations

from ..model.config import ModelConfig

COMPONENTS = (
    "exercise_embedding",
    "answer_embedding",
    "session_embedding",
    "step_encoding",
    "positional_embedding",
    "temporal_channel",
    "attention",
    "ffn",
    "layer_norms",
    "prediction_head",
    "forgetting",
)


def expected_param_count(cfg: ModelConfig) -> dict[str, int]:
    """Parameter count per component from the config alone."""
    d, n, f, hw = cfg.d, cfg.n_layers, cfg.ffn_width, cfg.head_width
    out = {
        "exercise_embedding": (cfg.n_exercises + 1) * d,
        "answer_embedding": 3 * d,
        "session_embedding": cfg.n_session_embeddings * d if cfg.uses_sessions else 0,
        "step_encoding": 0,  # sinusoidal, closed form
        "positional_embedding": 0 if cfg.uses_sessions else cfg.max_len * d,
        "temporal_channel": d if cfg.variant == "backbone" else 0,
        "attention": n * 4 * d * d,
        "ffn": n * (2 * d * f + f + d),
        "layer_norms": n * 4 * d + 2 * d,
        "prediction_head": d * hw + hw + hw + 1,
        "forgetting": cfg.n_heads if cfg.learnable_rates else 0,
    }
    out["total"] = sum(out[k] for k in COMPONENTS)
    return out


def _component(name: str) -> str:
    if name == "E_Q":
        return "exercise_embedding"
    if name == "E_A":
        return "answer_embedding"
    if name == "E_S":
        return "session_embedding"
    if name == "E_pos":
        return "positional_embedding"
    if name == "w_time":
        return "temporal_channel"
    if name == "beta_h":
        return "forgetting"
    if name.startswith("head."):
        return "prediction_head"
    if ".ln" in name or name.startswith("ln_"):
        return "layer_norms"
    if ".ffn." in name:
        return "ffn"
    if ".W_" in name:
        return "attention"
    raise KeyError(name)


def count_params(model) -> dict[str, int]:
    """Parameter count per component, measured on the instantiated tensors."""
    out = {k: 0 for k in COMPONENTS}
    for name, p in model.parameters().items():
        out[_component(name)] += int(p.data.size)
    out["total"] = sum(out[k] for k in COMPONENTS)
    return out


def flops_estimate(cfg: ModelConfig, length: int, batch: int = 1) -> dict[str, float]:
    """Approximate floating-point operations for one forward pass.

    Multiply-adds count as 2.  ``bias_injection`` is the forgetting-bias
    cost: one addition per (head, query, key) in every layer plus building
    the ``L x L`` matrix once (divide, log1p, scale).
    """
    L, d, h, n, f, hw = length, cfg.d, cfg.n_heads, cfg.n_layers, cfg.ffn_width, cfg.head_width
    B = batch
    per_layer = {
        "projections": 4 * 2 * B * L * d * d,
        "attention_scores": 2 * B * h * L * L * cfg.d_k,
        "attention_values": 2 * B * h * L * L * cfg.d_k,
        "softmax": 5 * B * h * L * L,
        "ffn": 2 * 2 * B * L * d * f + B * L * (f + d),
        "norms_residuals": 2 * 8 * B * L * d + 2 * B * L * d,
    }
    out = {k: float(v * n) for k, v in per_layer.items()}
    out["embedding"] = float(4 * B * L * d)
    out["prediction_head"] = float(2 * B * L * d * hw + 2 * B * L * hw + B * L * (8 * d))
    out["bias_injection"] = float(n * B * h * L * L + 3 * B * L * L) if cfg.uses_forgetting else 0.0
    out["total"] = float(sum(out.values()))
    out["injection_share"] = out["bias_injection"] / out["total"] if out["total"] else 0.0
    return out
