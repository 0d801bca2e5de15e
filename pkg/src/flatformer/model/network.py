"""The FlatFormer network and its ablation variants.

Input at step t is ``E_Q(q_t) + E_A(a_{t-1}) + E_S(s_t mod L_S) + PE(tau_t)``;
N encoder blocks apply causal multi-head self-attention whose logits carry
the pre-computed forgetting bias, and a two-layer head maps each position
to ``p_t = P(a_t = 1)``.

Variant map:

==============  =============================  ===================
variant         position signal                forgetting bias
==============  =============================  ===================
full            E_S(s) + PE(tau)               -beta ln(lag'+1)
no_session      learned absolute E_pos(t)      -beta ln(lag'+1)
no_forgetting   E_S(s) + PE(tau)               none (beta = 0)
backbone        E_pos(t) + w_time ln(lag'+1)   none (beta = 0)
==============  =============================  ===================

The backbone's temporal channel uses the lag to the previous step only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from ..errors import ConfigError, DataError
from ..features.sequences import Batch
from ..numerics import tensor as T
from ..numerics.tensor import Tensor
from .bias import BiasMasks, build_masks, multi_rate_ladder
from .config import ModelConfig

LN_EPS = 1e-5


def sinusoidal_pe(steps, d: int) -> np.ndarray:
    """Fixed sinusoidal encoding of (possibly very large) step indices.

    Returns an array of shape ``steps.shape + (d,)`` with
    ``PE[2k] = sin(tau / 10000**(2k/d))`` and ``PE[2k+1] = cos(...)``.
    """
    tau = np.asarray(steps, dtype=np.float64)
    if np.any(tau < 0):
        raise DataError("step index must be non-negative")
    k = np.arange((d + 1) // 2)
    inv_freq = 1.0 / 10000.0 ** (2.0 * k / d)
    angles = tau[..., None] * inv_freq
    pe = np.empty(tau.shape + (d,))
    pe[..., 0::2] = np.sin(angles)
    pe[..., 1::2] = np.cos(angles[..., : d // 2])
    return pe


def truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal(0, std) draws re-sampled until they fall within two std."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape of every learnable tensor, in initialisation order."""
    d, f, hw = cfg.d, cfg.ffn_width, cfg.head_width
    shapes: dict[str, tuple[int, ...]] = {
        "E_Q": (cfg.n_exercises + 1, d),
        "E_A": (3, d),
    }
    if cfg.uses_sessions:
        shapes["E_S"] = (cfg.n_session_embeddings, d)
    else:
        shapes["E_pos"] = (cfg.max_len, d)
    if cfg.variant == "backbone":
        shapes["w_time"] = (d,)
    for l in range(cfg.n_layers):
        p = f"layers.{l}."
        shapes.update({
            p + "ln1.gain": (d,), p + "ln1.bias": (d,),
            p + "W_Q": (d, d), p + "W_K": (d, d), p + "W_V": (d, d), p + "W_O": (d, d),
            p + "ffn.W1": (d, f), p + "ffn.b1": (f,), p + "ffn.W2": (f, d), p + "ffn.b2": (d,),
            p + "ln2.gain": (d,), p + "ln2.bias": (d,),
        })
    shapes.update({
        "ln_final.gain": (d,), "ln_final.bias": (d,),
        "head.W1": (d, hw), "head.b1": (hw,), "head.W2": (hw, 1), "head.b2": (1,),
    })
    if cfg.learnable_rates:
        shapes["beta_h"] = (cfg.n_heads,)
    return shapes


def init_parameters(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    dtype = np.dtype(cfg.dtype)
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name == "beta_h":
            value = multi_rate_ladder(cfg.n_heads)
        elif leaf == "gain":
            value = np.ones(shape)
        elif leaf.startswith("b") or name == "w_time":
            value = np.zeros(shape)
        else:
            value = truncated_normal(rng, shape, cfg.init_std)
        params[name] = Tensor(value.astype(dtype), requires_grad=True, name=name)
    return params


@dataclass
class ForwardOutput:
    probs: Tensor
    logits: Tensor
    attention: list[np.ndarray] = field(default_factory=list)


class FlatFormer:
    """Session-aware, forgetting-biased flat Transformer for knowledge tracing.

    Parameters
    ----------
    config : ModelConfig
    seed : int
        Seeds weight initialisation.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        self.params = init_parameters(config, np.random.default_rng(seed))
        self._dtype = np.dtype(config.dtype)

    # -- parameter handling -----------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        expected = set(self.params)
        if set(state) != expected:
            raise ConfigError(
                f"state dict mismatch: missing={sorted(expected - set(state))}, "
                f"unexpected={sorted(set(state) - expected)}"
            )
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ConfigError(f"shape mismatch for {k}: {v.shape} vs {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=self._dtype, copy=True)

    def n_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    # -- pre-computation ------------------------------------------------------

    def prepare(self, batch: Batch) -> BiasMasks:
        """Build all logit biases for ``batch`` (outside the encoder loop)."""
        cfg = self.config
        static_beta = 0.0 if cfg.learnable_rates else cfg.effective_beta
        return build_masks(batch.log_lag, batch.valid, static_beta, dtype=self._dtype)

    # -- forward pieces --------------------------------------------------------

    def embed(self, batch: Batch, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        cfg, P = self.config, self.params
        if batch.exercise.size and batch.exercise.max() > cfg.n_exercises:
            raise DataError(f"exercise index {batch.exercise.max()} exceeds vocabulary size {cfg.n_exercises}")
        x = T.add(T.embedding_lookup(P["E_Q"], batch.exercise), T.embedding_lookup(P["E_A"], batch.prev_response))
        if cfg.uses_sessions:
            x = T.add(x, T.embedding_lookup(P["E_S"], batch.session_ids % cfg.n_session_embeddings))
            x = T.add(x, Tensor(sinusoidal_pe(batch.session_steps, cfg.d).astype(self._dtype)))
        else:
            if batch.length > cfg.max_len:
                raise DataError(f"sequence length {batch.length} exceeds max_len {cfg.max_len}")
            x = T.add(x, T.embedding_lookup(P["E_pos"], batch.positions))
        if cfg.variant == "backbone":
            lag = Tensor(batch.prev_log_lag[..., None].astype(self._dtype))
            x = T.add(x, T.mul(lag, P["w_time"]))
        return T.dropout(x, cfg.dropout, rng, training)

    def attention_bias(self, masks: BiasMasks) -> Tensor:
        static = Tensor(masks.static)
        if not self.config.learnable_rates:
            return static
        rates = T.reshape(self.params["beta_h"], (1, self.config.n_heads, 1, 1))
        return T.sub(static, T.mul(Tensor(masks.log_lag), rates))

    def attention(self, x: Tensor, bias: Tensor, layer: int, keep: list | None = None) -> Tensor:
        """Multi-head attention with the additive bias; returns ``concat(heads) @ W_O``."""
        cfg, P = self.config, self.params
        p = f"layers.{layer}."
        B, L, d = x.shape
        h, dk = cfg.n_heads, cfg.d_k

        def heads(w):
            return T.transpose(T.reshape(T.matmul(x, P[p + w]), (B, L, h, dk)), (0, 2, 1, 3))

        q, k, v = heads("W_Q"), heads("W_K"), heads("W_V")
        scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dk))
        weights = T.softmax_lastdim(T.add(scores, bias))
        if keep is not None:
            keep.append(weights.data)
        ctx = T.reshape(T.transpose(T.matmul(weights, v), (0, 2, 1, 3)), (B, L, d))
        return T.matmul(ctx, P[p + "W_O"])

    def encoder_block(self, x: Tensor, bias: Tensor, layer: int, training: bool = False,
                      rng: np.random.Generator | None = None, keep: list | None = None) -> Tensor:
        cfg, P = self.config, self.params
        p = f"layers.{layer}."

        def ln(t, which):
            return T.layernorm(t, P[p + which + ".gain"], P[p + which + ".bias"], LN_EPS)

        if cfg.norm_scheme == "alg":
            attn = self.attention(ln(x, "ln1"), bias, layer, keep)
            hid = T.add(x, T.dropout(attn, cfg.dropout, rng, training))
        else:
            attn = self.attention(x, bias, layer, keep)
            hid = ln(T.add(x, T.dropout(attn, cfg.dropout, rng, training)), "ln1")
        ff = T.relu(T.linear(hid, P[p + "ffn.W1"], P[p + "ffn.b1"]))
        ff = T.linear(ff, P[p + "ffn.W2"], P[p + "ffn.b2"])
        return ln(T.add(hid, T.dropout(ff, cfg.dropout, rng, training)), "ln2")

    def head(self, x: Tensor) -> Tensor:
        P = self.params
        x = T.layernorm(x, P["ln_final.gain"], P["ln_final.bias"], LN_EPS)
        hidden = T.relu(T.linear(x, P["head.W1"], P["head.b1"]))
        logits = T.linear(hidden, P["head.W2"], P["head.b2"])
        return T.reshape(logits, logits.shape[:-1])

    def forward(self, batch: Batch, training: bool = False, rng: np.random.Generator | None = None,
                masks: BiasMasks | None = None, return_attention: bool = False) -> ForwardOutput:
        if masks is None:
            masks = self.prepare(batch)
        keep = [] if return_attention else None
        bias = self.attention_bias(masks)
        x = self.embed(batch, training, rng)
        for layer in range(self.config.n_layers):
            x = self.encoder_block(x, bias, layer, training, rng, keep)
        logits = self.head(x)
        return ForwardOutput(T.sigmoid(logits), logits, keep or [])

    __call__ = forward

    def loss(self, batch: Batch, training: bool = False, rng: np.random.Generator | None = None,
             masks: BiasMasks | None = None, reduction: str = "mean") -> Tensor:
        """BCE between ``p_t`` and ``a_t`` over scored, non-padded steps."""
        out = self.forward(batch, training, rng, masks)
        return T.bce_loss(out.probs, batch.target, batch.score & batch.valid, reduction=reduction)

    def predict(self, batch: Batch, masks: BiasMasks | None = None) -> np.ndarray:
        with T.no_grad():
            return self.forward(batch, training=False, masks=masks).probs.data


def build_variant(config: ModelConfig | Mapping, seed: int = 0) -> FlatFormer:
    """Instantiate the model for ``config.variant`` (dicts are accepted)."""
    if not isinstance(config, ModelConfig):
        config = ModelConfig.from_dict(dict(config))
    return FlatFormer(config, seed=seed)
