"""Shared test utilities: straight-line numpy oracles and parameter builders.

The oracles re-derive every quantity directly from the declared formulas with
plain numpy, independent of the graph machinery they are checked against.
"""

from __future__ import annotations

import numpy as np

from multiattn.attention import AttentionParams, SentinelParams
from multiattn.combination import MultiAttentionParams
from multiattn.core import Parameter, SeededRng
from multiattn.recurrent import GruParams


def rand_array(rng: SeededRng, shape, scale=1.0):
    return rng.uniform_array(shape, -scale, scale)


def rand_param(rng: SeededRng, name, shape, scale=1.0):
    return Parameter(name, rand_array(rng, shape, scale))


def make_attention_params(rng: SeededRng, prefix, dec_dim, enc_dim, attn_dim,
                          scale=1.0) -> AttentionParams:
    return AttentionParams(
        query_weight=rand_param(rng, f"{prefix}/query_weight", (attn_dim, dec_dim), scale),
        query_bias=rand_param(rng, f"{prefix}/query_bias", (attn_dim,), scale),
        state_weight=rand_param(rng, f"{prefix}/state_weight", (attn_dim, enc_dim), scale),
        state_bias=rand_param(rng, f"{prefix}/state_bias", (attn_dim,), scale),
        score_weight=rand_param(rng, f"{prefix}/score_weight", (attn_dim,), scale))


def make_sentinel_params(rng: SeededRng, prefix, dec_dim, embed_dim, attn_dim,
                         ctx_dim=None, scale=1.0) -> SentinelParams:
    ctx_w = ctx_b = None
    if ctx_dim is not None:
        ctx_w = rand_param(rng, f"{prefix}/context_weight", (ctx_dim, dec_dim), scale)
        ctx_b = rand_param(rng, f"{prefix}/context_bias", (ctx_dim,), scale)
    return SentinelParams(
        input_weight=rand_param(rng, f"{prefix}/input_weight", (dec_dim, embed_dim), scale),
        state_weight=rand_param(rng, f"{prefix}/state_weight", (dec_dim, dec_dim), scale),
        gate_bias=rand_param(rng, f"{prefix}/gate_bias", (dec_dim,), scale),
        energy_weight=rand_param(rng, f"{prefix}/energy_weight", (attn_dim, dec_dim), scale),
        energy_bias=rand_param(rng, f"{prefix}/energy_bias", (attn_dim,), scale),
        context_weight=ctx_w, context_bias=ctx_b)


def make_multi_params(rng: SeededRng, n_enc, enc_dims, dec_dim, embed_dim, attn_dim,
                      ctx_dim, hierarchical=False, sentinel=False,
                      share=False) -> MultiAttentionParams:
    state_weights = [rand_param(rng, f"m/enc{k}/state_weight", (attn_dim, enc_dims[k]))
                     for k in range(n_enc)]
    hier_state_weights = hier_state_biases = None
    hier_query_weight = hier_query_bias = hier_score = None
    if hierarchical:
        hier_query_weight = rand_param(rng, "m/hier/query_weight", (attn_dim, dec_dim))
        hier_query_bias = rand_param(rng, "m/hier/query_bias", (attn_dim,))
        hier_score = rand_param(rng, "m/hier/score_weight", (attn_dim,))
        hier_state_weights = [rand_param(rng, f"m/enc{k}/hier_state_weight",
                                         (attn_dim, enc_dims[k]))
                              for k in range(n_enc)]
        hier_state_biases = [rand_param(rng, f"m/enc{k}/hier_state_bias", (attn_dim,))
                             for k in range(n_enc)]
        share_src = hier_state_weights
    else:
        share_src = state_weights
    if share:
        context_weights = list(share_src)
    else:
        context_weights = [rand_param(rng, f"m/enc{k}/context_weight",
                                      (ctx_dim, enc_dims[k])) for k in range(n_enc)]
    sent = None
    if sentinel:
        sent = make_sentinel_params(rng, "m/sentinel", dec_dim, embed_dim, attn_dim,
                                    ctx_dim=ctx_dim)
        if share:
            sent.context_weight = sent.energy_weight
    return MultiAttentionParams(
        query_weight=rand_param(rng, "m/query_weight", (attn_dim, dec_dim)),
        query_bias=rand_param(rng, "m/query_bias", (attn_dim,)),
        score_weight=rand_param(rng, "m/score_weight", (attn_dim,)),
        state_weights=state_weights,
        state_biases=[rand_param(rng, f"m/enc{k}/state_bias", (attn_dim,))
                      for k in range(n_enc)],
        context_weights=context_weights,
        context_biases=[rand_param(rng, f"m/enc{k}/context_bias", (ctx_dim,))
                        for k in range(n_enc)],
        hier_query_weight=hier_query_weight, hier_query_bias=hier_query_bias,
        hier_score_weight=hier_score,
        hier_state_weights=hier_state_weights, hier_state_biases=hier_state_biases,
        sentinel=sent)


# --------------------------------------------------------------------------- #
# straight-line oracles


def oracle_softmax(v):
    e = np.exp(v - np.max(v))
    return e / e.sum()


def oracle_energies(s, H, p: AttentionParams):
    q = p.query_weight.value @ s + p.query_bias.value
    return np.array([p.score_weight.value
                     @ np.tanh(q + p.state_weight.value @ h + p.state_bias.value)
                     for h in H])


def oracle_gate(y, s_prev, sp: SentinelParams):
    pre = sp.input_weight.value @ y + sp.state_weight.value @ s_prev + sp.gate_bias.value
    return 1.0 / (1.0 + np.exp(-pre))


def oracle_sentinel_energy(s, vec, sp: SentinelParams, ap: AttentionParams):
    q = ap.query_weight.value @ s + ap.query_bias.value
    proj = sp.energy_weight.value @ vec + sp.energy_bias.value
    return float(ap.score_weight.value @ np.tanh(q + proj))


def oracle_flat(s, Hs, p: MultiAttentionParams, y=None, s_prev=None):
    """Joint-softmax combination over all encoder states (+ sentinel)."""
    energies = []
    for k, H in enumerate(Hs):
        ap = AttentionParams(p.query_weight, p.query_bias,
                             p.state_weights[k], p.state_biases[k], p.score_weight)
        energies.append(oracle_energies(s, H, ap))
    flat_e = np.concatenate(energies)
    vec = None
    if p.sentinel is not None:
        gate = oracle_gate(y, s_prev, p.sentinel)
        vec = gate * s
        ap0 = AttentionParams(p.query_weight, p.query_bias,
                              p.state_weights[0], p.state_biases[0], p.score_weight)
        flat_e = np.append(flat_e, oracle_sentinel_energy(s, vec, p.sentinel, ap0))
    alphas = oracle_softmax(flat_e)
    ctx_dim = p.context_biases[0].value.shape[0]
    context = np.zeros(ctx_dim)
    offset = 0
    for k, H in enumerate(Hs):
        for j, h in enumerate(H):
            context += alphas[offset + j] * (p.context_weights[k].value @ h
                                             + p.context_biases[k].value)
        offset += len(H)
    if vec is not None:
        context += alphas[-1] * (p.sentinel.context_weight.value @ vec
                                 + p.sentinel.context_bias.value)
    return alphas, context


def oracle_hierarchical(s, Hs, p: MultiAttentionParams, y=None, s_prev=None):
    """Two-level combination: per-encoder attention then attention over the
    projected per-encoder contexts (+ sentinel pseudo-context)."""
    inner_contexts = []
    inner_alphas = []
    for k, H in enumerate(Hs):
        ap = AttentionParams(p.query_weight, p.query_bias,
                             p.state_weights[k], p.state_biases[k], p.score_weight)
        a = oracle_softmax(oracle_energies(s, H, ap))
        inner_alphas.append(a)
        inner_contexts.append(a @ H)
    qb = p.hier_query_weight.value @ s + p.hier_query_bias.value
    outer_e = [float(p.hier_score_weight.value
                     @ np.tanh(qb + p.hier_state_weights[k].value @ c
                               + p.hier_state_biases[k].value))
               for k, c in enumerate(inner_contexts)]
    vec = None
    if p.sentinel is not None:
        gate = oracle_gate(y, s_prev, p.sentinel)
        vec = gate * s
        outer_e.append(float(p.hier_score_weight.value
                             @ np.tanh(qb + p.sentinel.energy_weight.value @ vec
                                       + p.sentinel.energy_bias.value)))
    beta = oracle_softmax(np.array(outer_e))
    ctx_dim = p.context_biases[0].value.shape[0]
    context = np.zeros(ctx_dim)
    for k, c in enumerate(inner_contexts):
        context += beta[k] * (p.context_weights[k].value @ c + p.context_biases[k].value)
    if vec is not None:
        context += beta[-1] * (p.sentinel.context_weight.value @ vec
                               + p.sentinel.context_bias.value)
    return beta, inner_alphas, context


def oracle_gru(x, s, p: GruParams):
    def sig(v):
        return 1.0 / (1.0 + np.exp(-v))
    z = sig(p.update_input.value @ x + p.update_state.value @ s + p.update_bias.value)
    r = sig(p.reset_input.value @ x + p.reset_state.value @ s + p.reset_bias.value)
    c = np.tanh(p.cand_input.value @ x + p.cand_state.value @ (r * s) + p.cand_bias.value)
    return (1.0 - z) * s + z * c


def make_gru_params(rng: SeededRng, prefix, input_dim, state_dim, scale=1.0) -> GruParams:
    return GruParams(
        update_input=rand_param(rng, f"{prefix}/update_input", (state_dim, input_dim), scale),
        update_state=rand_param(rng, f"{prefix}/update_state", (state_dim, state_dim), scale),
        update_bias=rand_param(rng, f"{prefix}/update_bias", (state_dim,), scale),
        reset_input=rand_param(rng, f"{prefix}/reset_input", (state_dim, input_dim), scale),
        reset_state=rand_param(rng, f"{prefix}/reset_state", (state_dim, state_dim), scale),
        reset_bias=rand_param(rng, f"{prefix}/reset_bias", (state_dim,), scale),
        cand_input=rand_param(rng, f"{prefix}/cand_input", (state_dim, input_dim), scale),
        cand_state=rand_param(rng, f"{prefix}/cand_state", (state_dim, state_dim), scale),
        cand_bias=rand_param(rng, f"{prefix}/cand_bias", (state_dim,), scale))
