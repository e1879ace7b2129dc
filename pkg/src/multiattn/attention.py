"""Single-encoder additive attention and the sentinel gate extension.

The score of encoder position j for the current decoder state s is

    e_j = score . tanh(Wq s + bq + Ws h_j + bs)

normalized with a softmax into weights alpha, and the context is the
alpha-weighted average of the encoder states. The sentinel extension adds one
extra competitor to the softmax: a gated copy of the decoder state that lets
the decoder pay attention to itself instead of any encoder.

All functions build graph nodes, so they are differentiable end to end and
pure with respect to their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Parameter, ShapeMismatchError
from .graph import Graph, Node


@dataclass
class AttentionParams:
    """Projections for additive attention.

    query_weight: (attn_dim x decoder_dim), with query_bias (attn_dim,)
    state_weight: (attn_dim x encoder_dim), with state_bias (attn_dim,)
    score_weight: (attn_dim,) scoring vector. A bias on the final dot product
    would shift every energy equally and cancel in the softmax, so there is
    none.
    """

    query_weight: Parameter
    query_bias: Parameter
    state_weight: Parameter
    state_bias: Parameter
    score_weight: Parameter

    @property
    def attn_dim(self) -> int:
        return self.query_weight.shape[0]


@dataclass
class SentinelParams:
    """Parameters of the sentinel gate and its attention-side projections.

    The gate is computed from the embedded decoder input and the previous
    decoder state; the sentinel vector (gate * query state) is projected by
    energy_weight into the attention space. context_weight projects the
    sentinel vector into the combined-context space and is only used by the
    combination strategies (plain single-encoder attention adds the sentinel
    vector to the context sum unprojected).
    """

    input_weight: Parameter   # (decoder_dim x embed_dim)
    state_weight: Parameter   # (decoder_dim x decoder_dim)
    gate_bias: Parameter      # (decoder_dim,)
    energy_weight: Parameter  # (attn_dim x decoder_dim)
    energy_bias: Parameter    # (attn_dim,)
    context_weight: Parameter | None = None  # (ctx_dim x decoder_dim)
    context_bias: Parameter | None = None    # (ctx_dim,)


@dataclass
class AttentionOutput:
    """Energies, normalized weights, and the resulting context vector.

    With a sentinel, energies and alphas have one extra trailing entry for
    the sentinel term.
    """

    energies: Node
    alphas: Node
    context: Node


def projected_query(g: Graph, query: Node, params: AttentionParams) -> Node:
    """Wq s + bq, cached per (graph, query node) so that several attention
    calls against the same decoder state share one evaluation."""
    key = ("qproj", query.idx, params.query_weight.name)
    node = g.memo.get(key)
    if node is None:
        node = g.affine(g.leaf(params.query_weight), query, g.leaf(params.query_bias))
        g.memo[key] = node
    return node


def projected_states(g: Graph, states: Node, weight: Parameter, bias: Parameter) -> Node:
    """states @ W.T + b for a whole encoder, cached per (graph, states, W)."""
    key = ("sproj", states.idx, weight.name)
    node = g.memo.get(key)
    if node is None:
        node = g.add(g.matmul(states, g.transpose(g.leaf(weight))), g.leaf(bias))
        g.memo[key] = node
    return node


def attention_energies(g: Graph, query: Node, states: Node, params: AttentionParams) -> Node:
    """Unnormalized attention energies, one per encoder position (length T)."""
    if states.value.ndim != 2:
        raise ShapeMismatchError("attention_energies states", states.value.shape)
    if states.value.shape[1] != params.state_weight.shape[1]:
        raise ShapeMismatchError(
            "attention_energies", states.value.shape, params.state_weight.shape)
    q = projected_query(g, query, params)
    keys = projected_states(g, states, params.state_weight, params.state_bias)
    return g.tanh_scores(keys, q, g.leaf(params.score_weight))


def sentinel_gate(g: Graph, embedded_input: Node, prev_state: Node,
                  params: SentinelParams) -> Node:
    """Elementwise gate in (0,1) from the embedded decoder input and the
    previous decoder state."""
    pre = g.add(g.matmul(g.leaf(params.input_weight), embedded_input),
                g.affine(g.leaf(params.state_weight), prev_state,
                         g.leaf(params.gate_bias)))
    return g.sigmoid(pre)


def sentinel_vector(g: Graph, gate: Node, query: Node) -> Node:
    """The sentinel competitor: gate * query state."""
    return g.elementwise_mul(gate, query)


def sentinel_energy(g: Graph, query: Node, sent_vec: Node,
                    sent: SentinelParams, attn: AttentionParams) -> Node:
    """Scalar energy of the sentinel, sharing the query projection and the
    scoring vector with the encoder energies."""
    q = projected_query(g, query, attn)
    proj = g.affine(g.leaf(sent.energy_weight), sent_vec, g.leaf(sent.energy_bias))
    return g.matmul(g.leaf(attn.score_weight), g.tanh(g.add(q, proj)))


def attend(g: Graph, query: Node, states: Node, params: AttentionParams,
           sentinel: tuple[Node, SentinelParams] | None = None) -> AttentionOutput:
    """Full attention step over one encoder.

    `sentinel`, when given, is (sentinel_vector, SentinelParams); the sentinel
    then competes in the softmax and its raw vector joins the context sum,
    which requires the encoder and decoder dims to match.
    """
    energies = attention_energies(g, query, states, params)
    if sentinel is None:
        alphas = g.softmax(energies)
        context = g.matmul(alphas, states)
        return AttentionOutput(energies, alphas, context)

    sent_vec, sent_params = sentinel
    if sent_vec.value.shape != (states.value.shape[1],):
        raise ShapeMismatchError(
            "attend with sentinel (decoder dim must equal encoder dim)",
            sent_vec.value.shape, states.value.shape)
    e_sent = sentinel_energy(g, query, sent_vec, sent_params, params)
    all_energies = g.concat_rows([energies, g.reshape(e_sent, (1,))])
    alphas = g.softmax(all_energies)
    rows = g.concat_rows([states, g.reshape(sent_vec, (1, sent_vec.value.shape[0]))])
    context = g.matmul(alphas, rows)
    return AttentionOutput(all_energies, alphas, context)


def build_attention_params(rng, prefix: str, decoder_dim: int, encoder_dim: int,
                           attn_dim: int) -> AttentionParams:
    """Fresh glorot-initialized attention parameters under a name prefix."""
    from .core import matrix_param, vector_param, zeros_param

    return AttentionParams(
        query_weight=matrix_param(rng, f"{prefix}/query_weight", attn_dim, decoder_dim),
        query_bias=zeros_param(f"{prefix}/query_bias", (attn_dim,)),
        state_weight=matrix_param(rng, f"{prefix}/state_weight", attn_dim, encoder_dim),
        state_bias=zeros_param(f"{prefix}/state_bias", (attn_dim,)),
        score_weight=vector_param(rng, f"{prefix}/score_weight", attn_dim),
    )


def build_sentinel_params(rng, prefix: str, decoder_dim: int, embed_dim: int,
                          attn_dim: int, ctx_dim: int | None = None,
                          context_weight: Parameter | None = None) -> SentinelParams:
    """Fresh sentinel parameters. When `context_weight` is passed (projection
    sharing), it is aliased instead of allocating a new matrix; a fresh
    context bias is still created."""
    from .core import matrix_param, zeros_param

    ctx_w = None
    ctx_b = None
    if ctx_dim is not None:
        ctx_w = context_weight if context_weight is not None else matrix_param(
            rng, f"{prefix}/context_weight", ctx_dim, decoder_dim)
        ctx_b = zeros_param(f"{prefix}/context_bias", (ctx_dim,))
    return SentinelParams(
        input_weight=matrix_param(rng, f"{prefix}/input_weight", decoder_dim, embed_dim),
        state_weight=matrix_param(rng, f"{prefix}/state_weight", decoder_dim, decoder_dim),
        gate_bias=zeros_param(f"{prefix}/gate_bias", (decoder_dim,)),
        energy_weight=matrix_param(rng, f"{prefix}/energy_weight", attn_dim, decoder_dim),
        energy_bias=zeros_param(f"{prefix}/energy_bias", (attn_dim,)),
        context_weight=ctx_w,
        context_bias=ctx_b,
    )
