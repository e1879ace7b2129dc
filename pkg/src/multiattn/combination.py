"""Multi-source attention combination strategies.

Three ways for a decoder to combine attention over N encoders:

* concat: run attention per encoder independently and concatenate the
  context vectors; no explicit distribution over encoders exists.
* flat: score all encoder positions with a shared query projection and
  scoring vector (per-encoder state projections), normalize jointly across
  every position of every encoder, and sum per-position projections of the
  states into one shared context space.
* hierarchical: attend per encoder first, then run a second attention over
  the per-encoder context vectors and average their projections under it.

Flat and hierarchical support a sentinel competitor and optional sharing of
the energy-side and context-side projection matrices (the same Parameter
object is used for both, so a gradient step updates them together). The
combined context always lives in `ctx_dim` regardless of per-encoder state
dims, so encoders of different widths mix freely.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import (AttentionOutput, AttentionParams, SentinelParams, attend,
                        attention_energies, build_attention_params,
                        build_sentinel_params, projected_query, projected_states,
                        sentinel_energy, sentinel_gate, sentinel_vector)
from .core import ConfigError, Parameter, matrix_param, vector_param, zeros_param
from .graph import Graph, Node
from .recurrent import EncoderStates

STRATEGIES = ("concat", "flat", "hierarchical")
_STRATEGY_ALIASES = {"hier": "hierarchical"}


@dataclass
class CombinationConfig:
    """One row of the strategy grid: strategy x share_projections x sentinel.

    ctx_dim is the width of the combined context for flat/hierarchical; it
    defaults to attn_dim so shared and unshared runs stay shape-comparable,
    and sharing *requires* ctx_dim == attn_dim because the shared matrix must
    serve both projections.
    """

    strategy: str
    share_projections: bool = False
    use_sentinel: bool = False
    ctx_dim: int | None = None

    def __post_init__(self):
        self.strategy = _STRATEGY_ALIASES.get(self.strategy, self.strategy)
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.strategy == "concat":
            if self.use_sentinel:
                raise ConfigError("the concat baseline does not support a sentinel")
            if self.share_projections:
                raise ConfigError("the concat baseline has no context projections to share")

    def resolved_ctx_dim(self, attn_dim: int) -> int:
        ctx = self.ctx_dim if self.ctx_dim is not None else attn_dim
        if self.share_projections and ctx != attn_dim:
            raise ConfigError(
                f"share_projections requires ctx_dim == attn_dim, got {ctx} != {attn_dim}")
        return ctx

    def to_dict(self) -> dict:
        return {"strategy": self.strategy, "share_projections": self.share_projections,
                "use_sentinel": self.use_sentinel, "ctx_dim": self.ctx_dim}

    @classmethod
    def from_dict(cls, d: dict) -> "CombinationConfig":
        return cls(**d)


@dataclass
class ConcatAttentionParams:
    """Independent attention parameters, one full set per encoder."""

    per_encoder: list[AttentionParams]

    def all_parameters(self) -> list[Parameter]:
        out = []
        for p in self.per_encoder:
            out.extend([p.query_weight, p.query_bias, p.state_weight,
                        p.state_bias, p.score_weight])
        return out


@dataclass
class MultiAttentionParams:
    """Joint parameters for the flat and hierarchical strategies.

    The query projection and scoring vector are shared across encoders; each
    encoder gets its own energy-side state projection and its own context
    projection. Under share_projections the context matrix of encoder k *is*
    the energy-side matrix of the level where contexts are combined (the
    state projection for flat, the hierarchical one for hierarchical), while
    biases stay independent. The optional sentinel's energy/context weights
    live in the same level and alias the same way.
    """

    query_weight: Parameter
    query_bias: Parameter
    score_weight: Parameter
    state_weights: list[Parameter]
    state_biases: list[Parameter]
    context_weights: list[Parameter]
    context_biases: list[Parameter]
    hier_query_weight: Parameter | None = None
    hier_query_bias: Parameter | None = None
    hier_score_weight: Parameter | None = None
    hier_state_weights: list[Parameter] | None = None
    hier_state_biases: list[Parameter] | None = None
    sentinel: SentinelParams | None = None
    _views: dict = field(default_factory=dict, repr=False)

    @property
    def n_encoders(self) -> int:
        return len(self.state_weights)

    def inner_attention(self, k: int) -> AttentionParams:
        """Per-encoder view of the shared additive attention."""
        view = self._views.get(k)
        if view is None:
            view = AttentionParams(
                query_weight=self.query_weight, query_bias=self.query_bias,
                state_weight=self.state_weights[k], state_bias=self.state_biases[k],
                score_weight=self.score_weight)
            self._views[k] = view
        return view

    def all_parameters(self) -> list[Parameter]:
        """Every owned parameter, deduplicated by identity (aliased shared
        matrices appear once)."""
        candidates: list[Parameter | None] = [
            self.query_weight, self.query_bias, self.score_weight,
            self.hier_query_weight, self.hier_query_bias, self.hier_score_weight,
        ]
        candidates.extend(self.state_weights)
        candidates.extend(self.state_biases)
        candidates.extend(self.context_weights)
        candidates.extend(self.context_biases)
        if self.hier_state_weights:
            candidates.extend(self.hier_state_weights)
            candidates.extend(self.hier_state_biases or [])
        if self.sentinel is not None:
            s = self.sentinel
            candidates.extend([s.input_weight, s.state_weight, s.gate_bias,
                               s.energy_weight, s.energy_bias,
                               s.context_weight, s.context_bias])
        seen: set[int] = set()
        out: list[Parameter] = []
        for p in candidates:
            if p is not None and id(p) not in seen:
                seen.add(id(p))
                out.append(p)
        return out


@dataclass
class CombinedOutput:
    """Context vector plus the interpretability record of one step.

    encoder_masses has one entry per encoder (plus a trailing sentinel entry
    when active) and sums to 1 for flat/hierarchical; the concat baseline has
    no explicit distribution over encoders and reports uniform mass. alphas
    holds the per-encoder attention weights as plain arrays: full
    distributions for concat/hierarchical, slices of the joint distribution
    for flat (each slice sums to that encoder's mass).
    """

    context: Node
    encoder_masses: np.ndarray
    alphas: list[np.ndarray]
    has_sentinel: bool
    beta: np.ndarray | None = None


def _require_encoders(encoders: list[EncoderStates], op: str) -> None:
    if not encoders:
        raise ConfigError(f"{op}: empty encoder list")


def _sentinel_parts(g: Graph, query: Node, params: MultiAttentionParams,
                    sentinel_inputs: tuple[Node, Node] | None):
    """Gate, sentinel vector, and its context-space row; None when disabled."""
    if params.sentinel is None:
        return None
    if sentinel_inputs is None:
        raise ConfigError("sentinel enabled but no (embedded input, previous state) given")
    y, s_prev = sentinel_inputs
    gate = sentinel_gate(g, y, s_prev, params.sentinel)
    vec = sentinel_vector(g, gate, query)
    ctx_row = g.affine(g.leaf(params.sentinel.context_weight), vec,
                       g.leaf(params.sentinel.context_bias))
    return vec, ctx_row


def combine_concat(g: Graph, query: Node, encoders: list[EncoderStates],
                   params: ConcatAttentionParams) -> CombinedOutput:
    """Independent attention per encoder; contexts concatenated. The output
    width is the sum of the encoder dims and the reported per-encoder mass is
    uniform (no joint distribution exists to read it from)."""
    _require_encoders(encoders, "combine_concat")
    outs: list[AttentionOutput] = [
        attend(g, query, enc.states, params.per_encoder[k])
        for k, enc in enumerate(encoders)]
    context = outs[0].context if len(outs) == 1 else g.concat_rows([o.context for o in outs])
    n = len(encoders)
    return CombinedOutput(
        context=context,
        encoder_masses=np.full(n, 1.0 / n),
        alphas=[o.alphas.value.copy() for o in outs],
        has_sentinel=False)


def combine_flat(g: Graph, query: Node, encoders: list[EncoderStates],
                 params: MultiAttentionParams,
                 sentinel_inputs: tuple[Node, Node] | None = None) -> CombinedOutput:
    """One softmax over every position of every encoder (plus the sentinel),
    with the context accumulated in the shared projection space."""
    _require_encoders(encoders, "combine_flat")
    energies = [attention_energies(g, query, enc.states, params.inner_attention(k))
                for k, enc in enumerate(encoders)]
    ctx_rows = [projected_states(g, enc.states, params.context_weights[k],
                                 params.context_biases[k])
                for k, enc in enumerate(encoders)]

    sent = _sentinel_parts(g, query, params, sentinel_inputs) if params.sentinel else None
    if sent is not None:
        vec, ctx_row = sent
        e_sent = sentinel_energy(g, query, vec, params.sentinel, params.inner_attention(0))
        energies.append(g.reshape(e_sent, (1,)))
        ctx_rows.append(g.reshape(ctx_row, (1, ctx_row.value.shape[0])))

    joint = energies[0] if len(energies) == 1 else g.concat_rows(energies)
    alphas = g.softmax(joint)
    stacked = ctx_rows[0] if len(ctx_rows) == 1 else g.concat_rows(ctx_rows)
    context = g.matmul(alphas, stacked)

    av = alphas.value
    lengths = [enc.length for enc in encoders]
    masses = np.empty(len(encoders) + (1 if sent is not None else 0))
    per_encoder = []
    offset = 0
    for k, t in enumerate(lengths):
        seg = av[offset:offset + t]
        per_encoder.append(seg.copy())
        masses[k] = seg.sum()
        offset += t
    if sent is not None:
        masses[-1] = av[-1]
    return CombinedOutput(context=context, encoder_masses=masses,
                          alphas=per_encoder, has_sentinel=sent is not None)


def combine_hierarchical(g: Graph, query: Node, encoders: list[EncoderStates],
                         params: MultiAttentionParams,
                         sentinel_inputs: tuple[Node, Node] | None = None) -> CombinedOutput:
    """Attend per encoder, then attend over the per-encoder contexts.

    The outer level has its own query projection and scoring vector shared
    across encoders, per-encoder projections of the inner contexts, and an
    optional sentinel pseudo-context; the combined context averages the
    context-space projections under the outer distribution."""
    _require_encoders(encoders, "combine_hierarchical")
    if params.hier_query_weight is None:
        raise ConfigError("hierarchical combination needs the outer-level parameters")
    inner = [attend(g, query, enc.states, params.inner_attention(k))
             for k, enc in enumerate(encoders)]

    outer_q_key = ("qproj", query.idx, params.hier_query_weight.name)
    outer_q = g.memo.get(outer_q_key)
    if outer_q is None:
        outer_q = g.affine(g.leaf(params.hier_query_weight), query,
                           g.leaf(params.hier_query_bias))
        g.memo[outer_q_key] = outer_q

    energy_projs = [g.affine(g.leaf(params.hier_state_weights[k]), inner[k].context,
                             g.leaf(params.hier_state_biases[k]))
                    for k in range(len(encoders))]
    ctx_rows = [g.affine(g.leaf(params.context_weights[k]), inner[k].context,
                         g.leaf(params.context_biases[k]))
                for k in range(len(encoders))]

    sent = _sentinel_parts(g, query, params, sentinel_inputs) if params.sentinel else None
    if sent is not None:
        vec, ctx_row = sent
        energy_projs.append(g.affine(g.leaf(params.sentinel.energy_weight), vec,
                                     g.leaf(params.sentinel.energy_bias)))
        ctx_rows.append(ctx_row)

    outer_energies = g.tanh_scores(g.stack_rows(energy_projs), outer_q,
                                   g.leaf(params.hier_score_weight))
    beta = g.softmax(outer_energies)
    context = g.matmul(beta, g.stack_rows(ctx_rows))
    return CombinedOutput(
        context=context,
        encoder_masses=beta.value.copy(),
        alphas=[o.alphas.value.copy() for o in inner],
        has_sentinel=sent is not None,
        beta=beta.value.copy())


CombinationParams = ConcatAttentionParams | MultiAttentionParams


def build_combination_params(rng, config: CombinationConfig, encoder_dims: list[int],
                             decoder_dim: int, embed_dim: int, attn_dim: int,
                             prefix: str = "attn") -> CombinationParams:
    """Allocate all parameters for a strategy, wiring up the aliases that
    share_projections implies."""
    if config.strategy == "concat":
        return ConcatAttentionParams(per_encoder=[
            build_attention_params(rng, f"{prefix}/enc{k}", decoder_dim, d, attn_dim)
            for k, d in enumerate(encoder_dims)])

    ctx_dim = config.resolved_ctx_dim(attn_dim)
    query_weight = matrix_param(rng, f"{prefix}/query_weight", attn_dim, decoder_dim)
    query_bias = zeros_param(f"{prefix}/query_bias", (attn_dim,))
    score_weight = vector_param(rng, f"{prefix}/score_weight", attn_dim)
    state_weights = [matrix_param(rng, f"{prefix}/enc{k}/state_weight", attn_dim, d)
                     for k, d in enumerate(encoder_dims)]
    state_biases = [zeros_param(f"{prefix}/enc{k}/state_bias", (attn_dim,))
                    for k in range(len(encoder_dims))]

    hier_query_weight = hier_query_bias = hier_score_weight = None
    hier_state_weights = hier_state_biases = None
    if config.strategy == "hierarchical":
        hier_query_weight = matrix_param(rng, f"{prefix}/hier/query_weight",
                                         attn_dim, decoder_dim)
        hier_query_bias = zeros_param(f"{prefix}/hier/query_bias", (attn_dim,))
        hier_score_weight = vector_param(rng, f"{prefix}/hier/score_weight", attn_dim)
        hier_state_weights = [matrix_param(rng, f"{prefix}/enc{k}/hier_state_weight",
                                           attn_dim, d)
                              for k, d in enumerate(encoder_dims)]
        hier_state_biases = [zeros_param(f"{prefix}/enc{k}/hier_state_bias", (attn_dim,))
                             for k in range(len(encoder_dims))]
        share_sources = hier_state_weights
    else:
        share_sources = state_weights

    if config.share_projections:
        context_weights = list(share_sources)
    else:
        context_weights = [matrix_param(rng, f"{prefix}/enc{k}/context_weight", ctx_dim, d)
                           for k, d in enumerate(encoder_dims)]
    context_biases = [zeros_param(f"{prefix}/enc{k}/context_bias", (ctx_dim,))
                      for k in range(len(encoder_dims))]

    sentinel = None
    if config.use_sentinel:
        sentinel = build_sentinel_params(rng, f"{prefix}/sentinel", decoder_dim,
                                         embed_dim, attn_dim, ctx_dim=ctx_dim)
        if config.share_projections:
            sentinel.context_weight = sentinel.energy_weight

    return MultiAttentionParams(
        query_weight=query_weight, query_bias=query_bias, score_weight=score_weight,
        state_weights=state_weights, state_biases=state_biases,
        context_weights=context_weights, context_biases=context_biases,
        hier_query_weight=hier_query_weight, hier_query_bias=hier_query_bias,
        hier_score_weight=hier_score_weight,
        hier_state_weights=hier_state_weights, hier_state_biases=hier_state_biases,
        sentinel=sentinel)


def combine(g: Graph, query: Node, encoders: list[EncoderStates],
            config: CombinationConfig, params: CombinationParams,
            sentinel_inputs: tuple[Node, Node] | None = None) -> CombinedOutput:
    """Dispatch to the configured strategy."""
    if config.strategy == "concat":
        return combine_concat(g, query, encoders, params)
    if config.strategy == "flat":
        return combine_flat(g, query, encoders, params, sentinel_inputs)
    return combine_hierarchical(g, query, encoders, params, sentinel_inputs)


def combined_context_dim(config: CombinationConfig, encoder_dims: list[int],
                         attn_dim: int) -> int:
    if config.strategy == "concat":
        return sum(encoder_dims)
    return config.resolved_ctx_dim(attn_dim)
