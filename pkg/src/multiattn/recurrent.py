"""GRU cell, bidirectional encoder, and the two attentive decoder steps.

The GRU transition is the standard reset-before-candidate form:

    z = sigmoid(Wz x + Uz s + bz)
    r = sigmoid(Wr x + Ur s + br)
    c = tanh(Wc x + Uc (r * s) + bc)
    s' = (1 - z) * s + z * c

The decoder comes in two flavors behind one call signature: a plain GRU that
queries attention with the previous state and consumes [input, context] as
one concatenated input, and a conditional variant made of two GRU transitions
with the attention query sandwiched between them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

from .core import Parameter, ShapeMismatchError, matrix_param, zeros_param
from .graph import Graph, Node


@dataclass
class GruParams:
    """Gate and candidate projections of one GRU transition."""

    update_input: Parameter   # (state_dim x input_dim)
    update_state: Parameter   # (state_dim x state_dim)
    update_bias: Parameter    # (state_dim,)
    reset_input: Parameter
    reset_state: Parameter
    reset_bias: Parameter
    cand_input: Parameter
    cand_state: Parameter
    cand_bias: Parameter

    @property
    def state_dim(self) -> int:
        return self.update_state.shape[0]

    @property
    def input_dim(self) -> int:
        return self.update_input.shape[1]

    def all(self) -> list[Parameter]:
        return [self.update_input, self.update_state, self.update_bias,
                self.reset_input, self.reset_state, self.reset_bias,
                self.cand_input, self.cand_state, self.cand_bias]


@dataclass
class EncoderStates:
    """Matrix of per-position encoder states (length x dim) plus identity."""

    states: Node
    encoder_id: int = 0

    @property
    def length(self) -> int:
        return self.states.value.shape[0]

    @property
    def dim(self) -> int:
        return self.states.value.shape[1]


def build_gru_params(rng, prefix: str, input_dim: int, state_dim: int) -> GruParams:
    return GruParams(
        update_input=matrix_param(rng, f"{prefix}/update_input", state_dim, input_dim),
        update_state=matrix_param(rng, f"{prefix}/update_state", state_dim, state_dim),
        update_bias=zeros_param(f"{prefix}/update_bias", (state_dim,)),
        reset_input=matrix_param(rng, f"{prefix}/reset_input", state_dim, input_dim),
        reset_state=matrix_param(rng, f"{prefix}/reset_state", state_dim, state_dim),
        reset_bias=zeros_param(f"{prefix}/reset_bias", (state_dim,)),
        cand_input=matrix_param(rng, f"{prefix}/cand_input", state_dim, input_dim),
        cand_state=matrix_param(rng, f"{prefix}/cand_state", state_dim, state_dim),
        cand_bias=zeros_param(f"{prefix}/cand_bias", (state_dim,)),
    )


def gru_step(g: Graph, x: Node, state: Node, params: GruParams) -> Node:
    if x.value.shape != (params.input_dim,) or state.value.shape != (params.state_dim,):
        raise ShapeMismatchError(
            "gru_step", x.value.shape, state.value.shape,
            params.update_input.shape)
    return g.gru_cell(
        x, state,
        g.leaf(params.update_input), g.leaf(params.update_state), g.leaf(params.update_bias),
        g.leaf(params.reset_input), g.leaf(params.reset_state), g.leaf(params.reset_bias),
        g.leaf(params.cand_input), g.leaf(params.cand_state), g.leaf(params.cand_bias))


def encode_bidirectional(g: Graph, embedded: Node, fwd: GruParams,
                         bwd: GruParams, encoder_id: int = 0) -> EncoderStates:
    """Run a GRU over the rows of `embedded` in both directions and stitch
    the per-position states: row j is [forward state at j, backward state at
    j], so the output is (T x 2*hidden)."""
    if embedded.value.ndim != 2 or embedded.value.shape[0] == 0:
        raise ShapeMismatchError("encode_bidirectional (wants T x embed, T >= 1)",
                                 embedded.value.shape)
    length = embedded.value.shape[0]
    inputs = [g.take_row(embedded, t) for t in range(length)]

    state = g.constant([0.0] * fwd.state_dim)
    fwd_states = []
    for t in range(length):
        state = gru_step(g, inputs[t], state, fwd)
        fwd_states.append(state)

    state = g.constant([0.0] * bwd.state_dim)
    bwd_states: list[Node] = [None] * length  # type: ignore[list-item]
    for t in range(length - 1, -1, -1):
        state = gru_step(g, inputs[t], state, bwd)
        bwd_states[t] = state

    stacked = g.concat_cols(g.stack_rows(fwd_states), g.stack_rows(bwd_states))
    return EncoderStates(states=stacked, encoder_id=encoder_id)


# A combine_fn closes over the encoders and combination parameters; the
# decoder hands it the attention query plus the sentinel's inputs (embedded
# decoder input and previous decoder state) each step.
CombineFn = Callable[[Graph, Node, Node, Node], object]


def decoder_step_plain(g: Graph, y: Node, s_prev: Node, params: GruParams,
                       combine_fn: CombineFn):
    """Plain attentive decoder step: attention is queried with the previous
    state; the GRU then consumes [embedded input, context] concatenated."""
    combined = combine_fn(g, s_prev, y, s_prev)
    x = g.concat_rows([y, combined.context])
    s = gru_step(g, x, s_prev, params)
    return s, combined


def decoder_step_cgru(g: Graph, y: Node, s_prev: Node,
                      params: tuple[GruParams, GruParams], combine_fn: CombineFn):
    """Conditional decoder step: a first GRU transition produces the
    intermediate state that queries attention, and a second transition
    consumes the combined context as its input."""
    first, second = params
    s_mid = gru_step(g, y, s_prev, first)
    combined = combine_fn(g, s_mid, y, s_prev)
    s = gru_step(g, combined.context, s_mid, second)
    return s, combined
