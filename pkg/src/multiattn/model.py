"""Model assembly: embeddings, encoders, combination, decoder, readout.

A :class:`MultiSourceModel` owns every parameter of one configuration. Text
sources go through an embedding table and a bidirectional GRU; grid sources
(rows of precomputed features) go through a single trainable affine layer.
The decoder (plain or conditional GRU) queries the configured combination
strategy each step, and the readout projects [decoder state, context] to
target-vocabulary logits.

Checkpoints are a self-describing binary container: magic, format version, a
canonical JSON header (config, vocabularies, parameter manifest), raw
little-endian float64 parameter payload, and a trailing SHA-256 checksum.
Identical models serialize to identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .combination import (CombinationConfig, CombinationParams, build_combination_params,
                          combine, combined_context_dim)
from .core import (ConfigError, DataError, NonFiniteError, Parameter, SeededRng,
                   matrix_param, zeros_param)
from .graph import Graph, Node
from .recurrent import (EncoderStates, GruParams, build_gru_params, decoder_step_cgru,
                        decoder_step_plain, encode_bidirectional)
from .tasks import EOS_ID, ParallelExample, Vocab


@dataclass
class SourceConfig:
    kind: str = "text"               # "text" | "grid"
    feature_dim: int | None = None   # grid sources only

    def __post_init__(self):
        if self.kind not in ("text", "grid"):
            raise ConfigError(f"unknown source kind {self.kind!r}")
        if self.kind == "grid" and (self.feature_dim is None or self.feature_dim < 1):
            raise ConfigError("grid sources need a positive feature_dim")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "feature_dim": self.feature_dim}


@dataclass
class ModelConfig:
    sources: list[SourceConfig]
    combination: CombinationConfig
    embed_dim: int = 32
    hidden_dim: int = 32
    attn_dim: int = 64
    decoder: str = "gru"             # "gru" | "cgru"

    def __post_init__(self):
        if not self.sources:
            raise ConfigError("a model needs at least one source")
        if self.decoder not in ("gru", "cgru"):
            raise ConfigError(f"unknown decoder kind {self.decoder!r}")
        for dim, name in ((self.embed_dim, "embed_dim"), (self.hidden_dim, "hidden_dim"),
                          (self.attn_dim, "attn_dim")):
            if dim < 1:
                raise ConfigError(f"{name} must be positive, got {dim}")

    @property
    def encoder_dims(self) -> list[int]:
        return [2 * self.hidden_dim for _ in self.sources]

    def to_dict(self) -> dict:
        return {"sources": [s.to_dict() for s in self.sources],
                "combination": self.combination.to_dict(),
                "embed_dim": self.embed_dim, "hidden_dim": self.hidden_dim,
                "attn_dim": self.attn_dim, "decoder": self.decoder}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(sources=[SourceConfig(**s) for s in d["sources"]],
                   combination=CombinationConfig.from_dict(d["combination"]),
                   embed_dim=d["embed_dim"], hidden_dim=d["hidden_dim"],
                   attn_dim=d["attn_dim"], decoder=d["decoder"])


@dataclass
class TextEncoderParams:
    embedding: Parameter
    forward: GruParams
    backward: GruParams


@dataclass
class GridEncoderParams:
    weight: Parameter
    bias: Parameter


@dataclass
class TraceRow:
    step: int
    token: str
    masses: np.ndarray


@dataclass
class AttentionTrace:
    """Per-step record of how attention mass spread across the encoders
    (plus the sentinel, when active)."""

    encoder_labels: list[str]
    include_sentinel: bool
    rows: list[TraceRow] = field(default_factory=list)

    @property
    def column_labels(self) -> list[str]:
        return self.encoder_labels + (["sentinel"] if self.include_sentinel else [])

    def mass_matrix(self) -> np.ndarray:
        if not self.rows:
            return np.zeros((0, len(self.column_labels)))
        return np.stack([row.masses for row in self.rows])


class MultiSourceModel:
    """All parameters of one configuration plus its vocabularies."""

    def __init__(self, config: ModelConfig, source_vocabs: list[Vocab | None],
                 target_vocab: Vocab, seed: int):
        if len(source_vocabs) != len(config.sources):
            raise ConfigError(
                f"{len(config.sources)} sources configured but "
                f"{len(source_vocabs)} vocabularies given")
        for spec, vocab in zip(config.sources, source_vocabs):
            if (spec.kind == "text") != (vocab is not None):
                raise ConfigError("text sources need a vocabulary, grid sources must not have one")
        self.config = config
        self.source_vocabs = list(source_vocabs)
        self.target_vocab = target_vocab
        self.seed = seed

        rng = SeededRng(seed)
        hidden = config.hidden_dim
        self.encoders: list[TextEncoderParams | GridEncoderParams] = []
        for k, spec in enumerate(config.sources):
            if spec.kind == "text":
                self.encoders.append(TextEncoderParams(
                    embedding=matrix_param(rng, f"enc{k}/embedding",
                                           len(source_vocabs[k]), config.embed_dim),
                    forward=build_gru_params(rng, f"enc{k}/fwd", config.embed_dim, hidden),
                    backward=build_gru_params(rng, f"enc{k}/bwd", config.embed_dim, hidden)))
            else:
                self.encoders.append(GridEncoderParams(
                    weight=matrix_param(rng, f"enc{k}/grid_weight",
                                        2 * hidden, spec.feature_dim),
                    bias=zeros_param(f"enc{k}/grid_bias", (2 * hidden,))))

        self.target_embedding = matrix_param(rng, "dec/embedding",
                                             len(target_vocab), config.embed_dim)
        self.comb_params: CombinationParams = build_combination_params(
            rng, config.combination, config.encoder_dims,
            decoder_dim=hidden, embed_dim=config.embed_dim, attn_dim=config.attn_dim)

        ctx_dim = combined_context_dim(config.combination, config.encoder_dims,
                                       config.attn_dim)
        if config.decoder == "gru":
            self.decoder_params = build_gru_params(
                rng, "dec/gru", config.embed_dim + ctx_dim, hidden)
        else:
            self.decoder_params = (
                build_gru_params(rng, "dec/gru1", config.embed_dim, hidden),
                build_gru_params(rng, "dec/gru2", ctx_dim, hidden))

        self.out_weight = matrix_param(rng, "out/weight",
                                       len(target_vocab), hidden + ctx_dim)
        self.out_bias = zeros_param("out/bias", (len(target_vocab),))

    # ------------------------------------------------------------------ #

    def parameters(self) -> list[Parameter]:
        """Every unique parameter in a stable order; shared (aliased)
        matrices appear exactly once."""
        out: list[Parameter] = []
        for enc in self.encoders:
            if isinstance(enc, TextEncoderParams):
                out.append(enc.embedding)
                out.extend(enc.forward.all())
                out.extend(enc.backward.all())
            else:
                out.extend([enc.weight, enc.bias])
        out.append(self.target_embedding)
        out.extend(self.comb_params.all_parameters())
        if isinstance(self.decoder_params, tuple):
            out.extend(self.decoder_params[0].all())
            out.extend(self.decoder_params[1].all())
        else:
            out.extend(self.decoder_params.all())
        out.extend([self.out_weight, self.out_bias])
        seen: set[int] = set()
        unique: list[Parameter] = []
        for p in out:
            if id(p) not in seen:
                seen.add(id(p))
                unique.append(p)
        names = [p.name for p in unique]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate parameter names in model")
        return unique

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def encoder_labels(self) -> list[str]:
        return [f"src{k}" for k in range(len(self.encoders))]

    # ------------------------------------------------------------------ #
    # forward plumbing

    def _encode_source(self, g: Graph, k: int, source) -> EncoderStates:
        spec = self.config.sources[k]
        enc = self.encoders[k]
        if spec.kind == "text":
            if isinstance(source, np.ndarray):
                raise DataError(f"source {k} is a text source but got a feature grid")
            ids = _encode_tokens(self.source_vocabs[k], source, f"source {k}")
            ids.append(EOS_ID)
            embedded = g.embedding_lookup(g.leaf(enc.embedding), ids)
            return encode_bidirectional(g, embedded, enc.forward, enc.backward,
                                        encoder_id=k)
        grid = np.asarray(source, dtype=np.float64)
        if grid.ndim != 2 or grid.shape[0] == 0 or grid.shape[1] != spec.feature_dim:
            raise DataError(
                f"source {k} expects a (T x {spec.feature_dim}) feature grid, "
                f"got shape {grid.shape}")
        states = g.add(g.matmul(g.constant(grid), g.transpose(g.leaf(enc.weight))),
                       g.leaf(enc.bias))
        return EncoderStates(states=states, encoder_id=k)

    def encode_sources(self, g: Graph, sources: list) -> list[EncoderStates]:
        if len(sources) != len(self.encoders):
            raise DataError(f"example has {len(sources)} sources, "
                            f"model expects {len(self.encoders)}")
        return [self._encode_source(g, k, src) for k, src in enumerate(sources)]

    def make_combine_fn(self, encoders: list[EncoderStates]):
        config = self.config.combination

        def combine_fn(g: Graph, query: Node, y: Node, s_prev: Node):
            sentinel_inputs = (y, s_prev) if config.use_sentinel else None
            return combine(g, query, encoders, config, self.comb_params,
                           sentinel_inputs)

        return combine_fn

    def _decoder_step(self, g: Graph, y: Node, state: Node, combine_fn):
        if isinstance(self.decoder_params, tuple):
            return decoder_step_cgru(g, y, state, self.decoder_params, combine_fn)
        return decoder_step_plain(g, y, state, self.decoder_params, combine_fn)

    def _readout(self, g: Graph, state: Node, context: Node) -> Node:
        return g.affine(g.leaf(self.out_weight),
                        g.concat_rows([state, context]),
                        g.leaf(self.out_bias))


def _encode_tokens(vocab: Vocab, tokens, where: str) -> list[int]:
    ids = []
    for pos, tok in enumerate(tokens):
        try:
            ids.append(vocab.id(tok))
        except DataError:
            raise DataError(f"out-of-vocabulary token {tok!r} at {where} position {pos}")
    return ids


def forward_loss(g: Graph, model: MultiSourceModel,
                 batch: list[ParallelExample]) -> tuple[Node, list[AttentionTrace]]:
    """Teacher-forced mean cross-entropy over every target token of the batch
    (end-of-sequence included), plus one attention trace per example."""
    if not batch:
        raise DataError("empty batch")
    token_losses: list[Node] = []
    traces: list[AttentionTrace] = []
    for ex in batch:
        if not ex.target:
            raise DataError("empty target sequence")
        target_ids = _encode_tokens(model.target_vocab, ex.target, "target")
        encoders = model.encode_sources(g, ex.sources)
        combine_fn = model.make_combine_fn(encoders)

        input_ids = [EOS_ID] + target_ids
        labels = target_ids + [EOS_ID]
        embedded = g.embedding_lookup(g.leaf(model.target_embedding), input_ids)
        state = g.constant([0.0] * model.config.hidden_dim)
        trace = AttentionTrace(encoder_labels=model.encoder_labels(),
                               include_sentinel=model.config.combination.use_sentinel)
        for step, label in enumerate(labels):
            y = g.take_row(embedded, step)
            state, combined = model._decoder_step(g, y, state, combine_fn)
            probs = g.softmax(model._readout(g, state, combined.context))
            token_losses.append(g.cross_entropy(probs, label))
            trace.rows.append(TraceRow(step=step,
                                       token=model.target_vocab.token(label),
                                       masses=combined.encoder_masses))
        traces.append(trace)
    loss = g.scale(g.add_n(token_losses), 1.0 / len(token_losses))
    return loss, traces


def greedy_decode(model: MultiSourceModel, sources: list,
                  max_len: int) -> tuple[list[str], AttentionTrace]:
    """Argmax decoding (ties resolved toward the lowest token id) until the
    end-of-sequence token or `max_len` steps. The trace records every step
    taken, including the one that emitted end-of-sequence."""
    if max_len < 1:
        raise DataError(f"max_len must be >= 1, got {max_len}")
    g = Graph(recording=False)
    encoders = model.encode_sources(g, sources)
    combine_fn = model.make_combine_fn(encoders)
    state = g.constant([0.0] * model.config.hidden_dim)
    trace = AttentionTrace(encoder_labels=model.encoder_labels(),
                           include_sentinel=model.config.combination.use_sentinel)
    tokens: list[str] = []
    prev_id = EOS_ID
    embedding = g.leaf(model.target_embedding)
    for step in range(max_len):
        y = g.take_row(g.embedding_lookup(embedding, [prev_id]), 0)
        state, combined = model._decoder_step(g, y, state, combine_fn)
        logits = model._readout(g, state, combined.context)
        token_id = int(np.argmax(logits.value))
        trace.rows.append(TraceRow(step=step,
                                   token=model.target_vocab.token(token_id),
                                   masses=combined.encoder_masses))
        if token_id == EOS_ID:
            break
        tokens.append(model.target_vocab.token(token_id))
        prev_id = token_id
    return tokens, trace


def evaluate_loss(model: MultiSourceModel, examples: list[ParallelExample],
                  batch_size: int = 32) -> float:
    """Token-mean cross-entropy over a whole example list (forward only)."""
    if not examples:
        raise DataError("empty example list")
    total = 0.0
    tokens = 0
    for start in range(0, len(examples), batch_size):
        batch = examples[start:start + batch_size]
        g = Graph(recording=False)
        loss, _ = forward_loss(g, model, batch)
        n = sum(len(ex.target) + 1 for ex in batch)
        total += float(loss.value) * n
        tokens += n
    return total / tokens


# --------------------------------------------------------------------------- #
# checkpoints

CHECKPOINT_MAGIC = b"MATN"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Corrupt, truncated, or incompatible checkpoint payload."""


def save_checkpoint(model: MultiSourceModel) -> bytes:
    params = model.parameters()
    header = {
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "seed": model.seed,
        "source_vocabs": [v.tokens if v is not None else None
                          for v in model.source_vocabs],
        "target_vocab": model.target_vocab.tokens,
        "params": [{"name": p.name, "shape": list(p.shape)} for p in params],
    }
    header_bytes = json.dumps(header, sort_keys=True,
                              separators=(",", ":")).encode("utf-8")
    body = b"".join(np.ascontiguousarray(p.value, dtype="<f8").tobytes()
                    for p in params)
    payload = (CHECKPOINT_MAGIC + struct.pack("<I", CHECKPOINT_VERSION)
               + struct.pack("<Q", len(header_bytes)) + header_bytes + body)
    return payload + hashlib.sha256(payload).digest()


def load_checkpoint(data: bytes) -> MultiSourceModel:
    if len(data) < len(CHECKPOINT_MAGIC) + 12 + 32:
        raise CheckpointError("checkpoint truncated")
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint (bad magic bytes)")
    payload, checksum = data[:-32], data[-32:]
    if hashlib.sha256(payload).digest() != checksum:
        raise CheckpointError("checkpoint corrupt (checksum mismatch)")
    version = struct.unpack("<I", data[4:8])[0]
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header_len = struct.unpack("<Q", data[8:16])[0]
    header_end = 16 + header_len
    if header_end > len(payload):
        raise CheckpointError("checkpoint truncated inside header")
    try:
        header = json.loads(data[16:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"checkpoint header unreadable: {e}") from e

    config = ModelConfig.from_dict(header["config"])
    source_vocabs = [Vocab.from_tokens(v) if v is not None else None
                     for v in header["source_vocabs"]]
    target_vocab = Vocab.from_tokens(header["target_vocab"])
    model = MultiSourceModel(config, source_vocabs, target_vocab,
                             seed=header.get("seed", 0))

    params = {p.name: p for p in model.parameters()}
    manifest = header["params"]
    if set(params) != {entry["name"] for entry in manifest}:
        raise CheckpointError("checkpoint parameter manifest does not match the config")
    offset = header_end
    for entry in manifest:
        p = params[entry["name"]]
        shape = tuple(entry["shape"])
        if shape != p.shape:
            raise CheckpointError(
                f"parameter {entry['name']} has shape {shape} in the checkpoint "
                f"but {p.shape} in the rebuilt model")
        nbytes = p.size * 8
        chunk = payload[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError("checkpoint truncated inside parameter payload")
        values = np.frombuffer(chunk, dtype="<f8").reshape(shape)
        if not np.isfinite(values).all():
            raise NonFiniteError(f"checkpoint parameter {entry['name']} is non-finite")
        p.value[...] = values
        offset += nbytes
    if offset != len(payload):
        raise CheckpointError("checkpoint has trailing bytes after parameters")
    return model


def vocab_digest(model: MultiSourceModel) -> str:
    payload = json.dumps([v.tokens if v is not None else None
                          for v in model.source_vocabs]
                         + [model.target_vocab.tokens],
                         sort_keys=True).encode("utf-8")
    return hashlib.sha256(payload).hexdigest()
