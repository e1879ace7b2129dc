"""Synthetic desk-scale datasets, the edit-operation codec, and dataset files.

Two generators stand in for the full-size tasks:

* masked copy: source A is the target with a random subset of positions
  replaced by a mask token; source B lists the masked-out tokens, each
  preceded by a positional marker. Recovering the target needs both sources,
  so the per-encoder attention behaviour is observable and an analytic
  accuracy ceiling exists for single-source ablations.
* toy post-editing: source A is a clean token sequence, source B a seeded
  corruption of it (substitutions, deletions, insertions), and the target is
  the minimal keep/delete/insert sequence rewriting B into A.

Dataset files are JSON lines: one header record carrying the schema version,
task name, per-source descriptors, and vocabularies, then one record per
example. Everything is a pure function of (seed, parameters).
"""

from __future__ import annotations

import json
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import DataError, SeededRng

PAD_ID = 0
EOS_ID = 1
UNK_ID = 2
RESERVED_TOKENS = ("<pad>", "<eos>", "<unk>")

DATASET_FORMAT = "multiattn-dataset"
DATASET_VERSION = 1


class Vocab:
    """Token <-> id bijection with fixed reserved ids 0..2."""

    def __init__(self, content_tokens):
        tokens = list(RESERVED_TOKENS) + list(content_tokens)
        ids: dict[str, int] = {}
        for i, tok in enumerate(tokens):
            if tok in ids:
                raise DataError(f"duplicate vocabulary token {tok!r}")
            ids[tok] = i
        self._tokens = tokens
        self._ids = ids

    @classmethod
    def from_tokens(cls, tokens: list[str]) -> "Vocab":
        """Rebuild from a full token list (reserved entries included)."""
        if tuple(tokens[:3]) != RESERVED_TOKENS:
            raise DataError(f"vocabulary does not start with {RESERVED_TOKENS}")
        return cls(tokens[3:])

    @property
    def tokens(self) -> list[str]:
        return list(self._tokens)

    def __len__(self) -> int:
        return len(self._tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self._tokens == other._tokens

    def id(self, token: str) -> int:
        i = self._ids.get(token)
        if i is None:
            raise DataError(f"out-of-vocabulary token {token!r}")
        return i

    def token(self, i: int) -> str:
        return self._tokens[i]

    def encode(self, tokens) -> list[int]:
        return [self.id(t) for t in tokens]

    def decode(self, ids) -> list[str]:
        return [self._tokens[i] for i in ids]

    def digest(self) -> str:
        payload = json.dumps(self._tokens, sort_keys=True).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()


@dataclass
class ParallelExample:
    """One training/eval item: N sources (token lists or feature grids), a
    target token list, and an optional annotation naming the source index
    that specific target positions depend on."""

    sources: list
    target: list[str]
    annotation: dict | None = None


@dataclass(frozen=True)
class EditOp:
    kind: str                 # "keep" | "delete" | "insert"
    token: str | None = None

    def __post_init__(self):
        if self.kind not in ("keep", "delete", "insert"):
            raise DataError(f"unknown edit op kind {self.kind!r}")
        if (self.kind == "insert") != (self.token is not None):
            raise DataError(f"insert ops carry a token, others must not: {self!r}")


KEEP = EditOp("keep")
DELETE = EditOp("delete")


def insert_op(token: str) -> EditOp:
    return EditOp("insert", token)


def op_token(op: EditOp) -> str:
    """Single-token encoding of an edit op for the decoder vocabulary."""
    if op.kind == "keep":
        return "<keep>"
    if op.kind == "delete":
        return "<delete>"
    return f"<ins:{op.token}>"


def token_op(token: str) -> EditOp:
    if token == "<keep>":
        return KEEP
    if token == "<delete>":
        return DELETE
    if token.startswith("<ins:") and token.endswith(">"):
        return insert_op(token[5:-1])
    raise DataError(f"not an edit-op token: {token!r}")


def encode_edits(mt: list[str], ref: list[str]) -> list[EditOp]:
    """Minimal keep/delete/insert sequence rewriting `mt` into `ref`.

    Costs are keep 0, delete 1, insert 1; a substitution is delete+insert.
    Ties are broken preferring keep over delete over insert at each cell, so
    the result is deterministic.
    """
    m, n = len(mt), len(ref)
    cost = np.zeros((m + 1, n + 1), dtype=np.int64)
    cost[:, 0] = np.arange(m + 1)
    cost[0, :] = np.arange(n + 1)
    for i in range(1, m + 1):
        for j in range(1, n + 1):
            best = cost[i, j - 1] + 1                      # insert ref[j-1]
            delete = cost[i - 1, j] + 1
            if delete < best:
                best = delete
            if mt[i - 1] == ref[j - 1] and cost[i - 1, j - 1] < best:
                best = cost[i - 1, j - 1]
            cost[i, j] = best

    ops: list[EditOp] = []
    i, j = m, n
    while i > 0 or j > 0:
        if i > 0 and j > 0 and mt[i - 1] == ref[j - 1] and cost[i, j] == cost[i - 1, j - 1]:
            ops.append(KEEP)
            i -= 1
            j -= 1
        elif i > 0 and cost[i, j] == cost[i - 1, j] + 1:
            ops.append(DELETE)
            i -= 1
        else:
            ops.append(insert_op(ref[j - 1]))
            j -= 1
    ops.reverse()
    return ops


def apply_edits(mt: list[str], ops: list[EditOp]) -> list[str]:
    """Replay ops left to right: keep copies the next `mt` token, delete
    skips it, insert emits its own token. The keep+delete count must consume
    `mt` exactly."""
    out: list[str] = []
    i = 0
    for op in ops:
        if op.kind == "insert":
            out.append(op.token)
        else:
            if i >= len(mt):
                raise DataError(
                    f"too many keep/delete ops: source has {len(mt)} tokens")
            if op.kind == "keep":
                out.append(mt[i])
            i += 1
    if i != len(mt):
        raise DataError(f"too few keep/delete ops: consumed {i} of {len(mt)} tokens")
    return out


def apply_edits_lenient(mt: list[str], ops: list[EditOp]) -> list[str]:
    """Forgiving replay for decoded op sequences: keep/delete past the end of
    the source are ignored, and leftover source tokens are copied through."""
    out: list[str] = []
    i = 0
    for op in ops:
        if op.kind == "insert":
            out.append(op.token)
        elif i < len(mt):
            if op.kind == "keep":
                out.append(mt[i])
            i += 1
    out.extend(mt[i:])
    return out


@dataclass
class Dataset:
    task: str
    source_specs: list[dict]
    source_vocabs: list[Vocab | None]
    target_vocab: Vocab
    examples: list[ParallelExample]
    meta: dict = field(default_factory=dict)


def content_words(vocab_size: int) -> list[str]:
    return [f"w{i:02d}" for i in range(vocab_size)]


def _random_word(rng: SeededRng, words: list[str]) -> str:
    return words[rng.randint(len(words))]


def gen_masked_copy(seed: int, n: int, len_range: tuple[int, int] = (8, 12),
                    vocab_size: int = 20, mask_rate: float = 0.3) -> Dataset:
    """Masked-copy dataset; see the module docstring.

    The annotation lists the masked target positions, which only source B
    (index 1) can resolve. A single-source-A model therefore has an accuracy
    ceiling of 1 - mask_rate + mask_rate/vocab_size.
    """
    if not 0.0 < mask_rate < 1.0:
        raise DataError(f"mask_rate must lie in (0, 1), got {mask_rate}")
    lo, hi = len_range
    if not (1 <= lo <= hi):
        raise DataError(f"invalid length range {len_range}")
    if vocab_size < 2 or n < 1:
        raise DataError(f"need vocab_size >= 2 and n >= 1, got {vocab_size}, {n}")

    rng = SeededRng(seed)
    words = content_words(vocab_size)
    markers = [f"<p{j}>" for j in range(hi)]
    vocab = Vocab(words + ["<mask>"] + markers + ["<none>"])

    examples = []
    for _ in range(n):
        length = lo + rng.randint(hi - lo + 1)
        target = [_random_word(rng, words) for _ in range(length)]
        masked = [j for j in range(length) if rng.uniform() < mask_rate]
        masked_set = set(masked)
        src_a = ["<mask>" if j in masked_set else target[j] for j in range(length)]
        src_b: list[str] = []
        for j in masked:
            src_b.extend([markers[j], target[j]])
        if not src_b:
            src_b = ["<none>"]
        examples.append(ParallelExample(
            sources=[src_a, src_b], target=target,
            annotation={"source": 1, "positions": masked}))
    meta = {"seed": seed, "n": n, "len_range": list(len_range),
            "vocab_size": vocab_size, "mask_rate": mask_rate}
    return Dataset(task="masked_copy",
                   source_specs=[{"kind": "text"}, {"kind": "text"}],
                   source_vocabs=[vocab, vocab], target_vocab=vocab,
                   examples=examples, meta=meta)


def gen_toy_ape(seed: int, n: int, len_range: tuple[int, int] = (8, 12),
                vocab_size: int = 20, sub_rate: float = 0.05,
                del_rate: float = 0.03, ins_rate: float = 0.03) -> Dataset:
    """Toy post-editing dataset; see the module docstring.

    Targets are edit-op token sequences; expected non-keep ops per sentence
    is roughly mean_length * (2*sub_rate + del_rate + ins_rate) since a
    substitution costs a delete plus an insert.
    """
    for name, rate in (("sub_rate", sub_rate), ("del_rate", del_rate),
                       ("ins_rate", ins_rate)):
        if not 0.0 <= rate < 1.0:
            raise DataError(f"{name} must lie in [0, 1), got {rate}")
    if sub_rate + del_rate >= 1.0:
        raise DataError("sub_rate + del_rate must stay below 1")
    lo, hi = len_range
    if not (1 <= lo <= hi) or vocab_size < 2 or n < 1:
        raise DataError(f"invalid generator arguments {len_range}, {vocab_size}, {n}")

    rng = SeededRng(seed)
    words = content_words(vocab_size)
    src_vocab = Vocab(words)
    tgt_vocab = Vocab(["<keep>", "<delete>"] + [f"<ins:{w}>" for w in words])

    examples = []
    for _ in range(n):
        length = lo + rng.randint(hi - lo + 1)
        clean = [_random_word(rng, words) for _ in range(length)]
        corrupted: list[str] = []
        while not corrupted:  # all-deleted draws are re-rolled; encoders need input
            for tok in clean:
                u = rng.uniform()
                if u < del_rate:
                    pass
                elif u < del_rate + sub_rate:
                    others = [w for w in words if w != tok]
                    corrupted.append(others[rng.randint(len(others))])
                else:
                    corrupted.append(tok)
                if rng.uniform() < ins_rate:
                    corrupted.append(_random_word(rng, words))
        ops = encode_edits(corrupted, clean)
        examples.append(ParallelExample(
            sources=[clean, corrupted],
            target=[op_token(op) for op in ops]))
    meta = {"seed": seed, "n": n, "len_range": list(len_range),
            "vocab_size": vocab_size, "sub_rate": sub_rate,
            "del_rate": del_rate, "ins_rate": ins_rate}
    return Dataset(task="toy_ape",
                   source_specs=[{"kind": "text"}, {"kind": "text"}],
                   source_vocabs=[src_vocab, src_vocab], target_vocab=tgt_vocab,
                   examples=examples, meta=meta)


# --------------------------------------------------------------------------- #
# dataset files


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _source_to_json(src):
    if isinstance(src, np.ndarray):
        return {"grid": [[float(x) for x in row] for row in src]}
    return list(src)


def _source_from_json(src):
    if isinstance(src, dict):
        if "grid" not in src:
            raise DataError(f"unknown source record {src!r}")
        return np.asarray(src["grid"], dtype=np.float64)
    return [str(t) for t in src]


def save_dataset(path, dataset: Dataset) -> None:
    header = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "task": dataset.task,
        "sources": dataset.source_specs,
        "source_vocabs": [v.tokens if v is not None else None
                          for v in dataset.source_vocabs],
        "target_vocab": dataset.target_vocab.tokens,
        "meta": dataset.meta,
    }
    lines = [_dumps(header)]
    for ex in dataset.examples:
        record = {"sources": [_source_to_json(s) for s in ex.sources],
                  "target": list(ex.target)}
        if ex.annotation is not None:
            record["annotation"] = ex.annotation
        lines.append(_dumps(record))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_dataset(path) -> Dataset:
    text = Path(path).read_text(encoding="utf-8")
    lines = [line for line in text.split("\n") if line.strip()]
    if not lines:
        raise DataError(f"empty dataset file {path}")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise DataError(f"bad dataset header in {path}: {e}") from e
    if header.get("format") != DATASET_FORMAT:
        raise DataError(f"not a dataset file: {path}")
    if header.get("version") != DATASET_VERSION:
        raise DataError(
            f"unsupported dataset version {header.get('version')} in {path}")
    source_vocabs = [Vocab.from_tokens(v) if v is not None else None
                     for v in header["source_vocabs"]]
    examples = []
    for line_no, line in enumerate(lines[1:], start=2):
        try:
            record = json.loads(line)
        except json.JSONDecodeError as e:
            raise DataError(f"bad record at {path}:{line_no}: {e}") from e
        examples.append(ParallelExample(
            sources=[_source_from_json(s) for s in record["sources"]],
            target=[str(t) for t in record["target"]],
            annotation=record.get("annotation")))
    return Dataset(task=header["task"], source_specs=header["sources"],
                   source_vocabs=source_vocabs,
                   target_vocab=Vocab.from_tokens(header["target_vocab"]),
                   examples=examples, meta=header.get("meta", {}))
