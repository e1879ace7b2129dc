"""Command-line entry point.

Subcommands: gen-data, train, eval, inspect-attention, gradcheck. Every
command is deterministic given its flags and seed. Exit codes: 0 success,
1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import graph as graph_mod
from .combination import CombinationConfig
from .core import ConfigError, DataError, SeededRng
from .graph import Graph, finite_difference_check
from .heatmap import write_pgm
from .metrics import bleu, corpus_ter_noshift, token_accuracy
from .model import (CheckpointError, ModelConfig, MultiSourceModel, SourceConfig,
                    forward_loss, greedy_decode, load_checkpoint, vocab_digest)
from .tasks import (Dataset, ParallelExample, Vocab, apply_edits_lenient,
                    gen_masked_copy, gen_toy_ape, load_dataset, save_dataset,
                    token_op)
from .training import TrainConfig, decode_max_len, train

_MODEL_KEYS = {"embed_dim", "hidden_dim", "attn_dim", "ctx_dim", "decoder",
               "strategy", "share_projections", "use_sentinel"}
_TRAIN_KEYS = {"learning_rate", "beta1", "beta2", "eps", "batch_size", "max_steps",
               "validation_interval", "patience", "target_valid_accuracy"}
_TOP_KEYS = {"seed", "out_dir", "data", "model", "train"}
_DATA_KEYS = {"train", "valid", "test"}


def _load_config_file(path: str) -> dict:
    try:
        raw = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    try:
        cfg = json.loads(raw)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    if not isinstance(cfg, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    _reject_unknown(cfg, _TOP_KEYS, "config")
    _reject_unknown(cfg.get("model", {}), _MODEL_KEYS, "config.model")
    _reject_unknown(cfg.get("train", {}), _TRAIN_KEYS, "config.train")
    _reject_unknown(cfg.get("data", {}), _DATA_KEYS, "config.data")
    return cfg


def _reject_unknown(section, allowed: set[str], where: str) -> None:
    if not isinstance(section, dict):
        raise ConfigError(f"{where} must be a JSON object")
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")


def _apply_overrides(cfg: dict, args) -> dict:
    model = dict(cfg.get("model", {}))
    if args.strategy is not None:
        model["strategy"] = args.strategy
    if args.share:
        model["share_projections"] = True
    if args.sentinel:
        model["use_sentinel"] = True
    if args.decoder is not None:
        model["decoder"] = args.decoder
    cfg = dict(cfg)
    cfg["model"] = model
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out is not None:
        cfg["out_dir"] = args.out
    return cfg


def _dataset_path(cfg: dict, split: str) -> str:
    data = cfg.get("data", {})
    path = data.get(split)
    if not path:
        raise ConfigError(f"config.data.{split} is required")
    if not Path(path).exists():
        raise ConfigError(f"data file not found: {path}")
    return path


def _build_model_from_dataset(cfg: dict, dataset: Dataset) -> MultiSourceModel:
    model_cfg = cfg.get("model", {})
    combination = CombinationConfig(
        strategy=model_cfg.get("strategy", "concat"),
        share_projections=bool(model_cfg.get("share_projections", False)),
        use_sentinel=bool(model_cfg.get("use_sentinel", False)),
        ctx_dim=model_cfg.get("ctx_dim"))
    sources = []
    for spec in dataset.source_specs:
        if spec.get("kind") == "grid":
            sources.append(SourceConfig(kind="grid", feature_dim=spec["feature_dim"]))
        else:
            sources.append(SourceConfig(kind="text"))
    config = ModelConfig(
        sources=sources, combination=combination,
        embed_dim=int(model_cfg.get("embed_dim", 32)),
        hidden_dim=int(model_cfg.get("hidden_dim", 32)),
        attn_dim=int(model_cfg.get("attn_dim", 64)),
        decoder=model_cfg.get("decoder", "gru"))
    seed = int(cfg.get("seed", 0))
    return MultiSourceModel(config, dataset.source_vocabs, dataset.target_vocab, seed)


# --------------------------------------------------------------------------- #
# gen-data


def cmd_gen_data(args) -> int:
    sizes = {"train": args.train_size, "valid": args.valid_size, "test": args.test_size}
    for split, n in sizes.items():
        if n < 1:
            raise ConfigError(f"--{split}-size must be >= 1, got {n}")
    total = sum(sizes.values())
    if args.task == "masked-copy":
        dataset = gen_masked_copy(args.seed, total, (args.min_len, args.max_len),
                                  args.vocab_size, args.mask_rate)
    else:
        dataset = gen_toy_ape(args.seed, total, (args.min_len, args.max_len),
                              args.vocab_size, args.sub_rate, args.del_rate,
                              args.ins_rate)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    offset = 0
    for split in ("train", "valid", "test"):
        n = sizes[split]
        part = Dataset(task=dataset.task, source_specs=dataset.source_specs,
                       source_vocabs=dataset.source_vocabs,
                       target_vocab=dataset.target_vocab,
                       examples=dataset.examples[offset:offset + n],
                       meta={**dataset.meta, "split": split, "size": n})
        save_dataset(out / f"{split}.jsonl", part)
        offset += n
    print(f"wrote {total} examples to {out} "
          f"(train {sizes['train']}, valid {sizes['valid']}, test {sizes['test']})")
    return 0


# --------------------------------------------------------------------------- #
# train


def cmd_train(args) -> int:
    cfg = _apply_overrides(_load_config_file(args.config), args)
    out_dir = cfg.get("out_dir")
    if not out_dir:
        raise ConfigError("config.out_dir (or --out) is required for training")
    train_set = load_dataset(_dataset_path(cfg, "train"))
    valid_set = load_dataset(_dataset_path(cfg, "valid"))

    model = _build_model_from_dataset(cfg, train_set)
    train_cfg_dict = dict(cfg.get("train", {}))
    train_cfg_dict["seed"] = int(cfg.get("seed", 0))
    train_cfg = TrainConfig(**train_cfg_dict)

    result = train(model, train_set.examples, valid_set.examples, train_cfg,
                   out_dir=out_dir)
    last = result.curves[-1] if result.curves else None
    print(f"trained {result.steps_run} steps ({result.stop_reason}); "
          f"best validation loss {result.best_valid_loss:.6f} at step {result.best_step}")
    if last is not None:
        print(f"final row: step {last.step} train {last.train_loss:.6f} "
              f"valid {last.valid_loss:.6f} accuracy {last.valid_accuracy:.4f}")
    print(f"outputs in {out_dir}: curves.tsv, model.ckpt")
    return 0


# --------------------------------------------------------------------------- #
# eval


def _decode_corpus(model: MultiSourceModel, examples, max_len: int) -> list[list[str]]:
    workers = int(os.environ.get("MULTIATTN_THREADS", "1") or "1")
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(
                lambda ex: greedy_decode(model, ex.sources, max_len)[0], examples))
    return [greedy_decode(model, ex.sources, max_len)[0] for ex in examples]


def evaluate_checkpoint(model: MultiSourceModel, dataset: Dataset,
                        max_len: int | None = None) -> dict:
    """Decode a dataset and score it. For edit-op targets the decoded ops are
    also applied to the second source and scored against the first (the
    reference reconstruction), alongside the do-nothing baseline."""
    examples = dataset.examples
    if max_len is None:
        max_len = decode_max_len(examples)
    hyps = _decode_corpus(model, examples, max_len)
    refs = [ex.target for ex in examples]
    record = {
        "examples": len(examples),
        "token_accuracy": token_accuracy(hyps, refs),
        "bleu": bleu(hyps, refs),
        "ter_noshift": corpus_ter_noshift(hyps, refs),
    }
    if dataset.task == "toy_ape":
        applied = []
        gold = []
        baseline = []
        for hyp, ex in zip(hyps, examples):
            ops = []
            for t in hyp:
                try:
                    ops.append(token_op(t))
                except DataError:
                    pass  # stray non-op tokens contribute nothing
            applied.append(apply_edits_lenient(ex.sources[1], ops))
            gold.append(ex.sources[0])
            baseline.append(ex.sources[1])
        record["ter_applied"] = corpus_ter_noshift(applied, gold)
        record["ter_do_nothing"] = corpus_ter_noshift(baseline, gold)
    return record


def cmd_eval(args) -> int:
    try:
        payload = Path(args.checkpoint).read_bytes()
    except OSError as e:
        raise ConfigError(f"cannot read checkpoint {args.checkpoint}: {e}") from e
    model = load_checkpoint(payload)
    if not Path(args.data).exists():
        raise ConfigError(f"data file not found: {args.data}")
    dataset = load_dataset(args.data)

    expected = MultiSourceModel(model.config, dataset.source_vocabs,
                                dataset.target_vocab, seed=0)
    if vocab_digest(model) != vocab_digest(expected):
        raise DataError(
            f"vocabulary hash mismatch: checkpoint {vocab_digest(model)[:12]} vs "
            f"dataset {vocab_digest(expected)[:12]}")

    record = evaluate_checkpoint(model, dataset, args.max_len)
    text = json.dumps(record, sort_keys=True, indent=2)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    return 0


# --------------------------------------------------------------------------- #
# inspect-attention


def cmd_inspect_attention(args) -> int:
    model = load_checkpoint(Path(args.checkpoint).read_bytes())
    if not Path(args.data).exists():
        raise ConfigError(f"data file not found: {args.data}")
    dataset = load_dataset(args.data)
    if not (0 <= args.index < len(dataset.examples)):
        raise ConfigError(
            f"--index {args.index} out of range (dataset has {len(dataset.examples)})")
    example = dataset.examples[args.index]
    max_len = args.max_len or decode_max_len([example])
    tokens, trace = greedy_decode(model, example.sources, max_len)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    labels = trace.column_labels
    lines = ["\t".join(["step", "token"] + labels)]
    for row in trace.rows:
        lines.append("\t".join([str(row.step), row.token]
                               + [repr(float(m)) for m in row.masses]))
    (out / "trace.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    write_pgm(out / "heatmap.pgm", trace.mass_matrix())
    print(f"decoded: {' '.join(tokens)}")
    print(f"wrote {out / 'trace.tsv'} and {out / 'heatmap.pgm'} "
          f"({len(trace.rows)} steps x {len(labels)} columns)")
    return 0


# --------------------------------------------------------------------------- #
# gradcheck


def cmd_gradcheck(args) -> int:
    if os.environ.get("MULTIATTN_CORRUPT_ADJOINT"):
        graph_mod.set_adjoint_corruption(True)
    try:
        combination = CombinationConfig(
            strategy=args.strategy or "flat",
            share_projections=args.share, use_sentinel=args.sentinel)
        config = ModelConfig(
            sources=[SourceConfig(kind="text"), SourceConfig(kind="text")],
            combination=combination, embed_dim=3, hidden_dim=4, attn_dim=5,
            decoder=args.decoder or "gru")
        vocab = Vocab([f"w{i}" for i in range(4)])
        model = MultiSourceModel(config, [vocab, vocab], vocab, seed=args.seed or 0)

        # Check at a generic point: freshly built models hold zeros (biases,
        # scoring vectors) that would leave some gradient paths trivially 0.
        jitter = SeededRng((args.seed or 0) + 7)
        for p in model.parameters():
            p.value += jitter.uniform_array(p.shape, -0.3, 0.3)

        rng = SeededRng((args.seed or 0) + 1)
        words = vocab.tokens[3:]
        example = ParallelExample(
            sources=[[words[rng.randint(len(words))] for _ in range(3)],
                     [words[rng.randint(len(words))] for _ in range(2)]],
            target=[words[rng.randint(len(words))] for _ in range(3)])

        def build(g: Graph):
            loss, _ = forward_loss(g, model, [example])
            return loss

        report = finite_difference_check(build, model.parameters(), eps=args.eps)
        for name in sorted(report.per_param):
            print(f"{name}\t{report.per_param[name]:.3e}")
        print(f"max relative error: {report.max_rel_error:.3e}")
        ok = report.max_rel_error < 1e-4
        print("PASS" if ok else "FAIL")
        return 0 if ok else 1
    finally:
        graph_mod.set_adjoint_corruption(False)


# --------------------------------------------------------------------------- #


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="multiattn",
        description="Multi-source sequence-to-sequence laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate synthetic dataset splits")
    p.add_argument("--task", choices=["masked-copy", "toy-ape"], required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-size", type=int, default=2000)
    p.add_argument("--valid-size", type=int, default=200)
    p.add_argument("--test-size", type=int, default=200)
    p.add_argument("--vocab-size", type=int, default=20)
    p.add_argument("--min-len", type=int, default=8)
    p.add_argument("--max-len", type=int, default=12)
    p.add_argument("--mask-rate", type=float, default=0.3)
    p.add_argument("--sub-rate", type=float, default=0.05)
    p.add_argument("--del-rate", type=float, default=0.03)
    p.add_argument("--ins-rate", type=float, default=0.03)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--strategy", choices=["concat", "flat", "hier"])
    p.add_argument("--share", action="store_true")
    p.add_argument("--sentinel", action="store_true")
    p.add_argument("--decoder", choices=["gru", "cgru"])
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--max-len", type=int)
    p.add_argument("--out", help="also write the JSON record here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect-attention",
                       help="decode one example and export its attention trace")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--max-len", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_inspect_attention)

    p = sub.add_parser("gradcheck",
                       help="finite-difference check of a tiny model")
    p.add_argument("--strategy", choices=["concat", "flat", "hier"])
    p.add_argument("--share", action="store_true")
    p.add_argument("--sentinel", action="store_true")
    p.add_argument("--decoder", choices=["gru", "cgru"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (DataError, CheckpointError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
