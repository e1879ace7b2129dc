"""Multi-source sequence-to-sequence laboratory.

Small, fully deterministic reference stack: float64 tensors with reverse-mode
differentiation, additive attention with three multi-source combination
strategies (concat, flat, hierarchical) plus sentinel and projection-sharing
options, GRU encoders/decoders, synthetic tasks, metrics, and a CLI.
"""

from .attention import (AttentionOutput, AttentionParams, SentinelParams, attend,
                        attention_energies, sentinel_energy, sentinel_gate,
                        sentinel_vector)
from .combination import (CombinationConfig, CombinedOutput, ConcatAttentionParams,
                          MultiAttentionParams, build_combination_params, combine,
                          combine_concat, combine_flat, combine_hierarchical)
from .core import (ConfigError, DataError, NonFiniteError, Parameter, SeededRng,
                   ShapeMismatchError, Tensor)
from .graph import FdReport, Graph, GraphError, Node, finite_difference_check
from .metrics import bleu, corpus_ter_noshift, levenshtein, ter_noshift, token_accuracy
from .model import (AttentionTrace, CheckpointError, ModelConfig, MultiSourceModel,
                    SourceConfig, TraceRow, evaluate_loss, forward_loss,
                    greedy_decode, load_checkpoint, save_checkpoint)
from .recurrent import (EncoderStates, GruParams, build_gru_params,
                        decoder_step_cgru, decoder_step_plain,
                        encode_bidirectional, gru_step)
from .tasks import (DELETE, KEEP, Dataset, EditOp, ParallelExample, Vocab,
                    apply_edits, apply_edits_lenient, encode_edits, gen_masked_copy,
                    gen_toy_ape, insert_op, load_dataset, op_token, save_dataset,
                    token_op)
from .training import AdamState, CurveRow, TrainConfig, TrainResult, adam_step, train

__version__ = "0.1.0"
