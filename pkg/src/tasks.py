"""Synthetic task generators.

Every generator is a pure function of its config: the same config (seed
included) yields a bit-identical batch. Labels are read at the position that
holds the cue, so `logits[:, p]` is scored against `labels[:, p]` wherever
`loss_mask[:, p]` is set.

Vocabulary layouts:
  mqar:            0 pad, keys [1, V/2), values [V/2, V)
  selective_copy:  0 noise, 1 delimiter, content [2, V)
  memorize:        every id in [0, V) maps to a fixed partner id
"""
import logging
from dataclasses import dataclass

import numpy as np

from src.errors import ConfigError
from src.schemas import MemorizeConfig, MqarConfig, SelectiveCopyConfig
from src.tensor import Tensor, make_rng

logger = logging.getLogger(__name__)

PAD = 0
NOISE = 0
DELIMITER = 1


@dataclass
class TaskBatch:
    tokens: np.ndarray  # [B, N] int64
    labels: np.ndarray  # [B, N] int64
    loss_mask: np.ndarray  # [B, N] bool

    def __post_init__(self):
        if not (self.tokens.shape == self.labels.shape == self.loss_mask.shape):
            raise ConfigError(
                f"batch arrays disagree: {self.tokens.shape} {self.labels.shape} {self.loss_mask.shape}"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return self.tokens.shape


def gen_mqar(cfg: MqarConfig) -> TaskBatch:
    """Key-value pairs first, then queries that repeat a key and are labeled with its value."""
    v_half = cfg.vocab_size // 2
    n_keys = v_half - 1
    if cfg.n_kv_pairs > n_keys or 2 * cfg.n_kv_pairs + cfg.n_queries > cfg.seq_len:
        raise ConfigError(f"infeasible MQAR layout: {cfg.model_dump()}")
    rng = make_rng(cfg.seed)
    B, N, n = cfg.batch_size, cfg.seq_len, cfg.n_kv_pairs
    tokens = np.full((B, N), PAD, dtype=np.int64)
    labels = np.zeros((B, N), dtype=np.int64)
    mask = np.zeros((B, N), dtype=bool)
    for b in range(B):
        keys = 1 + rng.choice(n_keys, size=n, replace=False)
        values = v_half + rng.choice(cfg.vocab_size - v_half, size=n, replace=True)
        asked = rng.choice(n, size=cfg.n_queries, replace=cfg.n_queries > n)
        if cfg.interleaved:
            _layout_interleaved(rng, tokens[b], labels[b], mask[b], keys, values, asked)
        else:
            tokens[b, 0 : 2 * n : 2] = keys
            tokens[b, 1 : 2 * n : 2] = values
            slots = 2 * n + np.sort(rng.choice(N - 2 * n, size=cfg.n_queries, replace=False))
            tokens[b, slots] = keys[asked]
            labels[b, slots] = values[asked]
            mask[b, slots] = True
    return TaskBatch(tokens, labels, mask)


def _layout_interleaved(rng, tokens, labels, mask, keys, values, asked) -> None:
    # Each query is inserted at a random point after its own pair.
    events: list[tuple[str, int]] = [("pair", j) for j in range(keys.size)]
    for j in asked:
        after = events.index(("pair", int(j))) + 1
        events.insert(int(rng.integers(after, len(events) + 1)), ("query", int(j)))
    pos = 0
    for kind, j in events:
        if kind == "pair":
            tokens[pos : pos + 2] = keys[j], values[j]
            pos += 2
        else:
            tokens[pos] = keys[j]
            labels[pos] = values[j]
            mask[pos] = True
            pos += 1


def gen_selective_copy(cfg: SelectiveCopyConfig) -> TaskBatch:
    """Content tokens scattered among noise, a delimiter, then the content replayed in order.

    The delimiter position is labeled with the first content token; each
    replayed token is labeled with the next one.
    """
    n, N = cfg.n_tokens_to_copy, cfg.seq_len
    if N < 2 * n:
        raise ConfigError(f"seq_len {N} cannot hold {n} tokens to copy")
    if cfg.vocab_size < 3:
        raise ConfigError(f"selective copy needs vocab >= 3, got {cfg.vocab_size}")
    rng = make_rng(cfg.seed)
    region = N - n  # input span; the delimiter sits at `region`
    tokens = np.full((cfg.batch_size, N), NOISE, dtype=np.int64)
    labels = np.zeros_like(tokens)
    mask = np.zeros(tokens.shape, dtype=bool)
    for b in range(cfg.batch_size):
        content = 2 + rng.integers(0, cfg.vocab_size - 2, size=n)
        slots = np.sort(rng.choice(region, size=n, replace=False))
        tokens[b, slots] = content
        tokens[b, region] = DELIMITER
        tokens[b, region + 1 : N] = content[:-1]
        labels[b, region:N] = content
        mask[b, region:N] = True
    return TaskBatch(tokens, labels, mask)


def memorize_mapping(vocab_size: int, mapping_seed: int, identity: bool = False) -> np.ndarray:
    """Fixed bijection of [0, vocab) drawn from `mapping_seed`."""
    if identity:
        return np.arange(vocab_size, dtype=np.int64)
    return make_rng(mapping_seed).permutation(vocab_size).astype(np.int64)


def gen_memorize(cfg: MemorizeConfig) -> TaskBatch:
    mapping = memorize_mapping(cfg.vocab_size, cfg.mapping_seed, cfg.identity)
    tokens = make_rng(cfg.seed).integers(0, cfg.vocab_size, size=(cfg.batch_size, cfg.seq_len), dtype=np.int64)
    return TaskBatch(tokens, mapping[tokens], np.ones(tokens.shape, dtype=bool))


GENERATORS = {
    "mqar": gen_mqar,
    "selective_copy": gen_selective_copy,
    "memorize": gen_memorize,
}


def generate(task: str, cfg) -> TaskBatch:
    if task not in GENERATORS:
        raise ConfigError(f"unknown task {task!r}")
    return GENERATORS[task](cfg)


@dataclass
class MaskedAccuracy:
    value: float
    n_masked: int
    empty_mask: bool = False


def masked_accuracy(logits, labels: np.ndarray, loss_mask: np.ndarray) -> MaskedAccuracy:
    """Fraction of masked positions whose argmax equals the label; 1.0 on an empty mask."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    mask = np.asarray(loss_mask, dtype=bool)
    if data.shape[:-1] != mask.shape or np.shape(labels) != mask.shape:
        raise ConfigError(f"logits {data.shape} do not match labels {np.shape(labels)} / mask {mask.shape}")
    n = int(mask.sum())
    if n == 0:
        logger.warning("masked_accuracy called with an empty mask; reporting 1.0")
        return MaskedAccuracy(1.0, 0, empty_mask=True)
    correct = np.argmax(data, axis=-1)[mask] == np.asarray(labels)[mask]
    return MaskedAccuracy(float(correct.mean()), n)
