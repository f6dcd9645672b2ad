"""Synthetic token corpus drawn from a seeded order-k Markov chain.

The transition table has one row per context (V**order of them), each a
Dirichlet draw, so the chain is learnable but not trivial. Its entropy rate
is the floor any model's eval loss can reach.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAX_CONTEXTS = 1 << 20


@dataclass(frozen=True)
class DataConfig:
    seed: int = 0
    vocab: int = 64
    markov_order: int = 1
    corpus_tokens: int = 200_000
    concentration: float = 0.1
    eval_fraction: float = 0.1

    def __post_init__(self):
        if self.vocab < 2:
            raise ValueError(f"vocab must be >= 2, got {self.vocab}")
        if self.markov_order < 1:
            raise ValueError(f"markov_order must be >= 1, got {self.markov_order}")
        if self.vocab ** self.markov_order > MAX_CONTEXTS:
            raise ValueError(
                f"vocab ** markov_order = {self.vocab ** self.markov_order} contexts exceeds {MAX_CONTEXTS}"
            )
        if self.corpus_tokens < 2:
            raise ValueError(f"corpus_tokens must be >= 2, got {self.corpus_tokens}")
        if self.concentration <= 0:
            raise ValueError(f"concentration must be > 0, got {self.concentration}")
        if not 0 < self.eval_fraction < 1:
            raise ValueError(f"eval_fraction must be in (0, 1), got {self.eval_fraction}")


def _draw_table(rng: np.random.Generator, vocab: int, order: int, concentration: float) -> np.ndarray:
    table = rng.dirichlet(np.full(vocab, concentration), size=vocab ** order)
    # Dirichlet rows with tiny concentration can underflow to all zeros.
    sums = table.sum(axis=1, keepdims=True)
    empty = sums[:, 0] == 0
    table[empty] = 1.0 / vocab
    return table / table.sum(axis=1, keepdims=True)


def markov_table(seed: int, vocab: int, order: int = 1, concentration: float = 0.1) -> np.ndarray:
    """The (V**order, V) row-stochastic table gen_corpus samples from for this seed."""
    return _draw_table(np.random.default_rng(seed), vocab, order, concentration)


def gen_corpus(
    seed: int,
    vocab: int,
    order: int,
    length: int,
    concentration: float = 0.1,
) -> np.ndarray:
    """Token ids of the chain; identical for identical arguments."""
    if vocab < 2:
        raise ValueError(f"vocab must be >= 2, got {vocab}")
    if order < 1:
        raise ValueError(f"order must be >= 1, got {order}")
    rng = np.random.default_rng(seed)
    table = _draw_table(rng, vocab, order, concentration)
    cdf = np.cumsum(table, axis=1)
    n_contexts = vocab ** order

    tokens = np.empty(length, dtype=np.int64)
    head = rng.integers(0, vocab, size=min(order, length))
    tokens[: len(head)] = head
    context = 0
    for t in head:
        context = (context * vocab + int(t)) % n_contexts

    draws = rng.random(max(length - order, 0))
    for i, u in enumerate(draws, start=order):
        token = min(int(np.searchsorted(cdf[context], u, side="right")), vocab - 1)
        tokens[i] = token
        context = (context * vocab + token) % n_contexts
    return tokens


def stationary_distribution(table: np.ndarray, order: int, tol: float = 1e-13, max_iter: int = 100_000) -> np.ndarray:
    """Context distribution of the chain, by power iteration from uniform."""
    n_contexts, vocab = table.shape
    if n_contexts != vocab ** order:
        raise ValueError(f"table has {n_contexts} rows, expected {vocab}**{order}")
    successor = (np.arange(n_contexts)[:, None] * vocab + np.arange(vocab)[None, :]) % n_contexts
    pi = np.full(n_contexts, 1.0 / n_contexts)
    for _ in range(max_iter):
        nxt = np.bincount(successor.ravel(), weights=(pi[:, None] * table).ravel(), minlength=n_contexts)
        # Average with the previous iterate so periodic chains still converge.
        nxt = 0.5 * (pi + nxt)
        if np.abs(nxt - pi).sum() < tol:
            return nxt
        pi = nxt
    return pi


def markov_entropy_rate(table: np.ndarray, order: int = 1) -> float:
    """Entropy in nats per token of the chain at stationarity."""
    pi = stationary_distribution(table, order)
    with np.errstate(divide="ignore", invalid="ignore"):
        row_entropy = -np.where(table > 0, table * np.log(table), 0.0).sum(axis=1)
    return float(pi @ row_entropy)


def bigram_counts(tokens: np.ndarray, vocab: int) -> np.ndarray:
    counts = np.zeros((vocab, vocab), dtype=np.int64)
    np.add.at(counts, (tokens[:-1], tokens[1:]), 1)
    return counts


# =============================================================================
# Batching
# =============================================================================

@dataclass(frozen=True)
class Corpus:
    train: np.ndarray
    eval: np.ndarray
    table: np.ndarray
    order: int

    @property
    def entropy_rate(self) -> float:
        return markov_entropy_rate(self.table, self.order)


def build_corpus(cfg: DataConfig) -> Corpus:
    tokens = gen_corpus(cfg.seed, cfg.vocab, cfg.markov_order, cfg.corpus_tokens, cfg.concentration)
    split = int(len(tokens) * (1 - cfg.eval_fraction))
    return Corpus(
        train=tokens[:split],
        eval=tokens[split:],
        table=markov_table(cfg.seed, cfg.vocab, cfg.markov_order, cfg.concentration),
        order=cfg.markov_order,
    )


def sample_batch(
    tokens: np.ndarray,
    sequences: int,
    seq_len: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Random windows: inputs (b, t) and next-token targets (b, t)."""
    if len(tokens) < seq_len + 1:
        raise ValueError(f"corpus of {len(tokens)} tokens is shorter than seq_len + 1 = {seq_len + 1}")
    starts = rng.integers(0, len(tokens) - seq_len, size=sequences)
    windows = np.stack([tokens[s : s + seq_len + 1] for s in starts])
    return windows[:, :-1], windows[:, 1:]


def eval_batches(tokens: np.ndarray, sequences: int, seq_len: int, max_batches: int = 4):
    """Fixed, non-overlapping windows from the start of the eval split."""
    stride = seq_len + 1
    windows = [tokens[i : i + stride] for i in range(0, len(tokens) - stride + 1, stride)]
    for b in range(min(max_batches, len(windows) // sequences)):
        chunk = np.stack(windows[b * sequences : (b + 1) * sequences])
        yield chunk[:, :-1], chunk[:, 1:]
