"""Active-learning acquisition over the candidate pool.

A candidate's novelty is the Gaussian differential entropy of its post-batch-
norm activation spread; its typicality is its mean cosine similarity to the
rest of the pool in input space. The query score multiplies the two, and the
top-scoring samples are queried (labels revealed) in acquisition batches.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import ActivationTrace, Network, eval_mode
from .stream import SENTINEL_LABEL


class DegenerateInputError(ValueError):
    """A zero-norm input has no direction; cosine similarity is undefined."""


@dataclass(frozen=True)
class QueryScore:
    sigma_sq: float
    alpha_q: float
    beta_q: float
    gamma_q: float


@dataclass(frozen=True)
class QueriedSample:
    input: np.ndarray
    label: int
    id: int
    gamma_q: float


class CandidatePool:
    """Accepted stream samples awaiting query; labels stay hidden until queried.

    Label access is funneled through ``take`` (counted oracle reveals) and
    ``peek_unique_labels`` (class discovery for head expansion, logged as
    oracle metadata rather than observed data).
    """

    def __init__(self):
        self._inputs: list[np.ndarray] = []
        self._labels: list[int] = []
        self._accepted_at: list[int] = []
        self._ids: list[int] = []
        self.oracle_reveals = 0

    def __len__(self) -> int:
        return len(self._inputs)

    def append_batch(self, inputs: np.ndarray, labels: np.ndarray,
                     timestep: int, ids) -> None:
        inputs = np.asarray(inputs)
        labels = np.asarray(labels)
        if inputs.shape[0] != labels.shape[0] or inputs.shape[0] != len(ids):
            raise ValueError("inputs, labels, and ids must align")
        for i in range(inputs.shape[0]):
            self._inputs.append(inputs[i])
            self._labels.append(int(labels[i]))
            self._accepted_at.append(timestep)
            self._ids.append(int(ids[i]))

    @property
    def ids(self) -> list[int]:
        return list(self._ids)

    def inputs_matrix(self) -> np.ndarray:
        if not self._inputs:
            return np.zeros((0, 0), dtype=np.float32)
        return np.stack([x.reshape(-1) for x in self._inputs])

    def peek_unique_labels(self, exclude_sentinel: bool = True) -> list[int]:
        labels = set(self._labels)
        if exclude_sentinel:
            labels.discard(SENTINEL_LABEL)
        return sorted(labels)

    def take(self, indices, gammas=None) -> list[QueriedSample]:
        """Remove entries at ``indices`` and reveal their labels (oracle calls)."""
        index_set = sorted(set(int(i) for i in indices))
        if gammas is None:
            gammas = {}
        taken = [QueriedSample(self._inputs[i], self._labels[i], self._ids[i],
                               float(gammas.get(i, 0.0)))
                 for i in index_set]
        self.oracle_reveals += len(taken)
        for i in reversed(index_set):
            del self._inputs[i]
            del self._labels[i]
            del self._accepted_at[i]
            del self._ids[i]
        return taken


def activation_spread(trace: ActivationTrace, sample_index: int | None = None):
    """Mean over layers of the per-layer mean squared post-affine activation.

    With ideal normalization this is the activation variance; it measures how
    spread out a sample's intermediate values are relative to the training
    data the batch-norm statistics describe.
    """
    n = trace.n_samples
    acc = np.zeros(n, dtype=np.float64)
    for a in trace.activated:
        flat = a.astype(np.float64).reshape(n, -1)
        acc += np.square(flat).mean(axis=1)
    acc /= len(trace.activated)
    if sample_index is None:
        return acc
    return float(acc[sample_index])


def entropy_term(sigma_sq):
    """Gaussian differential entropy 0.5 * (1 + ln(2 pi sigma^2)); 0 -> -inf."""
    sigma_sq = np.asarray(sigma_sq, dtype=np.float64)
    with np.errstate(divide="ignore"):
        out = np.where(sigma_sq > 0.0,
                       0.5 * (1.0 + np.log(2.0 * np.pi * np.where(sigma_sq > 0, sigma_sq, 1.0))),
                       -np.inf)
    if out.ndim == 0:
        return float(out)
    return out


def mean_pairwise_cosine(x: np.ndarray, chunk_size: int = 128) -> np.ndarray:
    """For every row, the mean cosine similarity to all *other* rows.

    Processes rows in chunks so peak intermediate storage is
    O(chunk_size * n) rather than the full n x n similarity matrix. A pool of
    one returns [0] (empty-average convention).
    """
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    x = np.asarray(x, dtype=np.float64).reshape(x.shape[0], -1)
    n = x.shape[0]
    if n == 0:
        return np.zeros(0)
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0.0):
        raise DegenerateInputError("zero-norm input vector in similarity computation")
    if n == 1:
        return np.zeros(1)
    unit = x / norms[:, None]
    sums = np.empty(n, dtype=np.float64)
    for start in range(0, n, chunk_size):
        stop = min(start + chunk_size, n)
        block = unit[start:stop] @ unit.T  # (chunk, n)
        sums[start:stop] = block.sum(axis=1)
    # Each row's block includes its self-similarity of exactly 1.
    return (sums - 1.0) / (n - 1)


def pool_similarity(pool, q_index: int, chunk_size: int = 128) -> float:
    """Mean cosine between entry ``q_index`` and every other pool member."""
    x = pool.inputs_matrix() if hasattr(pool, "inputs_matrix") else np.asarray(pool)
    x = np.asarray(x, dtype=np.float64).reshape(x.shape[0], -1)
    n = x.shape[0]
    if n == 1:
        return 0.0
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0.0):
        raise DegenerateInputError("zero-norm input vector in similarity computation")
    q = x[q_index] / norms[q_index]
    total = 0.0
    for start in range(0, n, chunk_size):
        stop = min(start + chunk_size, n)
        total += float((x[start:stop] @ q / norms[start:stop]).sum())
    return (total - 1.0) / (n - 1)


def _gamma(alpha: np.ndarray, beta: np.ndarray) -> np.ndarray:
    # Degenerate zero-spread samples are never selected, whatever beta is.
    alpha = np.asarray(alpha, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    out = np.full(alpha.shape, -np.inf)
    finite = np.isfinite(alpha)
    out[finite] = alpha[finite] * beta[finite]
    return out


def query_scores(net: Network, pool: CandidatePool, chunk_size: int = 128,
                 forward_batch: int = 256) -> list[QueryScore]:
    """Score every pool entry: gamma_q = alpha_q * beta_q."""
    n = len(pool)
    if n == 0:
        raise ValueError("cannot score an empty pool")
    inputs = pool.inputs_matrix()
    sigma_sq = np.empty(n, dtype=np.float64)
    with eval_mode(net):
        for start in range(0, n, forward_batch):
            stop = min(start + forward_batch, n)
            _, trace = net.forward(inputs[start:stop], capture=True)
            sigma_sq[start:stop] = activation_spread(trace)
    alpha = entropy_term(sigma_sq)
    beta = mean_pairwise_cosine(inputs, chunk_size=chunk_size)
    gamma = _gamma(np.asarray(alpha), beta)
    return [QueryScore(float(sigma_sq[i]), float(alpha[i]), float(beta[i]), float(gamma[i]))
            for i in range(n)]


def select_top(pool: CandidatePool, scores: list[QueryScore], acquisition_batch: int
               ) -> list[QueriedSample]:
    """Query the top-B entries by gamma_q (ties to lower id), removing them.

    Returns the queried samples sorted by descending score; the pool shrinks
    by exactly that many entries.
    """
    if acquisition_batch < 1:
        raise ValueError("acquisition batch must be >= 1")
    if len(pool) == 0:
        raise ValueError("cannot select from an empty pool")
    if len(scores) != len(pool):
        raise ValueError("scores must cover the pool")
    ids = pool.ids
    order = sorted(range(len(pool)), key=lambda i: (-scores[i].gamma_q, ids[i]))
    chosen = order[:min(acquisition_batch, len(pool))]
    gammas = {i: scores[i].gamma_q for i in chosen}
    taken = pool.take(chosen, gammas)
    return sorted(taken, key=lambda s: (-s.gamma_q, s.id))
