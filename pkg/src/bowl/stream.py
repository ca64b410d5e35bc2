"""Dataset handling: synthetic generators, class-incremental task splits,
corruption injection, open-world stream mixing, and the on-disk format.

Datasets are stored in the BNT1 container with two named tensors, ``inputs``
(float32) and ``labels`` (uint32, rank 1). Foreign samples injected into a
stream carry the in-memory sentinel label -1 and are excluded from accuracy
bookkeeping.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .serialization import FormatError, read_tensors, write_tensors

SENTINEL_LABEL = -1

CORRUPTION_KINDS = ("gaussian", "shot", "impulse")


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    class_names: list[str] | None = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError("inputs and labels must have matching length")
        if self.labels.size and self.labels.min() < 0:
            raise ValueError("dataset labels must be nonnegative")

    @property
    def n(self) -> int:
        return int(self.inputs.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(np.prod(self.inputs.shape[1:]))

    def classes(self) -> list[int]:
        return sorted(int(c) for c in np.unique(self.labels))

    def restrict(self, class_ids) -> "Dataset":
        mask = np.isin(self.labels, np.asarray(list(class_ids)))
        return Dataset(self.inputs[mask], self.labels[mask], self.class_names)


@dataclass
class StreamBatch:
    inputs: np.ndarray
    labels: np.ndarray
    kind: str = "clean"

    @property
    def size(self) -> int:
        return int(self.inputs.shape[0])


@dataclass
class MixSpec:
    """Open-world injections: corrupted copies and foreign-class batches."""

    corrupted_fraction: float = 0.0
    ood_fraction: float = 0.0
    corruption: str = "gaussian"
    severity: float = 0.5
    foreign: Dataset | None = None

    def __post_init__(self):
        if not 0.0 <= self.corrupted_fraction <= 1.0 or not 0.0 <= self.ood_fraction <= 1.0:
            raise ValueError("fractions must lie in [0, 1]")
        if self.corrupted_fraction + self.ood_fraction > 1.0:
            raise ValueError("fractions must sum to at most 1")
        if self.ood_fraction > 0.0 and self.foreign is None:
            raise ValueError("ood_fraction > 0 requires a foreign dataset")


def simplex_means(n_classes: int, dims: int, separation: float) -> np.ndarray:
    """Class means with pairwise distance ``separation``, centered at 0.5.

    Uses the regular simplex spanned by scaled unit vectors, so ``dims`` must
    be at least ``n_classes``.
    """
    if dims < n_classes:
        raise ValueError(f"need dims >= n_classes for a regular simplex "
                         f"({dims} < {n_classes})")
    scale = separation / np.sqrt(2.0)
    verts = np.zeros((n_classes, dims))
    verts[:, :n_classes] = np.eye(n_classes) * scale
    verts[:, :n_classes] -= scale / n_classes
    return verts + 0.5


def synth_generate(n_classes: int, dims: int, separation: float, within_std: float,
                   n_samples: int, seed: int, clip_unit: bool = False,
                   modes_per_class: int = 1, mode_offset: float = 0.0,
                   minor_mode_weight: float = 0.25,
                   scale_spread: float = 0.0) -> Dataset:
    """Gaussian blobs with means on a scaled simplex; labels round-robin.

    With ``clip_unit`` the samples are clamped into [0, 1] so they can feed
    the corruption operators. ``modes_per_class`` > 1 splits each class into
    sub-blobs offset by ``mode_offset`` along per-class random directions,
    with the non-core modes sharing ``minor_mode_weight`` of the mass; this
    gives classes internal structure a diverse memory has to cover.
    ``scale_spread`` > 0 draws a lognormal per-sample noise scale so sample
    "difficulty" varies naturally, as it does for real images.
    """
    if separation <= 0:
        raise ValueError("separation must be positive")
    if n_samples < 1:
        raise ValueError("cannot generate an empty dataset")
    if modes_per_class < 1:
        raise ValueError("modes_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    means = simplex_means(n_classes, dims, separation)
    labels = np.arange(n_samples, dtype=np.int64) % n_classes
    noise = rng.normal(0.0, within_std, size=(n_samples, dims))
    if scale_spread > 0.0:
        noise *= np.exp(scale_spread * rng.normal(size=(n_samples, 1)))
    inputs = means[labels] + noise
    if modes_per_class > 1:
        directions = rng.normal(size=(n_classes, modes_per_class - 1, dims))
        directions /= np.linalg.norm(directions, axis=2, keepdims=True)
        minor_each = minor_mode_weight / (modes_per_class - 1)
        mode_probs = [1.0 - minor_mode_weight] + [minor_each] * (modes_per_class - 1)
        modes = rng.choice(modes_per_class, size=n_samples, p=mode_probs)
        shifted = modes > 0
        inputs[shifted] += mode_offset * directions[labels[shifted], modes[shifted] - 1]
    if clip_unit:
        inputs = np.clip(inputs, 0.0, 1.0)
    return Dataset(inputs.astype(np.float32), labels)


def make_split_tasks(dataset: Dataset, schedule: list[list[int]], batch_size: int,
                     seed: int) -> list[list[StreamBatch]]:
    """One stream of shuffled fixed-size batches per timestep.

    Timestep t's stream holds exactly the samples of its class set (the final
    batch may be partial), so the streams partition the scheduled subset.
    """
    known = set(dataset.classes())
    for classes in schedule:
        missing = set(classes) - known
        if missing:
            raise ValueError(f"schedule references unknown classes {sorted(missing)}")
    rng = np.random.default_rng(seed)
    streams: list[list[StreamBatch]] = []
    for classes in schedule:
        mask = np.isin(dataset.labels, np.asarray(classes))
        idx = np.flatnonzero(mask)
        idx = idx[rng.permutation(idx.shape[0])]
        batches = [StreamBatch(dataset.inputs[idx[s:s + batch_size]],
                               dataset.labels[idx[s:s + batch_size]])
                   for s in range(0, idx.shape[0], batch_size)]
        streams.append(batches)
    return streams


def corrupt(inputs: np.ndarray, kind: str, severity: float, seed: int) -> np.ndarray:
    """Noise-corrupt inputs in [0, 1]; shape and value range are preserved.

    gaussian: additive N(0, severity^2). shot: Poisson photon-count
    resampling at rate 60/severity per unit value. impulse: each entry is
    forced to 0 or 1 with probability severity/2 each.
    """
    if severity <= 0:
        raise ValueError("severity must be positive")
    x = np.asarray(inputs, dtype=np.float32)
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise ValueError("corruption expects inputs in [0, 1]")
    rng = np.random.default_rng(seed)
    if kind == "gaussian":
        out = x + rng.normal(0.0, severity, size=x.shape)
    elif kind == "shot":
        lam = 60.0 / severity
        out = rng.poisson(x.astype(np.float64) * lam) / lam
    elif kind == "impulse":
        u = rng.random(x.shape)
        out = x.astype(np.float64).copy()
        out[u < severity / 2.0] = 0.0
        out[(u >= severity / 2.0) & (u < severity)] = 1.0
    else:
        raise ValueError(f"unknown corruption kind {kind!r}")
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def mix_streams(batches: list[StreamBatch], corrupted_fraction: float,
                ood_dataset: Dataset | None, ood_fraction: float, seed: int,
                corruption: str = "gaussian", severity: float = 0.5
                ) -> list[StreamBatch]:
    """Interleave corrupted copies and foreign batches into a task stream.

    For each clean batch, a corrupted copy is injected with probability
    ``corrupted_fraction`` and a foreign batch (sentinel labels) with
    probability ``ood_fraction``; injected batches land at seeded random
    positions while the clean batches keep their relative order. With zero
    fractions the stream passes through untouched.
    """
    if corrupted_fraction + ood_fraction > 1.0:
        raise ValueError("fractions must sum to at most 1")
    if ood_fraction > 0.0 and ood_dataset is None:
        raise ValueError("foreign mixing requires an ood dataset")
    rng = np.random.default_rng(seed)
    n = len(batches)
    keyed: list[tuple[float, int, StreamBatch]] = [
        (float(i), 0, b) for i, b in enumerate(batches)]
    for i, batch in enumerate(batches):
        if rng.random() < corrupted_fraction:
            noisy = corrupt(batch.inputs, corruption, severity,
                            int(rng.integers(0, 2**31)))
            position = float(rng.uniform(0, n))
            keyed.append((position, 1, StreamBatch(noisy, batch.labels.copy(), "corrupted")))
        if rng.random() < ood_fraction:
            sel = rng.choice(ood_dataset.n, size=batch.size,
                             replace=ood_dataset.n < batch.size)
            labels = np.full(batch.size, SENTINEL_LABEL, dtype=np.int64)
            position = float(rng.uniform(0, n))
            keyed.append((position, 1, StreamBatch(ood_dataset.inputs[sel], labels, "foreign")))
    keyed.sort(key=lambda t: (t[0], t[1]))
    return [b for _, _, b in keyed]


@dataclass
class SplitTasks:
    """Everything one open-world run consumes.

    ``streams[t-1]`` is the batch stream for incremental timestep t >= 1;
    timestep 0 is the supervised pretraining set. Test data stays whole and
    is filtered to discovered classes at evaluation time.
    """

    pretrain_inputs: np.ndarray
    pretrain_labels: np.ndarray
    streams: list[list[StreamBatch]]
    test_inputs: np.ndarray
    test_labels: np.ndarray
    schedule: list[list[int]] = field(default_factory=list)

    @property
    def n_timesteps(self) -> int:
        return len(self.streams)

    def stream_size(self, t: int) -> int:
        return sum(b.size for b in self.streams[t - 1])

    def total_stream_size(self) -> int:
        return sum(self.stream_size(t) for t in range(1, self.n_timesteps + 1))


def split_experiment(train: Dataset, test: Dataset, schedule: list[list[int]],
                     batch_size: int, seed: int, mix: MixSpec | None = None
                     ) -> SplitTasks:
    """Build pretraining data plus per-timestep (optionally mixed) streams."""
    if len(schedule) < 2:
        raise ValueError("schedule needs a pretraining timestep plus >= 1 task")
    streams = make_split_tasks(train, schedule, batch_size, seed)
    pretrain = train.restrict(schedule[0])
    mixed: list[list[StreamBatch]] = []
    rng = np.random.default_rng(seed + 1)
    for task_batches in streams[1:]:
        if mix is None:
            mixed.append(task_batches)
        else:
            mixed.append(mix_streams(task_batches, mix.corrupted_fraction, mix.foreign,
                                     mix.ood_fraction, int(rng.integers(0, 2**31)),
                                     mix.corruption, mix.severity))
    return SplitTasks(pretrain.inputs, pretrain.labels, mixed,
                      test.inputs, test.labels, schedule)


def save_dataset(dataset: Dataset, path: str) -> None:
    labels = dataset.labels
    if labels.size and labels.max() >= 2**32:
        raise FormatError("labels overflow uint32")
    write_tensors(path, {
        "inputs": dataset.inputs.astype(np.float32),
        "labels": labels.astype(np.uint32),
    })


def load_dataset(path: str) -> Dataset:
    tensors = read_tensors(path)
    for name in ("inputs", "labels"):
        if name not in tensors:
            raise FormatError(f"dataset file missing tensor {name!r}")
    if tensors["labels"].ndim != 1:
        raise FormatError("labels tensor must be rank 1")
    return Dataset(tensors["inputs"], tensors["labels"].astype(np.int64))
