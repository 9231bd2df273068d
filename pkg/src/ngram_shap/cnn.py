"""1D convolutional text classifier with argmax capture.

The model embeds a padded token sequence, slides convolution filters of
several sizes over it, applies ReLU and max-pooling per filter, and feeds
the pooled vector through a sigmoid dense head.  The max-pool argmax of
each filter is recorded so every pooled feature can be traced back to the
n-gram window that produced it.

Training is plain mini-batch SGD on binary cross-entropy with the
embedding held fixed.  The analytic gradient routes through the first
maximal window of each filter and uses subgradient zero where ReLU
suppressed the whole filter.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import FormatError, ShapeError, TrainingDivergedError
from .text import (
    EmbeddingMatrix,
    TokenizedDocument,
    Vocabulary,
    embed,
    load_embeddings,
    load_vocabulary,
)

MODEL_FORMAT_VERSION = 1

# Architecture used throughout the tests and bundled assets: small enough
# to train in seconds, structurally identical to the full-scale default.
DESK_FILTER_SIZES = (1, 2, 3)
DESK_FILTERS_PER_SIZE = 4
DESK_EMBED_DIM = 8
DESK_PAD_LEN = 64

DEFAULT_FILTER_SIZES = (1, 2, 3)
DEFAULT_FILTERS_PER_SIZE = 50
DEFAULT_PAD_LEN = 1000


@dataclass(frozen=True)
class ConvFilter:
    """One convolution unit: an n x m weight matrix and a scalar bias."""

    size: int
    weights: np.ndarray
    bias: float

    def __post_init__(self):
        if self.size < 1:
            raise ShapeError("filter size must be >= 1")
        if self.weights.shape[0] != self.size:
            raise ShapeError(
                f"filter weights have {self.weights.shape[0]} rows, expected {self.size}"
            )


@dataclass(frozen=True)
class DenseHead:
    """Linear layer over the pooled features, squashed by a sigmoid."""

    weights: np.ndarray
    bias: float


@dataclass(frozen=True)
class CnnModel:
    """Embedding + convolution filters + dense head, plus file references.

    ``vocab_ref`` and ``embedding_ref`` are the paths (relative to the
    model file) that serialization records so a saved model can be
    reloaded standalone.
    """

    vocab: Vocabulary
    embedding: EmbeddingMatrix
    filters: tuple[ConvFilter, ...]
    head: DenseHead
    pad_len: int
    vocab_ref: str = "vocab.txt"
    embedding_ref: str = "embeddings.txt"

    def __post_init__(self):
        if len(self.head.weights) != len(self.filters):
            raise ShapeError(
                f"dense head has {len(self.head.weights)} weights for {len(self.filters)} filters"
            )
        for f in self.filters:
            if f.weights.shape[1] != self.embedding.dim:
                raise ShapeError("filter width disagrees with embedding dimension")

    @property
    def h(self) -> int:
        return len(self.filters)

    @property
    def filter_sizes(self) -> tuple[int, ...]:
        return tuple(sorted({f.size for f in self.filters}))


@dataclass(frozen=True)
class FeatureExtraction:
    """Max-pool outputs with the argmax window of every filter.

    ``starts[j]`` is the first token index of the window filter j pooled
    from; the window spans ``starts[j] .. starts[j] + sizes[j] - 1``
    inclusive.  ``zero[j]`` marks filters whose ReLU output was entirely
    suppressed (theta exactly 0, gradient-dead).
    """

    theta: np.ndarray
    starts: np.ndarray
    sizes: tuple[int, ...]
    zero: np.ndarray

    def span(self, j: int) -> tuple[int, int]:
        s = int(self.starts[j])
        return s, s + self.sizes[j] - 1


def build_model(
    vocab: Vocabulary,
    embedding: EmbeddingMatrix,
    filter_sizes: Sequence[int] = DESK_FILTER_SIZES,
    filters_per_size: int = DESK_FILTERS_PER_SIZE,
    pad_len: int = DESK_PAD_LEN,
    seed: int = 0,
    vocab_ref: str = "vocab.txt",
    embedding_ref: str = "embeddings.txt",
) -> CnnModel:
    """Fresh model with fan-scaled uniform initialization, seeded."""
    rng = np.random.default_rng(seed)
    m = embedding.dim
    filters = []
    for n in filter_sizes:
        a = np.sqrt(6.0 / (n * m + 1))
        for _ in range(filters_per_size):
            filters.append(
                ConvFilter(size=n, weights=rng.uniform(-a, a, size=(n, m)), bias=0.0)
            )
    h = len(filters)
    a = np.sqrt(6.0 / (h + 1))
    head = DenseHead(weights=rng.uniform(-a, a, size=h), bias=0.0)
    return CnnModel(
        vocab=vocab,
        embedding=embedding,
        filters=tuple(filters),
        head=head,
        pad_len=pad_len,
        vocab_ref=vocab_ref,
        embedding_ref=embedding_ref,
    )


def conv_forward(filt: ConvFilter, embedded: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Slide the filter over an l x m embedded document.

    Returns ``(values, relu_values)``, each of length ``l - n + 1``:
    ``values[k]`` is the Frobenius inner product of the filter weights with
    the window starting at token k, plus the bias.
    """
    l = embedded.shape[0]
    if l < filt.size:
        raise ShapeError(f"document length {l} shorter than filter size {filt.size}")
    if embedded.shape[1] != filt.weights.shape[1]:
        raise ShapeError("embedding width disagrees with filter width")
    windows = sliding_window_view(embedded, (filt.size, embedded.shape[1]))[:, 0]
    values = np.einsum("knm,nm->k", windows, filt.weights) + filt.bias
    return values, np.maximum(values, 0.0)


def extract_features(model: CnnModel, doc: TokenizedDocument) -> FeatureExtraction:
    """Run every filter and record max-pool value plus first-max argmax."""
    if doc.pad_len != model.pad_len:
        raise ShapeError(
            f"document padded to {doc.pad_len}, model expects {model.pad_len}"
        )
    embedded = embed(doc, model.embedding)
    theta = np.empty(model.h)
    starts = np.empty(model.h, dtype=np.int64)
    for j, filt in enumerate(model.filters):
        _, relu = conv_forward(filt, embedded)
        starts[j] = int(np.argmax(relu))  # first maximal position on ties
        theta[j] = relu[starts[j]]
    return FeatureExtraction(
        theta=theta,
        starts=starts,
        sizes=tuple(f.size for f in model.filters),
        zero=theta == 0.0,
    )


def head_logits(model: CnnModel, thetas: np.ndarray) -> np.ndarray:
    """Pre-sigmoid logits for a batch of pooled feature vectors (B x h)."""
    thetas = np.atleast_2d(thetas)
    if thetas.shape[1] != model.h:
        raise ShapeError(f"expected {model.h} features, got {thetas.shape[1]}")
    return thetas @ model.head.weights + model.head.bias


def head_logit(model: CnnModel, theta: np.ndarray) -> float:
    """Pre-sigmoid logit for one pooled feature vector (the SHAP target)."""
    return float(head_logits(model, np.asarray(theta)[None, :])[0])


def classify(model: CnnModel, theta: np.ndarray) -> float:
    """Probability of the positive class for one pooled feature vector."""
    return float(expit(head_logit(model, theta)))


def predict(model: CnnModel, doc: TokenizedDocument) -> float:
    return classify(model, extract_features(model, doc).theta)


def kink_margins(model: CnnModel, doc: TokenizedDocument) -> np.ndarray:
    """Distance of each filter's activations from a ReLU/max-pool kink.

    A small margin means a parameter perturbation of that order could flip
    the argmax window or a ReLU sign, making finite differences of the
    loss unreliable for that filter's parameters.
    """
    embedded = embed(doc, model.embedding)
    margins = np.empty(model.h)
    for j, filt in enumerate(model.filters):
        values, relu = conv_forward(filt, embedded)
        margin = float(np.min(np.abs(values)))
        kstar = int(np.argmax(relu))
        if relu[kstar] > 0.0 and len(relu) > 1:
            others = np.delete(relu, kstar)
            margin = min(margin, float(relu[kstar] - others.max()))
        margins[j] = margin
    return margins


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    learning_rate: float = 0.1
    batch_size: int = 32
    seed: int = 0


@dataclass
class Gradients:
    """Gradient of the BCE loss w.r.t. every trainable parameter."""

    filter_weights: list[np.ndarray]
    filter_biases: np.ndarray
    dense_weights: np.ndarray
    dense_bias: float


class _Packed:
    """Filters grouped by size into dense arrays for batched training."""

    def __init__(self, model: CnnModel):
        self.sizes = model.filter_sizes
        self.ids: dict[int, np.ndarray] = {}
        self.W: dict[int, np.ndarray] = {}
        self.b: dict[int, np.ndarray] = {}
        for n in self.sizes:
            ids = np.array([j for j, f in enumerate(model.filters) if f.size == n])
            self.ids[n] = ids
            self.W[n] = np.stack([model.filters[j].weights for j in ids])
            self.b[n] = np.array([model.filters[j].bias for j in ids])
        self.dense_w = model.head.weights.copy()
        self.dense_b = float(model.head.bias)
        self.h = model.h

    def to_model(self, model: CnnModel) -> CnnModel:
        filters: list[ConvFilter | None] = [None] * self.h
        for n in self.sizes:
            for pos, j in enumerate(self.ids[n]):
                filters[j] = ConvFilter(
                    size=n, weights=self.W[n][pos].copy(), bias=float(self.b[n][pos])
                )
        return replace(
            model,
            filters=tuple(filters),
            head=DenseHead(weights=self.dense_w.copy(), bias=self.dense_b),
        )


def _batch_forward(packed: _Packed, emb_batch: np.ndarray):
    """Forward pass for a batch: pooled features, argmaxes, window views."""
    B = emb_batch.shape[0]
    theta = np.empty((B, packed.h))
    kstar = np.empty((B, packed.h), dtype=np.int64)
    window_views = {}
    for n in packed.sizes:
        sw = sliding_window_view(emb_batch, (n, emb_batch.shape[2]), axis=(1, 2))[:, :, 0]
        vals = np.einsum("bknm,fnm->bkf", sw, packed.W[n]) + packed.b[n]
        relu = np.maximum(vals, 0.0)
        ks = relu.argmax(axis=1)
        theta[:, packed.ids[n]] = np.take_along_axis(relu, ks[:, None, :], axis=1)[:, 0]
        kstar[:, packed.ids[n]] = ks
        window_views[n] = sw
    return theta, kstar, window_views


def _batch_gradients(packed: _Packed, emb_batch: np.ndarray, labels: np.ndarray):
    """Mean BCE gradient over a batch, plus the mean loss."""
    B = emb_batch.shape[0]
    theta, kstar, windows = _batch_forward(packed, emb_batch)
    z = theta @ packed.dense_w + packed.dense_b
    p = expit(z)
    loss = float(np.mean(labels * np.logaddexp(0.0, -z) + (1 - labels) * np.logaddexp(0.0, z)))
    g = (p - labels) / B  # d(mean loss)/d logit

    d_dense_w = theta.T @ g
    d_dense_b = float(g.sum())
    d_theta = g[:, None] * packed.dense_w[None, :]
    d_theta[theta == 0.0] = 0.0  # ReLU fully suppressed: subgradient 0

    dW = {}
    db = {}
    for n in packed.sizes:
        ids = packed.ids[n]
        dth = d_theta[:, ids]
        ks = kstar[:, ids]
        picked = windows[n][np.arange(B)[:, None], ks]  # (B, F_n, n, m)
        dW[n] = np.einsum("bf,bfnm->fnm", dth, picked)
        db[n] = dth.sum(axis=0)
    return dW, db, d_dense_w, d_dense_b, loss


def gradient(model: CnnModel, doc: TokenizedDocument, label: int) -> Gradients:
    """Analytic BCE gradient for a single document."""
    packed = _Packed(model)
    emb_batch = embed(doc, model.embedding)[None, :, :]
    dW, db, d_dense_w, d_dense_b, _ = _batch_gradients(
        packed, emb_batch, np.array([float(label)])
    )
    filter_weights: list[np.ndarray | None] = [None] * model.h
    filter_biases = np.empty(model.h)
    for n in packed.sizes:
        for pos, j in enumerate(packed.ids[n]):
            filter_weights[j] = dW[n][pos]
            filter_biases[j] = db[n][pos]
    return Gradients(
        filter_weights=filter_weights,
        filter_biases=filter_biases,
        dense_weights=d_dense_w,
        dense_bias=d_dense_b,
    )


def bce_loss(model: CnnModel, doc: TokenizedDocument, label: int) -> float:
    """Binary cross-entropy of the prediction against a 0/1 label."""
    z = head_logit(model, extract_features(model, doc).theta)
    return float(label * np.logaddexp(0.0, -z) + (1 - label) * np.logaddexp(0.0, z))


def train(
    model: CnnModel,
    corpus: Sequence[tuple[TokenizedDocument, int]],
    config: TrainConfig,
) -> tuple[CnnModel, list[float]]:
    """Mini-batch SGD on binary cross-entropy; the embedding stays fixed.

    Returns the trained model and the per-epoch mean loss trace.  The run
    is bit-reproducible for a fixed config.
    """
    if not corpus:
        raise ValueError("corpus must be non-empty")
    labels_all = np.array([float(label) for _, label in corpus])
    if not np.all(np.isin(labels_all, (0.0, 1.0))):
        raise ValueError("labels must be 0 or 1")

    embedded = np.stack([embed(doc, model.embedding) for doc, _ in corpus])
    packed = _Packed(model)
    rng = np.random.default_rng(config.seed)
    trace: list[float] = []

    for epoch in range(config.epochs):
        order = rng.permutation(len(corpus))
        epoch_losses = []
        for lo in range(0, len(corpus), config.batch_size):
            batch = order[lo : lo + config.batch_size]
            dW, db, d_dw, d_db, loss = _batch_gradients(
                packed, embedded[batch], labels_all[batch]
            )
            epoch_losses.append(loss * len(batch))
            lr = config.learning_rate
            for n in packed.sizes:
                packed.W[n] -= lr * dW[n]
                packed.b[n] -= lr * db[n]
            packed.dense_w -= lr * d_dw
            packed.dense_b -= lr * d_db
        mean_loss = sum(epoch_losses) / len(corpus)
        if not np.isfinite(mean_loss):
            raise TrainingDivergedError(epoch)
        trace.append(mean_loss)

    return packed.to_model(model), trace


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def save_model(model: CnnModel, path: str | Path) -> None:
    """Write the model as self-describing JSON.

    Floats are serialized with shortest round-trip precision, so
    ``load_model(save_model(m))`` reproduces every weight bit-exactly.
    The vocabulary and embedding files themselves are not rewritten; the
    document records their paths relative to the model file.
    """
    payload = {
        "version": MODEL_FORMAT_VERSION,
        "m": model.embedding.dim,
        "l": model.pad_len,
        "filter_sizes": list(model.filter_sizes),
        "filters": [
            {
                "size": f.size,
                "bias": f.bias,
                "weights": [float(v) for v in f.weights.ravel()],
            }
            for f in model.filters
        ],
        "dense": {
            "weights": [float(v) for v in model.head.weights],
            "bias": float(model.head.bias),
        },
        "vocab_ref": model.vocab_ref,
        "embedding_ref": model.embedding_ref,
    }
    Path(path).write_text(json.dumps(payload), encoding="utf-8")


def load_model(path: str | Path) -> CnnModel:
    """Load a model saved by :func:`save_model`.

    The vocabulary and embeddings are resolved relative to the model
    file's directory via the recorded references.
    """
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid model JSON ({exc})") from None
    version = payload.get("version")
    if version != MODEL_FORMAT_VERSION:
        raise FormatError(
            f"{path}: model format version {version!r}, expected {MODEL_FORMAT_VERSION}"
        )
    try:
        m = int(payload["m"])
        pad_len = int(payload["l"])
        header_sizes = [int(s) for s in payload["filter_sizes"]]
        raw_filters = payload["filters"]
        dense = payload["dense"]
        vocab_ref = payload["vocab_ref"]
        embedding_ref = payload["embedding_ref"]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: missing or malformed field ({exc})") from None

    filters = []
    for i, rf in enumerate(raw_filters):
        size = int(rf["size"])
        weights = np.array(rf["weights"], dtype=np.float64)
        if weights.size != size * m:
            raise FormatError(
                f"{path}: filter {i} has {weights.size} weights, expected {size * m}"
            )
        filters.append(ConvFilter(size=size, weights=weights.reshape(size, m), bias=float(rf["bias"])))
    if sorted(set(f.size for f in filters)) != sorted(header_sizes):
        raise FormatError(f"{path}: filter_sizes header disagrees with filter records")

    dense_w = np.array(dense["weights"], dtype=np.float64)
    if len(dense_w) != len(filters):
        raise FormatError(
            f"{path}: dense head has {len(dense_w)} weights for {len(filters)} filters"
        )

    vocab = load_vocabulary(path.parent / vocab_ref)
    embedding = load_embeddings(path.parent / embedding_ref, vocab)
    if embedding.dim != m:
        raise FormatError(
            f"{path}: embedding file dimension {embedding.dim} disagrees with model m={m}"
        )
    return CnnModel(
        vocab=vocab,
        embedding=embedding,
        filters=tuple(filters),
        head=DenseHead(weights=dense_w, bias=float(dense["bias"])),
        pad_len=pad_len,
        vocab_ref=vocab_ref,
        embedding_ref=embedding_ref,
    )
