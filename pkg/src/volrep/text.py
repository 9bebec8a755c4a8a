"""Report tokenization, sentence handling, the frozen toy text encoder, and
the pooling layers that turn word features into sentence and global features.

The frozen encoder is deliberately plain numpy: its parameters live outside
the autodiff tape, so no gradient can ever reach them.
"""

from __future__ import annotations

import hashlib
import re
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from . import autograd as ag
from .autograd import Tensor
from .errors import EmptyReportError, ShapeMismatchError
from .layers import ParamBag, attention_mask_bias, trunc_normal

_SENTENCE_DELIMS = re.compile(r"[.;!?]")


def split_sentences(text: str) -> list[str]:
    """Split report text at '.', ';', '!', '?'; drop empty fragments."""
    parts = [p.strip() for p in _SENTENCE_DELIMS.split(text)]
    parts = [p for p in parts if p]
    if not parts:
        raise EmptyReportError(f"no sentences found in text: {text!r}")
    return parts


@dataclass
class TokenizedReport:
    """Word-token ids partitioned into ordered, non-overlapping sentences."""

    patient_id: str
    word_ids: list[int]
    sentence_spans: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        if not self.word_ids:
            raise EmptyReportError(f"report {self.patient_id!r} has no tokens")
        cursor = 0
        for start, end in self.sentence_spans:
            if start != cursor or end <= start:
                raise ShapeMismatchError(
                    f"report {self.patient_id!r}: spans must be contiguous, "
                    f"ordered, non-empty; got {self.sentence_spans}")
            cursor = end
        if cursor != len(self.word_ids):
            raise ShapeMismatchError(
                f"report {self.patient_id!r}: spans cover [0, {cursor}) but "
                f"there are {len(self.word_ids)} tokens")

    @classmethod
    def from_sentences(cls, patient_id: str, sentences: list[list[int]]) -> "TokenizedReport":
        ids: list[int] = []
        spans: list[tuple[int, int]] = []
        for sent in sentences:
            spans.append((len(ids), len(ids) + len(sent)))
            ids.extend(int(t) for t in sent)
        return cls(patient_id, ids, spans)

    @property
    def num_sentences(self) -> int:
        return len(self.sentence_spans)

    def sentences(self) -> list[list[int]]:
        return [self.word_ids[a:b] for a, b in self.sentence_spans]

    def truncated(self, max_sentences: int) -> "TokenizedReport":
        if self.num_sentences <= max_sentences:
            return self
        warnings.warn(
            f"report {self.patient_id!r}: {self.num_sentences} sentences "
            f"truncated to {max_sentences}")
        return TokenizedReport.from_sentences(
            self.patient_id, self.sentences()[:max_sentences])


@dataclass
class SentenceFeatures:
    """Per-sentence feature rows with a validity mask over padding rows."""

    features: Tensor          # (D_S, d); padding rows are zero
    valid: np.ndarray         # (D_S,) bool

    @property
    def num_valid(self) -> int:
        return int(self.valid.sum())


# -- frozen text encoder (plain numpy) ----------------------------------------

def _np_layer_norm(x, g, b, eps=1e-6):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def _np_softmax(x, axis=-1):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _np_gelu(x):
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def sinusoidal_positions(length: int, d: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(d // 2)[None, :]
    angles = pos / np.power(10000.0, 2.0 * i / d)
    pe = np.zeros((length, d))
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles)
    return pe


class FrozenTextEncoder:
    """Seeded random embedding table plus two frozen pre-norm transformer
    layers with sinusoidal positions. Deterministic; never trained."""

    def __init__(self, vocab_size: int, d: int = 32, heads: int = 4,
                 layers: int = 2, seed: int = 0):
        if d % heads:
            raise ValueError(f"width {d} not divisible by {heads} heads")
        self.vocab_size = vocab_size
        self.d, self.heads, self.layers = d, heads, layers
        rng = np.random.default_rng(seed)
        p: dict[str, np.ndarray] = {"embed": trunc_normal(rng, (vocab_size, d))}
        for layer in range(layers):
            pre = f"layer{layer}."
            p[pre + "ln1_g"] = np.ones(d)
            p[pre + "ln1_b"] = np.zeros(d)
            for w in ("wq", "wk", "wv", "wo"):
                p[pre + w] = trunc_normal(rng, (d, d))
            p[pre + "ln2_g"] = np.ones(d)
            p[pre + "ln2_b"] = np.zeros(d)
            p[pre + "w1"] = trunc_normal(rng, (d, 4 * d))
            p[pre + "b1"] = np.zeros(4 * d)
            p[pre + "w2"] = trunc_normal(rng, (4 * d, d))
            p[pre + "b2"] = np.zeros(d)
        p["lnf_g"] = np.ones(d)
        p["lnf_b"] = np.zeros(d)
        self.weights = p

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.weights):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.weights[name]).tobytes())
        return h.hexdigest()

    def _check_ids(self, ids: np.ndarray):
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise IndexError(
                f"token id out of range [0, {self.vocab_size}): "
                f"{ids.min()}..{ids.max()}")

    def encode_ids(self, ids) -> np.ndarray:
        """Contextual features for a flat id sequence (positions start at 0)."""
        ids = np.asarray(ids, dtype=np.int64)
        self._check_ids(ids)
        p = self.weights
        x = p["embed"][ids] + sinusoidal_positions(len(ids), self.d)
        dh = self.d // self.heads
        for layer in range(self.layers):
            pre = f"layer{layer}."
            h = _np_layer_norm(x, p[pre + "ln1_g"], p[pre + "ln1_b"])
            q = (h @ p[pre + "wq"]).reshape(-1, self.heads, dh).swapaxes(0, 1)
            k = (h @ p[pre + "wk"]).reshape(-1, self.heads, dh).swapaxes(0, 1)
            v = (h @ p[pre + "wv"]).reshape(-1, self.heads, dh).swapaxes(0, 1)
            att = _np_softmax(q @ k.swapaxes(-1, -2) / np.sqrt(dh))
            mixed = (att @ v).swapaxes(0, 1).reshape(-1, self.d) @ p[pre + "wo"]
            x = x + mixed
            h = _np_layer_norm(x, p[pre + "ln2_g"], p[pre + "ln2_b"])
            x = x + _np_gelu(h @ p[pre + "w1"] + p[pre + "b1"]) @ p[pre + "w2"] + p[pre + "b2"]
        return _np_layer_norm(x, p["lnf_g"], p["lnf_b"])


def encode_words(report: TokenizedReport, enc: FrozenTextEncoder) -> Tensor:
    """Per-word contextual features for the whole report; constant on the tape."""
    return ag.constant(enc.encode_ids(report.word_ids))


def encode_sentences_isolated(report: TokenizedReport, enc: FrozenTextEncoder,
                              pad_to: int | None = None) -> SentenceFeatures:
    """Each sentence encoded standalone then mean-pooled, so row s depends
    only on sentence s's token ids."""
    rows = [enc.encode_ids(sent).mean(axis=0) for sent in report.sentences()]
    return _as_sentence_features(np.stack(rows), pad_to)


def _as_sentence_features(rows: np.ndarray, pad_to: int | None) -> SentenceFeatures:
    n, d = rows.shape
    if pad_to is None or pad_to == n:
        return SentenceFeatures(ag.constant(rows), np.ones(n, dtype=bool))
    if pad_to < n:
        raise ShapeMismatchError(f"cannot pad {n} sentences into {pad_to} rows")
    padded = np.zeros((pad_to, d))
    padded[:n] = rows
    valid = np.zeros(pad_to, dtype=bool)
    valid[:n] = True
    return SentenceFeatures(ag.constant(padded), valid)


def span_average_matrix(spans: list[tuple[int, int]], num_tokens: int,
                        pad_to: int | None = None) -> np.ndarray:
    """Row-stochastic (D_S, D_T) matrix whose product with word features
    yields sentence-mean features."""
    cursor = 0
    for start, end in spans:
        if end <= start:
            raise ValueError(f"empty sentence span ({start}, {end})")
        if start != cursor:
            raise ShapeMismatchError(f"spans do not partition [0, {num_tokens}): {spans}")
        cursor = end
    if cursor != num_tokens:
        raise ShapeMismatchError(f"spans cover [0, {cursor}) of {num_tokens} tokens")
    rows = pad_to if pad_to is not None else len(spans)
    mat = np.zeros((rows, num_tokens))
    for s, (start, end) in enumerate(spans):
        mat[s, start:end] = 1.0 / (end - start)
    return mat


def pool_sentences(word_features: Tensor, spans: list[tuple[int, int]],
                   pad_to: int | None = None) -> SentenceFeatures:
    """Sentence-wise average pooling of word features (tape-preserving)."""
    word_features = ag.as_tensor(word_features)
    num_tokens = word_features.shape[0]
    mat = span_average_matrix(spans, num_tokens, pad_to)
    valid = np.zeros(mat.shape[0], dtype=bool)
    valid[:len(spans)] = True
    return SentenceFeatures(ag.matmul(ag.constant(mat), word_features), valid)


class SelfAttentionPool(ParamBag):
    """Learned-query attention pooling over valid rows of a sequence."""

    def __init__(self, d: int, rng: np.random.Generator):
        super().__init__()
        self.d = d
        self.query = self.param("query", trunc_normal(rng, (1, d)))
        self.wk = self.param("wk", trunc_normal(rng, (d, d)))
        self.wv = self.param("wv", trunc_normal(rng, (d, d)))

    def __call__(self, x: Tensor, valid: np.ndarray | None = None) -> Tensor:
        """(L, d) -> (d,); invalid rows get exactly zero weight."""
        x = ag.as_tensor(x)
        if valid is not None and not np.asarray(valid, dtype=bool).any():
            raise ValueError("self_attention_pool: all rows invalid")
        if x.shape[0] < 1:
            raise ValueError("self_attention_pool: empty sequence")
        keys = ag.matmul(x, self.wk)
        logits = ag.mul(ag.matmul(self.query, ag.transpose(keys)),
                        1.0 / np.sqrt(self.d))
        if valid is not None:
            logits = ag.add(logits, ag.constant(attention_mask_bias(valid)[None, :]))
        weights = ag.softmax(logits, axis=-1)
        pooled = ag.matmul(weights, ag.matmul(x, self.wv))
        return ag.reshape(pooled, (self.d,))

    def attention_weights(self, x: Tensor, valid: np.ndarray | None = None) -> np.ndarray:
        with ag.no_grad():
            keys = ag.matmul(ag.constant(x.data), self.wk)
            logits = ag.mul(ag.matmul(self.query, ag.transpose(keys)),
                            1.0 / np.sqrt(self.d))
            if valid is not None:
                logits = ag.add(logits, ag.constant(attention_mask_bias(valid)[None, :]))
            return ag.softmax(logits, axis=-1).data[0]


def mask_words(report: TokenizedReport, ratio: float,
               rng: np.random.Generator, mask_id: int):
    """Replace ceil(ratio * D_T) token ids with the reserved mask id.

    Returns (masked_ids, positions, original_ids); at least one position is
    always masked.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"mask ratio must be in (0, 1), got {ratio}")
    n_tokens = len(report.word_ids)
    n_masked = max(1, int(np.ceil(ratio * n_tokens)))
    positions = np.sort(rng.choice(n_tokens, size=n_masked, replace=False))
    masked = list(report.word_ids)
    originals = []
    for pos in positions:
        originals.append(masked[pos])
        masked[pos] = mask_id
    return masked, positions, np.asarray(originals, dtype=np.int64)
