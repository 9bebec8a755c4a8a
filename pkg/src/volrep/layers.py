"""Shared tape-level building blocks: parameter containers, layer norm,
multi-head self-attention, and feed-forward sublayers."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import autograd as ag
from .autograd import Tensor


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled until within 2 std (standard ViT-style init)."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out


class ParamBag:
    """Flat, insertion-ordered registry of named parameters and children.

    Insertion order fixes optimizer/checkpoint traversal order, which the
    determinism guarantees rely on.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, ParamBag] = {}

    def param(self, name: str, array) -> Tensor:
        t = ag.parameter(array)
        self._params[name] = t
        return t

    def child(self, name: str, bag: "ParamBag") -> "ParamBag":
        self._children[name] = bag
        return bag

    def named_params(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, t in self._params.items():
            yield prefix + name, t
        for cname, child in self._children.items():
            yield from child.named_params(prefix + cname + ".")

    def params(self) -> list[Tensor]:
        return [t for _, t in self.named_params()]


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    mu = ag.tmean(x, axis=-1, keepdims=True)
    centered = ag.sub(x, mu)
    var = ag.tmean(ag.mul(centered, centered), axis=-1, keepdims=True)
    normed = ag.div(centered, ag.sqrt(ag.add(var, eps)))
    return ag.add(ag.mul(normed, gain), bias)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = ag.matmul(x, w)
    return out if b is None else ag.add(out, b)


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(L, d) -> (heads, L, d_head)."""
    length, d = x.shape
    return ag.transpose(ag.reshape(x, (length, heads, d // heads)), (1, 0, 2))


def merge_heads(x: Tensor) -> Tensor:
    """(heads, L, d_head) -> (L, d)."""
    heads, length, dh = x.shape
    return ag.reshape(ag.transpose(x, (1, 0, 2)), (length, heads * dh))


def attention_mask_bias(valid: np.ndarray) -> np.ndarray:
    """0 where valid, -1e30 where padded; softmax then zeroes padded slots."""
    return np.where(np.asarray(valid, dtype=bool), 0.0, -1e30)


class SelfAttention(ParamBag):
    """Multi-head self-attention with output projection (no dropout)."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        super().__init__()
        if d % heads:
            raise ValueError(f"width {d} not divisible by {heads} heads")
        self.d, self.heads = d, heads
        self.wq = self.param("wq", trunc_normal(rng, (d, d)))
        self.wk = self.param("wk", trunc_normal(rng, (d, d)))
        self.wv = self.param("wv", trunc_normal(rng, (d, d)))
        self.wo = self.param("wo", trunc_normal(rng, (d, d)))
        self.bo = self.param("bo", np.zeros(d))

    def __call__(self, x: Tensor, valid: np.ndarray | None = None) -> Tensor:
        q = split_heads(linear(x, self.wq), self.heads)
        k = split_heads(linear(x, self.wk), self.heads)
        v = split_heads(linear(x, self.wv), self.heads)
        scale = 1.0 / np.sqrt(self.d // self.heads)
        logits = ag.mul(ag.matmul(q, ag.swapaxes(k, -1, -2)), scale)
        if valid is not None:
            logits = ag.add(logits, ag.constant(attention_mask_bias(valid)[None, None, :]))
        weights = ag.softmax(logits, axis=-1)
        return linear(merge_heads(ag.matmul(weights, v)), self.wo, self.bo)


class FeedForward(ParamBag):
    def __init__(self, d: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.w1 = self.param("w1", trunc_normal(rng, (d, hidden)))
        self.b1 = self.param("b1", np.zeros(hidden))
        self.w2 = self.param("w2", trunc_normal(rng, (hidden, d)))
        self.b2 = self.param("b2", np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return linear(ag.gelu(linear(x, self.w1, self.b1)), self.w2, self.b2)


class LayerNormParams(ParamBag):
    def __init__(self, d: int):
        super().__init__()
        self.g = self.param("g", np.ones(d))
        self.b = self.param("b", np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.g, self.b)


class TransformerBlock(ParamBag):
    """Pre-norm self-attention + feed-forward with residuals."""

    def __init__(self, d: int, heads: int, ffn_mult: int, rng: np.random.Generator):
        super().__init__()
        self.ln1 = self.child("ln1", LayerNormParams(d))
        self.attn = self.child("attn", SelfAttention(d, heads, rng))
        self.ln2 = self.child("ln2", LayerNormParams(d))
        self.ffn = self.child("ffn", FeedForward(d, ffn_mult * d, rng))

    def __call__(self, x: Tensor, valid: np.ndarray | None = None) -> Tensor:
        x = ag.add(x, self.attn(self.ln1(x), valid))
        return ag.add(x, self.ffn(self.ln2(x)))
