"""Differentiable primitives of the per-pixel label transformer: GeLU, affine
maps, layer normalization, softmax, multi-head self-attention over label
tokens, and the two pre-norm residual blocks.

Every public op accepts either plain numpy arrays (evaluated without
recording) or tape Vars (recorded for reverse-mode differentiation), and
returns the matching kind.  Token matrices are (N, d) for one pixel or
(B, N, d) for a batch of pixels; all math is per pixel either way.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tape
from .tape import Var, as_var, no_grad

LN_EPS = 1e-5


class MacCounter:
    """Running count of attention multiply-accumulates (QK^T and A*V only)."""

    __slots__ = ("count",)

    def __init__(self):
        self.count = 0

    def reset(self) -> None:
        self.count = 0

    def add(self, n: int) -> None:
        self.count += n


attention_mac_counter = MacCounter()


def _has_vars(*objs) -> bool:
    return any(isinstance(o, Var) for o in objs)


@dataclass
class AttentionParams:
    """Multi-head attention weights.

    wq/wk/wv hold the per-head maps stacked as (heads, d, d_head); wo is the
    learned output map (d, d) with bias bo (d,).
    """

    heads: int
    wq: object
    wk: object
    wv: object
    wo: object
    bo: object

    def tensors(self):
        return [self.wq, self.wk, self.wv, self.wo, self.bo]

    def lifted(self) -> "AttentionParams":
        return AttentionParams(self.heads, *[as_var(t) for t in self.tensors()])


@dataclass
class BlockParams:
    """One transformer block: pre-norm attention then pre-norm MLP."""

    ln1_gamma: object
    ln1_beta: object
    attn: AttentionParams
    ln2_gamma: object
    ln2_beta: object
    w1: object
    b1: object
    w2: object
    b2: object

    def tensors(self):
        return [
            self.ln1_gamma,
            self.ln1_beta,
            *self.attn.tensors(),
            self.ln2_gamma,
            self.ln2_beta,
            self.w1,
            self.b1,
            self.w2,
            self.b2,
        ]

    def lifted(self) -> "BlockParams":
        return BlockParams(
            as_var(self.ln1_gamma),
            as_var(self.ln1_beta),
            self.attn.lifted(),
            as_var(self.ln2_gamma),
            as_var(self.ln2_beta),
            as_var(self.w1),
            as_var(self.b1),
            as_var(self.w2),
            as_var(self.b2),
        )


def xavier_uniform(rng, shape, fan_in: int, fan_out: int) -> np.ndarray:
    """Uniform(+-sqrt(6/(fan_in+fan_out))) draws filled in row-major order."""
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    n = int(np.prod(shape))
    flat = np.array([rng.uniform() for _ in range(n)], dtype=np.float64)
    return ((2.0 * flat - 1.0) * bound).reshape(shape)


def init_attention_params(d: int, heads: int, rng) -> AttentionParams:
    if d % heads != 0:
        raise ValueError(f"token width {d} not divisible by {heads} heads")
    dh = d // heads
    wq = xavier_uniform(rng, (heads, d, dh), d, dh)
    wk = xavier_uniform(rng, (heads, d, dh), d, dh)
    wv = xavier_uniform(rng, (heads, d, dh), d, dh)
    wo = xavier_uniform(rng, (d, d), d, d)
    bo = np.zeros(d)
    return AttentionParams(heads, wq, wk, wv, wo, bo)


def init_block_params(d: int, heads: int, rng) -> BlockParams:
    d_ff = 4 * d
    return BlockParams(
        ln1_gamma=np.ones(d),
        ln1_beta=np.zeros(d),
        attn=init_attention_params(d, heads, rng),
        ln2_gamma=np.ones(d),
        ln2_beta=np.zeros(d),
        w1=xavier_uniform(rng, (d, d_ff), d, d_ff),
        b1=np.zeros(d_ff),
        w2=xavier_uniform(rng, (d_ff, d), d_ff, d),
        b2=np.zeros(d),
    )


def gelu(x):
    """GeLU, tanh approximation: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))."""
    if isinstance(x, Var):
        return tape.gelu(x)
    arr = np.asarray(x, dtype=np.float64)
    with no_grad():
        out = tape.gelu(Var(arr)).value
    return float(out) if np.isscalar(x) or arr.ndim == 0 else out


def linear(x, A, b):
    """Affine map A @ x + b for a vector x (C,) or a batch (..., C)."""
    if _has_vars(x, A, b):
        return _linear(as_var(x), as_var(A), as_var(b))
    with no_grad():
        return _linear(as_var(x), as_var(A), as_var(b)).value


def _linear(x: Var, A: Var, b: Var) -> Var:
    d, c = A.value.shape
    if x.value.shape[-1] != c:
        raise ValueError(f"linear: x has {x.value.shape[-1]} channels, A expects {c}")
    single = x.value.ndim == 1
    lead = (1,) if single else x.value.shape[:-1]
    flat = tape.reshape(x, (int(np.prod(lead)), c))
    out = tape.matmul(flat, tape.transpose(A, (1, 0))) + b
    return tape.reshape(out, (d,) if single else lead + (d,))


def layer_norm(x, gamma, beta, eps: float = LN_EPS):
    """Per-token normalization over the last axis (biased variance)."""
    if _has_vars(x, gamma, beta):
        return tape.layer_norm(as_var(x), as_var(gamma), as_var(beta), eps)
    with no_grad():
        return tape.layer_norm(as_var(x), as_var(gamma), as_var(beta), eps).value


def softmax(v):
    """Stable softmax over the last axis; rows sum to 1."""
    if isinstance(v, Var):
        return tape.softmax(v)
    with no_grad():
        return tape.softmax(as_var(v)).value


def multi_head_self_attention(Z, p: AttentionParams):
    """Standard scaled dot-product attention across the N label tokens.

    Per head j: Q = Z Wq_j, K = Z Wk_j, V = Z Wv_j, A = softmax(Q K^T / sqrt(d_h)),
    head_j = A V; heads are concatenated and mapped through Wo with bias bo.
    """
    if _has_vars(Z, *p.tensors()):
        return _mhsa(as_var(Z), p.lifted())
    with no_grad():
        return _mhsa(as_var(Z), p.lifted()).value


def _mhsa(Z: Var, p: AttentionParams) -> Var:
    in_shape = Z.value.shape
    if len(in_shape) < 2:
        raise ValueError("token matrix must be (N, d) or (B, N, d)")
    n, d = in_shape[-2], in_shape[-1]
    heads, d_model, dh = p.wq.value.shape
    if d != d_model or heads * dh != d:
        raise ValueError(f"attention params sized for d={d_model}, got tokens of width {d}")
    batch = int(np.prod(in_shape[:-2])) if len(in_shape) > 2 else 1

    zb = tape.reshape(Z, (batch, 1, n, d))
    q = tape.matmul(zb, p.wq)  # (batch, heads, n, dh)
    k = tape.matmul(zb, p.wk)
    v = tape.matmul(zb, p.wv)
    scores = tape.matmul(q, tape.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    attn = tape.softmax(scores)
    mixed = tape.matmul(attn, v)  # (batch, heads, n, dh)
    attention_mac_counter.add(2 * batch * heads * n * n * dh)

    merged = tape.reshape(tape.transpose(mixed, (0, 2, 1, 3)), (batch, n, d))
    out = tape.matmul(merged, p.wo) + p.bo
    return tape.reshape(out, in_shape)


def msa_block(Z, p: BlockParams):
    """Pre-norm attention with residual: MSA(LN(Z)) + Z."""
    if _has_vars(Z, *p.tensors()):
        return _msa_block(as_var(Z), p.lifted())
    with no_grad():
        return _msa_block(as_var(Z), p.lifted()).value


def _msa_block(Z: Var, p: BlockParams) -> Var:
    normed = tape.layer_norm(Z, p.ln1_gamma, p.ln1_beta, LN_EPS)
    return _mhsa(normed, p.attn) + Z


def mlp_block(Z, p: BlockParams):
    """Pre-norm token-wise MLP with residual: MLP(LN(Z)) + Z."""
    if _has_vars(Z, *p.tensors()):
        return _mlp_block(as_var(Z), p.lifted())
    with no_grad():
        return _mlp_block(as_var(Z), p.lifted()).value


def _mlp_block(Z: Var, p: BlockParams) -> Var:
    normed = tape.layer_norm(Z, p.ln2_gamma, p.ln2_beta, LN_EPS)
    hidden = tape.gelu(tape.matmul(normed, p.w1) + p.b1)
    return tape.matmul(hidden, p.w2) + p.b2 + Z


def transformer_block(Z, p: BlockParams):
    """One full block: the attention sub-block followed by the MLP sub-block."""
    if _has_vars(Z, *p.tensors()):
        return _transformer_block(as_var(Z), p.lifted())
    with no_grad():
        return _transformer_block(as_var(Z), p.lifted()).value


def _transformer_block(Z: Var, p: BlockParams) -> Var:
    return _mlp_block(_msa_block(Z, p), p)
