"""Label-merging front ends.

Three variants produce a per-pixel fused representation from a label set:

* ``tlam_merge``: project each label to a d-wide token (affine + GeLU, with
  absent pixels replaced by the zero vector), add a learned per-label
  encoding, run the tokens of each pixel through a stack of transformer
  blocks, and average the output tokens (always dividing by N, in ascending
  label order).
* ``clam_merge``: the same projection followed by per-label stacks of
  d x d affine + GeLU layers, then the same token average.
* ``naive_concat``: plain channel concatenation in label order.

Merging is embarrassingly parallel over pixels; the grid can be split into
row chunks processed concurrently with bit-identical results.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import nn_ops, tape
from .label_model import LabelSet, validate_label_set
from .nn_ops import AttentionParams, BlockParams, init_block_params, xavier_uniform
from .tape import Var, no_grad
from .tensor_core import Rng, load_tensor, save_tensor

TLAM = "tlam"
CLAM = "clam"
NAIVE = "naive"

DEFAULT_D = 96
DEFAULT_BLOCKS = 3
DEFAULT_HEADS = 3


@dataclass
class LabelProjection:
    """Per-label affine map into the embedding space: A (d, C_k), b (d,)."""

    A: object
    b: object


@dataclass
class MergerParams:
    """All learnable parameters of one merger variant, keyed by label name."""

    variant: str
    d: int
    heads: int
    projections: dict = field(default_factory=dict)
    encodings: dict = field(default_factory=dict)
    blocks: list = field(default_factory=list)
    clam_stacks: dict = field(default_factory=dict)

    @property
    def n_blocks(self) -> int:
        if self.variant == CLAM:
            stacks = next(iter(self.clam_stacks.values()), [])
            return len(stacks)
        return len(self.blocks)

    def label_names(self) -> list[str]:
        return list(self.projections.keys())

    def lifted(self) -> "MergerParams":
        lift = tape.as_var
        return MergerParams(
            variant=self.variant,
            d=self.d,
            heads=self.heads,
            projections={
                k: LabelProjection(lift(p.A), lift(p.b)) for k, p in self.projections.items()
            },
            encodings={k: lift(e) for k, e in self.encodings.items()},
            blocks=[bp.lifted() for bp in self.blocks],
            clam_stacks={
                k: [LabelProjection(lift(p.A), lift(p.b)) for p in stack]
                for k, stack in self.clam_stacks.items()
            },
        )


def param_items(p: MergerParams):
    """Yield (canonical name, tensor) for every parameter, in definition order.

    The names double as serialization file stems and parameter-store keys.
    """
    for name, proj in p.projections.items():
        yield f"proj.{name}.A", proj.A
        yield f"proj.{name}.b", proj.b
    for name, enc in p.encodings.items():
        yield f"enc.{name}", enc
    for m, bp in enumerate(p.blocks):
        yield f"block{m}.ln1.gamma", bp.ln1_gamma
        yield f"block{m}.ln1.beta", bp.ln1_beta
        yield f"block{m}.attn.Wq", bp.attn.wq
        yield f"block{m}.attn.Wk", bp.attn.wk
        yield f"block{m}.attn.Wv", bp.attn.wv
        yield f"block{m}.attn.Wo", bp.attn.wo
        yield f"block{m}.attn.bo", bp.attn.bo
        yield f"block{m}.ln2.gamma", bp.ln2_gamma
        yield f"block{m}.ln2.beta", bp.ln2_beta
        yield f"block{m}.mlp.W1", bp.w1
        yield f"block{m}.mlp.b1", bp.b1
        yield f"block{m}.mlp.W2", bp.w2
        yield f"block{m}.mlp.b2", bp.b2
    for name, stack in p.clam_stacks.items():
        for i, proj in enumerate(stack):
            yield f"clam.{name}.{i}.A", proj.A
            yield f"clam.{name}.{i}.b", proj.b


def init_merger_params(
    labels,
    variant: str = TLAM,
    d: int = DEFAULT_D,
    n_blocks: int = DEFAULT_BLOCKS,
    heads: int = DEFAULT_HEADS,
    seed: int = 0,
    rng: Rng | None = None,
) -> MergerParams:
    """Fresh parameters bound to a label set (or a list of (name, channels)).

    Weight matrices are Xavier-uniform, biases zero, layer-norm gamma/beta
    1/0, and label encodings are 0.02-scaled normal draws; the draw order is
    fixed (projections, encodings, then blocks or stacks) so a seed pins the
    parameters bit-exactly.
    """
    if variant not in (TLAM, CLAM, NAIVE):
        raise ValueError(f"unknown merger variant {variant!r}")
    if isinstance(labels, LabelSet):
        spec = [(lab.name, lab.channels) for lab in labels]
    else:
        spec = [(str(n), int(c)) for n, c in labels]
    if rng is None:
        rng = Rng(seed)
    p = MergerParams(variant=variant, d=d, heads=heads)
    if variant == NAIVE:
        return p
    if d % heads != 0:
        raise ValueError(f"embedding width {d} not divisible by {heads} heads")
    for name, c in spec:
        p.projections[name] = LabelProjection(
            A=xavier_uniform(rng, (d, c), c, d), b=np.zeros(d)
        )
    for name, _ in spec:
        p.encodings[name] = 0.02 * np.array([rng.normal() for _ in range(d)])
    if variant == TLAM:
        p.blocks = [init_block_params(d, heads, rng) for _ in range(n_blocks)]
    else:
        for name, _ in spec:
            p.clam_stacks[name] = [
                LabelProjection(A=xavier_uniform(rng, (d, d), d, d), b=np.zeros(d))
                for _ in range(n_blocks)
            ]
    return p


def project_label(x, mask_bit: int, A, b):
    """Embed one label vector: gelu(A x + b), with absent inputs zeroed first."""
    x = np.asarray(x, dtype=np.float64)
    if mask_bit == 0:
        x = np.zeros_like(x)
    return nn_ops.gelu(nn_ops.linear(x, np.asarray(A, dtype=np.float64), np.asarray(b, dtype=np.float64)))


def _bind_check(s: LabelSet, p: MergerParams) -> None:
    validate_label_set(s)
    for lab in s:
        proj = p.projections.get(lab.name)
        if proj is None:
            raise ValueError(f"merger params have no projection for label {lab.name!r}")
        a = proj.A.value if isinstance(proj.A, Var) else proj.A
        if a.shape[1] != lab.channels:
            raise ValueError(
                f"label {lab.name!r} has {lab.channels} channels, projection expects {a.shape[1]}"
            )
        if p.variant == TLAM and lab.name not in p.encodings:
            raise ValueError(f"merger params have no encoding for label {lab.name!r}")
        if p.variant == CLAM and lab.name not in p.clam_stacks:
            raise ValueError(f"merger params have no stack for label {lab.name!r}")


def masked_inputs(s: LabelSet) -> list[np.ndarray]:
    """Per label, the (H*W, C_k) float64 values with absent pixels exactly zero."""
    out = []
    for lab in s:
        x = np.where(lab.mask[..., None] != 0, lab.values.astype(np.float64), 0.0)
        out.append(x.reshape(-1, lab.channels))
    return out


def _projected_tokens(xs: list[Var], names: list[str], p: MergerParams) -> list[Var]:
    toks = []
    for x, name in zip(xs, names):
        proj = p.projections[name]
        e = tape.gelu(tape.matmul(x, tape.transpose(proj.A, (1, 0))) + proj.b)
        toks.append(e)
    return toks


def _token_average(tokens: Var) -> Var:
    # ascending label-index accumulation, then division by N (absent included)
    n = tokens.value.shape[1]
    acc = tape.take_index(tokens, 0, axis=1)
    for k in range(1, n):
        acc = acc + tape.take_index(tokens, k, axis=1)
    return acc * (1.0 / n)


def tlam_graph(xs: list[Var], names: list[str], p: MergerParams) -> Var:
    """The differentiable merge for one pixel batch: (B, C_k) inputs -> (B, d)."""
    toks = _projected_tokens(xs, names, p)
    toks = [e + p.encodings[name] for e, name in zip(toks, names)]
    Z = tape.stack(toks, axis=1)
    for bp in p.blocks:
        Z = nn_ops._transformer_block(Z, bp)
    return _token_average(Z)


def clam_graph(xs: list[Var], names: list[str], p: MergerParams) -> Var:
    vs = _projected_tokens(xs, names, p)
    out = []
    for v, name in zip(vs, names):
        for proj in p.clam_stacks[name]:
            v = tape.gelu(tape.matmul(v, tape.transpose(proj.A, (1, 0))) + proj.b)
        out.append(v)
    return _token_average(tape.stack(out, axis=1))


def _merge_rows(s: LabelSet, p: MergerParams, graph, row0: int, row1: int) -> np.ndarray:
    w = s.width
    names = [lab.name for lab in s]
    xs = []
    for lab in s:
        vals = lab.values[row0:row1].astype(np.float64)
        x = np.where(lab.mask[row0:row1, :, None] != 0, vals, 0.0)
        xs.append(x.reshape(-1, lab.channels))
    with no_grad():
        out = graph([Var(x) for x in xs], names, p.lifted()).value
    return out.reshape(row1 - row0, w, p.d)


def _run_chunked(s: LabelSet, p: MergerParams, graph, threads: int, chunks: int | None) -> np.ndarray:
    h, w = s.height, s.width
    threads = max(1, int(threads))
    if chunks is None:
        chunks = threads
    chunks = max(1, min(int(chunks), h))
    bounds = [round(i * h / chunks) for i in range(chunks + 1)]
    spans = [(bounds[i], bounds[i + 1]) for i in range(chunks) if bounds[i] < bounds[i + 1]]
    out = np.empty((h, w, p.d), dtype=np.float64)
    if threads == 1 or len(spans) == 1:
        for r0, r1 in spans:
            out[r0:r1] = _merge_rows(s, p, graph, r0, r1)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = pool.map(lambda span: _merge_rows(s, p, graph, *span), spans)
            for (r0, r1), block in zip(spans, results):
                out[r0:r1] = block
    if not np.isfinite(out).all():
        raise FloatingPointError("merge produced non-finite values")
    return out


def tlam_merge(s: LabelSet, p: MergerParams, threads: int = 1, chunks: int | None = None) -> np.ndarray:
    """Transformer label merging; returns the H x W x d concept tensor."""
    if p.variant != TLAM:
        raise ValueError(f"params are for variant {p.variant!r}, expected {TLAM!r}")
    _bind_check(s, p)
    nn_ops.attention_mac_counter.reset()
    return _run_chunked(s, p, tlam_graph, threads, chunks)


def clam_merge(s: LabelSet, p: MergerParams, threads: int = 1, chunks: int | None = None) -> np.ndarray:
    """Stacked per-label affine+GeLU merging; returns H x W x d."""
    if p.variant != CLAM:
        raise ValueError(f"params are for variant {p.variant!r}, expected {CLAM!r}")
    _bind_check(s, p)
    return _run_chunked(s, p, clam_graph, threads, chunks)


def naive_concat(s: LabelSet) -> np.ndarray:
    """Channel-wise concatenation in label order (absent pixels contribute zeros)."""
    validate_label_set(s)
    parts = [
        np.where(lab.mask[..., None] != 0, lab.values, np.float32(0.0)) for lab in s
    ]
    return np.concatenate(parts, axis=-1)


def count_attention_macs(n_labels: int, d: int, h: int, l: int, pixels: int) -> int:
    """Exact multiply-accumulate count of the QK^T and A*V attention products."""
    if d % h != 0:
        raise ValueError(f"width {d} not divisible by {h} heads")
    return pixels * l * h * 2 * n_labels * n_labels * (d // h)


def _raw(t) -> np.ndarray:
    return t.value if isinstance(t, Var) else np.asarray(t)


def save_merger_params(p: MergerParams, dirpath) -> None:
    """Serialize to a directory: params.json plus one .tlt file per parameter."""
    os.makedirs(dirpath, exist_ok=True)
    labels = [
        {"name": name, "channels": int(_raw(proj.A).shape[1])}
        for name, proj in p.projections.items()
    ]
    doc = {
        "variant": p.variant,
        "d": p.d,
        "heads": p.heads,
        "n_blocks": p.n_blocks,
        "labels": labels,
    }
    with open(os.path.join(dirpath, "params.json"), "w") as f:
        json.dump(doc, f, indent=2)
        f.write("\n")
    for name, t in param_items(p):
        save_tensor(os.path.join(dirpath, name + ".tlt"), _raw(t).astype(np.float64))


def load_merger_params(dirpath) -> MergerParams:
    meta_path = os.path.join(dirpath, "params.json")
    with open(meta_path) as f:
        doc = json.load(f)
    variant, d, heads = doc["variant"], doc["d"], doc["heads"]
    n_blocks = doc["n_blocks"]
    p = MergerParams(variant=variant, d=d, heads=heads)
    if variant == NAIVE:
        return p
    load = lambda stem: load_tensor(os.path.join(dirpath, stem + ".tlt"))
    for entry in doc["labels"]:
        name = entry["name"]
        p.projections[name] = LabelProjection(A=load(f"proj.{name}.A"), b=load(f"proj.{name}.b"))
    for entry in doc["labels"]:
        name = entry["name"]
        p.encodings[name] = load(f"enc.{name}")
    if variant == TLAM:
        for m in range(n_blocks):
            attn = AttentionParams(
                heads=heads,
                wq=load(f"block{m}.attn.Wq"),
                wk=load(f"block{m}.attn.Wk"),
                wv=load(f"block{m}.attn.Wv"),
                wo=load(f"block{m}.attn.Wo"),
                bo=load(f"block{m}.attn.bo"),
            )
            p.blocks.append(
                BlockParams(
                    ln1_gamma=load(f"block{m}.ln1.gamma"),
                    ln1_beta=load(f"block{m}.ln1.beta"),
                    attn=attn,
                    ln2_gamma=load(f"block{m}.ln2.gamma"),
                    ln2_beta=load(f"block{m}.ln2.beta"),
                    w1=load(f"block{m}.mlp.W1"),
                    b1=load(f"block{m}.mlp.b1"),
                    w2=load(f"block{m}.mlp.W2"),
                    b2=load(f"block{m}.mlp.b2"),
                )
            )
    else:
        for entry in doc["labels"]:
            name = entry["name"]
            p.clam_stacks[name] = [
                LabelProjection(A=load(f"clam.{name}.{i}.A"), b=load(f"clam.{name}.{i}.b"))
                for i in range(n_blocks)
            ]
    return p
