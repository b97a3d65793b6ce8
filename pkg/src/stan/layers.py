"""Transformer building blocks shared by the backbone, text encoder and branch."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .numerics import Tensor, gelu, layer_norm, softmax


@dataclass
class AttentionParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    heads: int = dataclasses.field(default=1, metadata={"static": True})


@dataclass
class BlockParams:
    """Pre-norm attention + MLP block; the template every layer follows."""

    ln1_g: Tensor
    ln1_b: Tensor
    attn: AttentionParams
    ln2_g: Tensor
    ln2_b: Tensor
    fc1_w: Tensor
    fc1_b: Tensor
    fc2_w: Tensor
    fc2_b: Tensor


def named_tensors(obj, prefix: str = "") -> dict[str, Tensor]:
    """Flatten a (nested) parameter container into ``{dotted.name: Tensor}``."""
    out: dict[str, Tensor] = {}
    if isinstance(obj, Tensor):
        out[prefix] = obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            value = getattr(obj, f.name)
            if value is None or f.metadata.get("static"):
                continue
            out.update(named_tensors(value, f"{prefix}.{f.name}" if prefix else f.name))
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            out.update(named_tensors(item, f"{prefix}.{i}" if prefix else str(i)))
    elif isinstance(obj, dict):
        for k, item in obj.items():
            out.update(named_tensors(item, f"{prefix}.{k}" if prefix else str(k)))
    return out


def set_requires_grad(obj, flag: bool) -> None:
    for t in named_tensors(obj).values():
        t.requires_grad = flag
        t.grad = None


# -- init -------------------------------------------------------------------

def gaussian(rng: np.random.Generator, shape, std: float, requires_grad: bool = True) -> Tensor:
    return Tensor(rng.standard_normal(shape) * std, requires_grad=requires_grad)


def orthogonal(rng: np.random.Generator, n: int, m: int, gain: float = 1.0, requires_grad: bool = True) -> Tensor:
    a = rng.standard_normal((max(n, m), min(n, m)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if n < m:
        q = q.T
    return Tensor(gain * q[:n, :m], requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = True) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = True) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


def init_attention(rng, D: int, heads: int, out_gain: float = 1.0, zero_out: bool = False, requires_grad=True):
    return AttentionParams(
        w_q=orthogonal(rng, D, D, requires_grad=requires_grad),
        w_k=orthogonal(rng, D, D, requires_grad=requires_grad),
        w_v=orthogonal(rng, D, D, requires_grad=requires_grad),
        w_o=zeros((D, D), requires_grad) if zero_out else orthogonal(rng, D, D, out_gain, requires_grad),
        heads=heads,
    )


def init_block(rng, D: int, heads: int, mlp_ratio: int = 4, out_gain: float = 1.0, zero_out: bool = False,
               requires_grad: bool = True) -> BlockParams:
    H = mlp_ratio * D
    fc2 = (
        zeros((H, D), requires_grad)
        if zero_out
        else gaussian(rng, (H, D), out_gain / np.sqrt(H), requires_grad)
    )
    return BlockParams(
        ln1_g=ones(D, requires_grad),
        ln1_b=zeros(D, requires_grad),
        attn=init_attention(rng, D, heads, out_gain, zero_out, requires_grad),
        ln2_g=ones(D, requires_grad),
        ln2_b=zeros(D, requires_grad),
        fc1_w=gaussian(rng, (D, H), 1.0 / np.sqrt(D), requires_grad),
        fc1_b=zeros(H, requires_grad),
        fc2_w=fc2,
        fc2_b=zeros(D, requires_grad),
    )


# -- forward ----------------------------------------------------------------

def attention(x: Tensor, p: AttentionParams, mask: np.ndarray | None = None) -> Tensor:
    """Multi-head self-attention over the second-to-last axis of ``x``.

    ``mask`` is added to the attention scores and must broadcast against
    ``[..., heads, N, N]``.
    """
    *lead, n, d = x.shape
    h = p.heads
    dh = d // h

    def split(t: Tensor) -> Tensor:
        return t.reshape(*lead, n, h, dh).swapaxes(-2, -3)

    q, k, v = split(x @ p.w_q), split(x @ p.w_k), split(x @ p.w_v)
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh))
    if mask is not None:
        scores = scores + Tensor(mask)
    weights = softmax(scores, axis=-1)
    out = (weights @ v).swapaxes(-2, -3).reshape(*lead, n, d)
    return out @ p.w_o


def mlp(x: Tensor, p: BlockParams) -> Tensor:
    return gelu(x @ p.fc1_w + p.fc1_b) @ p.fc2_w + p.fc2_b


def block_forward(x: Tensor, p: BlockParams, eps: float = 1e-5, mask: np.ndarray | None = None) -> Tensor:
    x = x + attention(layer_norm(x, p.ln1_g, p.ln1_b, eps), p.attn, mask)
    return x + mlp(layer_norm(x, p.ln2_g, p.ln2_b, eps), p)
