"""Tiny differentiable pixel model with hand-written gradients.

Pipeline per pixel::

    raw = tanh(P^T (patch - 0.5) + b)     frozen random features, (D0,)
    a   = W^T raw                         learnable embed, (D,)
    e   = a / |a|                         unit embedding (zero if a == 0)
    p   = softmax(V^T e)                  semantic probabilities, (C,)

Patches are ``k x k x 3`` windows over a reflect-padded image, flattened in
(row, col, channel) order.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from duallevel.numerics import Rng, l2_normalize_rows

LOG_FLOOR = 1e-12


@dataclass
class PixelModel:
    P: np.ndarray  # (k*k*3, D0) frozen
    b: np.ndarray  # (D0,) frozen
    W: np.ndarray  # (D0, D)
    V: np.ndarray  # (D, C)
    patch: int

    @classmethod
    def create(cls, rng: Rng, n_classes: int, patch: int = 3, raw_dim: int = 64, embed_dim: int = 16,
               proj_scale: float = 4.0, init_scale: float = 0.5) -> PixelModel:
        fan_in = patch * patch * 3
        P = rng.standard_normal((fan_in, raw_dim)) * (proj_scale / np.sqrt(fan_in))
        b = rng.uniform(-1.0, 1.0, raw_dim)
        W = rng.standard_normal((raw_dim, embed_dim)) / np.sqrt(raw_dim)
        V = rng.standard_normal((embed_dim, n_classes)) * init_scale
        return cls(P, b, W, V, patch)

    @property
    def n_classes(self) -> int:
        return self.V.shape[1]

    @property
    def embed_dim(self) -> int:
        return self.W.shape[1]

    def copy(self) -> PixelModel:
        return PixelModel(self.P.copy(), self.b.copy(), self.W.copy(), self.V.copy(), self.patch)


def patches(image: np.ndarray, k: int) -> np.ndarray:
    """(H*W, k*k*3) patch matrix of a reflect-padded (H, W, 3) image."""
    h, w, ch = image.shape
    r = k // 2
    padded = np.pad(image, ((r, r), (r, r), (0, 0)), mode="reflect")
    win = sliding_window_view(padded, (k, k), axis=(0, 1))  # (H, W, 3, k, k)
    return np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2)).reshape(h * w, k * k * ch)


def featurize(model: PixelModel, image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    return np.tanh((patches(img, model.patch) - 0.5) @ model.P + model.b)


@dataclass
class Activations:
    raw: np.ndarray  # (N, D0)
    norms: np.ndarray  # (N,)
    e: np.ndarray  # (N, D)
    probs: np.ndarray  # (N, C)


def forward_raw(model: PixelModel, raw: np.ndarray) -> Activations:
    a = raw @ model.W
    e, norms = l2_normalize_rows(a)
    logits = e @ model.V
    logits -= logits.max(axis=1, keepdims=True)
    ex = np.exp(logits)
    probs = ex / ex.sum(axis=1, keepdims=True)
    return Activations(raw, norms, e, probs)


def forward(model: PixelModel, image) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(features (H, W, D), probs (H, W, C))`` for one image."""
    img = np.asarray(image, dtype=np.float64)
    h, w, _ = img.shape
    act = forward_raw(model, featurize(model, img))
    return act.e.reshape(h, w, -1), act.probs.reshape(h, w, -1)


def backward(model: PixelModel, act: Activations, d_logits: np.ndarray | None, d_embed: np.ndarray | None):
    """Chain rule from logit/embedding gradients of one image to ``(dW, dV)``.

    ``d_embed`` is the gradient with respect to the unit embedding ``e``
    arriving from outside the classifier (the instance loss).
    """
    n, d = act.e.shape
    dV = np.zeros_like(model.V)
    de = np.zeros((n, d))
    if d_logits is not None:
        dV = act.e.T @ d_logits
        de += d_logits @ model.V.T
    if d_embed is not None:
        de += d_embed
    radial = np.einsum("nd,nd->n", act.e, de)
    safe = np.where(act.norms > 0.0, act.norms, 1.0)
    da = (de - act.e * radial[:, None]) / safe[:, None]
    da[act.norms == 0.0] = 0.0
    dW = act.raw.T @ da
    if not (np.all(np.isfinite(dW)) and np.all(np.isfinite(dV))):
        raise FloatingPointError(
            f"non-finite gradient: |dW|max={np.nanmax(np.abs(dW))}, |dV|max={np.nanmax(np.abs(dV))}"
        )
    return dW, dV


# -- checkpoint ---------------------------------------------------------------

CKPT_MAGIC = b"DLCK"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sIIIIII")


def save_checkpoint(model: PixelModel, bank_bytes: bytes) -> bytes:
    """Header {magic, version, patch, fan_in, D0, D, C}, then P, b, W, V as
    little-endian f64, then a u64 length and the serialized bank."""
    fan_in, d0 = model.P.shape
    head = _CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, model.patch, fan_in, d0, model.W.shape[1], model.V.shape[1])
    body = b"".join(x.astype("<f8").tobytes() for x in (model.P, model.b, model.W, model.V))
    return head + body + struct.pack("<Q", len(bank_bytes)) + bank_bytes


def load_checkpoint(data: bytes) -> tuple[PixelModel, bytes]:
    if len(data) < _CKPT_HEADER.size:
        raise ValueError("checkpoint truncated")
    magic, version, patch, fan_in, d0, d, c = _CKPT_HEADER.unpack_from(data, 0)
    if magic != CKPT_MAGIC:
        raise ValueError(f"bad checkpoint magic {magic!r}")
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    shapes = [(fan_in, d0), (d0,), (d0, d), (d, c)]
    off = _CKPT_HEADER.size
    arrays = []
    for shp in shapes:
        count = int(np.prod(shp))
        if len(data) < off + 8 * count:
            raise ValueError("checkpoint truncated")
        arrays.append(np.frombuffer(data, "<f8", count, off).astype(np.float64).reshape(shp))
        off += 8 * count
    if len(data) < off + 8:
        raise ValueError("checkpoint truncated")
    (n,) = struct.unpack_from("<Q", data, off)
    off += 8
    if len(data) != off + n:
        raise ValueError("checkpoint size mismatch")
    return PixelModel(*arrays, patch=patch), data[off:]
