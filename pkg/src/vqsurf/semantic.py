"""Pluggable image embedders and the cosine-distance consistency loss.

The builtin embedder is a cheap, fully differentiable stand-in for a large
pretrained image encoder: channel statistics plus a coarse luma layout,
L2-normalized. A precomputed embedder serves externally supplied vectors
keyed by view id (gradients then flow only through the synthetic side).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


@dataclass
class Embedding:
    vector: Tensor
    source: str  # "builtin" | "precomputed"

    @property
    def dim(self) -> int:
        return self.vector.shape[-1]


class BuiltinEmbedder:
    """Per-channel means and standard deviations plus a 4x4 average-pooled
    luma grid, L2-normalized (22 dimensions)."""

    dim = 22

    def embed(self, image, view_id: str | None = None) -> Embedding:
        img = image if isinstance(image, Tensor) else Tensor(image)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ad.ShapeError(
                f"embed: expected an (H,W,3) image, got {img.shape}"
            )
        h, w = img.shape[:2]
        if h % 4 or w % 4:
            raise ad.ShapeError(
                f"embed: image {w}x{h} not divisible by the 4x4 pooling grid"
            )
        means = ad.tensor_mean(img, axis=(0, 1))
        centered = img - means.reshape(1, 1, 3)
        stds = ad.sqrt(ad.tensor_mean(centered * centered, axis=(0, 1)))
        luma = (img.reshape(h * w, 3) @ Tensor(LUMA_WEIGHTS[:, None]))
        pooled = ad.tensor_mean(
            luma.reshape(4, h // 4, 4, w // 4), axis=(1, 3)
        ).reshape(16)
        vec = ad.concat([means, stds, pooled], axis=0)
        norm = ad.l2_norm(vec)
        if float(norm.data) == 0.0:
            raise ValueError("embed: zero-norm embedding (blank image)")
        return Embedding(vec / norm, "builtin")


class PrecomputedEmbedder:
    """Serves embeddings from a JSON map of view id to float list."""

    def __init__(self, path):
        path = Path(path)
        try:
            table = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValueError(f"cannot read embedding file {path}: {exc}") from exc
        if not isinstance(table, dict) or not table:
            raise ValueError(f"{path}: expected a non-empty id->vector map")
        dims = {len(v) for v in table.values()}
        if len(dims) != 1:
            raise ValueError(f"{path}: embedding dimensions are not uniform")
        self.dim = dims.pop()
        self._table = {k: np.asarray(v, dtype=np.float64)
                       for k, v in table.items()}
        self._path = path

    def embed(self, image=None, view_id: str | None = None) -> Embedding:
        if view_id not in self._table:
            raise KeyError(
                f"no precomputed embedding for view {view_id!r} in {self._path}"
            )
        return Embedding(Tensor(self._table[view_id]), "precomputed")


def semantic_loss(a, b) -> Tensor:
    """Cosine distance between two embeddings: 0 parallel, 1 orthogonal,
    2 antiparallel. Differentiable wherever the embedder is."""
    va = a.vector if isinstance(a, Embedding) else a
    vb = b.vector if isinstance(b, Embedding) else b
    va = va if isinstance(va, Tensor) else Tensor(va)
    vb = vb if isinstance(vb, Tensor) else Tensor(vb)
    if va.shape != vb.shape:
        raise ad.ShapeError(
            f"semantic_loss: embedding shapes {va.shape} and {vb.shape} differ"
        )
    na, nb = ad.l2_norm(va), ad.l2_norm(vb)
    if float(na.data) == 0.0 or float(nb.data) == 0.0:
        raise ValueError("semantic_loss: zero-norm embedding")
    return 1.0 - ad.tensor_sum(va * vb) / (na * nb)
