"""Vector-quantization codebook, straight-through gradient routing, VQ-VAE
losses, and the convolutional VAE whose decoder restores quantized feature
grids to full resolution."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from . import nn
from .autodiff import Tensor


class Codebook:
    """N prototype vectors of width n_q plus usage diagnostics."""

    def __init__(self, entries, trainable: bool = False):
        arr = np.asarray(entries, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1:
            raise ValueError("codebook entries must be a non-empty N x n_q matrix")
        if not np.isfinite(arr).all():
            raise ValueError("codebook entries must be finite")
        self.entries = Tensor(arr, requires_grad=trainable)
        self.usage_counts = np.zeros(arr.shape[0], dtype=np.int64)
        self.last_used = np.zeros(arr.shape[0], dtype=np.int64)

    @classmethod
    def uniform_init(cls, size: int, width: int, rng: np.random.Generator,
                     trainable: bool = True) -> "Codebook":
        span = 1.0 / size
        return cls(rng.uniform(-span, span, size=(size, width)),
                   trainable=trainable)

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def width(self) -> int:
        return self.entries.shape[1]


@dataclass
class QuantizedGrid:
    """Nearest-entry assignment of a continuous grid.

    ``z_q[i, j]`` is an exact copy of the codebook row at ``indices[i, j]``;
    ``z_continuous`` keeps the pre-quantization grid for gradient routing.
    """

    indices: np.ndarray      # (h, w) int
    z_q: np.ndarray          # (h, w, n_q)
    z_continuous: np.ndarray  # (h, w, n_q)


def quantize(z, book: Codebook, chunk: int = 128) -> QuantizedGrid:
    """Map each grid cell to its L2-nearest codebook entry.

    Ties resolve to the lowest index. The scan computes squared distances
    directly (no expansion tricks) so it is elementwise identical to a
    brute-force per-entry sweep.
    """
    data = z.data if isinstance(z, Tensor) else np.asarray(z, dtype=np.float64)
    if book.size < 1:
        raise ValueError("quantize: empty codebook")
    if data.shape[-1] != book.width:
        raise ad.ShapeError(
            f"quantize: grid width {data.shape[-1]} does not match codebook "
            f"width {book.width}"
        )
    flat = data.reshape(-1, book.width)
    entries = book.entries.data
    best_val = np.full(flat.shape[0], np.inf)
    best_idx = np.zeros(flat.shape[0], dtype=np.int64)
    for lo in range(0, book.size, chunk):
        block = entries[lo:lo + chunk]
        dist = ((flat[:, None, :] - block[None, :, :]) ** 2).sum(axis=-1)
        cand_val = dist.min(axis=1)
        cand_idx = dist.argmin(axis=1) + lo
        better = cand_val < best_val
        best_val[better] = cand_val[better]
        best_idx[better] = cand_idx[better]
    shape = data.shape[:-1]
    indices = best_idx.reshape(shape)
    z_q = entries[best_idx].reshape(data.shape)
    return QuantizedGrid(indices, z_q, data)


def straight_through(z_q, z_hat: Tensor) -> Tensor:
    """Forward the quantized values; route gradients to the continuous grid
    as identity. Nothing flows to the codebook through this op."""
    data = z_q.z_q if isinstance(z_q, QuantizedGrid) else np.asarray(z_q)
    if data.shape != z_hat.shape:
        raise ad.ShapeError(
            f"straight_through: shapes {data.shape} and {z_hat.shape} differ"
        )

    def grad_fn(g):
        return (g,)

    return ad._from_op(data.copy(), (z_hat,), grad_fn)


def codebook_lookup(book: Codebook, indices: np.ndarray) -> Tensor:
    """Differentiable gather of codebook rows (gradients reach the entries)."""
    flat = np.asarray(indices).reshape(-1)
    rows = ad.take_rows(book.entries, flat)
    return rows.reshape(tuple(np.shape(indices)) + (book.width,))


def vqvae_loss(x, x_hat: Tensor, z_hat: Tensor, book: Codebook,
               qgrid: QuantizedGrid, beta: float = 0.25,
               sg_z_hat=None):
    """Reconstruction + codebook + commitment terms (all mean-squared).

    The codebook term sees the encoder output through a stop-gradient, the
    commitment term sees the codebook through one. ``sg_z_hat`` pins the
    stop-gradient copy of the encoder output to a fixed array, which lets
    finite-difference checks evaluate the same function the tape
    differentiates. Returns the scalar total and detached per-term values.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.shape != x_hat.shape:
        raise ad.ShapeError(
            f"vqvae_loss: image shapes {x.shape} and {x_hat.shape} differ"
        )
    recon = ad.tensor_mean((x - x_hat) * (x - x_hat))
    z_q_live = codebook_lookup(book, qgrid.indices)
    z_sg = Tensor(z_hat.data if sg_z_hat is None else sg_z_hat)  # sg(z_hat)
    diff_cb = z_sg - z_q_live
    codebook_term = ad.tensor_mean(diff_cb * diff_cb)
    diff_commit = Tensor(qgrid.z_q) - z_hat  # sg(z_q)
    commit_term = ad.tensor_mean(diff_commit * diff_commit)
    total = recon + codebook_term + beta * commit_term
    parts = {
        "recon": float(recon.data),
        "codebook": float(codebook_term.data),
        "commit": float(commit_term.data),
    }
    return total, parts


def _chw(image) -> Tensor:
    t = image if isinstance(image, Tensor) else Tensor(image)
    return ad.transpose(t, (2, 0, 1))


def _hwc(image: Tensor) -> Tensor:
    return ad.transpose(image, (1, 2, 0))


class VqVae:
    """Conv encoder to a quarter-resolution n_q grid, codebook, and a conv
    decoder back to full resolution with a final sigmoid."""

    def __init__(self, rng: np.random.Generator, n_q: int = 16,
                 codebook_size: int = 2048,
                 channels: Sequence[int] = (32, 64)):
        c1, c2 = channels
        self.n_q = n_q
        self.channels = (c1, c2)
        self.encoder = nn.ConvStack(
            [nn.Conv2d(3, c1, 4, 2, 1, rng),
             nn.Conv2d(c1, c2, 4, 2, 1, rng),
             nn.Conv2d(c2, n_q, 3, 1, 1, rng)],
            ["relu", "relu", None],
        )
        self.decoder = nn.ConvStack(
            [nn.Conv2d(n_q, c2, 3, 1, 1, rng),
             nn.ConvTranspose2d(c2, c1, 4, 2, 1, rng),
             nn.ConvTranspose2d(c1, c1, 4, 2, 1, rng),
             nn.Conv2d(c1, 3, 3, 1, 1, rng)],
            ["relu", "relu", "relu", "sigmoid"],
        )
        assert self.encoder.spatial_scale == 0.25
        assert self.decoder.spatial_scale == 4.0
        self.book = Codebook.uniform_init(codebook_size, n_q, rng)

    def encode(self, image) -> Tensor:
        """(H,W,3) image in [0,1] to a continuous (H/4,W/4,n_q) grid."""
        img = image if isinstance(image, Tensor) else Tensor(image)
        h, w = img.shape[:2]
        if h % 4 or w % 4:
            raise ad.ShapeError(
                f"vae encode: image {w}x{h} not divisible by 4"
            )
        return _hwc(self.encoder(_chw(img)))

    def decode(self, grid) -> Tensor:
        """(h,w,n_q) grid to a (4h,4w,3) image in [0,1]."""
        g = grid if isinstance(grid, Tensor) else Tensor(grid)
        if g.shape[-1] != self.n_q:
            raise ad.ShapeError(
                f"vae decode: grid width {g.shape[-1]} != n_q {self.n_q}"
            )
        return _hwc(self.decoder(_chw(g)))

    def reconstruct(self, image) -> np.ndarray:
        """encode -> quantize -> decode, no tape."""
        with ad.no_grad():
            z = self.encode(image)
            q = quantize(z, self.book)
            return self.decode(q.z_q).data

    def parameters(self):
        out = [("encoder." + n, t) for n, t in self.encoder.parameters()]
        out += [("decoder." + n, t) for n, t in self.decoder.parameters()]
        out.append(("book.entries", self.book.entries))
        return out

    def freeze(self):
        for _, t in self.parameters():
            t.requires_grad = False

    def arch(self) -> dict:
        return {
            "type": "vqvae",
            "n_q": self.n_q,
            "codebook_size": self.book.size,
            "channels": list(self.channels),
        }

    def save(self, path):
        ckpt.save_checkpoint(path, self.arch(),
                             [(n, t.data) for n, t in self.parameters()])

    @classmethod
    def load(cls, path, trainable: bool = False) -> "VqVae":
        arch, tensors = ckpt.load_checkpoint(path)
        if arch.get("type") != "vqvae":
            raise ckpt.CheckpointError(
                f"{path}: expected a vqvae checkpoint, got {arch.get('type')!r}"
            )
        rng = np.random.default_rng(0)  # shapes only; values overwritten
        vae = cls(rng, n_q=arch["n_q"], codebook_size=arch["codebook_size"],
                  channels=tuple(arch["channels"]))
        have = dict(vae.parameters())
        for name, arr in tensors.items():
            if name not in have:
                raise ckpt.CheckpointError(f"{path}: unexpected tensor {name}")
            if have[name].shape != arr.shape:
                raise ckpt.CheckpointError(
                    f"{path}: shape mismatch for {name}: "
                    f"{arr.shape} vs {have[name].shape}"
                )
            have[name].data[...] = arr
        if not trainable:
            vae.freeze()
        return vae


def codebook_utilization(vae: VqVae, images) -> float:
    """Fraction of codebook entries assigned at least once across images."""
    used = np.zeros(vae.book.size, dtype=bool)
    with ad.no_grad():
        for img in images:
            q = quantize(vae.encode(img), vae.book)
            used[np.unique(q.indices)] = True
    return used.mean()


def pretrain_vae(images: Sequence[np.ndarray], rng: np.random.Generator,
                 steps: int = 4000, lr: float = 1e-3, beta: float = 0.25,
                 n_q: int = 16, codebook_size: int = 2048,
                 channels: Sequence[int] = (32, 64),
                 reseed_after: int = 500,
                 log_every: int = 25,
                 progress: Optional[callable] = None):
    """Train encoder, decoder, and codebook on a set of views.

    Entries unused for ``reseed_after`` consecutive steps are reseeded to a
    random encoder output cell (their Adam moments reset). Returns the
    trained model and a list of step metric dicts.
    """
    if len(images) == 0:
        raise ValueError("pretrain_vae: empty dataset")
    vae = VqVae(rng, n_q=n_q, codebook_size=codebook_size, channels=channels)
    names, params = zip(*vae.parameters())
    book_slot = names.index("book.entries")
    opt = nn.Adam(list(params), lr=lr)
    vae.book.last_used[...] = 0
    metrics = []
    for step in range(steps):
        image = images[rng.integers(len(images))]
        z_hat = vae.encode(image)
        qgrid = quantize(z_hat, vae.book)
        decoded = vae.decode(straight_through(qgrid, z_hat))
        loss, parts = vqvae_loss(image, decoded, z_hat, vae.book, qgrid, beta)
        loss.backward()
        opt.step()

        used = np.unique(qgrid.indices)
        vae.book.usage_counts[used] += 1
        vae.book.last_used[used] = step
        stale = np.flatnonzero(step - vae.book.last_used >= reseed_after)
        if stale.size:
            cells = z_hat.data.reshape(-1, n_q)
            picks = rng.integers(cells.shape[0], size=stale.size)
            vae.book.entries.data[stale] = cells[picks]
            vae.book.last_used[stale] = step
            opt.m[book_slot][stale] = 0.0
            opt.v[book_slot][stale] = 0.0

        if step % log_every == 0 or step == steps - 1:
            alive = (step - vae.book.last_used < reseed_after).mean()
            rec = {"step": step, "loss": float(loss.data), **parts,
                   "codebook_alive_fraction": float(alive)}
            metrics.append(rec)
            if progress is not None:
                progress(rec)
    return vae, metrics
