"""SDF volume renderer shared by the quantized feature path and the
full-resolution RGB path.

A single SDF network drives both paths: densities come from a scaled
sigmoid of the signed distance, and the same alpha-compositing quadrature
accumulates either per-sample feature vectors or colors. Sample positions
are treated as constants by the tape (the usual volume-rendering
estimator); gradients flow through densities and head outputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .scene import CameraView, DataError, Rays, generate_grid_rays


def sdf_to_density(d, alpha):
    """Density (1/alpha) * sigmoid(-d / alpha); peaks at 1/alpha inside."""
    if isinstance(alpha, Tensor):
        if np.any(alpha.data <= 0):
            raise ValueError("sdf_to_density: alpha must be > 0")
        d = d if isinstance(d, Tensor) else Tensor(d)
        return ad.sigmoid(-d / alpha) / alpha
    if alpha <= 0:
        raise ValueError("sdf_to_density: alpha must be > 0")
    d = d if isinstance(d, Tensor) else Tensor(d)
    return ad.sigmoid(d * (-1.0 / alpha)) * (1.0 / alpha)


def sdf_to_density_np(d: np.ndarray, alpha: float) -> np.ndarray:
    """Plain-array twin of ``sdf_to_density`` for no-grad passes."""
    if alpha <= 0:
        raise ValueError("sdf_to_density: alpha must be > 0")
    return ad._sigmoid_raw(-d / alpha) / alpha


@dataclass
class SampleSet:
    """Per-ray quadrature nodes: ascending depths, positions, intervals.

    The last interval of each ray extends to t_far so the interval lengths
    tile (t_1, t_far] exactly.
    """

    t: np.ndarray          # (R, M)
    delta: np.ndarray      # (R, M)
    positions: np.ndarray  # (R, M, 3)

    def __post_init__(self):
        if np.any(np.diff(self.t, axis=1) <= 0):
            raise ValueError("sample depths must be strictly ascending")
        if np.any(self.delta <= 0):
            raise ValueError("sample intervals must be positive")

    @property
    def count(self) -> int:
        return self.t.shape[1]


def _finalize_samples(rays: Rays, t: np.ndarray) -> SampleSet:
    delta = np.empty_like(t)
    delta[:, :-1] = np.diff(t, axis=1)
    delta[:, -1] = rays.t_far - t[:, -1]
    # guard exact duplicates from merged coarse/fine draws
    tiny = 1e-12 * (rays.t_far - rays.t_near)[:, None]
    delta = np.maximum(delta, tiny)
    return SampleSet(t, delta, rays.points_at(t))


def uniform_samples(rays: Rays, n: int) -> SampleSet:
    """Deterministic midpoint rule: n bin centers per ray."""
    if n < 2:
        raise ValueError("uniform_samples: need at least 2 samples")
    frac = (np.arange(n) + 0.5) / n
    t = rays.t_near[:, None] + (rays.t_far - rays.t_near)[:, None] * frac
    return _finalize_samples(rays, t)


def _stratified_t(rays: Rays, n: int, rng: Optional[np.random.Generator]):
    frac = (np.arange(n) + (0.5 if rng is None else 0.0)) / n
    span = (rays.t_far - rays.t_near)[:, None]
    t = rays.t_near[:, None] + span * frac
    if rng is not None:
        t = t + rng.random((len(rays), n)) * (span / n)
    return t


def quadrature_weights_np(sigma: np.ndarray, delta: np.ndarray):
    """Compositing weights and final transmittance, plain arrays."""
    s = sigma * delta
    c = np.cumsum(s, axis=1)
    c_excl = np.concatenate([np.zeros((s.shape[0], 1)), c[:, :-1]], axis=1)
    weights = np.exp(-c_excl) * (1.0 - np.exp(-s))
    return weights, np.exp(-c[:, -1])


def sample_ray(rays: Rays, coarse: int, fine: int, model,
               rng: Optional[np.random.Generator]) -> SampleSet:
    """Stratified coarse samples plus one round of inverse-CDF importance
    sampling of the coarse compositing weights. ``rng=None`` degrades to
    deterministic bin midpoints.
    """
    if coarse < 2:
        raise ValueError("sample_ray: need at least 2 coarse samples")
    t = _stratified_t(rays, coarse, rng)
    if fine > 0:
        with ad.no_grad():
            coarse_set = _finalize_samples(rays, t)
            d = model.sdf_values(coarse_set.positions.reshape(-1, 3))
            alpha = float(model.alpha.data) if isinstance(model.alpha, Tensor) \
                else float(model.alpha)
            sigma = sdf_to_density_np(d.reshape(t.shape), alpha)
        weights, _ = quadrature_weights_np(sigma, coarse_set.delta)
        t_fine = _sample_pdf(rays, weights, fine, rng)
        t = np.sort(np.concatenate([t, t_fine], axis=1), axis=1)
        gaps = np.diff(t, axis=1)
        if np.any(gaps <= 0):  # break exact duplicates from the merge
            eps = 1e-12 * (rays.t_far - rays.t_near)[:, None]
            t[:, 1:] += np.cumsum(np.where(gaps <= 0, eps, 0.0), axis=1)
    return _finalize_samples(rays, t)


def _sample_pdf(rays: Rays, weights: np.ndarray, n: int,
                rng: Optional[np.random.Generator]) -> np.ndarray:
    """Inverse-CDF draws over the coarse strata, weighted per bin."""
    r, m = weights.shape
    span = (rays.t_far - rays.t_near)[:, None]
    edges = rays.t_near[:, None] + span * (np.arange(m + 1) / m)
    w = weights + 1e-5  # flat fallback for vacuum rays
    cdf = np.cumsum(w, axis=1)
    cdf = cdf / cdf[:, -1:]
    cdf = np.concatenate([np.zeros((r, 1)), cdf], axis=1)
    if rng is None:
        u = np.broadcast_to((np.arange(n) + 0.5) / n, (r, n)).copy()
    else:
        u = (np.arange(n) + rng.random((r, n))) / n
    # one flat searchsorted: each row's cdf is shifted into its own unit slot
    shift = np.arange(r)[:, None]
    flat_cdf = (cdf + shift).reshape(-1)
    flat_u = (u + shift).reshape(-1)
    pos = np.searchsorted(flat_cdf, flat_u, side="right").reshape(r, n)
    idx = np.clip(pos - shift * (m + 1) - 1, 0, m - 1)
    rows = np.repeat(np.arange(r), n).reshape(r, n)
    lo = cdf[rows, idx]
    hi = cdf[rows, idx + 1]
    denom = np.where(hi - lo > 0, hi - lo, 1.0)
    frac = (u - lo) / denom
    return edges[rows, idx] + frac * (edges[rows, idx + 1] - edges[rows, idx])


@dataclass
class RenderResult:
    """Accumulated ray values plus quadrature internals."""

    value: Tensor    # (R, C)
    weights: Tensor  # (R, M)
    t_end: Tensor    # (R,)
    t: np.ndarray    # (R, M)

    def depth(self) -> np.ndarray:
        return (self.weights.data * self.t).sum(axis=1)


def _composite(sigma: Tensor, delta: np.ndarray, values: Tensor) -> RenderResult:
    r, m = sigma.shape
    s = sigma * delta
    c = ad.cumsum(s, axis=1)
    c_excl = ad.concat([Tensor(np.zeros((r, 1))), c[:, :-1]], axis=1)
    trans = ad.exp(-c_excl)
    w = trans * (1.0 - ad.exp(-s))
    acc = ad.tensor_sum(w.reshape(r, m, 1) * values, axis=1)
    t_end = ad.exp(-c[:, -1])
    return RenderResult(acc, w, t_end, None)


def render_feature(rays: Rays, samples: SampleSet, model) -> RenderResult:
    """Integrate the model's feature field along each ray."""
    return _render(rays, samples, model, "feature")


def render_rgb(rays: Rays, samples: SampleSet, model) -> RenderResult:
    """Integrate the model's color field along each ray."""
    return _render(rays, samples, model, "rgb")


def _render(rays: Rays, samples: SampleSet, model, field: str) -> RenderResult:
    r, m = samples.t.shape
    x = samples.positions.reshape(-1, 3)
    v = np.repeat(rays.dirs, m, axis=0)
    out = model.query(x, v, need_feature=field == "feature",
                      need_rgb=field == "rgb")
    sigma = sdf_to_density(out["d"].reshape(r, m), model.alpha)
    values = out[field]
    values = values.reshape(r, m, values.shape[-1])
    result = _composite(sigma, samples.delta, values)
    result.t = samples.t
    return result


def render_feature_grid(view: CameraView, model, t_near: float, t_far: float,
                        n_coarse: int, n_fine: int,
                        rng: Optional[np.random.Generator],
                        factor: int = 4):
    """Feature image at (H/factor, W/factor): one ray per downsampled pixel.

    Returns the (h, w, n_q) grid tensor plus the underlying RenderResult.
    """
    h, w = view.image.shape[:2]
    if h % factor or w % factor:
        raise DataError(
            f"render_feature_grid: image {w}x{h} not divisible by {factor}; "
            "pad or crop at ingestion"
        )
    rays = generate_grid_rays(view, t_near, t_far, scale=factor)
    samples = sample_ray(rays, n_coarse, n_fine, model, rng)
    result = render_feature(rays, samples, model)
    grid = result.value.reshape(h // factor, w // factor,
                                result.value.shape[-1])
    return grid, result


def render_rgb_image(view: CameraView, model, t_near: float, t_far: float,
                     n_coarse: int, n_fine: int,
                     rng: Optional[np.random.Generator] = None,
                     chunk: int = 4096) -> np.ndarray:
    """Full-resolution RGB render (no tape), clamped to [0,1] at assembly."""
    h, w = view.image.shape[:2]
    rays = generate_grid_rays(view, t_near, t_far, scale=1)
    out = np.zeros((h * w, 3))
    with ad.no_grad():
        for lo in range(0, len(rays), chunk):
            sub = Rays(rays.origins[lo:lo + chunk], rays.dirs[lo:lo + chunk],
                       rays.t_near[lo:lo + chunk], rays.t_far[lo:lo + chunk])
            samples = sample_ray(sub, n_coarse, n_fine, model, rng)
            out[lo:lo + chunk] = render_rgb(sub, samples, model).value.data
    return np.clip(out.reshape(h, w, 3), 0.0, 1.0)


class SceneModel:
    """Shared SDF renderer parameters: SDF net with latent output, a
    feature head, an RGB head, and the density sharpness alpha.

    Both heads see the same inputs: encoded position, encoded view
    direction, and the SDF latent. The SDF net is shared by both rendering
    paths, so geometry gradients arrive from each.
    """

    def __init__(self, rng: np.random.Generator, n_q: int = 16,
                 pe_pos: int = 6, pe_dir: int = 4, hidden: int = 128,
                 depth: int = 4, skip: int = 2, latent: int = 32,
                 head_hidden: int = 64, alpha_init: float = 0.1,
                 alpha_min: float = 1e-4,
                 geometric_radius: Optional[float] = 1.0):
        self.n_q = n_q
        self.pe_pos = pe_pos
        self.pe_dir = pe_dir
        self.alpha_min = alpha_min
        self._arch = {
            "type": "scene-model", "n_q": n_q, "pe_pos": pe_pos,
            "pe_dir": pe_dir, "hidden": hidden, "depth": depth, "skip": skip,
            "latent": latent, "head_hidden": head_hidden,
            "alpha_min": alpha_min,
        }
        in_pos = 3 + 6 * pe_pos
        in_dir = 3 + 6 * pe_dir
        self.sdf_net = nn.MLP(
            [in_pos] + [hidden] * depth + [1 + latent], rng,
            activation="softplus", beta=100.0,
            skips=(skip,) if 0 < skip < depth else (),
        )
        if geometric_radius is not None:
            nn.geometric_init(self.sdf_net, geometric_radius, rng)
        head_in = in_pos + in_dir + latent
        self.feature_head = nn.MLP([head_in, head_hidden, n_q], rng,
                                   activation="relu")
        self.rgb_head = nn.MLP([head_in, head_hidden, 3], rng,
                               activation="relu",
                               final_activation="sigmoid")
        self.alpha = ad.parameter(float(alpha_init))

    def parameters(self):
        out = [("sdf_net." + n, t) for n, t in self.sdf_net.parameters()]
        out += [("feature_head." + n, t) for n, t in
                self.feature_head.parameters()]
        out += [("rgb_head." + n, t) for n, t in self.rgb_head.parameters()]
        out.append(("alpha", self.alpha))
        return out

    def clamp_alpha(self):
        self.alpha.data = np.maximum(self.alpha.data, self.alpha_min)

    def sdf_values(self, x: np.ndarray) -> np.ndarray:
        """Signed distances only, never taped (sampling fast path)."""
        with ad.no_grad():
            enc = Tensor(nn.positional_encode_np(x, self.pe_pos))
            return self.sdf_net(enc).data[:, 0]

    def query(self, x: np.ndarray, v: np.ndarray, need_feature: bool = False,
              need_rgb: bool = False) -> dict:
        """Evaluate d(x) and the requested head outputs at sample points."""
        enc_x = Tensor(nn.positional_encode_np(x, self.pe_pos))
        net_out = self.sdf_net(enc_x)
        out = {"d": net_out[:, 0]}
        if need_feature or need_rgb:
            enc_v = Tensor(nn.positional_encode_np(v, self.pe_dir))
            head_in = ad.concat([enc_x, enc_v, net_out[:, 1:]], axis=-1)
            if need_feature:
                out["feature"] = self.feature_head(head_in)
            if need_rgb:
                out["rgb"] = self.rgb_head(head_in)
        return out

    def sdf_spatial_gradient(self, x: np.ndarray):
        """d(x) and its gradient w.r.t. position, both taped so downstream
        losses stay differentiable w.r.t. the parameters."""
        enc = Tensor(nn.positional_encode_np(x, self.pe_pos))
        jac = Tensor(nn.positional_encode_jacobian(x, self.pe_pos))
        out, jout = self.sdf_net.forward_with_jacobian(enc, jac)
        return out[:, 0], jout[:, 0, :]

    def arch(self) -> dict:
        return dict(self._arch)

    def save(self, path):
        from . import checkpoint as ckpt
        ckpt.save_checkpoint(path, self.arch(),
                             [(n, t.data) for n, t in self.parameters()])


def load_scene_model(path) -> SceneModel:
    """Rebuild a SceneModel from its checkpoint, values exact at float32."""
    from . import checkpoint as ckpt
    arch, tensors = ckpt.load_checkpoint(path)
    if arch.get("type") != "scene-model":
        raise ckpt.CheckpointError(
            f"{path}: expected a scene-model checkpoint, got {arch.get('type')!r}"
        )
    model = SceneModel(
        np.random.default_rng(0), n_q=arch["n_q"], pe_pos=arch["pe_pos"],
        pe_dir=arch["pe_dir"], hidden=arch["hidden"], depth=arch["depth"],
        skip=arch["skip"], latent=arch["latent"],
        head_hidden=arch["head_hidden"], alpha_min=arch["alpha_min"],
        geometric_radius=None,
    )
    have = dict(model.parameters())
    for name, arr in tensors.items():
        if name not in have:
            raise ckpt.CheckpointError(f"{path}: unexpected tensor {name}")
        if have[name].shape != arr.shape:
            raise ckpt.CheckpointError(
                f"{path}: shape mismatch for {name}: {arr.shape} vs "
                f"{have[name].shape}"
            )
        have[name].data[...] = arr
    return model
