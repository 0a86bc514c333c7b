"""Image-quality metrics and the compressed-vs-per-pixel rendering benchmark."""

from __future__ import annotations

import hashlib
import json
import platform
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import renderer as rnd
from . import vq as vqm


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical images cap at 99."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shapes {a.shape} and {b.shape} differ")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return 99.0
    return 10.0 * np.log10(peak * peak / mse)


def _gaussian_kernel(window: int, sigma: float) -> np.ndarray:
    x = np.arange(window) - (window - 1) / 2.0
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _filter_valid(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable valid-mode correlation of a 2-D array with a 1-D kernel."""
    win = len(kernel)
    out = np.lib.stride_tricks.sliding_window_view(img, win, axis=0) @ kernel
    out = np.lib.stride_tricks.sliding_window_view(out, win, axis=1) @ kernel
    return out


def ssim(a: np.ndarray, b: np.ndarray, window: int = 11, sigma: float = 1.5,
         peak: float = 1.0) -> float:
    """Single-scale SSIM with a gaussian window, averaged over windows and
    channels. Constants C1=(0.01*peak)^2, C2=(0.03*peak)^2."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shapes {a.shape} and {b.shape} differ")
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    if a.shape[0] < window or a.shape[1] < window:
        raise ValueError(
            f"ssim: image {a.shape[:2]} smaller than window {window}"
        )
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    kernel = _gaussian_kernel(window, sigma)
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[:, :, ch], b[:, :, ch]
        mu_x = _filter_valid(x, kernel)
        mu_y = _filter_valid(y, kernel)
        var_x = np.maximum(_filter_valid(x * x, kernel) - mu_x * mu_x, 0.0)
        var_y = np.maximum(_filter_valid(y * y, kernel) - mu_y * mu_y, 0.0)
        cov = _filter_valid(x * y, kernel) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
        den = (mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


@dataclass
class BenchReport:
    """Wall times for the two rendering paths at identical settings."""

    compressed_time: float
    per_pixel_time: float
    compressed_rays: int
    per_pixel_rays: int
    samples_per_ray: int
    speedup: float
    repeats: int
    config_hash: str
    hardware: str
    threads: str

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    def table(self) -> str:
        rows = [
            ("path", "rays", "median time (s)"),
            ("compressed", str(self.compressed_rays),
             f"{self.compressed_time:.4f}"),
            ("per-pixel", str(self.per_pixel_rays),
             f"{self.per_pixel_time:.4f}"),
        ]
        widths = [max(len(r[i]) for r in rows) for i in range(3)]
        lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in rows]
        lines.append(f"speedup: {self.speedup:.2f}x  (config {self.config_hash[:12]})")
        return "\n".join(lines)


def _time_compressed(view, model, vae, t_near, t_far, n_coarse, n_fine, factor):
    start = time.perf_counter()
    with ad.no_grad():
        grid, _ = rnd.render_feature_grid(view, model, t_near, t_far,
                                          n_coarse, n_fine, None,
                                          factor=factor)
        q = vqm.quantize(grid, vae.book)
        image = vae.decode(q.z_q).data
    return time.perf_counter() - start, image


def _time_per_pixel(view, model, t_near, t_far, n_coarse, n_fine):
    start = time.perf_counter()
    image = rnd.render_rgb_image(view, model, t_near, t_far, n_coarse, n_fine)
    return time.perf_counter() - start, image


def bench_render(model, vae, view, t_near: float, t_far: float,
                 n_coarse: int = 32, n_fine: int = 0, repeats: int = 3,
                 factor: int = 4) -> BenchReport:
    """Median wall time of the compressed path (feature grid + quantize +
    decode) against full per-pixel RGB rendering at the same output size
    and identical sampler settings. One warmup run per path is excluded.
    """
    h, w = view.image.shape[:2]
    sampler_cfg = {"n_coarse": n_coarse, "n_fine": n_fine, "factor": factor,
                   "model": model.arch()}
    blob = json.dumps(sampler_cfg, sort_keys=True).encode()
    config_hash = hashlib.sha256(blob).hexdigest()

    _time_compressed(view, model, vae, t_near, t_far, n_coarse, n_fine, factor)
    _time_per_pixel(view, model, t_near, t_far, n_coarse, n_fine)
    comp, full = [], []
    for _ in range(repeats):
        tc, _ = _time_compressed(view, model, vae, t_near, t_far,
                                 n_coarse, n_fine, factor)
        comp.append(tc)
        tp, _ = _time_per_pixel(view, model, t_near, t_far, n_coarse, n_fine)
        full.append(tp)
    comp_med = float(np.median(comp))
    full_med = float(np.median(full))
    return BenchReport(
        compressed_time=comp_med,
        per_pixel_time=full_med,
        compressed_rays=(h // factor) * (w // factor),
        per_pixel_rays=h * w,
        samples_per_ray=n_coarse + n_fine,
        speedup=full_med / comp_med,
        repeats=repeats,
        config_hash=config_hash,
        hardware=f"{platform.platform()} / {platform.processor() or 'unknown cpu'}",
        threads="numpy-default",
    )
