"""Multi-scale optimization: quarter-resolution feature rendering through
quantization and decoding, full-resolution RGB rendering through the shared
SDF net, and the five-term total loss."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import metrics as mtr
from . import nn
from . import renderer as rnd
from . import scene as scn
from . import semantic as sem
from . import vq as vqm
from .autodiff import Tensor


class NumericError(ArithmeticError):
    """Raised when a loss term turns non-finite."""


@dataclass
class TrainConfig:
    """All hyperparameters for VAE pretraining and renderer training."""

    # loss weights
    lambda_vq: float = 1.0
    lambda_eik: float = 0.1
    lambda_semantic: float = 1.0
    # ray/pixel budgets per step
    rays_downsampled: int = 512
    rays_global: int = 1024
    n_coarse: int = 64
    n_fine: int = 64
    # optimization
    learning_rate: float = 5e-4
    iterations: int = 20000
    seed: int = 0
    # quantization / VAE
    codebook_size: int = 2048
    codebook_dim: int = 16
    commitment_beta: float = 0.25
    downsample_factor: int = 4
    vae_channels: tuple = (32, 64)
    vae_steps: int = 4000
    vae_lr: float = 1e-3
    vae_reseed_after: int = 500
    # scene model architecture
    sdf_hidden: int = 128
    sdf_depth: int = 4
    sdf_skip: int = 2
    latent_dim: int = 32
    head_hidden: int = 64
    pe_pos: int = 6
    pe_dir: int = 4
    alpha_init: float = 0.1
    alpha_min: float = 1e-4
    geometric_radius: float = 1.0
    # regularization
    eikonal_points: int = 512
    # ablation switches
    use_semantic: bool = True
    use_global: bool = True
    # outputs
    preview_every: int = 0
    holdout: tuple = ()

    def __post_init__(self):
        for name in ("lambda_vq", "lambda_eik", "lambda_semantic"):
            if getattr(self, name) < 0:
                raise ValueError(f"config: {name} must be >= 0")
        for name in ("rays_downsampled", "rays_global", "n_coarse",
                     "iterations", "codebook_size", "codebook_dim",
                     "eikonal_points", "vae_steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"config: {name} must be >= 1")
        if self.n_fine < 0:
            raise ValueError("config: n_fine must be >= 0")
        if self.learning_rate <= 0 or self.vae_lr <= 0:
            raise ValueError("config: learning rates must be > 0")
        if self.downsample_factor != 4:
            raise ValueError("config: downsample_factor must be 4")
        self.vae_channels = tuple(self.vae_channels)
        self.holdout = tuple(self.holdout)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"config: unknown fields {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["vae_channels"] = list(self.vae_channels)
        out["holdout"] = list(self.holdout)
        return out


@dataclass
class StepReport:
    """Per-step loss decomposition plus diagnostics."""

    step: int
    loss_rsc: float
    loss_global: float
    loss_semantic: float
    loss_vq: float
    loss_eikonal: float
    total: float
    psnr_decoded: float
    view_id: str
    wall_time: float = 0.0

    def metrics_line(self) -> str:
        """Deterministic JSON line; wall time is logged separately because
        it varies across byte-identical runs."""
        rec = asdict(self)
        rec.pop("wall_time")
        return json.dumps(rec, sort_keys=True)


# -- loss terms ---------------------------------------------------------------

def loss_rsc(pred: Tensor, true) -> Tensor:
    """Mean per-pixel L2 norm of the color residual."""
    true = true if isinstance(true, Tensor) else Tensor(true)
    if pred.shape != true.shape:
        raise ad.ShapeError(
            f"loss_rsc: shapes {pred.shape} and {true.shape} differ"
        )
    return ad.tensor_mean(ad.l2_norm(pred - true, axis=-1))


def loss_global(pred: Tensor, true) -> Tensor:
    """Mean per-pixel L1 norm of the color residual."""
    true = true if isinstance(true, Tensor) else Tensor(true)
    if pred.shape != true.shape:
        raise ad.ShapeError(
            f"loss_global: shapes {pred.shape} and {true.shape} differ"
        )
    return ad.tensor_mean(ad.l1_norm(pred - true, axis=-1))


def loss_vq(z_render: Tensor, z_vae) -> Tensor:
    """Mean absolute difference between the two quantized grids; the VAE
    side enters as a constant (frozen encoder)."""
    z_vae = z_vae.data if isinstance(z_vae, Tensor) else np.asarray(z_vae)
    if z_render.shape != z_vae.shape:
        raise ad.ShapeError(
            f"loss_vq: shapes {z_render.shape} and {z_vae.shape} differ"
        )
    return ad.tensor_mean(ad.absolute(z_render - Tensor(z_vae)))


def loss_eikonal(model, points: np.ndarray) -> Tensor:
    """Mean squared deviation of the SDF spatial gradient norm from 1."""
    if len(points) < 1:
        raise ValueError("loss_eikonal: need at least one point")
    _, grad = model.sdf_spatial_gradient(points)
    norms = ad.l2_norm(grad, axis=-1)
    dev = norms - 1.0
    return ad.tensor_mean(dev * dev)


def total_loss(terms: dict, config: TrainConfig) -> Tensor:
    """Weighted sum of the five loss terms; NaN in any term is an error."""
    for name, term in terms.items():
        value = term.data if isinstance(term, Tensor) else term
        if not np.isfinite(value):
            raise NumericError(f"total_loss: non-finite term {name!r}")
    weights = {
        "rsc": 1.0,
        "global": 1.0,
        "semantic": config.lambda_semantic,
        "vq": config.lambda_vq,
        "eikonal": config.lambda_eik,
    }
    total = None
    for name, weight in weights.items():
        term = terms[name]
        term = term if isinstance(term, Tensor) else Tensor(float(term))
        piece = term * weight
        total = piece if total is None else total + piece
    return total


def recombine_report(report: StepReport, config: TrainConfig) -> float:
    """Recompute the weighted sum from a report's stored terms."""
    return (report.loss_rsc + report.loss_global
            + config.lambda_semantic * report.loss_semantic
            + config.lambda_vq * report.loss_vq
            + config.lambda_eik * report.loss_eikonal)


def build_scene_model(config: TrainConfig, rng: np.random.Generator,
                      scene_radius: float) -> rnd.SceneModel:
    radius = config.geometric_radius if config.geometric_radius > 0 else None
    if radius is not None:
        radius = min(radius, scene_radius)
    return rnd.SceneModel(
        rng, n_q=config.codebook_dim, pe_pos=config.pe_pos,
        pe_dir=config.pe_dir, hidden=config.sdf_hidden,
        depth=config.sdf_depth, skip=config.sdf_skip,
        latent=config.latent_dim, head_hidden=config.head_hidden,
        alpha_init=config.alpha_init, alpha_min=config.alpha_min,
        geometric_radius=radius,
    )


class Trainer:
    """One optimizer step at a time over a frozen VAE and a live renderer."""

    def __init__(self, dataset: scn.SceneDataset, vae: vqm.VqVae,
                 config: TrainConfig,
                 model: Optional[rnd.SceneModel] = None):
        if not dataset.views:
            raise ValueError("trainer: empty dataset")
        if vae.n_q != config.codebook_dim:
            raise ValueError(
                f"trainer: VAE n_q {vae.n_q} != config codebook_dim "
                f"{config.codebook_dim}"
            )
        h, w = dataset.views[0].image.shape[:2]
        if h % config.downsample_factor or w % config.downsample_factor:
            raise scn.DataError(
                f"trainer: image {w}x{h} not divisible by factor "
                f"{config.downsample_factor}"
            )
        self.dataset = dataset
        self.train_views = [v for v in dataset.views
                            if v.view_id not in config.holdout]
        if not self.train_views:
            raise ValueError("trainer: holdout leaves no training views")
        self.vae = vae
        vae.freeze()
        self.config = config
        self.rng = np.random.default_rng(config.seed)
        self.model = model if model is not None else build_scene_model(
            config, self.rng, dataset.scene_radius)
        self.optimizer = nn.Adam([t for _, t in self.model.parameters()],
                                 lr=config.learning_rate)
        self.embedder = sem.BuiltinEmbedder()
        self.step_count = 0
        self._epoch_order: list = []

    def _next_view(self) -> scn.CameraView:
        """Uniform without replacement per epoch."""
        if not self._epoch_order:
            self._epoch_order = list(
                self.rng.permutation(len(self.train_views)))
        return self.train_views[self._epoch_order.pop()]

    # -- loss assembly ---------------------------------------------------

    def compute_losses(self, view: scn.CameraView,
                       rng: np.random.Generator,
                       st_offset: Optional[np.ndarray] = None,
                       n_fine: Optional[int] = None):
        """Build the five loss terms for one view.

        ``st_offset`` replaces live quantization with a frozen additive
        offset so finite differencing sees the same function the tape
        differentiates (quantization indices held fixed).
        Returns (total, parts dict of Tensors, aux dict).
        """
        cfg = self.config
        ds = self.dataset
        h, w = view.image.shape[:2]
        fine = cfg.n_fine if n_fine is None else n_fine

        # downsampled path: full feature grid -> quantize -> decode
        grid, _ = rnd.render_feature_grid(
            view, self.model, ds.t_near, ds.t_far, cfg.n_coarse, fine, rng,
            factor=cfg.downsample_factor)
        if st_offset is not None:
            z_st = grid + Tensor(st_offset)
            qgrid = None
        else:
            qgrid = vqm.quantize(grid, self.vae.book)
            z_st = vqm.straight_through(qgrid, grid)
        decoded = self.vae.decode(z_st)

        pix = rng.choice(h * w, size=min(cfg.rays_downsampled, h * w),
                         replace=False)
        pred_pix = ad.take_rows(decoded.reshape(h * w, 3), pix)
        true_pix = view.image.reshape(h * w, 3)[pix]
        l_rsc = loss_rsc(pred_pix, true_pix)

        with ad.no_grad():
            z_vae_grid = vqm.quantize(self.vae.encode(view.image),
                                      self.vae.book)
        l_vq = loss_vq(z_st, z_vae_grid.z_q)

        if cfg.use_semantic:
            e_syn = self.embedder.embed(decoded)
            e_real = self.embedder.embed(view.image, view_id=view.view_id)
            l_sem = sem.semantic_loss(e_syn, e_real)
        else:
            l_sem = Tensor(0.0)

        # global path: random full-resolution rays through the RGB head
        if cfg.use_global:
            gpix = rng.choice(h * w, size=min(cfg.rays_global, h * w),
                              replace=False)
            px = (gpix % w) + 0.5
            py = (gpix // w) + 0.5
            rays = scn.generate_rays(view, px, py, ds.t_near, ds.t_far)
            samples = rnd.sample_ray(rays, cfg.n_coarse, fine, self.model, rng)
            res = rnd.render_rgb(rays, samples, self.model)
            l_glob = loss_global(res.value, view.image.reshape(h * w, 3)[gpix])
            surface_pool = samples.positions.reshape(-1, 3)
        else:
            l_glob = Tensor(0.0)
            surface_pool = None

        # eikonal points: uniform box + perturbed near-surface samples
        n_eik = cfg.eikonal_points
        n_uniform = n_eik // 2 if surface_pool is not None else n_eik
        pts = [rng.uniform(-ds.scene_radius, ds.scene_radius,
                           size=(n_uniform, 3))]
        if surface_pool is not None:
            picks = rng.integers(len(surface_pool), size=n_eik - n_uniform)
            noise = rng.normal(0.0, 0.02 * ds.scene_radius,
                               size=(n_eik - n_uniform, 3))
            pts.append(surface_pool[picks] + noise)
        l_eik = loss_eikonal(self.model, np.concatenate(pts, axis=0))

        parts = {"rsc": l_rsc, "global": l_glob, "semantic": l_sem,
                 "vq": l_vq, "eikonal": l_eik}
        total = total_loss(parts, cfg)
        aux = {"decoded": decoded, "grid": grid, "qgrid": qgrid}
        return total, parts, aux

    def step(self) -> StepReport:
        """Sample a view, assemble the losses, take one Adam step."""
        start = time.perf_counter()
        view = self._next_view()
        total, parts, aux = self.compute_losses(view, self.rng)
        total.backward()
        self.optimizer.step()
        self.model.clamp_alpha()
        self.step_count += 1
        report = StepReport(
            step=self.step_count,
            loss_rsc=float(parts["rsc"].data),
            loss_global=float(parts["global"].data),
            loss_semantic=float(parts["semantic"].data),
            loss_vq=float(parts["vq"].data),
            loss_eikonal=float(parts["eikonal"].data),
            total=float(total.data),
            psnr_decoded=mtr.psnr(aux["decoded"].data, view.image),
            view_id=view.view_id,
            wall_time=time.perf_counter() - start,
        )
        return report


def train(dataset: scn.SceneDataset, vae: vqm.VqVae, config: TrainConfig,
          out_dir, progress: Optional[callable] = None) -> dict:
    """Run the full loop; writes metrics.jsonl, timings.jsonl, the final
    scene checkpoint, and optional preview PNGs. Returns output paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(dataset, vae, config)
    metrics_path = out_dir / "metrics.jsonl"
    timings_path = out_dir / "timings.jsonl"
    ckpt_path = out_dir / "scene_model.ckpt"
    with open(metrics_path, "w") as mfh, open(timings_path, "w") as tfh:
        for _ in range(config.iterations):
            report = trainer.step()
            mfh.write(report.metrics_line() + "\n")
            tfh.write(json.dumps(
                {"step": report.step, "wall_time": report.wall_time}) + "\n")
            if progress is not None:
                progress(report)
            if (config.preview_every
                    and report.step % config.preview_every == 0):
                _write_preview(trainer, out_dir, report.step)
    trainer.model.save(ckpt_path)
    return {"metrics": metrics_path, "timings": timings_path,
            "checkpoint": ckpt_path, "trainer": trainer}


def _write_preview(trainer: Trainer, out_dir: Path, step: int):
    view = trainer.train_views[0]
    ds = trainer.dataset
    cfg = trainer.config
    with ad.no_grad():
        grid, _ = rnd.render_feature_grid(
            view, trainer.model, ds.t_near, ds.t_far, cfg.n_coarse,
            cfg.n_fine, None, factor=cfg.downsample_factor)
        q = vqm.quantize(grid, trainer.vae.book)
        image = trainer.vae.decode(q.z_q).data
    scn.save_image(out_dir / f"preview_{step:06d}.png", image)
