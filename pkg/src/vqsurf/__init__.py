"""Vector-quantized SDF volume rendering with multi-scale training."""

from .autodiff import Tensor, grad_check, no_grad
from .renderer import SceneModel, load_scene_model, sdf_to_density
from .scene import CameraView, Rays, load_dataset, make_synthetic_scene
from .training import TrainConfig, Trainer, train
from .vq import Codebook, VqVae, pretrain_vae, quantize, straight_through

__all__ = [
    "Tensor",
    "grad_check",
    "no_grad",
    "SceneModel",
    "load_scene_model",
    "sdf_to_density",
    "CameraView",
    "Rays",
    "load_dataset",
    "make_synthetic_scene",
    "TrainConfig",
    "Trainer",
    "train",
    "Codebook",
    "VqVae",
    "pretrain_vae",
    "quantize",
    "straight_through",
]
