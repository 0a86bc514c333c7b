import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vqsurf import autodiff as ad
from vqsurf import renderer as rnd
from vqsurf.autodiff import Tensor
from vqsurf.scene import Rays


class ConstantDensityModel:
    """Analytic stand-in whose sigma is constant everywhere."""

    def __init__(self, sigma, alpha=0.1, feature=(1.0, 2.0), rgb=(0.3, 0.6, 0.9)):
        self.alpha = alpha
        p = sigma * alpha
        assert 0 < p < 1
        self.d = -alpha * np.log(p / (1.0 - p))
        self.feature = np.asarray(feature)
        self.rgb = np.asarray(rgb)

    def sdf_values(self, x):
        return np.full(len(x), self.d)

    def query(self, x, v, need_feature=False, need_rgb=False):
        out = {"d": Tensor(np.full(len(x), self.d))}
        if need_feature:
            out["feature"] = Tensor(np.tile(self.feature, (len(x), 1)))
        if need_rgb:
            out["rgb"] = Tensor(np.tile(self.rgb, (len(x), 1)))
        return out


class VacuumModel:
    alpha = 0.1

    def sdf_values(self, x):
        return np.full(len(x), 1e6)

    def query(self, x, v, need_feature=False, need_rgb=False):
        out = {"d": Tensor(np.full(len(x), 1e6))}
        if need_feature:
            out["feature"] = Tensor(np.ones((len(x), 4)))
        if need_rgb:
            out["rgb"] = Tensor(np.full((len(x), 3), 0.7))
        return out


class SlabModel:
    """Opaque wall: high density inside [t0, t1] along +z."""

    def __init__(self, t0=1.0, t1=1.2, alpha=0.005, rgb=(0.2, 0.5, 0.8)):
        self.alpha = alpha
        self.t0, self.t1 = t0, t1
        self.rgb = np.asarray(rgb)

    def sdf_values(self, x):
        z = x[..., 2]
        return np.abs(z - (self.t0 + self.t1) / 2) - (self.t1 - self.t0) / 2

    def query(self, x, v, need_feature=False, need_rgb=False):
        out = {"d": Tensor(self.sdf_values(x))}
        if need_feature:
            out["feature"] = Tensor(np.tile(self.rgb[:2], (len(x), 1)))
        if need_rgb:
            out["rgb"] = Tensor(np.tile(self.rgb, (len(x), 1)))
        return out


def z_rays(n=1, t_near=0.0, t_far=1.0):
    return Rays(np.zeros((n, 3)), np.tile([[0.0, 0.0, 1.0]], (n, 1)),
                t_near, t_far)


# -- density mapping ---------------------------------------------------------

def test_density_at_zero_is_half_alpha_inverse():
    assert np.isclose(rnd.sdf_to_density(Tensor(0.0), 0.1).data, 5.0)


def test_density_monotone_and_limits():
    alpha = 0.07
    d = np.linspace(-10 * alpha, 10 * alpha, 201)
    sig = rnd.sdf_to_density(Tensor(d), alpha).data
    assert np.all(np.diff(sig) < 0)
    assert abs(sig[-1]) * alpha < 1e-4
    assert abs(sig[0] - 1.0 / alpha) * alpha < 1e-4


def test_density_known_value():
    # d=-0.1, alpha=0.1 -> 10*sigmoid(1)
    got = rnd.sdf_to_density(Tensor(-0.1), 0.1).data
    assert np.isclose(got, 7.310585786300049, atol=1e-9)


def test_density_rejects_bad_alpha():
    with pytest.raises(ValueError):
        rnd.sdf_to_density(Tensor(0.0), -1.0)
    with pytest.raises(ValueError):
        rnd.sdf_to_density(Tensor(0.0), Tensor(0.0))


# -- sampling ----------------------------------------------------------------

def test_coarse_only_spans_range():
    rays = z_rays(3, 0.5, 2.5)
    s = rnd.sample_ray(rays, 16, 0, VacuumModel(), np.random.default_rng(0))
    assert s.count == 16
    assert np.all(s.t >= 0.5) and np.all(s.t <= 2.5)
    # one sample per stratum
    edges = 0.5 + 2.0 * np.arange(17) / 16
    for k in range(16):
        assert np.all((s.t[:, k] >= edges[k]) & (s.t[:, k] <= edges[k + 1]))


def test_sample_ray_needs_two_coarse():
    with pytest.raises(ValueError):
        rnd.sample_ray(z_rays(), 1, 0, VacuumModel(), None)


def test_degenerate_ray_rejected():
    from vqsurf.scene import DataError
    with pytest.raises(DataError):
        Rays(np.zeros((1, 3)), [[0, 0, 1.0]], 2.0, 2.0)


def test_vacuum_fine_samples_fall_back_to_uniform():
    rays = z_rays(2, 0.0, 1.0)
    s = rnd.sample_ray(rays, 8, 64, VacuumModel(), None)
    assert s.count == 72
    # deterministic flat-cdf draws cover every octile roughly evenly
    hist, _ = np.histogram(s.t[0], bins=8, range=(0.0, 1.0))
    assert hist.min() >= 5


def test_density_spike_attracts_fine_samples():
    rays = z_rays(3, 0.5, 3.0)
    model = SlabModel(1.0, 1.1, alpha=0.004)
    coarse, fine = 25, 64
    merged = rnd.sample_ray(rays, coarse, fine, model, None)
    base = rnd.sample_ray(rays, coarse, 0, model, None)
    # the spike occupies exactly one coarse stratum: [1.0, 1.1]
    in_bin_merged = ((merged.t >= 1.0) & (merged.t <= 1.1)).sum(axis=1)
    in_bin_coarse = ((base.t >= 1.0) & (base.t <= 1.1)).sum(axis=1)
    frac_fine = (in_bin_merged - in_bin_coarse) / fine
    assert np.all(frac_fine > 0.5)


def test_sampleset_requires_ascending():
    with pytest.raises(ValueError):
        rnd.SampleSet(np.array([[0.2, 0.1]]), np.array([[0.1, 0.1]]),
                      np.zeros((1, 2, 3)))


# -- quadrature --------------------------------------------------------------

def test_vacuum_renders_zero_feature_full_transmittance():
    rays = z_rays(4, 0.1, 2.0)
    res = rnd.render_feature(rays, rnd.uniform_samples(rays, 32), VacuumModel())
    assert np.all(res.value.data == 0.0)
    assert np.all(res.t_end.data == 1.0)


def test_constant_medium_matches_closed_form():
    sigma = 1.0
    rays = z_rays(1, 0.0, 1.0)
    model = ConstantDensityModel(sigma)
    res = rnd.render_feature(rays, rnd.uniform_samples(rays, 512), model)
    expect = (1.0 - np.exp(-sigma)) * model.feature
    rel = np.abs(res.value.data[0] - expect) / np.abs(expect)
    assert rel.max() < 1e-3
    assert abs(res.t_end.data[0] - np.exp(-sigma)) / np.exp(-sigma) < 1e-3


def test_transmittance_error_halves_with_sample_doubling():
    rays = z_rays(1, 0.0, 0.1)
    for sigma in (0.5, 2.0, 8.0):
        model = ConstantDensityModel(sigma)
        errs = []
        for n in (128, 256, 512):
            res = rnd.render_feature(rays, rnd.uniform_samples(rays, n), model)
            truth = np.exp(-sigma * 0.1)
            errs.append(abs(res.t_end.data[0] - truth) / truth)
        assert errs[2] < 1e-3
        for a, b in zip(errs, errs[1:]):
            assert 0.8 * 2 <= a / b <= 1.2 * 2


@settings(max_examples=20, deadline=None)
@given(st.integers(min_value=0, max_value=2 ** 31 - 1))
def test_weights_telescope_to_one(seed):
    rng = np.random.default_rng(seed)
    sigma = Tensor(np.abs(rng.normal(size=(3, 40))) * 5.0)
    delta = np.full((3, 40), 0.05)
    values = Tensor(rng.normal(size=(3, 40, 2)))
    res = rnd._composite(sigma, delta, values)
    total = res.weights.data.sum(axis=1) + res.t_end.data
    assert np.abs(total - 1.0).max() < 1e-12


def test_transmittance_monotone():
    rng = np.random.default_rng(1)
    sigma = np.abs(rng.normal(size=(5, 64))) * 8.0
    delta = np.full((5, 64), 0.03)
    s = sigma * delta
    c = np.cumsum(s, axis=1)
    trans = np.exp(-np.concatenate([np.zeros((5, 1)), c], axis=1))
    assert np.all(np.diff(trans, axis=1) <= 1e-15)


def test_opaque_wall_returns_wall_color():
    model = SlabModel(1.0, 1.4, alpha=0.002)
    rays = z_rays(1, 0.2, 2.0)
    res = rnd.render_rgb(rays, rnd.uniform_samples(rays, 256), model)
    assert np.abs(res.value.data[0] - model.rgb).max() < 1e-2


def test_feature_and_rgb_share_quadrature_weights():
    model = SlabModel(1.0, 1.4, alpha=0.01)
    rays = z_rays(2, 0.2, 2.0)
    samples = rnd.uniform_samples(rays, 64)
    wf = rnd.render_feature(rays, samples, model).weights.data
    wc = rnd.render_rgb(rays, samples, model).weights.data
    assert np.array_equal(wf, wc)


def test_sharpness_limit_recovers_surface_depth():
    # exact slab SDF: surface at t*=1.0; as alpha shrinks the rendered
    # depth converges to t* within sample resolution
    rays = z_rays(1, 0.2, 2.0)
    n = 2048
    samples = rnd.uniform_samples(rays, n)
    resolution = (2.0 - 0.2) / n
    errs = []
    for alpha in (0.2, 0.05, 0.0125, 0.003125):
        model = SlabModel(1.0, 3.0, alpha=alpha)
        depth = rnd.render_rgb(rays, samples, model).depth()[0]
        errs.append(abs(depth - 1.0))
    assert errs[-1] < 4 * resolution
    # once alpha drops below the sample spacing the error is resolution-bound
    assert max(errs[2:]) <= max(errs[0], 4 * resolution)


# -- scene model wiring -------------------------------------------------------

@pytest.fixture(scope="module")
def model():
    return rnd.SceneModel(np.random.default_rng(5), n_q=4, hidden=16, depth=2,
                          skip=1, latent=6, head_hidden=12,
                          geometric_radius=1.0)


def test_parameter_sharing_feature_vs_rgb(model):
    rays = z_rays(2, 0.5, 3.0)
    samples = rnd.uniform_samples(rays, 16)
    f0 = rnd.render_feature(rays, samples, model).value.data.copy()
    c0 = rnd.render_rgb(rays, samples, model).value.data.copy()
    # rgb-head mutation leaves the feature path bit-identical
    model.rgb_head.layers[0].weight.data += 0.05
    f1 = rnd.render_feature(rays, samples, model).value.data
    c1 = rnd.render_rgb(rays, samples, model).value.data
    assert np.array_equal(f0, f1)
    assert not np.array_equal(c0, c1)
    # sdf-net mutation changes both paths
    model.sdf_net.layers[0].weight.data += 0.05
    f2 = rnd.render_feature(rays, samples, model).value.data
    c2 = rnd.render_rgb(rays, samples, model).value.data
    assert not np.array_equal(f1, f2)
    assert not np.array_equal(c1, c2)


def test_scene_model_gradients_reach_all_parameters(model):
    rays = z_rays(4, 0.5, 3.0)
    samples = rnd.uniform_samples(rays, 12)
    for p in [t for _, t in model.parameters()]:
        p.grad = None
    loss = ad.tensor_sum(rnd.render_feature(rays, samples, model).value) \
        + ad.tensor_sum(rnd.render_rgb(rays, samples, model).value)
    loss.backward()
    for name, p in model.parameters():
        assert p.grad is not None, name


def test_scene_model_checkpoint_roundtrip(tmp_path, model):
    path = tmp_path / "scene.ckpt"
    model.save(path)
    loaded = rnd.load_scene_model(path)
    x = np.random.default_rng(0).normal(size=(10, 3))
    a = model.sdf_values(x)
    b = loaded.sdf_values(x)
    assert np.abs(a - b).max() < 1e-6  # float32 storage


def test_render_feature_grid_shapes(tmp_path):
    from vqsurf.scene import CameraView
    model = rnd.SceneModel(np.random.default_rng(1), n_q=4, hidden=8, depth=1,
                           skip=0, latent=4, head_hidden=8)
    pose = np.eye(4)
    view = CameraView("v", 40.0, 40.0, 16.0, 16.0, pose,
                      np.zeros((32, 32, 3)))
    grid, _ = rnd.render_feature_grid(view, model, 0.5, 3.0, 4, 0, None)
    assert grid.shape == (8, 8, 4)
    bad = CameraView("v", 40.0, 40.0, 15.0, 15.0, pose, np.zeros((30, 30, 3)))
    from vqsurf.scene import DataError
    with pytest.raises(DataError, match="divisible"):
        rnd.render_feature_grid(bad, model, 0.5, 3.0, 4, 0, None)
