import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vqsurf import autodiff as ad
from vqsurf import vq as vqm
from vqsurf.autodiff import Tensor


def brute_force_indices(flat, entries):
    return np.array([
        np.argmin([np.sum((cell - e) ** 2) for e in entries]) for cell in flat
    ])


def test_quantize_nearest_entry():
    book = vqm.Codebook(np.array([[0.0, 0.0], [1.0, 1.0]]))
    q = vqm.quantize(np.array([[[0.2, 0.1]]]), book)
    assert q.indices[0, 0] == 0


def test_quantize_exact_match_zero_distance():
    rng = np.random.default_rng(2)
    entries = rng.normal(size=(6, 3))
    book = vqm.Codebook(entries)
    q = vqm.quantize(entries[4].reshape(1, 1, 3), book)
    assert q.indices[0, 0] == 4
    assert np.array_equal(q.z_q[0, 0], entries[4])


def test_quantize_tie_breaks_to_lowest_index():
    book = vqm.Codebook(np.array([[0.0, 0.0], [1.0, 1.0]]))
    q = vqm.quantize(np.array([[[0.5, 0.5]]]), book)
    assert q.indices[0, 0] == 0
    # duplicated entries also resolve to the first copy
    book = vqm.Codebook(np.array([[3.0, -1.0], [0.5, 0.5], [0.5, 0.5]]))
    q = vqm.quantize(np.array([[[0.4, 0.6]]]), book)
    assert q.indices[0, 0] == 1


def test_quantize_empty_codebook_rejected():
    with pytest.raises(ValueError):
        vqm.Codebook(np.zeros((0, 3)))


def test_quantize_width_mismatch():
    book = vqm.Codebook(np.zeros((4, 3)))
    with pytest.raises(ad.ShapeError):
        vqm.quantize(np.zeros((2, 2, 5)), book)


@settings(max_examples=40, deadline=None)
@given(st.integers(min_value=0, max_value=2 ** 31 - 1))
def test_quantize_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 50))
    width = int(rng.integers(1, 8))
    book = vqm.Codebook(rng.normal(size=(n, width)))
    z = rng.normal(size=(int(rng.integers(1, 5)), int(rng.integers(1, 5)), width))
    q = vqm.quantize(z, book, chunk=7)  # force chunk boundaries
    flat = z.reshape(-1, width)
    assert np.array_equal(q.indices.reshape(-1),
                          brute_force_indices(flat, book.entries.data))
    assert np.array_equal(q.z_q.reshape(-1, width),
                          book.entries.data[q.indices.reshape(-1)])


@settings(max_examples=20, deadline=None)
@given(st.integers(min_value=0, max_value=2 ** 31 - 1))
def test_quantize_idempotent(seed):
    rng = np.random.default_rng(seed)
    book = vqm.Codebook(rng.normal(size=(12, 4)))
    z = rng.normal(size=(3, 3, 4))
    q1 = vqm.quantize(z, book)
    q2 = vqm.quantize(q1.z_q, book)
    assert np.array_equal(q1.indices, q2.indices)
    assert np.array_equal(q1.z_q, q2.z_q)


def test_quantize_error_shrinks_when_true_nearest_added():
    rng = np.random.default_rng(7)
    book = vqm.Codebook(rng.normal(size=(10, 4)))
    z = rng.normal(size=(5, 5, 4))
    q1 = vqm.quantize(z, book)
    err1 = np.linalg.norm(z - q1.z_q)
    grown = vqm.Codebook(np.concatenate([book.entries.data,
                                         z[2, 2][None]], axis=0))
    q2 = vqm.quantize(z, grown)
    err2 = np.linalg.norm(z - q2.z_q)
    assert err2 <= err1


# -- straight-through ---------------------------------------------------------

def test_straight_through_forward_is_quantized_exactly():
    rng = np.random.default_rng(0)
    book = vqm.Codebook(rng.normal(size=(8, 3)))
    z_hat = ad.parameter(rng.normal(size=(2, 2, 3)))
    q = vqm.quantize(z_hat, book)
    out = vqm.straight_through(q, z_hat)
    assert np.array_equal(out.data, q.z_q)


def test_straight_through_identity_gradient():
    rng = np.random.default_rng(1)
    book = vqm.Codebook(rng.normal(size=(8, 3)), trainable=True)
    z_hat = ad.parameter(rng.normal(size=(2, 2, 3)))
    q = vqm.quantize(z_hat, book)
    ad.tensor_sum(vqm.straight_through(q, z_hat)).backward()
    assert np.array_equal(z_hat.grad, np.ones((2, 2, 3)))
    assert book.entries.grad is None  # no path to the codebook


def test_straight_through_matches_function_at_quantized_point():
    # d g(st(z))/d z_hat must equal dg/du evaluated at u = z_q
    rng = np.random.default_rng(3)
    book = vqm.Codebook(rng.normal(size=(6, 4)))
    z_hat = ad.parameter(rng.normal(size=(3, 2, 4)))
    q = vqm.quantize(z_hat, book)
    scale = Tensor(rng.normal(size=(3, 2, 4)))

    def g(t):
        return ad.tensor_sum(ad.sigmoid(t * scale) * t)

    g(vqm.straight_through(q, z_hat)).backward()
    via_st = z_hat.grad.copy()
    u = ad.parameter(q.z_q.copy())
    g(u).backward()
    assert np.allclose(via_st, u.grad, atol=1e-14)


def test_straight_through_shape_mismatch():
    z_hat = ad.parameter(np.zeros((2, 2, 3)))
    with pytest.raises(ad.ShapeError):
        vqm.straight_through(np.zeros((2, 2, 4)), z_hat)


# -- vqvae loss ---------------------------------------------------------------

def test_vqvae_loss_zero_at_fixed_point():
    rng = np.random.default_rng(4)
    book = vqm.Codebook(rng.normal(size=(5, 3)))
    z = book.entries.data[np.array([[0, 1], [2, 3]])]
    q = vqm.quantize(z, book)
    x = rng.uniform(size=(8, 8, 3))
    total, parts = vqm.vqvae_loss(x, Tensor(x.copy()), Tensor(z), book, q)
    assert float(total.data) == 0.0
    assert parts == {"recon": 0.0, "codebook": 0.0, "commit": 0.0}


def test_vqvae_codebook_term_has_no_encoder_gradient():
    rng = np.random.default_rng(5)
    book = vqm.Codebook(rng.normal(size=(5, 3)), trainable=True)
    z_hat = ad.parameter(rng.normal(size=(2, 2, 3)))
    q = vqm.quantize(z_hat, book)
    z_q_live = vqm.codebook_lookup(book, q.indices)
    diff = Tensor(z_hat.data) - z_q_live
    ad.tensor_sum(diff * diff).backward()
    assert z_hat.grad is None
    assert book.entries.grad is not None


def test_vqvae_commitment_term_has_no_codebook_gradient():
    rng = np.random.default_rng(6)
    book = vqm.Codebook(rng.normal(size=(5, 3)), trainable=True)
    z_hat = ad.parameter(rng.normal(size=(2, 2, 3)))
    q = vqm.quantize(z_hat, book)
    diff = Tensor(q.z_q) - z_hat
    ad.tensor_sum(diff * diff).backward()
    assert book.entries.grad is None
    assert z_hat.grad is not None


def test_vqvae_loss_gradcheck_with_frozen_sg():
    rng = np.random.default_rng(8)
    x = rng.uniform(size=(8, 8, 3))
    vae = vqm.VqVae(np.random.default_rng(1), n_q=4, codebook_size=7,
                    channels=(5, 6))
    z0 = vae.encode(x)
    q0 = vqm.quantize(z0, vae.book)
    offset = q0.z_q - z0.data

    def run(w):
        vae.encoder.stages[0].weight = w
        z = vae.encode(x)
        dec = vae.decode(z + Tensor(offset))
        total, _ = vqm.vqvae_loss(x, dec, z, vae.book, q0, 0.25,
                                  sg_z_hat=z0.data)
        return total

    original = vae.encoder.stages[0].weight
    try:
        err = ad.grad_check(run, original, h=1e-5, max_coords=30)
    finally:
        vae.encoder.stages[0].weight = original
    assert err < 1e-4


# -- vae shapes and pretraining -----------------------------------------------

def test_vae_shapes_roundtrip():
    vae = vqm.VqVae(np.random.default_rng(0), n_q=16, codebook_size=32,
                    channels=(8, 12))
    img = np.random.default_rng(1).uniform(size=(32, 32, 3))
    z = vae.encode(img)
    assert z.shape == (8, 8, 16)
    out = vae.decode(vqm.quantize(z, vae.book).z_q)
    assert out.shape == (32, 32, 3)
    assert np.all(out.data >= 0.0) and np.all(out.data <= 1.0)


def test_vae_encode_rejects_indivisible():
    vae = vqm.VqVae(np.random.default_rng(0), n_q=4, codebook_size=8,
                    channels=(4, 6))
    with pytest.raises(ad.ShapeError):
        vae.encode(np.zeros((30, 32, 3)))


def test_vae_decode_zero_grid_is_bias_response():
    vae = vqm.VqVae(np.random.default_rng(0), n_q=4, codebook_size=8,
                    channels=(4, 6))
    a = vae.decode(np.zeros((4, 4, 4))).data
    b = vae.decode(np.zeros((4, 4, 4))).data
    assert np.array_equal(a, b)


def test_pretrain_vae_rejects_empty():
    with pytest.raises(ValueError):
        vqm.pretrain_vae([], np.random.default_rng(0), steps=1)


def test_pretrain_vae_loss_decreases_and_reports_usage():
    rng = np.random.default_rng(0)
    imgs = [rng.uniform(size=(16, 16, 3)) * 0.5 + 0.25 for _ in range(2)]
    vae, metrics = vqm.pretrain_vae(imgs, np.random.default_rng(1), steps=300,
                                    lr=2e-3, n_q=4, codebook_size=16,
                                    channels=(6, 8), log_every=1)
    losses = [m["loss"] for m in metrics]
    assert np.mean(losses[-10:]) < np.mean(losses[:10])
    util = vqm.codebook_utilization(vae, imgs)
    assert 0.0 < util <= 1.0


def test_vae_checkpoint_roundtrip(tmp_path):
    vae = vqm.VqVae(np.random.default_rng(3), n_q=4, codebook_size=8,
                    channels=(4, 6))
    img = np.random.default_rng(1).uniform(size=(16, 16, 3))
    before = vae.reconstruct(img)
    path = tmp_path / "vae.ckpt"
    vae.save(path)
    loaded = vqm.VqVae.load(path)
    after = loaded.reconstruct(img)
    assert np.abs(before - after).max() < 1e-6
    assert not loaded.book.entries.requires_grad


def test_frozen_vae_blocks_gradients():
    vae = vqm.VqVae(np.random.default_rng(3), n_q=4, codebook_size=8,
                    channels=(4, 6))
    vae.freeze()
    grid = ad.parameter(np.random.default_rng(2).normal(size=(4, 4, 4)))
    out = vae.decode(grid)
    ad.tensor_sum(out).backward()
    assert grid.grad is not None
    for name, p in vae.parameters():
        assert p.grad is None, name
