import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from sddg.dynamic import (DynamicBlock, adaptor_weights, dynamic_forward, instance_normalize,
                          invariant_branch, specific_branch)

D = torch.float64


def block_params(c=4, k=3, seed=0, affine=False):
    torch.manual_seed(seed)
    blk = DynamicBlock(c, k, reduction=2, in_affine=affine).double()
    return blk, {n: p.detach().clone() for n, p in blk.named_parameters()}


def naive_conv(x, w, b=None):
    """Nested-loop 3x3 convolution, stride 1, zero padding 1."""
    n, c, h, wd = x.shape
    out = np.zeros((n, w.shape[0], h, wd))
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    for i in range(n):
        for o in range(w.shape[0]):
            for y in range(h):
                for z in range(wd):
                    out[i, o, y, z] = (xp[i, :, y:y + 3, z:z + 3] * w[o]).sum() + (b[o] if b is not None else 0)
    return out


def test_instance_norm_constant_channel():
    x = torch.full((1, 2, 4, 4), 5.0, dtype=D)
    assert torch.count_nonzero(instance_normalize(x)) == 0


def test_instance_norm_small_plane():
    x = torch.tensor([1.0, 2.0, 3.0, 4.0], dtype=D).view(1, 1, 2, 2)
    y = instance_normalize(x)
    assert abs(y.mean().item()) < 1e-12
    assert y.var(unbiased=False).item() == pytest.approx(1.0, abs=1e-5)


def test_instance_norm_random_moments(rng):
    y = instance_normalize(torch.from_numpy(rng.normal(3, 2, size=(5, 6, 8, 8))), eps=1e-5)
    assert y.mean(dim=(2, 3)).abs().max() < 1e-4
    assert (y.var(dim=(2, 3), unbiased=False) - 1).abs().max() < 1e-4


def test_instance_norm_rejects_bad_eps():
    with pytest.raises(ValueError):
        instance_normalize(torch.zeros(1, 1, 2, 2), eps=0.0)


def test_invariant_branch_nonnegative_and_zero(rng):
    _, p = block_params()
    assert invariant_branch(torch.from_numpy(rng.normal(size=(3, 4, 5, 5))), p).min() >= 0
    p["inv_conv.bias"] = torch.zeros_like(p["inv_conv.bias"])
    assert torch.count_nonzero(invariant_branch(torch.zeros(2, 4, 5, 5, dtype=D), p)) == 0


def test_invariant_branch_matches_scalar_oracle(rng):
    _, p = block_params()
    x = rng.normal(size=(2, 4, 5, 5))
    h = naive_conv(x, p["inv_conv.weight"].numpy(), p["inv_conv.bias"].numpy())
    mu = h.mean(axis=(2, 3), keepdims=True)
    var = h.var(axis=(2, 3), keepdims=True)
    expected = np.maximum((h - mu) / np.sqrt(var + 1e-5), 0)
    np.testing.assert_allclose(invariant_branch(torch.from_numpy(x), p).numpy(), expected, atol=1e-10)


def test_invariant_branch_channel_mismatch():
    _, p = block_params()
    with pytest.raises(ValueError):
        invariant_branch(torch.zeros(1, 3, 5, 5, dtype=D), p)


def test_shift_invariance_of_normalized_conv(rng):
    _, p = block_params()
    x = torch.from_numpy(rng.normal(size=(2, 4, 5, 5)))
    shifted = dict(p)
    shifted["inv_conv.bias"] = p["inv_conv.bias"] + torch.from_numpy(rng.normal(size=4)) * 10
    assert (invariant_branch(x, p) - invariant_branch(x, shifted)).abs().max() < 1e-5


def test_adaptor_uniform_when_fc2_zero(rng):
    _, p = block_params()
    p["adaptor.fc2.weight"] = torch.zeros_like(p["adaptor.fc2.weight"])
    p["adaptor.fc2.bias"] = torch.zeros_like(p["adaptor.fc2.bias"])
    w = adaptor_weights(torch.from_numpy(rng.normal(size=(3, 4, 5, 5))), p)
    assert torch.allclose(w, torch.full_like(w, 1 / 3), atol=1e-15)


def test_adaptor_matches_scalar_pipeline(rng):
    _, p = block_params()
    x = rng.normal(size=(2, 4, 3, 3))
    w1, b1 = p["adaptor.fc1.weight"].numpy(), p["adaptor.fc1.bias"].numpy()
    w2, b2 = p["adaptor.fc2.weight"].numpy(), p["adaptor.fc2.bias"].numpy()
    got = adaptor_weights(torch.from_numpy(x), p).numpy()
    for i in range(2):
        pooled = [sum(x[i, c].flatten()) / 9 for c in range(4)]
        hidden = [max(0.0, sum(w1[j, c] * pooled[c] for c in range(4)) + b1[j]) for j in range(w1.shape[0])]
        z = [sum(w2[k, j] * hidden[j] for j in range(len(hidden))) + b2[k] for k in range(3)]
        e = np.exp(np.array(z) - max(z))
        np.testing.assert_allclose(got[i], e / e.sum(), atol=1e-12)


@given(st.integers(0, 10_000), st.floats(0.01, 50))
def test_adaptor_rows_on_simplex(seed, scale):
    _, p = block_params(seed=seed % 7)
    x = torch.from_numpy(np.random.default_rng(seed).normal(0, scale, size=(4, 4, 3, 3)))
    w = adaptor_weights(x, p)
    assert (w >= 0).all() and ((w.sum(1) - 1).abs() < 1e-6).all()


def test_specific_branch_one_hot_selects_kernel(rng):
    _, p = block_params()
    x = torch.from_numpy(rng.normal(size=(2, 4, 5, 5)))
    w = torch.tensor([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], dtype=D)
    out = specific_branch(x, w, p)
    for i, k in ((0, 1), (1, 2)):
        single = torch.nn.functional.conv2d(x[i:i + 1], p["spec_weight"][k], padding=1)
        assert torch.equal(out[i:i + 1], single) or (out[i:i + 1] - single).abs().max() < 1e-12


def test_specific_branch_identical_kernels_ignore_weights(rng):
    _, p = block_params()
    p["spec_weight"] = p["spec_weight"][:1].repeat(3, 1, 1, 1, 1)
    x = torch.from_numpy(rng.normal(size=(2, 4, 5, 5)))
    a = specific_branch(x, torch.tensor([[1.0, 0, 0], [0.2, 0.3, 0.5]], dtype=D), p)
    b = specific_branch(x, torch.tensor([[0.1, 0.1, 0.8], [0, 1.0, 0]], dtype=D), p)
    assert (a - b).abs().max() < 1e-12


def test_specific_branch_matches_per_kernel_accumulation(rng):
    _, p = block_params()
    x = rng.normal(size=(2, 4, 4, 4))
    w = rng.dirichlet(np.ones(3), size=2)
    expected = np.zeros((2, 4, 4, 4))
    for k in range(3):
        conv = naive_conv(x, p["spec_weight"][k].numpy())
        expected += w[:, k, None, None, None] * conv
    got = specific_branch(torch.from_numpy(x), torch.from_numpy(w), p).numpy()
    np.testing.assert_allclose(got, expected, atol=1e-5)


def test_specific_branch_k_mismatch():
    _, p = block_params()
    with pytest.raises(ValueError):
        specific_branch(torch.zeros(2, 4, 3, 3, dtype=D), torch.full((2, 2), 0.5, dtype=D), p)


def test_dynamic_forward_compositions(rng):
    _, p = block_params()
    x = torch.from_numpy(rng.normal(size=(3, 4, 5, 5)))
    out, w = dynamic_forward(x, p)
    assert torch.allclose(out, invariant_branch(x, p) + specific_branch(x, w, p), atol=1e-12)

    zero_spec = dict(p, spec_weight=torch.zeros_like(p["spec_weight"]))
    assert torch.equal(dynamic_forward(x, zero_spec)[0], invariant_branch(x, p))

    zero_inv = dict(p, **{"inv_conv.weight": torch.zeros_like(p["inv_conv.weight"]),
                          "inv_conv.bias": torch.zeros_like(p["inv_conv.bias"])})
    out, w = dynamic_forward(x, zero_inv)
    assert torch.equal(out, specific_branch(x, w, p))


def test_permutation_equivariance(rng):
    _, p = block_params()
    x = torch.from_numpy(rng.normal(size=(3, 4, 5, 5)))
    perm = torch.tensor([2, 0, 1])
    q = dict(p, spec_weight=p["spec_weight"][perm], **{"adaptor.fc2.weight": p["adaptor.fc2.weight"][perm],
                                                       "adaptor.fc2.bias": p["adaptor.fc2.bias"][perm]})
    a, wa = dynamic_forward(x, p)
    b, wb = dynamic_forward(x, q)
    assert (a - b).abs().max() < 1e-6
    assert torch.allclose(wa[:, perm], wb)


def test_batch_independence(rng):
    blk, _ = block_params()
    x = torch.from_numpy(rng.normal(size=(5, 4, 5, 5)))
    perm = torch.randperm(5, generator=torch.Generator().manual_seed(0))
    out, w = blk(x)
    out_p, w_p = blk(x[perm])
    assert (out[perm] - out_p).abs().max() < 1e-12 and (w[perm] - w_p).abs().max() < 1e-15
    single, _ = blk(x[2:3])
    assert (single - out[2:3]).abs().max() < 1e-12


def test_block_rejects_k1():
    with pytest.raises(ValueError):
        DynamicBlock(4, k=1)


def test_block_affine_option():
    blk, p = block_params(affine=True)
    assert "inv_norm.weight" in p and "inv_norm.bias" in p
    out, _ = blk(torch.ones(1, 4, 3, 3, dtype=D))
    assert out.shape == (1, 4, 3, 3)
