import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from kpdiscovery.model import render_gaussian, rotate_maps
from kpdiscovery.objectives import (LossWeights, build_extractor, reconstruction_loss,
                                    rotation_loss, separation_loss, supervised_keypoint_loss, tiny_extractor,
                                    total_loss)

from oracles import brute_separation


@pytest.fixture(scope="module")
def extractor():
    return tiny_extractor(seed=0).double()


def test_reconstruction_zero_and_symmetric(extractor):
    a, b = torch.rand(2, 2, 3, 32, 32, dtype=torch.float64)
    assert reconstruction_loss(a, a, extractor).item() == 0.0
    assert reconstruction_loss(a, b, extractor).item() == pytest.approx(reconstruction_loss(b, a, extractor).item(), rel=1e-12)


def test_reconstruction_quadratic_in_small_perturbation(extractor):
    """loss(t, t + e d) / e^2 converges to a constant as e shrinks (second-order expansion)."""
    t = torch.rand(1, 3, 32, 32, dtype=torch.float64)
    d = torch.randn_like(t)
    ratios = [reconstruction_loss(t, t + e * d, extractor).item() / e**2 for e in (1e-3, 5e-4, 2.5e-4)]
    assert ratios[0] == pytest.approx(ratios[1], rel=1e-2)
    assert ratios[1] == pytest.approx(ratios[2], rel=1e-2)


def test_reconstruction_shape_mismatch(extractor):
    with pytest.raises(ValueError):
        reconstruction_loss(torch.zeros(1, 3, 32, 32, dtype=torch.float64),
                            torch.zeros(1, 3, 16, 16, dtype=torch.float64), extractor)


def test_extractor_is_frozen():
    ext = tiny_extractor()
    ext.train()
    assert not ext.training
    assert all(not p.requires_grad for p in ext.parameters())
    assert len(ext(torch.rand(1, 3, 32, 32))) == 4


def test_extractor_seeded():
    a, b = tiny_extractor(seed=3), tiny_extractor(seed=3)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)
    with pytest.raises(ValueError):
        build_extractor("alexnet")


def test_vgg_split_taps():
    ext = build_extractor("vgg16", n_blocks=4, pretrained=False)
    feats = ext(torch.rand(1, 3, 64, 64))
    assert [f.shape[1] for f in feats] == [64, 128, 256, 512]
    assert [f.shape[-1] for f in feats] == [64, 32, 16, 8]
    assert isinstance(ext.blocks[0][-1], torch.nn.ReLU)


def test_rotation_loss_zero_for_equivariant_maps():
    uv = torch.rand(2, 3, 2, dtype=torch.float64) * 0.8 + 0.1
    from kpdiscovery.model import rotate_uv

    for k in (1, 2, 3):
        pseudo = rotate_maps(render_gaussian(uv, 0.05, 32), k)
        pred = render_gaussian(rotate_uv(uv, k), 0.05, 32)
        assert rotation_loss(pseudo, pred).item() < 1e-24


def test_rotation_loss_between_two_gaussians():
    a = render_gaussian(torch.tensor([[[0.25, 0.5]]], dtype=torch.float64), 0.05, 64)
    b = render_gaussian(torch.tensor([[[0.75, 0.5]]], dtype=torch.float64), 0.05, 64)
    xs = (np.arange(64) + 0.5) / 64
    ga = np.exp(-((xs[None] - 0.25) ** 2 + (xs[:, None] - 0.5) ** 2) / (2 * 0.05**2))
    gb = np.exp(-((xs[None] - 0.75) ** 2 + (xs[:, None] - 0.5) ** 2) / (2 * 0.05**2))
    assert rotation_loss(a, b).item() == pytest.approx(np.mean((ga - gb) ** 2), rel=1e-12)


def test_rotation_loss_pseudo_labels_receive_no_gradient():
    pseudo = torch.rand(1, 2, 8, 8, requires_grad=True)
    pred = torch.rand(1, 2, 8, 8, requires_grad=True)
    rotation_loss(pseudo, pred).backward()
    assert pseudo.grad is None and pred.grad is not None


def test_separation_closed_forms():
    for k in (1, 2, 5, 10):
        pts = torch.full((k, 2), 0.3, dtype=torch.float64)
        assert separation_loss(pts, 0.05).item() == k * (k - 1)
    s = 0.05
    pts = torch.tensor([[0.2, 0.2], [0.2 + s, 0.2 + s]], dtype=torch.float64)   # squared distance 2 s^2
    assert abs(separation_loss(pts, s).item() - 2 * math.exp(-1)) < 1e-12
    far = torch.tensor([[0.0, 0.0], [10 * s, 0.0]], dtype=torch.float64)
    assert separation_loss(far, s).item() < 1e-8


@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=2, max_size=6), st.floats(0.01, 0.5),
       st.floats(0, 2 * math.pi))
@settings(max_examples=50, deadline=None)
def test_separation_matches_brute_force_and_invariances(points, sigma_s, angle):
    pts = torch.tensor(points, dtype=torch.float64)
    value = separation_loss(pts, sigma_s).item()
    assert value == pytest.approx(brute_separation(np.array(points), sigma_s), rel=1e-9, abs=1e-12)
    perm = torch.randperm(len(points))
    assert separation_loss(pts[perm], sigma_s).item() == pytest.approx(value, rel=1e-9, abs=1e-12)
    c, s = math.cos(angle), math.sin(angle)
    rot = torch.tensor([[c, -s], [s, c]], dtype=torch.float64)
    assert separation_loss(pts @ rot.T, sigma_s).item() == pytest.approx(value, rel=1e-9, abs=1e-12)


def test_separation_batch_mean():
    pts = torch.rand(3, 4, 2, dtype=torch.float64)
    per = [separation_loss(p, 0.1).item() for p in pts]
    assert separation_loss(pts, 0.1).item() == pytest.approx(np.mean(per))
    with pytest.raises(ValueError):
        separation_loss(pts, 0.0)


def test_supervised_zero_and_disjoint():
    ann = torch.tensor([[[0.2, 0.2], [0.8, 0.8]]], dtype=torch.float64)
    assert supervised_keypoint_loss(ann, ann, [0, 1], 0.05, 32).item() == 0.0
    pred = torch.tensor([[[0.8, 0.2], [0.2, 0.8]]], dtype=torch.float64)
    a = render_gaussian(pred, 0.05, 32)
    b = render_gaussian(ann, 0.05, 32)
    # the two sets of Gaussians barely overlap, so the MSE is their summed squared mass per cell
    expected = ((a**2).sum() + (b**2).sum()).item() / (2 * 32 * 32)
    assert supervised_keypoint_loss(pred, ann, [0, 1], 0.05, 32).item() == pytest.approx(expected, rel=1e-6)


def test_supervised_monotone_as_peak_approaches():
    ann = torch.tensor([[[0.7, 0.5]]], dtype=torch.float64)
    values = [supervised_keypoint_loss(torch.tensor([[[u, 0.5]]], dtype=torch.float64), ann, [0], 0.05, 32).item()
              for u in np.linspace(0.35, 0.7, 15)]
    assert all(a > b for a, b in zip(values, values[1:]))
    assert values[-1] == 0.0


def test_supervised_mapping_and_maps():
    maps = render_gaussian(torch.rand(1, 4, 2, dtype=torch.float64), 0.05, 16)
    ann = torch.rand(1, 2, 2, dtype=torch.float64)
    v1 = supervised_keypoint_loss(maps, ann, {0: 3, 1: 1}, 0.05)
    v2 = supervised_keypoint_loss(maps, ann, [3, 1], 0.05)
    assert v1.item() == v2.item()
    with pytest.raises(ValueError):
        supervised_keypoint_loss(maps, ann, {0: 3}, 0.05)
    with pytest.raises(ValueError):
        supervised_keypoint_loss(torch.rand(1, 4, 2), ann.float(), [0, 1], 0.05)


def test_total_loss_gating():
    parts = {"recon": torch.tensor(1.0), "rot": torch.tensor(2.0), "sep": torch.tensor(3.0)}
    w = LossWeights(w_r=1.0, w_s=0.01, curriculum_epoch=5)
    assert total_loss(parts, w, 5).item() == 1.0
    assert total_loss(parts, w, 6).item() == pytest.approx(1.0 + 2.0 + 0.03)
    assert total_loss(parts, LossWeights(0, 0, 5), 50).item() == 1.0
    assert total_loss({**parts, "sup": torch.tensor(0.5)}, w, 0).item() == 1.5


def test_gated_terms_have_zero_gradient_before_curriculum():
    x = torch.tensor(0.7, requires_grad=True)
    parts = {"recon": torch.tensor(1.0, requires_grad=True), "rot": x * 3, "sep": x**2}
    total_loss(parts, LossWeights(curriculum_epoch=5), 2).backward()
    assert x.grad is None or x.grad.item() == 0.0


def test_weights_validated():
    with pytest.raises(ValueError):
        LossWeights(w_r=-1)
    with pytest.raises(ValueError):
        LossWeights(sigma_s=0)
    with pytest.raises(ValueError):
        total_loss({"recon": torch.tensor(1.0)}, LossWeights(), -1)


def test_gradients_match_finite_differences():
    from oracles import central_difference_grad, relative_error
    from toys import analytic_grad, make_problem

    net, losses = make_problem(seed=1)
    params = list(net.parameters())
    assert sum(p.numel() for p in params) <= 10_000
    for name in ("recon", "rot", "sep", "sup"):
        fn = lambda: losses()[name]  # noqa: E731
        assert relative_error(analytic_grad(fn, params), central_difference_grad(fn, params)) < 1e-4, name
