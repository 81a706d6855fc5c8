"""Loss tests: hand arithmetic for the Dice ratio, analytic L2 gradients,
edge-term consistency with the classical Sobel, and FD checks for all three."""

import numpy as np
import pytest

from nel import autodiff as ad
from nel import filters, losses
from nel.errors import ContractError, DimensionError


def t4(arr, requires_grad=False):
    a = np.asarray(arr, dtype=np.float64)
    return ad.Tensor(a.reshape(1, 1, *a.shape), requires_grad=requires_grad, dtype="f64")


def rand(shape, seed, lo=0.0, hi=1.0, requires_grad=False):
    rng = np.random.default_rng(seed)
    return ad.Tensor(rng.uniform(lo, hi, shape), requires_grad=requires_grad, dtype="f64")


# ---------------------------------------------------------------------------
# dice


def test_dice_perfect_match_is_minus_half():
    ones = t4(np.ones((4, 4)))
    v = losses.dice_loss(ones, ones).item()
    # -n/(2n + eps)
    assert v == pytest.approx(-0.5, abs=1e-6)
    assert v > -0.5


def test_dice_hand_example():
    # labels [1,0,1,0], y [0.5,0.5,1,0]: overlap 1.5, sums 2+2 -> -0.375
    y = t4(np.array([[0.5, 0.5], [1.0, 0.0]]))
    lab = t4(np.array([[1.0, 0.0], [1.0, 0.0]]))
    assert losses.dice_loss(y, lab).item() == pytest.approx(-0.375, abs=1e-7)


def test_dice_all_zero_inputs_are_finite_zero():
    z = t4(np.zeros((4, 4)))
    v = losses.dice_loss(z, z).item()
    assert v == 0.0 and np.isfinite(v)


def test_dice_empty_label_nonzero_prediction():
    y = t4(np.full((4, 4), 0.3))
    lab = t4(np.zeros((4, 4)))
    assert losses.dice_loss(y, lab).item() == 0.0  # zero overlap


def test_dice_range_property():
    rng = np.random.default_rng(0)
    for seed in range(30):
        y = rand((1, 1, 6, 6), seed)
        lab = ad.Tensor((rng.random((1, 1, 6, 6)) < 0.4).astype(np.float64))
        v = losses.dice_loss(y, lab).item()
        assert -0.5 < v <= 0.0


def test_dice_minimum_only_at_exact_binary_match():
    rng = np.random.default_rng(1)
    lab_arr = (rng.random((1, 1, 5, 5)) < 0.4).astype(np.float64)
    lab = ad.Tensor(lab_arr)
    exact = losses.dice_loss(ad.Tensor(lab_arr.copy()), lab).item()
    assert exact == pytest.approx(-0.5, abs=1e-6)
    for seed in range(10):
        other = (np.random.default_rng(100 + seed).random((1, 1, 5, 5)) < 0.4).astype(np.float64)
        if np.array_equal(other, lab_arr):
            continue
        assert losses.dice_loss(ad.Tensor(other), lab).item() > exact


def test_dice_strictly_decreasing_on_labeled_pixels():
    # raising y at a labeled pixel must lower (improve) the loss
    lab_arr = np.zeros((1, 1, 4, 4))
    lab_arr[0, 0, 1, 2] = 1.0
    lab = ad.Tensor(lab_arr)
    y_arr = np.full((1, 1, 4, 4), 0.4)
    base = losses.dice_loss(ad.Tensor(y_arr.copy()), lab).item()
    y_arr[0, 0, 1, 2] += 0.1
    bumped = losses.dice_loss(ad.Tensor(y_arr), lab).item()
    assert bumped < base


def test_dice_rejects_nonbinary_labels_and_bad_shapes():
    y = t4(np.zeros((4, 4)))
    with pytest.raises(ContractError):
        losses.dice_loss(y, t4(np.full((4, 4), 0.5)))
    with pytest.raises(DimensionError):
        losses.dice_loss(y, t4(np.zeros((4, 5))))


def test_dice_gradient_check():
    for seed in range(3):
        y = rand((1, 1, 6, 6), 200 + seed, lo=0.05, hi=0.95, requires_grad=True)
        lab = ad.Tensor((np.random.default_rng(seed).random((1, 1, 6, 6)) < 0.4).astype(np.float64))
        err = ad.grad_check(lambda: losses.dice_loss(y, lab).value, [y])
        assert err < 1e-5


# ---------------------------------------------------------------------------
# l2


def test_l2_identical_is_zero():
    a = rand((2, 1, 4, 4), 2)
    assert losses.l2_loss(a, ad.Tensor(a.data.copy())).item() == 0.0


def test_l2_constant_offset():
    a = t4(np.zeros((4, 4)))
    b = t4(np.full((4, 4), 0.5))
    assert losses.l2_loss(a, b).item() == pytest.approx(0.25, abs=1e-15)


def test_l2_gradient_is_two_diff_over_n():
    y = rand((1, 1, 4, 4), 3, requires_grad=True)
    target = rand((1, 1, 4, 4), 4)
    lv = losses.l2_loss(y, target)
    lv.value.backward()
    n = y.data.size
    np.testing.assert_allclose(y.grad, 2.0 * (y.data - target.data) / n, rtol=1e-12)


def test_l2_gradient_check():
    y = rand((2, 1, 6, 6), 5, requires_grad=True)
    target = rand((2, 1, 6, 6), 6)
    assert ad.grad_check(lambda: losses.l2_loss(y, target).value, [y]) < 1e-6


def test_l2_rejects_shape_mismatch():
    with pytest.raises(DimensionError):
        losses.l2_loss(t4(np.zeros((4, 4))), t4(np.zeros((5, 4))))


# ---------------------------------------------------------------------------
# edge preservation


def test_edge_loss_identical_images_zero():
    a = rand((1, 1, 8, 8), 7)
    assert losses.edge_preservation_loss(a, ad.Tensor(a.data.copy())).item() == 0.0


def test_edge_loss_two_constants_zero():
    a = t4(np.full((8, 8), 0.2))
    b = t4(np.full((8, 8), 0.9))
    assert losses.edge_preservation_loss(a, b).item() == pytest.approx(0.0, abs=1e-20)


def test_edge_loss_shift_invariance():
    # adding the same constant to both images leaves the loss unchanged
    a = rand((1, 1, 8, 8), 8)
    b = rand((1, 1, 8, 8), 9)
    base = losses.edge_preservation_loss(a, b).item()
    a2 = ad.Tensor(a.data + 0.25)
    b2 = ad.Tensor(b.data + 0.25)
    assert losses.edge_preservation_loss(a2, b2).item() == pytest.approx(base, rel=1e-9)


def test_edge_loss_agrees_with_classical_sobel_interior():
    # cross-module oracle: the fixed conv inside the loss must equal the
    # classical filter on the interior (the loss runs valid-region convs)
    img = np.random.default_rng(10).random((10, 12))
    gx_full, gy_full = filters.sobel(img)
    kx, ky = losses._sobel_pair(np.float64)
    tx = ad.conv2d(ad.Tensor(img[None, None]), kx, pad=0)
    ty = ad.conv2d(ad.Tensor(img[None, None]), ky, pad=0)
    np.testing.assert_allclose(tx.data[0, 0], gx_full[1:-1, 1:-1], atol=1e-6)
    np.testing.assert_allclose(ty.data[0, 0], gy_full[1:-1, 1:-1], atol=1e-6)


def test_edge_loss_detects_edge_differences():
    flat = t4(np.full((8, 8), 0.5))
    step = np.full((8, 8), 0.0)
    step[:, 4:] = 1.0
    v = losses.edge_preservation_loss(t4(step), flat).item()
    assert v > 0.1


def test_edge_loss_rejects_multichannel():
    a = ad.Tensor(np.zeros((1, 2, 8, 8)))
    with pytest.raises(DimensionError):
        losses.edge_preservation_loss(a, a)


def test_edge_loss_gradient_check():
    y = rand((1, 1, 7, 7), 11, requires_grad=True)
    clean = rand((1, 1, 7, 7), 12)
    err = ad.grad_check(lambda: losses.edge_preservation_loss(y, clean).value, [y])
    assert err < 1e-5


# ---------------------------------------------------------------------------
# combined


def test_combined_lambda_zero_is_exactly_l2():
    y = rand((1, 1, 8, 8), 13)
    clean = rand((1, 1, 8, 8), 14)
    combined = losses.combined_denoise_loss(y, clean, lambda_edge=0.0)
    plain = losses.l2_loss(y, ad.Tensor(clean.data.copy()))
    assert combined.item() == plain.item()
    assert combined.breakdown["edge_term"] == 0.0


def test_combined_identical_images_zero():
    a = rand((1, 1, 8, 8), 15)
    assert losses.combined_denoise_loss(a, ad.Tensor(a.data.copy()), 1.0).item() == 0.0


def test_combined_equals_sum_of_parts():
    y = rand((1, 1, 9, 9), 16)
    clean = rand((1, 1, 9, 9), 17)
    for lam in (0.5, 1.0, 2.0):
        c = losses.combined_denoise_loss(y, ad.Tensor(clean.data.copy()), lam)
        l2 = losses.l2_loss(ad.Tensor(y.data.copy()), ad.Tensor(clean.data.copy())).item()
        edge = losses.edge_preservation_loss(
            ad.Tensor(y.data.copy()), ad.Tensor(clean.data.copy())
        ).item()
        assert c.item() == pytest.approx(l2 + lam * edge, rel=1e-6)


def test_combined_rejects_negative_lambda():
    a = rand((1, 1, 8, 8), 18)
    with pytest.raises(ContractError):
        losses.combined_denoise_loss(a, a, -0.1)


def test_combined_gradient_check():
    y = rand((1, 1, 7, 7), 19, requires_grad=True)
    clean = rand((1, 1, 7, 7), 20)
    err = ad.grad_check(lambda: losses.combined_denoise_loss(y, clean, 1.0).value, [y])
    assert err < 1e-5


# ---------------------------------------------------------------------------
# breakdown invariant


@pytest.mark.parametrize("which", ["dice", "l2", "edge", "combined0", "combined1", "combined2.5"])
def test_breakdown_weighted_sum_matches_value(which):
    y = rand((1, 1, 8, 8), 21, requires_grad=False)
    other = rand((1, 1, 8, 8), 22)
    if which == "dice":
        lab = ad.Tensor((np.random.default_rng(23).random((1, 1, 8, 8)) < 0.3).astype(np.float64))
        lv = losses.dice_loss(y, lab)
    elif which == "l2":
        lv = losses.l2_loss(y, other)
    elif which == "edge":
        lv = losses.edge_preservation_loss(y, other)
    else:
        lam = float(which.replace("combined", ""))
        lv = losses.combined_denoise_loss(y, other, lam)
    total = sum(lv.weights[k] * lv.breakdown[k] for k in lv.breakdown)
    assert total == pytest.approx(lv.item(), rel=1e-6, abs=1e-12)
    assert set(lv.breakdown) == set(lv.weights)
