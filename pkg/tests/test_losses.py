import math
from dataclasses import replace

import mpmath
import numpy as np
import pytest
import torch

from srscn import diffcore as dc
from srscn import losses as L
from srscn.errors import ConfigurationError, ShapeError

CFG = L.LossConfig()


def uniform_probs(n=1, c=4, h=8, w=8, dtype=torch.float64):
    return torch.full((n, c, h, w), 1.0 / c, dtype=dtype)


def random_case(seed, n=2, c=4, h=8, w=8):
    g = torch.Generator().manual_seed(seed)
    logits = torch.randn(n, c, h, w, generator=g, dtype=torch.float64)
    labels = torch.randint(0, c, (n, h, w), generator=g)
    return logits, labels


# --- soft Dice ---------------------------------------------------------------


def test_dice_of_perfect_prediction_is_one():
    _, lab = random_case(0)
    y = L.one_hot(lab).double()
    for i in range(4):
        assert float(L.soft_dice_per_class(y, y, i)) == 1.0


def test_dice_uniform_prediction_value():
    # N = 64 pixels all of class 2 -> (0.5 N + 1) / (1.25 N + 1) = 33 / 81
    p = uniform_probs()
    y = L.one_hot(torch.full((1, 8, 8), 2)).double()
    assert float(L.soft_dice_per_class(p, y, 2)) == pytest.approx(33 / 81, abs=1e-15)


def test_dice_absent_class_is_one():
    y = L.one_hot(torch.zeros(1, 8, 8, dtype=torch.long)).double()
    assert float(L.soft_dice_per_class(y, y, 3)) == 1.0


def test_dice_shape_mismatch():
    with pytest.raises(ShapeError):
        L.soft_dice(uniform_probs(), uniform_probs(h=4))


# --- segmentation loss ---------------------------------------------------------


def test_perfect_prediction_is_nearly_free():
    _, lab = random_case(1)
    y = L.one_hot(lab).double()
    lv = L.seg_loss(y, lab, CFG)
    ceiling = (-math.log(1 - CFG.eps_clamp)) ** 0.3
    assert float(lv.components["seg_dice"]) <= ceiling + 1e-12
    assert float(lv.components["seg_cross"]) <= ceiling + 1e-12
    assert float(lv.total) < 1e-2


def test_uniform_cross_term_matches_high_precision_oracle():
    expected = float(mpmath.power(mpmath.log(4), mpmath.mpf("0.3")))
    lab = torch.randint(0, 4, (2, 8, 8), generator=torch.Generator().manual_seed(0))
    cfg = replace(CFG, class_weights=(1, 1, 1, 1), gamma_cross=0.3)
    lv = L.seg_loss(uniform_probs(2), lab, cfg)
    assert float(lv.components["seg_cross"]) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(1.1029, abs=1e-4)


def test_zero_cross_weight_leaves_dice_only():
    logits, lab = random_case(2)
    cfg = replace(CFG, lambda_cross=0.0)
    lv = L.seg_loss(torch.softmax(logits, 1), lab, cfg)
    assert float(lv.total) == float(cfg.lambda_dice * lv.components["seg_dice"])


def test_reduces_to_cross_entropy():
    logits, lab = random_case(3, n=3)
    p = torch.softmax(logits, 1)
    cfg = L.LossConfig(lambda_dice=0.0, lambda_cross=1.0, gamma_dice=1.0, gamma_cross=1.0,
                       class_weights=(1, 1, 1, 1))
    got = float(L.seg_loss(p, lab, cfg).total)
    pn, ln = p.numpy(), lab.numpy()
    n, _, h, w = pn.shape
    picked = pn[np.arange(n)[:, None, None], ln, np.arange(h)[None, :, None], np.arange(w)[None, None, :]]
    assert got == pytest.approx(float(-np.log(picked).mean()), abs=1e-9)


def test_class_weights_scale_the_cross_term():
    logits, lab = random_case(4)
    p = torch.softmax(logits, 1)
    base = L.seg_loss(p, lab, replace(CFG, class_weights=(1, 1, 1, 1)))
    doubled = L.seg_loss(p, lab, replace(CFG, class_weights=(2, 2, 2, 2)))
    assert float(doubled.components["seg_cross"]) == pytest.approx(2 * float(base.components["seg_cross"]))


@pytest.mark.parametrize("seed", range(5))
def test_label_permutation_equivariance(seed):
    logits, lab = random_case(seed)
    p = torch.softmax(logits, 1)
    perm = torch.randperm(4, generator=torch.Generator().manual_seed(seed))
    w = (1.0, 2.0, 3.0, 4.0)
    cfg = replace(CFG, class_weights=w)
    # class k becomes class perm[k]
    inv = torch.argsort(perm)
    p2 = p[:, inv]
    lab2 = perm[lab]
    w2 = tuple(w[int(i)] for i in inv)
    a = float(L.seg_loss(p, lab, cfg).total)
    b = float(L.seg_loss(p2, lab2, replace(CFG, class_weights=w2)).total)
    assert a == pytest.approx(b, abs=1e-12)


def test_class_weights_from_frequencies():
    w = L.class_weights_from_frequencies([80, 10, 5, 5])
    np.testing.assert_allclose(w, [(100 / 80) ** 0.5, 10**0.5, 20**0.5, 20**0.5])


def test_config_validation():
    with pytest.raises(ConfigurationError):
        L.LossConfig(gamma_dice=0).validate()
    with pytest.raises(ConfigurationError):
        L.LossConfig(lambda_sr=-1).validate()
    with pytest.raises(ConfigurationError):
        L.LossConfig(eps_clamp=0.1).validate()


# --- regularizers ---------------------------------------------------------------


def test_sr_loss_values():
    r = torch.zeros(1, 4, 3, 3, dtype=torch.float64)
    assert float(L.sr_loss(r, r)) == 0.0
    r_hat = r.clone()
    r_hat[0, 1, 0, 0] = 1.0
    r_hat[0, 2, 2, 1] = 2.0
    assert float(L.sr_loss(r_hat, r)) == 5.0
    assert float(L.sr_loss(3 * r_hat, r)) == 45.0


def test_sr_loss_is_batch_mean():
    a = torch.rand(3, 4, 5, 5, dtype=torch.float64)
    b = torch.rand(3, 4, 5, 5, dtype=torch.float64)
    per_sample = [float(((a[i] - b[i]) ** 2).sum()) for i in range(3)]
    assert float(L.sr_loss(a, b)) == pytest.approx(sum(per_sample) / 3, rel=1e-14)


def test_sc_loss_values():
    p = torch.tensor([0.5], dtype=torch.float64)
    ph = torch.tensor([0.7], dtype=torch.float64)
    assert float(L.sc_loss(p, p)) == 0.0
    assert float(L.sc_loss(ph, p)) == pytest.approx(0.04, abs=1e-15)
    a, b = torch.rand(6, dtype=torch.float64), torch.rand(6, dtype=torch.float64)
    assert float(L.sc_loss(a, b)) == float(L.sc_loss(b, a))


def test_acnn_loss_values():
    a = torch.tensor([[0.0, 0.0]], dtype=torch.float64)
    b = torch.tensor([[3.0, 4.0]], dtype=torch.float64)
    assert float(L.acnn_loss(a, a)) == 0.0
    assert float(L.acnn_loss(a, b)) == 25.0
    assert float(L.acnn_loss(2 * a, 2 * b)) == 100.0


def test_gan_losses():
    half = torch.full((4,), 0.5, dtype=torch.float64)
    d, g = L.gan_losses(half, half)
    assert float(d) == pytest.approx(2 * math.log(2), abs=1e-12)
    _, g = L.gan_losses(half, torch.ones(4, dtype=torch.float64))
    assert float(g) < 1e-6
    d, _ = L.gan_losses(torch.ones(4, dtype=torch.float64), torch.zeros(4, dtype=torch.float64))
    assert float(d) < 1e-6


# --- combinations ---------------------------------------------------------------


def _components(seed=0):
    g = torch.Generator().manual_seed(seed)
    return {k: torch.rand((), generator=g, dtype=torch.float64) * 10 for k in L.COMPONENTS}


@pytest.mark.parametrize("variant", L.VARIANTS)
def test_zero_regularizer_weights_give_seg_loss(variant):
    cfg = replace(CFG, lambda_sr=0.0, lambda_sc=0.0, lambda_adv=0.0)
    comps = _components()
    seg = cfg.lambda_dice * comps["seg_dice"] + cfg.lambda_cross * comps["seg_cross"]
    assert float(L.combined_loss(variant, comps, cfg).total) == float(seg)


@pytest.mark.parametrize("variant", L.VARIANTS)
def test_total_is_weighted_sum(variant):
    comps = _components(1)
    lv = L.combined_loss(variant, comps, CFG)
    again = sum(CFG.weight_of(k) * v for k, v in lv.components.items())
    assert abs(float(lv.total) - float(again)) <= 1e-9


def test_srscn_defaults():
    assert (CFG.lambda_sr, CFG.lambda_sc) == (5e-4, 1e-6)
    comps = _components(2)
    seg = 0.8 * comps["seg_dice"] + 0.2 * comps["seg_cross"]
    total = L.combined_loss("SRSCN", comps, CFG).total
    assert float(total) == pytest.approx(float(seg + 5e-4 * comps["sr"] + 1e-6 * comps["sc"]), abs=1e-12)
    assert float(total) >= float(L.combined_loss("SCN", comps, CFG).total)


def test_unknown_variant_and_missing_component():
    with pytest.raises(ConfigurationError):
        L.combined_loss("FOO", _components(), CFG)
    comps = _components()
    del comps["sr"]
    with pytest.raises(ConfigurationError):
        L.combined_loss("SRNN", comps, CFG)


# --- gradients -------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(3))
def test_seg_loss_gradient_wrt_logits(seed):
    logits, lab = random_case(seed)
    cfg = replace(CFG, class_weights=(1.0, 2.0, 0.5, 1.5))
    err = dc.grad_check(lambda z: L.seg_loss(torch.softmax(z, 1), lab, cfg).total, logits)
    assert err < 1e-4


@pytest.mark.parametrize("seed", range(3))
def test_regularizer_gradients(seed):
    g = torch.Generator().manual_seed(seed)
    a = torch.rand(2, 4, 4, 4, generator=g, dtype=torch.float64)
    b = torch.rand(2, 4, 4, 4, generator=g, dtype=torch.float64)
    assert dc.grad_check(lambda x: L.sr_loss(x, b), a) < 1e-4
    pa, pb = torch.rand(5, generator=g, dtype=torch.float64), torch.rand(5, generator=g, dtype=torch.float64)
    assert dc.grad_check(lambda x: L.sc_loss(x, pb), pa) < 1e-4
    ca, cb = torch.randn(3, 7, generator=g, dtype=torch.float64), torch.randn(3, 7, generator=g, dtype=torch.float64)
    assert dc.grad_check(lambda x: L.acnn_loss(x, cb), ca) < 1e-4
    real = 0.1 + 0.8 * torch.rand(6, generator=g, dtype=torch.float64)
    fake = 0.1 + 0.8 * torch.rand(6, generator=g, dtype=torch.float64)
    assert dc.grad_check(lambda x: L.gan_losses(real, x)[0], fake) < 1e-4
    assert dc.grad_check(lambda x: L.gan_losses(x, fake)[0], real) < 1e-4
    assert dc.grad_check(lambda x: L.gan_losses(real, x)[1], fake) < 1e-4


def test_losses_are_nonnegative():
    for seed in range(10):
        logits, lab = random_case(seed)
        lv = L.seg_loss(torch.softmax(logits, 1), lab, CFG)
        assert all(float(v) >= 0 for v in lv.components.values())


# --- log-probability path ---------------------------------------------------------


@pytest.mark.parametrize("seed", range(3))
def test_log_prob_path_matches_value(seed):
    logits, lab = random_case(seed)
    logits = 30 * logits  # some pixels beyond both clamp limits
    p = torch.softmax(logits, 1)
    plain = L.seg_loss(p, lab, CFG)
    logged = L.seg_loss(p, lab, CFG, torch.log_softmax(logits, 1))
    for k in plain.components:
        assert abs(float(plain.components[k]) - float(logged.components[k])) < 1e-9


@pytest.mark.parametrize("seed", range(3))
def test_log_prob_path_gradient_inside_clamp(seed):
    logits, lab = random_case(seed)
    cfg = replace(CFG, class_weights=(1.0, 2.0, 0.5, 1.5))
    err = dc.grad_check(
        lambda z: L.seg_loss(torch.softmax(z, 1), lab, cfg, torch.log_softmax(z, 1)).total, logits
    )
    assert err < 1e-4


def test_log_prob_path_keeps_gradient_when_saturated():
    # every pixel confidently wrong: class 0 predicted, class 1 true
    logits = torch.zeros(1, 4, 4, 4, dtype=torch.float64)
    logits[:, 0] = 200.0
    lab = torch.ones(1, 4, 4, dtype=torch.long)
    cfg = replace(CFG, lambda_dice=0.0, lambda_cross=1.0)

    z = logits.clone().requires_grad_(True)
    L.seg_loss(torch.softmax(z, 1), lab, cfg).total.backward()
    assert float(z.grad.abs().max()) == 0.0

    z = logits.clone().requires_grad_(True)
    L.seg_loss(torch.softmax(z, 1), lab, cfg, torch.log_softmax(z, 1)).total.backward()
    assert float(z.grad[:, 1].max()) < 0  # raising the true class lowers the loss
