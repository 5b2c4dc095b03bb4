import math

import numpy as np
import pytest
import torch
from scipy import integrate, stats

from conftest import central_difference, relative_error, tiny_model
from slotvae.model import DecodedScene, DiagGaussian, ForwardOutput, SlotSet
from slotvae.objective import kl_diag_gaussians, recon_nll, total_loss


def gen(seed=0):
    return torch.Generator().manual_seed(seed)


def scene_of(composed):
    b, c, h, w = composed.shape
    return DecodedScene(composed[:, None], torch.ones(b, 1, h, w, dtype=composed.dtype), composed)


def test_recon_nll_zero_residual_closed_form():
    x = torch.rand(2, 3, 8, 8, dtype=torch.float64)
    nll = recon_nll(x, scene_of(x.clone()), sigma_x=0.1)
    expected = 3 * 8 * 8 * (0.5 * math.log(2 * math.pi) + math.log(0.1))
    assert abs(nll.item() - expected) < 1e-9


def test_recon_nll_matches_per_pixel_density():
    x = torch.rand(1, 3, 5, 5, generator=gen(), dtype=torch.float64)
    mean = torch.rand(1, 3, 5, 5, generator=gen(1), dtype=torch.float64)
    for sigma in (0.05, 0.1, 0.3):
        oracle = -sum(
            stats.norm.logpdf(xv, loc=mv, scale=sigma)
            for xv, mv in zip(x.flatten().tolist(), mean.flatten().tolist())
        )
        assert abs(recon_nll(x, scene_of(mean), sigma).item() - oracle) < 1e-8


def test_recon_nll_doubling_residual():
    x = torch.zeros(1, 3, 4, 4, dtype=torch.float64)
    r = 0.02
    sigma = 0.1
    one = recon_nll(x, scene_of(x + r), sigma).item()
    two = recon_nll(x, scene_of(x + 2 * r), sigma).item()
    n = 3 * 4 * 4
    # quadratic term grows from r^2/2 to 4 r^2/2 per value
    assert abs((two - one) - n * 1.5 * (r / sigma) ** 2) < 1e-9


def test_recon_nll_gradient_finite_differences():
    x = torch.rand(1, 3, 4, 4, generator=gen(), dtype=torch.float64)
    composed = torch.rand(1, 3, 4, 4, generator=gen(1), dtype=torch.float64, requires_grad=True)
    recon_nll(x, scene_of(composed)).backward()
    for idx in [(0, 0, 0, 0), (0, 1, 2, 3), (0, 2, 3, 1)]:
        fd = central_difference(lambda: recon_nll(x, scene_of(composed)), composed.data, idx)
        assert relative_error(composed.grad[idx].item(), fd) < 1e-3


def test_recon_nll_shape_and_sigma_checked():
    x = torch.rand(1, 3, 4, 4)
    with pytest.raises(ValueError):
        recon_nll(x, scene_of(torch.rand(1, 3, 4, 5)))
    with pytest.raises(ValueError):
        recon_nll(x, scene_of(x), sigma_x=0.0)


# -- KL -----------------------------------------------------------------


def test_kl_identical_is_zero():
    q = DiagGaussian(torch.randn(2, 3, 4), torch.rand(2, 3, 4) + 0.1)
    assert kl_diag_gaussians(q, q).item() == 0.0


def _kl_by_quadrature(mq, sq, mp, sp):
    def integrand(z):
        lq = stats.norm.logpdf(z, mq, sq)
        return math.exp(lq) * (lq - stats.norm.logpdf(z, mp, sp))

    lo, hi = mq - 12 * sq, mq + 12 * sq
    value, _ = integrate.quad(integrand, lo, hi, epsabs=1e-13, epsrel=1e-12, limit=200)
    return value


def test_kl_unit_shift_is_half():
    q = DiagGaussian(torch.tensor([1.0], dtype=torch.float64), torch.tensor([1.0], dtype=torch.float64))
    p = DiagGaussian(torch.tensor([0.0], dtype=torch.float64), torch.tensor([1.0], dtype=torch.float64))
    closed = kl_diag_gaussians(q, p, batched=False).item()
    assert abs(_kl_by_quadrature(1.0, 1.0, 0.0, 1.0) - 0.5) < 1e-9
    assert abs(closed - 0.5) < 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_kl_matches_quadrature_per_dimension(seed):
    r = np.random.default_rng(seed)
    mq, mp = r.normal(size=2)
    sq, sp = r.uniform(0.3, 2.0, size=2)
    q = DiagGaussian(torch.tensor([mq]), torch.tensor([sq]))
    p = DiagGaussian(torch.tensor([mp]), torch.tensor([sp]))
    assert abs(kl_diag_gaussians(q, p, batched=False).item() - _kl_by_quadrature(mq, sq, mp, sp)) < 1e-9


def test_kl_monte_carlo_three_dims():
    r = np.random.default_rng(1)
    mq, mp = r.normal(size=(2, 3))
    sq, sp = r.uniform(0.5, 1.5, size=(2, 3))
    q = DiagGaussian(torch.tensor(mq), torch.tensor(sq))
    p = DiagGaussian(torch.tensor(mp), torch.tensor(sp))
    z = r.normal(mq, sq, size=(100_000, 3))
    mc = (stats.norm.logpdf(z, mq, sq) - stats.norm.logpdf(z, mp, sp)).sum(1).mean()
    closed = kl_diag_gaussians(q, p, batched=False).item()
    assert abs(mc - closed) / closed < 0.01


def test_kl_global_prior_values():
    mean = torch.zeros(1, 32, dtype=torch.float64)
    std = torch.ones(1, 32, dtype=torch.float64)
    prior = DiagGaussian.standard((1, 32), mean)
    assert kl_diag_gaussians(DiagGaussian(mean, std), prior).item() == 0.0
    assert abs(kl_diag_gaussians(DiagGaussian(mean + 1, std), prior).item() - 0.5 * 32) < 1e-12


def test_kl_batch_reduction_is_mean_over_batch():
    q = DiagGaussian(torch.randn(4, 3, 2, dtype=torch.float64), torch.rand(4, 3, 2, dtype=torch.float64) + 0.2)
    p = DiagGaussian.standard(q.mean.shape, q.mean)
    per_item = [kl_diag_gaussians(DiagGaussian(q.mean[i], q.std[i]), DiagGaussian(p.mean[i], p.std[i]), batched=False) for i in range(4)]
    assert abs(kl_diag_gaussians(q, p).item() - sum(per_item).item() / 4) < 1e-12


def test_kl_slot_alignment_is_by_index():
    m = torch.tensor([[[0.0], [3.0]]])
    s = torch.ones(1, 2, 1)
    q = DiagGaussian(m, s)
    p_aligned = DiagGaussian(m.clone(), s)
    p_swapped = DiagGaussian(m[:, [1, 0]], s)
    assert kl_diag_gaussians(q, p_aligned).item() == 0.0
    assert kl_diag_gaussians(q, p_swapped).item() == pytest.approx(9.0)


def test_kl_shape_mismatch():
    with pytest.raises(ValueError):
        kl_diag_gaussians(DiagGaussian(torch.zeros(2), torch.ones(2)), DiagGaussian(torch.zeros(3), torch.ones(3)))


def test_kl_nonnegative_random(rng):
    for _ in range(50):
        shape = (2, 3, 4)
        q = DiagGaussian(torch.tensor(rng.normal(size=shape)), torch.tensor(rng.uniform(0.05, 3, size=shape)))
        p = DiagGaussian(torch.tensor(rng.normal(size=shape)), torch.tensor(rng.uniform(0.05, 3, size=shape)))
        assert kl_diag_gaussians(q, p).item() >= 0


# -- total loss -----------------------------------------------------------


def _pinned_output(x):
    b = x.shape[0]
    std_g = DiagGaussian.standard((b, 4), x)
    std_s = DiagGaussian.standard((b, 2, 3), x)
    slots = SlotSet(torch.zeros(b, 2, 3), torch.zeros(b, 2, 3), 3)
    return ForwardOutput(std_g, std_g.mean, std_s, DiagGaussian.standard((b, 2, 3), x), std_s.mean, scene_of(x.clone()), slots, slots)


def test_total_loss_pinned_is_reconstruction_constant():
    x = torch.rand(2, 3, 4, 4, dtype=torch.float64)
    loss = total_loss(x, _pinned_output(x), beta=0.5, sigma_x=0.1)
    const = 3 * 4 * 4 * (0.5 * math.log(2 * math.pi) + math.log(0.1))
    assert loss.kl_slots_hier.item() == 0 and loss.kl_global.item() == 0 and loss.kl_slots_aux.item() == 0
    assert abs(loss.total.item() - const) < 1e-9


def test_total_loss_composition(model64):
    x = torch.rand(2, 3, 16, 16, generator=gen(), dtype=torch.float64)
    out = model64.forward_train(x, gen(1))
    loss = total_loss(x, out, beta=0.3)
    expected = loss.recon_nll + loss.kl_slots_hier + 0.3 * loss.kl_global + loss.kl_slots_aux
    assert torch.equal(loss.total, expected)
    for term in (loss.kl_slots_hier, loss.kl_global, loss.kl_slots_aux):
        assert term.item() >= 0


def test_beta_zero_drops_global_kl(model64):
    x = torch.rand(2, 3, 16, 16, generator=gen(), dtype=torch.float64)
    out = model64.forward_train(x, gen(1))
    loss = total_loss(x, out, beta=0.0)
    assert loss.kl_global.item() > 0
    assert torch.equal(loss.total, loss.recon_nll + loss.kl_slots_hier + loss.kl_slots_aux)


def test_hierarchical_kl_reaches_prior_path(model64):
    x = torch.rand(2, 3, 16, 16, generator=gen(), dtype=torch.float64)
    out = model64.forward_train(x, gen(1))
    total_loss(x, out).kl_slots_hier.backward()
    for group in ("feature_decoder", "global_encoder", "prior_head", "posterior_head", "slot_attention", "backbone"):
        grads = [p.grad for n, p in model64.named_parameters() if n.startswith(group + ".")]
        assert any(g is not None and g.abs().sum() > 0 for g in grads), group
    # the decoder does not take part in the KL term
    assert all(p.grad is None for p in model64.decoder.parameters())


def test_two_hundred_steps_decrease_moving_average():
    torch.manual_seed(0)
    model = tiny_model()
    x = torch.rand(4, 3, 16, 16, generator=gen())
    opt = torch.optim.Adam(model.parameters(), lr=1e-3)
    totals = []
    for step in range(200):
        out = model.forward_train(x, gen(step))
        loss = total_loss(x, out, beta=0.1)
        opt.zero_grad()
        loss.total.backward()
        opt.step()
        totals.append(loss.total.item())
    avg = np.convolve(totals, np.ones(20) / 20, mode="valid")
    assert avg[-1] < avg[0]
    # coarse monotonicity: every later 20-step window beats the first one
    assert np.all(avg[20::20] < avg[0])
