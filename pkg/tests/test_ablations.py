import numpy as np
import pytest
import torch

from conftest import tiny_config
from slotvae.ablations import DISPLAY_NAMES, VariantSpec, build_variant, parameter_count, variant_config
from slotvae.model import VARIANTS, load_checkpoint, save_checkpoint
from slotvae.objective import total_loss


def build(name, **kw):
    return build_variant(name, tiny_config(**kw), seed=0)


def test_every_variant_has_a_display_name():
    assert set(DISPLAY_NAMES) == set(VARIANTS)


def test_unknown_variant_rejected():
    with pytest.raises(ValueError, match="unknown variant"):
        VariantSpec("no_such_thing")
    with pytest.raises(ValueError):
        build_variant("bogus")


def test_overrides_applied():
    cfg = variant_config(VariantSpec("mlp_prior", {"num_slots": 4}), tiny_config())
    assert cfg.variant == "mlp_prior" and cfg.num_slots == 4


def test_no_weight_share_has_two_slot_groups():
    assert build("no_weight_share").slot_attention_groups() == ["prior_slot_attention", "slot_attention"]
    for name in ("full", "no_init_share", "mlp_prior", "transformer_prior"):
        assert build(name).slot_attention_groups() == ["slot_attention"]


def test_no_weight_share_is_larger():
    full, separate = build("full"), build("no_weight_share")
    extra = parameter_count(separate.prior_slot_attention)
    assert parameter_count(separate) == parameter_count(full) + extra
    assert extra > 0


def _prior_slots(model, noise, z_g):
    with torch.no_grad():
        return model.prior_slots(z_g, noise).slots


def test_mlp_prior_order_is_fixed():
    model = build("mlp_prior")
    z_g = torch.randn(2, 8)
    noise = model.sample_slot_init(2)
    perm = torch.tensor([2, 0, 1])
    a = _prior_slots(model, noise, z_g)
    b = _prior_slots(model, noise[:, perm], z_g)
    assert torch.equal(a, b)


def test_full_prior_order_follows_init():
    model = build("full")
    z_g = torch.randn(2, 8)
    noise = model.sample_slot_init(2)
    perm = torch.tensor([2, 0, 1])
    a = _prior_slots(model, noise, z_g)
    b = _prior_slots(model, noise[:, perm], z_g)
    assert torch.allclose(a[:, perm], b, atol=1e-5)
    assert not torch.allclose(a, b, atol=1e-3)


def test_transformer_prior_is_equivariant():
    model = build("transformer_prior")
    model.eval()
    z_g = torch.randn(2, 8)
    noise = model.sample_slot_init(2)
    perm = torch.tensor([1, 2, 0])
    a = _prior_slots(model, noise, z_g)
    b = _prior_slots(model, noise[:, perm], z_g)
    assert torch.allclose(a[:, perm], b, atol=1e-5)


def test_init_sharing_by_variant():
    x = torch.rand(2, 3, 16, 16)
    for name, shared in (("full", True), ("no_init_share", False), ("no_weight_share", False)):
        out = build(name).forward_train(x, torch.Generator().manual_seed(0))
        same = torch.equal(out.posterior_slots.init_noise, out.prior_slots.init_noise)
        assert same == shared, name


@pytest.mark.parametrize("name", VARIANTS)
def test_variant_trains_one_step(name):
    model = build(name)
    x = torch.rand(2, 3, 16, 16)
    opt = torch.optim.Adam(model.parameters(), lr=1e-3)
    loss = total_loss(x, model.forward_train(x, torch.Generator().manual_seed(0)))
    opt.zero_grad()
    loss.total.backward()
    before = [p.detach().clone() for p in model.parameters()]
    opt.step()
    assert np.isfinite(loss.total.item())
    changed = sum(not torch.equal(a, p) for a, p in zip(before, model.parameters()))
    assert changed > 0
    sample = model.generate_scene(2, torch.Generator().manual_seed(1))
    assert sample.composed.shape == (2, 3, 16, 16)


@pytest.mark.parametrize("name", VARIANTS)
def test_variant_checkpoint_round_trip(name, tmp_path):
    model = build(name)
    save_checkpoint(tmp_path / "m.pt", model)
    loaded, _ = load_checkpoint(tmp_path / "m.pt")
    assert loaded.cfg.variant == name
    for (ka, a), (kb, b) in zip(model.state_dict().items(), loaded.state_dict().items()):
        assert ka == kb and torch.equal(a, b)
