import dataclasses
import itertools
import math

import numpy as np
import pytest
import torch

from conftest import tiny_config, tiny_model
from slotvae import scenegen
from slotvae.objective import recon_nll, total_loss
from slotvae.training import (
    BETA_DEFAULTS,
    NonFiniteLoss,
    TrainConfig,
    Trainer,
    batch_indices,
    best_permutation_bruteforce,
    lr_schedule,
    order_match_diagnostic,
    train,
)


@pytest.fixture(scope="module")
def images16():
    return np.stack([r.image for r in scenegen.generate_multisprite(0, 12, k_objects=(1, 3), size=16)])


def small_train_config(**kw):
    base = dict(batch_size=4, warmup_steps=10, total_steps=40, log_interval=10, checkpoint_interval=20, model=tiny_config())
    base.update(kw)
    return TrainConfig(**base)


# -- schedule -----------------------------------------------------------


def test_lr_schedule_examples():
    cfg = TrainConfig(learning_rate=4e-4, warmup_steps=2000, total_steps=20000)
    assert lr_schedule(0, cfg) == 0.0
    assert lr_schedule(1000, cfg) == pytest.approx(2e-4)
    assert lr_schedule(2000, cfg) == pytest.approx(4e-4)
    assert lr_schedule(10000, cfg) == pytest.approx(4e-4)


def test_lr_schedule_continuous_at_warmup_end():
    cfg = TrainConfig(learning_rate=4e-4, warmup_steps=2000, total_steps=20000)
    assert abs(lr_schedule(1999, cfg) - lr_schedule(2000, cfg)) < 4e-4 / 2000 + 1e-15
    values = [lr_schedule(s, cfg) for s in range(0, 2500)]
    assert all(b >= a for a, b in zip(values, values[1:]))


def test_lr_decay_knob():
    cfg = TrainConfig(learning_rate=1e-3, warmup_steps=10, total_steps=100, lr_decay_step=50, lr_decay_factor=0.1)
    assert lr_schedule(49, cfg) == pytest.approx(1e-3)
    assert lr_schedule(50, cfg) == pytest.approx(1e-4)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(warmup_steps=10, total_steps=5)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)


def test_beta_defaults():
    assert TrainConfig(dataset_name="ObjectsRoom").resolved_beta() == 0.01
    assert TrainConfig(dataset_name="shapestacks").resolved_beta() == 0.1
    assert TrainConfig(dataset_name="arrowroom").resolved_beta() == 0.1
    assert TrainConfig(dataset_name="arrowworld").resolved_beta() == 0.1
    assert TrainConfig(dataset_name="arrowworld", beta=0.0).resolved_beta() == 0.0
    assert set(BETA_DEFAULTS) >= {"objectsroom", "shapestacks", "arrowroom"}


def test_config_round_trip():
    cfg = small_train_config(seed=5, beta=0.2)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


# -- batching -----------------------------------------------------------


def test_batches_cover_each_epoch_and_reshuffle():
    n, bs = 10, 5
    epoch0 = np.concatenate([batch_indices(s, bs, n, 3) for s in range(2)])
    epoch1 = np.concatenate([batch_indices(s, bs, n, 3) for s in range(2, 4)])
    assert sorted(epoch0) == list(range(n)) and sorted(epoch1) == list(range(n))
    assert not np.array_equal(epoch0, epoch1)


def test_batch_straddles_epochs():
    idx = batch_indices(1, 7, 10, 0)
    assert len(idx) == 7 and all(0 <= i < 10 for i in idx)


# -- order diagnostic ---------------------------------------------------


def test_order_diagnostic_identical_and_permuted():
    a = torch.randn(2, 4, 6)
    same = order_match_diagnostic(a, a)
    assert same["ratio"] == pytest.approx(1.0) and same["mean_aligned_cosine"] == pytest.approx(1.0)
    swapped = order_match_diagnostic(a, a[:, [1, 0, 3, 2]])
    assert swapped["mean_best_permutation_cosine"] == pytest.approx(1.0)
    assert swapped["ratio"] < 1.0


@pytest.mark.parametrize("seed", range(10))
def test_order_diagnostic_matches_exhaustive_search(seed):
    r = np.random.default_rng(seed)
    a, b = r.normal(size=(2, 3, 5))
    result = order_match_diagnostic(a, b)
    an = a / np.linalg.norm(a, axis=1, keepdims=True)
    bn = b / np.linalg.norm(b, axis=1, keepdims=True)
    cos = an @ bn.T
    assert result["mean_best_permutation_cosine"] == pytest.approx(best_permutation_bruteforce(cos), abs=1e-12)
    assert result["mean_aligned_cosine"] == pytest.approx(np.trace(cos) / 3, abs=1e-12)
    # the optimal score is at least the identity score
    assert result["mean_best_permutation_cosine"] >= result["mean_aligned_cosine"] - 1e-12


def test_bruteforce_independent_check():
    cos = np.array([[0.1, 0.9, 0.0], [0.8, 0.2, 0.0], [0.0, 0.0, 1.0]])
    assert best_permutation_bruteforce(cos) == pytest.approx((0.9 + 0.8 + 1.0) / 3)
    assert len(list(itertools.permutations(range(3)))) == 6


# -- gradient flow ------------------------------------------------------


def test_every_parameter_group_gets_gradient():
    model = tiny_model(dtype=torch.float64)
    x = torch.rand(2, 3, 16, 16, dtype=torch.float64)
    out = model.forward_train(x, torch.Generator().manual_seed(0))
    total_loss(x, out).total.backward()
    groups = {}
    for name, p in model.named_parameters():
        g = name.split(".")[0]
        groups[g] = groups.get(g, 0.0) + (0.0 if p.grad is None else p.grad.abs().sum().item())
    assert groups and all(v > 0 for v in groups.values()), groups


def test_shared_slot_attention_gets_gradient_from_both_paths():
    model = tiny_model(dtype=torch.float64)
    x = torch.rand(2, 3, 16, 16, dtype=torch.float64)

    def slot_attention_grad(select):
        model.zero_grad(set_to_none=True)
        out = model.forward_train(x, torch.Generator().manual_seed(0))
        select(out).backward()
        return torch.cat([p.grad.flatten() for p in model.slot_attention.parameters()])

    def prior_only(out):
        # stop the posterior-side gradient so only the prior path contributes
        q = type(out.q_slots)(out.q_slots.mean.detach(), out.q_slots.std.detach())
        return total_loss(x, dataclasses.replace(out, q_slots=q)).kl_slots_hier

    from_posterior = slot_attention_grad(lambda out: recon_nll(x, out.scene))
    from_prior = slot_attention_grad(prior_only)
    from_both = slot_attention_grad(
        lambda out: recon_nll(x, out.scene) + prior_only(out)
    )
    assert from_posterior.abs().sum() > 0 and from_prior.abs().sum() > 0
    assert torch.allclose(from_both, from_posterior + from_prior, atol=1e-9)
    assert not torch.allclose(from_both, from_posterior)


# -- trainer ------------------------------------------------------------


def test_training_loss_decreases(images16):
    trainer = Trainer(small_train_config(total_steps=200, warmup_steps=20, learning_rate=1e-3), images16)
    totals = [trainer.train_step()[1]["total"] for _ in range(200)]
    assert np.mean(totals[-20:]) < np.mean(totals[:20])


def test_resume_is_bit_identical(images16, tmp_path):
    cfg = small_train_config(total_steps=1000, warmup_steps=100, checkpoint_interval=500, log_interval=250)
    straight = Trainer(cfg, images16)
    straight.run()

    first = Trainer(small_train_config(total_steps=1000, warmup_steps=100, checkpoint_interval=500, log_interval=250), images16)
    first.run(until=500, checkpoint_dir=tmp_path)
    resumed = Trainer.resume(tmp_path / "step-0000500.pt", images16)
    assert resumed.step == 500
    resumed.run()

    a, b = straight.model.state_dict(), resumed.model.state_dict()
    assert a.keys() == b.keys()
    for k in a:
        assert torch.equal(a[k], b[k]), k
    strip = lambda h: [{k: v for k, v in e.items() if k != "elapsed"} for e in h]
    assert strip(straight.history) == strip(resumed.history)


def test_train_writes_checkpoints_and_log(images16, tmp_path):
    result = train(small_train_config(out=str(tmp_path / "run")), images16)
    assert (tmp_path / "run" / "checkpoints" / "step-0000020.pt").exists()
    assert (tmp_path / "run" / "checkpoints" / "latest.pt").exists()
    lines = (tmp_path / "run" / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 4
    assert {"ratio", "recon_nll", "kl_global", "lr"} <= set(result["history"][-1])


def test_size_mismatch_rejected(images16):
    with pytest.raises(ValueError, match="px"):
        Trainer(small_train_config(model=tiny_config(image_size=32)), images16)


def test_non_finite_loss_aborts(images16):
    trainer = Trainer(small_train_config(), images16)
    with torch.no_grad():
        for p in trainer.model.decoder.parameters():
            p.fill_(math.nan)
    with pytest.raises(NonFiniteLoss, match="non-finite decoder output at step 0"):
        trainer.train_step()
    assert trainer.step == 0
