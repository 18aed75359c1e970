import math

import pytest
import torch

from mvp_integrator.encoders import SyntheticBackbone
from mvp_integrator.integrator import IntegratorConfig, NumericFailure
from mvp_integrator.model import CompositionBaseline, ModelConfig, MVPIntegrator
from mvp_integrator.training import (
    TrainConfig,
    Trainer,
    attr_bce_loss,
    branch_losses,
    grad_check,
    obj_ce_loss,
    pair_bce_loss,
    total_loss,
    train_epoch,
    training_batch,
)

D = torch.float64


def test_bce_anchors():
    assert attr_bce_loss(torch.zeros(1, 1, dtype=D), torch.ones(1, 1)).item() == pytest.approx(math.log(2), abs=1e-12)
    assert attr_bce_loss(torch.full((1, 1), 60.0, dtype=D), torch.ones(1, 1)).item() < 1e-20
    x = torch.tensor([[0.3, -1.2, 2.0]], dtype=D)
    y = torch.tensor([[1.0, 0.0, 1.0]])
    single = attr_bce_loss(x, y)
    assert attr_bce_loss(x.repeat(2, 1), y.repeat(2, 1)).item() == pytest.approx(single.item(), abs=1e-15)
    # sum over attributes of the per-entry BCE
    manual = -sum(
        yi * math.log(1 / (1 + math.exp(-xi))) + (1 - yi) * math.log(1 - 1 / (1 + math.exp(-xi)))
        for xi, yi in zip(x[0].tolist(), y[0].tolist())
    )
    assert single.item() == pytest.approx(manual, abs=1e-12)


def test_bce_errors():
    with pytest.raises(ValueError):
        attr_bce_loss(torch.zeros(2, 3), torch.ones(2, 2))
    with pytest.raises(ValueError):
        attr_bce_loss(torch.zeros(1, 3), torch.zeros(1, 3))


def test_ce_anchors():
    assert obj_ce_loss(torch.zeros(1, 4, dtype=D), torch.tensor([2])).item() == pytest.approx(math.log(4), abs=1e-12)
    margin = torch.tensor([[3.0, 0.0, 0.0, 0.0]], dtype=D)
    assert obj_ce_loss(margin, torch.tensor([0])).item() < math.log(4)
    x = torch.randn(3, 4, dtype=D)
    t = torch.tensor([0, 3, 1])
    assert obj_ce_loss(x + 7.5, t).item() == pytest.approx(obj_ce_loss(x, t).item(), abs=1e-12)
    with pytest.raises(ValueError):
        obj_ce_loss(x, torch.tensor([0, 4, 1]))


def test_pair_bce():
    y = torch.tensor([[1.0, 1.0, 0.0, 0.0], [0.0, 1.0, 0.0, 1.0]])
    # each entry contributes ln 2 at logit 0: 4 ln 2 per sample, averaged over samples
    assert pair_bce_loss(torch.zeros(2, 4, dtype=D), y).item() == pytest.approx(4 * math.log(2), abs=1e-12)
    with pytest.raises(ValueError):
        pair_bce_loss(torch.zeros(1, 4), torch.zeros(1, 4))
    perfect = torch.where(y > 0, 60.0, -60.0).to(D)
    assert pair_bce_loss(perfect, y).item() < 1e-20


def test_total_loss():
    assert total_loss(torch.tensor(0.5), torch.tensor(1.0)).item() == 1.5
    assert total_loss(torch.tensor(0.0), torch.tensor(0.0)).item() == 0.0
    with pytest.raises(NumericFailure):
        total_loss(torch.tensor(float("inf")), torch.tensor(1.0))


def _model(manifest, dim, seed=0, **icfg):
    cfg = ModelConfig(integrator=IntegratorConfig(dim=dim, heads=2, **icfg))
    return MVPIntegrator(manifest.vocab, SyntheticBackbone(dim), cfg, seed=seed)


def test_gradient_linearity(tiny_synth):
    m, _ = tiny_synth
    model = _model(m, 16).double()
    batch = training_batch(model, m).subset(torch.arange(8))
    params = model.trainable_parameters()

    def grads(key):
        model.zero_grad()
        losses = branch_losses(model, batch)
        (losses["loss_a"] + losses["loss_o"] if key == "total" else losses[key]).backward()
        return [p.grad.clone() for p in params]

    ga, go, gt = grads("loss_a"), grads("loss_o"), grads("total")
    for a, o, t in zip(ga, go, gt):
        torch.testing.assert_close(a + o, t, rtol=1e-12, atol=1e-14)


def test_training_deterministic_and_frozen(tiny_synth):
    m, _ = tiny_synth
    cfg = TrainConfig(epochs=2, batch_size=16, seed=5)
    finals = []
    for _ in range(2):
        model = _model(m, 16, seed=1)
        frozen = model.frozen_state()
        trainer = Trainer(model, cfg)
        for _ in range(cfg.epochs):
            train_epoch(model, m, cfg, trainer)
        finals.append([p.detach().clone() for p in model.parameters()])
        for k, v in model.frozen_state().items():
            assert torch.equal(v, frozen[k]), k
    for a, b in zip(*finals):
        assert torch.equal(a, b)


def test_only_trainable_parameters_change(tiny_synth):
    m, _ = tiny_synth
    model = _model(m, 16)
    before = {n: p.detach().clone() for n, p in model.named_parameters()}
    train_epoch(model, m, TrainConfig(epochs=1, batch_size=30))
    changed = {n for n, p in model.named_parameters() if not torch.equal(p, before[n])}
    assert "attr_ctx.ctx" in changed and "obj_ctx.ctx" in changed
    assert any(n.startswith("integrator.") for n in changed)
    assert set(changed) <= {n for n, p in model.named_parameters() if p.requires_grad}


def test_loss_decreases_on_fixed_batch(tiny_synth):
    m, _ = tiny_synth
    model = _model(m, 16, seed=2)
    batch = training_batch(model, m).subset(torch.arange(16))
    trainer = Trainer(model, TrainConfig(lr=1e-3))
    first = trainer.train_step(batch)["loss_total"]
    with torch.no_grad():
        losses = branch_losses(model, batch)
    assert (losses["loss_a"] + losses["loss_o"]).item() < first


def test_trainer_resume_matches_uninterrupted(tiny_synth):
    m, _ = tiny_synth
    cfg = TrainConfig(epochs=2, batch_size=20, seed=3)
    data = None
    straight = _model(m, 16, seed=1)
    t1 = Trainer(straight, cfg)
    data = training_batch(straight, m)
    t1.train_epoch(data), t1.train_epoch(data)

    resumed = _model(m, 16, seed=1)
    t2 = Trainer(resumed, cfg)
    t2.train_epoch(data)
    state, weights = t2.state_dict(), resumed.state_dict()
    again = _model(m, 16, seed=9)
    again.load_state_dict(weights)
    t3 = Trainer(again, cfg)
    t3.load_state_dict(state)
    t3.train_epoch(data)
    assert t3.step == t1.step and t3.epoch == 2
    for a, b in zip(straight.parameters(), again.parameters()):
        torch.testing.assert_close(a, b, rtol=0, atol=0)


def test_grad_check_healthy_and_corrupted(tiny_synth):
    m, _ = tiny_synth
    model = _model(m, 16, seed=1).double()
    batch = training_batch(model, m).subset(torch.arange(6))
    healthy = grad_check(model, batch, epsilon=1e-5, n_params=60)
    assert healthy.n_checked == 60
    assert healthy.max_rel_error < 1e-4

    handle = model.attr_ctx.ctx.register_hook(lambda g: 1.5 * g)
    corrupted = grad_check(model, batch, epsilon=1e-5, n_params=None)
    handle.remove()
    assert corrupted.max_rel_error > 1e-2
    assert corrupted.worst.startswith("attr_ctx")


def test_saturated_losses_are_stationary():
    y = torch.tensor([[1.0, 0.0, 1.0]])
    x = torch.tensor([[40.0, -40.0, 40.0]], dtype=D, requires_grad=True)
    attr_bce_loss(x, y).backward()
    assert x.grad.abs().max() < 1e-15
    eps = 1e-5
    for j in range(3):
        up, down = x.detach().clone(), x.detach().clone()
        up[0, j] += eps
        down[0, j] -= eps
        fd = (attr_bce_loss(up, y) - attr_bce_loss(down, y)).item() / (2 * eps)
        assert abs(fd) < 1e-10


def test_empty_training_set(tiny_synth):
    m, _ = tiny_synth
    model = _model(m, 16)
    with pytest.raises(ValueError):
        training_batch(model, m, split="val")


def test_composition_baseline_trains(tiny_synth):
    m, _ = tiny_synth
    model = CompositionBaseline(m.vocab, SyntheticBackbone(16), seed=0)
    batch = training_batch(model, m)
    assert batch.pair_targets.shape == (60, 20)
    trainer = Trainer(model, TrainConfig(batch_size=30))
    log = trainer.train_epoch(batch)
    assert set(log[0]) == {"epoch", "step", "loss_p", "loss_total"}
    assert model.pair_ctx.ctx.grad is not None
