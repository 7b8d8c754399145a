import copy
import math

import numpy as np
import pytest
import torch
from torch import nn

from ihvs import checkpoint
from ihvs.dataset import collect_dataset
from ihvs.distributions import DiagonalGaussian, kl_diag_gaussian
from ihvs.model import ModelConfig, build_model
from ihvs.sim import SimConfig
from ihvs.train import (DatasetTensors, TrainConfig, TrainingDivergedError, grad_check, loss_reg,
                        loss_elements, loss_x, loss_x_terms, loss_z, loss_z_terms, lr_scale, reg_terms, total_loss,
                        train)

P = 3 * 64 * 64
LOG2PI = math.log(2 * math.pi)


@pytest.fixture(scope="module")
def tiny():
    return collect_dataset(SimConfig(), 2, seed=4, T=6)


@pytest.fixture(scope="module")
def batch64(tiny):
    return DatasetTensors(tiny).batch([0, 2, 5, 7]).to(torch.float64)


@pytest.fixture(scope="module")
def model64():
    return build_model(ModelConfig(), seed=2, dtype=torch.float64)


def _gauss_nll_loop(img, mean, std):
    total = 0.0
    for v, m in zip(img.ravel().tolist(), mean.ravel().tolist()):
        total += 0.5 * ((v - m) / std) ** 2 + math.log(std) + 0.5 * LOG2PI
    return total


def _kl_loop(mq, sq, mp, sp):
    total = 0.0
    for a, b, c, d in zip(mq, sq, mp, sp):
        total += math.log(d / b) + (b * b + (a - c) ** 2) / (2 * d * d) - 0.5
    return total


def _one(net, img):
    with torch.no_grad():
        return net(img[None])


def oracle_loss_x(model, batch, seed):
    """Per-sample loop: encode, sample, predict, decode, then sum in Python floats."""
    cfg = model.cfg
    g = torch.Generator().manual_seed(seed)
    e_t = torch.randn((len(batch), 2), generator=g, dtype=torch.float64)
    e_n = torch.randn((len(batch), 2), generator=g, dtype=torch.float64)
    vals = []
    for i in range(len(batch)):
        q = _one(model.hand_encoder, batch.img_t[i])
        x = q.mean[0] + q.log_std[0].exp() * e_t[i]
        mu_p = x + cfg.dt * batch.u_t[i]
        x_n = mu_p + cfg.sigma_x * e_n[i]
        dec = _one(model.hand_decoder, x_n)[0].numpy()
        nll = _gauss_nll_loop(batch.img_next[i].numpy(), dec, cfg.decoder_std)
        qn = _one(model.hand_encoder, batch.img_next[i])
        kl = _kl_loop(qn.mean[0].tolist(), qn.log_std[0].exp().tolist(), mu_p.tolist(), [cfg.sigma_x] * 2)
        vals.append(nll + kl)
    return sum(vals) / len(vals)


def oracle_loss_z(model, batch, seed):
    cfg = model.cfg
    g = torch.Generator().manual_seed(seed)
    e_z = torch.randn((len(batch), 2), generator=g, dtype=torch.float64)
    e_g = torch.randn((len(batch), 2), generator=g, dtype=torch.float64)
    vals = []
    for i in range(len(batch)):
        qz = _one(model.inhand_encoder, batch.img_z[i])
        z = qz.mean[0] + qz.log_std[0].exp() * e_z[i]
        pg = _one(model.goal_head, z)
        x_g = pg.mean[0] + pg.log_std[0].exp() * e_g[i]
        nz = _gauss_nll_loop(batch.img_z[i].numpy(), _one(model.inhand_decoder, z)[0].numpy(), cfg.decoder_std)
        ng = _gauss_nll_loop(batch.img_g[i].numpy(), _one(model.decoder("goal"), x_g)[0].numpy(), cfg.decoder_std)
        qg = _one(model.hand_encoder, batch.img_g[i])
        kl = _kl_loop(qg.mean[0].tolist(), qg.log_std[0].exp().tolist(),
                      pg.mean[0].tolist(), pg.log_std[0].exp().tolist())
        vals.append(nz + ng + kl)
    return sum(vals) / len(vals)


def test_loss_x_matches_loop_oracle(model64, batch64):
    got = float(loss_x(model64, batch64, torch.Generator().manual_seed(7)).detach())
    assert got == pytest.approx(oracle_loss_x(model64, batch64, 7), rel=1e-6)


def test_loss_z_matches_loop_oracle(model64, batch64):
    got = float(loss_z(model64, batch64, torch.Generator().manual_seed(8)).detach())
    assert got == pytest.approx(oracle_loss_z(model64, batch64, 8), rel=1e-6)


def test_loss_x_hooks(model64, batch64):
    _, kl = loss_x_terms(model64, batch64, torch.Generator().manual_seed(0), posterior_equals_prior=True)
    assert torch.all(kl.abs() < 1e-12)
    m = build_model(ModelConfig(decoder_std=1.0), seed=0, dtype=torch.float64)
    recon, _ = loss_x_terms(m, batch64, torch.Generator().manual_seed(0), perfect_recon=True)
    np.testing.assert_allclose(recon.numpy(), P / 2 * LOG2PI, rtol=1e-12)


def test_loss_z_hooks(model64, batch64):
    (_, _, kl), _ = loss_z_terms(model64, batch64, torch.Generator().manual_seed(0),
                                 goal_posterior_equals_prior=True)
    assert torch.all(kl.abs() < 1e-12)
    std = model64.cfg.decoder_std
    (nz, ng, _), _ = loss_z_terms(model64, batch64, torch.Generator().manual_seed(0), perfect_recon=True)
    const = P * (math.log(std) + 0.5 * LOG2PI)
    np.testing.assert_allclose((nz + ng).numpy(), 2 * const, rtol=1e-12)


def test_reg_examples():
    sg = 0.05
    ref = DiagonalGaussian.isotropic(torch.zeros(1, 2, dtype=torch.float64), sg)
    a, b = reg_terms(ref, ref, sg)
    assert float(a) == 0.0 and float(b) == 0.0
    q = DiagonalGaussian.isotropic(torch.tensor([[sg, 0.0]], dtype=torch.float64), sg)
    a, _ = reg_terms(q, ref, sg)
    assert float(a) == pytest.approx(0.5, abs=1e-12)


def test_reg_monte_carlo():
    sg = 0.05
    q = DiagonalGaussian(torch.tensor([0.02, -0.04], dtype=torch.float64),
                         torch.log(torch.tensor([0.03, 0.08], dtype=torch.float64)))
    closed = float(reg_terms(q, q, sg)[0])
    g = torch.Generator().manual_seed(0)
    x = q.mean + q.std * torch.randn((10 ** 6, 2), generator=g, dtype=torch.float64)
    lq = torch.distributions.Normal(q.mean, q.std).log_prob(x).sum(-1)
    lp = torch.distributions.Normal(0.0, sg).log_prob(x).sum(-1)
    assert float((lq - lp).mean()) == pytest.approx(closed, rel=1e-2)


def test_loss_reg_standalone(model64, batch64):
    assert float(loss_reg(model64, batch64, torch.Generator().manual_seed(0)).detach()) >= 0


def test_kl_quadratic_component_shrinks_with_sigma_x():
    q = DiagonalGaussian(torch.tensor([0.3, -0.1], dtype=torch.float64),
                         torch.log(torch.tensor([0.01, 0.02], dtype=torch.float64)))
    mu_p = torch.tensor([0.1, 0.1], dtype=torch.float64)
    quad = []
    for sx in np.geomspace(1e-3, 1e3, 25):
        p = DiagonalGaussian.isotropic(mu_p, float(sx))
        kl = float(kl_diag_gaussian(q, p))
        # closed form minus the log-ratio and variance-ratio parts
        rest = float((math.log(sx) - q.log_std + q.std ** 2 / (2 * sx ** 2) - 0.5).sum())
        quad.append(kl - rest)
    assert all(b < a for a, b in zip(quad, quad[1:]))
    assert quad[-1] < 1e-6


def test_terms_bounded_below(model64, batch64):
    rng = torch.Generator().manual_seed(3)
    recon, kl = loss_x_terms(model64, batch64, rng)
    (nz, ng, klg), (q_g, p_g) = loss_z_terms(model64, batch64, rng)
    ra, rb = reg_terms(q_g, p_g, model64.cfg.sigma_g)
    const = P * (math.log(model64.cfg.decoder_std) + 0.5 * LOG2PI)
    for t in (recon, nz, ng):
        assert torch.all(t >= const)
    for t in (kl, klg, ra, rb):
        assert torch.all(t >= 0)


def test_total_loss_weights(model64, batch64):
    cfg = TrainConfig(lambda_x=2.0, lambda_z=0.5, lambda_reg=3.0)
    total, parts = total_loss(model64, batch64, torch.Generator().manual_seed(1), cfg)
    expect = 2.0 * parts["loss_x"] + 0.5 * parts["loss_z"] + 3.0 * parts["loss_reg"]
    assert float(total.detach()) == pytest.approx(float(expect.detach()), rel=1e-12)


def test_loss_elements_sum_to_total(model64, batch64):
    cfg = TrainConfig(lambda_x=2.0, lambda_reg=0.5)
    total, _ = total_loss(model64, batch64, torch.Generator().manual_seed(4), cfg)
    elems = loss_elements(model64, batch64, torch.Generator().manual_seed(4), cfg)
    assert elems.ndim == 1
    assert float(elems.sum().detach()) == pytest.approx(float(total.detach()), rel=1e-12)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(lr_final_scale=0.0)
    with pytest.raises(ValueError):
        TrainConfig(lr_decay_epochs=-1)
    with pytest.raises(ValueError, match="lr"):
        TrainConfig.from_dict({"lr": 1.0})
    cfg = TrainConfig.from_dict({"epochs": 3, "model": {"transition": "newtonian"}})
    assert cfg.epochs == 3 and cfg.model.transition == "newtonian" and cfg.model.sigma_x == 0.001
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_lr_schedule():
    flat = TrainConfig(epochs=5, lr_decay_epochs=0)
    assert [lr_scale(flat, e) for e in range(5)] == [1.0] * 5
    short = TrainConfig(epochs=2, lr_decay_epochs=40, lr_final_scale=0.1)
    assert [lr_scale(short, e) for e in range(2)] == pytest.approx([0.55, 0.1])
    cfg = TrainConfig(epochs=10, lr_decay_epochs=4, lr_final_scale=0.2)
    scales = [lr_scale(cfg, e) for e in range(10)]
    assert scales[:6] == [1.0] * 6
    assert scales[-1] == pytest.approx(0.2)
    assert all(a > b for a, b in zip(scales[5:], scales[6:]))


def test_smoke_and_determinism(tiny):
    cfg = TrainConfig(epochs=2, batch_size=4, seed=5)
    m1, r1 = train(tiny, cfg)
    m2, r2 = train(tiny, cfg)
    assert all(math.isfinite(r.total) for r in r1.records)
    assert [r.epoch for r in r1.records] == [0, 1]
    assert r1.steps == 2 * (2 * 4 // 4)
    assert checkpoint.dumps(m1) == checkpoint.dumps(m2)
    assert r1.to_csv() == r2.to_csv()
    assert r1.to_csv().splitlines()[0] == "epoch,loss_x,loss_z,loss_reg,total"
    for line in r1.to_csv().splitlines()[1:]:
        assert all(math.isfinite(float(v)) for v in line.split(","))
    m3, _ = train(tiny, TrainConfig(epochs=2, batch_size=4, seed=5, shuffle_seed=99))
    assert checkpoint.dumps(m3) != checkpoint.dumps(m1)


def test_newtonian_variant_trains(tiny):
    cfg = TrainConfig(epochs=1, batch_size=4, model=ModelConfig(transition="newtonian"))
    _, rep = train(tiny, cfg)
    assert math.isfinite(rep.records[-1].total)


def test_divergence_reported(tiny):
    m = build_model(ModelConfig(), seed=0)
    with torch.no_grad():
        m.hand_encoder.head.net[0].weight.fill_(float("nan"))
    with pytest.raises(TrainingDivergedError, match="batch 0"):
        train(tiny, TrainConfig(epochs=1, batch_size=4), model=m)


def test_empty_dataset_rejected(tiny):
    import dataclasses
    with pytest.raises(ValueError):
        train(dataclasses.replace(tiny, episodes=[]), TrainConfig(epochs=1))


class _Linear(nn.Module):
    def __init__(self):
        super().__init__()
        torch.manual_seed(0)
        self.lin = nn.Linear(30, 20)


def _quadratic(m, b, rng):
    x = torch.linspace(-1, 1, 30, dtype=torch.float64)
    return (m.lin(x) ** 2).sum()


def test_grad_check_exact_on_quadratic_model():
    res = grad_check(_Linear(), None_batch(), epsilon=1e-3, loss_fn=_quadratic)
    assert res.max_rel_error < 1e-10
    assert res.n_checked["lin"] == 200


def None_batch():
    class _B:
        def to(self, dtype):
            return self
    return _B()


def test_grad_check_full_model_and_live(model64, batch64):
    small = dict(n_per_group=20)
    fine = grad_check(copy.deepcopy(model64), batch64, 1e-5, **small)
    coarse = grad_check(copy.deepcopy(model64), batch64, 1e-1, **small)
    assert fine.max_rel_error < 1e-4
    assert coarse.max_rel_error > 10 * fine.max_rel_error
    assert set(fine.per_group) == set(model64.groups)
