"""Joint optimisation of the transition, goal-prediction and regularisation losses."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .distributions import (DiagonalGaussian, gaussian_image_loglik, gaussian_image_nll_per_pixel,
                            kl_diag_gaussian, kl_diag_gaussian_per_dim, sample)
from .model import IHVSModel, ModelConfig, build_model, velocity_from_positions

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 160
    seed: int = 0
    shuffle_seed: Optional[int] = None  # minibatch order; falls back to ``seed``
    lambda_x: float = 1.0
    lambda_z: float = 1.0
    lambda_reg: float = 1.0
    # first epochs train with lambda_z = 0, so x is organised before the goal branch fits to it
    goal_warmup_epochs: int = 0
    # linear decay of the learning rate to lr_final_scale * lr over the last lr_decay_epochs
    lr_decay_epochs: int = 40
    lr_final_scale: float = 0.1
    model: ModelConfig = ModelConfig()

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or min(self.epochs, self.goal_warmup_epochs, self.lr_decay_epochs) < 0:
            raise ValueError("batch_size must be >= 1; epoch counts must be >= 0")
        if not 0 < self.lr_final_scale <= 1:
            raise ValueError("lr_final_scale must lie in (0, 1]")

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    @classmethod
    def from_dict(cls, d: dict, base: "TrainConfig | None" = None) -> "TrainConfig":
        base = base or cls()
        names = {f.name for f in dataclasses.fields(cls)}
        kwargs = {}
        for k, v in d.items():
            if k not in names:
                raise ValueError(f"unknown train config key: {k!r}")
            if k == "model":
                merged = base.model.to_dict()
                merged.update(v)
                v = ModelConfig.from_dict(merged)
            kwargs[k] = v
        return dataclasses.replace(base, **kwargs)


@dataclass
class Batch:
    """Minibatch of transition triples plus each triple's (I_z, I_g) pair. NCHW tensors."""

    img_prev: torch.Tensor
    img_t: torch.Tensor
    img_next: torch.Tensor
    u_t: torch.Tensor
    img_z: torch.Tensor
    img_g: torch.Tensor

    def to(self, dtype) -> "Batch":
        return Batch(*(getattr(self, f.name).to(dtype) for f in dataclasses.fields(self)))

    def __len__(self):
        return self.u_t.shape[0]


class DatasetTensors:
    """Dataset images held once as tensors, indexable by (episode, t) triples."""

    def __init__(self, dataset, dtype=torch.float32):
        eps = dataset.episodes
        self.frames = torch.from_numpy(np.stack(
            [np.stack([s.obs for s in e.steps]) for e in eps]).transpose(0, 1, 4, 2, 3).copy()).to(dtype)
        self.actions = torch.tensor(np.array([[s.action for s in e.steps] for e in eps]), dtype=dtype)
        self.inhand = torch.from_numpy(np.stack([e.inhand_image for e in eps]).transpose(0, 3, 1, 2).copy()).to(dtype)
        self.goal = torch.from_numpy(np.stack([e.goal_image for e in eps]).transpose(0, 3, 1, 2).copy()).to(dtype)
        n_ep, T = self.frames.shape[:2]
        if T < 3:
            raise ValueError("episodes need at least 3 steps to form triples")
        self.triples = np.array([(e, t) for e in range(n_ep) for t in range(1, T - 1)], dtype=np.int64)

    def batch(self, idx: Sequence[int]) -> Batch:
        ep, t = self.triples[np.asarray(idx)].T
        ep, t = torch.from_numpy(ep), torch.from_numpy(t)
        return Batch(self.frames[ep, t - 1], self.frames[ep, t], self.frames[ep, t + 1],
                     self.actions[ep, t], self.inhand[ep], self.goal[ep])


def _noise(rng: Optional[torch.Generator], like: torch.Tensor) -> torch.Tensor:
    return torch.randn(like.shape, generator=rng, dtype=like.dtype)


def _recon_nll(model: IHVSModel, head: str, latent: torch.Tensor, target: torch.Tensor,
               perfect: bool, reduce: bool = True) -> torch.Tensor:
    mean = target if perfect else model.decoder(head)(latent)
    if not reduce:
        return gaussian_image_nll_per_pixel(target, mean, model.cfg.decoder_std)
    return -gaussian_image_loglik(target, mean, model.cfg.decoder_std)


def _kl(q, p, reduce: bool) -> torch.Tensor:
    return kl_diag_gaussian(q, p) if reduce else kl_diag_gaussian_per_dim(q, p)


def loss_x_terms(model: IHVSModel, batch: Batch, rng: Optional[torch.Generator] = None, *,
                 posterior_equals_prior: bool = False, perfect_recon: bool = False,
                 reduce: bool = True):
    """Per-sample (reconstruction NLL, KL) of the transition loss.

    ``reduce=False`` keeps the per-pixel and per-dimension contributions.

    x_t ~ q(x_t | I_t); x_{t+1} is drawn from the transition prior and decoded
    against I_{t+1}; the KL compares q(x_{t+1} | I_{t+1}) with that prior.
    """
    enc = model.hand_encoder
    q_t = enc(batch.img_t)
    x_t = sample(q_t, noise=_noise(rng, q_t.mean))
    v_t = None
    if model.cfg.transition == "newtonian":
        q_prev = enc(batch.img_prev)
        x_prev = sample(q_prev, noise=_noise(rng, q_prev.mean))
        v_t = velocity_from_positions(x_t, x_prev, model.cfg.dt)
    prior, _ = model.transition(x_t, batch.u_t, v=v_t)
    x_next = sample(prior, noise=_noise(rng, prior.mean))
    recon = _recon_nll(model, "hand", x_next, batch.img_next, perfect_recon, reduce)
    q_next = prior if posterior_equals_prior else enc(batch.img_next)
    return recon, _kl(q_next, prior, reduce)


def loss_z_terms(model: IHVSModel, batch: Batch, rng: Optional[torch.Generator] = None, *,
                 goal_posterior_equals_prior: bool = False, perfect_recon: bool = False,
                 reduce: bool = True):
    """Per-sample (in-hand NLL, goal-image NLL, KL(q(x_g|I_g) || p(x_g|z))) and the
    intermediate distributions ``(q_g, p_g)``."""
    qz = model.inhand_encoder(batch.img_z)
    z = sample(qz, noise=_noise(rng, qz.mean))
    p_g = model.goal(z)
    x_g = sample(p_g, noise=_noise(rng, p_g.mean))
    nll_z = _recon_nll(model, "inhand", z, batch.img_z, perfect_recon, reduce)
    nll_g = _recon_nll(model, "goal", x_g, batch.img_g, perfect_recon, reduce)
    q_g = p_g if goal_posterior_equals_prior else model.hand_encoder(batch.img_g)
    return (nll_z, nll_g, _kl(q_g, p_g, reduce)), (q_g, p_g)


def reg_terms(q_g: DiagonalGaussian, p_g: DiagonalGaussian, sigma_g: float, reduce: bool = True):
    ref = DiagonalGaussian.isotropic(torch.zeros_like(q_g.mean), sigma_g)
    return _kl(q_g, ref, reduce), _kl(p_g, ref, reduce)


def loss_x(model, batch, rng=None, **hooks) -> torch.Tensor:
    recon, kl = loss_x_terms(model, batch, rng, **hooks)
    return (recon + kl).mean()


def loss_z(model, batch, rng=None, **hooks) -> torch.Tensor:
    (a, b, kl), _ = loss_z_terms(model, batch, rng, **hooks)
    return (a + b + kl).mean()


def loss_reg(model, batch, rng=None) -> torch.Tensor:
    qz = model.inhand_encoder(batch.img_z)
    z = sample(qz, noise=_noise(rng, qz.mean))
    q_g, p_g = model.hand_encoder(batch.img_g), model.goal(z)
    a, b = reg_terms(q_g, p_g, model.cfg.sigma_g)
    return (a + b).mean()


def total_loss(model: IHVSModel, batch: Batch, rng: Optional[torch.Generator], cfg: TrainConfig):
    """Weighted objective plus a dict of the (batch-mean) loss components.

    The regulariser shares the z draw and goal distributions with L_z.
    """
    rx, kx = loss_x_terms(model, batch, rng)
    (nz, ng, kg), (q_g, p_g) = loss_z_terms(model, batch, rng)
    ra, rb = reg_terms(q_g, p_g, model.cfg.sigma_g)
    lx, lz, lr = (rx + kx).mean(), (nz + ng + kg).mean(), (ra + rb).mean()
    total = cfg.lambda_x * lx + cfg.lambda_z * lz + cfg.lambda_reg * lr
    return total, {"loss_x": lx, "loss_z": lz, "loss_reg": lr, "total": total}


def loss_elements(model: IHVSModel, batch: Batch, rng: Optional[torch.Generator], cfg: TrainConfig):
    """Flat vector of weighted per-pixel and per-dimension contributions.

    Its sum equals ``total_loss``. Differencing two of these vectors before
    summing avoids the cancellation error of differencing two large totals.
    """
    n = len(batch)
    rx, kx = loss_x_terms(model, batch, rng, reduce=False)
    (nz, ng, kg), (q_g, p_g) = loss_z_terms(model, batch, rng, reduce=False)
    ra, rb = reg_terms(q_g, p_g, model.cfg.sigma_g, reduce=False)
    parts = [(cfg.lambda_x, (rx, kx)), (cfg.lambda_z, (nz, ng, kg)), (cfg.lambda_reg, (ra, rb))]
    return torch.cat([(w / n * t).reshape(-1) for w, ts in parts for t in ts])


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class EpochRecord:
    epoch: int
    loss_x: float
    loss_z: float
    loss_reg: float
    total: float


@dataclass
class TrainReport:
    seed: int
    records: List[EpochRecord] = field(default_factory=list)
    initial: Optional[EpochRecord] = None
    steps: int = 0
    wall_clock: float = 0.0
    checkpoint: Optional[str] = None

    def to_csv(self) -> str:
        lines = ["epoch,loss_x,loss_z,loss_reg,total"]
        for r in self.records:
            vals = (r.loss_x, r.loss_z, r.loss_reg, r.total)
            lines.append(f"{r.epoch}," + ",".join(repr(float(v)) for v in vals))
        return "\n".join(lines) + "\n"


def lr_scale(config: TrainConfig, epoch: int) -> float:
    """Learning-rate multiplier for ``epoch``: 1, then linear to ``lr_final_scale``.

    The decay window is capped at the run length.
    """
    n = min(config.lr_decay_epochs, config.epochs)
    start = config.epochs - n
    if n == 0 or epoch < start:
        return 1.0
    frac = (epoch - start + 1) / n
    return 1.0 + frac * (config.lr_final_scale - 1.0)


def train(dataset, config: TrainConfig = TrainConfig(), *, progress: bool = False,
          model: Optional[IHVSModel] = None,
          on_epoch: Optional[Callable[[EpochRecord, IHVSModel], None]] = None
          ) -> Tuple[IHVSModel, TrainReport]:
    """Minimise the mean weighted loss with Adam over shuffled minibatches.

    Deterministic for a fixed seed when torch runs single-threaded.
    ``on_epoch`` is called after every epoch and must not touch torch's RNG.
    """
    if not dataset.episodes:
        raise ValueError("dataset is empty")
    t0 = time.perf_counter()
    model_cfg = dataclasses.replace(config.model, dt=dataset.config.dt)
    if model is None:
        model = build_model(model_cfg, seed=config.seed)
    data = DatasetTensors(dataset)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate,
                           betas=(config.beta1, config.beta2), eps=config.adam_eps)
    order_rng = np.random.default_rng(config.seed if config.shuffle_seed is None else config.shuffle_seed)
    noise_rng = torch.Generator().manual_seed(config.seed)
    report = TrainReport(seed=config.seed)
    n = len(data.triples)
    bs = min(config.batch_size, n)

    report.initial = _evaluate(model, data, config)
    warm_cfg = dataclasses.replace(config, lambda_z=0.0)
    step = 0
    for epoch in range(config.epochs):
        for group in opt.param_groups:
            group["lr"] = config.learning_rate * lr_scale(config, epoch)
        step_cfg = warm_cfg if epoch < config.goal_warmup_epochs else config
        perm = order_rng.permutation(n)
        sums = np.zeros(4)
        n_batches = 0
        for b0 in range(0, n - bs + 1, bs):
            batch = data.batch(perm[b0:b0 + bs])
            loss, parts = total_loss(model, batch, noise_rng, step_cfg)
            if not torch.isfinite(loss):
                terms = {k: float(v.detach()) for k, v in parts.items()}
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch} batch {n_batches} "
                                            f"(step {step}): {terms}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sums += [float(parts[k].detach()) for k in ("loss_x", "loss_z", "loss_reg", "total")]
            n_batches += 1
            step += 1
        rec = EpochRecord(epoch, *(float(v) for v in sums / max(n_batches, 1)))
        report.records.append(rec)
        if on_epoch is not None:
            on_epoch(rec, model)
        if progress and (epoch % 10 == 0 or epoch == config.epochs - 1):
            log.info("epoch %d: total %.2f (x %.2f, z %.2f, reg %.3f)", epoch, rec.total,
                     rec.loss_x, rec.loss_z, rec.loss_reg)
    report.steps = step
    report.wall_clock = time.perf_counter() - t0
    return model, report


@torch.no_grad()
def _evaluate(model: IHVSModel, data: DatasetTensors, cfg: TrainConfig, n: int = 256) -> EpochRecord:
    """Loss on a fixed subset with fixed noise (does not touch the training streams)."""
    idx = np.linspace(0, len(data.triples) - 1, min(n, len(data.triples))).astype(int)
    _, parts = total_loss(model, data.batch(idx), torch.Generator().manual_seed(12345), cfg)
    return EpochRecord(-1, *(float(parts[k]) for k in ("loss_x", "loss_z", "loss_reg", "total")))


# -- gradient verification ----------------------------------------------------------

@dataclass
class GradCheckResult:
    max_rel_error: float
    per_group: Dict[str, float]
    n_checked: Dict[str, int]


def _rel_err(a: float, n: float, floor: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def grad_check(model: IHVSModel, batch: Batch, epsilon: float = 1e-5, *, n_per_group: int = 200,
               seed: int = 0, noise_seed: int = 1, cfg: TrainConfig = TrainConfig(),
               loss_fn=None) -> GradCheckResult:
    """Compare autograd gradients of the total loss with central differences.

    The model and batch are promoted to float64; the sampling noise is re-drawn
    from the same seed for every evaluation so the objective is deterministic.
    ``loss_fn(model, batch, rng)`` overrides the objective (used for test models);
    it may return a vector of terms, which are differenced element-wise before
    summing.
    """
    model = model.to(torch.float64)
    batch = batch.to(torch.float64)
    if loss_fn is None:
        def loss_fn(m, b, rng):
            return loss_elements(m, b, rng, cfg)

    def f() -> torch.Tensor:
        with torch.no_grad():
            return loss_fn(model, batch, torch.Generator().manual_seed(noise_seed))

    model.zero_grad(set_to_none=True)
    loss_fn(model, batch, torch.Generator().manual_seed(noise_seed)).sum().backward()
    pick_rng = np.random.default_rng(seed)
    groups = getattr(model, "groups", None) or [n for n, _ in model.named_children()]
    per_group, counts = {}, {}
    for g in groups:
        params = [p for p in getattr(model, g).parameters()]
        flat_index = [(pi, j) for pi, p in enumerate(params) for j in range(p.numel())]
        k = min(n_per_group, len(flat_index))
        chosen = pick_rng.choice(len(flat_index), size=k, replace=False)
        scale = max(float(p.grad.abs().max()) for p in params if p.grad is not None)
        worst = 0.0
        for c in chosen:
            pi, j = flat_index[c]
            p = params[pi]
            analytic = float(p.grad.view(-1)[j]) if p.grad is not None else 0.0
            with torch.no_grad():
                orig = float(p.view(-1)[j])
                p.view(-1)[j] = orig + epsilon
                up = f()
                p.view(-1)[j] = orig - epsilon
                down = f()
                p.view(-1)[j] = orig
            numeric = float((up - down).sum()) / (2 * epsilon)
            worst = max(worst, _rel_err(analytic, numeric, 1e-3 * scale + 1e-300))
        per_group[g] = worst
        counts[g] = k
    return GradCheckResult(max(per_group.values()), per_group, counts)
