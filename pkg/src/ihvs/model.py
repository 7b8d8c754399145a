"""In-hand-view-sensitive Newtonian VAE.

Two image encoders (hand camera -> x, in-hand camera -> z), decoders for
the hand, in-hand and goal images, a goal head ``p(x_g | z)`` and, for the full Newtonian
prior, the network ``f`` giving the diagonals of A, log(-B) and log C.
``share_goal_decoder=True`` decodes the goal image with the hand decoder
instead of a separate goal decoder.

Tensors are NCHW; the public ``encode``/``decode`` helpers also accept and
return (H, W, 3) numpy images.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import torch
from torch import nn

from .distributions import DiagonalGaussian
from .imaging import check_image

HEADS = ("hand", "inhand")
DECODERS = ("hand", "inhand", "goal")
TRANSITIONS = ("simplified", "newtonian")


@dataclass(frozen=True)
class ModelConfig:
    latent_dim: int = 2
    image_size: int = 64
    sigma_x: float = 0.001
    sigma_g: float = 0.05
    dt: float = 0.5
    decoder_std: float = 0.1
    transition: str = "simplified"
    log_std_min: float = -10.0
    log_std_max: float = 2.0
    hidden: int = 16
    decoder_hidden: int = 128
    channels: Tuple[int, ...] = (16, 32, 64, 128)
    share_goal_decoder: bool = False
    # one std for both axes of p(x_g | z), so no axis can go slack
    goal_shared_std: bool = True
    # cap on log std of p(x_g | z); a loose cap lets the head widen instead of fitting the mean
    goal_log_std_max: float = -8.0
    # x-space nets see x * latent_scale, keeping metric latents O(1) inside the nets
    latent_scale: float = 50.0
    # the goal images span only the pick-offset range (about +-1 cm), so their decoder gets more gain
    goal_latent_scale: float = 250.0

    def __post_init__(self):
        if self.latent_dim != 2:
            raise ValueError("latent_dim must equal the action dimension (2)")
        if min(self.sigma_x, self.sigma_g, self.decoder_std, self.dt, self.latent_scale,
               self.goal_latent_scale) <= 0:
            raise ValueError("sigma_x, sigma_g, decoder_std, dt and the latent scales must be positive")
        if self.transition not in TRANSITIONS:
            raise ValueError(f"transition must be one of {TRANSITIONS}")
        if self.image_size % 2 ** len(self.channels):
            raise ValueError("image_size must be divisible by 2**len(channels)")
        if not self.log_std_min < min(self.log_std_max, self.goal_log_std_max):
            raise ValueError("log_std_min must be below log_std_max and goal_log_std_max")

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ValueError(f"unknown model config key: {unknown[0]!r}")
        d = dict(d)
        if "channels" in d:
            d["channels"] = tuple(d["channels"])
        return cls(**d)


def _squash_log_std(raw: torch.Tensor, lo: float, hi: float) -> torch.Tensor:
    # smooth clamp into (lo, hi); the hard-clamp kink would break finite-difference checks
    return lo + (hi - lo) * torch.sigmoid(raw)


def _mlp(n_in: int, hidden: int, n_out: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Linear(n_in, hidden), nn.LeakyReLU(),
        nn.Linear(hidden, hidden), nn.LeakyReLU(),
        nn.Linear(hidden, n_out),
    )


class GaussianHead(nn.Module):
    """Two-hidden-layer MLP emitting mean and (squashed) log-std.

    ``in_scale`` multiplies the input and ``out_scale`` divides the mean.
    ``shared_std`` emits a single log-std broadcast over all dimensions.
    """

    def __init__(self, n_in: int, cfg: ModelConfig, in_scale: float = 1.0, out_scale: float = 1.0,
                 shared_std: bool = False, log_std_max: Optional[float] = None):
        super().__init__()
        self.d = cfg.latent_dim
        self.net = _mlp(n_in, cfg.hidden, self.d + (1 if shared_std else self.d))
        self.lo = cfg.log_std_min
        self.hi = cfg.log_std_max if log_std_max is None else log_std_max
        self.in_scale, self.out_scale = in_scale, out_scale

    def forward(self, h: torch.Tensor) -> DiagonalGaussian:
        out = self.net(h * self.in_scale)
        mean, raw = out[..., :self.d], out[..., self.d:]
        log_std = _squash_log_std(raw, self.lo, self.hi).expand_as(mean)
        return DiagonalGaussian(mean / self.out_scale, log_std)


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig, scale: float = 1.0):
        super().__init__()
        layers, c_in = [], 3
        for c in cfg.channels:
            layers += [nn.Conv2d(c_in, c, 4, stride=2, padding=1), nn.LeakyReLU()]
            c_in = c
        self.conv = nn.Sequential(*layers)
        side = cfg.image_size // 2 ** len(cfg.channels)
        self.head = GaussianHead(c_in * side * side, cfg, out_scale=scale)

    def forward(self, img: torch.Tensor) -> DiagonalGaussian:
        return self.head(self.conv(img).flatten(1))


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig, scale: float = 1.0):
        super().__init__()
        chans = list(cfg.channels[::-1])
        self.side = cfg.image_size // 2 ** len(chans)
        self.c0 = chans[0]
        self.scale = scale
        self.fc = nn.Sequential(
            nn.Linear(cfg.latent_dim, cfg.decoder_hidden), nn.LeakyReLU(),
            nn.Linear(cfg.decoder_hidden, cfg.decoder_hidden), nn.LeakyReLU(),
            nn.Linear(cfg.decoder_hidden, self.c0 * self.side ** 2), nn.LeakyReLU(),
        )
        layers = []
        for c_in, c_out in zip(chans, chans[1:] + [3]):
            layers += [nn.ConvTranspose2d(c_in, c_out, 4, stride=2, padding=1), nn.LeakyReLU()]
        self.deconv = nn.Sequential(*layers[:-1])

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.fc(x * self.scale).view(-1, self.c0, self.side, self.side)
        # sigmoid keeps the mean image inside [0, 1] without a zero-gradient clamp
        return torch.sigmoid(self.deconv(h))


class NewtonF(nn.Module):
    """f(x, v, u) -> (A, log(-B), log C) diagonals."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.d = cfg.latent_dim
        self.net = _mlp(3 * cfg.latent_dim, cfg.hidden, 3 * cfg.latent_dim)
        self.scale = cfg.latent_scale

    def forward(self, x, v, u):
        return self.net(torch.cat([x, v, u], dim=-1) * self.scale).split(self.d, dim=-1)


class IHVSModel(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        # x-space networks are scaled; z has no metric meaning and is left as is
        self.hand_encoder = Encoder(cfg, cfg.latent_scale)
        self.inhand_encoder = Encoder(cfg)
        self.hand_decoder = Decoder(cfg, cfg.latent_scale)
        self.inhand_decoder = Decoder(cfg)
        if not cfg.share_goal_decoder:
            self.goal_decoder = Decoder(cfg, cfg.goal_latent_scale)
        self.goal_head = GaussianHead(cfg.latent_dim, cfg, out_scale=cfg.latent_scale,
                                      shared_std=cfg.goal_shared_std, log_std_max=cfg.goal_log_std_max)
        if cfg.transition == "newtonian":
            self.newton_f = NewtonF(cfg)

    @property
    def groups(self) -> Tuple[str, ...]:
        names = ("hand_encoder", "inhand_encoder", "hand_decoder", "inhand_decoder")
        names += () if self.cfg.share_goal_decoder else ("goal_decoder",)
        names += ("goal_head",)
        return names + (("newton_f",) if self.cfg.transition == "newtonian" else ())

    def encoder(self, head: str) -> Encoder:
        if head not in HEADS:
            raise ValueError(f"unknown encoder head {head!r}")
        return self.hand_encoder if head == "hand" else self.inhand_encoder

    def decoder(self, head: str) -> Decoder:
        if head not in DECODERS:
            raise ValueError(f"unknown decoder head {head!r}")
        if head == "goal" and self.cfg.share_goal_decoder:
            return self.hand_decoder
        return getattr(self, f"{head}_decoder")

    def goal(self, z: torch.Tensor) -> DiagonalGaussian:
        return self.goal_head(z)

    def transition(self, x, u, v=None, abc=None):
        """Prior over the next latent; returns (DiagonalGaussian, v_next or None)."""
        cfg = self.cfg
        if cfg.transition == "simplified":
            return transition_simplified(x, u, cfg.dt, cfg.sigma_x), None
        return transition_newtonian(x, v, u, cfg.dt, cfg.sigma_x,
                                    f=None if abc is not None else self.newton_f, abc=abc)


def build_model(cfg: ModelConfig = ModelConfig(), seed: int = 0,
                dtype: torch.dtype = torch.float32) -> IHVSModel:
    """Seeded construction; torch's default init is fan-in scaled uniform."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = IHVSModel(cfg)
    return model.to(dtype)


def velocity_from_positions(x_t, x_prev, dt: float):
    return (x_t - x_prev) / dt


def transition_simplified(x: torch.Tensor, u: torch.Tensor, dt: float, sigma_x: float) -> DiagonalGaussian:
    """N(x + dt * u, sigma_x^2)."""
    if x.shape != u.shape:
        raise ValueError("x and u must have equal shape")
    return DiagonalGaussian.isotropic(x + dt * u, sigma_x)


def transition_newtonian(x, v, u, dt: float, sigma_x: float, f: Optional[NewtonF] = None,
                         abc=None) -> Tuple[DiagonalGaussian, torch.Tensor]:
    """Newtonian prior. ``abc=(A, B, C)`` bypasses ``f`` (B and C given directly)."""
    if abc is None:
        a, log_neg_b, log_c = f(x, v, u)
        b, c = -torch.exp(log_neg_b), torch.exp(log_c)
    else:
        a, b, c = (torch.as_tensor(t, dtype=x.dtype) for t in abc)
    v_next = v + dt * (a * x + b * v + c * u)
    return DiagonalGaussian.isotropic(x + dt * v_next, sigma_x), v_next


# -- numpy-facing helpers -------------------------------------------------------

def image_to_tensor(img: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    arr = np.asarray(img)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype)


def tensor_to_image(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy().transpose(0, 2, 3, 1)


@torch.no_grad()
def encode(model: IHVSModel, image: np.ndarray, head: str) -> DiagonalGaussian:
    size = model.cfg.image_size
    check_image(np.asarray(image), (size, size))
    dtype = next(model.parameters()).dtype
    g = model.encoder(head)(image_to_tensor(image, dtype))
    return DiagonalGaussian(g.mean[0], g.log_std[0])


@torch.no_grad()
def decode(model: IHVSModel, latent, head: str) -> np.ndarray:
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(np.asarray(latent), dtype=dtype).reshape(-1, model.cfg.latent_dim)
    if x.shape[0] != 1:
        raise ValueError("decode expects one latent vector")
    return tensor_to_image(model.decoder(head)(x))[0]


@torch.no_grad()
def goal_from_inhand(model: IHVSModel, inhand_image: np.ndarray,
                     rng: torch.Generator | None = None) -> Tuple[torch.Tensor, DiagonalGaussian]:
    """z ~ q(z | I_z) (posterior mean when ``rng`` is None), then p(x_g | z)."""
    from .distributions import sample

    qz = encode(model, inhand_image, "inhand")
    z = qz.mean if rng is None else sample(qz, rng)
    g = model.goal(z[None])
    return z, DiagonalGaussian(g.mean[0], g.log_std[0])


def architecture_hash(model: IHVSModel) -> str:
    desc = {
        "transition": model.cfg.transition,
        "latent_dim": model.cfg.latent_dim,
        "tensors": [[k, list(v.shape)] for k, v in model.state_dict().items()],
    }
    return hashlib.sha256(json.dumps(desc, sort_keys=True).encode()).hexdigest()[:16]
