"""Linear-path flow matching with per-modality noise levels.

Convention: ``tau = 1`` is clean data and ``tau = 0`` is pure noise, so a
noised sample is ``tau * x + (1 - tau) * eps`` and its velocity target is
``x - eps`` regardless of ``tau``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .rng import SeededRng

NOISE_MODES = ("decoupled", "joint")
LOSS_MODES = ("full", "wm_only", "action_only")


@dataclass
class TimestepSampler:
    """Beta-shaped timestep draw: ``x ~ Beta(alpha, beta)``, ``tau = s * (1 - x)``.

    With alpha=1.5, beta=1 the mass sits near ``x = 1``, i.e. near pure noise.
    Set ``flip=True`` to return ``s * x`` instead (mass near clean data).
    """

    alpha: float = 1.5
    beta: float = 1.0
    s: float = 0.999
    flip: bool = False

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("Beta shape parameters must be positive")
        if not 0 < self.s <= 1:
            raise ValueError(f"s must lie in (0, 1], got {self.s}")

    def from_uniform(self, u: np.ndarray | float) -> np.ndarray | float:
        u = np.asarray(u, dtype=np.float64)
        if self.beta == 1.0:
            # closed-form inverse CDF of Beta(alpha, 1)
            x = u ** (1.0 / self.alpha)
        else:
            from scipy.special import betaincinv
            x = betaincinv(self.alpha, self.beta, u)
        tau = self.s * x if self.flip else self.s * (1.0 - x)
        return tau if tau.ndim else float(tau)

    def mean(self) -> float:
        mx = self.alpha / (self.alpha + self.beta)
        return self.s * mx if self.flip else self.s * (1.0 - mx)


def sample_timestep(rng: SeededRng, sampler: TimestepSampler, size=None):
    """One draw (``size=None``) or an array of draws."""
    return sampler.from_uniform(rng.uniform(size))


@dataclass
class LossConfig:
    lambda_wm: float = 1.0
    noise_mode: str = "decoupled"
    loss_mode: str = "full"
    timestep_flip: bool = False     # TimestepSampler(flip=...): bias toward clean instead of noise

    def __post_init__(self):
        if self.lambda_wm < 0:
            raise ValueError(f"lambda_wm must be nonnegative, got {self.lambda_wm}")
        if self.noise_mode not in NOISE_MODES:
            raise ValueError(f"noise_mode must be one of {NOISE_MODES}, got {self.noise_mode!r}")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")

    def to_dict(self):
        return asdict(self)

    def timestep_sampler(self) -> TimestepSampler:
        return TimestepSampler(flip=self.timestep_flip)


@dataclass
class NoisedBatch:
    """One training batch; leading axis B on every array (tau arrays are (B,))."""

    context: np.ndarray
    state: np.ndarray
    clean_action: np.ndarray
    clean_future: np.ndarray
    tau_a: np.ndarray
    tau_o: np.ndarray
    eps_a: np.ndarray
    eps_o: np.ndarray
    noisy_action: np.ndarray
    noisy_future: np.ndarray


def noise(clean: np.ndarray, eps: np.ndarray, tau: np.ndarray) -> np.ndarray:
    """``tau * clean + (1 - tau) * eps`` with tau broadcast over trailing axes."""
    t = np.asarray(tau, dtype=np.float64).reshape((-1,) + (1,) * (clean.ndim - 1))
    return t * clean + (1.0 - t) * eps


def make_noised_batch(rng: SeededRng, sampler: TimestepSampler, context, state, clean_action,
                      clean_future, noise_mode: str = "decoupled", loss_mode: str = "full",
                      tau_a=None, tau_o=None) -> NoisedBatch:
    """Draw noise levels and Gaussian noise for a batch.

    Draw order is fixed: tau_a, tau_o (decoupled only), eps_a, eps_o.
    ``tau_a`` / ``tau_o`` override the draws (test hook).  In ``wm_only``
    mode the action noise level is pinned to 0 so action tokens are pure
    noise.
    """
    context, state = np.asarray(context, float), np.asarray(state, float)
    clean_action, clean_future = np.asarray(clean_action, float), np.asarray(clean_future, float)
    B = state.shape[0]
    for name, arr in (("context", context), ("clean_action", clean_action),
                      ("clean_future", clean_future)):
        if arr.shape[0] != B:
            raise T.ShapeError(f"make_noised_batch: {name} has batch {arr.shape[0]}, state has {B}")
    if noise_mode not in NOISE_MODES:
        raise ValueError(f"unknown noise_mode {noise_mode!r}")

    draw_a = sample_timestep(rng, sampler, B)
    draw_o = sample_timestep(rng, sampler, B) if noise_mode == "decoupled" else draw_a
    ta = draw_a if tau_a is None else np.broadcast_to(np.asarray(tau_a, float), (B,)).copy()
    to = draw_o if tau_o is None else np.broadcast_to(np.asarray(tau_o, float), (B,)).copy()
    if noise_mode == "joint" and tau_o is None:
        to = ta
    if loss_mode == "wm_only" and tau_a is None:
        ta = np.zeros(B)
    eps_a = rng.normal(clean_action.shape)
    eps_o = rng.normal(clean_future.shape)
    return NoisedBatch(context=context, state=state, clean_action=clean_action,
                       clean_future=clean_future, tau_a=ta, tau_o=to, eps_a=eps_a, eps_o=eps_o,
                       noisy_action=noise(clean_action, eps_a, ta),
                       noisy_future=noise(clean_future, eps_o, to))


def velocity_targets(batch: NoisedBatch) -> tuple[np.ndarray, np.ndarray]:
    return batch.clean_action - batch.eps_a, batch.clean_future - batch.eps_o


def joint_loss(pred_a, pred_o, targets, cfg: LossConfig):
    """``(L_joint, L_A, L_WM)`` as tensors; MSE is the mean over all elements."""
    u_a, u_o = targets
    l_a = T.mse(pred_a, T.as_tensor(u_a))
    l_wm = T.mse(pred_o, T.as_tensor(u_o))
    if cfg.loss_mode == "wm_only":
        total = T.scale(l_wm, cfg.lambda_wm)
    elif cfg.loss_mode == "action_only":
        total = T.scale(l_a, 1.0)
    else:
        total = T.add(l_a, T.scale(l_wm, cfg.lambda_wm))
    return total, l_a, l_wm
