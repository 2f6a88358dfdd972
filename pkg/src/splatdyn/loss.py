"""Image reconstruction loss over a past-and-future trajectory."""

from dataclasses import dataclass

import numpy as np

from .errors import LengthMismatch, ShapeMismatch


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.5
    gamma: float = 0.87
    beta: float = 0.05
    T: int = 4
    T_prime: int = 12

    def __post_init__(self):
        if not 0 <= self.lam <= 1:
            raise ValueError("lam must lie in [0, 1]")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.T < 1 or self.T_prime < 0:
            raise ValueError("T must be >= 1 and T_prime >= 0")


def no_perceptual(I_gt, I):
    return 0.0


def l1_metric(I_gt, I):
    return float(np.mean(np.abs(np.asarray(I_gt) - np.asarray(I))))


def frame_loss(I_gt, I, beta=0.05, perceptual=no_perceptual):
    """Pixel MSE plus ``beta`` times a perceptual distance (zero by default)."""
    I_gt = np.asarray(I_gt, dtype=np.float64)
    I = np.asarray(I, dtype=np.float64)
    if I_gt.shape != I.shape:
        raise ShapeMismatch(f"image shapes differ: {I_gt.shape} vs {I.shape}")
    return float(np.mean((I_gt - I) ** 2)) + beta * float(perceptual(I_gt, I))


def trajectory_loss(past_losses, future_losses, cfg):
    """Weighted sum of per-frame losses.

    ``past_losses`` holds the ``T + 1`` reconstruction losses of frames
    ``0..T`` and is averaged with divisor ``T``; future losses are discounted
    by ``gamma**j`` for the ``j``-th predicted frame.
    """
    past = np.asarray(past_losses, dtype=np.float64)
    future = np.asarray(future_losses, dtype=np.float64)
    if past.shape != (cfg.T + 1,):
        raise LengthMismatch(f"expected {cfg.T + 1} past losses, got {past.size}")
    if future.shape != (cfg.T_prime,):
        raise LengthMismatch(f"expected {cfg.T_prime} future losses, got {future.size}")
    decay = cfg.gamma ** np.arange(cfg.T_prime)
    return float((1 - cfg.lam) * past.sum() / cfg.T + cfg.lam * np.dot(decay, future))
