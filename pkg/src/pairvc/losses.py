"""Training objectives.  All functions are pure and accept tensors or arrays."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable

import torch

from .config import LossSection


class LossError(ValueError):
    pass


def _t(x):
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(x, dtype=torch.float64)


def kl_loss(q_mu, q_sigma, p_mu, p_sigma):
    """Mean per-element KL(N(q_mu, q_sigma^2) || N(p_mu, p_sigma^2))."""
    q_mu, q_sigma, p_mu, p_sigma = map(_t, (q_mu, q_sigma, p_mu, p_sigma))
    if not (q_mu.shape == q_sigma.shape == p_mu.shape == p_sigma.shape):
        raise LossError(f"shape mismatch: {tuple(q_mu.shape)} vs {tuple(p_mu.shape)}")
    kl = (torch.log(p_sigma / q_sigma)
          + (q_sigma ** 2 + (q_mu - p_mu) ** 2) / (2 * p_sigma ** 2) - 0.5)
    return kl.mean()


def flow_kl_loss(z_p, q_sigma, logdet, p_mu, p_sigma):
    """Single-sample KL estimate between the flow-mapped posterior and the prior.

    ``z_p`` is the flow image of a posterior sample with scale ``q_sigma``;
    ``logdet`` is the per-item log-determinant of the flow.  The posterior
    log-density term uses its expectation (``-1/2`` per element), so with an
    identity flow the estimator is unbiased for :func:`kl_loss`.
    """
    z_p, q_sigma, p_mu, p_sigma = map(_t, (z_p, q_sigma, p_mu, p_sigma))
    if not (z_p.shape == q_sigma.shape == p_mu.shape == p_sigma.shape):
        raise LossError(f"shape mismatch: {tuple(z_p.shape)} vs {tuple(p_mu.shape)}")
    per = torch.log(p_sigma) - torch.log(q_sigma) - 0.5 + 0.5 * ((z_p - p_mu) / p_sigma) ** 2
    per_item = z_p[0].numel()
    return per.mean() - _t(logdet).mean() / per_item


def mel_l1(pred, target, max_offset: int = 2):
    """Mean |pred - target| over ``(..., frames, bins)``; crops up to 2 frames."""
    pred, target = _t(pred), _t(target)
    tp, tt = pred.shape[-2], target.shape[-2]
    if pred.shape[-1] != target.shape[-1] or abs(tp - tt) > max_offset:
        raise LossError(f"mel shapes {tuple(pred.shape)} and {tuple(target.shape)} differ")
    t = min(tp, tt)
    return torch.mean(torch.abs(pred[..., :t, :] - target[..., :t, :]))


def adv_losses(disc_real, disc_fake):
    """Least-squares GAN losses ``(L_D, L_G)`` summed over discriminator scales."""
    if not disc_real or not disc_fake:
        raise LossError("score lists must be non-empty")
    loss_d = sum(torch.mean((_t(r) - 1) ** 2) + torch.mean(_t(f) ** 2) for r, f in zip(disc_real, disc_fake))
    loss_g = sum(torch.mean((_t(f) - 1) ** 2) for f in disc_fake)
    return loss_d, loss_g


def feature_matching(real_feats, fake_feats):
    """Sum over layers of mean |real - fake|; nested per-scale lists are flattened."""
    real, fake = _flatten(real_feats), _flatten(fake_feats)
    if len(real) != len(fake):
        raise LossError(f"layer count mismatch: {len(real)} vs {len(fake)}")
    total = 0.0
    for r, f in zip(real, fake):
        r, f = _t(r), _t(f)
        if r.shape != f.shape:
            raise LossError(f"feature shape mismatch: {tuple(r.shape)} vs {tuple(f.shape)}")
        total = total + torch.mean(torch.abs(r.detach() - f))
    return total


def _flatten(feats):
    out = []
    for x in feats:
        if isinstance(x, (list, tuple)):
            out.extend(_flatten(x))
        else:
            out.append(x)
    return out


# Named no-op slot for auxiliary objectives (e.g. distillation terms) whose
# form is left to the caller; each hook returns a scalar added to total_g.
ExtraLoss = Callable[..., torch.Tensor]


@dataclass
class LossBreakdown:
    kl: float
    rec_or_cv: float
    adv_g: float
    adv_d: float
    fm: float
    total_g: float
    total_d: float
    phase: int
    extra: float = 0.0

    def as_dict(self) -> dict:
        return asdict(self)


def total_losses(parts: dict, weights: LossSection, phase: int, extras: dict | None = None):
    """Weighted generator total and discriminator total.

    ``parts`` maps ``kl``, ``rec_or_cv``, ``adv_g``, ``adv_d``, ``fm`` to
    scalars; returns ``(total_g, total_d, LossBreakdown)``.
    """
    names = ("kl", "rec_or_cv", "adv_g", "adv_d", "fm")
    extras = extras or {}
    for name in names:
        if name not in parts:
            raise LossError(f"missing loss term {name!r}")
    def scalar(v):
        return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)

    for name, value in list(parts.items()) + list(extras.items()):
        if not math.isfinite(scalar(value)):
            raise LossError(f"non-finite loss term {name!r}")
    extra = sum(extras.values()) if extras else 0.0
    total_g = (weights.mel * parts["rec_or_cv"] + weights.kl * parts["kl"]
               + weights.adv * parts["adv_g"] + weights.fm * parts["fm"] + extra)
    total_d = parts["adv_d"]
    record = LossBreakdown(
        kl=scalar(parts["kl"]), rec_or_cv=scalar(parts["rec_or_cv"]), adv_g=scalar(parts["adv_g"]),
        adv_d=scalar(parts["adv_d"]), fm=scalar(parts["fm"]), total_g=scalar(total_g),
        total_d=scalar(total_d), phase=phase, extra=scalar(extra))
    return total_g, total_d, record
