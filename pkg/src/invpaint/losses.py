"""Training objectives for the inversion network.

Four families: masked noise reconstruction, image reconstruction, Gaussian
moment-matching regularization of the blended latent, and hinge adversarial
losses over discriminator heads on frozen-teacher features. Squared-norm
reductions use the mean over all elements (batch included), so loss weights
are resolution-independent.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .masks import require_binary
from .schedule import NoiseSchedule, forward_marginal


@dataclass(frozen=True)
class LossWeights:
    lambda_noise: float = 1.0
    lambda_image: float = 1.0
    lambda_recons: float = 1.0
    lambda_reg: float = 0.5
    lambda_adv: float = 0.5

    def __post_init__(self):
        for f_ in (self.lambda_noise, self.lambda_image, self.lambda_recons,
                   self.lambda_reg, self.lambda_adv):
            if not np.isfinite(f_) or f_ < 0:
                raise ValueError(f"loss weights must be finite and >= 0, got {f_}")


@dataclass
class LossReport:
    terms: dict = field(default_factory=dict)
    total: float = 0.0

    def row(self, step: int) -> dict:
        r = {"step": step}
        r.update({k: f"{v:.8g}" for k, v in self.terms.items()})
        r["total"] = f"{self.total:.8g}"
        return r


def masked_noise_loss(z_T_hat, eps, m) -> T.Tensor:
    """Mean over all elements of ((1-m) * (z_T_hat - eps))^2.

    Masked entries contribute zero but stay in the denominator.
    """
    z_T_hat, eps = T.as_tensor(z_T_hat), T.as_tensor(eps)
    if z_T_hat.shape != eps.shape:
        raise T.ShapeError(f"masked_noise_loss: {z_T_hat.shape} vs {eps.shape}")
    require_binary(m)
    keep = 1.0 - np.asarray(m, dtype=z_T_hat.dtype)
    return T.tmean(T.square(T.mul(T.sub(z_T_hat, eps), keep)))


def image_loss(z0_hat, z0) -> T.Tensor:
    z0_hat, z0 = T.as_tensor(z0_hat), T.as_tensor(z0)
    if z0_hat.shape != z0.shape:
        raise T.ShapeError(f"image_loss: {z0_hat.shape} vs {z0.shape}")
    return T.tmean(T.square(T.sub(z0_hat, z0)))


def recons_loss(z_T_hat, eps, m, z0_hat, z0, w: LossWeights) -> T.Tensor:
    return T.add(
        T.mul(masked_noise_loss(z_T_hat, eps, m), w.lambda_noise),
        T.mul(image_loss(z0_hat, z0), w.lambda_image),
    )


_GAUSS_MOMENTS = {1: 0.0, 2: 1.0}


def moment_loss(z_blend, n: int) -> T.Tensor:
    """| |mean(z^n)|^(1/n) - mu_n^(1/n) | per sample, batch-averaged.

    mu_1 = 0 and mu_2 = 1 for the standard Gaussian target.
    """
    if n not in _GAUSS_MOMENTS:
        raise ValueError(f"moment order must be 1 or 2, got {n}")
    z = T.as_tensor(z_blend)
    axes = tuple(range(1, z.data.ndim))  # per-sample mean over c*h*w
    zn = z if n == 1 else T.square(z)
    s = T.tmean(zn, axes=axes)
    root = T.tabs(s) if n == 1 else T.tsqrt(T.tabs(s))
    target = _GAUSS_MOMENTS[n] ** (1.0 / n)
    return T.tmean(T.tabs(T.sub(root, target)))


def gauss_reg_loss(z_blend) -> T.Tensor:
    return T.add(moment_loss(z_blend, 1), moment_loss(z_blend, 2))


def _draw_adv_t(sched: NoiseSchedule, rng, batch: int, t_range) -> np.ndarray:
    lo = int(t_range[0] * sched.T)
    hi = max(lo + 1, int(t_range[1] * sched.T))
    return rng.integers(lo, hi, shape=(batch,))


ADV_T_RANGE = (0.02, 0.98)


def adv_gen_loss(z0_hat, cond, teacher_taps_fn, disc_fn, sched: NoiseSchedule,
                 rng, t_range=ADV_T_RANGE) -> T.Tensor:
    """-E[sum_k D_k(teacher features of noised z0_hat)], batch-averaged.

    Timesteps are drawn uniformly over the interior of the schedule;
    gradient flows through the noising into z0_hat.
    """
    z0_hat = T.as_tensor(z0_hat)
    n = z0_hat.shape[0]
    ts = _draw_adv_t(sched, rng, n, t_range)
    eps = rng.normal(z0_hat.shape, dtype=z0_hat.dtype)
    z_t = forward_marginal(z0_hat, ts, T.Tensor(eps), sched)
    scores = disc_fn(teacher_taps_fn(z_t, ts, cond))
    total = scores[0]
    for s in scores[1:]:
        total = T.add(total, s)
    return T.mul(T.tmean(total), -1.0)


def adv_disc_loss(z0_real, z0_fake, cond, teacher_taps_fn, disc_fn,
                  sched: NoiseSchedule, rng, t_range=ADV_T_RANGE) -> T.Tensor:
    """Hinge loss: ReLU(1 - D(real)) + ReLU(1 + D(fake)), summed over heads.

    The fake latent is detached so no gradient reaches the inverter path.
    """
    z0_real = T.as_tensor(z0_real)
    z0_fake = T.as_tensor(z0_fake).detach()
    n = z0_real.shape[0]
    loss = None
    for z0, sign in ((z0_real, -1.0), (z0_fake, +1.0)):
        ts = _draw_adv_t(sched, rng, n, t_range)
        eps = rng.normal(z0.shape, dtype=z0.dtype)
        z_t = forward_marginal(z0, ts, T.Tensor(eps), sched)
        scores = disc_fn(teacher_taps_fn(z_t, ts, cond))
        hinge = None
        for s in scores:
            h = T.relu(T.add(T.mul(s, sign), 1.0))
            hinge = h if hinge is None else T.add(hinge, h)
        term = T.tmean(hinge)
        loss = term if loss is None else T.add(loss, term)
    return loss


def final_loss(z_T_hat, eps, m, z0_hat, z0, z_blend, cond, w: LossWeights,
               teacher_taps_fn=None, disc_fn=None, sched=None, rng=None,
               t_range=ADV_T_RANGE):
    """Weighted combination; returns (scalar Tensor, LossReport).

    With lambda_adv == 0 the adversarial path is not evaluated at all.
    """
    l_noise = masked_noise_loss(z_T_hat, eps, m)
    l_image = image_loss(z0_hat, z0)
    l_recons = T.add(T.mul(l_noise, w.lambda_noise), T.mul(l_image, w.lambda_image))
    total = T.mul(l_recons, w.lambda_recons)
    terms = {
        "noise": l_noise.item(),
        "image": l_image.item(),
        "recons": l_recons.item(),
        "reg": 0.0,
        "adv": 0.0,
    }
    if w.lambda_reg > 0:
        l_reg = gauss_reg_loss(z_blend)
        terms["reg"] = l_reg.item()
        total = T.add(total, T.mul(l_reg, w.lambda_reg))
    if w.lambda_adv > 0:
        l_adv = adv_gen_loss(z0_hat, cond, teacher_taps_fn, disc_fn, sched, rng,
                             t_range)
        terms["adv"] = l_adv.item()
        total = T.add(total, T.mul(l_adv, w.lambda_adv))
    report = LossReport(terms=terms, total=total.item())
    return total, report


LOG_FIELDS = ["step", "noise", "image", "recons", "reg", "adv", "total",
              "wall_time"]


class LossLog:
    """Appends LossReport rows to a CSV training log.

    Wall time is recorded only when ``timing`` is on, keeping default
    output byte-reproducible across reruns.
    """

    def __init__(self, path, timing: bool = False, header_comment: str = ""):
        self.path = path
        self.timing = timing
        self._t0 = time.perf_counter()
        with open(path, "w", newline="") as f:
            if header_comment:
                f.write(f"# {header_comment}\n")
            csv.DictWriter(f, fieldnames=LOG_FIELDS).writeheader()

    def append(self, step: int, report: LossReport) -> None:
        row = report.row(step)
        row["wall_time"] = (
            f"{time.perf_counter() - self._t0:.3f}" if self.timing else ""
        )
        with open(self.path, "a", newline="") as f:
            csv.DictWriter(f, fieldnames=LOG_FIELDS, restval="",
                           extrasaction="ignore").writerow(row)
