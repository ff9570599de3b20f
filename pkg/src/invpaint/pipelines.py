"""Training loops and inference pipelines.

Training stages: (1) diffusion teacher on synthetic shapes, (2) one-step
generator distilled from the teacher, (3) inversion network trained on
generator-synthesized image/mask/class triplets with the combined objective,
alternating 1:1 with the discriminator when the adversarial weight is on.

Inference: blended few-step sampling with selectable initialization
(random noise, one-step inversion, or multi-step DDIM inversion with or
without Re-Blending). All pipelines share the sampling code after
initialization.

Every random draw comes from a stream labeled by purpose and step, so runs
are reproducible and resumable bit-for-bit.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import nets as N
from . import tensor as T
from .losses import LossLog, LossWeights, adv_disc_loss, final_loss
from .masks import MaskPair, require_binary, sample_mask
from .optim import AdamW
from .rng import RngStream
from .schedule import (
    NoiseSchedule,
    ddim_invert,
    ddim_sample,
    ddim_step,
    evenly_spaced_steps,
    forward_marginal,
)
from .synth import SynthSpec, gen_image

INIT_MODES = ("random", "inverfill", "ddim_invert", "ddim_invert_reblend")


@dataclass(frozen=True)
class TrainConfig:
    batch: int = 32
    steps: int = 2000
    resolution: int = 16
    lr: float = 1e-5
    disc_lr: float = 1e-6
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    ckpt_every: int = 1000
    log_every: int = 25
    distill_ddim_steps: int = 32
    mask_coverage: tuple = (0.1, 0.6)
    mask_family: str = "mixed"
    use_reblend: bool = True
    weight_decay: float = 0.0
    lr_final: float | None = None  # cosine-decay target; None = constant lr
    ema_decay: float | None = None  # weight averaging for the returned params

    def __post_init__(self):
        if self.batch < 1 or self.steps < 0:
            raise ValueError("batch and steps must be positive")
        if not (np.isfinite(self.lr) and np.isfinite(self.disc_lr)):
            raise ValueError("learning rates must be finite")


@dataclass
class InpaintRequest:
    image_masked: np.ndarray  # (C,H,W), masked pixels zeroed
    mask: MaskPair
    class_id: int
    n_steps: int = 4
    init_mode: str = "random"

    def __post_init__(self):
        if self.init_mode not in INIT_MODES:
            raise ValueError(
                f"init_mode {self.init_mode!r} not in {INIT_MODES}"
            )
        inside = self.image_masked * self.mask.M[None]
        if np.abs(inside).max() > 1e-6:
            raise ValueError("masked pixels of image_masked must be zero")


def _sstream(seed: int, purpose: str, step: int) -> RngStream:
    """Fresh per-(purpose, step) stream: draws are independent of history."""
    return RngStream(seed, f"{purpose}@{step}")


def reblend(z_T_hat, eps_prime, m):
    """Replace masked cells of the inverted latent with fresh Gaussian noise.

    Unmasked entries are bit-equal to z_T_hat, masked ones to eps_prime.
    """
    require_binary(m)
    z_T_hat = T.as_tensor(z_T_hat)
    eps_prime = T.as_tensor(eps_prime)
    if z_T_hat.shape != eps_prime.shape:
        raise T.ShapeError(f"reblend: {z_T_hat.shape} vs {eps_prime.shape}")
    return T.where_mask(m, eps_prime, z_T_hat)


def make_denoiser_fn(params: dict, cfg: N.BackboneConfig):
    def fn(z, t, cond):
        return N.denoiser_forward(params, cfg, z, t, cond)

    return fn


def _freeze(params: dict) -> dict:
    for p in params.values():
        p.requires_grad = False
    return params


def _set_lr(opt, tc: TrainConfig, step: int) -> None:
    if tc.lr_final is None:
        return
    frac = step / max(tc.steps - 1, 1)
    opt.lr = tc.lr_final + 0.5 * (tc.lr - tc.lr_final) * (
        1.0 + np.cos(np.pi * frac)
    )


class _Ema:
    """Exponential moving average of a parameter dict (None decay = off)."""

    def __init__(self, params: dict, decay):
        self.decay = decay
        self.shadow = (
            {k: p.data.copy() for k, p in params.items()} if decay else None
        )

    def update(self, params: dict) -> None:
        if self.shadow is None:
            return
        d = self.decay
        for k, p in params.items():
            self.shadow[k] += (1.0 - d) * (p.data - self.shadow[k])

    def result(self, params: dict) -> dict:
        if self.shadow is None:
            return params
        return {k: T.param(self.shadow[k], name=params[k].name)
                for k in params}


def _check_finite_loss(loss, step: int, what: str):
    if not np.isfinite(loss.item()):
        raise RuntimeError(
            f"{what} loss became non-finite at step {step}: {loss.item()!r}"
        )


# -- stage 1: teacher --------------------------------------------------


def train_teacher(tc: TrainConfig, spec: SynthSpec, cfg: N.BackboneConfig,
                  sched: NoiseSchedule, log: LossLog | None = None,
                  params: dict | None = None, start_step: int = 0,
                  on_checkpoint=None) -> dict:
    """Standard denoising objective: predict the noise added at a uniform t."""
    if params is None:
        params = N.init_backbone(cfg, RngStream(tc.seed, "teacher_init"))
    opt = AdamW(params, lr=tc.lr, weight_decay=tc.weight_decay)
    ema = _Ema(params, tc.ema_decay)
    for step in range(start_step, tc.steps):
        _set_lr(opt, tc, step)
        classes = _sstream(tc.seed, "t_class", step).integers(
            0, spec.n_classes, shape=(tc.batch,)
        )
        shape_rng = _sstream(tc.seed, "t_shape", step)
        images = np.stack([gen_image(spec, int(c), shape_rng) for c in classes])
        ts = _sstream(tc.seed, "t_t", step).integers(0, sched.T, shape=(tc.batch,))
        eps = _sstream(tc.seed, "t_noise", step).normal(images.shape)
        z_t = forward_marginal(images, ts, eps, sched)
        pred = N.denoiser_forward(params, cfg, z_t, ts, classes)
        loss = T.tmean(T.square(T.sub(pred, T.Tensor(eps))))
        _check_finite_loss(loss, step, "teacher")
        T.clear_grads(params)
        T.backward(loss)
        opt.step(T.collect_grads(params))
        ema.update(params)
        if log and (step % tc.log_every == 0 or step == tc.steps - 1):
            from .losses import LossReport

            log.append(step, LossReport(terms={"mse": loss.item()},
                                        total=loss.item()))
        if on_checkpoint and (step + 1) % tc.ckpt_every == 0:
            on_checkpoint(step + 1, params)
    return ema.result(params)


# -- stage 2: generator distillation ----------------------------------


def distill_generator(tc: TrainConfig, teacher: dict,
                      teacher_cfg: N.BackboneConfig, gen_cfg: N.BackboneConfig,
                      sched: NoiseSchedule, log: LossLog | None = None,
                      params: dict | None = None, start_step: int = 0,
                      on_checkpoint=None) -> dict:
    """Distill K-step DDIM teacher samples into a single generator pass."""
    _freeze(teacher)
    if params is None:
        params = N.init_backbone(gen_cfg, RngStream(tc.seed, "gen_init"))
    opt = AdamW(params, lr=tc.lr, weight_decay=tc.weight_decay)
    steps_subset = evenly_spaced_steps(sched.T, tc.distill_ddim_steps)
    teacher_fn = make_denoiser_fn(teacher, teacher_cfg)
    shape = (tc.batch, gen_cfg.in_channels, tc.resolution, tc.resolution)
    ema = _Ema(params, tc.ema_decay)
    for step in range(start_step, tc.steps):
        _set_lr(opt, tc, step)
        eps = _sstream(tc.seed, "d_noise", step).normal(shape)
        classes = _sstream(tc.seed, "d_class", step).integers(
            0, gen_cfg.n_classes, shape=(tc.batch,)
        )
        with T.no_grad():
            target = ddim_sample(eps, classes, teacher_fn, steps_subset, sched)
        pred = N.generator_forward(params, gen_cfg, eps, classes)
        loss = T.tmean(T.square(T.sub(pred, target.detach())))
        _check_finite_loss(loss, step, "distill")
        T.clear_grads(params)
        T.backward(loss)
        opt.step(T.collect_grads(params))
        ema.update(params)
        if log and (step % tc.log_every == 0 or step == tc.steps - 1):
            from .losses import LossReport

            log.append(step, LossReport(terms={"mse": loss.item()},
                                        total=loss.item()))
        if on_checkpoint and (step + 1) % tc.ckpt_every == 0:
            on_checkpoint(step + 1, params)
    return ema.result(params)


# -- stage 3: inversion network ---------------------------------------


def _mask_batch(tc: TrainConfig, resolution: int, step: int):
    rng = _sstream(tc.seed, "i_mask", step)
    Ms, ms = [], []
    for _ in range(tc.batch):
        mp = sample_mask(resolution, tc.mask_family, rng,
                         coverage=tc.mask_coverage)
        Ms.append(mp.M[None])
        ms.append(mp.m[None])
    return np.stack(Ms), np.stack(ms)


def train_inverter(tc: TrainConfig, generator: dict, teacher: dict,
                   gen_cfg: N.BackboneConfig, teacher_cfg: N.BackboneConfig,
                   disc_cfg: N.DiscConfig, sched: NoiseSchedule,
                   log: LossLog | None = None, inverter: dict | None = None,
                   disc: dict | None = None, start_step: int = 0,
                   on_checkpoint=None):
    """Train the inversion network on generator-made triplets.

    Per step: synthesize (z0, mask, class), invert the masked latent, blend
    with fresh noise when Re-Blending is on, regenerate, and descend the
    combined objective. Discriminator alternates 1:1 when lambda_adv > 0.
    Returns (inverter, disc) parameter dicts.
    """
    _freeze(generator)
    _freeze(teacher)
    if inverter is None:
        inverter = N.init_from_generator(generator, gen_cfg, gen_cfg)
        for p in inverter.values():
            p.requires_grad = True
    if disc is None:
        disc = N.init_disc(disc_cfg, teacher_cfg, RngStream(tc.seed, "disc_init"))
    opt = AdamW(inverter, lr=tc.lr, weight_decay=tc.weight_decay)
    opt_d = AdamW(disc, lr=tc.disc_lr, weight_decay=tc.weight_decay)
    w = tc.weights
    res = tc.resolution

    def taps_fn(z_t, ts, cond):
        _, taps = N.denoiser_forward(teacher, teacher_cfg, z_t, ts, cond,
                                     want_taps=True)
        return taps

    def disc_fn(taps):
        return N.disc_heads_forward(disc, disc_cfg, taps)

    for step in range(start_step, tc.steps):
        _set_lr(opt, tc, step)
        eps = _sstream(tc.seed, "i_noise", step).normal(
            (tc.batch, gen_cfg.in_channels, res, res)
        )
        classes = _sstream(tc.seed, "i_class", step).integers(
            0, gen_cfg.n_classes, shape=(tc.batch,)
        )
        with T.no_grad():
            z0 = N.generator_forward(generator, gen_cfg, eps, classes).detach()
        M, m = _mask_batch(tc, res, step)
        z0_m = z0.data * (1.0 - M)  # identity encoder: latent == pixel space
        z_T_hat = N.inverter_forward(inverter, gen_cfg, z0_m, classes)
        if np.isnan(z_T_hat.data).any():
            raise RuntimeError(f"NaN in inverted latent at step {step}")
        if tc.use_reblend:
            eps_prime = _sstream(tc.seed, "i_reblend", step).normal(z0.shape)
            z_blend = reblend(z_T_hat, T.Tensor(eps_prime), m)
        else:
            z_blend = z_T_hat
        z0_hat = N.generator_forward(generator, gen_cfg, z_blend, classes)
        adv_rng = _sstream(tc.seed, "i_adv", step)
        total, report = final_loss(
            z_T_hat, eps, m, z0_hat, z0, z_blend, classes, w,
            teacher_taps_fn=taps_fn, disc_fn=disc_fn, sched=sched, rng=adv_rng,
        )
        _check_finite_loss(total, step, "inverter")
        T.clear_grads(inverter)
        T.clear_grads(disc)
        T.backward(total)
        opt.step(T.collect_grads(inverter))
        if w.lambda_adv > 0:
            d_rng = _sstream(tc.seed, "i_adv_d", step)
            d_loss = adv_disc_loss(z0, z0_hat.detach(), classes, taps_fn,
                                   disc_fn, sched, d_rng)
            _check_finite_loss(d_loss, step, "discriminator")
            T.clear_grads(disc)
            T.backward(d_loss)
            opt_d.step(T.collect_grads(disc))
        if log and (step % tc.log_every == 0 or step == tc.steps - 1):
            log.append(step, report)
        if on_checkpoint and (step + 1) % tc.ckpt_every == 0:
            on_checkpoint(step + 1, inverter, disc)
    return inverter, disc


# -- inference ---------------------------------------------------------


def _blended_sample(init_z, z0_m: np.ndarray, m: np.ndarray, class_id: int,
                    model_fn, steps: list[int], sched: NoiseSchedule,
                    blend_rng: RngStream):
    """Few-step DDIM with per-step blending of the known-region latent.

    After each update the known latent is re-noised to the destination level
    and overwrites the unmasked cells bit-exactly. Returns (x0_final, trace).
    """
    z = T.as_tensor(init_z)
    trace = []
    hops = list(zip(steps, list(steps[1:]) + [-1]))
    for t_from, t_to in hops:
        eps_pred = model_fn(z, t_from, class_id)
        z, x0 = ddim_step(z, eps_pred, t_from, t_to, sched)
        trace.append(x0.data.copy())
        if t_to >= 0:
            eps_b = blend_rng.normal(z.shape, dtype=z.data.dtype)
            z_known = forward_marginal(z0_m, t_to, eps_b, sched)
            z = T.where_mask(m, z, T.Tensor(z_known))
    return z.data, trace


@dataclass
class InpaintResult:
    output: np.ndarray       # composited image, unmasked pixels bit-equal input
    x0_final: np.ndarray     # pre-composite clean prediction
    trace: list              # per-step x0 predictions
    init_latent: np.ndarray  # the z_T actually fed to the sampler
    inverter_seconds: float = 0.0


def _finalize(request: InpaintRequest, x0: np.ndarray, trace, init_latent,
              inv_seconds=0.0) -> InpaintResult:
    M = request.mask.M[None]
    out = np.where(M != 0, x0[0], request.image_masked)
    return InpaintResult(output=out, x0_final=x0[0], trace=trace,
                         init_latent=init_latent, inverter_seconds=inv_seconds)


def _request_tensors(request: InpaintRequest):
    z0_m = request.image_masked[None]  # (1,C,H,W); identity encoder
    m = request.mask.m[None, None]
    return z0_m, m


def bld_inpaint(request: InpaintRequest, teacher: dict,
                teacher_cfg: N.BackboneConfig, sched: NoiseSchedule,
                seed: int = 0, init_latent: np.ndarray | None = None,
                case_index: int = 0) -> InpaintResult:
    """Blended few-step sampling from random Gaussian initialization.

    ``init_latent`` overrides the initialization (used by the other
    pipelines; everything after initialization is shared).
    """
    z0_m, m = _request_tensors(request)
    steps = evenly_spaced_steps(sched.T, request.n_steps)
    if init_latent is None:
        init_latent = _sstream(seed, "infer_init", case_index).normal(z0_m.shape)
    blend_rng = _sstream(seed, "infer_blend", case_index)
    with T.no_grad():
        x0, trace = _blended_sample(
            init_latent, z0_m, m, request.class_id,
            make_denoiser_fn(teacher, teacher_cfg), steps, sched, blend_rng,
        )
    return _finalize(request, x0, trace, init_latent)


def inverfill_inpaint(request: InpaintRequest, inverter: dict,
                      gen_cfg: N.BackboneConfig, teacher: dict,
                      teacher_cfg: N.BackboneConfig, sched: NoiseSchedule,
                      seed: int = 0, case_index: int = 0) -> InpaintResult:
    """One-step inversion initialization, then the shared blended sampler."""
    z0_m, m = _request_tensors(request)
    t0 = time.perf_counter()
    with T.no_grad():
        z_T_hat = N.inverter_forward(inverter, gen_cfg, z0_m, request.class_id)
    inv_seconds = time.perf_counter() - t0
    eps_prime = _sstream(seed, "infer_reblend", case_index).normal(z0_m.shape)
    init = reblend(z_T_hat, T.Tensor(eps_prime), m).data
    res = bld_inpaint(request, teacher, teacher_cfg, sched, seed=seed,
                      init_latent=init, case_index=case_index)
    res.inverter_seconds = inv_seconds
    return res


def ddim_inversion_inpaint(request: InpaintRequest, teacher: dict,
                           teacher_cfg: N.BackboneConfig, sched: NoiseSchedule,
                           with_reblend: bool, seed: int = 0,
                           invert_steps: int = 50,
                           case_index: int = 0) -> InpaintResult:
    """Multi-step DDIM inversion baseline, with or without Re-Blending."""
    z0_m, m = _request_tensors(request)
    steps = evenly_spaced_steps(sched.T, invert_steps)
    with T.no_grad():
        z_T = ddim_invert(z0_m, request.class_id,
                          make_denoiser_fn(teacher, teacher_cfg), steps, sched)
    init = z_T.data
    if with_reblend:
        eps_prime = _sstream(seed, "infer_reblend", case_index).normal(z0_m.shape)
        init = reblend(T.Tensor(init), T.Tensor(eps_prime), m).data
    return bld_inpaint(request, teacher, teacher_cfg, sched, seed=seed,
                       init_latent=init, case_index=case_index)
