"""Diffusion noise schedule, deterministic DDIM sampling, and DDIM inversion.

Convention: the clean image sits at nominal timestep -1 where the cumulative
signal coefficient is exactly 1, so boundary cases are exact identities.
All sampling here is deterministic (eta = 0).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray = field(init=False)

    def __post_init__(self):
        object.__setattr__(
            self, "alpha_bar", np.cumprod(1.0 - self.beta.astype(np.float64))
        )

    def abar(self, t: int) -> float:
        """Cumulative signal fraction; t == -1 is the clean end (exactly 1)."""
        if t == -1:
            return 1.0
        if not 0 <= t < self.T:
            raise ValueError(f"timestep {t} outside [-1, {self.T - 1}]")
        return float(self.alpha_bar[t])


def make_linear_schedule(T: int, beta_start: float = 1e-4,
                         beta_end: float = 0.02) -> NoiseSchedule:
    if T < 2:
        raise ValueError(f"need T >= 2, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"invalid beta bounds ({beta_start}, {beta_end})")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    return NoiseSchedule(T=T, beta=beta)


def _per_sample_coeffs(sched: NoiseSchedule, t, like: np.ndarray):
    """sqrt(abar), sqrt(1-abar) shaped for broadcasting over (N,C,H,W)."""
    ts = np.atleast_1d(np.asarray(t))
    ab = np.array([sched.abar(int(tt)) for tt in ts])
    shape = (len(ab),) + (1,) * (like.ndim - 1) if like.ndim > 1 else ab.shape
    ab = ab.reshape(shape) if len(ab) > 1 else float(ab[0])
    return np.sqrt(ab), np.sqrt(1.0 - ab)


def forward_marginal(z0, t, eps, sched: NoiseSchedule):
    """Closed-form noising z_t = sqrt(abar_t) z0 + sqrt(1-abar_t) eps.

    ``t`` may be a scalar or a per-sample vector; works on Tensors (keeping
    gradient flow) or raw arrays.
    """
    z0t, epst = T.as_tensor(z0), T.as_tensor(eps)
    if z0t.shape != epst.shape:
        raise T.ShapeError(f"forward_marginal: {z0t.shape} vs {epst.shape}")
    ca, cb = _per_sample_coeffs(sched, t, z0t.data)
    out = T.add(T.mul(z0t, ca), T.mul(epst, cb))
    return out if isinstance(z0, T.Tensor) or isinstance(eps, T.Tensor) else out.data


def ddim_step(z_t, eps_pred, t_from: int, t_to: int, sched: NoiseSchedule):
    """One deterministic DDIM update from t_from to t_to.

    Returns (z_to, x0_pred). Direction-agnostic: t_to > t_from performs the
    inversion recursion. Degenerate when abar(t_from) underflows.
    """
    ab_from = sched.abar(t_from)
    ab_to = sched.abar(t_to)
    if ab_from < 1e-8:
        raise ValueError(f"degenerate ddim_step: abar({t_from}) = {ab_from:g}")
    z_t, eps_pred = T.as_tensor(z_t), T.as_tensor(eps_pred)
    sa, sb = np.sqrt(ab_from), np.sqrt(1.0 - ab_from)
    x0_pred = T.mul(T.sub(z_t, T.mul(eps_pred, sb)), 1.0 / sa)
    z_to = T.add(T.mul(x0_pred, np.sqrt(ab_to)), T.mul(eps_pred, np.sqrt(1.0 - ab_to)))
    return z_to, x0_pred


def evenly_spaced_steps(T_total: int, n: int) -> list[int]:
    """n strictly decreasing timesteps starting at T-1 (few-step subset)."""
    if not 1 <= n <= T_total:
        raise ValueError(f"bad subset size {n} for T={T_total}")
    steps = [int(round((T_total - 1) * (n - i) / n)) for i in range(n)]
    steps[0] = T_total - 1
    # Rounding can collapse neighbours when n approaches T; repair by
    # pushing the later step down. Strictly decreasing inputs are unchanged.
    for i in range(1, n):
        steps[i] = min(steps[i - 1] - 1, steps[i])
    if steps[-1] < 0:
        raise ValueError(f"subset not strictly decreasing: {steps}")
    return steps


def ddim_sample(z_T, cond, model_fn, steps: list[int], sched: NoiseSchedule,
                trace: bool = False):
    """Few-step deterministic sampling along a decreasing timestep subset.

    ``model_fn(z, t, cond) -> eps_pred``. Ends at the clean latent (t = -1).
    With ``trace=True`` also returns the per-step x0 predictions.
    """
    z = T.as_tensor(z_T)
    x0s = []
    hops = list(zip(steps, list(steps[1:]) + [-1]))
    for t_from, t_to in hops:
        eps = model_fn(z, t_from, cond)
        z, x0 = ddim_step(z, eps, t_from, t_to, sched)
        x0s.append(x0)
    return (z, x0s) if trace else z


def ddim_invert(z0, cond, model_fn, steps: list[int], sched: NoiseSchedule):
    """Run the DDIM recursion upward: clean latent -> noise at steps[0].

    ``steps`` uses the same decreasing convention as ddim_sample; an empty
    list is the identity. The model is evaluated at the source timestep,
    clamped to 0 at the clean end.
    """
    z = T.as_tensor(z0)
    ups = list(reversed(steps))
    prev = -1
    for t_to in ups:
        t_eval = max(prev, 0)
        eps = model_fn(z, t_eval, cond)
        z, _ = ddim_step(z, eps, prev, t_to, sched)
        prev = t_to
    return z
