"""Metric suite for the desk-scale experiments.

Covers latent-Gaussianity diagnostics (moments plus a histogram JSD against
the standard normal), background-preservation traces of intermediate x0
predictions, a probe classifier standing in for text-alignment scoring, and
the component-ablation report. Everything emits plain CSV.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import nets as N
from . import tensor as T
from .losses import LossWeights
from .masks import sample_mask
from .optim import AdamW
from .pipelines import (
    InpaintRequest,
    TrainConfig,
    bld_inpaint,
    ddim_inversion_inpaint,
    inverfill_inpaint,
    reblend,
    train_inverter,
    _sstream,
)
from .rng import RngStream
from .schedule import NoiseSchedule
from .synth import SynthSpec, gen_batch, gen_image

METRICS_FIELDS = ["case_id", "init_mode", "steps", "bg_mse_final", "jsd",
                  "align", "latency_ms"]
TRACE_FIELDS = ["case_id", "step_index", "bg_mse"]
ABLATION_FIELDS = ["config_name", "bg_mse_final", "jsd_blend", "align"]


def write_csv(path, fieldnames, rows, header_comment: str = "") -> None:
    with open(path, "w", newline="") as f:
        if header_comment:
            f.write(f"# {header_comment}\n")
        wr = csv.DictWriter(f, fieldnames=fieldnames)
        wr.writeheader()
        for r in rows:
            wr.writerow({k: ("" if r.get(k) is None else r[k])
                         for k in fieldnames})


# -- Gaussianity -------------------------------------------------------


@dataclass(frozen=True)
class GaussDiag:
    mean: float
    variance: float
    skewness: float
    kurtosis: float  # excess
    jsd: float
    bins: int
    count: int


def _normal_bin_mass(edges: np.ndarray) -> np.ndarray:
    cdf = np.array([0.5 * (1.0 + math.erf(e / math.sqrt(2.0))) for e in edges])
    q = np.diff(cdf)
    q[0] += cdf[0]          # left tail folded into the edge bin
    q[-1] += 1.0 - cdf[-1]  # right tail likewise
    return q


def _hist_probs(x: np.ndarray, bins: int) -> np.ndarray:
    edges = np.linspace(-5.0, 5.0, bins + 1)
    clipped = np.clip(x, -5.0, np.nextafter(5.0, -np.inf))
    hist, _ = np.histogram(clipped, bins=edges)
    return hist / x.size, edges


def _jsd(p: np.ndarray, q: np.ndarray) -> float:
    m = 0.5 * (p + q)

    def kl(a, b):
        nz = a > 0
        return float(np.sum(a[nz] * np.log(a[nz] / b[nz])))

    return 0.5 * kl(p, m) + 0.5 * kl(q, m)


def gauss_diagnostics(z, bins: int = 64) -> GaussDiag:
    """Moments and histogram JSD of a sample against N(0,1) on [-5, 5].

    Out-of-range mass goes to the edge bins; JSD uses natural log, so the
    value lives in [0, ln 2].
    """
    x = np.asarray(z, dtype=np.float64).ravel()
    if x.size < 10 * bins:
        raise ValueError(
            f"need at least {10 * bins} samples for {bins} bins, got {x.size}"
        )
    mu = float(x.mean())
    var = float(x.var())
    sd = math.sqrt(var) if var > 0 else 1.0
    std = (x - mu) / sd
    skew = float(np.mean(std**3))
    kurt = float(np.mean(std**4)) - 3.0
    p, edges = _hist_probs(x, bins)
    q = _normal_bin_mass(edges)
    return GaussDiag(mean=mu, variance=var, skewness=skew, kurtosis=kurt,
                     jsd=_jsd(p, q), bins=bins, count=x.size)


# -- background traces -------------------------------------------------


def background_mse(x0: np.ndarray, gt: np.ndarray, M: np.ndarray) -> float:
    """MSE over unmasked pixels only; an empty background counts as 0."""
    keep = (1.0 - M) != 0
    n = int(np.count_nonzero(keep))
    if n == 0:
        warnings.warn("empty background, trace value defined as 0")
        return 0.0
    d = (x0 - gt)[np.broadcast_to(keep, x0.shape)]
    return float(np.mean(d**2))


def background_x0_trace(trace, gt: np.ndarray, M: np.ndarray) -> list[float]:
    return [background_mse(x0[0], gt, M[None]) for x0 in trace]


# -- probe classifier --------------------------------------------------


def train_probe(spec: SynthSpec, seed: int = 0, n_train: int = 1024,
                steps: int = 600, lr: float = 0.01, hidden: int = 48):
    """One-hidden-layer probe over raw pixels; returns (params, held-out acc)."""
    imgs, classes = gen_batch(spec, n_train + 256,
                              RngStream(seed, "probe_class"),
                              RngStream(seed, "probe_shape"))
    x = imgs.reshape(imgs.shape[0], -1)
    xtr, ytr = x[:n_train], classes[:n_train]
    xte, yte = x[n_train:], classes[n_train:]
    d = x.shape[1]
    init = RngStream(seed, "probe_init")
    params = {
        "w1": T.param(init.normal((d, hidden)) * np.sqrt(2.0 / d), "w1"),
        "b1": T.param(np.zeros(hidden, dtype=np.float32), "b1"),
        "w2": T.param(np.zeros((hidden, spec.n_classes), dtype=np.float32),
                      "w2"),
        "b2": T.param(np.zeros(spec.n_classes, dtype=np.float32), "b2"),
    }
    opt = AdamW(params, lr=lr)
    for _ in range(steps):
        logits = _probe_logits(xtr, params)
        loss = T.softmax_cross_entropy(logits, ytr)
        T.clear_grads(params)
        T.backward(loss)
        opt.step(T.collect_grads(params))
    acc = alignment_accuracy(xte.reshape(-1, *imgs.shape[1:]), yte, params)
    return params, acc


def _probe_logits(x: np.ndarray, probe: dict):
    h = T.relu(T.linear(T.as_tensor(x), probe["w1"], probe["b1"]))
    return T.linear(h, probe["w2"], probe["b2"])


def probe_predict(images: np.ndarray, probe: dict) -> np.ndarray:
    x = images.reshape(images.shape[0], -1).astype(np.float32)
    with T.no_grad():
        logits = _probe_logits(x, probe)
    return np.argmax(logits.data, axis=1)


def alignment_accuracy(images: np.ndarray, classes: np.ndarray,
                       probe: dict) -> float:
    pred = probe_predict(images, probe)
    return float(np.mean(pred == np.asarray(classes)))


# -- case harness ------------------------------------------------------


@dataclass
class EvalCase:
    case_id: int
    gt: np.ndarray
    request: InpaintRequest


@dataclass
class CaseReport:
    case_id: int
    init_mode: str
    steps: int
    bg_trace: list
    bg_mse_final: float
    align: int
    latency_ms: float | None = None

    def row(self) -> dict:
        return {"case_id": self.case_id, "init_mode": self.init_mode,
                "steps": self.steps, "bg_mse_final": repr(self.bg_mse_final),
                "jsd": "", "align": self.align,
                "latency_ms": self.latency_ms}


def make_cases(spec: SynthSpec, n_cases: int, seed: int, n_steps: int,
               init_mode: str = "random", family: str = "mixed",
               coverage=(0.1, 0.6)) -> list[EvalCase]:
    cases = []
    for i in range(n_cases):
        c = int(_sstream(seed, "eval_class", i).integers(0, spec.n_classes))
        gt = gen_image(spec, c, _sstream(seed, "eval_shape", i))
        mp = sample_mask(spec.resolution, family, _sstream(seed, "eval_mask", i),
                         coverage=coverage)
        req = InpaintRequest(image_masked=gt * (1 - mp.M[None]), mask=mp,
                             class_id=c, n_steps=n_steps, init_mode=init_mode)
        cases.append(EvalCase(case_id=i, gt=gt, request=req))
    return cases


def run_case(case: EvalCase, teacher: dict, tcfg: N.BackboneConfig,
             sched: NoiseSchedule, seed: int, inverter=None, gcfg=None,
             probe=None, timing: bool = False, invert_steps: int = 50):
    """Dispatch one case by its init mode; returns (CaseReport, result)."""
    import time

    req = case.request
    t0 = time.perf_counter()
    if req.init_mode == "random":
        res = bld_inpaint(req, teacher, tcfg, sched, seed=seed,
                          case_index=case.case_id)
    elif req.init_mode == "inverfill":
        if inverter is None or gcfg is None:
            raise ValueError("inverfill init needs a trained inversion network")
        res = inverfill_inpaint(req, inverter, gcfg, teacher, tcfg, sched,
                                seed=seed, case_index=case.case_id)
    else:
        res = ddim_inversion_inpaint(
            req, teacher, tcfg, sched,
            with_reblend=(req.init_mode == "ddim_invert_reblend"),
            seed=seed, invert_steps=invert_steps, case_index=case.case_id,
        )
    elapsed = (time.perf_counter() - t0) * 1000.0
    trace = background_x0_trace(res.trace, case.gt, req.mask.M)
    align = 0
    if probe is not None:
        align = int(probe_predict(res.output[None], probe)[0] == req.class_id)
    rep = CaseReport(case_id=case.case_id, init_mode=req.init_mode,
                     steps=req.n_steps, bg_trace=trace,
                     bg_mse_final=trace[-1], align=align,
                     latency_ms=round(elapsed, 3) if timing else None)
    return rep, res


def run_eval(cases, teacher, tcfg, sched, seed: int, inverter=None, gcfg=None,
             probe=None, timing: bool = False):
    reports = []
    for case in cases:
        rep, _ = run_case(case, teacher, tcfg, sched, seed, inverter=inverter,
                          gcfg=gcfg, probe=probe, timing=timing)
        reports.append(rep)
    return reports


def mean_trace(reports) -> np.ndarray:
    return np.mean([r.bg_trace for r in reports], axis=0)


def trace_rows(reports) -> list[dict]:
    rows = []
    for r in reports:
        for i, v in enumerate(r.bg_trace):
            rows.append({"case_id": r.case_id, "step_index": i,
                         "bg_mse": repr(v)})
    return rows


# -- component ablation ------------------------------------------------

ABLATION_LADDER = [
    ("recons_only", LossWeights(lambda_reg=0.0, lambda_adv=0.0), False),
    ("plus_reblend", LossWeights(lambda_reg=0.0, lambda_adv=0.0), True),
    ("plus_gaussreg", LossWeights(lambda_reg=0.5, lambda_adv=0.0), True),
    ("plus_adversarial", LossWeights(lambda_reg=0.5, lambda_adv=0.5), True),
]


def blend_jsd(inverter: dict, gcfg: N.BackboneConfig, generator: dict,
              tc: TrainConfig, use_reblend: bool, n_batches: int = 8,
              bins: int = 16) -> float:
    """JSD-to-Gaussian of the blended inverted latent on fresh triplets."""
    from .pipelines import _mask_batch

    samples = []
    for i in range(n_batches):
        step = 10_000 + i  # away from any training step index
        eps = _sstream(tc.seed, "i_noise", step).normal(
            (tc.batch, gcfg.in_channels, tc.resolution, tc.resolution)
        )
        classes = _sstream(tc.seed, "i_class", step).integers(
            0, gcfg.n_classes, shape=(tc.batch,)
        )
        with T.no_grad():
            z0 = N.generator_forward(generator, gcfg, eps, classes)
            M, m = _mask_batch(tc, tc.resolution, step)
            z_hat = N.inverter_forward(inverter, gcfg, z0.data * (1.0 - M),
                                       classes)
            if use_reblend:
                ep = _sstream(tc.seed, "i_reblend", step).normal(z0.shape)
                z_hat = reblend(z_hat, T.Tensor(ep), m)
        samples.append(z_hat.data.ravel())
    return gauss_diagnostics(np.concatenate(samples), bins=bins).jsd


def ablation_report(tc: TrainConfig, generator: dict, teacher: dict,
                    gcfg: N.BackboneConfig, tcfg: N.BackboneConfig,
                    disc_cfg: N.DiscConfig, sched: NoiseSchedule,
                    spec: SynthSpec, n_cases: int = 32, n_steps: int = 4,
                    probe=None, log_factory=None) -> list[dict]:
    """Train the inversion network once per ladder row and score each row.

    Rows go baseline -> +Re-Blending -> +moment regularization ->
    +adversarial, mirroring the component build-up. Returns ablation.csv rows.
    """
    rows = []
    for name, weights, use_reblend in ABLATION_LADDER:
        row_tc = TrainConfig(
            batch=tc.batch, steps=tc.steps, resolution=tc.resolution,
            lr=tc.lr, disc_lr=tc.disc_lr, weights=weights, seed=tc.seed,
            ckpt_every=tc.ckpt_every, log_every=tc.log_every,
            mask_coverage=tc.mask_coverage, mask_family=tc.mask_family,
            use_reblend=use_reblend,
        )
        log = log_factory(name) if log_factory else None
        inverter, _ = train_inverter(row_tc, generator, teacher, gcfg, tcfg,
                                     disc_cfg, sched, log=log)
        cases = make_cases(spec, n_cases, tc.seed, n_steps,
                           init_mode="inverfill")
        reports = run_eval(cases, teacher, tcfg, sched, tc.seed,
                           inverter=inverter, gcfg=gcfg, probe=probe)
        jsd = blend_jsd(inverter, gcfg, generator, row_tc, use_reblend)
        align = (float(np.mean([r.align for r in reports]))
                 if probe is not None else "")
        rows.append({"config_name": name,
                     "bg_mse_final": repr(float(np.mean(
                         [r.bg_mse_final for r in reports]))),
                     "jsd_blend": repr(jsd),
                     "align": align})
    return rows
