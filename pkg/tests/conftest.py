"""Shared fixtures: the acceptance-scale models trained once per session.

The acceptance suite needs a real teacher, a distilled one-step generator,
and a trained inversion network at the default seed. Training them takes
on the order of an hour on one core, so they are built once here and
shared across the session.
"""

import numpy as np
import pytest

from invpaint import nets as N
from invpaint.losses import LossWeights
from invpaint.pipelines import (
    TrainConfig,
    distill_generator,
    train_inverter,
    train_teacher,
)
from invpaint.schedule import make_linear_schedule
from invpaint.synth import SynthSpec

ACC_SEED = 0
ACC_T = 1000
TEACHER_CFG = N.BackboneConfig(base_channels=32, emb_width=32, timesteps=ACC_T)
GEN_CFG = N.BackboneConfig(base_channels=6, emb_width=32, timesteps=ACC_T)
DISC_CFG = N.DiscConfig()
SPEC = SynthSpec()


def acc_train_config(stage: str, **kw) -> TrainConfig:
    """Desk-scale training setups for the acceptance runs (seed 0).

    Cosine lr decay plus weight averaging keep the teacher's noise
    predictions accurate near the pure-noise end, which the inversion
    experiments depend on.
    """
    base = {
        "teacher": dict(batch=32, steps=8000, lr=2e-3, lr_final=1e-5,
                        ema_decay=0.999),
        "distill": dict(batch=16, steps=6000, lr=1e-3, lr_final=1e-5,
                        ema_decay=0.999, distill_ddim_steps=8),
        "inverter": dict(batch=16, steps=2000, lr=1e-4, lr_final=1e-6,
                         ema_decay=0.999, disc_lr=1e-5,
                         weights=LossWeights()),
    }[stage]
    base.update(seed=ACC_SEED, **kw)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def acc_models():
    sched = make_linear_schedule(ACC_T)
    teacher = train_teacher(acc_train_config("teacher"), SPEC, TEACHER_CFG,
                            sched)
    gen = distill_generator(acc_train_config("distill"), teacher, TEACHER_CFG,
                            GEN_CFG, sched)
    inverter, disc = train_inverter(acc_train_config("inverter"), gen, teacher,
                                    GEN_CFG, TEACHER_CFG, DISC_CFG, sched)
    return {
        "sched": sched,
        "spec": SPEC,
        "teacher": teacher,
        "teacher_cfg": TEACHER_CFG,
        "generator": gen,
        "gen_cfg": GEN_CFG,
        "inverter": inverter,
        "disc": disc,
        "disc_cfg": DISC_CFG,
        "seed": ACC_SEED,
    }
