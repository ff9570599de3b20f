"""Command-line entry point.

Subcommands cover the three training stages, inpainting, evaluation, and
the component ablation. Each command reads one config file (optionally with
--set overrides), writes its artifacts into the output directory, and exits
0 only when every requested artifact landed on disk. Output images are
binary PGM (P5) with pixel values mapped from [-1, 1] to [0, 255].
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import __version__
from . import nets as N
from .config import RunConfig, default_config_text, load_config
from .evalmetrics import (
    ABLATION_FIELDS,
    METRICS_FIELDS,
    TRACE_FIELDS,
    ablation_report,
    make_cases,
    mean_trace,
    run_case,
    train_probe,
    trace_rows,
    write_csv,
)
from .losses import LossLog
from .masks import save_mask
from .pipelines import train_inverter, train_teacher, distill_generator
from .rng import RngStream

INIT_FLAG_TO_MODE = {
    "random": "random",
    "inverfill": "inverfill",
    "ddiminv": "ddim_invert",
    "ddiminv-reblend": "ddim_invert_reblend",
}


class CommandError(RuntimeError):
    pass


def _out_dir(args) -> str:
    d = args.out_dir or os.environ.get("INVPAINT_OUT", "runs")
    os.makedirs(d, exist_ok=True)
    return d


def _stamp(rc: RunConfig) -> str:
    seed = rc.get("train", "seed")
    return f"config_hash={rc.hash_hex()} seed={seed} version={__version__}"


def save_pgm(path, image: np.ndarray, comment: str = "") -> None:
    """Write one channel as binary PGM, mapping [-1, 1] to [0, 255]."""
    if image.ndim == 3:
        image = image[0]
    h, w = image.shape
    px = np.clip(np.round((image + 1.0) * 127.5), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"P5\n")
        if comment:
            f.write(f"# {comment}\n".encode())
        f.write(f"{w} {h}\n255\n".encode())
        f.write(px.tobytes())


def load_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if not raw.startswith(b"P5"):
        raise ValueError("not a binary PGM file")
    parts, pos = [], 2
    while len(parts) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end : end + 1].isspace():
            end += 1
        parts.append(int(raw[pos:end]))
        pos = end
    w, h, maxval = parts
    px = np.frombuffer(raw[pos + 1 :], dtype=np.uint8, count=w * h)
    return (px.reshape(h, w).astype(np.float32) / (maxval / 2.0)) - 1.0


def _bundle_path(out_dir: str, stage: str) -> str:
    return os.path.join(out_dir, f"{stage}.ckpt")


def _load_stage(out_dir: str, stage: str, needed_by: str,
                produced_by: str) -> N.ModelBundle:
    path = _bundle_path(out_dir, stage)
    if not os.path.exists(path):
        raise CommandError(
            f"{needed_by} needs {path}; run `invpaint {produced_by}` first"
        )
    return N.load_checkpoint(path)


def _new_bundle(rc: RunConfig) -> N.ModelBundle:
    return N.ModelBundle(
        teacher_cfg=rc.teacher_cfg(), gen_cfg=rc.gen_cfg(),
        disc_cfg=rc.disc_cfg(), sched_T=rc.get("schedule", "timesteps"),
        beta_start=rc.get("schedule", "beta_start"),
        beta_end=rc.get("schedule", "beta_end"),
    )


def _log(rc: RunConfig, out_dir: str, name: str) -> LossLog:
    return LossLog(os.path.join(out_dir, name),
                   timing=rc.get("eval", "timing"),
                   header_comment=_stamp(rc))


# -- training commands -------------------------------------------------


def cmd_train_teacher(rc: RunConfig, args) -> int:
    out = _out_dir(args)
    tc = rc.train_cfg("teacher")
    bundle = _new_bundle(rc)
    start = 0
    if args.resume and os.path.exists(_bundle_path(out, "teacher")):
        bundle = _load_stage(out, "teacher", "resume", "train-teacher")
        start = bundle.step
    log = _log(rc, out, "teacher_log.csv")
    params = train_teacher(tc, rc.synth_spec(), bundle.teacher_cfg,
                           rc.schedule(), log=log, params=bundle.teacher,
                           start_step=start)
    bundle.teacher, bundle.step = params, tc.steps
    N.save_checkpoint(bundle, _bundle_path(out, "teacher"))
    print(f"wrote {_bundle_path(out, 'teacher')}")
    return 0


def cmd_distill(rc: RunConfig, args) -> int:
    out = _out_dir(args)
    tc = rc.train_cfg("distill")
    bundle = _load_stage(out, "teacher", "distill", "train-teacher")
    start, gen = 0, None
    if args.resume and os.path.exists(_bundle_path(out, "generator")):
        bundle = _load_stage(out, "generator", "resume", "distill")
        start, gen = bundle.step, bundle.generator
    log = _log(rc, out, "distill_log.csv")
    gen = distill_generator(tc, bundle.teacher, bundle.teacher_cfg,
                            bundle.gen_cfg, rc.schedule(), log=log,
                            params=gen, start_step=start)
    bundle.generator, bundle.step = gen, tc.steps
    N.save_checkpoint(bundle, _bundle_path(out, "generator"))
    print(f"wrote {_bundle_path(out, 'generator')}")
    return 0


def cmd_train_inverter(rc: RunConfig, args) -> int:
    out = _out_dir(args)
    tc = rc.train_cfg("inverter")
    bundle = _load_stage(out, "generator", "train-inverter", "distill")
    start, inv, disc = 0, None, None
    if args.resume and os.path.exists(_bundle_path(out, "inverter")):
        bundle = _load_stage(out, "inverter", "resume", "train-inverter")
        start, inv, disc = bundle.step, bundle.inverter, bundle.disc
    log = _log(rc, out, "inverter_log.csv")
    inv, disc = train_inverter(tc, bundle.generator, bundle.teacher,
                               bundle.gen_cfg, bundle.teacher_cfg,
                               bundle.disc_cfg, rc.schedule(), log=log,
                               inverter=inv, disc=disc, start_step=start)
    bundle.inverter, bundle.disc, bundle.step = inv, disc, tc.steps
    N.save_checkpoint(bundle, _bundle_path(out, "inverter"))
    print(f"wrote {_bundle_path(out, 'inverter')}")
    return 0


# -- inference commands ------------------------------------------------


def _cases_and_models(rc: RunConfig, args, out: str, init_mode: str):
    seed = args.seed if args.seed is not None else rc.get("train", "seed")
    inverter, gcfg = None, None
    if init_mode == "inverfill":
        b = _load_stage(out, "inverter", "inpaint --init inverfill",
                        "train-inverter")
        inverter, gcfg = b.inverter, b.gen_cfg
        teacher, tcfg = b.teacher, b.teacher_cfg
    else:
        b = _load_stage(out, "teacher", "inpaint", "train-teacher")
        teacher, tcfg = b.teacher, b.teacher_cfg
    cases = make_cases(rc.synth_spec(), args.cases, seed, args.steps,
                       init_mode=init_mode)
    return cases, teacher, tcfg, inverter, gcfg, seed


def cmd_inpaint(rc: RunConfig, args) -> int:
    out = _out_dir(args)
    init_mode = INIT_FLAG_TO_MODE[args.init]
    cases, teacher, tcfg, inverter, gcfg, seed = _cases_and_models(
        rc, args, out, init_mode
    )
    sched = rc.schedule()
    stamp = _stamp(rc)
    reports = []
    for case in cases:
        rep, res = run_case(case, teacher, tcfg, sched, seed,
                            inverter=inverter, gcfg=gcfg,
                            timing=rc.get("eval", "timing"),
                            invert_steps=rc.get("eval", "invert_steps"))
        reports.append(rep)
        tag = f"case_{case.case_id:03d}"
        save_pgm(os.path.join(out, f"{tag}_input.pgm"),
                 case.request.image_masked, stamp)
        save_mask(os.path.join(out, f"{tag}_mask.msk"), case.request.mask.M)
        save_pgm(os.path.join(out, f"{tag}_output.pgm"), res.output, stamp)
    write_csv(os.path.join(out, "metrics.csv"), METRICS_FIELDS,
              [r.row() for r in reports], header_comment=stamp)
    write_csv(os.path.join(out, "trace.csv"), TRACE_FIELDS,
              trace_rows(reports), header_comment=stamp)
    print(f"wrote {len(cases)} cases to {out}")
    return 0


def cmd_eval(rc: RunConfig, args) -> int:
    out = _out_dir(args)
    bundle = _load_stage(out, "inverter", "eval", "train-inverter")
    sched = rc.schedule()
    seed = args.seed if args.seed is not None else rc.get("train", "seed")
    spec = rc.synth_spec()
    probe, probe_acc = train_probe(spec, seed=seed)
    stamp = _stamp(rc)
    rows, all_tr, lines = [], [], [f"probe held-out accuracy {probe_acc:.3f}"]
    for init_mode in ("random", "inverfill"):
        cases = make_cases(spec, rc.get("eval", "n_cases"), seed,
                           args.steps, init_mode=init_mode)
        reports = []
        for case in cases:
            rep, _ = run_case(case, bundle.teacher, bundle.teacher_cfg, sched,
                              seed, inverter=bundle.inverter,
                              gcfg=bundle.gen_cfg, probe=probe,
                              timing=rc.get("eval", "timing"))
            reports.append(rep)
        rows += [r.row() for r in reports]
        all_tr += trace_rows(reports)
        mt = mean_trace(reports)
        align = float(np.mean([r.align for r in reports]))
        lines.append(
            f"{init_mode}: mean bg_mse_final "
            f"{float(np.mean([r.bg_mse_final for r in reports])):.6f} "
            f"align {align:.3f} trace {np.array2string(mt, precision=5)}"
        )
    write_csv(os.path.join(out, "metrics.csv"), METRICS_FIELDS, rows,
              header_comment=stamp)
    write_csv(os.path.join(out, "trace.csv"), TRACE_FIELDS, all_tr,
              header_comment=stamp)
    with open(os.path.join(out, "summary.txt"), "w") as f:
        f.write(f"# {stamp}\n" + "\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


def cmd_ablate(rc: RunConfig, args) -> int:
    out = _out_dir(args)
    bundle = _load_stage(out, "generator", "ablate", "distill")
    tc = rc.train_cfg("inverter")
    rows = ablation_report(
        tc, bundle.generator, bundle.teacher, bundle.gen_cfg,
        bundle.teacher_cfg, bundle.disc_cfg, rc.schedule(), rc.synth_spec(),
        n_cases=rc.get("eval", "n_cases"), n_steps=args.steps,
        log_factory=lambda name: _log(rc, out, f"ablation_{name}_log.csv"),
    )
    stamp = _stamp(rc)
    write_csv(os.path.join(out, "ablation.csv"), ABLATION_FIELDS, rows,
              header_comment=stamp)
    lines = [f"# {stamp}"]
    prev = None
    for r in rows:
        cur = float(r["bg_mse_final"])
        arrow = "" if prev is None else (" v" if cur <= prev else " ^ (worse)")
        lines.append(f"{r['config_name']:>18}: bg_mse {cur:.6f}"
                     f" jsd {float(r['jsd_blend']):.4f}{arrow}")
        prev = cur
    with open(os.path.join(out, "summary.txt"), "w") as f:
        f.write("\n".join(lines) + "\n")
    print("\n".join(lines[1:]))
    return 0


def cmd_init_config(rc: RunConfig, args) -> int:
    text = default_config_text()
    if args.path == "-":
        sys.stdout.write(text)
    else:
        with open(args.path, "w") as f:
            f.write(text)
        print(f"wrote {args.path}")
    return 0


# -- argument parsing --------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="invpaint",
        description="few-step diffusion inpainting with learned inversion",
    )
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="config file (defaults when omitted)")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="SECTION.KEY=VALUE",
                       help="override one config value")
        p.add_argument("--out-dir", default=None,
                       help="artifact directory (or env INVPAINT_OUT)")

    for name, fn in (("train-teacher", cmd_train_teacher),
                     ("distill", cmd_distill),
                     ("train-inverter", cmd_train_inverter)):
        p = sub.add_parser(name)
        common(p)
        p.add_argument("--resume", action="store_true",
                       help="continue from the stage checkpoint if present")
        p.set_defaults(fn=fn)

    p = sub.add_parser("inpaint")
    common(p)
    p.add_argument("--init", choices=sorted(INIT_FLAG_TO_MODE), default="random")
    p.add_argument("--steps", type=int, default=4)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--cases", type=int, default=8)
    p.set_defaults(fn=cmd_inpaint)

    p = sub.add_parser("eval")
    common(p)
    p.add_argument("--steps", type=int, default=4)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate")
    common(p)
    p.add_argument("--steps", type=int, default=4)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("init-config")
    common(p)
    p.add_argument("path", help="where to write the default config ('-' = stdout)")
    p.set_defaults(fn=cmd_init_config)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        rc = load_config(args.config, args.overrides)
        return args.fn(rc, args)
    except (ValueError, CommandError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
