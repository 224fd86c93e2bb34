"""Command-line front door tying the pipeline together.

Subcommands: gen-data, train-flow, distill, post-train, sample, inpaint,
eval, schedule, codec, inspect. Runs are deterministic given --seed; any
rejected precondition exits non-zero with a diagnostic naming the violated
contract. Training subcommands stream line-oriented key=value metrics and
write an effective-config snapshot next to their outputs.
"""

from __future__ import annotations

import argparse
import sys
import time

import numpy as np

from . import adversarial, config as cfgmod, core, dit, distill, evaluation, flow, sampler, schedules, synth, trb
from .checkpoint import load_checkpoint, save_checkpoint


def _rng(seed):
    return np.random.default_rng(seed)


def _metrics_line(m: dict) -> str:
    return " ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in m.items())


def _load_model(path):
    params, meta, ema = load_checkpoint(path)
    if meta.get("kind") != "dit":
        raise ValueError(f"checkpoint {path} is not a model checkpoint (kind={meta.get('kind')})")
    mc = dit.ModelConfig.from_dict(meta["model_config"])
    spec = schedules.ScheduleSpec(**meta["schedule"])
    return params, mc, spec, meta, ema


def _save_model(path, params, mc, spec, stage, ema=None, extra=None):
    meta = {
        "kind": "dit",
        "stage": stage,
        "model_config": mc.to_dict(),
        "schedule": spec.__dict__,
    }
    if extra:
        meta.update(extra)
    save_checkpoint(path, params, meta, ema=ema)


def _inference_params(params, ema, use_ema):
    return ema if (use_ema and ema is not None) else params


# ---------------------------------------------------------------------------
# subcommand handlers
# ---------------------------------------------------------------------------


def cmd_gen_data(args):
    rng = _rng(args.seed)
    records = evaluation.generate_dataset(
        args.out,
        rng,
        args.n,
        channels=args.channels,
        min_frames=args.min_frames,
        max_frames=args.max_frames,
        noise=args.noise,
    )
    print(f"wrote {len(records)} records to {args.out}")
    return 0


def cmd_train_flow(args):
    cfg = cfgmod.load_config(args.config)
    if args.batch_size:
        cfg["train"]["batch_size"] = args.batch_size
    if args.lr:
        cfg["train"]["lr"] = args.lr
    mc = cfgmod.model_config(cfg)
    spec = cfgmod.schedule_spec(cfg)
    dataset = core.read_dataset(args.data)
    rng = _rng(args.seed)
    params = dit.init_params(mc, rng)
    trainer = flow.FlowTrainer(
        params,
        mc,
        spec,
        dataset,
        rng,
        batch_size=cfg["train"]["batch_size"],
        lr=cfg["train"]["lr"],
        silence_mean_seconds=cfg["train"]["silence_mean_seconds"],
        use_ot=cfg["train"]["use_ot"],
        cfg_drop_p=cfg["train"]["cfg_drop_p"],
    )
    for step in range(args.steps):
        m = trainer.step()
        if (step + 1) % args.log_every == 0 or step == 0:
            print(_metrics_line(m))
    _save_model(args.out, trainer.params, mc, spec, "flow", ema=trainer.ema.shadow)
    cfgmod.write_effective_config(args.out, cfg)
    print(f"saved flow checkpoint to {args.out}")
    return 0


def cmd_distill(args):
    params, mc, spec, meta, ema = _load_model(args.teacher)
    if meta.get("stage") not in ("flow",):
        print(f"note: teacher stage is {meta.get('stage')!r}, expected 'flow'", file=sys.stderr)
    teacher = _inference_params(params, ema, True)
    student = {k: v.copy() for k, v in teacher.items()}
    dataset = core.read_dataset(args.data) if args.data else None
    rng = _rng(args.seed)
    trainer = distill.DistillTrainer(
        teacher,
        student,
        mc,
        spec,
        rng,
        dataset=dataset,
        batch_size=args.batch_size,
        solver_steps=args.solver_steps,
        cfg_scale=args.cfg,
        refresh_every=args.refresh_every,
        lr=args.lr,
    )
    for step in range(args.steps):
        m = trainer.step()
        if (step + 1) % args.log_every == 0 or step == 0:
            print(_metrics_line(m))
    _save_model(args.out, trainer.student, mc, spec, "distilled")
    cfgmod.write_effective_config(args.out, {"distill": vars(args)})
    print(f"saved distilled checkpoint to {args.out}")
    return 0


def cmd_post_train(args):
    gparams, mc, spec, gmeta, gema = _load_model(args.gen)
    if gmeta.get("stage") != "distilled" and not args.allow_stage_mismatch:
        raise ValueError(
            f"post-train: generator checkpoint stage is {gmeta.get('stage')!r}, expected "
            "'distilled' (pass --allow-stage-mismatch to override)"
        )
    dparams, dmc, _, _, dema = _load_model(args.disc_init)
    if dmc.to_dict() != mc.to_dict():
        raise ValueError("post-train: generator/discriminator model configs differ")
    rng = _rng(args.seed)
    disc = adversarial.init_discriminator(
        _inference_params(dparams, dema, True), mc, rng, tap_layer=args.tap_layer
    )
    dataset = core.read_dataset(args.data)
    trainer = adversarial.PostTrainer(
        gparams,
        disc,
        mc,
        spec,
        dataset,
        rng,
        batch_size=args.batch_size,
        gen_lr=args.gen_lr,
        disc_lr=args.disc_lr,
        clap_weight=args.clap_weight,
    )
    for step in range(args.steps):
        m = trainer.step()
        if (step + 1) % args.log_every == 0 or step == 0:
            print(_metrics_line(m))
    _save_model(args.out, trainer.gen, mc, spec, "post-trained", ema=trainer.ema.shadow)
    cfgmod.write_effective_config(args.out, {"post_train": vars(args)})
    if args.disc_out:
        save_checkpoint(
            args.disc_out,
            trainer.disc.params,
            {
                "kind": "dit",
                "stage": "discriminator",
                "model_config": mc.to_dict(),
                "schedule": spec.__dict__,
                "tap_layer": trainer.disc.tap_layer,
            },
        )
    print(f"saved post-trained checkpoint to {args.out}")
    return 0


def cmd_sample(args):
    params, mc, spec, meta, ema = _load_model(args.ckpt)
    weights = _inference_params(params, ema, not args.no_ema)
    tokens = synth.encode_prompt(args.prompt)
    rng = _rng(args.seed)
    t0 = time.perf_counter()
    seq = sampler.ping_pong_sample(weights, mc, spec, tokens, args.seconds, rng, n_steps=args.steps)
    dt = time.perf_counter() - t0
    core.write_dataset(args.out, [(tokens, seq.frames)])
    cfgmod.write_effective_config(args.out, {"sample": vars(args)})
    print(f"sampled {seq.length} frames ({args.seconds}s requested) in {dt:.2f}s -> {args.out}")
    return 0


def parse_mask_spec(spec_str: str, length: int, frame_rate: float) -> np.ndarray:
    """`causal:<prefix-seconds>` or comma list of keep/gen second-ranges,
    e.g. ``keep:0-2,gen:2-5``; unlisted frames default to keep."""
    if spec_str.startswith("causal:"):
        prefix = float(spec_str.split(":", 1)[1])
        n = int(round(prefix * frame_rate))
        if not 0 < n < length:
            raise ValueError("inpaint: causal prefix must lie strictly inside the reference")
        mask = np.zeros(length, dtype=bool)
        mask[:n] = True
        return mask
    mask = np.ones(length, dtype=bool)
    for part in spec_str.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            kind, rng_s = part.split(":")
            start_s, end_s = rng_s.split("-")
            start = int(round(float(start_s) * frame_rate))
            end = int(round(float(end_s) * frame_rate))
        except Exception as exc:
            raise ValueError(f"inpaint: malformed mask segment {part!r}") from exc
        if kind not in ("keep", "gen"):
            raise ValueError(f"inpaint: mask segment kind must be keep|gen, got {kind!r}")
        start = max(0, start)
        end = min(length, end)
        mask[start:end] = kind == "keep"
    return mask


def cmd_inpaint(args):
    params, mc, spec, meta, ema = _load_model(args.ckpt)
    weights = _inference_params(params, ema, not args.no_ema)
    records = core.read_dataset(args.ref)
    if not records:
        raise ValueError("inpaint: reference latent file has no records")
    ref_tokens, frames = records[0]
    ref = core.LatentSequence(frames, mc.frame_rate)
    mask = parse_mask_spec(args.mask, ref.length, mc.frame_rate)
    tokens = synth.encode_prompt(args.prompt) if args.prompt else list(ref_tokens)
    rng = _rng(args.seed)
    seq = sampler.inpaint_sample(weights, mc, spec, ref, mask, tokens, rng, n_steps=args.steps)
    core.write_dataset(args.out, [(tokens, seq.frames)])
    cfgmod.write_effective_config(args.out, {"inpaint": vars(args)})
    print(f"inpainted {int((~mask).sum())} of {ref.length} frames -> {args.out}")
    return 0


def cmd_eval(args):
    params, mc, spec, meta, ema = _load_model(args.ckpt)
    weights = _inference_params(params, ema, not args.no_ema)
    records = core.read_dataset(args.data)
    if len(records) < args.n:
        raise ValueError(f"eval: dataset has {len(records)} records, need {args.n}")
    rng = _rng(args.seed)
    subset = records[: args.n]
    prompts = [toks for toks, _ in subset]
    durations = [frames.shape[1] / mc.frame_rate for _, frames in subset]
    mode = args.sampler
    if mode == "auto":
        mode = "pingpong" if meta.get("stage") == "post-trained" else "euler"
    t0 = time.perf_counter()
    if mode == "pingpong":
        seqs = sampler.ping_pong_sample_batch(
            weights, mc, spec, prompts, durations, rng, n_steps=args.steps
        )
    else:
        seqs = sampler.ode_sample_batch(
            weights, mc, spec, prompts, durations, rng, n_steps=args.steps, cfg_scale=args.cfg_scale
        )
    dt = time.perf_counter() - t0
    ref_embs = evaluation.embed_records(subset)
    gen_embs = evaluation.embed_sequences(seqs)
    fd = evaluation.frechet_distance(gen_embs, ref_embs)
    align = evaluation.mean_alignment(prompts, seqs)
    lines = [
        f"frechet_distance={fd:.6f}",
        f"mean_alignment={align:.6f}",
        f"sampler={mode}",
        f"steps={args.steps}",
        f"n={args.n}",
        f"sampling_seconds={dt:.3f}",
    ]
    report = "\n".join(lines) + "\n"
    if args.report:
        with open(args.report, "w") as f:
            f.write(report)
    print(report, end="")
    return 0


def cmd_schedule(args):
    if args.action != "dump":
        raise ValueError(f"schedule: unknown action {args.action!r}")
    spec = schedules.ScheduleSpec(
        lambda_min=args.lambda_min, lambda_max=args.lambda_max, steps=args.steps
    )
    ts = schedules.inference_schedule(spec)
    lams = np.linspace(spec.lambda_min, spec.lambda_max, spec.steps + 1)
    print(f"{'i':>3} {'lambda':>10} {'t':>12}")
    for i, (lam, t) in enumerate(zip(lams, ts)):
        print(f"{i:>3} {lam:>10.4f} {t:>12.8f}")
    return 0


def cmd_codec(args):
    if args.action == "init":
        tc = trb.TrbConfig(
            audio_channels=args.channels,
            patch_size=args.patch_size,
            resample_factor=args.resample_factor,
            embed_dim=args.embed_dim,
            n_layers=args.layers,
            latent_dim=args.latent_dim,
        )
        params = trb.init_codec(tc, _rng(args.seed))
        save_checkpoint(args.out, params, {"kind": "codec", "stage": "codec", "trb_config": tc.to_dict()})
        print(f"initialized codec checkpoint {args.out}")
        return 0
    params, meta, _ = load_checkpoint(args.ckpt)
    if meta.get("kind") != "codec":
        raise ValueError(f"codec: {args.ckpt} is not a codec checkpoint")
    tc = trb.TrbConfig.from_dict(meta["trb_config"])
    if args.action == "encode":
        raw = np.fromfile(args.infile, dtype="<f4")
        if raw.size % args.channels:
            raise ValueError("codec encode: sample count not divisible by channel count")
        signal = raw.reshape(args.channels, -1)
        latent, _ = trb.encode(params, tc, signal)
        core.write_dataset(args.out, [([], latent)])
        print(f"encoded {signal.shape[1]} samples -> {latent.shape[1]} latent frames")
        return 0
    if args.action == "decode":
        records = core.read_dataset(args.infile)
        latent = records[0][1]
        signal, _ = trb.decode(params, tc, latent)
        np.asarray(signal, dtype="<f4").tofile(args.out)
        print(f"decoded {latent.shape[1]} latent frames -> {signal.shape[1]} samples")
        return 0
    if args.action == "train":
        rng = _rng(args.seed)
        opt = adversarial.Adam(lr=args.lr)
        n_samples = tc.patch_size * tc.resample_factor * 4
        loss = float("nan")
        for step in range(args.steps):
            tt = np.arange(n_samples) / 44100.0
            freq = rng.uniform(80.0, 2000.0)
            sig = np.stack(
                [np.sin(2 * np.pi * freq * tt + ph) for ph in rng.uniform(0, np.pi, tc.audio_channels)]
            ).astype(np.float32)
            loss = trb.reconstruction_step(params, tc, sig, opt)
            if (step + 1) % args.log_every == 0 or step == 0:
                print(f"step={step + 1} loss={loss:.6g}")
        save_checkpoint(args.ckpt, params, meta)
        print(f"updated codec checkpoint {args.ckpt}")
        return 0
    raise ValueError(f"codec: unknown action {args.action!r}")


def cmd_inspect(args):
    params, meta, ema = load_checkpoint(args.ckpt)
    n = dit.count_params(params)
    print(f"kind: {meta.get('kind')}")
    print(f"stage: {meta.get('stage')}")
    print(f"parameters: {n}")
    print(f"ema: {meta.get('ema', False)}")
    for key in ("model_config", "trb_config", "schedule"):
        if key in meta:
            print(f"{key}:")
            for k, v in meta[key].items():
                print(f"  {k}: {v}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="latentflow", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset file")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=4096)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--min-frames", type=int, default=16)
    p.add_argument("--max-frames", type=int, default=256)
    p.add_argument("--noise", type=float, default=0.05)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-flow", help="flow-matching pre-training")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=5000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--log-every", type=int, default=100)
    p.set_defaults(func=cmd_train_flow)

    p = sub.add_parser("distill", help="one-step distillation warmup")
    p.add_argument("--teacher", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--refresh-every", type=int, default=4)
    p.add_argument("--cfg", type=float, default=5.0)
    p.add_argument("--solver-steps", type=int, default=15)
    p.add_argument("--data")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--log-every", type=int, default=50)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("post-train", help="adversarial post-training")
    p.add_argument("--gen", required=True)
    p.add_argument("--disc-init", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--gen-lr", type=float, default=5e-5)
    p.add_argument("--disc-lr", type=float, default=1e-4)
    p.add_argument("--clap-weight", type=float, default=1.0)
    p.add_argument("--tap-layer", type=int)
    p.add_argument("--disc-out")
    p.add_argument("--allow-stage-mismatch", action="store_true")
    p.add_argument("--log-every", type=int, default=50)
    p.set_defaults(func=cmd_post_train)

    p = sub.add_parser("sample", help="ping-pong sampling")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--seconds", type=float, required=True)
    p.add_argument("--steps", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--no-ema", action="store_true")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("inpaint", help="regenerate masked regions of a reference")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--prompt")
    p.add_argument("--steps", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--no-ema", action="store_true")
    p.set_defaults(func=cmd_inpaint)

    p = sub.add_parser("eval", help="Frechet distance and prompt alignment")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--n", type=int, default=512)
    p.add_argument("--steps", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report")
    p.add_argument("--sampler", choices=("auto", "pingpong", "euler"), default="auto")
    p.add_argument("--cfg-scale", type=float, default=1.0)
    p.add_argument("--no-ema", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("schedule", help="inspect the inference grid")
    p.add_argument("action", choices=("dump",))
    p.add_argument("--steps", type=int, default=8)
    p.add_argument("--lambda-min", type=float, default=-6.2)
    p.add_argument("--lambda-max", type=float, default=2.0)
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("codec", help="structural autoencoder")
    p.add_argument("action", choices=("init", "encode", "decode", "train"))
    p.add_argument("--ckpt")
    p.add_argument("--out")
    p.add_argument("--in", dest="infile")
    p.add_argument("--channels", type=int, default=2)
    p.add_argument("--patch-size", type=int, default=256)
    p.add_argument("--resample-factor", type=int, default=16)
    p.add_argument("--embed-dim", type=int, default=64)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--latent-dim", type=int, default=8)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log-every", type=int, default=10)
    p.set_defaults(func=cmd_codec)

    p = sub.add_parser("inspect", help="print checkpoint config, stage, and size")
    p.add_argument("ckpt")
    p.set_defaults(func=cmd_inspect)

    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
