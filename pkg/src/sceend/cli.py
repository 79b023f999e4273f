"""Command-line entry points: simulate, train, infer, score, count.

Exit codes: 0 success, 1 runtime failure, 2 usage error.  Machine-readable
output goes to stdout as tab-separated lines; human summaries go to stderr.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import decode, fileio, losses, metrics, sim
from . import model as M
from . import numcore as nc

log = logging.getLogger("sceend")


class UsageError(Exception):
    pass


# --------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    params: M.ModelParams
    optim: nc.OptimState | None = None
    meta: dict[str, str] = field(default_factory=dict)

    @property
    def config(self) -> M.ModelConfig:
        return self.params.config


def checkpoint_save(path, params: M.ModelParams, optim: nc.OptimState | None = None,
                    meta: dict | None = None) -> None:
    header = {f"model.{k}": v for k, v in params.config.as_dict().items()}
    arrays = dict(params.arrays)
    if optim is not None:
        header["optim.step"] = optim.step
        header["optim.warmup_steps"] = optim.warmup_steps
        for k in params.arrays:
            arrays[f"adam.m/{k}"] = optim.m[k]
            arrays[f"adam.v/{k}"] = optim.v[k]
    header.update(meta or {})
    fileio.save_checkpoint(path, arrays, header)


def checkpoint_load(path) -> Checkpoint:
    arrays, meta = fileio.load_checkpoint(path)
    cfg = M.ModelConfig.from_dict({k[6:]: v for k, v in meta.items() if k.startswith("model.")})
    shapes = M.param_shapes(cfg)
    params = {}
    for name, shape in shapes.items():
        if name not in arrays:
            raise fileio.FormatError(f"{path}: missing parameter {name!r}")
        if arrays[name].shape != shape:
            raise fileio.FormatError(f"{path}: {name!r} has shape {arrays[name].shape}, want {shape}")
        params[name] = arrays[name]
    optim = None
    if "optim.step" in meta:
        optim = nc.OptimState(
            m={k: arrays[f"adam.m/{k}"] for k in shapes},
            v={k: arrays[f"adam.v/{k}"] for k in shapes},
            step=int(meta["optim.step"]),
            warmup_steps=int(meta["optim.warmup_steps"]),
        )
    rest = {k: v for k, v in meta.items() if not k.startswith(("model.", "optim."))}
    return Checkpoint(M.ModelParams(cfg, params), optim, rest)


# ---------------------------------------------------------------- run config


@dataclass
class RunConfig:
    model: M.ModelConfig
    loss: str = "sc-two-stage-pit"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    warmup: int = 0
    clip_norm: float = 0.0
    epochs: int = 10
    batch: int = 1
    seed: int = 0
    max_steps: int = 0  # 0 = no cap

    def hyper(self) -> losses.TrainHyper:
        return losses.TrainHyper(lr=self.lr, batch_size=self.batch, beta1=self.beta1,
                                 beta2=self.beta2, eps=self.eps, seed=self.seed,
                                 s_max=self.model.max_speakers, threshold=self.model.threshold,
                                 clip_norm=self.clip_norm or None)

    def as_meta(self) -> dict:
        return {f"run.{f.name}": getattr(self, f.name) for f in fields(self) if f.name != "model"}

    @staticmethod
    def apply(base: RunConfig, kv: dict[str, str]) -> RunConfig:
        """Overlay ``run.*`` / ``model.*`` (or bare) keys from a config file."""
        model_kw, run_kw = {}, {}
        run_types = {f.name: f.type for f in fields(RunConfig)}
        model_names = {f.name for f in fields(M.ModelConfig)}
        for key, value in kv.items():
            name = key.split(".", 1)[1] if key.startswith(("run.", "model.")) else key
            if key.startswith("model.") or (name in model_names and name not in run_types):
                model_kw[name] = value
            elif name in run_types and name != "model":
                t = run_types[name]
                run_kw[name] = value if t == "str" else (float(value) if t == "float" else int(value))
            elif name == "profile":
                base = replace(base, model=M.PROFILES[value])
            else:
                raise UsageError(f"unknown config key {key!r}")
        model = M.ModelConfig.from_dict({**base.model.as_dict(), **model_kw})
        return replace(base, model=model, **run_kw)


# ---------------------------------------------------------------- commands


def _speaker_range(text: str) -> tuple[int, int]:
    try:
        if "-" in text:
            a, b = text.split("-", 1)
            return int(a), int(b)
        return int(text), int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad speaker range {text!r}") from None


def cmd_simulate(args) -> int:
    lo, hi = args.speakers
    spec = sim.SimSpec(min_speakers=lo, max_speakers=hi, num_frames=args.frames,
                       feat_dim=args.feat_dim, overlap_target=args.overlap,
                       noise_scale=args.noise, frame_shift=args.frame_shift).validate()
    manifest = sim.build_corpus(spec, args.n, args.seed, args.out)
    if args.rttm:
        ref = Path(args.rttm)
        ref.mkdir(parents=True, exist_ok=True)
        for e in manifest.entries:
            labels = fileio.read_labels(manifest.resolve(e.label_path))
            fileio.write_rttm(ref / f"{e.recording_id}.rttm", decode.activity_to_segments(
                labels, spec.frame_shift, recording_id=e.recording_id))
    stats = sim.corpus_stats(manifest)
    sys.stdout.write(stats.render())
    print(f"wrote {len(manifest.entries)} recordings to {args.out}", file=sys.stderr)
    return 0


def _log_epoch(stats: losses.EpochStats) -> None:
    sys.stdout.write(f"{stats.epoch + 1}\t{stats.mean_loss:.6f}\n")
    sys.stdout.flush()


def cmd_train(args) -> int:
    manifest = sim.read_manifest(args.manifest)
    data = manifest.load_all()
    if not data:
        raise ValueError("corpus is empty")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.resume:
        ck = checkpoint_load(args.resume)
        kv = {k[4:]: v for k, v in ck.meta.items() if k.startswith("run.")}
        run = RunConfig.apply(RunConfig(ck.config), kv)
        run = replace(run, epochs=args.epochs if args.epochs is not None else run.epochs)
        params, optim = ck.params, ck.optim
        start = int(ck.meta.get("epoch", 0))
    else:
        run = RunConfig(replace(M.PROFILES[args.profile], feat_dim=manifest.spec.feat_dim))
        if args.config:
            run = RunConfig.apply(run, fileio.parse_kv(Path(args.config).read_text(), args.config))
        overrides = {"loss": args.loss, "lr": args.lr, "batch": args.batch, "epochs": args.epochs,
                     "seed": args.seed, "warmup": args.warmup, "max_steps": args.max_steps}
        run = replace(run, **{k: v for k, v in overrides.items() if v is not None})
        model_over = {"max_speakers": args.s_max, "dropout": args.dropout,
                      "threshold": args.threshold}
        model_over = {k: v for k, v in model_over.items() if v is not None}
        if args.s_max is not None:
            model_over["eend_speakers"] = args.s_max
        run = replace(run, model=replace(run.model, **model_over).validate())
        run = replace(run, loss=losses.canonical_kind(run.loss))
        params = M.init_model(run.model, run.seed)
        optim = nc.adam_init(params.arrays, run.warmup)
        start = 0

    if data[0][0].F != run.model.feat_dim:
        raise M.ConfigError(f"corpus has {data[0][0].F}-dim features, model expects "
                            f"{run.model.feat_dim}")
    hyper = run.hyper()
    for epoch in range(start, run.epochs):
        remaining = run.max_steps - optim.step if run.max_steps else None
        if remaining is not None and remaining <= 0:
            break
        params, optim, stats = losses.train_epoch(params, data, run.loss, optim, hyper,
                                                  epoch=epoch, max_steps=remaining)
        _log_epoch(stats)
        meta = {**run.as_meta(), "epoch": epoch + 1}
        checkpoint_save(out / f"epoch{epoch + 1:04d}.ckpt", params, optim, meta)
        checkpoint_save(out / "last.ckpt", params, optim, meta)
    print(f"trained {run.loss} to step {optim.step}; checkpoint {out / 'last.ckpt'}",
          file=sys.stderr)
    return 0


def _recordings(args) -> list[tuple[str, M.FeatureSequence]]:
    if args.manifest:
        m = sim.read_manifest(args.manifest)
        return [(e.recording_id,
                 M.FeatureSequence(fileio.read_features(m.resolve(e.feature_path)),
                                   m.spec.frame_shift))
                for e in m.entries]
    return [(Path(f).stem, M.FeatureSequence(fileio.read_features(f), args.frame_shift))
            for f in args.features]


def cmd_infer(args) -> int:
    ck = checkpoint_load(args.checkpoint)
    params = ck.params
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    baseline = ck.meta.get("run.loss") == "pit-baseline"
    for rid, x in _recordings(args):
        if x.F != params.config.feat_dim:
            raise M.ConfigError(f"{rid}: features are {x.F}-dim, model expects "
                                f"{params.config.feat_dim}")
        if baseline:
            res = decode.infer_eend(params, x, args.threshold, args.median)
        else:
            res = decode.infer(params, x, args.s_max, args.threshold, args.median)
        segs = decode.activity_to_segments(res.activity, x.frame_shift, args.min_dur, rid)
        fileio.write_rttm(out / f"{rid}.rttm", segs)
        if args.dump_posteriors:
            fileio.write_features(out / f"{rid}.post.scef", res.posteriors)
        sys.stdout.write(f"{rid}\t{decode.count_speakers(res)}\n")
    return 0


def _paired(args) -> tuple[dict, dict, list[str]]:
    ref = fileio.read_rttm(args.ref)
    hyp = fileio.read_rttm(args.hyp)
    missing = sorted(set(ref) ^ set(hyp))
    if missing and not args.allow_partial:
        for rid in missing:
            side = "hypothesis" if rid in ref else "reference"
            print(f"recording {rid} has no {side}", file=sys.stderr)
        raise LookupError(f"{len(missing)} unmatched recording id(s)")
    return ref, hyp, sorted(set(ref) & set(hyp))


def cmd_score(args) -> int:
    ref, hyp, ids = _paired(args)
    total = metrics.DerBreakdown(0.0, 0.0, 0.0, 0.0)
    for rid in ids:
        b = metrics.der(ref[rid], hyp[rid], args.collar, not args.skip_overlap)
        total = total + b
        sys.stdout.write(f"{rid}\t{b.miss:.3f}\t{b.false_alarm:.3f}\t{b.confusion:.3f}\t"
                         f"{b.scored_speech:.3f}\t{100 * b.der:.2f}\n")
    sys.stdout.write(f"ALL\t{total.miss:.3f}\t{total.false_alarm:.3f}\t{total.confusion:.3f}\t"
                     f"{total.scored_speech:.3f}\t{100 * total.der:.2f}\n")
    print(f"DER {100 * total.der:.2f}% over {len(ids)} recording(s), collar {args.collar}s",
          file=sys.stderr)
    return 0


def cmd_count(args) -> int:
    ref, hyp, ids = _paired(args)
    pairs = [(len(ref[r].speakers()), len(hyp[r].speakers())) for r in ids]
    report = metrics.counting_confusion(pairs)
    sys.stdout.write(report.render() + "\n")
    return 0


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sceend", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--speakers", type=_speaker_range, default=(1, 4))
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--overlap", type=float, default=0.3)
    s.add_argument("--frames", type=int, default=500)
    s.add_argument("--feat-dim", type=int, default=16)
    s.add_argument("--noise", type=float, default=0.3)
    s.add_argument("--frame-shift", type=float, default=0.1)
    s.add_argument("--rttm", help="also write reference RTTMs to this directory")
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", help="train a model on a corpus manifest")
    t.add_argument("--manifest", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--profile", choices=sorted(M.PROFILES), default="desk")
    t.add_argument("--config")
    t.add_argument("--loss", choices=sorted(set(losses.LOSS_KINDS) | set(losses.ALIASES)))
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch", type=int)
    t.add_argument("--warmup", type=int)
    t.add_argument("--max-steps", type=int)
    t.add_argument("--s-max", type=int)
    t.add_argument("--dropout", type=float)
    t.add_argument("--threshold", type=float)
    t.add_argument("--resume")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="decode recordings and write RTTM")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--out", required=True)
    src = i.add_mutually_exclusive_group(required=True)
    src.add_argument("--manifest")
    src.add_argument("--features", nargs="+")
    i.add_argument("--frame-shift", type=float, default=0.1)
    i.add_argument("--threshold", type=float, default=0.5)
    i.add_argument("--s-max", type=int)
    i.add_argument("--median", type=int, default=0)
    i.add_argument("--min-dur", type=float, default=0.0)
    i.add_argument("--dump-posteriors", action="store_true")
    i.set_defaults(func=cmd_infer)

    for name, func, helptext in (("score", cmd_score, "diarization error rate"),
                                 ("count", cmd_count, "speaker-counting confusion matrix")):
        c = sub.add_parser(name, help=helptext)
        c.add_argument("--ref", required=True)
        c.add_argument("--hyp", required=True)
        c.add_argument("--allow-partial", action="store_true")
        if name == "score":
            c.add_argument("--collar", type=float, default=0.25)
            c.add_argument("--skip-overlap", action="store_true")
        c.set_defaults(func=func)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "train" and not args.resume and args.seed is None:
            raise UsageError("--seed is required (no wall-clock seeding)")
        return args.func(args)
    except UsageError as exc:
        print(f"sceend {args.command}: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, LookupError, RuntimeError, nc.ShapeError) as exc:
        print(f"sceend {args.command}: error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())
