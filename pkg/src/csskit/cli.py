"""``csskit`` command line: simulate | segment | train | separate | eval.

Every subcommand is a pure function of the config, the seed and its input
files. Failures print one JSON line prefixed with ``error:`` on stderr and
exit nonzero (2 for invalid usage or config, 1 for runtime failures).
"""
import argparse
import dataclasses
import itertools
import json
import logging
import os
import sys

import numpy as np

from . import recipes
from .config import ConfigError, load_config
from .css import OracleMaskModel, css_separate
from .dsp import si_snr
from .io import CheckpointError, load_checkpoint, save_checkpoint, wav_read, wav_write
from .segment import cts, filter_by_quality, fws, read_annotation, with_scores, write_annotation
from .train import LongformPool, evaluate, train_stage1, train_stage2, write_curve
from .vararray import VarArray, choose_channels

log = logging.getLogger("csskit")


class UsageError(Exception):
    def __init__(self, field, reason):
        self.field = field
        self.reason = reason
        super().__init__(f"{field}: {reason}")


def _fail(kind, problems, code):
    rec = {"error": kind, "problems": [{"field": f, "reason": r} for f, r in problems]}
    print("error: " + json.dumps(rec, sort_keys=True), file=sys.stderr)
    return code


def _outdir(args):
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _dump(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=float)
        fh.write("\n")


def _metrics(d):
    return {k: v for k, v in d.items() if k not in ("curve", "perm")}


# -- subcommands ------------------------------------------------------------------

def cmd_simulate(cfg, args):
    """Long-form sessions (WAV + diarization sidecar + reference images) and the demo scene."""
    out = _outdir(args)
    recs = recipes.longform_corpus(cfg.simulate, cfg.seed)
    demo = recipes.demo_session(cfg.simulate, cfg.seed)
    manifest = []
    for name, rec in [(f"session{i}", r) for i, r in enumerate(recs)] + [("demo", demo)]:
        wav_write(os.path.join(out, f"{name}.wav"), rec.wave, rec.fs)
        refs = np.stack([rec.speaker_images[k] for k in sorted(rec.speaker_images)])
        wav_write(os.path.join(out, f"{name}.refs.wav"), refs, rec.fs)
        wav_write(os.path.join(out, f"{name}.noise.wav"), rec.noise_image, rec.fs)
        write_annotation(os.path.join(out, f"{name}.tsv"), rec.diarization)
        manifest.append({"name": name, "channels": rec.wave.shape[0], "samples": rec.wave.shape[1],
                         "speakers": sorted(rec.speaker_images)})
    _dump(os.path.join(out, "manifest.json"), {"seed": cfg.seed, "recordings": manifest})
    print(json.dumps({"written": len(manifest), "out": out}))
    return 0


def cmd_segment(cfg, args):
    if not args.input:
        raise UsageError("input", "segment needs a diarization sidecar (TSV) path")
    diar = read_annotation(args.input)
    sc = cfg.segment
    if sc.method == "cts":
        segs = cts(diar, sc.max_len, sc.max_silence)
    else:
        total = max(e.end for e in diar)
        segs = fws(total, sc.window)
    if sc.quality_threshold is not None:
        if not args.scores:
            raise UsageError("scores", "segment.quality_threshold is set but no --scores file given")
        with open(args.scores, encoding="utf-8") as fh:
            scores = [float(x) for x in fh.read().split()]
        segs = filter_by_quality(with_scores(segs, scores), sc.quality_threshold)
    out = _outdir(args)
    path = os.path.join(out, "segments.tsv")
    with open(path, "w", encoding="utf-8") as fh:
        for s in segs:
            q = "" if s.quality_score is None else f"\t{s.quality_score:.4f}"
            fh.write(f"{s.start:.3f}\t{s.end:.3f}\t{s.speaker_count}{q}\n")
    print(json.dumps({"segments": len(segs), "out": path}))
    return 0


def _load_model(path, field, net=None):
    if not os.path.exists(path):
        raise UsageError(field, f"no such checkpoint: {path}")
    model, _ = load_checkpoint(path, expect=net)
    return model


def cmd_train(cfg, args):
    out = _outdir(args)
    tcfg = dataclasses.replace(cfg.train, stage=args.stage)
    if args.stage == 2 and not args.teacher:
        raise UsageError("teacher", "stage-2 training requires a teacher checkpoint (--teacher)")
    if args.stage == 1:
        train, test = recipes.stage1_corpus(cfg.simulate, cfg.seed, cfg.stft)
        model = VarArray(cfg.net, seed=cfg.seed)
        model, curve = train_stage1(model, train, tcfg, checkpoint_dir=os.path.join(out, "checkpoints"))
        report = {"heldout": evaluate(model, test, cfg=cfg.stft)}
    else:
        teacher = _load_model(args.teacher, "teacher").freeze()
        if args.student:
            student = _load_model(args.student, "student", cfg.net)
        else:
            student = VarArray(cfg.net, seed=cfg.seed)
        if args.channels:
            tcfg = dataclasses.replace(tcfg, student_channel_range=(min(2, args.channels), args.channels))
        recs = recipes.longform_corpus(cfg.simulate, cfg.seed)
        pool = LongformPool(recs, crop=cfg.simulate.sample_dur, stft_cfg=cfg.stft)
        student, curve = train_stage2(student, teacher, pool, tcfg)
        report = {}
    save_checkpoint(os.path.join(out, "model.ckpt"), student if args.stage == 2 else model)
    write_curve(os.path.join(out, "curve.csv"), curve)
    report.update(stage=args.stage, steps=len(curve),
                  final_loss=float(np.mean([c[2] for c in curve[-10:]])) if curve else None)
    _dump(os.path.join(out, "report.json"), report)
    print(json.dumps(_metrics(report), default=float))
    return 0


def cmd_separate(cfg, args):
    out = _outdir(args)
    ccfg = dataclasses.replace(cfg.css, output_method=args.method) if args.method else cfg.css
    if args.input:
        if not args.student:
            raise UsageError("student", "separating an input file needs a model checkpoint (--student)")
        audio, fs = wav_read(args.input)
        if fs != cfg.stft.sample_rate:
            raise UsageError("input", f"sample rate {fs} Hz, config expects {cfg.stft.sample_rate} Hz")
        audio = audio.astype(np.float64)
        model = _load_model(args.student, "student")
    else:
        # bundled demo scene; oracle masks unless a model is given
        rec = recipes.demo_session(cfg.simulate, cfg.seed)
        audio, fs = rec.wave, rec.fs
        if args.student:
            model = _load_model(args.student, "student")
        else:
            refs = [rec.speaker_images[k] for k in sorted(rec.speaker_images)]
            model = OracleMaskModel(refs, rec.noise_image, cfg.stft,
                                    window=int(round(ccfg.window_len * fs)))
    if args.channels:
        if not 1 <= args.channels <= audio.shape[0]:
            raise UsageError("channels", f"{args.channels} not in [1, {audio.shape[0]}]")
        idx = choose_channels(audio.shape[0], args.channels, np.random.default_rng(cfg.seed))
        audio = audio[idx]
    windows = []
    streams = css_separate(audio, model, ccfg, cfg.stft, log=windows)
    for i, s in enumerate(streams):
        wav_write(os.path.join(out, f"stream{i}.wav"), s, fs)
    with open(os.path.join(out, "windows.log"), "w", encoding="utf-8") as fh:
        fh.write("# index\tstart_sample\tperm\tstitch_cost\n")
        for w in windows:
            fh.write(w.line() + "\n")
    print(json.dumps({"streams": 2, "samples": int(streams.shape[-1]), "windows": len(windows),
                      "method": ccfg.output_method, "out": out}))
    return 0


def cmd_eval(cfg, args):
    if not args.input or not args.reference:
        raise UsageError("input" if not args.input else "reference",
                         "eval needs an estimate WAV and --reference WAV")
    est, fs1 = wav_read(args.input)
    ref, fs2 = wav_read(args.reference)
    if fs1 != fs2:
        raise UsageError("reference", f"sample rates differ ({fs1} vs {fs2})")
    if est.shape[-1] != ref.shape[-1]:
        raise UsageError("reference", f"lengths differ ({est.shape[-1]} vs {ref.shape[-1]})")
    est, ref = est.astype(np.float64), ref.astype(np.float64)
    best = None
    for perm in itertools.permutations(range(est.shape[0]), ref.shape[0]):
        vals = [si_snr(est[p], r) for p, r in zip(perm, ref) if np.any(r)]
        if vals and (best is None or np.mean(vals) > np.mean(best[1])):
            best = (perm, vals)
    if best is None:
        raise UsageError("reference", "no reference channel has energy")
    report = {"perm": list(best[0]), "si_snr": [float(v) for v in best[1]],
              "si_snr_mean": float(np.mean(best[1])), "cap_db": 60.0}
    print(json.dumps(report))
    if args.out:
        _dump(os.path.join(_outdir(args), "eval.json"), report)
    return 0


COMMANDS = {"simulate": cmd_simulate, "segment": cmd_segment, "train": cmd_train,
            "separate": cmd_separate, "eval": cmd_eval}


def build_parser():
    p = argparse.ArgumentParser(prog="csskit", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("input", nargs="?", help="input file (sidecar for segment, WAV for separate/eval)")
    p.add_argument("--config", help="YAML or JSON run config")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--stage", type=int, choices=(1, 2), default=1)
    p.add_argument("--method", choices=("masking", "mvdr"))
    p.add_argument("--out", default="out")
    p.add_argument("--teacher", help="teacher checkpoint (train --stage 2)")
    p.add_argument("--student", help="student/model checkpoint")
    p.add_argument("--channels", type=int, help="number of input channels to use")
    p.add_argument("--reference", help="reference WAV (eval)")
    p.add_argument("--scores", help="quality scores, one per segment (segment)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    p = build_parser()
    try:
        args = p.parse_args(argv)
    except SystemExit as exc:
        if exc.code:
            return _fail("usage", [("argv", "invalid arguments (see usage above)")], 2)
        return 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError([("seed", "must be a non-negative integer")])
            cfg.seed = args.seed
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        return _fail("config", exc.problems, 2)
    except UsageError as exc:
        return _fail("usage", [(exc.field, exc.reason)], 2)
    except FileNotFoundError as exc:
        return _fail("io", [(str(exc.filename), "file not found")], 1)
    except (CheckpointError, ValueError) as exc:
        return _fail("runtime", [(args.command, str(exc))], 1)


if __name__ == "__main__":
    sys.exit(main())
