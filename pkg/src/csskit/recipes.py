"""End-to-end toy pipelines shared by the CLI, demos and acceptance tests.

Every function is a pure function of its seed: the same arguments give the
same metrics bit for bit on a given machine (single-threaded numpy).
"""
import dataclasses
import logging

import numpy as np

from .css import (OracleMaskModel, css_separate, estimate_scm, mvdr_separate, mvdr_weights,
                  steering_vector, stream_flips)
from .dsp import StftConfig, istft, si_snr
from .simulate import (FULL_BAND, ArrayGeometry, Scene, SourceSpec, measured_overlap_ratio,
                       random_session, render_longform, render_scene, toy_dataset)
from .train import (LongformPool, TrainConfig, evaluate, evaluate_outputs, ideal_ratio_masks,
                    mask_mse, sample_activity, train_stage1, train_stage2)
from .vararray import PRESETS, VarArray

log = logging.getLogger(__name__)

# toy-scale optimiser settings; the full-scale defaults live in TrainConfig
TOY_STAGE1 = dict(base_lr=3e-3, lr_decay=0.999, batch_size=2)
TOY_STAGE2 = dict(base_lr=1e-3, lr_decay=0.999, batch_size=2)


def _sub(seed, tag):
    # independent stream per purpose, all derived from one root seed
    return int(np.random.SeedSequence([seed, tag]).generate_state(1)[0])


# -- corpora ------------------------------------------------------------------------

def stage1_corpus(sim, seed=0, stft_cfg=StftConfig()):
    """``(train, test)`` lists of supervised toy samples.

    Test samples always contain two talkers so SI-SNR improvement is defined
    for both outputs.
    """
    geom = ArrayGeometry.circular(sim.train_mics, sim.train_radius)
    train = toy_dataset(sim.train_samples, _sub(seed, 1), geom, sim.sample_dur, stft_cfg)
    test = toy_dataset(sim.test_samples, _sub(seed, 2), geom, sim.sample_dur, stft_cfg,
                       single_speaker_prob=0.0)
    return train, test


def session_geometry(sim):
    return ArrayGeometry.circular(sim.session_mics, sim.session_radius, center=True)


def longform_corpus(sim, seed=0, n=None):
    """Unlabelled-style long-form sessions (labels kept for evaluation only)."""
    geom = session_geometry(sim)
    n = sim.sessions if n is None else n
    recs = []
    for i in range(n):
        rng = np.random.default_rng(_sub(seed, 100 + i))
        plan = random_session(rng, sim.session_dur, sim.session_speakers,
                              noise_db=sim.noise_db, reflection_gain=sim.reflection_gain)
        recs.append(render_longform(plan, geom, _sub(seed, 200 + i)))
    return recs


def fixed_crops(pool, ri, n, seed, min_active=0.2):
    """Up to ``n`` labelled crops at reproducible random positions of recording ``ri``.

    Only crops where both talkers are active for at least ``min_active`` of
    the crop are kept, so both outputs have a meaningful reference.
    """
    rec = pool.recordings[ri]
    L = int(round(pool.crop * rec.fs))
    rng = np.random.default_rng(seed)
    starts = np.sort(rng.integers(0, rec.wave.shape[-1] - L, size=8 * n))
    activity = [sample_activity(img, rec.fs) for img in rec.speaker_images.values()]
    out = []
    for a in starts:
        acts = [np.mean(act[a:a + L]) for act in activity]
        if min(acts) >= min_active:
            out.append(pool.sample(ri, int(a)))
        if len(out) == n:
            break
    return out


# -- experiments ----------------------------------------------------------------------

def stage1_experiment(cfg, steps=200, preset="XT", seed=None, corpus=None):
    """Train a stage-1 model on the toy corpus; returns ``(model, report)``.

    The report holds held-out metrics of the trained and untrained model and
    of the ideal-ratio-mask ceiling.
    """
    seed = cfg.seed if seed is None else seed
    train, test = corpus or stage1_corpus(cfg.simulate, seed, cfg.stft)
    net = PRESETS[preset] if isinstance(preset, str) else preset
    model = VarArray(net, seed=_sub(seed, 3))
    init = evaluate(model, test, cfg=cfg.stft)
    tcfg = TrainConfig(steps=steps, seed=_sub(seed, 4), **TOY_STAGE1)
    model, curve = train_stage1(model, train, tcfg)
    report = {
        "trained": evaluate(model, test, cfg=cfg.stft),
        "init": init,
        "oracle": evaluate("oracle", test, cfg=cfg.stft),
        "final_loss": float(np.mean([c[2] for c in curve[-20:]])),
        "curve": curve,
    }
    return model, report


def stage2_experiment(cfg, student, teacher, steps=300, seed=None, recordings=None,
                      heldout_crops=16, cache_teacher=True):
    """Teacher-student adaptation on long-form sessions.

    The last recording is held out. Student-teacher mask MSE and SI-SNR
    improvement are measured on fixed held-out crops with the student on
    all channels, before and after stage-2 training. ``student`` is copied,
    not modified.
    """
    seed = cfg.seed if seed is None else seed
    recs = recordings or longform_corpus(cfg.simulate, seed)
    if len(recs) < 2:
        raise ValueError("need at least two sessions (train + held out)")
    train_pool = LongformPool(recs[:-1], crop=cfg.simulate.sample_dur, stft_cfg=cfg.stft)
    held_pool = LongformPool(recs[-1:], crop=cfg.simulate.sample_dur, stft_cfg=cfg.stft)
    crops = fixed_crops(held_pool, 0, heldout_crops, _sub(seed, 5))
    teacher = teacher.copy(trainable=False)
    tea_masks = {id(s): teacher.masks(s.spec) for s in crops}

    def measure(model):
        mse = float(np.mean([mask_mse(model.masks(s.spec), tea_masks[id(s)]) for s in crops]))
        return mse, evaluate(model, crops, cfg=cfg.stft)

    student = student.copy()
    mse0, ev0 = measure(student)
    tcfg = TrainConfig(stage=2, steps=steps, seed=_sub(seed, 6), **TOY_STAGE2)
    student, curve = train_stage2(student, teacher, train_pool, tcfg, cache_teacher=cache_teacher)
    mse1, ev1 = measure(student)
    report = {
        "mse_before": mse0, "mse_after": mse1,
        "mse_reduction": 1.0 - mse1 / mse0 if mse0 > 0 else 0.0,
        "before": ev0, "after": ev1,
        "teacher": evaluate(teacher, crops, cfg=cfg.stft),
        "heldout_crops": len(crops),
        "curve": curve,
    }
    return student, report


def teacher_student_experiment(cfg, student=None, seed=None, student_steps=200,
                               teacher_steps=400, stage2_steps=200, corpus=None, recordings=None):
    """Stage-2 adaptation from a larger teacher and from a same-size teacher.

    Both teachers are trained longer than the student on the same toy
    corpus. Returns ``{"larger": report, "same": report, ...}``.
    """
    seed = cfg.seed if seed is None else seed
    corpus = corpus or stage1_corpus(cfg.simulate, seed, cfg.stft)
    if student is None:
        student, _ = stage1_experiment(cfg, student_steps, "XT", seed, corpus)
    recs = recordings or longform_corpus(cfg.simulate, seed)
    out = {}
    for name, preset in (("larger", "LT"), ("same", "XT")):
        teacher, rep = stage1_experiment(cfg, teacher_steps, preset, seed, corpus)
        _, out[name] = stage2_experiment(cfg, student, teacher, stage2_steps, seed, recs)
        out[name]["teacher_stage1"] = rep["trained"]
    return out


def demo_session(sim, seed=0, duration=30.0, full_band=True):
    """A continuous two-talker session on the session array (stationary talkers).

    ``full_band`` puts both talkers in the same band, so separation has to
    rely on spatial and temporal cues as it would with real speech.
    """
    rng = np.random.default_rng(_sub(seed, 300))
    bands = (FULL_BAND, FULL_BAND) if full_band else None
    plan = random_session(rng, duration, 2, noise_db=sim.noise_db,
                          reflection_gain=sim.reflection_gain, bands=bands)
    if full_band:
        # harmonic tones leave most bins empty, which starves the target covariance
        for spk in plan.speakers.values():
            spk.kind = "filtered_noise_bursts"
    return render_longform(plan, session_geometry(sim), _sub(seed, 301))


def css_experiment(cfg, rec=None, model=None, seed=None, permute=True):
    """Separate a long-form recording with both output methods.

    Without ``model`` an oracle-mask estimator is used whose output order is
    shuffled per window, so stitching has to undo the shuffles.
    """
    seed = cfg.seed if seed is None else seed
    rec = rec or demo_session(cfg.simulate, seed)
    refs = [rec.speaker_images[k] for k in sorted(rec.speaker_images)]
    if model is None:
        model = OracleMaskModel(refs, rec.noise_image, cfg.stft,
                                window=int(round(cfg.css.window_len * rec.fs)),
                                permute_seed=_sub(seed, 7) if permute else None)
    report = {"samples_in": rec.wave.shape[-1],
              "overlap_ratio": measured_overlap_ratio(rec)}
    outputs = {}
    for method in ("masking", "mvdr"):
        ccfg = dataclasses.replace(cfg.css, output_method=method)
        windows = []
        out = css_separate(rec.wave, model, ccfg, cfg.stft, log=windows)
        outputs[method] = out
        ev = evaluate_outputs(out, refs, rec.wave[0], rec.fs)
        report[method] = {
            "samples_out": out.shape[-1],
            "flips": stream_flips(out, refs, rec.fs),
            "windows": len(windows),
            "swaps": sum(w.perm != (0, 1) for w in windows),
            **{k: v for k, v in ev.items() if k != "perm"},
        }
    return outputs, report


def mvdr_oracle_scene(seed=0, stft_cfg=StftConfig(), mics=4, dur=2.0):
    """Oracle-mask MVDR on a 0 dB two-talker scene.

    Returns per-talker SI-SNR improvements and the worst distortionless
    error ``|w^H d - 1|`` over frequencies.

    Both talkers share the full band and stand 108 degrees apart, 1.5 m
    from a 4-mic, 5 cm radius array with -30 dB pink noise.
    """
    rng = np.random.default_rng(_sub(seed, 8))
    az = rng.uniform(0, 2 * np.pi)
    srcs = []
    for a in (az, az + np.pi * 0.6):
        pos = (1.5 * np.cos(a), 1.5 * np.sin(a), 0.2)
        srcs.append(SourceSpec(position=pos, kind="filtered_noise_bursts", band=FULL_BAND, level_db=0.0,
                               seed=int(rng.integers(2 ** 31))))
    scene = Scene(sources=srcs, stationary_noise_db=-30.0)
    s = render_scene(scene, ArrayGeometry.circular(mics, 0.05), dur, _sub(seed, 9), stft_cfg)
    masks = ideal_ratio_masks(s, stft_cfg)
    out = istft(mvdr_separate(s.spec, masks), stft_cfg, s.mixture.shape[-1])
    # distortionless response toward each talker's estimated steering vector
    worst = 0.0
    for i in range(2):
        interf = np.clip(masks[1 - i] + masks[2] + masks[3], 0.0, 1.0)
        phi_t = estimate_scm(s.spec, masks[i])
        w = mvdr_weights(phi_t, estimate_scm(s.spec, interf))
        resp = np.einsum("fc,fc->f", w.conj(), steering_vector(phi_t))
        worst = max(worst, float(np.max(np.abs(resp - 1))))
    return {
        "improvement": [float(si_snr(o, r) - si_snr(s.mixture[0], r)) for o, r in zip(out, s.speech_images)],
        "distortion": worst,
    }
