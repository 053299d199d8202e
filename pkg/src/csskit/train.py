"""Stage-1 (supervised uPIT) and stage-2 (teacher-student) training, plus evaluation."""
import csv
import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .css import apply_masks, mvdr_separate
from .dsp import StftConfig, istft, si_snr, stft
from .objectives import LossWeights, stage1_loss, stage2_loss
from .segment import cts, sampling_weights, training_segments
from .simulate import TrainingSample, measured_activity
from .vararray import choose_channels

log = logging.getLogger(__name__)

SI_SNR_CAP = 60.0


@dataclass
class TrainConfig:
    """Optimiser and loop settings.

    ``lr_decay`` is applied per optimiser step. ``student_channel_range`` is
    the inclusive range the stage-2 student's channel count is drawn from;
    ``None`` for the upper end means all available channels.
    """
    stage: int = 1
    base_lr: float = 1e-4
    lr_decay: float = 0.99998
    weight_decay: float = 1e-5
    batch_size: int = 4
    steps: int = 1000
    student_channel_range: tuple = (2, None)
    mix_sim_fraction: float = None  # None: 0.25 if sim data is given, else 0
    seed: int = 0
    checkpoint_every: int = 0
    squared_loss: bool = False
    loss_weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        if self.base_lr < 0 or self.weight_decay < 0 or not 0 < self.lr_decay <= 1:
            raise ValueError("rates must be non-negative and 0 < lr_decay <= 1")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be >= 1 and steps >= 0")
        lo, hi = self.student_channel_range
        if lo < 1 or (hi is not None and hi < lo):
            raise ValueError(f"bad student_channel_range {self.student_channel_range}")
        if self.mix_sim_fraction is not None and not 0 <= self.mix_sim_fraction <= 1:
            raise ValueError("mix_sim_fraction must be in [0, 1]")


def _check_sample(i, s):
    if s.refs is None:
        raise ValueError(f"sample {i} has no stage-1 references")
    shape = s.spec.shape[1:]
    if s.refs.speech_mag.shape[1:] != shape or s.refs.noise_mag.shape[1:] != shape:
        raise ValueError(f"sample {i}: reference shape {s.refs.speech_mag.shape[1:]} "
                         f"vs mixture {shape}")


def _save(model, opt, checkpoint_dir, step):
    from .io import save_checkpoint
    import os
    os.makedirs(checkpoint_dir, exist_ok=True)
    save_checkpoint(os.path.join(checkpoint_dir, f"step{step:06d}.ckpt"), model, opt)


def train_stage1(model, dataset, cfg, checkpoint_dir=None, extra_loss=None):
    """Adam/uPIT training on supervised samples.

    ``extra_loss(maskset, sample) -> Tensor`` is an optional differentiable
    term added to every sample's loss (e.g. a downstream loss on beamformed
    outputs). Returns ``(model, curve)`` with curve rows ``(step, lr, loss)``.
    """
    for i, s in enumerate(dataset):
        _check_sample(i, s)
    rng = np.random.default_rng(cfg.seed)
    opt = ag.Adam(model.params, lr=cfg.base_lr, weight_decay=cfg.weight_decay)
    curve = []
    for step in range(cfg.steps):
        lr = ag.lr_schedule(step, cfg.base_lr, cfg.lr_decay)
        batch = [dataset[j] for j in rng.integers(len(dataset), size=cfg.batch_size)]
        loss = _stage1_batch(model, batch, cfg, extra_loss)
        opt.step(lr)
        opt.zero_grad()
        curve.append((step, lr, loss))
        if cfg.checkpoint_every and checkpoint_dir and (step + 1) % cfg.checkpoint_every == 0:
            _save(model, opt, checkpoint_dir, step + 1)
    return model, curve


def _stage1_batch(model, batch, cfg, extra_loss=None):
    with ag.Tape():
        total = 0.0
        for s in batch:
            ms = model(s.spec)
            loss, _ = stage1_loss(ms, s.y_mag, s.refs, cfg.loss_weights, cfg.squared_loss)
            if extra_loss is not None:
                loss = loss + extra_loss(ms, s)
            total = loss + total
        total = total * (1.0 / len(batch))
    ag.backward(total)
    return total.item()


# -- stage 2 ---------------------------------------------------------------------

class LongformPool:
    """Random fixed-length crops from segmented long-form recordings.

    Segments come from :func:`cts` (or any list per recording); two-speaker
    segments are drawn more often.
    """

    def __init__(self, recordings, segments=None, crop=1.6, stft_cfg=StftConfig(),
                 two_speaker_factor=2.0, min_len=0.5):
        self.recordings = list(recordings)
        if segments is None:
            segments = [cts(r.diarization) for r in self.recordings]
        self.items = [(ri, s) for ri, segs in enumerate(segments)
                      for s in training_segments(segs, min_len)]
        if not self.items:
            raise ValueError("no usable segments")
        self.weights = sampling_weights([s for _, s in self.items], two_speaker_factor)
        self.crop = crop
        self.stft_cfg = stft_cfg

    def draw(self, rng):
        ri, seg = self.items[rng.choice(len(self.items), p=self.weights)]
        return self.crop_at(ri, seg, rng)

    def crop_at(self, ri, seg, rng=None):
        rec = self.recordings[ri]
        fs = rec.fs
        L = int(round(self.crop * fs))
        a, b = int(round(seg.start * fs)), int(round(seg.end * fs))
        if b - a > L and rng is not None:
            a = int(rng.integers(a, b - L + 1))
        chunk = np.zeros((rec.wave.shape[0], L))
        piece = rec.wave[:, a:min(b, a + L)]
        chunk[:, :piece.shape[1]] = piece
        return chunk, (ri, a)

    def sample(self, ri, start):
        """A labelled :class:`TrainingSample` for the crop at ``start`` (for evaluation)."""
        rec = self.recordings[ri]
        L = int(round(self.crop * rec.fs))
        chunk = np.zeros((rec.wave.shape[0], L))
        piece = rec.wave[:, start:start + L]
        chunk[:, :piece.shape[1]] = piece
        imgs = np.zeros((len(rec.speaker_images), L))
        for k, img in enumerate(rec.speaker_images.values()):
            imgs[k, :piece.shape[1]] = img[start:start + L]
        noise = np.zeros((2, L))
        noise[0, :piece.shape[1]] = rec.noise_image[start:start + L]
        spec = stft(chunk, self.stft_cfg)
        return TrainingSample(chunk, spec, None, imgs, noise, num_speakers=len(imgs))


def _draw_k(rng, cfg, C):
    lo, hi = cfg.student_channel_range
    hi = C if hi is None else min(hi, C)
    lo = min(lo, hi)
    return int(rng.integers(lo, hi + 1))


def train_stage2(student, teacher, pool, cfg, sim_data=None, cache_teacher=False, extra_loss=None):
    """Teacher-student training of ``student`` on unlabeled crops from ``pool``.

    Per sample the teacher sees every channel; the student sees a random
    subset of ``k`` channels, ``k`` uniform over ``cfg.student_channel_range``.
    Both losses use the magnitude of the subset's first channel. With sim
    data, a ``mix_sim_fraction`` share of samples uses the stage-1 loss.
    The teacher is never updated.
    """
    if teacher.cfg.bins != student.cfg.bins or teacher.cfg.feature_kind != student.cfg.feature_kind:
        raise ValueError("teacher and student feature configs are incompatible")
    frac = cfg.mix_sim_fraction
    if frac is None:
        frac = 0.25 if sim_data else 0.0
    if frac > 0 and not sim_data:
        raise ValueError("mix_sim_fraction > 0 needs sim data")
    for i, s in enumerate(sim_data or []):
        _check_sample(i, s)
    rng = np.random.default_rng(cfg.seed)
    opt = ag.Adam(student.params, lr=cfg.base_lr, weight_decay=cfg.weight_decay)
    cache = {}
    curve = []
    for step in range(cfg.steps):
        lr = ag.lr_schedule(step, cfg.base_lr, cfg.lr_decay)
        items = []
        for _ in range(cfg.batch_size):
            if frac > 0 and (frac >= 1 or rng.random() < frac):
                items.append(("sim", sim_data[int(rng.integers(len(sim_data)))]))
                continue
            chunk, key = pool.draw(rng)
            spec = stft(chunk, pool.stft_cfg)
            if cache_teacher and key in cache:
                tea = cache[key]
            else:
                tea = teacher.masks(spec)
                if cache_teacher:
                    cache[key] = tea
            idx = choose_channels(spec.shape[0], _draw_k(rng, cfg, spec.shape[0]), rng)
            items.append(("real", (spec[idx], tea)))
        with ag.Tape():
            total = 0.0
            for kind, item in items:
                if kind == "sim":
                    ms = student(item.spec)
                    loss, _ = stage1_loss(ms, item.y_mag, item.refs, cfg.loss_weights, cfg.squared_loss)
                else:
                    sub, tea = item
                    ms = student(sub)
                    loss, _ = stage2_loss(tea, ms, np.abs(sub[0]), cfg.loss_weights, cfg.squared_loss)
                if extra_loss is not None:
                    loss = loss + extra_loss(ms, item)
                total = loss + total
            total = total * (1.0 / len(items))
        ag.backward(total)
        opt.step(lr)
        opt.zero_grad()
        curve.append((step, lr, total.item()))
    return student, curve


def stage2_loss_at_init(student, teacher, spec, k=None, seed=0, weights=LossWeights()):
    """Stage-2 loss for one sample, student on ``k`` channels (all if None)."""
    tea = teacher.masks(spec)
    sub = spec if k is None else spec[choose_channels(spec.shape[0], k, seed)]
    with ag.no_grad():
        loss, _ = stage2_loss(tea, student(sub), np.abs(sub[0]), weights)
    return loss.item()


# -- evaluation -------------------------------------------------------------------

def _best_perm(outputs, refs):
    best = None
    for perm in itertools.permutations(range(len(outputs)), len(refs)):
        score = sum(si_snr(outputs[p], r, SI_SNR_CAP) for p, r in zip(perm, refs))
        if best is None or score > best[0]:
            best = (score, perm)
    return best[1]


def _region_snr(est, ref, region):
    if region.sum() < 160:
        return None
    if np.sum(ref[region] ** 2) <= 0:
        return None
    return si_snr(est[region], ref[region], SI_SNR_CAP)


def sample_activity(image, fs=16000, floor_db=-40.0, frame=0.01):
    act = measured_activity(image, fs, frame, floor_db)
    n = int(frame * fs)
    out = np.zeros(len(image), dtype=bool)
    out[: len(act) * n] = np.repeat(act, n)
    return out


def evaluate_outputs(outputs, refs, mixture, fs=16000):
    """SI-SNR metrics of separated ``outputs`` against ``refs`` (active speakers only).

    Returns a dict with overall, overlap and non-overlap improvements over
    the unprocessed ``mixture`` (channel 0).
    """
    refs = [r for r in refs if np.sum((r - np.mean(r)) ** 2) > 1e-10]
    if not refs:
        raise ValueError("no reference with energy")
    perm = _best_perm(outputs, refs)
    est = [outputs[p] for p in perm]
    snr = [si_snr(e, r, SI_SNR_CAP) for e, r in zip(est, refs)]
    base = [si_snr(mixture, r, SI_SNR_CAP) for r in refs]
    acts = [sample_activity(r, fs) for r in refs]
    count = np.sum(acts, axis=0)
    ovlp, non = [], []
    for e, r, a in zip(est, refs, acts):
        for region, bucket in ((a & (count >= 2), ovlp), (a & (count == 1), non)):
            s_out = _region_snr(e, r, region)
            s_mix = _region_snr(mixture, r, region)
            if s_out is not None and s_mix is not None:
                bucket.append(s_out - s_mix)
    return {
        "si_snr": float(np.mean(snr)),
        "si_snr_mixture": float(np.mean(base)),
        "si_snr_improvement": float(np.mean(np.subtract(snr, base))),
        "si_snr_improvement_ovlp": float(np.mean(ovlp)) if ovlp else float("nan"),
        "si_snr_improvement_non_ovlp": float(np.mean(non)) if non else float("nan"),
        "perm": perm,
    }


def ideal_ratio_masks(sample, cfg=StftConfig()):
    mags = np.concatenate([np.abs(stft(sample.speech_images, cfg)),
                           np.abs(stft(sample.noise_images, cfg))])
    return mags / np.maximum(mags.sum(axis=0, keepdims=True), 1e-10)


def separate_sample(masks, sample, method="masking", cfg=StftConfig()):
    if method == "masking":
        sep = apply_masks(sample.spec, masks)
    elif method == "mvdr":
        sep = mvdr_separate(sample.spec, masks)
    else:
        raise ValueError(f"unknown method {method!r}")
    return istft(sep, cfg, sample.mixture.shape[-1])


def evaluate(model, samples, method="masking", cfg=StftConfig(), mask_target=None):
    """Average separation metrics over labelled samples.

    ``model`` is a VarArray, an ``estimate``-style object, a callable
    ``f(spec) -> masks`` or the string ``"oracle"`` (ideal ratio masks).
    ``mask_mse`` compares against ``mask_target(sample)`` (ideal ratio
    masks by default), best speech permutation.
    """
    mask_target = mask_target or (lambda s: ideal_ratio_masks(s, cfg))
    rows = []
    mses = []
    for s in samples:
        if s.speech_images is None:
            raise ValueError("evaluation samples need clean references")
        if model == "oracle":
            masks = ideal_ratio_masks(s, cfg)
        elif hasattr(model, "masks"):
            masks = model.masks(s.spec)
        elif hasattr(model, "estimate"):
            masks = model.estimate(s.spec, 0)
        else:
            masks = np.asarray(model(s.spec))
        out = separate_sample(masks, s, method, cfg)
        rows.append(evaluate_outputs(out, s.speech_images, s.mixture[0], cfg.sample_rate))
        mses.append(mask_mse(masks, mask_target(s)))
    metrics = {}
    for k in rows[0]:
        if k == "perm":
            continue
        vals = np.array([r[k] for r in rows])
        metrics[k] = float(np.mean(vals[~np.isnan(vals)])) if np.any(~np.isnan(vals)) else float("nan")
    metrics["mask_mse"] = float(np.mean(mses))
    return metrics


def mask_mse(masks, target):
    """Mean squared mask error, speech masks matched by the better permutation."""
    masks = np.asarray(getattr(masks, "values", masks), dtype=np.float64)
    target = np.asarray(getattr(target, "values", target), dtype=np.float64)
    best = None
    for perm in ((0, 1, 2, 3), (1, 0, 2, 3)):
        v = np.mean((masks[list(perm)] - target) ** 2)
        best = v if best is None else min(best, v)
    return float(best)


def ema(values, alpha=0.1):
    out = []
    acc = None
    for v in values:
        acc = v if acc is None else (1 - alpha) * acc + alpha * v
        out.append(acc)
    return out


def write_curve(path, curve):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "lr", "loss"])
        for step, lr, loss in curve:
            w.writerow([step, repr(lr), repr(loss)])
