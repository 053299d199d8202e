"""Continuous speech separation of long-form audio.

The model runs on short sliding windows. Each window's two speech masks are
aligned to the previous window by :func:`stitch`, turned into two
single-channel signals (T-F masking or mask-based MVDR), and the windows are
cross-faded into two output streams as long as the input.
"""
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .dsp import StftConfig, istft, stft

METHODS = ("masking", "mvdr")


@dataclass(frozen=True)
class CssConfig:
    window_len: float = 1.6
    window_shift: float = 0.4
    stitch_overlap: str = "crossfade"
    output_method: str = "masking"

    def __post_init__(self):
        if not 0 < self.window_shift <= self.window_len:
            raise ValueError(f"need 0 < window_shift <= window_len, got "
                             f"{self.window_shift} / {self.window_len}")
        if self.output_method not in METHODS:
            raise ValueError(f"output_method must be one of {METHODS}")
        if self.stitch_overlap != "crossfade":
            raise ValueError(f"unknown stitch_overlap policy {self.stitch_overlap!r}")


def window_starts(num_samples, window, shift):
    """Start sample of every window; the last one may run past the end."""
    if num_samples <= window:
        return [0]
    n = -(-(num_samples - window) // shift) + 1
    return [i * shift for i in range(n)]


def apply_masks(spec, masks):
    """Vanilla T-F masking of the first channel: ``(2, F, N)``."""
    masks = np.asarray(getattr(masks, "values", masks))
    if masks.shape[1:] != spec.shape[1:]:
        raise ValueError(f"masks {masks.shape} vs spectrogram {spec.shape}")
    return masks[:2] * spec[0]


def estimate_scm(spec, mask, return_flags=False):
    """Mask-weighted spatial covariance per frequency, ``(F, C, C)``.

    Frequencies whose mask is all zero fall back to the unweighted average
    and are flagged (warning, and in the optional second return value).
    """
    spec = np.asarray(spec)
    mask = np.asarray(mask, dtype=np.float64)
    if spec.ndim != 3 or spec.shape[0] < 2:
        raise ValueError(f"need a (C >= 2, F, N) spectrogram, got {spec.shape}")
    if mask.shape != spec.shape[1:]:
        raise ValueError(f"mask {mask.shape} vs spectrogram {spec.shape}")
    weight = mask.sum(axis=-1)
    flags = weight <= 0
    if flags.any():
        warnings.warn(f"{flags.sum()} frequencies have an all-zero mask; "
                      "using unweighted covariance there", RuntimeWarning)
        mask = np.where(flags[:, None], 1.0, mask)
        weight = mask.sum(axis=-1)
    phi = np.einsum("fn,cfn,dfn->fcd", mask, spec, spec.conj()) / weight[:, None, None]
    phi = 0.5 * (phi + phi.conj().transpose(0, 2, 1))
    return (phi, flags) if return_flags else phi


def steering_vector(phi_target, ref=0):
    """Principal eigenvector of each target covariance, scaled so the reference entry is 1."""
    _, vecs = np.linalg.eigh(phi_target)
    d = vecs[..., -1]
    r = d[..., ref:ref + 1]
    safe = np.abs(r) > 1e-12
    return np.where(safe, d / np.where(safe, r, 1.0), d)


def mvdr_weights(phi_target, phi_interf, ref=0, loading=1e-6, steering=None):
    """MVDR filters ``(F, C)``: ``w = Phi_n^-1 d / (d^H Phi_n^-1 d)``.

    ``d`` is the principal eigenvector of ``phi_target`` (or ``steering`` if
    given). ``Phi_n`` gets diagonal loading of ``loading * trace / C``.
    """
    phi_target = np.asarray(phi_target)
    phi_interf = np.asarray(phi_interf)
    if phi_interf.ndim == 2:
        st = None if steering is None else np.asarray(steering)[None]
        return mvdr_weights(phi_target[None], phi_interf[None], ref, loading, st)[0]
    C = phi_interf.shape[-1]
    d = steering_vector(phi_target, ref) if steering is None else np.atleast_2d(steering)
    tr = np.real(np.trace(phi_interf, axis1=-2, axis2=-1))
    loaded = phi_interf + (loading * tr / C)[:, None, None] * np.eye(C)
    try:
        num = np.linalg.solve(loaded, d[..., None])[..., 0]
    except np.linalg.LinAlgError:
        raise ValueError("interference covariance is singular after diagonal loading") from None
    den = np.einsum("fc,fc->f", d.conj(), num)
    if np.any(np.abs(den) < 1e-300) or not np.all(np.isfinite(num)):
        raise ValueError("interference covariance is singular after diagonal loading")
    return num / den[:, None]


def apply_beamformer(w, spec):
    """``w^H y`` for every frame: ``(F, C)`` x ``(C, F, N)`` -> ``(F, N)``."""
    return np.einsum("fc,cfn->fn", w.conj(), spec)


def mvdr_separate(spec, masks, ref=0):
    """Two beamformed outputs ``(2, F, N)`` from the four masks of one window."""
    masks = np.asarray(getattr(masks, "values", masks))
    out = []
    for i in range(2):
        interf = np.clip(masks[1 - i] + masks[2] + masks[3], 0.0, 1.0)
        w = mvdr_weights(estimate_scm(spec, masks[i]), estimate_scm(spec, interf), ref)
        out.append(apply_beamformer(w, spec))
    return np.stack(out)


def stitch(prev_masks, cur_masks, y_mag_overlap):
    """Permutation of the current window's speech masks that best continues the previous.

    All inputs cover only the overlap frames: masks ``(2, F, K)`` (or the full
    four), magnitude ``(F, K)``. Returns ``(perm, cost)``; ``cur[perm[i]]``
    continues ``prev[i]``. Ties go to the identity.
    """
    y = np.asarray(y_mag_overlap)
    if y.size == 0:
        raise ValueError("empty overlap region")
    prev = np.asarray(prev_masks)[:2] * y
    cur = np.asarray(cur_masks)[:2] * y
    costs = {}
    for perm in ((0, 1), (1, 0)):
        costs[perm] = sum(np.linalg.norm(prev[i] - cur[perm[i]]) for i in range(2))
    best = (0, 1) if costs[(0, 1)] <= costs[(1, 0)] else (1, 0)
    return best, float(costs[best])


def _threads():
    try:
        return max(1, int(os.environ.get("CSSKIT_THREADS", "1")))
    except ValueError:
        return 1


def _estimator(model):
    if hasattr(model, "estimate"):
        return model.estimate
    if hasattr(model, "masks"):
        return lambda spec, start: model.masks(spec)
    return model


@dataclass
class WindowLog:
    index: int
    start: int
    perm: tuple
    cost: float

    def line(self):
        return f"{self.index}\t{self.start}\t{self.perm[0]}{self.perm[1]}\t{self.cost:.6g}"


def css_separate(audio, model, cfg=CssConfig(), stft_cfg=StftConfig(), log=None):
    """Separate ``(C, T)`` long-form audio into two ``(T,)`` streams.

    ``model`` is a VarArray, anything with ``estimate(spec, start)`` or a
    plain callable ``f(spec, start) -> (4, F, N)``. If ``log`` is a list,
    one :class:`WindowLog` per window is appended to it.
    """
    audio = np.atleast_2d(np.asarray(audio, dtype=np.float64))
    C, T = audio.shape
    fs, hop = stft_cfg.sample_rate, stft_cfg.hop
    L = int(round(cfg.window_len * fs))
    S = int(round(cfg.window_shift * fs))
    if S % hop:
        raise ValueError(f"window shift of {S} samples is not a multiple of the STFT hop {hop}")
    if cfg.output_method == "mvdr" and C < 2:
        raise ValueError("MVDR needs at least two channels")
    starts = window_starts(T, L, S)
    estimate = _estimator(model)

    def run(start):
        chunk = np.zeros((C, L))
        seg = audio[:, start:start + L]
        chunk[:, :seg.shape[1]] = seg
        spec = stft(chunk, stft_cfg)
        masks = estimate(spec, start)
        masks = np.asarray(getattr(masks, "values", masks), dtype=np.float64)
        if masks.shape != (4,) + spec.shape[1:]:
            raise ValueError(f"model returned masks {masks.shape}, expected {(4,) + spec.shape[1:]}")
        return spec, masks

    threads = _threads()
    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(run, starts))
    else:
        results = [run(s) for s in starts]

    shift_frames = S // hop
    xfade = np.hanning(L + 2)[1:-1]
    out = np.zeros((2, T + L))
    norm = np.zeros(T + L)
    prev = None
    for k, (start, (spec, masks)) in enumerate(zip(starts, results)):
        perm, cost = (0, 1), 0.0
        if prev is not None:
            n = masks.shape[-1] - shift_frames
            perm, cost = stitch(prev[:, :, shift_frames:], masks[:2, :, :n], np.abs(spec[0, :, :n]))
        masks = np.concatenate([masks[list(perm)], masks[2:]])
        prev = masks[:2]
        if log is not None:
            log.append(WindowLog(k, start, perm, cost))
        if cfg.output_method == "masking":
            sep = apply_masks(spec, masks)
        else:
            sep = mvdr_separate(spec, masks)
        wave = istft(sep, stft_cfg, L)
        out[:, start:start + L] += xfade * wave
        norm[start:start + L] += xfade
    return out[:, :T] / norm[:T]


class OracleMaskModel:
    """Ideal-ratio-mask "model" computed from reference images.

    ``permute_seed`` shuffles the speech-mask order per window, so the
    stitcher has real work to do.
    """

    def __init__(self, speech_images, noise_images=None, stft_cfg=StftConfig(),
                 window=None, permute_seed=None):
        self.speech = np.asarray(speech_images, dtype=np.float64)
        T = self.speech.shape[-1]
        noise = np.zeros((2, T)) if noise_images is None else np.asarray(noise_images, dtype=np.float64)
        self.noise = np.atleast_2d(noise)
        if self.noise.shape[0] == 1:
            self.noise = np.vstack([self.noise, np.zeros((1, T))])
        self.stft_cfg = stft_cfg
        self.window = window
        self.permute_seed = permute_seed

    def estimate(self, spec, start=0):
        N = spec.shape[-1]
        L = self.window or (N - 1) * self.stft_cfg.hop
        refs = np.zeros((4, L))
        seg = np.concatenate([self.speech, self.noise])[:, start:start + L]
        refs[:, :seg.shape[1]] = seg
        mags = np.abs(stft(refs, self.stft_cfg))[..., :N]
        masks = mags / np.maximum(mags.sum(axis=0, keepdims=True), 1e-10)
        if self.permute_seed is not None:
            rng = np.random.default_rng([self.permute_seed, start])
            if rng.random() < 0.5:
                masks = masks[[1, 0, 2, 3]]
        return masks


def stream_flips(outputs, references, fs=16000, segment=0.4, floor_db=-30.0):
    """Count speaker-to-stream assignment changes between adjacent active segments.

    Each speaker's stream in a segment is the output most correlated with the
    speaker's reference there; segments where the speaker is more than
    ``floor_db`` below its loudest segment are skipped.
    """
    n = int(segment * fs)
    flips = 0
    for ref in references:
        nseg = len(ref) // n
        energy = np.array([np.sum(ref[i * n:(i + 1) * n] ** 2) for i in range(nseg)])
        active = energy > energy.max() * 10 ** (floor_db / 10)
        last = None
        for i in np.flatnonzero(active):
            r = ref[i * n:(i + 1) * n]
            corr = [abs(np.dot(o[i * n:(i + 1) * n], r)) /
                    (np.linalg.norm(o[i * n:(i + 1) * n]) * np.linalg.norm(r) + 1e-12)
                    for o in outputs]
            k = int(np.argmax(corr))
            if last is not None and k != last:
                flips += 1
            last = k
    return flips
