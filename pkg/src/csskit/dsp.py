"""STFT analysis/synthesis.

Shape conventions: waveforms are ``(C, T)`` float arrays, spectrograms are
``(C, F, N)`` complex arrays with ``F = fft_size // 2 + 1`` bins and ``N``
frames. A 1-D waveform is treated as a single channel.
"""
from dataclasses import dataclass

import numpy as np
from scipy.signal import get_window


@dataclass(frozen=True)
class StftConfig:
    sample_rate: int = 16000
    window_len: int = 512
    hop: int = 256
    fft_size: int = 512
    window_kind: str = "sqrt-hann"

    def __post_init__(self):
        if self.window_kind != "sqrt-hann":
            raise ValueError(f"unsupported window_kind {self.window_kind!r}")
        if self.fft_size < self.window_len:
            raise ValueError(f"fft_size {self.fft_size} < window_len {self.window_len}")
        if self.hop <= 0 or self.window_len % self.hop:
            raise ValueError(f"hop {self.hop} must divide window_len {self.window_len}")
        if self.window_len // self.hop < 2:
            raise ValueError("sqrt-hann needs at least 50% overlap")

    @property
    def bins(self):
        return self.fft_size // 2 + 1

    @property
    def pad(self):
        return self.window_len - self.hop

    def window(self):
        return np.sqrt(get_window("hann", self.window_len, fftbins=True))

    def num_frames(self, num_samples):
        span = num_samples + 2 * self.pad - self.window_len
        return -(-span // self.hop) + 1


def _as_2d(wave):
    wave = np.asarray(wave)
    if wave.ndim == 1:
        wave = wave[None]
    if wave.ndim != 2:
        raise ValueError(f"expected (channels, samples), got shape {wave.shape}")
    return wave


def stft(wave, cfg=StftConfig()):
    """Multichannel STFT, ``(C, T)`` -> ``(C, F, N)``.

    The signal is reflect-padded by ``window_len - hop`` on both sides (plus
    enough extra at the end to fill the last frame), so every input sample is
    covered by a full set of overlapping frames.
    """
    if isinstance(wave, (list, tuple)):
        lengths = {len(w) for w in wave}
        if len(lengths) > 1:
            raise ValueError(f"channel length mismatch: {sorted(lengths)}")
    wave = _as_2d(wave)
    T = wave.shape[-1]
    if wave.shape[0] == 0 or T == 0:
        raise ValueError("empty waveform")
    n = cfg.num_frames(T)
    extra = (n - 1) * cfg.hop + cfg.window_len - (T + 2 * cfg.pad)
    if T <= cfg.pad + extra:
        raise ValueError(
            f"signal of {T} samples too short for reflect padding of {cfg.pad + extra}")
    padded = np.pad(wave, ((0, 0), (cfg.pad, cfg.pad + extra)), mode="reflect")
    frames = np.lib.stride_tricks.sliding_window_view(
        padded, cfg.window_len, axis=-1)[:, ::cfg.hop]
    spec = np.fft.rfft(frames * cfg.window(), n=cfg.fft_size, axis=-1)
    return np.ascontiguousarray(spec.transpose(0, 2, 1))


def istft(spec, cfg=StftConfig(), out_len=None):
    """Weighted overlap-add synthesis, ``(C, F, N)`` -> ``(C, out_len)``."""
    spec = np.asarray(spec)
    if spec.ndim == 2:
        spec = spec[None]
    if spec.ndim != 3 or spec.shape[1] != cfg.bins:
        raise ValueError(f"spectrogram shape {spec.shape} does not match {cfg.bins} bins")
    C, _, N = spec.shape
    win = cfg.window()
    frames = np.fft.irfft(spec.transpose(0, 2, 1), n=cfg.fft_size, axis=-1)
    frames = frames[..., :cfg.window_len] * win
    total = (N - 1) * cfg.hop + cfg.window_len
    out = np.zeros((C, total))
    norm = np.zeros(total)
    for i in range(N):
        s = i * cfg.hop
        out[:, s:s + cfg.window_len] += frames[:, i]
        norm[s:s + cfg.window_len] += win ** 2
    out /= np.where(norm > 1e-10, norm, 1.0)
    out = out[:, cfg.pad:]
    if out_len is None:
        out_len = (N - 1) * cfg.hop - cfg.pad
    if out_len > out.shape[-1]:
        raise ValueError(f"out_len {out_len} exceeds the {out.shape[-1]} samples the frames cover")
    return out[:, :out_len]


def magnitude(spec):
    return np.abs(spec)


def si_snr(estimate, reference, cap=60.0, eps=1e-12):
    """Scale-invariant SNR in dB, capped at ``cap``."""
    est = np.asarray(estimate, dtype=np.float64)
    ref = np.asarray(reference, dtype=np.float64)
    est = est - est.mean()
    ref = ref - ref.mean()
    ref_energy = np.dot(ref, ref)
    if ref_energy <= eps:
        raise ValueError("reference has no energy")
    target = np.dot(est, ref) / ref_energy * ref
    noise = est - target
    num = np.dot(target, target)
    den = np.dot(noise, noise)
    if den <= eps * num or den == 0.0:
        return cap
    return float(min(cap, 10 * np.log10(max(num, eps) / den)))
