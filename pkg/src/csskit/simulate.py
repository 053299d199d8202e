"""Multichannel mixture simulator.

Sources are parametric speech-like signals propagated to the microphones
with a direct path (fractional delay + 1/r gain) and an optional single
floor reflection. Scenes render to supervised training samples with
channel-0 reference images; session plans render to long-form recordings
with ground-truth diarization.

Levels are in dB relative to unit RMS at microphone 0.
"""
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import butter, sosfiltfilt

from .dsp import StftConfig, stft
from .objectives import Stage1Refs
from .segment import DiarizationAnnotation, DiarizationEntry

SPEED_OF_SOUND = 343.0
FLOOR_DEPTH = 1.0  # array plane sits this far above a reflecting floor

# Low and high "voices" of the bundled toy corpus, Hz.
LOW_VOICE = (150.0, 2200.0)
HIGH_VOICE = (1200.0, 4500.0)
# both talkers over the whole band, as with real speech
FULL_BAND = (150.0, 4500.0)


@dataclass
class ArrayGeometry:
    mic_positions: np.ndarray

    def __post_init__(self):
        pos = np.atleast_2d(np.asarray(self.mic_positions, dtype=np.float64))
        if pos.shape[0] < 1 or pos.shape[1] != 3:
            raise ValueError(f"mic positions must be (M, 3), got {pos.shape}")
        d = np.linalg.norm(pos[:, None] - pos[None], axis=-1)
        if np.any(d[np.triu_indices(len(pos), 1)] < 1e-9):
            raise ValueError("microphone positions must be pairwise distinct")
        self.mic_positions = pos

    @property
    def num_mics(self):
        return len(self.mic_positions)

    @classmethod
    def circular(cls, n, radius=0.0425, center=False):
        """``n`` mics on a horizontal circle (plus one at the centre if asked)."""
        k = n - 1 if center else n
        ang = 2 * np.pi * np.arange(k) / k
        pos = np.stack([radius * np.cos(ang), radius * np.sin(ang), np.zeros(k)], axis=1)
        if center:
            pos = np.vstack([np.zeros((1, 3)), pos])
        return cls(pos)

    @classmethod
    def linear(cls, n, spacing=0.04):
        x = (np.arange(n) - (n - 1) / 2) * spacing
        return cls(np.stack([x, np.zeros(n), np.zeros(n)], axis=1))


def synth_speech(kind, dur, seed, fs=16000, band=LOW_VOICE):
    """Speech-like test signal confined to ``band`` (Hz), unit RMS.

    ``am_tone``: harmonic complex with slight vibrato under a syllable-rate
    amplitude envelope. ``filtered_noise_bursts``: band-passed noise gated
    into syllable-length bursts.
    """
    n = int(round(dur * fs))
    if dur <= 0 or n == 0:
        raise ValueError(f"duration must be positive, got {dur}")
    lo, hi = band
    if not 0 < lo < hi < fs / 2:
        raise ValueError(f"band {band} outside (0, {fs / 2})")
    rng = np.random.default_rng(seed)
    t = np.arange(n) / fs
    if kind == "am_tone":
        vib_depth = 0.02
        f0 = rng.uniform(max(lo, 90.0), max(lo, 90.0) * 1.6) if lo < 400 else rng.uniform(90, 250)
        vib = 1 + vib_depth * np.sin(2 * np.pi * rng.uniform(4, 6) * t + rng.uniform(0, 2 * np.pi))
        phase_base = 2 * np.pi * f0 * np.cumsum(vib) / fs
        x = np.zeros(n)
        ks = [k for k in range(1, int(hi / f0) + 1)
              if k * f0 * (1 - vib_depth) - 20 >= lo and k * f0 * (1 + vib_depth) + 20 <= hi]
        if not ks:
            raise ValueError(f"band {band} holds no harmonic of f0={f0:.1f} Hz")
        for k in ks:
            x += rng.uniform(0.3, 1.0) / np.sqrt(k) * np.sin(k * phase_base + rng.uniform(0, 2 * np.pi))
        rate = rng.uniform(3, 6)
        env = 0.55 + 0.45 * np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi))
        x *= env
    elif kind == "filtered_noise_bursts":
        sos = butter(6, [lo, hi], btype="bandpass", fs=fs, output="sos")
        x = sosfiltfilt(sos, rng.standard_normal(n + 2048))[1024:1024 + n]
        gate = np.zeros(n)
        pos = int(rng.uniform(0, 0.1) * fs)
        while pos < n:
            on = int(rng.uniform(0.1, 0.3) * fs)
            ramp = min(int(0.02 * fs), on // 2)
            g = np.ones(on)
            g[:ramp] = np.hanning(2 * ramp)[:ramp]
            g[on - ramp:] = np.hanning(2 * ramp)[ramp:]
            gate[pos:pos + on] = g[:n - pos]
            pos += on + int(rng.uniform(0.05, 0.15) * fs)
        x *= 0.15 + 0.85 * gate
    else:
        raise ValueError(f"unknown speech kind {kind!r}")
    return x / np.sqrt(np.mean(x ** 2))


def _delay(sig, delays, gains):
    """Apply per-channel fractional delays (samples) and gains via FFT phase shift."""
    n = len(sig)
    nfft = int(2 ** np.ceil(np.log2(n + np.ceil(np.max(delays)) + 2)))
    spec = np.fft.rfft(sig, nfft)
    k = np.arange(len(spec))
    shift = np.exp(-2j * np.pi * k[None] * np.asarray(delays)[:, None] / nfft)
    out = np.fft.irfft(spec[None] * shift, nfft, axis=-1)[:, :n]
    return out * np.asarray(gains)[:, None]


def propagate(src, src_pos, geom, fs=16000, c=SPEED_OF_SOUND, reflection_gain=0.0):
    """Direct-path (plus optional floor reflection) image of ``src`` at every mic."""
    src = np.asarray(src, dtype=np.float64)
    src_pos = np.asarray(src_pos, dtype=np.float64)
    dist = np.linalg.norm(geom.mic_positions - src_pos, axis=1)
    if np.any(dist < 1e-6):
        raise ValueError("source coincides with a microphone")
    out = _delay(src, dist / c * fs, 1.0 / dist)
    if reflection_gain:
        image = src_pos * np.array([1, 1, -1]) - np.array([0, 0, 2 * FLOOR_DEPTH])
        rdist = np.linalg.norm(geom.mic_positions - image, axis=1)
        out += reflection_gain * _delay(src, rdist / c * fs, 1.0 / rdist)
    return out


def pink_noise(shape, rng):
    """Independent 1/f noise per row, unit RMS."""
    shape = tuple(np.atleast_1d(shape))
    n = shape[-1]
    spec = np.fft.rfft(rng.standard_normal(shape), axis=-1)
    f = np.arange(spec.shape[-1])
    spec *= 1 / np.sqrt(np.maximum(f, 1))
    x = np.fft.irfft(spec, n, axis=-1)
    return x / np.sqrt(np.mean(x ** 2, axis=-1, keepdims=True))


@dataclass
class SourceSpec:
    position: tuple
    kind: str = "am_tone"
    band: tuple = LOW_VOICE
    onset: float = 0.0
    duration: float = None  # None: until the end of the scene
    level_db: float = 0.0
    seed: int = 0


@dataclass
class TransientEvent:
    onset: float
    duration: float
    level_db: float = -15.0
    position: tuple = (1.5, -1.0, 0.5)


@dataclass
class Scene:
    sources: list = field(default_factory=list)
    stationary_noise_db: float = None  # None: no stationary noise
    transients: list = field(default_factory=list)
    speed_of_sound: float = SPEED_OF_SOUND
    reflection_gain: float = 0.0

    def validate(self, dur):
        if len(self.sources) > 2:
            raise ValueError(f"a scene holds at most two speech sources, got {len(self.sources)}")
        levels = [s.level_db for s in self.sources] + [e.level_db for e in self.transients]
        if self.stationary_noise_db is not None:
            levels.append(self.stationary_noise_db)
        if not np.all(np.isfinite(levels)):
            raise ValueError("levels must be finite")
        for s in self.sources:
            if not 0 <= s.onset < dur:
                raise ValueError(f"source onset {s.onset} outside [0, {dur})")
        for e in self.transients:
            if not 0 <= e.onset < dur or e.duration <= 0:
                raise ValueError(f"transient ({e.onset}, {e.duration}) invalid for a {dur} s scene")


@dataclass
class TrainingSample:
    """Mixture plus channel-0 reference images.

    ``speech_images``/``noise_images`` are ``(2, T)``; ``refs`` holds their
    STFT magnitudes. Stage-2 samples have ``refs is None``.
    """
    mixture: np.ndarray
    spec: np.ndarray
    refs: Stage1Refs = None
    speech_images: np.ndarray = None
    noise_images: np.ndarray = None
    num_speakers: int = 2
    quality_score: float = None

    @property
    def y_mag(self):
        return np.abs(self.spec[0])


def _scaled(image, level_db):
    rms = np.sqrt(np.mean(image[0] ** 2))
    return image * (10 ** (level_db / 20) / rms) if rms > 0 else image


def render_components(scene, geom, dur, seed, fs=16000):
    """Multichannel images ``(speech (2, C, T), stationary (C, T), transient (C, T))``."""
    scene.validate(dur)
    T = int(round(dur * fs))
    C = geom.num_mics
    rng = np.random.default_rng(seed)
    speech = np.zeros((2, C, T))
    for i, s in enumerate(scene.sources):
        start = int(round(s.onset * fs))
        stop = T if s.duration is None else min(T, start + int(round(s.duration * fs)))
        sig = np.zeros(T)
        sig[start:stop] = synth_speech(s.kind, (stop - start) / fs, s.seed, fs, s.band)
        img = propagate(sig, s.position, geom, fs, scene.speed_of_sound, scene.reflection_gain)
        speech[i] = _scaled(img, s.level_db)
    stationary = np.zeros((C, T))
    if scene.stationary_noise_db is not None:
        stationary = pink_noise((C, T), rng) * 10 ** (scene.stationary_noise_db / 20)
    transient = np.zeros((C, T))
    for e in scene.transients:
        start = int(round(e.onset * fs))
        n = min(T - start, max(1, int(round(e.duration * fs))))
        burst = rng.standard_normal(n) * np.hanning(n)
        sig = np.zeros(T)
        sig[start:start + n] = burst / np.sqrt(np.mean(burst ** 2) + 1e-20)
        img = propagate(sig, e.position, geom, fs, scene.speed_of_sound, scene.reflection_gain)
        rms = np.sqrt(np.mean(img[0, start:start + n] ** 2))
        transient += img * (10 ** (e.level_db / 20) / rms if rms > 0 else 0.0)
    return speech, stationary, transient


def render_scene(scene, geom, dur, seed=0, cfg=StftConfig()):
    """Render a scene into a supervised :class:`TrainingSample`."""
    speech, stationary, transient = render_components(scene, geom, dur, seed, cfg.sample_rate)
    mixture = speech[0] + speech[1] + stationary + transient
    speech_images = speech[:, 0].copy()
    noise_images = np.stack([stationary[0], transient[0]])
    spec = stft(mixture, cfg)
    refs = Stage1Refs(np.abs(stft(speech_images, cfg)), np.abs(stft(noise_images, cfg)))
    return TrainingSample(mixture, spec, refs, speech_images, noise_images,
                          num_speakers=len(scene.sources))


def _random_position(rng, azimuth, dist_range=(1.0, 2.5)):
    d = rng.uniform(*dist_range)
    return (d * np.cos(azimuth), d * np.sin(azimuth), rng.uniform(-0.3, 0.5))


def random_scene(rng, dur, single_speaker_prob=0.1, sir_range=(-5.0, 5.0),
                 noise_db=(-30.0, -20.0), transient_prob=0.3, reflection_gain=0.0):
    """Draw a toy two-talker scene: one low voice and one high voice.

    Talkers are at least 40 degrees apart. Which voice is listed first is
    random, so output order carries no information.
    """
    rng = np.random.default_rng(rng)
    az = rng.uniform(0, 2 * np.pi)
    azimuths = [az, az + rng.uniform(np.deg2rad(40), np.deg2rad(320))]
    bands = [LOW_VOICE, HIGH_VOICE]
    if rng.random() < 0.5:
        bands.reverse()
    n_src = 1 if rng.random() < single_speaker_prob else 2
    sir = rng.uniform(*sir_range)
    sources = []
    for i in range(n_src):
        lo, hi = bands[i]
        # jitter band edges so the boundary is not at a fixed bin
        band = (lo * rng.uniform(0.9, 1.1), hi * rng.uniform(0.9, 1.0))
        onset = 0.0 if rng.random() < 0.6 else rng.uniform(0, 0.4 * dur)
        sources.append(SourceSpec(
            position=_random_position(rng, azimuths[i]),
            kind=str(rng.choice(["am_tone", "filtered_noise_bursts"])),
            band=band, onset=onset, level_db=(sir / 2 if i == 0 else -sir / 2),
            seed=int(rng.integers(2 ** 31))))
    transients = []
    if rng.random() < transient_prob:
        transients.append(TransientEvent(onset=rng.uniform(0, 0.8 * dur), duration=rng.uniform(0.05, 0.2),
                                         level_db=rng.uniform(-20, -10),
                                         position=_random_position(rng, rng.uniform(0, 2 * np.pi))))
    return Scene(sources=sources, stationary_noise_db=rng.uniform(*noise_db),
                 transients=transients, reflection_gain=reflection_gain)


def toy_dataset(n, seed, geom=None, dur=1.6, cfg=StftConfig(), **scene_kw):
    """Fixed list of ``n`` rendered toy samples; the bundled stage-1 corpus."""
    geom = geom or ArrayGeometry.circular(4, radius=0.05)
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        scene = random_scene(rng, dur, **scene_kw)
        out.append(render_scene(scene, geom, dur, int(rng.integers(2 ** 31)), cfg))
    return out


# -- long-form sessions --------------------------------------------------------

@dataclass
class Speaker:
    position: tuple
    band: tuple = LOW_VOICE
    kind: str = "am_tone"
    level_db: float = 0.0


@dataclass
class Turn:
    speaker: str
    start: float
    end: float


@dataclass
class SessionPlan:
    duration: float
    speakers: dict
    turns: list
    stationary_noise_db: float = None
    reflection_gain: float = 0.0

    def validate(self):
        if not self.turns:
            raise ValueError("session plan has no turns")
        by_spk = {}
        for t in self.turns:
            if t.speaker not in self.speakers:
                raise ValueError(f"turn references unknown speaker {t.speaker!r}")
            if not 0 <= t.start < t.end <= self.duration:
                raise ValueError(f"turn {t} outside [0, {self.duration}]")
            by_spk.setdefault(t.speaker, []).append((t.start, t.end))
        for spk, spans in by_spk.items():
            spans.sort()
            for (s0, e0), (s1, _) in zip(spans, spans[1:]):
                if s1 < e0:
                    raise ValueError(f"speaker {spk!r} has overlapping turns at {s1} s")

    def overlap_ratio(self, step=0.001):
        t = np.arange(0, self.duration, step)
        count = np.zeros(len(t), dtype=int)
        for turn in self.turns:
            count += (t >= turn.start) & (t < turn.end)
        active = count >= 1
        return float(np.sum(count >= 2) / max(np.sum(active), 1))


@dataclass
class LongformRecording:
    wave: np.ndarray
    diarization: DiarizationAnnotation
    speaker_images: dict  # speaker id -> channel-0 image (T,)
    noise_image: np.ndarray
    fs: int = 16000

    @property
    def duration(self):
        return self.wave.shape[-1] / self.fs


def render_longform(plan, geom, seed=0, fs=16000, fade=0.02):
    """Render a session plan; diarization has one entry per turn."""
    plan.validate()
    T = int(round(plan.duration * fs))
    C = geom.num_mics
    rng = np.random.default_rng(seed)
    wave = np.zeros((C, T))
    images = {}
    for spk_id, spk in plan.speakers.items():
        sig = np.zeros(T)
        for turn in plan.turns:
            if turn.speaker != spk_id:
                continue
            a, b = int(round(turn.start * fs)), int(round(turn.end * fs))
            x = synth_speech(spk.kind, (b - a) / fs, int(rng.integers(2 ** 31)), fs, spk.band)
            r = min(int(fade * fs), (b - a) // 2)
            if r > 0:
                ramp = np.hanning(2 * r)
                x[:r] *= ramp[:r]
                x[-r:] *= ramp[r:]
            sig[a:b] = x * 10 ** (spk.level_db / 20)
        img = propagate(sig, spk.position, geom, fs, SPEED_OF_SOUND, plan.reflection_gain)
        # normalise so the talker's active level at mic 0 equals level_db
        active = np.abs(sig) > 0
        rms = np.sqrt(np.mean(img[0, active] ** 2)) if active.any() else 0.0
        if rms > 0:
            img *= 10 ** (spk.level_db / 20) / rms
        wave += img
        images[spk_id] = img[0].copy()
    noise = np.zeros((C, T))
    if plan.stationary_noise_db is not None:
        noise = pink_noise((C, T), rng) * 10 ** (plan.stationary_noise_db / 20)
        wave += noise
    entries = sorted((DiarizationEntry(t.speaker, t.start, t.end) for t in plan.turns),
                     key=lambda e: (e.start, e.end))
    return LongformRecording(wave, DiarizationAnnotation(entries), images, noise[0].copy(), fs)


def measured_activity(image, fs=16000, frame=0.01, floor_db=-40.0):
    """Boolean per-frame activity of a reference image (energy above floor re. peak)."""
    n = int(frame * fs)
    frames = image[: len(image) // n * n].reshape(-1, n)
    energy = np.mean(frames ** 2, axis=1)
    peak = energy.max()
    if peak <= 0:
        return np.zeros(len(energy), dtype=bool)
    return energy > peak * 10 ** (floor_db / 10)


def measured_overlap_ratio(recording, frame=0.01):
    acts = np.stack([measured_activity(img, recording.fs, frame)
                     for img in recording.speaker_images.values()])
    count = acts.sum(axis=0)
    return float(np.sum(count >= 2) / max(np.sum(count >= 1), 1))


def random_session(rng, duration, speakers=2, geom_radius=(1.0, 2.0), mean_turn=3.0,
                   overlap_prob=0.4, max_gap=0.3, noise_db=-25.0, reflection_gain=0.3,
                   bands=None):
    """Conversation plan with alternating turns, frequent overlaps and short gaps.

    By default speaker 0 talks in the low voice band and the rest in the high
    band; ``bands`` gives one band per speaker instead.
    """
    rng = np.random.default_rng(rng)
    ids = [f"spk{i}" for i in range(speakers)]
    az0 = rng.uniform(0, 2 * np.pi)
    spk = {}
    for i, sid in enumerate(ids):
        az = az0 + i * 2 * np.pi / speakers + rng.uniform(-0.3, 0.3)
        if bands is not None:
            band = bands[i]
        else:
            band = LOW_VOICE if i == 0 else HIGH_VOICE
        spk[sid] = Speaker(_random_position(rng, az, geom_radius), band=band,
                           kind=str(rng.choice(["am_tone", "filtered_noise_bursts"])),
                           level_db=rng.uniform(-3, 3))
    turns = []
    last_end = {sid: 0.0 for sid in ids}
    t = 0.0
    cur = 0
    while t < duration - 0.5:
        sid = ids[cur]
        start = max(t, last_end[sid])
        end = min(duration, start + rng.uniform(0.5, 2.0) * mean_turn)
        if end - start < 0.3:
            break
        turns.append(Turn(sid, start, end))
        last_end[sid] = end
        if rng.random() < overlap_prob:
            t = start + rng.uniform(0.4, 0.9) * (end - start)
        else:
            t = end + rng.uniform(0, max_gap)
        cur = (cur + 1 + (int(rng.integers(speakers - 1)) if speakers > 2 else 0)) % speakers
    return SessionPlan(duration, spk, turns, stationary_noise_db=noise_db,
                       reflection_gain=reflection_gain)
