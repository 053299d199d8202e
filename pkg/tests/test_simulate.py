import numpy as np
import pytest
from hypothesis import given, strategies as st

from csskit.dsp import StftConfig, istft, si_snr, stft
from csskit.simulate import (HIGH_VOICE, LOW_VOICE, ArrayGeometry, Scene, SessionPlan, SourceSpec,
                             Speaker, TransientEvent, Turn, measured_overlap_ratio, propagate,
                             random_scene, random_session, render_components, render_longform,
                             render_scene, synth_speech, toy_dataset)
from csskit.train import ideal_ratio_masks

FS = 16000
GEOM = ArrayGeometry.circular(4, 0.05)


def test_synth_speech_basics():
    with pytest.raises(ValueError):
        synth_speech("am_tone", 0.0, 0)
    with pytest.raises(ValueError):
        synth_speech("whistle", 1.0, 0)
    a = synth_speech("am_tone", 1.0, 3)
    assert np.array_equal(a, synth_speech("am_tone", 1.0, 3))
    assert np.sqrt(np.mean(a ** 2)) == pytest.approx(1.0)


@pytest.mark.parametrize("kind", ["am_tone", "filtered_noise_bursts"])
@pytest.mark.parametrize("band", [LOW_VOICE, HIGH_VOICE])
def test_band_confinement(kind, band):
    x = synth_speech(kind, 1.0, 11, FS, band)
    e = np.sum(np.abs(stft(x)[0]) ** 2, axis=1)
    f = np.arange(len(e)) * FS / 512
    inside = (f >= band[0] - 50) & (f <= band[1] + 50)
    assert e[inside].sum() / e.sum() > 0.95


def test_equidistant_mics_identical():
    geom = ArrayGeometry(np.array([[0.05, 0, 0], [-0.05, 0, 0]]))
    out = propagate(np.random.default_rng(0).standard_normal(4000), (0, 1.7, 0.3), geom)
    assert np.max(np.abs(out[0] - out[1])) < 1e-9


def test_integer_delay_160_samples():
    geom = ArrayGeometry(np.array([[0.0, 0, 0], [0.01, 0, 0]]))
    src = np.zeros(2000)
    src[100] = 1.0
    noise = np.random.default_rng(0).standard_normal(2000)
    out = propagate(noise, (3.43, 0, 0), geom, FS)[0]
    xc = np.correlate(out, noise, mode="full")[len(noise) - 1:]
    assert int(np.argmax(xc)) == 160
    imp = propagate(src, (3.43, 0, 0), geom, FS)[0]
    assert int(np.argmax(np.abs(imp))) == 260
    assert imp[260] == pytest.approx(1 / 3.43, abs=1e-9)


def test_one_over_r():
    geom = ArrayGeometry(np.array([[0.0, 0, 0], [0.01, 0, 0]]))
    x = np.random.default_rng(1).standard_normal(8000)
    near = propagate(x, (1.0, 0, 0), geom)[0, 2000:6000]
    far = propagate(x, (2.0, 0, 0), geom)[0, 2000:6000]
    assert np.sqrt(np.mean(far ** 2)) / np.sqrt(np.mean(near ** 2)) == pytest.approx(0.5, abs=1e-3)


def _scene(n_src=2, noise=-25.0, transient=True):
    srcs = [SourceSpec((1.5, 0.3, 0.1), "am_tone", LOW_VOICE, seed=1),
            SourceSpec((-0.8, 1.2, 0.2), "filtered_noise_bursts", HIGH_VOICE, onset=0.3, level_db=-2, seed=2)]
    tr = [TransientEvent(0.5, 0.1)] if transient else []
    return Scene(sources=srcs[:n_src], stationary_noise_db=noise, transients=tr)


def test_one_source_no_noise_equals_propagated():
    scene = _scene(1, None, False)
    s = render_scene(scene, GEOM, 1.0, seed=0)
    src = synth_speech("am_tone", 1.0, 1, FS, LOW_VOICE)
    img = propagate(src, (1.5, 0.3, 0.1), GEOM)
    img /= np.sqrt(np.mean(img[0] ** 2))
    assert np.max(np.abs(s.mixture - img)) < 1e-12


def test_zero_sources_is_noise():
    s = render_scene(Scene(sources=[], stationary_noise_db=-20.0, transients=[TransientEvent(0.2, 0.1)]),
                     GEOM, 1.0, seed=4)
    _, stat, trans = render_components(Scene(sources=[], stationary_noise_db=-20.0,
                                             transients=[TransientEvent(0.2, 0.1)]), GEOM, 1.0, 4)
    assert np.array_equal(s.mixture, stat + trans)


@given(st.integers(0, 10 ** 6))
def test_additivity_and_reference_consistency(seed):
    scene = random_scene(seed, 1.0, transient_prob=1.0)
    s = render_scene(scene, GEOM, 1.0, seed)
    speech, stat, trans = render_components(scene, GEOM, 1.0, seed)
    assert np.max(np.abs(s.mixture - (speech.sum(0) + stat + trans))) < 1e-9
    assert np.max(np.abs(s.mixture[0] - s.speech_images.sum(0) - s.noise_images.sum(0))) < 1e-6


def test_determinism():
    a = toy_dataset(3, seed=5)
    b = toy_dataset(3, seed=5)
    assert all(np.array_equal(x.mixture, y.mixture) for x, y in zip(a, b))


def test_levels_relative_to_mic0():
    s = render_scene(_scene(2, None, False), GEOM, 1.0)
    # source 2 starts at 0.3 s; its RMS over the whole scene is set to -2 dB
    assert 20 * np.log10(np.sqrt(np.mean(s.speech_images[1] ** 2))) == pytest.approx(-2.0, abs=1e-9)


def test_disjoint_band_irm_separation():
    srcs = [SourceSpec((1.5, 0.3, 0.1), "filtered_noise_bursts", (150, 1000), seed=1),
            SourceSpec((-0.8, 1.2, 0.2), "filtered_noise_bursts", (2500, 4500), seed=2)]
    s = render_scene(Scene(sources=srcs), GEOM, 1.5, 0)
    masks = ideal_ratio_masks(s)
    out = istft(masks[:2] * s.spec[0], StftConfig(), s.mixture.shape[-1])
    for o, r in zip(out, s.speech_images):
        assert si_snr(o, r) > 20.0


def test_scene_validation():
    with pytest.raises(ValueError):
        render_scene(Scene(sources=[SourceSpec((1, 0, 0))] * 3), GEOM, 1.0)
    with pytest.raises(ValueError):
        render_scene(Scene(sources=[SourceSpec((1, 0, 0), onset=2.0)]), GEOM, 1.0)
    with pytest.raises(ValueError):
        ArrayGeometry(np.zeros((2, 3)))


def test_longform_single_utterance():
    plan = SessionPlan(10.0, {"A": Speaker((1.0, 1.0, 0.0))}, [Turn("A", 0.0, 5.0)])
    rec = render_longform(plan, GEOM, seed=0)
    assert rec.wave.shape == (4, 160000)
    assert len(rec.diarization) == 1
    img = rec.speaker_images["A"]
    # fractional-delay tails leak a little past the turn end, nothing more
    assert np.max(np.abs(img[81000:])) < 1e-3 * np.max(np.abs(img))


def test_longform_three_speakers_in_sequence():
    spk = {k: Speaker((1.0 + i, 0.5, 0.0)) for i, k in enumerate("ABC")}
    turns = [Turn("A", 0.0, 2.0), Turn("B", 2.5, 4.0), Turn("C", 4.5, 6.0)]
    rec = render_longform(SessionPlan(6.0, spk, turns), GEOM, seed=1)
    assert rec.diarization.speakers == ["A", "B", "C"]
    assert [(e.start, e.end) for e in rec.diarization] == [(0.0, 2.0), (2.5, 4.0), (4.5, 6.0)]


@pytest.mark.parametrize("seed", range(4))
def test_overlap_ratio_measured_matches_plan(seed):
    plan = random_session(seed, 30.0, noise_db=None, reflection_gain=0.0)
    rec = render_longform(plan, ArrayGeometry.circular(7, 0.0425, center=True), seed)
    assert abs(measured_overlap_ratio(rec) - plan.overlap_ratio()) < 0.02


def test_session_plan_validation():
    spk = {"A": Speaker((1, 0, 0))}
    with pytest.raises(ValueError):
        SessionPlan(5.0, spk, [Turn("B", 0, 1)]).validate()
    with pytest.raises(ValueError):
        SessionPlan(5.0, spk, [Turn("A", 0, 2), Turn("A", 1, 3)]).validate()
    with pytest.raises(ValueError):
        SessionPlan(5.0, spk, [Turn("A", 4, 6)]).validate()
