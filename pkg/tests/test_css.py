import itertools
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from csskit.css import (CssConfig, OracleMaskModel, apply_masks, css_separate, estimate_scm,
                        mvdr_weights, stitch, stream_flips, window_starts)
from csskit.dsp import StftConfig, si_snr, stft
from csskit.oracles import analytic_mvdr_2mic
from csskit.simulate import ArrayGeometry, Scene, SourceSpec, render_scene

CFG = StftConfig()


def _crandn(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def test_window_count_four_seconds():
    starts = window_starts(64000, 25600, 6400)
    assert len(starts) == 7
    assert starts[-1] + 25600 == 64000
    assert window_starts(1000, 25600, 6400) == [0]


@pytest.mark.parametrize("method", ["masking", "mvdr"])
@pytest.mark.parametrize("T", [16000, 64000, 70001])
def test_output_length(method, T, rng):
    audio = rng.standard_normal((3, T)) * 0.1
    model = lambda spec, start: np.full((4,) + spec.shape[1:], 0.25)
    out = css_separate(audio, model, CssConfig(output_method=method))
    assert out.shape == (2, T)
    assert np.all(np.isfinite(out))


def test_zero_input_gives_zero_output():
    out = css_separate(np.zeros((2, 40000)), lambda s, t: np.full((4,) + s.shape[1:], 0.5))
    assert np.array_equal(out, np.zeros((2, 40000)))


def test_disjoint_band_oracle_purity():
    srcs = [SourceSpec((1.5, 0.3, 0.1), "filtered_noise_bursts", (150, 1000), seed=1),
            SourceSpec((-0.8, 1.2, 0.2), "filtered_noise_bursts", (2500, 4500), seed=2)]
    s = render_scene(Scene(sources=srcs), ArrayGeometry.circular(4, 0.05), 4.0, 0)
    model = OracleMaskModel(s.speech_images, s.noise_images, window=25600, permute_seed=3)
    log = []
    out = css_separate(s.mixture, model, log=log)
    assert any(w.perm == (1, 0) for w in log)
    # after stitching, each output carries one talker (up to one global order)
    refs = s.speech_images
    if abs(np.dot(out[0], refs[1])) > abs(np.dot(out[0], refs[0])):
        out = out[::-1]
    for o, r in zip(out, refs):
        purity = np.dot(o, r) ** 2 / (np.dot(o, o) * np.dot(r, r))
        assert purity > 0.9
        assert si_snr(o, r) > 10.0
    assert stream_flips(out, s.speech_images) == 0


def test_stitch_identity_and_swap(rng):
    m = rng.uniform(size=(2, 257, 10))
    y = rng.uniform(0.1, 1.0, size=(257, 10))
    assert stitch(m, m, y) == ((0, 1), 0.0)
    perm, _ = stitch(m, m[::-1], y)
    assert perm == (1, 0)
    # ties go to the identity
    same = np.stack([m[0], m[0]])
    assert stitch(same, same, y)[0] == (0, 1)
    with pytest.raises(ValueError):
        stitch(m[..., :0], m[..., :0], y[:, :0])


@given(st.integers(0, 2 ** 31))
def test_stitch_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    prev, cur = rng.uniform(size=(2, 2, 9, 5))
    y = rng.uniform(size=(9, 5))
    cost = {p: sum(np.sqrt(np.sum((prev[i] * y - cur[p[i]] * y) ** 2)) for i in range(2))
            for p in itertools.permutations(range(2))}
    perm, c = stitch(prev, cur, y)
    assert c == pytest.approx(min(cost.values()), rel=1e-12)
    assert cost[perm] == pytest.approx(c, rel=1e-12)


def test_apply_masks(rng):
    spec = _crandn(rng, 3, 17, 6)
    masks = rng.uniform(size=(4, 17, 6))
    out = apply_masks(spec, masks)
    assert out.shape == (2, 17, 6)
    assert np.array_equal(out[1], masks[1] * spec[0])
    with pytest.raises(ValueError):
        apply_masks(spec, masks[:, :5])


def test_scm_single_frame_outer_product(rng):
    spec = _crandn(rng, 3, 4, 1)
    phi = estimate_scm(spec, np.ones((4, 1)))
    for f in range(4):
        y = spec[:, f, 0]
        assert np.allclose(phi[f], np.outer(y, y.conj()), atol=1e-12)
    assert np.allclose(phi, phi.conj().transpose(0, 2, 1))


def test_scm_rank_one_eigenvector(rng):
    d = _crandn(rng, 4, 5)
    s = _crandn(rng, 5, 50)
    spec = d[:, :, None] * s[None]
    phi = estimate_scm(spec, rng.uniform(0.1, 1.0, size=(5, 50)))
    for f in range(5):
        vec = np.linalg.eigh(phi[f])[1][:, -1]
        cos = abs(np.vdot(vec, d[:, f])) / np.linalg.norm(d[:, f])
        assert np.arccos(min(cos, 1.0)) < 1e-6


def test_scm_zero_mask_falls_back(rng):
    spec = _crandn(rng, 2, 3, 4)
    mask = np.ones((3, 4))
    mask[1] = 0
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        phi, flags = estimate_scm(spec, mask, return_flags=True)
    assert caught and flags.tolist() == [False, True, False]
    assert np.allclose(phi[1], np.einsum("cn,dn->cd", spec[:, 1], spec[:, 1].conj()) / 4)
    with pytest.raises(ValueError):
        estimate_scm(spec[:1], mask)


def test_mvdr_identity_noise_is_matched_filter(rng):
    d = _crandn(rng, 3, 4)
    phi_s = np.einsum("fc,fd->fcd", d, d.conj())
    phi_n = np.broadcast_to(np.eye(4), (3, 4, 4))
    w = mvdr_weights(phi_s, phi_n, steering=d)
    expect = d / np.sum(np.abs(d) ** 2, axis=1, keepdims=True)
    assert np.allclose(w, expect, atol=1e-10)


def test_mvdr_two_mic_analytic(rng):
    for _ in range(10):
        d = _crandn(rng, 2)
        p = rng.uniform(0.1, 3.0, size=2)
        w = mvdr_weights(np.outer(d, d.conj()), np.diag(p), steering=d, loading=0.0)
        assert np.max(np.abs(w - analytic_mvdr_2mic(d, p))) < 1e-10


@given(st.integers(0, 2 ** 31), st.floats(0.01, 100.0))
def test_mvdr_distortionless_and_scale_invariant(seed, scale):
    rng = np.random.default_rng(seed)
    C = 4
    a = _crandn(rng, 2, C, C)
    phi_n = np.einsum("fcd,fed->fce", a, a.conj()) + 0.1 * np.eye(C)
    d = _crandn(rng, 2, C)
    phi_s = np.einsum("fc,fd->fcd", d, d.conj())
    w = mvdr_weights(phi_s, phi_n)
    dn = d / d[:, :1]
    assert np.max(np.abs(np.einsum("fc,fc->f", w.conj(), dn) - 1)) < 1e-8
    w2 = mvdr_weights(scale * phi_s, scale * phi_n)
    assert np.allclose(w, w2, atol=1e-8)


def test_config_validation():
    with pytest.raises(ValueError):
        CssConfig(window_shift=2.0)
    with pytest.raises(ValueError):
        CssConfig(output_method="beamform")
    with pytest.raises(ValueError):
        css_separate(np.zeros((1, 30000)), lambda s, t: np.zeros((4,) + s.shape[1:]),
                     CssConfig(output_method="mvdr"))
    with pytest.raises(ValueError):
        css_separate(np.zeros((2, 30000)), lambda s, t: np.zeros((3,) + s.shape[1:]))
