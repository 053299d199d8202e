
import numpy as np
import pytest

from csskit.dsp import StftConfig
from csskit.io import param_hash
from csskit.simulate import (ArrayGeometry, Scene, SourceSpec, random_session, render_longform,
                             render_scene, toy_dataset)
from csskit.train import (LongformPool, TrainConfig, ema, evaluate, evaluate_outputs, mask_mse,
                          stage2_loss_at_init, train_stage1, train_stage2, write_curve)
from csskit.vararray import NetConfig, VarArray

TINY = NetConfig(num_blocks=1, layers_per_block=1, model_dim=16, attention_heads=2, conv_kernel=5)
GEOM = ArrayGeometry.circular(4, 0.05)


@pytest.fixture(scope="module")
def data():
    return toy_dataset(12, 3, GEOM, 0.8)


@pytest.fixture(scope="module")
def pool():
    rng = np.random.default_rng(0)
    recs = [render_longform(random_session(rng, 12.0, 2), ArrayGeometry.circular(6, 0.0425, center=True), i)
            for i in range(2)]
    return LongformPool(recs, crop=0.8)


def test_zero_steps_leaves_model_unchanged(data):
    model = VarArray(TINY, seed=1)
    h = param_hash(model.params)
    model, curve = train_stage1(model, data, TrainConfig(steps=0))
    assert curve == [] and param_hash(model.params) == h


def test_stage1_loss_halves():
    train = toy_dataset(50, 11, GEOM, 0.8)
    model = VarArray(TINY, seed=0)
    cfg = TrainConfig(steps=200, base_lr=3e-3, lr_decay=0.999, batch_size=2, seed=1)
    _, curve = train_stage1(model, train, cfg)
    losses = [c[2] for c in curve]
    assert np.mean(losses[-20:]) < 0.5 * np.mean(losses[:5])
    assert ema(losses)[-1] < ema(losses)[10]
    assert curve[1][1] == pytest.approx(3e-3 * 0.999)


def test_stage1_deterministic(data):
    cfg = TrainConfig(steps=5, base_lr=1e-3, batch_size=2, seed=4)
    a, ca = train_stage1(VarArray(TINY, seed=2), data, cfg)
    b, cb = train_stage1(VarArray(TINY, seed=2), data, cfg)
    assert ca == cb
    assert param_hash(a.params) == param_hash(b.params)


def test_stage2_teacher_untouched(pool):
    teacher = VarArray(TINY, seed=5).freeze()
    h = param_hash(teacher.params)
    student = VarArray(TINY, seed=6)
    hs = param_hash(student.params)
    train_stage2(student, teacher, pool, TrainConfig(stage=2, steps=3, base_lr=1e-3, batch_size=2))
    assert param_hash(teacher.params) == h
    assert param_hash(student.params) != hs


def test_stage2_loss_zero_when_student_is_teacher(pool):
    teacher = VarArray(TINY, seed=7)
    student = teacher.copy()
    chunk, _ = pool.draw(np.random.default_rng(0))
    from csskit.dsp import stft
    spec = stft(chunk)
    assert stage2_loss_at_init(student, teacher, spec) < 1e-5
    assert stage2_loss_at_init(student, teacher, spec, k=2, seed=3) > 1e-3
    # zero learning rate (and no decay) leaves the student as it was
    h = param_hash(student.params)
    train_stage2(student, teacher, pool, TrainConfig(stage=2, steps=2, base_lr=0.0, weight_decay=0.0))
    assert param_hash(student.params) == h


def test_mix_sim_fraction_one_equals_stage1(pool, data):
    cfg1 = TrainConfig(steps=4, base_lr=1e-3, batch_size=2, seed=9)
    cfg2 = TrainConfig(stage=2, steps=4, base_lr=1e-3, batch_size=2, seed=9, mix_sim_fraction=1.0)
    a, ca = train_stage1(VarArray(TINY, seed=3), data, cfg1)
    b, cb = train_stage2(VarArray(TINY, seed=3), VarArray(TINY, seed=4), pool, cfg2, sim_data=data)
    assert [c[2] for c in ca] == [c[2] for c in cb]
    assert param_hash(a.params) == param_hash(b.params)
    with pytest.raises(ValueError):
        train_stage2(VarArray(TINY), VarArray(TINY), pool, cfg2)


def test_student_channel_invariance_kept(pool):
    teacher = VarArray(TINY, seed=5).freeze()
    student, _ = train_stage2(VarArray(TINY, seed=6), teacher, pool,
                              TrainConfig(stage=2, steps=3, base_lr=1e-3, batch_size=2))
    chunk, _ = pool.draw(np.random.default_rng(1))
    from csskit.dsp import stft
    spec = stft(chunk)
    perm = np.random.default_rng(2).permutation(spec.shape[0])
    assert np.max(np.abs(student.masks(spec) - student.masks(spec[perm]))) < 1e-5


def test_longform_pool_crops(pool):
    rng = np.random.default_rng(0)
    for _ in range(5):
        chunk, (ri, a) = pool.draw(rng)
        assert chunk.shape == (6, 12800)
        assert 0 <= a < pool.recordings[ri].wave.shape[-1]
    s = pool.sample(0, 1000)
    assert s.speech_images.shape == (2, 12800)
    assert np.allclose(s.mixture[:, :10], pool.recordings[0].wave[:, 1000:1010])


def _scene():
    srcs = [SourceSpec((1.5, 0.3, 0.1), "filtered_noise_bursts", (150, 2200), seed=1),
            SourceSpec((-0.8, 1.2, 0.2), "filtered_noise_bursts", (1200, 4500), seed=2)]
    return render_scene(Scene(sources=srcs, stationary_noise_db=-30.0), GEOM, 1.6, 0)


def test_evaluate_identities():
    s = _scene()
    perfect = evaluate_outputs(s.speech_images, s.speech_images, s.mixture[0])
    assert perfect["si_snr"] == pytest.approx(60.0)
    unproc = evaluate_outputs(np.stack([s.mixture[0]] * 2), s.speech_images, s.mixture[0])
    assert unproc["si_snr_improvement"] == pytest.approx(0.0, abs=1e-9)
    assert evaluate("oracle", [s])["si_snr_improvement"] > 8.0
    assert evaluate("oracle", [s])["mask_mse"] == 0.0
    with pytest.raises(ValueError):
        evaluate_outputs(s.speech_images, np.zeros((2, 100)), s.mixture[0])


def test_mask_mse_permutation(rng):
    m = rng.uniform(size=(4, 5, 6))
    assert mask_mse(m[[1, 0, 2, 3]], m) == 0.0
    assert mask_mse(m[[0, 1, 3, 2]], m) > 0.0


def test_config_validation():
    for bad in (dict(stage=3), dict(lr_decay=0.0), dict(batch_size=0), dict(steps=-1),
                dict(student_channel_range=(3, 2)), dict(mix_sim_fraction=1.5)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_write_curve(tmp_path):
    write_curve(tmp_path / "c.csv", [(0, 1e-3, 2.5), (1, 9e-4, 2.0)])
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "step,lr,loss" and lines[2] == "1,0.0009,2.0"
