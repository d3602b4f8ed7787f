from collections import Counter
from dataclasses import replace
from types import SimpleNamespace

import numpy as np
import pytest

from conftest import micro_config
from memtrack.autodiff import Graph
from memtrack.autodiff.graph import NonFiniteError
from memtrack.config import TrainConfig
from memtrack.model import init_params
from memtrack.synth import SuiteSpec, generate_suite
from memtrack.training import (
    AdamState,
    CheckpointError,
    TrainingError,
    adam_update,
    clip_gradients,
    load_checkpoint,
    load_into,
    prepare_window,
    sample_window,
    save_checkpoint,
    step_rng,
    train,
    train_step,
    window_objective,
)


def fake_dataset(*lengths):
    return [SimpleNamespace(frames=[None] * n) for n in lengths]


@pytest.fixture(scope="module")
def suite():
    return generate_suite(SuiteSpec(count=3, seed=7, min_frames=6, max_frames=8, target_points=400))


def test_offset_zero_when_window_equals_length():
    rng = np.random.default_rng(0)
    for _ in range(200):
        _, off = sample_window(fake_dataset(8, 8, 8), 8, rng)
        assert off == 0


def test_offset_frequencies_uniform():
    rng = np.random.default_rng(1)
    counts = Counter(sample_window(fake_dataset(10), 8, rng)[1] for _ in range(10_000))
    assert set(counts) == {0, 1, 2}
    for c in counts.values():
        assert abs(c / 10_000 - 1 / 3) < 0.03


def test_only_eligible_sequences_drawn():
    rng = np.random.default_rng(2)
    seen = Counter(sample_window(fake_dataset(3, 12, 1, 9), 8, rng)[0] for _ in range(4000))
    assert set(seen) == {1, 3}
    assert abs(seen[1] / 4000 - 0.5) < 0.03


def test_window_two_on_two_frames():
    assert sample_window(fake_dataset(2), 2, np.random.default_rng(0)) == (0, 0)


def test_no_eligible_sequence():
    with pytest.raises(TrainingError):
        sample_window(fake_dataset(3, 4), 8, np.random.default_rng(0))


def test_sampling_deterministic_per_seed(suite):
    cfg, tcfg = micro_config(), TrainConfig(window=3)
    a = prepare_window(suite, cfg, tcfg, step_rng(5, 11))
    b = prepare_window(suite, cfg, tcfg, step_rng(5, 11))
    assert (a.sequence, a.offset) == (b.sequence, b.offset)
    assert all(np.array_equal(x, y) for x, y in zip(a.points, b.points))


def test_first_reference_is_ground_truth(suite):
    s = prepare_window(suite, micro_config(), TrainConfig(window=4), np.random.default_rng(3))
    assert s.refs[0] == s.boxes[0]
    assert len(s.points) == len(s.refs) == 4


def test_lr_schedule():
    t = TrainConfig()
    assert t.lr_at_epoch(0) == 1e-3
    assert t.lr_at_epoch(14) == 1e-3
    assert t.lr_at_epoch(15) == pytest.approx(2e-4, rel=1e-12)
    assert t.lr_at_epoch(30) == pytest.approx(4e-5, rel=1e-12)


def test_zeroed_weights_leave_bbox_only(suite):
    cfg = micro_config()
    tcfg = TrainConfig(window=3, lambda_m=0.0, lambda_c=0.0, use_tc=False, use_mcc=False)
    s = prepare_window(suite, cfg, tcfg, np.random.default_rng(4))
    loss = window_objective(Graph(init_params(cfg, 0)), s, cfg, tcfg)
    assert float(loss.total.data) == float(loss.bbox.data)
    assert float(loss.bbox.data) > 0


def test_total_is_sum_of_parts(suite):
    cfg, tcfg = micro_config(), TrainConfig(window=3)
    s = prepare_window(suite, cfg, tcfg, np.random.default_rng(5))
    v = window_objective(Graph(init_params(cfg, 0)), s, cfg, tcfg).values()
    assert v["total"] == pytest.approx(v["dec"] + v["tc"] + v["mcc"], abs=1e-9)
    assert v["mcc"] == pytest.approx(v["cycle"] + v["fg"], abs=1e-9)


def test_adam_first_step_moves_by_lr():
    # bias correction makes the first update lr * sign(g)
    p = {"w": np.array([1.0, -2.0, 3.0])}
    st = AdamState.zeros_like(p)
    adam_update(p, {"w": np.array([0.5, -4.0, 1e-3])}, st, 0.1)
    assert np.allclose(p["w"], [0.9, -1.9, 2.9], atol=1e-6)
    assert st.step == 1


def test_clip_gradients():
    g = {"a": np.array([3.0, 0.0]), "b": np.array([4.0])}
    assert clip_gradients(g, 1.0) == 5.0
    assert np.allclose(np.concatenate([g["a"], g["b"]]), [0.6, 0.0, 0.8])
    g = {"a": np.array([0.3])}
    clip_gradients(g, 1.0)
    assert g["a"][0] == 0.3


def test_overfit_one_window(suite):
    cfg, tcfg = micro_config(), TrainConfig(window=3, batch_size=1)
    s = prepare_window(suite, cfg, tcfg, np.random.default_rng(6))
    params = init_params(cfg, 0)
    adam = AdamState.zeros_like(params)
    losses = [train_step([s], params, adam, cfg, tcfg, 3e-3)[0]["total"] for _ in range(200)]
    assert losses[-1] < losses[0]
    assert np.mean(losses[-10:]) < 0.5 * np.mean(losses[:10])


def test_training_reproducible(suite):
    cfg = micro_config()
    tcfg = TrainConfig(window=3, batch_size=2, epochs=1, steps_per_epoch=4)
    _, _, h1 = train(suite, cfg, tcfg)
    _, _, h2 = train(suite, cfg, tcfg)
    assert [h["total"] for h in h1] == [h["total"] for h in h2]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts(suite):
    cfg, tcfg = micro_config(), TrainConfig(window=3, batch_size=1, epochs=1, steps_per_epoch=2)
    params = init_params(cfg, 0)
    params["head.vote2.w"][0, 0] = np.inf
    with pytest.raises((NonFiniteError, TrainingError), match="non-finite"):
        train(suite, cfg, tcfg, params=params)


def test_checkpoint_round_trip(tmp_path, suite):
    cfg = micro_config()
    tcfg = TrainConfig(window=3, batch_size=1, epochs=1, steps_per_epoch=3, lr=2e-3)
    params, adam, _ = train(suite, cfg, tcfg)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, params, adam, epoch=1, step=3, cfg=cfg, tcfg=tcfg)
    assert path.read_bytes().startswith(b"CKPT v1\n")
    ck = load_checkpoint(path)
    assert ck.epoch == 1 and ck.step == 3
    assert ck.tracker_config == cfg and ck.train_config == tcfg
    assert ck.params.keys() == params.keys()
    for k in params:
        assert ck.params[k].tobytes() == params[k].tobytes()
        assert ck.adam.m[k].tobytes() == adam.m[k].tobytes()
        assert ck.adam.v[k].tobytes() == adam.v[k].tobytes()
    assert ck.adam.step == adam.step == 3


def test_checkpoint_array_framing(tmp_path):
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, {"x": np.array([[1.5, -2.0, 3.25]])})
    data = path.read_bytes()
    assert b"param/x 2 1 3\nBYTES 24\n" in data
    assert np.array([1.5, -2.0, 3.25], "<f8").tobytes() in data


def test_truncated_checkpoint(tmp_path):
    path = tmp_path / "t.ckpt"
    save_checkpoint(path, {"x": np.ones(10)})
    path.write_bytes(path.read_bytes()[:-40])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_wrong_token_count_named(tmp_path):
    big = micro_config(k_tokens=32)
    path = tmp_path / "k32.ckpt"
    save_checkpoint(path, init_params(big, 0), cfg=big)
    with pytest.raises(CheckpointError, match="fg_tokens") as err:
        load_into(path, micro_config(k_tokens=16))
    assert "(32, 4)" in str(err.value) and "(16, 4)" in str(err.value)


def test_resume_matches_uninterrupted(tmp_path, suite):
    cfg = micro_config()
    tcfg = TrainConfig(window=3, batch_size=2, epochs=2, steps_per_epoch=10, decay_every=1)
    _, _, full = train(suite, cfg, tcfg, steps=20)
    params, adam, first = train(suite, cfg, tcfg, steps=10)
    path = tmp_path / "r.ckpt"
    save_checkpoint(path, params, adam, epoch=1, step=10, cfg=cfg, tcfg=tcfg)
    ck = load_into(path, cfg)
    _, _, rest = train(suite, cfg, replace(tcfg), params=ck.params, adam=ck.adam, start_step=ck.step, steps=10)
    assert [h["total"] for h in first + rest] == [h["total"] for h in full]
    assert rest[0]["lr"] == pytest.approx(2e-4)
