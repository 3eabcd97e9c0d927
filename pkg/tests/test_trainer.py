import numpy as np
import pytest

from spcnn import data, spnet, trainer
from spcnn.errors import ConfigurationError, DataError, NumericError
from spcnn.trainer import OptimizerState, TrainConfig, make_batches, sgd_step


def one_ulp(a, b):
    a, b = np.float32(a), np.float32(b)
    return abs(int(a.view(np.int32)) - int(b.view(np.int32))) <= 1


def test_hand_example():
    # v = 0.9*0 - 0.01*(0.5 + 0.0005*1) = -0.005005; w = 1 + v
    w = {"w": np.array([1.0], np.float32)}
    opt = OptimizerState.zeros_like(w)
    sgd_step(w, {"w": np.array([0.5], np.float32)}, opt,
             TrainConfig(alpha=0.01, momentum=0.9, weight_decay=0.0005))
    assert one_ulp(w["w"][0], 0.994995)
    assert one_ulp(opt.velocity["w"][0], -0.005005)
    assert opt.iteration == 1


def test_decay_folds_into_gradient_before_lr():
    # the decay term is scaled by alpha: alpha*zeta*w = 5e-6 here
    w = {"w": np.array([1.0], np.float64)}
    sgd_step(w, {"w": np.array([0.0])}, OptimizerState(),
             TrainConfig(alpha=0.01, momentum=0.9, weight_decay=0.0005))
    assert w["w"][0] == pytest.approx(1 - 5e-6, rel=1e-15)


def test_plain_gradient_descent(rng):
    w0 = rng.standard_normal((3, 4)).astype(np.float32)
    g = rng.standard_normal((3, 4)).astype(np.float32)
    w = {"a": w0.copy()}
    cfg = TrainConfig(alpha=0.1, momentum=0.0, weight_decay=0.0)
    sgd_step(w, {"a": g}, OptimizerState(), cfg)
    assert np.array_equal(w["a"], w0 - np.float32(0.1) * g)


def test_momentum_accumulates():
    w = {"w": np.zeros(1, np.float32)}
    opt = OptimizerState.zeros_like(w)
    cfg = TrainConfig(alpha=1.0, momentum=0.5, weight_decay=0.0)
    for _ in range(3):
        sgd_step(w, {"w": np.ones(1, np.float32)}, opt, cfg)
    # v: -1, -1.5, -1.75
    assert opt.velocity["w"][0] == -1.75
    assert w["w"][0] == -4.25


def test_momentum_only_decays_geometrically():
    w = {"w": np.zeros(1, np.float64)}
    opt = OptimizerState({"w": np.array([1.0])})
    cfg = TrainConfig(alpha=0.1, momentum=0.5, weight_decay=0.0)
    for k in range(1, 4):
        sgd_step(w, {"w": np.zeros(1)}, opt, cfg)
        assert opt.velocity["w"][0] == 0.5 ** k


def test_pure_weight_decay():
    w = {"w": np.array([2.0], np.float32), "x.b": np.array([2.0], np.float32)}
    cfg = TrainConfig(alpha=0.1, momentum=0.0, weight_decay=0.5, decay_biases=False)
    sgd_step(w, {"w": np.zeros(1, np.float32), "x.b": np.zeros(1, np.float32)},
             OptimizerState(), cfg)
    assert w["w"][0] == np.float32(2.0 * (1 - 0.05))
    assert w["x.b"][0] == 2.0


def test_matches_scalar_reference(rng):
    cfg = TrainConfig()
    w = {"p": rng.standard_normal(50).astype(np.float32)}
    opt = OptimizerState.zeros_like(w)
    ref_w = w["p"].astype(np.float64)
    ref_v = np.zeros(50)
    for _ in range(20):
        g = rng.standard_normal(50).astype(np.float32)
        ref_v = cfg.momentum * ref_v - cfg.alpha * (g + cfg.weight_decay * ref_w)
        ref_w = ref_w + ref_v
        sgd_step(w, {"p": g}, opt, cfg)
    np.testing.assert_allclose(w["p"], ref_w, rtol=0, atol=1e-5)


def test_sgd_rejects_non_finite():
    w = {"a": np.ones(2, np.float32)}
    with pytest.raises(NumericError, match="'a'"):
        sgd_step(w, {"a": np.array([1, np.nan], np.float32)}, OptimizerState(), TrainConfig())
    assert np.all(w["a"] == 1)


def test_learning_rate_schedules():
    assert TrainConfig().learning_rate(31999) == 0.01
    step = TrainConfig(lr_schedule="step", gamma=0.1, step_size=10)
    assert step.learning_rate(9) == 0.01
    assert step.learning_rate(25) == pytest.approx(1e-4)


@pytest.mark.parametrize("kw", [dict(alpha=0), dict(momentum=1.0), dict(batch_size=0),
                                dict(weight_decay=-1), dict(lr_schedule="cosine")])
def test_config_validation(kw):
    with pytest.raises(ConfigurationError):
        TrainConfig(**kw)


def test_batches_cover_each_epoch_once():
    n, bs = 10, 4
    per_epoch = 3
    for epoch in range(3):
        batches = [make_batches(n, bs, 7, epoch * per_epoch + i) for i in range(per_epoch)]
        assert [len(b) for b in batches] == [4, 4, 2]
        assert sorted(np.concatenate(batches).tolist()) == list(range(n))
    assert np.array_equal(make_batches(n, bs, 7, 3), make_batches(n, bs, 7, 3))
    assert not np.array_equal(make_batches(n, bs, 7, 0), make_batches(n, bs, 7, 3))
    with pytest.raises(ConfigurationError):
        make_batches(0, 4, 0, 0)


# -- training loop -------------------------------------------------------------

SPEC = spnet.desk_spec(4, canonical_size=32, fc6=32, fc7=32, layers=spnet.parse_layers(
    "conv 8 5 2 0, relu, pool 3 2, conv 16 3 1 1, relu, pool 3 2"))


@pytest.fixture(scope="module")
def synth(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    manifest = data.gen_synthetic(4, 6, 32, seed=3, noise=10, out_dir=root, test_per_class=2)
    mean = data.compute_mean_image(manifest, 32)
    return manifest, mean


def run(synth, iterations, out_dir=None, seed=0, **kw):
    manifest, mean = synth
    state = spnet.init_params(SPEC, seed)
    split = trainer.PreparedSplit(manifest, "train", SPEC, mean)
    cfg = TrainConfig(batch_size=8, iterations=iterations, seed=seed, **kw)
    return state, trainer.train(SPEC, state, split, cfg, out_dir=out_dir,
                                class_names=manifest.class_names)


def test_zero_iterations_returns_initial_state(synth, tmp_path):
    state, result = run(synth, 0, tmp_path)
    init = spnet.init_params(SPEC, 0)
    assert all(np.array_equal(result.checkpoint.state.params[k], v)
               for k, v in init.params.items())
    assert result.losses == [] and result.checkpoint.iteration == 0
    assert (tmp_path / "metrics.log").read_text() == ""


def test_loss_decreases(synth):
    _, result = run(synth, 60)
    assert np.mean(result.losses[-10:]) < 0.7 * np.mean(result.losses[:10])


def test_training_is_deterministic(synth, tmp_path):
    a_dir, b_dir = tmp_path / "a", tmp_path / "b"
    _, ra = run(synth, 12, a_dir, snapshot_interval=6, eval_interval=6)
    _, rb = run(synth, 12, b_dir, snapshot_interval=6, eval_interval=6)
    assert spnet.checkpoint_bytes(ra.checkpoint) == spnet.checkpoint_bytes(rb.checkpoint)
    for name in ("metrics.log", "accuracy.log", "snapshot_iter6.spcn", "snapshot_iter12.spcn"):
        assert (a_dir / name).read_bytes() == (b_dir / name).read_bytes()
    lines = (a_dir / "metrics.log").read_text().splitlines()
    assert len(lines) == 12 and lines[0].startswith("iter 1 loss ")
    assert len(ra.accuracies) == 2
    _, rc = run(synth, 12, seed=1)
    assert spnet.checkpoint_bytes(rc.checkpoint) != spnet.checkpoint_bytes(ra.checkpoint)


def test_resume_matches_straight_run(synth):
    manifest, mean = synth
    straight, _ = run(synth, 10)
    state = spnet.init_params(SPEC, 0)
    split = trainer.PreparedSplit(manifest, "train", SPEC, mean)
    opt = OptimizerState.zeros_like(state.params)
    trainer.train(SPEC, state, split, TrainConfig(batch_size=8, iterations=4), opt=opt)
    trainer.train(SPEC, state, split, TrainConfig(batch_size=8, iterations=6), opt=opt)
    assert all(np.array_equal(state.params[k], straight.params[k]) for k in state.params)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises_with_last_good(synth, tmp_path):
    with pytest.raises(NumericError) as info:
        run(synth, 50, tmp_path, alpha=1e4, momentum=0.0, snapshot_interval=1)
    assert info.value.last_good is not None
    assert (tmp_path / "last_good.spcn").is_file()
    good = spnet.load_checkpoint(tmp_path / "last_good.spcn")
    assert all(np.all(np.isfinite(v)) for v in good.state.params.values())


def test_videos_rejected_from_training(synth, tmp_path):
    manifest, mean = synth
    videos = data.DatasetManifest(manifest.class_names, manifest.entries + [
        data.ManifestEntry("v", 0, "video", "train")], manifest.root)
    with pytest.raises(DataError):
        trainer.PreparedSplit(videos, "train", SPEC, mean, images_only=True)
    split = trainer.PreparedSplit(videos, "train", SPEC, mean)
    with pytest.raises(DataError):
        trainer.train(SPEC, spnet.init_params(SPEC, 0), split, TrainConfig(iterations=1))
