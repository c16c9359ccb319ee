import numpy as np
import pytest

from nightstereo import config as config_mod
from nightstereo.config import MODEL_FIELDS, RunConfig, paper_recipe, resolve
from nightstereo.diffmath import Tensor
from nightstereo.errors import ConfigurationError, FormatError, TrainingStepError, VersionError
from nightstereo.features import RawFeatureMap
from nightstereo.model import StereoModel
from nightstereo.synth import gen_scene, oracle_channels, oracle_features, random_scene_spec, scene_set
from nightstereo.training import (evaluate, infer, load_checkpoint, predict, save_checkpoint, step_batch,
                                  total_steps, train)
from nightstereo import imageio


def tiny(**kw):
    return RunConfig(**{"height": 32, "width": 32, "dim": 8, "hidden": 4, "steps": 2, "batch": 2,
                        "lr": 1e-3, "seed": 3, **kw})


@pytest.fixture(scope="module")
def tiny_items():
    return scene_set(4, seed=2, height=32, width=32, disparity_range=(1, 4))


# ------------------------------------------------------------------ config

def test_paper_recipe_round_trips_verbatim(tmp_path):
    cfg = paper_recipe()
    assert (cfg.batch, cfg.epochs, cfg.height, cfg.width, cfg.lr) == (8, 20, 192, 320, 1e-4)
    cfg.save(tmp_path / "c.txt")
    back = config_mod.load(tmp_path / "c.txt")
    assert back == cfg
    assert back.dumps() == (tmp_path / "c.txt").read_text()


def test_defaults_match_published_constants():
    cfg = RunConfig()
    assert (cfg.zeta, cfg.gamma, cfg.alpha, cfg.beta1, cfg.beta2, cfg.lr, cfg.bins, cfg.max_depth) == \
        (0.2, 2.0, 0.15, 1.0, 0.1, 1e-4, 10, 50.0)
    assert (cfg.batch, cfg.steps, cfg.height, cfg.width) == (2, 300, 64, 96)


def test_resolve_precedence(tmp_path):
    (tmp_path / "c.txt").write_text("dim=32\nseed=5\nlr=0.01\n")
    cfg = resolve(str(tmp_path / "c.txt"), {"dim": 16, "lr": None}, env={})
    assert (cfg.dim, cfg.seed, cfg.lr) == (16, 5, 0.01)
    cfg = resolve(str(tmp_path / "c.txt"), {"seed": 9}, env={"NSL_SEED": "42"})
    assert cfg.seed == 42


@pytest.mark.parametrize("text,err", [("dims=3\n", ConfigurationError), ("dim 3\n", FormatError),
                                      ("dim=three\n", ConfigurationError), ("zeta=3\n", ConfigurationError),
                                      ("height=60\n", ConfigurationError), ("encoder=dino\n", ConfigurationError)])
def test_bad_config_files(tmp_path, text, err):
    (tmp_path / "c.txt").write_text(text)
    with pytest.raises(err):
        resolve(str(tmp_path / "c.txt"), env={})


def test_model_hash_tracks_model_fields_only():
    base = RunConfig()
    assert base.model_hash() == RunConfig(lr=0.5, seed=7, steps=1).model_hash()
    changes = {"encoder": "files", "height": 72, "width": 104, "dim": 64, "zeta": 0.3, "radius": 4, "hidden": 32}
    assert set(changes) == set(MODEL_FIELDS)
    for f, changed in changes.items():
        assert RunConfig(**{f: changed}).model_hash() != base.model_hash()


# ------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip(tmp_path):
    cfg = tiny()
    model = StereoModel.create(cfg)
    save_checkpoint(tmp_path / "ck", model, cfg)
    back, cfg2, state = load_checkpoint(tmp_path / "ck", expected=cfg)
    assert cfg2 == cfg and state is None
    a, b = model.parameters(), back.parameters()
    assert list(a) == list(b)
    assert all(a[k].data.tobytes() == b[k].data.tobytes() for k in a)
    manifest = (tmp_path / "ck" / "manifest.txt").read_text()
    assert f"config_hash={cfg.model_hash()}" in manifest and "param head.w1 " in manifest


def test_checkpoint_mismatch_is_version_error(tmp_path):
    cfg = tiny()
    save_checkpoint(tmp_path / "ck", StereoModel.create(cfg), cfg)
    with pytest.raises(VersionError):
        load_checkpoint(tmp_path / "ck", expected=tiny(dim=16))
    with pytest.raises(VersionError):
        load_checkpoint(tmp_path / "nothing")
    (tmp_path / "ck" / "manifest.txt").write_text("format=7\n")
    with pytest.raises(VersionError):
        load_checkpoint(tmp_path / "ck")


def test_tampered_parameter_shapes(tmp_path):
    cfg = tiny()
    save_checkpoint(tmp_path / "ck", StereoModel.create(cfg), cfg)
    path = tmp_path / "ck" / "manifest.txt"
    path.write_text(path.read_text().replace("param head.w1 8x64", "param head.w1 8x65"))
    with pytest.raises(VersionError):
        load_checkpoint(tmp_path / "ck")


# ---------------------------------------------------------------- training

def test_batches_depend_only_on_seed_and_step():
    cfg = tiny()
    assert step_batch(cfg, 5, 10).tolist() == step_batch(cfg, 5, 10).tolist()
    assert total_steps(tiny(epochs=3, batch=3), 10) == 12
    assert total_steps(tiny(steps=7), 10) == 7


def test_training_is_deterministic(tmp_path, tiny_items):
    a = train(tiny(), tiny_items, out=tmp_path / "a")
    b = train(tiny(), tiny_items, out=tmp_path / "b")
    assert (tmp_path / "a" / "loss_trace.csv").read_bytes() == (tmp_path / "b" / "loss_trace.csv").read_bytes()
    assert (tmp_path / "a" / "checkpoint" / "params.nslt").read_bytes() == \
        (tmp_path / "b" / "checkpoint" / "params.nslt").read_bytes()
    assert a.state.step == 2 and len(a.trace) == 2


def test_resume_reproduces_next_step_bitwise(tmp_path, tiny_items):
    cfg = tiny(steps=3)
    straight = train(cfg, tiny_items, out=tmp_path / "s")
    train(cfg, tiny_items, out=tmp_path / "r", max_steps=2)
    resumed = train(cfg, tiny_items, out=tmp_path / "r", resume=tmp_path / "r" / "checkpoint")
    assert resumed.state.step == 3
    assert resumed.trace[-1] == straight.trace[-1]
    for k, p in straight.model.parameters().items():
        assert p.data.tobytes() == resumed.model.parameters()[k].data.tobytes()
    assert (tmp_path / "s" / "loss_trace.csv").read_bytes() == (tmp_path / "r" / "loss_trace.csv").read_bytes()


def test_resume_with_other_model_config(tmp_path, tiny_items):
    train(tiny(), tiny_items, out=tmp_path / "r", max_steps=1)
    with pytest.raises(VersionError):
        train(tiny(dim=16), tiny_items, resume=tmp_path / "r" / "checkpoint")


def test_non_finite_loss_aborts_with_last_good_checkpoint(tmp_path, tiny_items):
    bad = gen_scene(random_scene_spec(1, 32, 32))
    bad.left = bad.left.copy()
    bad.left[0, 0, 0] = np.nan
    with pytest.raises(TrainingStepError):
        train(tiny(batch=1, steps=1), [bad], out=tmp_path)
    model, _, state = load_checkpoint(tmp_path / "checkpoint")
    assert state.step == 0


def test_training_rejects_bad_inputs(tiny_items):
    with pytest.raises(ConfigurationError):
        train(tiny(), [])
    with pytest.raises(ConfigurationError):
        train(tiny(height=64), tiny_items)


# -------------------------------------------------------- evaluate / infer

def _oracle_inputs(item):
    fl, fr = oracle_features(item, 4)
    cl, cr = oracle_features(item, 8)
    as_raw = lambda f, c: RawFeatureMap(Tensor(f.transpose(2, 0, 1).copy()), Tensor(c.transpose(2, 0, 1).copy()),
                                        "file")
    return as_raw(fl, cl), as_raw(fr, cr)


def test_oracle_model_recovers_single_plane_scene():
    H, W = 64, 192
    model = StereoModel.oracle(oracle_channels(H, W))
    item = gen_scene(random_scene_spec(0, H, W, disparity_range=(8, 8), foreground=0))
    d = model(*_oracle_inputs(item)).match.disparity.values.data
    err = np.abs(d - item.disparity)[item.valid]
    assert np.mean(err < 0.5) > 0.95


def test_infer_writes_matching_dims(tmp_path, tiny_items):
    model = StereoModel.create(tiny())
    paths = infer(model, tiny_items[0], tmp_path)
    pfm = imageio.read_pfm(paths["pfm"])
    assert pfm.shape == (32, 32)
    assert (paths["pfm"].read_bytes()[:3]) == b"Pf\n"
    assert imageio.read_mask(paths["mask"]).shape == (32, 32)
    np.testing.assert_allclose(imageio.read_png16(paths["png"], imageio.PNG_DISPARITY_SCALE),
                               np.round(predict(model, tiny_items[0]).match.disparity.values.data * 256) / 256,
                               atol=1e-12)


def test_evaluate_reports_epe_and_depth(tiny_items):
    ev = evaluate(StereoModel.create(tiny()), tiny_items[:2], tiny())
    assert ev.images == 2 and np.isfinite(ev.epe) and 0 <= ev.epe_fraction <= 1
    assert ev.report.max_depth == 50.0


@pytest.mark.slow
def test_default_recipe_halves_photometric_loss():
    items = scene_set(32, seed=1, height=64, width=96)
    result = train(RunConfig(steps=300), items)
    first = result.trace[0]["photo"]
    late = float(np.mean([r["photo"] for r in result.trace[-10:]]))
    assert late <= 0.5 * first, (first, late)
