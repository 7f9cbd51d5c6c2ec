import copy
import os

import numpy as np
import pytest

from triad import evaluation, layers, losses, training
from triad.config import ExperimentConfig
from triad.layers import ParameterSet
from triad.seeding import derive_rng
from triad.training import (ARMS, Batch, TrainingError, adamw_update,
                            backbone_spec_from_config, load_dataset,
                            resolve_run_dir, train, triad_step)


def tiny_cfg(**kw):
    base = dict(epochs=2, folds=2, batch_size=8, lr=3e-3, seed=0,
                embed_dim=4, hidden_dim=8, image_size=8,
                gen_n_per_cell=8, gen_test_per_cell=4, gen_canvas=16,
                gen_noise=0.2)
    base.update(kw)
    return ExperimentConfig(**base)


# -- optimizer ----------------------------------------------------------------

def one_param_set(theta, grad):
    pset = ParameterSet("p")
    t = pset.add("w", np.asarray(theta, dtype=np.float64))
    t.grad = None if grad is None else np.asarray(grad, dtype=np.float64)
    return pset


def test_adamw_first_step_hand_computed():
    pset = one_param_set([1.0, -2.0], [1.0, 0.5])
    adamw_update(pset, lr=0.1, weight_decay=0.1)
    # at t=1 the bias corrections cancel: m_hat = g, v_hat = g*g
    theta = np.array([1.0, -2.0])
    g = np.array([1.0, 0.5])
    expected = theta - 0.1 * 0.1 * theta - 0.1 * g / (np.abs(g) + 1e-8)
    assert np.allclose(pset["w"].data, expected, rtol=1e-12, atol=0)
    assert pset.step == 1


def test_adamw_zero_grad_is_pure_decay():
    for grad in (None, [0.0]):
        pset = one_param_set([3.0], grad)
        adamw_update(pset, lr=0.01, weight_decay=0.5)
        expected = 3.0 - 0.01 * 0.5 * 3.0
        assert pset["w"].data[0] == expected


def test_adamw_trajectory_matches_reference_loop():
    rng = np.random.default_rng(0)
    theta = rng.normal(size=4)
    grads = [rng.normal(size=4) for _ in range(5)]
    pset = one_param_set(theta, None)
    m = np.zeros(4)
    v = np.zeros(4)
    ref = theta.copy()
    lr, wd, b1, b2, eps = 2e-3, 0.01, 0.9, 0.999, 1e-8
    for t, g in enumerate(grads, start=1):
        pset["w"].grad = g.copy()
        adamw_update(pset, lr=lr, weight_decay=wd)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        ref = ref - lr * wd * ref - lr * m_hat / (np.sqrt(v_hat) + eps)
        assert np.allclose(pset["w"].data, ref, rtol=1e-12, atol=0)


def test_adamw_decay_decoupled_from_gradient_scale():
    # the decay contribution is lr*wd*theta regardless of gradient size
    big = one_param_set([10.0], [1000.0])
    small = one_param_set([10.0], [1e-3])
    adamw_update(big, lr=0.1, weight_decay=0.2)
    adamw_update(small, lr=0.1, weight_decay=0.2)
    adaptive_big = 10.0 - 0.1 * 0.2 * 10.0 - big["w"].data[0]
    adaptive_small = 10.0 - 0.1 * 0.2 * 10.0 - small["w"].data[0]
    assert abs(adaptive_big - 0.1) < 1e-6
    assert abs(adaptive_small - 0.1) < 1e-4


# -- one triad step against recomputation ------------------------------------

def make_batches(rng, n=8, d=8):
    labels = np.array([0, 1] * (n // 2))
    batch_p = Batch(rng.normal(size=(n, 1, d, d)), labels)
    batch_a = Batch(rng.normal(size=(n, 1, d, d)), labels[::-1].copy())
    return batch_p, batch_a


def init_triad(cfg, shape):
    spec = backbone_spec_from_config(cfg, shape)
    return spec, {path: layers.init_path_params(
        spec, derive_rng(0, "t", path), path)
        for path in ("common", "pediatric", "adult")}


def test_triad_step_matches_manual_backward_and_update():
    cfg = tiny_cfg(lr=0.01, weight_decay=0.1)
    rng = np.random.default_rng(1)
    batch_p, batch_a = make_batches(rng)
    spec, psets = init_triad(cfg, batch_p.images.shape)
    shadow = copy.deepcopy(psets)

    breakdown = triad_step(batch_p, batch_a, psets["common"],
                           psets["pediatric"], psets["adult"], cfg)

    arm = ARMS["triad_full"]
    batches = training._arm_batches(arm, batch_p, batch_a)
    components = training._arm_components(arm, shadow, spec, cfg, batches)
    ref_breakdown, total = losses.total_loss(components, training._weights(cfg))
    for pset in shadow.values():
        pset.zero_grad()
    total.backward()

    assert breakdown.as_row() == ref_breakdown.as_row()
    for path, pset in psets.items():
        for name, tensor in pset.params.items():
            theta = shadow[path].params[name].data
            g = shadow[path].params[name].grad
            expected = (theta - 0.01 * 0.1 * theta
                        - 0.01 * g / (np.abs(g) + 1e-8))
            assert np.allclose(tensor.data, expected, rtol=1e-10,
                               atol=1e-14), (path, name)


def test_zero_classifier_weight_leaves_classifier_at_pure_decay():
    # with lambda_cls 0 the focal group leaves the graph entirely, so the
    # classifier parameters see no gradient from any path
    cfg = tiny_cfg(lambda_cls=0.0, lr=0.01, weight_decay=0.2)
    rng = np.random.default_rng(2)
    batch_p, batch_a = make_batches(rng)
    spec, psets = init_triad(cfg, batch_p.images.shape)
    before = {path: {name: t.data.copy() for name, t in p.params.items()}
              for path, p in psets.items()}

    triad_step(batch_p, batch_a, psets["common"], psets["pediatric"],
               psets["adult"], cfg)

    for path, pset in psets.items():
        for name in ("clf.w", "clf.b"):
            old = before[path][name]
            expected = old - 0.01 * 0.2 * old
            assert np.array_equal(pset.params[name].data, expected), \
                (path, name)
        conv_old = before[path]["bb.conv0.w"]
        decay_only = conv_old - 0.01 * 0.2 * conv_old
        assert not np.allclose(pset.params["bb.conv0.w"].data, decay_only,
                               rtol=0, atol=1e-12)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts_with_location():
    cfg = tiny_cfg()
    rng = np.random.default_rng(3)
    batch_p, batch_a = make_batches(rng)
    batch_p.images[0, 0, 0, 0] = np.inf
    _, psets = init_triad(cfg, batch_p.images.shape)
    with pytest.raises(TrainingError, match="non-finite loss component"):
        triad_step(batch_p, batch_a, psets["common"], psets["pediatric"],
                   psets["adult"], cfg)


# -- full runs ----------------------------------------------------------------

def run_files(run_dir):
    names = sorted(os.listdir(run_dir))
    return [n for n in names if n != "config.txt" and
            os.path.isfile(os.path.join(run_dir, n))]


def assert_same_run_bytes(dir_a, dir_b):
    files_a = run_files(dir_a)
    assert files_a == run_files(dir_b)
    assert any(n.endswith(".ckpt") for n in files_a)
    for name in files_a:
        a = open(os.path.join(dir_a, name), "rb").read()
        b = open(os.path.join(dir_b, name), "rb").read()
        assert a == b, name


def test_same_config_runs_are_byte_identical(tmp_path):
    cfg = tiny_cfg(arm="joint_contrastive")
    dir_a = train(cfg.replace(run_dir=str(tmp_path / "a")))
    dir_b = train(cfg.replace(run_dir=str(tmp_path / "b")))
    assert_same_run_bytes(dir_a, dir_b)


def test_resume_after_lost_checkpoint_matches_clean_run(tmp_path):
    # crash window: the fold-1 logs were written but its checkpoints were
    # not; the rerun must drop the stale rows and reproduce them exactly
    cfg = tiny_cfg(arm="joint", epochs=1)
    clean = train(cfg.replace(run_dir=str(tmp_path / "clean")))
    crashed = str(tmp_path / "crashed")
    train(cfg.replace(run_dir=crashed))
    os.remove(os.path.join(crashed, "best-fold1.ckpt"))
    os.remove(os.path.join(crashed, "last-fold1.ckpt"))
    train(cfg.replace(run_dir=crashed))
    assert_same_run_bytes(clean, crashed)


def test_epoch_extension_resume_matches_straight_run(tmp_path):
    cfg = tiny_cfg(arm="pediatric_only")
    straight = train(cfg.replace(run_dir=str(tmp_path / "straight")))
    resumed = str(tmp_path / "resumed")
    train(cfg.replace(run_dir=resumed, epochs=1))
    train(cfg.replace(run_dir=resumed))
    assert_same_run_bytes(straight, resumed)


def test_finished_run_is_a_no_op(tmp_path):
    cfg = tiny_cfg(arm="adult_only", run_dir=str(tmp_path / "run"))
    train(cfg)
    stamps = {n: os.path.getmtime(os.path.join(cfg.run_dir, n))
              for n in run_files(cfg.run_dir)}
    before = {n: open(os.path.join(cfg.run_dir, n), "rb").read()
              for n in stamps}
    train(cfg)
    after = {n: open(os.path.join(cfg.run_dir, n), "rb").read()
             for n in stamps}
    assert before == after


def test_zero_weight_triad_common_path_equals_joint(tmp_path):
    # with both auxiliary loss groups at weight zero, the shared path's
    # training is bit-identical to the plain joint arm
    base = tiny_cfg(folds=1, lambda_cont=0.0, lambda_emb=0.0)
    dataset = load_dataset(base, data_dir=str(tmp_path / "data"))
    dir_j = train(base.replace(arm="joint", run_dir=str(tmp_path / "j")),
                  dataset=dataset)
    dir_t = train(base.replace(arm="triad_full", run_dir=str(tmp_path / "t")),
                  dataset=dataset)
    assert open(os.path.join(dir_j, "epochs.csv")).read() \
        == open(os.path.join(dir_t, "epochs.csv")).read()
    spec = backbone_spec_from_config(base, (1,) + dataset.input_shape)
    psets_j = evaluation.load_arm_checkpoint(dir_j, "joint", spec, 0,
                                             kind="last")
    psets_t = evaluation.load_arm_checkpoint(dir_t, "triad_full", spec, 0,
                                             kind="last")
    for name, tensor in psets_j["common"].params.items():
        assert np.array_equal(tensor.data,
                              psets_t["common"].params[name].data), name


def test_pediatric_only_never_reads_adult_inputs(tmp_path):
    cfg = tiny_cfg(arm="pediatric_only", epochs=1,
                   run_dir=str(tmp_path / "run"))
    dataset = load_dataset(cfg, data_dir=str(tmp_path / "data"))
    dataset.reset_read_counts()
    train(cfg, dataset=dataset)
    assert dataset.read_counts[dataset.indices(domain="A")].sum() == 0
    assert dataset.read_counts[
        dataset.indices(split="train", domain="P")].sum() > 0
    assert dataset.read_counts[dataset.indices(split="test")].sum() == 0


def test_adult_training_independent_of_pediatric_content(tmp_path):
    # every arm picks its best epoch on the held-out pediatric fold, so an
    # adult arm reads those images for scoring; scrambling them must change
    # the validation numbers but not one bit of the trained weights
    from triad import data as triad_data

    cfg = tiny_cfg(arm="adult_only_contrastive")
    manifest = os.path.join(str(tmp_path / "data"), "manifest.txt")
    load_dataset(cfg, data_dir=str(tmp_path / "data"))

    def processed(scramble):
        raw = triad_data.ingest_manifest(manifest)
        if scramble:
            rng = np.random.default_rng(99)
            for sample in raw.samples:
                if sample.domain == "P":
                    sample.image = rng.normal(size=sample.image.shape)
        return triad_data.preprocess(raw, target_size=cfg.image_size,
                                     pad_fraction=cfg.pad_fraction)

    dir_a = train(cfg.replace(run_dir=str(tmp_path / "clean")),
                  dataset=processed(False))
    dir_b = train(cfg.replace(run_dir=str(tmp_path / "scrambled")),
                  dataset=processed(True))
    assert open(os.path.join(dir_a, "epochs.csv")).read() \
        != open(os.path.join(dir_b, "epochs.csv")).read()
    spec = backbone_spec_from_config(cfg, (1, 1, 8, 8))
    for fold in range(cfg.folds):
        got = evaluation.load_arm_checkpoint(dir_a, cfg.arm, spec, fold,
                                             kind="last")["adult"]
        ref = evaluation.load_arm_checkpoint(dir_b, cfg.arm, spec, fold,
                                             kind="last")["adult"]
        for name, tensor in got.params.items():
            assert np.array_equal(tensor.data, ref.params[name].data), name
            assert np.array_equal(got.opt_m[name], ref.opt_m[name]), name


def test_zero_epochs_saves_initial_state(tmp_path):
    cfg = tiny_cfg(epochs=0, folds=1, arm="joint",
                   run_dir=str(tmp_path / "run"))
    run_dir = train(cfg)
    assert os.path.exists(os.path.join(run_dir, "config.txt"))
    assert os.path.exists(os.path.join(run_dir, "best-fold0.ckpt"))
    steps = open(os.path.join(run_dir, "steps.csv")).read().splitlines()
    assert len(steps) == 1 and steps[0].startswith("step,epoch,fold")


def test_training_reduces_loss_on_easy_data(tmp_path):
    cfg = tiny_cfg(arm="joint", folds=1, epochs=4, lr=3e-3,
                   gen_separation=2.0, gen_noise=0.1,
                   run_dir=str(tmp_path / "run"))
    run_dir = train(cfg)
    rows = open(os.path.join(run_dir, "steps.csv")).read().splitlines()[1:]
    header = open(os.path.join(run_dir, "steps.csv")).readline().strip()
    total_col = header.split(",").index("total")
    totals = [float(r.split(",")[total_col]) for r in rows]
    assert np.mean(totals[-2:]) < np.mean(totals[:2])


def test_epoch_log_shape_and_alignment_column(tmp_path):
    cfg = tiny_cfg(arm="triad_full", run_dir=str(tmp_path / "t"))
    run_dir = train(cfg)
    lines = open(os.path.join(run_dir, "epochs.csv")).read().splitlines()
    assert lines[0] == "epoch,fold,val_auroc,val_alignment"
    assert len(lines) == 1 + cfg.epochs * cfg.folds
    for line in lines[1:]:
        epoch, fold, auroc, align = line.split(",")
        assert 0.0 <= float(auroc) <= 1.0
        assert np.isfinite(float(align))
    single = train(tiny_cfg(arm="adult_only", epochs=1, folds=1,
                            run_dir=str(tmp_path / "a")))
    row = open(os.path.join(single, "epochs.csv")).read().splitlines()[1]
    assert row.endswith(",nan")


# -- plumbing -----------------------------------------------------------------

def test_resolve_run_dir_layers(tmp_path, monkeypatch):
    explicit = tiny_cfg(run_dir="chosen/dir")
    assert resolve_run_dir(explicit) == "chosen/dir"
    monkeypatch.delenv("TRIAD_RUN_DIR", raising=False)
    assert resolve_run_dir(tiny_cfg(arm="joint", seed=3)) \
        == os.path.join("runs", "joint-seed3")
    monkeypatch.setenv("TRIAD_RUN_DIR", str(tmp_path))
    assert resolve_run_dir(tiny_cfg(arm="joint", seed=3)) \
        == os.path.join(str(tmp_path), "joint-seed3")


def test_load_dataset_reuses_generated_data(tmp_path):
    cfg = tiny_cfg()
    data_dir = str(tmp_path / "data")
    first = load_dataset(cfg, data_dir=data_dir)
    marker = os.path.getmtime(os.path.join(data_dir, "manifest.txt"))
    second = load_dataset(cfg, data_dir=data_dir)
    assert os.path.getmtime(os.path.join(data_dir, "manifest.txt")) == marker
    assert np.array_equal(first.inputs(np.arange(4)),
                          second.inputs(np.arange(4)))


def test_load_dataset_rejects_mode_mismatch(tmp_path):
    from triad.config import ConfigError
    cfg = tiny_cfg(backbone="vector", gen_mode="image")
    with pytest.raises(ConfigError, match="cannot consume"):
        load_dataset(cfg, data_dir=str(tmp_path / "d"))


def test_backbone_spec_from_config_shapes():
    conv = backbone_spec_from_config(tiny_cfg(embed_dim=6), (4, 3, 16, 16))
    assert (conv.mode, conv.input_size, conv.in_channels, conv.embed_dim) \
        == ("conv", 16, 3, 6)
    vec = backbone_spec_from_config(
        tiny_cfg(backbone="vector", hidden_dim=9, embed_dim=5), (4, 12))
    assert (vec.mode, vec.vector_dim, vec.hidden, vec.embed_dim) \
        == ("vector", 12, 9, 5)


def test_data_seed_controls_generation_not_training(tmp_path):
    # two runs differing only in `seed` share the dataset when data_seed
    # pins it, and still train differently
    base = tiny_cfg(data_seed=7, epochs=1, folds=1, arm="joint")
    ds_a = load_dataset(base.replace(seed=1), str(tmp_path / "da"))
    ds_b = load_dataset(base.replace(seed=2), str(tmp_path / "db"))
    assert np.array_equal(ds_a.inputs(np.arange(len(ds_a))),
                          ds_b.inputs(np.arange(len(ds_b))))
    dir_a = train(base.replace(seed=1, run_dir=str(tmp_path / "a")), ds_a)
    dir_b = train(base.replace(seed=2, run_dir=str(tmp_path / "b")), ds_b)
    assert open(os.path.join(dir_a, "steps.csv")).read() \
        != open(os.path.join(dir_b, "steps.csv")).read()
