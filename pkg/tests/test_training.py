import io

import numpy as np
import pytest

from meshseg.mesh import build_cell_features
from meshseg.model import ModelConfig, build_variant, load_model
from meshseg.synth import ArchSpec, generate
from meshseg.tensor import Parameter, Tensor
from meshseg.training import (
    Adam,
    TrainConfig,
    TrainingError,
    augment_mesh,
    load_optimizer_state,
    lr_at_epoch,
    parse_log,
    rotation_y,
    save_optimizer_state,
    train,
)


def small_model(seed=0, classes=3):
    cfg = ModelConfig(num_classes=classes, k_neighbors=4, stream_widths=(4, 8, 8),
                      fusion_width=16, head_widths=(16, 8), seed=seed).validate()
    return build_variant(cfg)


def small_meshes(n=2, seed=1):
    return [generate(ArchSpec(num_teeth=2, cells_target=260, seed=seed + i))
            for i in range(n)]


def quick_config(**overrides):
    base = dict(epochs=2, batch_size=2, lr0=1e-3, augment=False, seed=7)
    base.update(overrides)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# adam
# ---------------------------------------------------------------------------

def test_adam_zero_gradient_fixed_point():
    t = Tensor(np.array([1.5, -2.0], dtype=np.float32), requires_grad=True)
    adam = Adam([Parameter("w", t)])
    for _ in range(3):
        t.grad = np.zeros_like(t.data)
        adam.step(lr=1e-3)
    assert np.array_equal(t.data, np.array([1.5, -2.0], dtype=np.float32))


def test_adam_first_step_hand_value():
    # bias-corrected m_hat / sqrt(v_hat) = 1 for a constant unit gradient
    t = Tensor(np.array([0.0]), requires_grad=True, dtype=np.float64)
    adam = Adam([Parameter("w", t)])
    t.grad = np.array([1.0])
    adam.step(lr=1e-3)
    assert t.data[0] == pytest.approx(-1e-3, rel=1e-6)
    assert t.grad is None  # cleared after the step


def test_adam_missing_gradient_names_parameter():
    t = Tensor(np.zeros(2), requires_grad=True)
    adam = Adam([Parameter("stream.weight", t)])
    with pytest.raises(TrainingError) as exc:
        adam.step(1e-3)
    assert "stream.weight" in str(exc.value)


def test_optimizer_state_round_trip(tmp_path):
    t = Tensor(np.array([1.0, 2.0]), requires_grad=True, dtype=np.float64)
    adam = Adam([Parameter("w", t)])
    for step in range(3):
        t.grad = np.array([0.5, -0.25]) * (step + 1)
        adam.step(1e-3)
    path = tmp_path / "opt.npz"
    save_optimizer_state(adam, epoch=4, path=path)
    adam2 = Adam([Parameter("w", t)])
    resume_epoch = load_optimizer_state(adam2, path)
    assert resume_epoch == 5
    assert adam2.state.step == adam.state.step
    assert np.array_equal(adam2.state.m["w"], adam.state.m["w"])
    assert np.array_equal(adam2.state.v["w"], adam.state.v["w"])


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------

def test_lr_schedule_closed_form():
    cfg = TrainConfig()
    for e in range(200):
        assert lr_at_epoch(cfg, e) == pytest.approx(1e-3 * 0.5 ** (e // 20))
    assert lr_at_epoch(cfg, 0) == pytest.approx(1e-3)
    assert lr_at_epoch(cfg, 19) == pytest.approx(1e-3)
    assert lr_at_epoch(cfg, 20) == pytest.approx(5e-4)
    assert lr_at_epoch(cfg, 39) == pytest.approx(5e-4)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def test_augment_zero_range_is_identity():
    mesh = small_meshes(1)[0]
    out = augment_mesh(mesh, np.random.default_rng(0), 0.0, 0.0)
    assert np.array_equal(out.vertices, mesh.vertices)
    assert np.array_equal(out.faces, mesh.faces)


def test_augment_preserves_labels_and_faces():
    mesh = small_meshes(1)[0]
    out = augment_mesh(mesh, np.random.default_rng(1), 10.0, np.pi / 6)
    assert np.array_equal(out.faces, mesh.faces)
    assert np.array_equal(out.labels, mesh.labels)
    assert not np.allclose(out.vertices, mesh.vertices)


def test_pure_translation_keeps_normals_block():
    mesh = small_meshes(1)[0]
    out = augment_mesh(mesh, np.random.default_rng(2), 10.0, 0.0)
    a = build_cell_features(mesh, center=False)
    b = build_cell_features(out, center=False)
    assert np.allclose(a.normals, b.normals, atol=1e-6)
    assert not np.allclose(a.coords, b.coords)


def test_rotation_maps_normals_by_rotation_matrix():
    mesh = small_meshes(1)[0]
    seed = 11
    # replay the augmentation draws to recover the sampled angle
    probe = np.random.default_rng(seed)
    probe.uniform(-0.0, 0.0, size=3)
    theta = probe.uniform(-np.pi / 6, np.pi / 6)
    out = augment_mesh(mesh, np.random.default_rng(seed), 0.0, np.pi / 6)
    rot = rotation_y(theta)
    a = build_cell_features(mesh, center=False).normals
    b = build_cell_features(out, center=False).normals
    for k in range(4):
        sl = slice(3 * k, 3 * k + 3)
        assert np.allclose(b[:, sl], a[:, sl] @ rot.T, atol=1e-5)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def test_zero_epochs_is_noop():
    model = small_model()
    before = [p.tensor.data.copy() for p in model.parameters()]
    records, _ = train(model, small_meshes(), quick_config(epochs=0))
    assert records == []
    for p, b in zip(model.parameters(), before):
        assert np.array_equal(p.tensor.data, b)


def test_training_runs_and_logs():
    model = small_model()
    log = io.StringIO()
    records, _ = train(model, small_meshes(), quick_config(epochs=3), log_fh=log)
    assert len(records) == 3
    assert all(np.isfinite(r.mean_loss) for r in records)
    assert [r.epoch for r in records] == [0, 1, 2]
    lines = [l for l in log.getvalue().splitlines() if l]
    assert len(lines) == 3


def test_lr_decay_visible_in_records():
    model = small_model()
    cfg = quick_config(epochs=4, decay_every=2, decay_factor=0.5)
    records, _ = train(model, small_meshes(), cfg)
    assert [r.lr for r in records] == pytest.approx([1e-3, 1e-3, 5e-4, 5e-4])


def test_equal_seeds_give_identical_trajectories():
    results = []
    for _ in range(2):
        model = small_model(seed=4)
        train(model, small_meshes(), quick_config(epochs=2, augment=True))
        results.append([p.tensor.data.copy() for p in model.parameters()])
    for a, b in zip(*results):
        assert np.array_equal(a, b)


def test_resume_equals_uninterrupted(tmp_path):
    meshes = small_meshes()
    cfg = quick_config(epochs=4, augment=True)

    straight = small_model(seed=9)
    train(straight, meshes, cfg)

    resumed = small_model(seed=9)
    ckpt = tmp_path / "mid.ckpt"
    cfg_half = quick_config(epochs=2, augment=True)
    _, adam = train(resumed, meshes, cfg_half, checkpoint_path=ckpt)

    restored = load_model(ckpt)
    adam2 = Adam(restored.parameters(), cfg.beta1, cfg.beta2, cfg.eps)
    start = load_optimizer_state(adam2, str(ckpt) + ".opt.npz")
    assert start == 2
    train(restored, meshes, cfg, adam=adam2, start_epoch=start)

    for pa, pb in zip(straight.parameters(), restored.parameters()):
        assert np.array_equal(pa.tensor.data, pb.tensor.data), pa.name


def test_heterogeneous_cell_counts_rejected():
    model = small_model()
    meshes = [generate(ArchSpec(num_teeth=2, cells_target=260, seed=0)),
              generate(ArchSpec(num_teeth=2, cells_target=520, seed=1))]
    with pytest.raises(TrainingError):
        train(model, meshes, quick_config())


def test_missing_labels_rejected():
    model = small_model()
    mesh = small_meshes(1)[0]
    mesh.labels = None
    with pytest.raises(TrainingError):
        train(model, [mesh], quick_config())


def test_nan_loss_aborts_with_batch_diagnostic():
    model = small_model()
    model.param_dict()["out.weight"].tensor.data[0, 0] = np.nan
    with pytest.raises(TrainingError) as exc:
        train(model, small_meshes(), quick_config())
    msg = str(exc.value)
    assert "epoch 0" in msg and "batch" in msg


def test_log_round_trip(tmp_path):
    model = small_model()
    path = tmp_path / "log.tsv"
    with open(path, "w") as fh:
        fh.write("epoch\tlr\tmean_loss\ttrain_oa\n")
        records, _ = train(model, small_meshes(), quick_config(epochs=2), log_fh=fh)
    back = parse_log(path)
    assert len(back) == 2
    assert back[0].epoch == records[0].epoch
    assert back[0].lr == pytest.approx(records[0].lr)
    assert back[1].mean_loss == pytest.approx(records[1].mean_loss, abs=1e-6)


def test_fixed_augmentation_doubles_dataset():
    from meshseg.training import prepare_training_meshes

    meshes = small_meshes(2)
    cfg = quick_config(fixed_augmentation=True, augment=True)
    prepared = prepare_training_meshes(meshes, cfg)
    assert len(prepared) == 4
    # originals are centered copies; augmented ones differ
    assert not np.allclose(prepared[0].vertices, prepared[2].vertices)
    assert np.array_equal(prepared[0].labels, prepared[2].labels)
