"""
Tests for the toy trainer and Controlled Label Injection
"""
import math
import os
import sys

import numpy as np
import pytest

# Add parent directory to path to import modules
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from divscan.errors import ValidationError
from divscan.toytrain import (
    INF_CYCLE,
    InjectionConfig,
    SyntheticTask,
    ToyModel,
    centroid_init_head,
    contrastive_loss_and_grads,
    control_cycle_sweep,
    controlled_label_injection,
    cross_entropy_and_grads,
    diversity_trace,
    evaluate,
    make_task,
    minibatch_indices,
    model_from_bundle,
    model_to_bundle,
    parse_control_cycle,
    pretrain_instance_discrimination,
)


def _setup(seed: int = 0):
    task = make_task(n_classes=3, dim=4, n_per_class=20, seed=seed)
    model = ToyModel.init(task.dim, 6, task.n_classes, seed=seed)
    return task, model


def _rel_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-3)


def test_config_validation():
    assert parse_control_cycle("inf") == INF_CYCLE
    assert parse_control_cycle("3") == 3
    with pytest.raises(ValidationError):
        parse_control_cycle("0")
    with pytest.raises(ValidationError):
        InjectionConfig(steps=0)
    with pytest.raises(ValidationError):
        InjectionConfig(control_cycle=0)
    with pytest.raises(ValidationError):
        InjectionConfig(lr=0.0)
    with pytest.raises(ValidationError):
        SyntheticTask(means=[[0.0, 0.0], [0.0, 0.0]], sigma=1.0, n_per_class=3)


def test_schedule_flags():
    task, model = _setup()
    result = controlled_label_injection(model, task, InjectionConfig(control_cycle=3, steps=10, batch_size=8))
    flagged = [r.step for r in result.log if r.backbone_updated]
    assert flagged == [3, 6, 9]

    for cycle in (1, 2, 3, 5, 10):
        run = controlled_label_injection(model, task, InjectionConfig(control_cycle=cycle, steps=23, batch_size=8))
        assert run.backbone_updates == 23 // cycle


def test_full_finetuning_matches_joint_loop():
    task, model = _setup(1)
    cfg = InjectionConfig(control_cycle=1, steps=15, lr=0.05, batch_size=7, seed=4)
    result = controlled_label_injection(model, task, cfg)

    ref = model.copy()
    batches = minibatch_indices(task.n, cfg.batch_size, cfg.seed)
    for _ in range(cfg.steps):
        idx = next(batches)
        _, _, grads = cross_entropy_and_grads(ref, task.x[idx], task.y[idx], backbone=True)
        ref.w_ff = ref.w_ff - cfg.lr * grads["w_ff"]
        ref.b_ff = ref.b_ff - cfg.lr * grads["b_ff"]
        ref.w1 = ref.w1 - cfg.lr * grads["w1"]
        ref.b1 = ref.b1 - cfg.lr * grads["b1"]

    for name in ("w1", "b1", "w_ff", "b_ff"):
        assert np.array_equal(getattr(result.model, name), getattr(ref, name))


def test_linear_probing_keeps_backbone():
    task, model = _setup(2)
    result = controlled_label_injection(model, task, InjectionConfig(control_cycle=INF_CYCLE, steps=30))
    assert np.array_equal(result.model.w1, model.w1)
    assert np.array_equal(result.model.b1, model.b1)
    assert not np.array_equal(result.model.w_ff, model.w_ff)
    assert result.backbone_updates == 0


def test_head_only_loss_non_increasing():
    task, model = _setup(3)
    cfg = InjectionConfig(control_cycle=INF_CYCLE, steps=50, lr=1e-3, batch_size=task.n)
    losses = [r.loss for r in controlled_label_injection(model, task, cfg).log]
    assert all(b <= a for a, b in zip(losses, losses[1:]))


def test_determinism():
    task, model = _setup(4)
    cfg = InjectionConfig(control_cycle=2, steps=12, batch_size=5, seed=9)
    a = controlled_label_injection(model, task, cfg).model
    b = controlled_label_injection(model, task, cfg).model
    assert all(np.array_equal(getattr(a, n), getattr(b, n)) for n in ("w1", "b1", "w_ff", "b_ff"))


def test_cross_entropy_gradients_match_finite_differences():
    task, model = _setup(5)
    x, y = task.x[:10], task.y[:10]
    _, _, grads = cross_entropy_and_grads(model, x, y, backbone=True)
    h = 1e-6
    rng = np.random.default_rng(0)
    for name in ("w1", "b1", "w_ff", "b_ff"):
        param = getattr(model, name)
        for _ in range(3):
            idx = tuple(int(rng.integers(0, s)) for s in param.shape)
            plus, minus = model.copy(), model.copy()
            getattr(plus, name)[idx] += h
            getattr(minus, name)[idx] -= h
            numeric = (cross_entropy_and_grads(plus, x, y)[0] - cross_entropy_and_grads(minus, x, y)[0]) / (2 * h)
            assert _rel_error(grads[name][idx], numeric) < 1e-5


def test_contrastive_gradients_match_finite_differences():
    task, model = _setup(6)
    rng = np.random.default_rng(1)
    x = task.x[:8]
    views = x + rng.normal(0.0, 0.1, size=x.shape)
    _, grads = contrastive_loss_and_grads(model, x, views, 0.5)
    h = 1e-6
    for name, idx in (("w1", (0, 1)), ("w1", (3, 2)), ("b1", (4,))):
        plus, minus = model.copy(), model.copy()
        getattr(plus, name)[idx] += h
        getattr(minus, name)[idx] -= h
        numeric = (contrastive_loss_and_grads(plus, x, views, 0.5)[0]
                   - contrastive_loss_and_grads(minus, x, views, 0.5)[0]) / (2 * h)
        assert _rel_error(grads[name][idx], numeric) < 1e-5


def test_pretraining():
    task, model = _setup(7)
    same = pretrain_instance_discrimination(model, task, epochs=0)
    assert np.array_equal(same.w1, model.w1)
    with pytest.raises(ValidationError):
        pretrain_instance_discrimination(model, task, batch_size=1)

    blobs = SyntheticTask(means=[[5.0, 0.0, 0.0, 0.0], [-5.0, 0.0, 0.0, 0.0]], sigma=0.5, n_per_class=20)
    start = ToyModel.init(4, 6, 2, seed=1)
    trained = pretrain_instance_discrimination(start, blobs, epochs=20, lr=0.2, noise_sigma=0.05, batch_size=16)
    assert np.array_equal(trained.w_ff, start.w_ff)
    assert not np.array_equal(trained.w1, start.w1)

    rng = np.random.default_rng(3)
    views = blobs.x + rng.normal(0.0, 0.05, size=blobs.x.shape)
    a = trained.embed(blobs.x)
    b = trained.embed(views)
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    b /= np.linalg.norm(b, axis=1, keepdims=True)
    cos = a @ b.T
    within = float(np.mean(np.diag(cos)))
    cross = float(np.mean(cos[~np.eye(blobs.n, dtype=bool)]))
    assert within > cross


def test_centroid_head():
    task = SyntheticTask(means=[[0.2, 0.0], [0.0, 0.2]], sigma=1e-3, n_per_class=1)
    task.x = np.array([[0.1, 0.0], [0.0, 0.3]])
    task.y = np.array([0, 1])
    model = ToyModel(w1=np.eye(2), b1=np.zeros(2), w_ff=np.ones((2, 2)), b_ff=np.ones(2))
    head = centroid_init_head(model, task)
    assert np.allclose(head.w_ff, np.tanh(task.x))
    assert np.array_equal(head.b_ff, np.zeros(2))

    task.x = np.array([[0.1, 0.0], [0.3, 0.0], [0.0, 0.3], [0.0, 0.3]])
    task.y = np.array([0, 0, 1, 1])
    head = centroid_init_head(model, task)
    assert np.allclose(head.w_ff[0], (np.tanh([0.1, 0.0]) + np.tanh([0.3, 0.0])) / 2)
    assert np.allclose(head.w_ff[1], np.tanh([0.0, 0.3]))

    task.y = np.array([0, 0, 0, 0])
    with pytest.raises(ValidationError, match="no samples"):
        centroid_init_head(model, task)


def test_diversity_trace():
    _, model = _setup(8)
    trace = diversity_trace([model, model.copy()])
    assert trace[0] == trace[1]

    collapsed = model.copy()
    collapsed.w1[:] = collapsed.w1[0]
    h = collapsed.n_hidden
    assert diversity_trace([collapsed])[0] == pytest.approx(1 / h + (1 - 1 / h) / 200, abs=1e-9)

    with pytest.raises(ValidationError):
        diversity_trace([])


def test_logged_diversity_and_bundle_round_trip():
    task, model = _setup(9)
    result = controlled_label_injection(model, task, InjectionConfig(steps=6, batch_size=10), diversity_every=3)
    logged = [r.cluster_diversity for r in result.log]
    assert logged[0] is None and logged[2] is not None and logged[5] is not None

    frame = result.to_frame()
    assert list(frame.columns) == ["step", "loss", "accuracy", "backbone_updated", "cluster_diversity"]
    assert len(frame) == 6

    bundle = model_to_bundle(result.model)
    assert bundle.layer("backbone.w1").shape == (task.dim, model.n_hidden)
    assert bundle.layer("head.w").kind == "classifier"
    back = model_from_bundle(bundle)
    assert np.allclose(back.w1, result.model.w1, atol=1e-6)


def test_evaluate_and_sweep():
    task, model = _setup(10)
    ev = evaluate(model, task)
    assert 0.0 <= ev.accuracy <= 1.0
    assert ev.loss > 0

    report = control_cycle_sweep(model, task, cycles=(1, 5, INF_CYCLE),
                                 cfg=InjectionConfig(steps=20, batch_size=10))
    report.validate()
    assert [p.backbone_updates for p in report.points] == [20, 4, 0]
    assert report.to_dict()["points"][2]["control_cycle"] == "inf"
    for p in report.points:
        assert p.cis_cluster == pytest.approx(p.accuracy * p.cluster_div)
        assert not math.isnan(p.spectral_div)


def test_single_hidden_unit_has_no_diversity():
    task = make_task(n_classes=3, dim=4, n_per_class=20, seed=11)
    narrow = ToyModel.init(task.dim, 1, task.n_classes, seed=11)
    with pytest.raises(ValidationError, match="at least 2 hidden units"):
        diversity_trace([narrow])
    with pytest.raises(ValidationError, match="at least 2 hidden units"):
        control_cycle_sweep(narrow, task, cycles=(1,), cfg=InjectionConfig(steps=5, batch_size=10))
    with pytest.raises(ValidationError, match="at least 2 hidden units"):
        controlled_label_injection(narrow, task, InjectionConfig(steps=5, batch_size=10), diversity_every=1)

    # training without diversity logging still works
    result = controlled_label_injection(narrow, task, InjectionConfig(steps=5, batch_size=10))
    assert len(result.log) == 5



if __name__ == "__main__":
    pytest.main([__file__, "-v"])
