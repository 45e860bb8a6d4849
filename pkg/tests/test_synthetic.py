"""Synthetic task generator and the end-to-end training loop."""

import numpy as np
import pytest

from moelab import numerics as nm
from moelab.errors import ConfigError, DivergenceError
from moelab.experts import init_params, variant_forward
from moelab.losses import LossConfig, utilization
from moelab.routing import MoEConfig, RoutingTrace
from moelab.synthetic import (
    EVAL_OFFSET,
    METRIC_COLUMNS,
    Adam,
    SGD,
    TaskConfig,
    TrainerConfig,
    clip_gradients,
    evaluate,
    generate_batch,
    generate_probes,
    loss_for_batches,
    make_optimizer,
    measure_latency,
    target_map,
    train,
)

_SMALL_CFG = MoEConfig(d=8, d_g=8, h=16, n_experts=4, k_active=2, n_scene_routes=4, k_scene=2)
_SMALL_TASK = TaskConfig(d=8, d_g=8, n_queries=6)


# ---------------------------------------------------------------------------
# config validation
# ---------------------------------------------------------------------------


@pytest.mark.parametrize(
    "kw",
    [
        {"d": 0},
        {"n_queries": 0},
        {"n_instance_types": 5},
        {"d_g": 2},  # fewer dims than scene types
        {"d": 2},  # too small for offsets / type centers
        {"scene_skew": 1.0},
        {"type_skew": -0.1},
        {"feature_noise": -0.5},
    ],
)
def test_task_config_validation(kw):
    with pytest.raises(ConfigError):
        TaskConfig(**kw)


@pytest.mark.parametrize(
    "kw",
    [
        {"steps": -1},
        {"batch_size": 0},
        {"eval_batches": 0},
        {"lr": 0.0},
        {"clip": 0.0},
        {"router_std": 0.0},
        {"optimizer": "rmsprop"},
        {"steps": 1 << 18, "batch_size": 8},  # collides with eval indices
    ],
)
def test_trainer_config_validation(kw):
    with pytest.raises(ConfigError):
        TrainerConfig(**kw)


# ---------------------------------------------------------------------------
# generate_batch
# ---------------------------------------------------------------------------


def test_generate_batch_bitwise_deterministic():
    a = generate_batch(_SMALL_TASK, seed=11, batch_index=7)
    b = generate_batch(_SMALL_TASK, seed=11, batch_index=7)
    assert np.array_equal(a.H, b.H)
    assert np.array_equal(a.queries, b.queries)
    assert np.array_equal(a.targets, b.targets)
    assert a.scene_type == b.scene_type
    assert np.array_equal(a.instance_types, b.instance_types)


def test_generate_batch_shapes_and_latent_labels():
    task = _SMALL_TASK
    b = generate_batch(task, seed=0, batch_index=0)
    assert b.H.shape == (task.n_features, task.d_g)
    assert b.queries.shape == (task.n_queries, task.d)
    assert b.targets.shape == (task.n_queries, task.d)
    assert 0 <= b.scene_type < task.n_scene_types
    # instance types come from the scene-coupled pair
    pair = {b.scene_type % task.n_instance_types, (b.scene_type + 1) % task.n_instance_types}
    assert set(b.instance_types.tolist()) <= pair


def test_batches_differ_across_indices():
    a = generate_batch(_SMALL_TASK, seed=0, batch_index=0)
    b = generate_batch(_SMALL_TASK, seed=0, batch_index=1)
    assert not np.array_equal(a.queries, b.queries)


def test_targets_are_exact_function_of_latents():
    task = _SMALL_TASK
    b = generate_batch(task, seed=7, batch_index=3)
    for i in range(task.n_queries):
        want = target_map(task, 7, b.queries[i], b.scene_type, int(b.instance_types[i]))
        assert np.array_equal(b.targets[i], want)


def test_scene_clusters_separated_by_margin():
    # Estimate per-scene centroids of the H row means over 1000 batches; the
    # generator places scene means pairwise exactly scene_margin apart.
    task = _SMALL_TASK
    sums = np.zeros((task.n_scene_types, task.d_g))
    counts = np.zeros(task.n_scene_types)
    within = {s: [] for s in range(task.n_scene_types)}
    rows = []
    for j in range(1000):
        b = generate_batch(task, seed=5, batch_index=j)
        m = b.H.mean(axis=0)
        sums[b.scene_type] += m
        counts[b.scene_type] += 1
        rows.append((b.scene_type, m))
    assert np.all(counts > 0)
    centroids = sums / counts[:, None]
    for s, m in rows:
        within[s].append(np.linalg.norm(m - centroids[s]))
    for i in range(task.n_scene_types):
        for j in range(i + 1, task.n_scene_types):
            assert np.linalg.norm(centroids[i] - centroids[j]) >= task.scene_margin - 0.1
    # clusters are tight relative to the separation
    assert max(max(w) for w in within.values()) < task.scene_margin / 4


def test_scene_skew_tilts_scene_frequencies():
    task = TaskConfig(d=8, d_g=8, scene_skew=0.8)
    scenes = [generate_batch(task, seed=2, batch_index=j).scene_type for j in range(300)]
    freq0 = np.mean(np.asarray(scenes) == 0)
    assert freq0 >= 0.7  # expected 0.85
    flat = [generate_batch(_SMALL_TASK, seed=2, batch_index=j).scene_type for j in range(300)]
    assert np.mean(np.asarray(flat) == 0) < 0.5


def test_type_skew_tilts_type_frequencies():
    task = TaskConfig(d=8, d_g=8, type_skew=0.8)  # p(first of pair) = 0.9
    first = total = 0
    for j in range(200):
        b = generate_batch(task, seed=4, batch_index=j)
        first += int(np.sum(b.instance_types == b.scene_type % task.n_instance_types))
        total += task.n_queries
    assert first / total >= 0.75


def test_per_type_optimal_predictors_differ():
    # Least-squares oracle: with a fixed scene, the best linear fit for type 0
    # must not transfer to type 1 targets.
    task = TaskConfig(d=8, d_g=8, n_scene_types=2, n_instance_types=2, n_queries=8)
    rng = np.random.default_rng(0)
    Q = rng.standard_normal((400, task.d))
    X = np.hstack([Q, np.ones((400, 1))])  # intercept absorbs the scene offset
    Y0 = np.stack([target_map(task, 0, q, 0, 0) for q in Q])
    Y1 = np.stack([target_map(task, 0, q, 0, 1) for q in Q])
    W0 = np.linalg.lstsq(X, Y0, rcond=None)[0]
    W1 = np.linalg.lstsq(X, Y1, rcond=None)[0]
    assert np.linalg.norm(W0 - W1) > 1.0
    own = float(np.mean((X @ W0 - Y0) ** 2))
    cross = float(np.mean((X @ W0 - Y1) ** 2))
    assert cross > 4 * own


# ---------------------------------------------------------------------------
# probes, optimizers, clipping
# ---------------------------------------------------------------------------


def test_probes_deterministic_and_step_dependent():
    a = generate_probes(_SMALL_TASK, 5, seed=1, step=2)
    b = generate_probes(_SMALL_TASK, 5, seed=1, step=2)
    c = generate_probes(_SMALL_TASK, 5, seed=1, step=3)
    assert a.shape == (5, _SMALL_TASK.d)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_sgd_exact_update():
    t = nm.Tensor(np.array([1.0, -2.0]), name="w")
    SGD(0.5).step({"w": t}, {"w": np.array([2.0, 2.0])})
    assert np.array_equal(t.data, [0.0, -3.0])


def test_adam_first_step_is_signed_lr():
    t = nm.Tensor(np.array([1.0, -1.0, 0.5]), name="w")
    g = np.array([10.0, -0.2, 3.0])
    Adam(0.01).step({"w": t}, {"w": g})
    # mhat = g, vhat = g^2 on step 1, so the update is lr * sign(g) up to eps
    assert np.allclose(t.data, np.array([1.0, -1.0, 0.5]) - 0.01 * np.sign(g), atol=1e-6)


def test_make_optimizer_dispatch():
    assert isinstance(make_optimizer(TrainerConfig(optimizer="sgd")), SGD)
    assert isinstance(make_optimizer(TrainerConfig(optimizer="adam")), Adam)


def test_clip_passthrough_below_threshold():
    grads = {"a": np.array([0.03, 0.04])}  # norm 0.05
    out, engaged, norm = clip_gradients(grads, 0.1)
    assert out is grads and not engaged
    assert norm == pytest.approx(0.05, abs=1e-15)


def test_clip_rescales_to_threshold():
    grads = {"a": np.array([3.0, 4.0]), "b": np.array([12.0])}  # norm 13
    out, engaged, norm = clip_gradients(grads, 0.1)
    assert engaged and norm == pytest.approx(13.0)
    clipped_norm = np.sqrt(sum(float(np.sum(g * g)) for g in out.values()))
    assert clipped_norm <= 0.1 + 1e-12
    assert np.allclose(out["a"] / grads["a"], out["b"] / grads["b"][0])  # direction kept


def test_clip_zero_gradients_noop():
    out, engaged, norm = clip_gradients({"a": np.zeros(3)}, 0.1)
    assert not engaged and norm == 0.0


# ---------------------------------------------------------------------------
# train / evaluate
# ---------------------------------------------------------------------------


def _named_copy(params):
    return {k: t.data.copy() for k, t in params.named_tensors().items()}


def test_train_zero_steps_returns_initial_params():
    tc = TrainerConfig(steps=0, seed=3)
    res = train("hierarchical", _SMALL_CFG, LossConfig(), tc, _SMALL_TASK)
    want = init_params(_SMALL_CFG, 3, router_std=tc.router_std)
    got = res.params.named_tensors()
    for name, t in want.named_tensors().items():
        assert np.array_equal(got[name].data, t.data)
    assert res.metrics == []
    assert res.final_step == -1


def test_dense_smoke_halves_task_loss():
    cfg = MoEConfig(d=8, d_g=8, h=16, n_experts=2, k_active=1, n_scene_routes=2, k_scene=1)
    task = TaskConfig(d=8, d_g=8, n_scene_types=2, n_instance_types=1, n_queries=8)
    res = train("dense", cfg, LossConfig(), TrainerConfig(steps=120, batch_size=4, lr=0.1), task)
    assert res.metrics[-1]["task"] <= 0.5 * res.metrics[0]["task"]


def test_train_metrics_reproducible_and_csv_identical(tmp_path):
    tc = TrainerConfig(steps=6, batch_size=2, seed=1)
    paths = [tmp_path / "a.csv", tmp_path / "b.csv"]
    results = [
        train("hierarchical", _SMALL_CFG, LossConfig(), tc, _SMALL_TASK, metrics_path=p)
        for p in paths
    ]
    assert results[0].metrics == results[1].metrics
    assert results[0].eval_task_loss == results[1].eval_task_loss
    assert paths[0].read_bytes() == paths[1].read_bytes()
    lines = paths[0].read_text().splitlines()
    assert lines[0] == ",".join(METRIC_COLUMNS)
    assert len(lines) == 1 + tc.steps
    assert set(results[0].metrics[0]) == set(METRIC_COLUMNS)


def test_train_rejects_mismatched_task_dims():
    with pytest.raises(ConfigError, match="must match"):
        train("hierarchical", MoEConfig(), LossConfig(), TrainerConfig(steps=1), _SMALL_TASK)


def test_unselected_experts_get_no_update():
    # k_scene=1 over singleton routes: each image touches exactly one expert.
    cfg = MoEConfig(d=8, d_g=8, h=16, n_experts=4, k_active=1, n_scene_routes=4, k_scene=1)
    task = TaskConfig(d=8, d_g=8, n_queries=4)
    params = init_params(cfg, 0)
    before = _named_copy(params)
    batches = [generate_batch(task, 0, b) for b in range(2)]
    tape = nm.GradTape()
    with nm.recording(tape):
        breakdown, trace = loss_for_batches(
            "hierarchical", params, cfg, LossConfig(lambda2=0.0), batches, None
        )
    grads = tape.gradients(breakdown.total)
    SGD(0.1).step(params.named_tensors(), grads)
    selected = {k for rec in trace.records for k in rec.experts}
    unselected = set(range(cfg.n_experts)) - selected
    assert unselected, "setup should leave at least one expert unused"
    after = params.named_tensors()
    for k in unselected:
        for leaf in ("W1", "b1", "W2", "b2"):
            name = f"expert{k}.{leaf}"
            assert name not in grads or not np.any(grads[name])
            assert np.array_equal(after[name].data, before[name])
    assert any(
        not np.array_equal(after[f"expert{k}.W1"].data, before[f"expert{k}.W1"])
        for k in selected
    )


def test_large_lambda1_drives_uniform_utilization():
    cfg, task = MoEConfig(), TaskConfig()
    res = train(
        "hierarchical",
        cfg,
        LossConfig(lambda1=10.0),
        TrainerConfig(steps=150, batch_size=8, lr=0.1, eval_batches=16),
        task,
    )
    f = utilization(res.trace, cfg).f
    assert float(np.max(np.abs(f - 1.0 / cfg.n_experts))) <= 0.1


def test_balance_regularizer_lowers_hard_balance_on_skewed_task():
    # Paired runs sharing the seed; only lambda1 differs.
    cfg = MoEConfig(n_experts=4, k_active=1, n_scene_routes=4, k_scene=4)
    task = TaskConfig(scene_skew=0.5, type_skew=0.8)
    tc = TrainerConfig(
        steps=300, batch_size=8, lr=0.02, optimizer="adam", clip=5.0,
        eval_batches=16, router_std=0.25, seed=0,
    )
    off = train("hierarchical", cfg, LossConfig(lambda1=0.0), tc, task)
    on = train("hierarchical", cfg, LossConfig(lambda1=0.01), tc, task)
    assert on.eval_balance_hard < off.eval_balance_hard


def test_divergence_error_preserves_metrics_rows(tmp_path):
    cfg = MoEConfig(d=8, d_g=8, h=16, n_experts=2, k_active=1, n_scene_routes=2, k_scene=1)
    task = TaskConfig(d=8, d_g=8, n_scene_types=2, n_instance_types=1, n_queries=8)
    path = tmp_path / "metrics.csv"
    with pytest.raises(DivergenceError) as exc:
        train(
            "dense", cfg, LossConfig(),
            TrainerConfig(steps=20, batch_size=2, lr=1e30, clip=1e299),
            task, metrics_path=path,
        )
    step = exc.value.step
    assert step is not None and step > 0
    lines = path.read_text().splitlines()
    assert len(lines) == 1 + step + 1  # header + rows through the diverged step
    assert ("inf" in lines[-1]) or ("nan" in lines[-1])


def test_evaluate_uses_heldout_indices_and_matches_manual_loss():
    params = init_params(_SMALL_CFG, 3)
    loss, trace = evaluate("hierarchical", params, _SMALL_CFG, _SMALL_TASK, seed=3, n_batches=2)
    manual = []
    t2 = RoutingTrace(_SMALL_CFG.n_experts)
    for j in range(2):
        b = generate_batch(_SMALL_TASK, 3, EVAL_OFFSET + j)
        outputs, t2 = variant_forward(
            "hierarchical", b.H, b.queries, params, _SMALL_CFG, batch_index=j, trace=t2
        )
        manual.append(
            np.mean(
                [
                    np.sum((outputs[i].data - b.targets[i]) ** 2) / _SMALL_CFG.d
                    for i in range(_SMALL_TASK.n_queries)
                ]
            )
        )
    assert loss == pytest.approx(float(np.mean(manual)), rel=1e-12)
    assert {rec.batch for rec in trace.records} == {0, 1}
    assert trace == t2


def test_measure_latency_shape():
    params = init_params(_SMALL_CFG, 0)
    out = measure_latency("hierarchical", params, _SMALL_CFG, _SMALL_TASK, seed=0, n_timed=3, warmup=1)
    assert set(out) == {"median_s", "iqr_s", "n"}
    assert out["n"] == 3
    assert out["median_s"] >= 0.0 and out["iqr_s"] >= 0.0
    with pytest.raises(ConfigError, match="n_timed"):
        measure_latency("hierarchical", params, _SMALL_CFG, _SMALL_TASK, seed=0, n_timed=0)
