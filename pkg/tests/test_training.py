import json
from dataclasses import replace

import numpy as np
import pytest

import saidnerf.training as training
from saidnerf.errors import DomainError
from saidnerf.field import FieldConfig, init_params
from saidnerf.renderer import RenderOutput
from saidnerf.training import (
    Adam,
    BatchTarget,
    LossWeights,
    TrainConfig,
    TrainingAborted,
    ablation_settings,
    compute_loss,
    evaluate,
    train,
)


@pytest.fixture
def cfg3(tiny_cfg):
    return replace(tiny_cfg, semantic_channels=3)


def _quick(**kw):
    base = dict(max_steps=3, rays_per_batch=64, n_samples=8, occupancy_warmup=1, occupancy_every=2,
                occupancy_resolution=8, precision="float64")
    base.update(kw)
    return TrainConfig(**base)


def _pred_and_target(rng, R=10, C=3):
    pred = RenderOutput(
        color=rng.uniform(0.1, 0.9, (R, 3)),
        semantics=rng.uniform(0.05, 0.95, (R, C)),
        depth=rng.uniform(0.2, 1.0, R),
        opacity=rng.uniform(0, 1, R),
        specular=rng.normal(scale=0.1, size=(R, 3)),
        weights=np.zeros((R, 1)),
    )
    target = BatchTarget(rng.uniform(0, 1, (R, 3)), (rng.random((R, C)) < 0.5).astype(float),
                         rng.uniform(0.2, 1.0, R), rng.random(R) < 0.6)
    return pred, target


def scalar_loss(pred, target, w, eps=1e-6):
    """Per-element loops over the batch."""
    R, C = pred.semantics.shape
    l1 = bce = l2 = spec = 0.0
    for r in range(R):
        for k in range(3):
            l1 += abs(min(max(pred.color[r, k], 0.0), 1.0) - target.gt_color[r, k])
            spec += pred.specular[r, k] ** 2
        for k in range(C):
            p = min(max(pred.semantics[r, k], eps), 1 - eps)
            y = target.gt_sem[r, k]
            bce -= y * np.log(p) + (1 - y) * np.log(1 - p)
        if target.depth_valid[r]:
            l2 += (pred.depth[r] - target.gt_depth[r]) ** 2
    return w.w_rgb * l1 / (3 * R) + w.w_sem * bce / (C * R) + w.w_depth * l2 / R + w.w_spec * spec / R


def test_loss_matches_scalar_oracle():
    rng = np.random.default_rng(5)
    w = LossWeights(1.0, 0.3, 2.0, 0.05)
    for _ in range(5):
        pred, target = _pred_and_target(rng, R=17)
        loss, terms, _ = compute_loss(pred, target, w)
        assert loss == pytest.approx(scalar_loss(pred, target, w), rel=0, abs=1e-12)
        assert loss == pytest.approx(sum(terms.values()), rel=0, abs=1e-12)


def test_perfect_prediction_has_zero_loss():
    rng = np.random.default_rng(6)
    pred, target = _pred_and_target(rng)
    target.gt_sem = (rng.random(target.gt_sem.shape) < 0.5).astype(float)
    pred.semantics = np.clip(target.gt_sem, 0.0, 1.0)
    pred.color = target.gt_color.copy()
    pred.depth = target.gt_depth.copy()
    pred.specular = np.zeros_like(pred.specular)
    loss, _, _ = compute_loss(pred, target, LossWeights())
    # the BCE clamp leaves -log(1 - 1e-6) per channel
    assert loss == pytest.approx(0.1 * -np.log1p(-1e-6), rel=1e-9)


def test_invalid_depth_pixels_do_not_touch_the_loss():
    rng = np.random.default_rng(0)
    pred, target = _pred_and_target(rng)
    w = LossWeights(1.0, 0.5, 2.0, 0.1)
    loss_a, terms_a, up_a = compute_loss(pred, target, w)
    target.gt_depth = np.where(target.depth_valid, target.gt_depth, rng.uniform(-5, 5, 10))
    loss_b, terms_b, up_b = compute_loss(pred, target, w)
    assert loss_a == loss_b and terms_a == terms_b
    np.testing.assert_array_equal(up_a[2], up_b[2])
    assert not np.any(up_a[2][~target.depth_valid])


def test_loss_gradients_match_central_differences():
    rng = np.random.default_rng(1)
    pred, target = _pred_and_target(rng)
    w = LossWeights(1.0, 0.7, 3.0, 0.2)
    _, _, up = compute_loss(pred, target, w)
    h = 1e-7
    for slot, name in ((0, "color"), (1, "semantics"), (2, "depth"), (4, "specular")):
        arr = getattr(pred, name)
        for i in np.ndindex(arr.shape):
            old = arr[i]
            arr[i] = old + h
            up_l = compute_loss(pred, target, w)[0]
            arr[i] = old - h
            dn_l = compute_loss(pred, target, w)[0]
            arr[i] = old
            assert up[slot][i] == pytest.approx((up_l - dn_l) / (2 * h), rel=1e-5, abs=1e-8), name


def test_chunk_losses_add_up():
    rng = np.random.default_rng(2)
    pred, target = _pred_and_target(rng, R=12)
    w = LossWeights()
    whole = compute_loss(pred, target, w)[0]
    parts = 0.0
    for sl in (slice(0, 5), slice(5, 12)):
        sub = RenderOutput(pred.color[sl], pred.semantics[sl], pred.depth[sl], pred.opacity[sl],
                           pred.specular[sl], pred.weights[sl])
        parts += compute_loss(sub, target.subset(sl), w, batch_size=12)[0]
    assert parts == pytest.approx(whole, rel=1e-14)


def test_adam_matches_scalar_reference():
    from saidnerf.field import ParameterStore

    rng = np.random.default_rng(3)
    store = ParameterStore({"p": (5,)})
    store.values[:] = rng.normal(size=5)
    ref = store.values.copy()
    m = [0.0] * 5
    v = [0.0] * 5
    opt = Adam(5, lr=0.05, betas=(0.9, 0.99), eps=1e-8)
    for t in range(1, 6):
        g = rng.normal(size=5)
        store.grads[:] = g
        opt.step(store)
        for i in range(5):
            m[i] = 0.9 * m[i] + 0.1 * g[i]
            v[i] = 0.99 * v[i] + 0.01 * g[i] ** 2
            ref[i] -= 0.05 * (m[i] / (1 - 0.9**t)) / ((v[i] / (1 - 0.99**t)) ** 0.5 + 1e-8)
    np.testing.assert_allclose(store.values, ref, rtol=1e-13, atol=1e-15)


def test_time_cap_runs_at_least_one_step(small_dataset, cfg3):
    res = train(small_dataset, _quick(max_steps=None, time_limit_s=1e-6), field_cfg=cfg3)
    assert res.steps == 1
    res = train(small_dataset, _quick(max_steps=None, time_limit_s=1.0), field_cfg=cfg3)
    longest = max(r["wall_ms"] for r in res.log) / 1000
    assert res.wall_s <= 1.0 + longest + 0.05


def test_log_is_one_json_record_per_step(small_dataset, cfg3, tmp_path):
    path = tmp_path / "train.ndjson"
    res = train(small_dataset, _quick(log_path=str(path)), field_cfg=cfg3)
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    assert [r["step"] for r in rows] == [1, 2, 3]
    assert rows == res.log
    for r in rows:
        assert set(r) == {"step", "wall_ms", "loss", "l_rgb", "l_sem", "l_depth", "l_spec"}
        assert r["loss"] == pytest.approx(r["l_rgb"] + r["l_sem"] + r["l_depth"] + r["l_spec"], rel=1e-12)


def test_runs_are_bit_identical(small_dataset, cfg3):
    a = train(small_dataset, _quick(), field_cfg=cfg3)
    b = train(small_dataset, _quick(), field_cfg=cfg3)
    np.testing.assert_array_equal(a.params.values, b.params.values)
    c = train(small_dataset, _quick(rng_seed=1), field_cfg=cfg3)
    assert not np.array_equal(a.params.values, c.params.values)


def test_threaded_chunks_match_serial(small_dataset, cfg3):
    serial = train(small_dataset, _quick(grad_chunks=4, workers=1), field_cfg=cfg3)
    threaded = train(small_dataset, _quick(grad_chunks=4, workers=4), field_cfg=cfg3)
    np.testing.assert_array_equal(serial.params.values, threaded.params.values)


def test_chunking_only_reorders_the_gradient_sum(small_dataset, cfg3):
    from saidnerf.renderer import RenderConfig, SamplerConfig

    rays, target = training.collect_rays(small_dataset, [0, 1])
    rcfg = RenderConfig(bounds=small_dataset.bounds, sampler=SamplerConfig(n_samples=8))
    params = init_params(cfg3, seed=2)
    grads = []
    for chunks in (1, 5):
        params.zero_grad()
        # no rng: mid-stratum samples, so chunks see identical sample positions
        training.loss_and_grad(params, cfg3, rcfg, rays, target, LossWeights(), grad_chunks=chunks)
        grads.append(params.grads.copy())
    np.testing.assert_allclose(grads[0], grads[1], rtol=0, atol=1e-10)


def test_non_finite_loss_restores_last_good(small_dataset, cfg3, monkeypatch, tmp_path):
    ref = train(small_dataset, _quick(max_steps=2), field_cfg=cfg3)
    real = training.compute_loss
    calls = {"n": 0}

    def poisoned(pred, target, w, batch_size=None):
        calls["n"] += 1
        loss, terms, up = real(pred, target, w, batch_size)
        return (float("nan"), terms, up) if calls["n"] == 3 else (loss, terms, up)

    monkeypatch.setattr(training, "compute_loss", poisoned)
    ck = tmp_path / "last.bin"
    with pytest.raises(TrainingAborted, match="step 2") as info:
        train(small_dataset, _quick(max_steps=5, checkpoint_path=str(ck)), field_cfg=cfg3)
    res = info.value.result
    assert res.aborted and res.steps == 2
    np.testing.assert_array_equal(res.params.values, ref.params.values)
    assert ck.exists()


def test_float32_training_and_evaluation(small_dataset, cfg3):
    res = train(small_dataset, _quick(precision="float32"), field_cfg=cfg3)
    assert res.params.values.dtype == np.float32
    m = evaluate(res, small_dataset, views=[0], n_samples=8)
    assert np.isfinite(m.rmse) and m.rmse >= m.mae >= 0


def test_config_validation(small_dataset, cfg3):
    with pytest.raises(DomainError):
        TrainConfig(time_limit_s=0)
    with pytest.raises(DomainError):
        TrainConfig(precision="float16")
    with pytest.raises(DomainError):
        LossWeights(w_rgb=0.0)
    with pytest.raises(DomainError):
        train(small_dataset, _quick(), field_cfg=replace(cfg3, semantic_channels=2))


def test_ablation_settings_remove_one_component():
    w = LossWeights(1.0, 0.2, 0.3, 0.01)
    fc = FieldConfig()
    assert ablation_settings(None, w, fc) == (w, fc)
    assert ablation_settings("semantic", w, fc)[0].w_sem == 0.0
    assert ablation_settings("depth_sup", w, fc)[0].w_depth == 0.0
    assert ablation_settings("freq_enc", w, fc)[1].use_frequency is False
    ws, fs = ablation_settings("spec_split", w, fc)
    assert ws.w_spec == 0.0 and fs.spec_split is False
    with pytest.raises(DomainError):
        ablation_settings("hash", w, fc)
    # removing the specular branch also removes its parameters
    assert len(init_params(fs)) < len(init_params(fc))
