import csv
import math

import numpy as np
import pytest

from tlra.data import MODALITIES, MissingPattern, apply_mask
from tlra.losses import LossWeights
from tlra.model import Stage, Switches, TLRAModel, forward, forward_batch, make_batch
from tlra.numeric import Tensor, grad_check
from tlra.trainer import (
    AdamW,
    TrainerConfig,
    TrainingDiverged,
    compute_losses,
    cosine_lr,
    load_checkpoint,
    run_training,
    save_checkpoint,
    stage_of_epoch,
    train_step,
)


def _model(bundle, seed=0, **kw):
    return TLRAModel(bundle.dims, d=kw.pop("d", 6), K=kw.pop("K", 4), seed=seed, **kw)


def test_stage_boundaries():
    cfg = TrainerConfig(epochs=100, stage_switch_epoch=50)
    assert stage_of_epoch(0, cfg) == Stage.STAGE1
    assert stage_of_epoch(49, cfg) == Stage.STAGE1
    assert stage_of_epoch(50, cfg) == Stage.STAGE2
    assert stage_of_epoch(99, cfg) == Stage.STAGE2
    with pytest.raises(ValueError):
        stage_of_epoch(100, cfg)


def test_config_defaults_and_validation():
    cfg = TrainerConfig()
    assert (cfg.epochs, cfg.batch_size, cfg.learning_rate, cfg.weight_decay) == (100, 16, 1e-4, 1e-4)
    assert cfg.stage_switch_epoch == 50
    with pytest.raises(ValueError):
        TrainerConfig(epochs=10, stage_switch_epoch=11)
    with pytest.raises(ValueError):
        TrainerConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainerConfig.from_dict({"epochz": 3})
    assert TrainerConfig.from_dict(TrainerConfig(epochs=7).to_dict()) == TrainerConfig(epochs=7)


def test_cosine_schedule():
    assert cosine_lr(0, 1e-3, 100) == 1e-3
    assert cosine_lr(50, 1e-3, 100) == pytest.approx(5e-4)
    assert cosine_lr(99, 1e-3, 100) < 1e-6
    for e in range(100):
        assert cosine_lr(e, 2.0, 100) == pytest.approx(2.0 * 0.5 * (1 + math.cos(math.pi * e / 100)))


def test_adamw_first_step_and_decay():
    from tlra.numeric import Parameter

    p = Parameter([1.0, -2.0], "p")
    p.grad = np.array([0.5, -0.1])
    opt = AdamW([p], lr=0.1, weight_decay=0.01)
    opt.step()
    # bias-corrected first step moves each weight by lr * sign(grad), after decay
    expected = np.array([1.0, -2.0]) * (1 - 0.1 * 0.01) - 0.1 * np.sign([0.5, -0.1]) * (1 / (1 + 1e-8 / np.abs([0.5, -0.1])))
    np.testing.assert_allclose(p.data, expected, atol=1e-9)


def test_forward_full_pattern_stage1(small_bundle):
    m = _model(small_bundle)
    y, inter = forward(small_bundle.records[0], MissingPattern.full(), m, Stage.STAGE1)
    assert np.isfinite(y.item())
    assert not inter.suppression_occurred


def test_forward_language_only_stage2(small_bundle):
    m = _model(small_bundle)
    view = apply_mask(small_bundle.records[0], MissingPattern.parse("L"))
    y, inter = forward(view, None, m, Stage.STAGE2)
    assert np.isfinite(y.item())
    assert [x.value for x in inter.completed_modalities()] == ["A", "V"]
    assert inter.completed.shape == (1, 3, 6)


def test_forward_view_equals_record_with_pattern(small_bundle):
    m = _model(small_bundle)
    r = small_bundle.records[2]
    for p in (MissingPattern.parse("A"), MissingPattern.parse("LV")):
        y1, _ = forward(apply_mask(r, p), None, m, Stage.STAGE2)
        y2, _ = forward(r, p, m, Stage.STAGE2)
        assert y1.item() == pytest.approx(y2.item(), abs=1e-12)


def test_unanimous_votes_make_stages_agree(small_bundle):
    m = _model(small_bundle)
    r = small_bundle.records[0]
    _, inter = forward(r, MissingPattern.full(), m, Stage.STAGE1)
    # point every positive anchor at the sample's own features: all three vote P
    for j in range(3):
        f = inter.F.data[0, j]
        m.bank.anchors[j, 0] = f / np.linalg.norm(f)
        m.bank.anchors[j, 1] = -m.bank.anchors[j, 0]
    y1, i1 = forward(r, MissingPattern.full(), m, Stage.STAGE1)
    y2, i2 = forward(r, MissingPattern.full(), m, Stage.STAGE2)
    assert (i2.votes == 0).all() and not i2.suppression_occurred
    assert y1.item() == y2.item()


def test_suppression_replaces_disagreeing_modality(small_bundle):
    m = _model(small_bundle)
    r = small_bundle.records[0]
    _, inter = forward(r, MissingPattern.full(), m, Stage.STAGE1)
    for j in range(3):
        f = inter.F.data[0, j] / np.linalg.norm(inter.F.data[0, j])
        m.bank.anchors[j] = [f, -f] if j < 2 else [-f, f]
    _, i2 = forward(r, MissingPattern.full(), m, Stage.STAGE2)
    assert i2.suppressed[0].tolist() == [False, False, True]
    assert i2.outputs.data[0, 2].tobytes() == m.bank.anchors[2, 0].tobytes()


def test_baseline_is_plain_late_fusion(small_bundle):
    m = _model(small_bundle)
    cfg = TrainerConfig.baseline(epochs=4)
    recs = small_bundle.records[:5]
    pats = [MissingPattern.parse(s) for s in ("L", "AV", "LAV", "V", "LA")]
    batch = make_batch(recs, m.dims, pats)
    for stage in Stage:
        y, inter = forward_batch(m, batch, stage, cfg.switches)
        F = inter.F.data * batch.obs[:, :, None]
        expected = m.head(Tensor(F.reshape(5, -1))).data.reshape(5)
        np.testing.assert_allclose(y.data, expected, atol=1e-14)
    assert cfg.stage_switch_epoch == cfg.epochs
    assert cfg.eta == 0 and cfg.loss_weights.lambda1 == cfg.loss_weights.lambda4 == 0


def test_full_loss_gradcheck_two_samples(small_bundle):
    m = _model(small_bundle, d=4, K=3)
    cfg = TrainerConfig(epochs=2, d=4, K=3)
    batch = make_batch(small_bundle.records[:2], m.dims, [MissingPattern.parse("L"), MissingPattern.parse("AV")])
    refs = compute_losses(m, batch, Stage.STAGE2, cfg)[2].F.detach()
    assert grad_check(lambda: compute_losses(m, batch, Stage.STAGE2, cfg, refs)[0], m.parameters()) < 1e-4


def test_prototype_grads_reach_modal_encoder(small_bundle):
    m = _model(small_bundle)
    lw = LossWeights(lambda1=0, lambda2=0, lambda5=0)
    batch = make_batch(small_bundle.records[:8], m.dims)
    for flag, expect in ((False, False), (True, True)):
        cfg = TrainerConfig(epochs=2, loss_weights=lw, prototype_grads=flag)
        m.zero_grad()
        compute_losses(m, batch, Stage.STAGE1, cfg)[0].backward()
        g = m.encoder.modal[MODALITIES[0]].proj.W.grad
        assert (g is not None and np.any(g != 0)) == expect


def _snapshot(model):
    return {k: p.data.copy() for k, p in model.named_parameters().items()}, model.bank.anchors.copy()


def test_zero_lr_keeps_params_but_updates_bank(small_bundle):
    m = _model(small_bundle)
    cfg = TrainerConfig(epochs=2, learning_rate=0.0)
    params, bank = _snapshot(m)
    opt = AdamW(m.parameters(), lr=0.0, weight_decay=cfg.weight_decay)
    train_step(small_bundle.split("train")[:16], m, opt, cfg, 0, np.random.default_rng(0))
    for k, p in m.named_parameters().items():
        np.testing.assert_array_equal(p.data, params[k])
    assert np.any(m.bank.anchors != bank)


def test_zero_lr_zero_eta_freezes_everything(small_bundle):
    m = _model(small_bundle, eta=0.0)
    cfg = TrainerConfig(epochs=2, learning_rate=0.0, eta=0.0)
    h = m.state_hash()
    opt = AdamW(m.parameters(), lr=0.0)
    train_step(small_bundle.split("train")[:16], m, opt, cfg, 1, np.random.default_rng(0))
    assert m.state_hash() == h


def test_one_step_moves_templates(small_bundle):
    m = _model(small_bundle)
    cfg = TrainerConfig(epochs=2, learning_rate=1e-2)
    before = m.library.templates.data.copy()
    opt = AdamW(m.parameters(), lr=cfg.learning_rate)
    rep = train_step(small_bundle.split("train")[:16], m, opt, cfg, 0, np.random.default_rng(1))
    assert rep.total > 0
    assert np.any(m.library.templates.data != before)


def test_non_finite_loss_aborts(small_bundle):
    m = _model(small_bundle)
    m.head.fc2.b.data[:] = np.nan
    with pytest.raises(TrainingDiverged, match="task"):
        train_step(small_bundle.split("train")[:4], m, AdamW(m.parameters()), TrainerConfig(epochs=2), 0,
                   np.random.default_rng(0))


def test_single_epoch_run(small_bundle, tmp_path):
    res = run_training(small_bundle, TrainerConfig(epochs=1, d=6, K=4), tmp_path)
    rows = list(csv.reader(res.log_path.open()))
    assert rows[0] == ["epoch", "align", "intra", "inter", "task", "total"]
    assert len(rows) == 2
    assert res.best_path.exists() and res.final_path.exists()


def test_run_requires_splits(small_bundle, tmp_path):
    from tlra.data import FeatureBundle

    only_train = FeatureBundle(small_bundle.dims, small_bundle.split("train"))
    with pytest.raises(ValueError):
        run_training(only_train, TrainerConfig(epochs=1), tmp_path)


def test_checkpoint_roundtrip_and_stable_schema(small_bundle, tmp_path):
    cfg = TrainerConfig(epochs=4, d=6, K=4, stage_switch_epoch=2, snapshot_epochs=(1, 3))
    res = run_training(small_bundle, cfg, tmp_path)
    m2, cfg2, epoch = load_checkpoint(res.final_path)
    assert epoch == 4 and cfg2 == cfg
    assert m2.state_hash() == res.model.state_hash()
    import json

    keys = [json.loads(p.read_text()).keys() for p in res.snapshots.values()]
    shapes = [{k: v["shape"] for k, v in json.loads(p.read_text())["params"].items()} for p in res.snapshots.values()]
    assert keys[0] == keys[1] and shapes[0] == shapes[1]
    view = [apply_mask(r, MissingPattern.parse("AV")) for r in small_bundle.split("test")]
    b = make_batch(view, m2.dims)
    np.testing.assert_array_equal(forward_batch(m2, b, Stage.STAGE2)[0].data,
                                  forward_batch(res.model, b, Stage.STAGE2)[0].data)


def test_bank_unit_norm_every_epoch(small_bundle, tmp_path):
    errs = []
    run_training(small_bundle, TrainerConfig(epochs=6, d=6, K=4), tmp_path,
                 on_epoch=lambda e, model, *_: errs.append(model.bank.max_norm_error()))
    assert len(errs) == 6 and max(errs) < 1e-9


def test_determinism_five_epochs(small_bundle, tmp_path):
    cfg = TrainerConfig(epochs=5, d=6, K=4, seed=11)
    a = run_training(small_bundle, cfg, tmp_path / "a")
    b = run_training(small_bundle, cfg, tmp_path / "b")
    assert a.history == b.history
    assert a.final_path.read_bytes() == b.final_path.read_bytes()
    assert a.log_path.read_bytes() == b.log_path.read_bytes()
