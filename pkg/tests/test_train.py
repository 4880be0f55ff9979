from dataclasses import replace

import numpy as np
import pytest

from xda import autodiff as ad
from xda import checkpoint as ckpt
from xda import losses as L
from xda.config import ABLATION_ROWS, SOURCE_ONLY, TrainConfig
from xda.segnet import ModelConfig, SegModel
from xda.synthdata import DataConfig
from xda.train import (
    COMPONENTS,
    AdamW,
    RunRecord,
    Trainer,
    TrainingDiverged,
    evaluate,
    evaluate_model,
    lr_scale,
    model_from_params,
    train,
)

TINY = TrainConfig(
    model=ModelConfig(height=32, width=32, patch=4, dim=16, layers=2, heads=2),
    data=DataConfig(height=32, width=32, n_source_train=8, n_target_train=8, n_target_eval=4),
    iterations=6,
    warmup=2,
    precision=64,
    tau=0.05,
)
FULL = TINY.with_losses(**ABLATION_ROWS["full"])

WEIGHTS = {"L_s": 0.5, "L_t": 0.5, "L_t2s": 0.5, "L_s2t": 0.5}


def grads(model):
    return {n: (np.zeros_like(t.data) if t.grad is None else t.grad.copy()) for n, t in model.named_params()}


def batch(trainer):
    i_s, i_t = trainer._batch()
    return trainer.xs[i_s], trainer.ys[i_s], trainer.xt[i_t]


class TestSchedule:
    def test_warmup_and_decay(self):
        cfg = replace(TINY, iterations=100, warmup=10)
        assert lr_scale(0, cfg) == pytest.approx(0.1)
        assert lr_scale(9, cfg) == pytest.approx(0.91)
        assert lr_scale(50, cfg) == pytest.approx(0.5)
        assert lr_scale(99, cfg) == pytest.approx(0.01)

    def test_adamw_first_step(self):
        # first bias-corrected Adam step moves each coordinate by lr * sign(g), plus decay
        t = ad.Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
        t.grad = np.array([0.3, -4.0, 0.0])
        opt = AdamW([("w", t)], lambda n: 0.1, weight_decay=0.5, eps=0.0)
        opt.t = 0
        t.grad[2] = 1e-30
        opt.step()
        np.testing.assert_allclose(t.data, np.array([1.0, -2.0, 0.5]) * (1 - 0.05) - 0.1 * np.array([1, -1, 1]))


class TestDeterminism:
    def test_replay(self):
        _, a = train(FULL)
        _, b = train(FULL)
        assert a.steps == b.steps
        assert a.evals == b.evals
        assert a.config_hash == b.config_hash

    def test_seed_matters(self):
        _, a = train(FULL)
        _, b = train(replace(FULL, seed=1))
        assert a.steps != b.steps


class TestBookkeeping:
    @pytest.mark.parametrize("row", list(ABLATION_ROWS))
    def test_recombination(self, row):
        cfg = replace(TINY.with_losses(**ABLATION_ROWS[row]), lambda_attn=0.7, iterations=3)
        _, rec = train(cfg)
        for s in rec.steps:
            pred = 0.5 * (s["L_s"] + s["L_t2s"]) + 0.5 * (s["L_t"] + s["L_s2t"])
            assert s["L_pred"] == pytest.approx(pred, abs=1e-12)
            assert s["total"] == pytest.approx(pred + 0.7 * s["L_attn"], abs=1e-12)

    def test_disabled_components_zero(self):
        cfg = replace(TINY.with_losses(**ABLATION_ROWS["+T2S"]), iterations=3)
        _, rec = train(cfg)
        for s in rec.steps:
            assert s["L_s2t"] == 0.0 and s["L_attn"] == 0.0

    def test_csv_round_trip(self):
        _, rec = train(replace(FULL, iterations=3))
        rows = RunRecord.parse_csv(rec.to_csv())
        assert rows == rec.steps


class TestToggles:
    def test_source_only_matches_reference_loop(self):
        cfg = TINY.with_losses(**SOURCE_ONLY)
        _, rec = train(cfg)
        # reference: plain supervised CE loop built from public pieces
        trainer = Trainer(cfg)
        model = SegModel(cfg.model, seed=cfg.seed, dtype=np.float64)
        opt = AdamW(
            model.named_params(),
            lambda n: cfg.lr_encoder if model.is_encoder(n) else cfg.lr_decoder,
            cfg.weight_decay,
        )
        data_rng = trainer.data_rng
        trace = []
        for step in range(cfg.iterations):
            idx = data_rng.integers(0, len(trainer.xs), size=cfg.batch_size)
            model.zero_grad()
            loss = L.seg_ce(model.forward(trainer.xs[idx]).logits, L.one_hot(trainer.ys[idx], 4)) * 0.5
            ad.backward(loss)
            opt.step(lr_scale(step, cfg))
            trace.append(float(loss.data))
        assert [s["total"] for s in rec.steps] == trace

    @pytest.mark.parametrize("component", ["L_t", "L_t2s", "L_s2t", "L_attn"])
    def test_gradient_contribution_removed(self, component):
        """grad(total without X) == grad(total) - w_X * grad(X)."""
        flag = {"L_t": "tgt", "L_t2s": "t2s", "L_s2t": "s2t", "L_attn": "attn"}[component]
        weight = WEIGHTS.get(component, FULL.lambda_attn)

        full = Trainer(FULL)
        x_s, y_s, x_t = batch(full)
        comp, total = full.compute_losses(x_s, y_s, x_t)
        assert comp[component].item() != 0.0
        ad.backward(comp[component])
        g_part = grads(full.student)
        full.student.zero_grad()
        ad.backward(total)
        g_full = grads(full.student)

        off = Trainer(FULL.with_losses(**{flag: False}))
        off._batch()
        comp_off, total_off = off.compute_losses(x_s, y_s, x_t)
        assert comp_off[component].item() == 0.0
        ad.backward(total_off)
        g_off = grads(off.student)
        for name in g_full:
            np.testing.assert_allclose(g_off[name], g_full[name] - weight * g_part[name], atol=1e-10, rtol=1e-8)

    def test_q_zero_silences_pseudo_label_terms(self):
        cfg = replace(FULL, tau=0.999999)
        tr = Trainer(cfg)
        comp, _ = tr.compute_losses(*batch(tr))
        assert tr.last_batch["q"].tolist() == [0.0, 0.0]
        assert comp["L_t"].item() == 0.0 and comp["L_s2t"].item() == 0.0

    def test_oracle_requires_supervised_only(self):
        with pytest.raises(ValueError):
            replace(FULL, oracle=True)


class TestTeacher:
    @pytest.mark.parametrize("row", list(ABLATION_ROWS))
    def test_teacher_never_gets_gradient(self, row):
        tr = Trainer(TINY.with_losses(**ABLATION_ROWS[row]))
        for _ in range(2):
            tr.step()
            assert all(t.grad is None for t in tr.teacher.params())
            assert not any(t.requires_grad for t in tr.teacher.params())

    def test_ema_applied_each_step(self):
        tr = Trainer(replace(FULL, ema_alpha=0.0))
        tr.step()
        for (_, a), (_, b) in zip(tr.teacher.named_params(), tr.student.named_params()):
            np.testing.assert_array_equal(a.data, b.data)
        tr = Trainer(replace(FULL, ema_alpha=1.0))
        before = tr.teacher.state()
        tr.step()
        tr.step()
        for n, t in tr.teacher.named_params():
            np.testing.assert_array_equal(t.data, before[n])


class TestCheckpointAndEval:
    def test_train_writes_run(self, tmp_path):
        params, rec = train(replace(FULL, eval_every=3), str(tmp_path))
        for name in ("model.xda", "model.xda.cfg", "metrics.csv", "evals.csv", "summary.txt"):
            assert (tmp_path / name).exists()
        assert [s for s, _ in rec.evals] == [3, 6]
        lines = (tmp_path / "metrics.csv").read_text().splitlines()
        assert lines[0] == "step," + ",".join(COMPONENTS) and len(lines) == 7
        iou, m = evaluate(str(tmp_path / "model.xda"), "eval")
        assert m == rec.final_miou
        assert evaluate(str(tmp_path / "model.xda"), "eval")[1] == m

    def test_stripped_checkpoint_predicts_identically(self, tmp_path):
        params, _ = train(FULL)
        full_model = model_from_params(FULL, params)
        stripped_model = model_from_params(FULL, ckpt.strip(params))
        images = np.concatenate([Trainer(FULL).xt[:4], Trainer(FULL).xs[:4]]).astype(np.float32)
        assert np.array_equal(full_model.predict(images), stripped_model.predict(images))
        ckpt.save(str(tmp_path / "s.xda"), ckpt.strip(params), FULL)
        ckpt.save(str(tmp_path / "f.xda"), params, FULL)
        assert evaluate(str(tmp_path / "s.xda"))[1] == evaluate(str(tmp_path / "f.xda"))[1]

    def test_eval_split_names(self):
        params, _ = train(replace(FULL, iterations=1))
        m = model_from_params(FULL, params)
        for split in ("train", "eval"):
            iou, mean = evaluate_model(m, FULL, split)
            assert iou.shape == (4,) and 0.0 <= mean <= 1.0

    def test_diverged_batch_dumped(self, tmp_path):
        cfg = replace(FULL, lr_encoder=1e30, lr_decoder=1e30, iterations=50)
        with pytest.raises(TrainingDiverged):
            train(cfg, str(tmp_path))
        dump = np.load(tmp_path / "diverged_batch.npz")
        assert dump["x_s"].shape == (2, 32, 32, 3)


@pytest.mark.slow
def test_oracle_beats_source_only():
    base = replace(
        TINY,
        data=replace(TINY.data, n_source_train=64, n_target_train=64, n_target_eval=32),
        iterations=300,
        precision=32,
    )
    _, src = train(base.with_losses(**SOURCE_ONLY))
    _, orc = train(replace(base.with_losses(**SOURCE_ONLY), oracle=True))
    assert orc.final_miou > src.final_miou
