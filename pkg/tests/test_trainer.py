import numpy as np
import pytest

import hetpre.trainer as trainer
from hetpre.encoder import init_params
from hetpre.errors import ConfigError, NumericalError, TrainingDiverged
from hetpre.lpa import PseudoLabels
from hetpre.synth import planted_hin
from hetpre.trainer import AdamState, TrainConfig, adam_step, pretrain, split_validation

from toys import scalar_adam, tiny_hin


def small_params(seed=0):
    g, f = tiny_hin()
    return init_params(g.schema, f.dims(), (3,), 2, np.random.default_rng(seed))


def small_planted(seed=0):
    return planted_hin(3, {"A": 20, "P": 30}, 0.4, 0.02, 6, 0.5, seed=seed, hub="P")


class TestAdam:
    def test_zero_gradient_is_noop(self):
        p = small_params()
        before = p.copy()
        adam_step(p, p.zeros_like(), AdamState(p), 0.1)
        for name in p.tensors:
            np.testing.assert_array_equal(p[name], before[name])

    @pytest.mark.parametrize("wd", [0.0, 0.05])
    def test_scalar_oracle(self, wd):
        p = small_params()
        start = p.copy()
        rng = np.random.default_rng(1)
        steps = [{n: rng.standard_normal(t.shape) for n, t in p.tensors.items()} for _ in range(5)]
        state = AdamState(p)
        for g in steps:
            adam_step(p, g, state, 0.01, wd)
        for name in p.tensors:
            decay = not name.startswith(("Q/", "K/", "a/"))
            flat = scalar_adam(start[name].ravel(), [g[name].ravel() for g in steps], 0.01, wd, decay)
            np.testing.assert_allclose(p[name].ravel(), flat, rtol=1e-12, atol=1e-15)

    def test_decay_skips_attention(self):
        p = small_params()
        start = p.copy()
        adam_step(p, p.zeros_like(), AdamState(p), 0.1, weight_decay=0.5)
        for name in p.tensors:
            if name.startswith(("Q/", "K/", "a/")):
                np.testing.assert_array_equal(p[name], start[name])
            else:
                np.testing.assert_allclose(p[name], start[name] * (1 - 0.05))


class TestConfig:
    @pytest.mark.parametrize(
        "kwargs",
        [
            {"warmup_epochs": -1},
            {"max_epochs": 0},
            {"validation_fraction": 0.0},
            {"validation_fraction": 1.0},
            {"learning_rate": 0.0},
            {"weight_decay": -1.0},
            {"hidden_dims": ()},
            {"hidden_dims": (4, 0)},
            {"optimizer": "rmsprop"},
            {"lpa_max_iters": 0},
        ],
    )
    def test_rejects(self, kwargs):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs)

    def test_dict_roundtrip(self):
        c = TrainConfig(seed=3, hidden_dims=[8, 4])
        assert TrainConfig.from_dict(c.to_dict()) == c

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown"):
            TrainConfig.from_dict({"epochs": 3})

    def test_normalization_must_match_graph(self):
        g, f, _ = small_planted()
        with pytest.raises(ConfigError):
            pretrain(g, f, TrainConfig(normalization="symmetric", max_epochs=1, warmup_epochs=0))


class TestSplit:
    def test_partition(self):
        tr, va = split_validation(100, 0.1, 0)
        assert va.size == 10
        assert sorted(np.concatenate([tr, va]).tolist()) == list(range(100))
        tr2, va2 = split_validation(100, 0.1, 0)
        np.testing.assert_array_equal(va, va2)


class TestPretrain:
    def test_single_joint_epoch(self):
        g, f, _ = small_planted()
        res = pretrain(g, f, TrainConfig(warmup_epochs=0, max_epochs=1, hidden_dims=(8,)))
        assert len(res.report.epochs) == 1
        assert res.report.warmup == []
        assert res.report.best_epoch == 0
        assert res.embeddings.matrix.shape == (g.num_objects, 8)

    def test_deterministic(self):
        g, f, _ = small_planted()
        cfg = TrainConfig(warmup_epochs=3, max_epochs=4, hidden_dims=(8, 8), seed=5)
        a = pretrain(g, f, cfg)
        b = pretrain(g, f, cfg)
        np.testing.assert_array_equal(a.embeddings.matrix, b.embeddings.matrix)
        assert a.labels == b.labels
        assert a.report.losses() == b.report.losses()

    def test_warmup_loss_decreases(self):
        g, f, _ = small_planted()
        res = pretrain(g, f, TrainConfig(warmup_epochs=15, max_epochs=1, hidden_dims=(16,)))
        losses = [r.loss for r in res.report.warmup]
        assert losses[-1] < losses[0]

    def test_best_epoch_has_lowest_val_loss(self):
        g, f, _ = small_planted()
        res = pretrain(g, f, TrainConfig(warmup_epochs=2, max_epochs=6, hidden_dims=(8,)))
        vals = [r.val_loss for r in res.report.epochs]
        assert res.report.best_epoch == int(np.argmin(vals))

    def test_callback_sees_every_epoch(self):
        g, f, _ = small_planted()
        seen = []
        pretrain(g, f, TrainConfig(warmup_epochs=2, max_epochs=3, hidden_dims=(4,)), on_epoch=seen.append)
        assert [(r.phase, r.epoch) for r in seen] == [("warmup", 0), ("warmup", 1), ("joint", 0), ("joint", 1), ("joint", 2)]

    def test_nan_loss_diverges(self, monkeypatch):
        g, f, _ = small_planted()
        real = trainer.loss_and_grad
        calls = {"n": 0}

        def flaky(*a, **kw):
            loss, grads, table = real(*a, **kw)
            calls["n"] += 1
            return (float("nan") if calls["n"] == 3 else loss), grads, table

        monkeypatch.setattr(trainer, "loss_and_grad", flaky)
        with pytest.raises(TrainingDiverged) as info:
            pretrain(g, f, TrainConfig(warmup_epochs=5, max_epochs=1, hidden_dims=(4,)))
        assert info.value.epoch == 2
        assert info.value.last_params.is_finite()

    def test_numerical_error_becomes_divergence(self, monkeypatch):
        g, f, _ = small_planted()

        def boom(*a, **kw):
            raise NumericalError("non-finite gradient in W/0/A-P[0, 0]")

        monkeypatch.setattr(trainer, "loss_and_grad", boom)
        with pytest.raises(TrainingDiverged) as info:
            pretrain(g, f, TrainConfig(warmup_epochs=1, max_epochs=1, hidden_dims=(4,)))
        assert info.value.epoch == 0

    def test_label_space_cap(self, monkeypatch):
        g, f, _ = small_planted()
        monkeypatch.setattr(
            trainer, "lpa_init", lambda graph, **kw: PseudoLabels(np.arange(graph.num_objects), graph.num_objects)
        )
        monkeypatch.setattr(trainer, "MAX_LABEL_SPACE", 10)
        with pytest.raises(ConfigError, match="K="):
            pretrain(g, f, TrainConfig(warmup_epochs=0, max_epochs=1))

    def test_sgd_runs(self):
        g, f, _ = small_planted()
        res = pretrain(g, f, TrainConfig(warmup_epochs=2, max_epochs=2, hidden_dims=(4,), optimizer="sgd",
                                         learning_rate=1e-4))
        assert res.params.is_finite()
