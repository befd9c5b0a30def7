import numpy as np
import pytest

from tapas.data_synth import Dataset, GaussianMixtureSpec, bayes_linear_params, gen_linear_dataset
from tapas.metrics import eval_model
from tapas.model import GradientBundle, LabelEmbeddingTable, LinearEncoder
from tapas.numerics import Rng
from tapas.train import (
    AdaGradState,
    ModelConfig,
    TrainConfig,
    adagrad_step,
    init_model,
    run_training,
)
from tapas.two_pass import TapasConfig


def _tiny_model(v=6, d=2, with_bias=False):
    enc = LinearEncoder(weight=np.zeros((d, d)), bias=np.zeros(d))
    bias = np.zeros(v) if with_bias else None
    emb = LabelEmbeddingTable(table=np.zeros((v, d)), bias=bias)
    return enc, emb


def _bundle(enc, emb, ids, enc_grads=None, table_grad=None):
    ids = np.asarray(ids, dtype=np.int64)
    enc_g = {k: np.zeros_like(p) for k, p in {"weight": enc.weight, "bias": enc.bias}.items()}
    if enc_grads:
        enc_g.update(enc_grads)
    table_g = np.zeros((ids.size, emb.dim)) if table_grad is None else np.asarray(table_grad)
    bias_g = np.zeros(ids.size) if emb.bias is not None else None
    return GradientBundle(encoder=enc_g, emb_ids=ids, emb_table=table_g, emb_bias=bias_g)


class TestAdaGrad:
    def test_zero_gradient_is_noop(self):
        enc, emb = _tiny_model()
        state = AdaGradState.for_model(enc, emb, lr=0.1, epsilon=1e-8)
        adagrad_step(state, enc, emb, _bundle(enc, emb, [0, 1]))
        np.testing.assert_array_equal(enc.weight, np.zeros_like(enc.weight))
        np.testing.assert_array_equal(emb.table, np.zeros_like(emb.table))
        np.testing.assert_array_equal(state.acc["emb.table"], np.zeros_like(emb.table))

    def test_first_step_is_signed_lr(self):
        enc, emb = _tiny_model()
        state = AdaGradState.for_model(enc, emb, lr=0.1, epsilon=1e-8)
        g = np.zeros_like(enc.weight)
        g[0, 0] = 2.0
        adagrad_step(state, enc, emb, _bundle(enc, emb, [0], enc_grads={"weight": g}))
        assert enc.weight[0, 0] == pytest.approx(-0.1, abs=1e-7)

    def test_two_unit_steps_closed_form(self):
        # epsilon tiny so the closed form -lr (1 + 1/sqrt(2)) is exact
        enc, emb = _tiny_model()
        state = AdaGradState.for_model(enc, emb, lr=0.1, epsilon=1e-300)
        g = np.zeros_like(enc.weight)
        g[1, 1] = 1.0
        for _ in range(2):
            adagrad_step(state, enc, emb, _bundle(enc, emb, [0], enc_grads={"weight": g}))
        assert enc.weight[1, 1] == pytest.approx(-0.1 * (1 + 1 / np.sqrt(2)), abs=1e-12)

    def test_sparse_rows_only_touched(self):
        enc, emb = _tiny_model(v=8)
        state = AdaGradState.for_model(enc, emb, lr=0.5, epsilon=1e-8)
        table_g = np.ones((2, emb.dim))
        adagrad_step(state, enc, emb, _bundle(enc, emb, [2, 5], table_grad=table_g))
        moved = np.flatnonzero(np.any(emb.table != 0, axis=1))
        np.testing.assert_array_equal(moved, [2, 5])
        assert np.all(state.acc["emb.table"][[0, 1, 3, 4, 6, 7]] == 0)

    def test_accumulator_monotone(self):
        enc, emb = _tiny_model()
        state = AdaGradState.for_model(enc, emb, lr=0.1, epsilon=1e-8)
        gen = np.random.default_rng(0)
        prev = np.zeros_like(enc.weight)
        for _ in range(5):
            g = gen.standard_normal(enc.weight.shape)
            adagrad_step(state, enc, emb, _bundle(enc, emb, [0], enc_grads={"weight": g}))
            acc = state.acc["enc.weight"]
            assert np.all(acc >= prev)
            prev = acc.copy()


class TestConfigs:
    def test_loss_mode_validated(self):
        with pytest.raises(ValueError, match="loss_mode"):
            TrainConfig(batch_size=4, steps=1, loss_mode="other")

    def test_logq_needs_sampled(self):
        with pytest.raises(ValueError, match="logq"):
            TrainConfig(batch_size=4, steps=1, loss_mode="tapas", logq_correction=True)
        TrainConfig(batch_size=4, steps=1, loss_mode="sampled", logq_correction=True)

    def test_model_kind_validated(self):
        with pytest.raises(ValueError, match="kind"):
            ModelConfig(kind="transformer")

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(batch_size=0, steps=1),
            dict(batch_size=1, steps=-1),
            dict(batch_size=1, steps=1, eval_every=0),
            dict(batch_size=1, steps=1, lr=0.0),
            dict(batch_size=1, steps=1, epsilon=0.0),
            dict(batch_size=1, steps=1, l2=-0.1),
            dict(batch_size=1, steps=1, eval_ks=()),
        ],
    )
    def test_train_config_validation(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)


def _small_data(seed=0, v=30, d=4, train=400, test=120):
    spec = GaussianMixtureSpec(n_classes=v, dim=d, centroid_scale=3.0, seed=seed)
    train_ds, _ = gen_linear_dataset(spec, train, part="train")
    test_ds, _ = gen_linear_dataset(spec, test, part="test")
    return train_ds, test_ds


class TestRunTraining:
    def test_zero_steps_single_record(self):
        train_ds, test_ds = _small_data()
        cfg = TrainConfig(batch_size=8, steps=0, eval_every=10, loss_mode="full")
        res = run_training(cfg, ModelConfig(emb_dim=4), TapasConfig(n=8), train_ds, test_ds)
        assert res.series.steps() == [0]

    def test_deterministic(self):
        train_ds, test_ds = _small_data(1)
        cfg = TrainConfig(
            batch_size=8, steps=30, eval_every=10, loss_mode="tapas", seed=7, record_samples=True
        )
        mc = ModelConfig(emb_dim=4)
        tc = TapasConfig(n=8, r=2)
        a = run_training(cfg, mc, tc, train_ds, test_ds)
        b = run_training(cfg, mc, tc, train_ds, test_ds)
        assert a.series.values_equal(b.series)
        np.testing.assert_array_equal(a.encoder.weight, b.encoder.weight)
        np.testing.assert_array_equal(a.embeddings.table, b.embeddings.table)
        assert len(a.sample_trace) == 30
        for s, t in zip(a.sample_trace, b.sample_trace):
            np.testing.assert_array_equal(s, t)

    def test_seed_changes_trajectory(self):
        train_ds, test_ds = _small_data(2)
        mc = ModelConfig(emb_dim=4)
        tc = TapasConfig(n=8)
        a = run_training(
            TrainConfig(batch_size=8, steps=20, eval_every=20, loss_mode="tapas", seed=0),
            mc, tc, train_ds, test_ds,
        )
        b = run_training(
            TrainConfig(batch_size=8, steps=20, eval_every=20, loss_mode="tapas", seed=1),
            mc, tc, train_ds, test_ds,
        )
        assert not np.array_equal(a.embeddings.table, b.embeddings.table)

    def test_tapas_r1_identical_to_sampled(self):
        train_ds, test_ds = _small_data(3)
        mc = ModelConfig(emb_dim=4)
        base = dict(batch_size=8, steps=40, eval_every=10, seed=11, record_samples=True)
        a = run_training(
            TrainConfig(loss_mode="tapas", **base), mc, TapasConfig(n=8, r=1), train_ds, test_ds
        )
        # sampled mode pins r to 1 regardless of the configured factor
        b = run_training(
            TrainConfig(loss_mode="sampled", **base), mc, TapasConfig(n=8, r=4), train_ds, test_ds
        )
        assert a.series.values_equal(b.series)
        np.testing.assert_array_equal(a.encoder.weight, b.encoder.weight)
        np.testing.assert_array_equal(a.embeddings.table, b.embeddings.table)
        for s, t in zip(a.sample_trace, b.sample_trace):
            np.testing.assert_array_equal(s, t)

    def test_final_step_always_evaluated(self):
        train_ds, test_ds = _small_data(4)
        cfg = TrainConfig(batch_size=8, steps=25, eval_every=10, loss_mode="sampled")
        res = run_training(cfg, ModelConfig(emb_dim=4), TapasConfig(n=8), train_ds, test_ds)
        assert res.series.steps() == [0, 10, 20, 25]

    def test_shard_recall_reported(self):
        train_ds, test_ds = _small_data(5)
        cfg = TrainConfig(batch_size=8, steps=20, eval_every=10, loss_mode="tapas", seed=3)
        res = run_training(
            cfg, ModelConfig(emb_dim=4), TapasConfig(n=6, r=3), train_ds, test_ds, shards_m=3
        )
        later = [r for r in res.series.records if r.step > 0]
        assert later
        for rec in later:
            assert 0.0 <= rec.values["shard_recall"] <= 1.0
        assert "shard_recall" not in res.series.records[0].values

    def test_mismatched_sets_rejected(self):
        train_ds, _ = _small_data(6)
        other = Dataset.from_examples(np.zeros((4, 4)), np.zeros(4, dtype=np.int64), 99)
        cfg = TrainConfig(batch_size=2, steps=1, loss_mode="full")
        with pytest.raises(ValueError, match="classes"):
            run_training(cfg, ModelConfig(emb_dim=4), TapasConfig(n=4), train_ds, other)

    def test_logq_correction_changes_sampled_run(self):
        train_ds, test_ds = _small_data(7)
        mc = ModelConfig(emb_dim=4)
        base = dict(batch_size=8, steps=30, eval_every=30, seed=5, loss_mode="sampled")
        plain = run_training(TrainConfig(**base), mc, TapasConfig(n=8), train_ds, test_ds)
        corr = run_training(
            TrainConfig(logq_correction=True, **base), mc, TapasConfig(n=8), train_ds, test_ds
        )
        assert not np.array_equal(plain.embeddings.table, corr.embeddings.table)


class TestAgainstBruteForce:
    def _brute_run(self, train_ds, model_cfg, seed, steps, batch_size, lr, eps, lam):
        root = Rng(seed)
        enc, emb = init_model(model_cfg, train_ds.dim, train_ds.n_classes, root)
        w = enc.weight.copy()
        b_enc = enc.bias.copy()
        table = emb.table.copy()
        b_lab = emb.bias.copy()
        acc = {
            "w": np.zeros_like(w),
            "b_enc": np.zeros_like(b_enc),
            "table": np.zeros_like(table),
            "b_lab": np.zeros_like(b_lab),
        }
        shuffle = root.split("shuffle")
        buf = np.empty(0, dtype=np.int64)
        v = train_ds.n_classes
        snapshots = {}
        for step in range(steps):
            while buf.size < batch_size:
                buf = np.concatenate([buf, shuffle.gen.permutation(train_ds.count)])
            idx, buf = buf[:batch_size], buf[batch_size:]
            gw = np.zeros_like(w)
            gb_enc = np.zeros_like(b_enc)
            gt = np.zeros_like(table)
            gb_lab = np.zeros_like(b_lab)
            for i in idx:
                x_i = train_ds.x[i]
                y_i = int(train_ds.y[i])
                phi = w @ x_i + b_enc
                logits = np.array([float(np.dot(phi, table[z]) + b_lab[z]) for z in range(v)])
                p = np.exp(logits - logits.max())
                p /= p.sum()
                dl = p.copy()
                dl[y_i] -= 1.0
                dl /= batch_size
                for z in range(v):
                    gt[z] += dl[z] * phi
                    gb_lab[z] += dl[z]
                dphi = table.T @ dl
                gw += np.outer(dphi, x_i)
                gb_enc += dphi
            gw += lam * w
            gb_enc += lam * b_enc
            gt += lam * table
            gb_lab += lam * b_lab
            for key, param, g in (
                ("w", w, gw),
                ("b_enc", b_enc, gb_enc),
                ("table", table, gt),
                ("b_lab", b_lab, gb_lab),
            ):
                acc[key] += g * g
                param -= lr * g / (np.sqrt(acc[key]) + eps)
            if (step + 1) % 50 == 0:
                snapshots[step + 1] = (w.copy(), b_enc.copy(), table.copy(), b_lab.copy())
        return snapshots

    def test_full_mode_matches_brute_force(self):
        spec = GaussianMixtureSpec(n_classes=15, dim=4, centroid_scale=2.0, seed=9)
        train_ds, _ = gen_linear_dataset(spec, 60)
        test_ds, _ = gen_linear_dataset(spec, 40, part="test")
        mc = ModelConfig(kind="linear", emb_dim=3, label_bias=True)
        cfg = TrainConfig(
            batch_size=4, steps=200, eval_every=50, lr=0.1, epsilon=1e-8, l2=0.001,
            loss_mode="full", seed=21,
        )
        res = run_training(cfg, mc, TapasConfig(n=4), train_ds, test_ds)
        snaps = self._brute_run(train_ds, mc, 21, 200, 4, 0.1, 1e-8, 0.001)
        w, b_enc, table, b_lab = snaps[200]
        assert np.max(np.abs(res.encoder.weight - w)) <= 1e-10
        assert np.max(np.abs(res.encoder.bias - b_enc)) <= 1e-10
        assert np.max(np.abs(res.embeddings.table - table)) <= 1e-10
        assert np.max(np.abs(res.embeddings.bias - b_lab)) <= 1e-10
        for step, (w_s, be_s, t_s, bl_s) in snaps.items():
            rec = [r for r in res.series.records if r.step == step][0]
            enc_s = LinearEncoder(weight=w_s, bias=be_s)
            emb_s = LabelEmbeddingTable(table=t_s, bias=bl_s)
            brute_rec = eval_model(enc_s, emb_s, test_ds.x, test_ds.y, ks=(1,), step=step)
            assert rec.values["p_at_1"] == brute_rec.values["p_at_1"]
            assert rec.values["softmax_loss_full"] == pytest.approx(
                brute_rec.values["softmax_loss_full"], abs=1e-9
            )


class TestFullModeReachesBayes:
    def test_small_linear_benchmark(self):
        spec = GaussianMixtureSpec(n_classes=100, dim=10, centroid_scale=3.0, seed=33)
        train_ds, centroids = gen_linear_dataset(spec, 20_000)
        test_ds, _ = gen_linear_dataset(spec, 4000, part="test")
        w, b = bayes_linear_params(centroids)
        bayes_enc = LinearEncoder(weight=np.eye(10), bias=np.zeros(10))
        bayes_emb = LabelEmbeddingTable(table=w, bias=b)
        bayes_p1 = eval_model(bayes_enc, bayes_emb, test_ds.x, test_ds.y, ks=(1,)).values["p_at_1"]
        cfg = TrainConfig(
            batch_size=16, steps=2000, eval_every=1000, lr=0.1, l2=0.001,
            loss_mode="full", seed=0,
        )
        mc = ModelConfig(kind="linear", emb_dim=10, label_bias=True)
        res = run_training(cfg, mc, TapasConfig(n=16), train_ds, test_ds)
        final_p1 = res.series.records[-1].values["p_at_1"]
        assert final_p1 >= bayes_p1 - 0.05
