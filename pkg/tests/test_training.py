import math

import numpy as np
import pytest

from latte import checkpoint as ck
from latte.data import SplitScheme, SynthSpec, split_dataset, synth_generate
from latte.model import LatteModel
from latte.optim import grad_check
from latte.training import (
    FinetuneConfig,
    MetricsLog,
    PretrainConfig,
    TrainConfig,
    adapter_contribution,
    apply_cut_and_fill,
    build_optimizer,
    cross_entropy_loss,
    cutfill_loss,
    evaluate,
    finetune_subject,
    pretrain,
    reconstruction_loss,
    run_loso,
    train_cross_subject,
)

from conftest import tiny_config


@pytest.fixture
def tiny_data():
    ds = synth_generate(SynthSpec(subjects=3, classes=3, trials=24, channels=4, timesteps=24, snr=4.0, seed=3))
    return split_dataset(ds, SplitScheme("instance_wise", 0.25, (1,), (2,)), seed=0)


def fresh(subjects=(0, 1, 2), seed=0, **kw):
    return LatteModel(tiny_config(dtype="float64", **kw), list(subjects), seed=seed)


class TestLosses:
    def test_cross_entropy_uniform(self):
        assert float(cross_entropy_loss(np.zeros((3, 4)), [0, 1, 3]).data) == pytest.approx(math.log(4))

    def test_cross_entropy_confident(self):
        logits = np.array([[500.0, 0.0, 0.0]])
        assert float(cross_entropy_loss(logits, [0]).data) < 1e-100

    def test_cross_entropy_direct(self, rng):
        logits = rng.standard_normal((3, 5))
        y = np.array([4, 0, 2])
        ref = -np.mean([logits[i, y[i]] - np.log(np.sum(np.exp(logits[i]))) for i in range(3)])
        assert float(cross_entropy_loss(logits, y).data) == pytest.approx(ref, rel=1e-12)

    def test_cutfill_examples(self, rng):
        x = rng.standard_normal((2, 3, 4))
        mask = np.zeros_like(x)
        mask[:, :, 1] = 1
        assert float(cutfill_loss(x, x, mask).data) == 0.0
        m = np.zeros((4, 4))
        m[0] = 1
        assert float(cutfill_loss(np.ones((4, 4)), np.zeros((4, 4)), m).data) == pytest.approx(1.0)

    def test_cutfill_ignores_complement(self, rng):
        x, xh = rng.standard_normal((2, 5)), rng.standard_normal((2, 5))
        mask = np.zeros((2, 5))
        mask[:, 2:4] = 1
        other = xh + (1 - mask) * 1e3
        assert float(cutfill_loss(other, x, mask).data) == pytest.approx(float(cutfill_loss(xh, x, mask).data))

    def test_cutfill_empty_mask(self):
        with pytest.raises(ValueError):
            cutfill_loss(np.ones(3), np.zeros(3), np.zeros(3))

    def test_reconstruction(self, rng):
        assert float(reconstruction_loss(np.full(10, 2.0), np.zeros(10)).data) == pytest.approx(4.0)
        x, xh = rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 3, 4))
        assert float(reconstruction_loss(x, x).data) == 0.0
        ones = np.ones_like(x)
        assert float(reconstruction_loss(xh, x).data) == pytest.approx(float(cutfill_loss(xh, x, ones).data))

    def test_loss_grads(self, rng):
        x = rng.standard_normal((2, 3))
        mask = (rng.random((2, 3)) > 0.5).astype(float)
        mask[0, 0] = 1
        assert grad_check(lambda a: cutfill_loss(a, x, mask), [rng.standard_normal((2, 3))]).passed
        assert grad_check(lambda a: reconstruction_loss(a, x), [rng.standard_normal((2, 3))]).passed
        assert grad_check(lambda a: cross_entropy_loss(a, [1, 2]), [rng.standard_normal((2, 3))]).passed


def reference_cut_and_fill(x, l_min, l_max, f, rng):
    """Line-by-line: for each item draw the length, then the start, then fill every channel."""
    B, _, C, T = x.shape
    out = x.copy()
    M = np.zeros_like(x)
    spans = []
    for b in range(B):
        ell = rng.integers(math.floor(l_min * T), math.floor(l_max * T) + 1)
        s = rng.integers(0, T - ell + 1)
        e = s + ell
        for c in range(C):
            for t in range(s, e):
                M[b, 0, c, t] = 1
                out[b, 0, c, t] = f
        spans.append((s, e))
    return out, M, spans


class TestCutAndFill:
    def test_line_by_line_oracle(self, rng):
        x = rng.standard_normal((6, 1, 3, 8))
        got, cut = apply_cut_and_fill(x, 0.25, 0.25, -9.0, np.random.default_rng(42))
        ref, M, spans = reference_cut_and_fill(x, 0.25, 0.25, -9.0, np.random.default_rng(42))
        np.testing.assert_array_equal(got, ref)
        np.testing.assert_array_equal(cut.mask, M)
        assert cut.spans.tolist() == [list(s) for s in spans]
        assert all(e - s == 2 for s, e in spans)

    def test_oracle_variable_lengths(self, rng):
        x = rng.standard_normal((20, 1, 2, 50))
        got, cut = apply_cut_and_fill(x, 0.1, 0.3, 0.5, np.random.default_rng(7))
        ref, M, _ = reference_cut_and_fill(x, 0.1, 0.3, 0.5, np.random.default_rng(7))
        np.testing.assert_array_equal(got, ref)
        np.testing.assert_array_equal(cut.mask, M)

    def test_full_mask(self, rng):
        x = rng.standard_normal((3, 2, 10))
        out, cut = apply_cut_and_fill(x, 1.0, 1.0, 0.0, rng)
        assert np.all(cut.mask == 1)
        assert np.all(out == 0)

    def test_mask_validity(self, rng):
        x = rng.standard_normal((50, 4, 40))
        fill = np.arange(4.0) + 100
        out, cut = apply_cut_and_fill(x, 0.1, 0.3, fill, rng)
        for b in range(50):
            s, e = cut.spans[b]
            assert 4 <= e - s <= 12
            cols = cut.mask[b].any(axis=0)
            assert np.array_equal(np.flatnonzero(cols), np.arange(s, e))
            assert np.all(cut.mask[b][:, s:e] == 1)
            np.testing.assert_array_equal(out[b][:, s:e], np.broadcast_to(fill[:, None], (4, e - s)))
        keep = cut.mask == 0
        assert np.array_equal(out[keep], x[keep])

    def test_too_short(self, rng):
        with pytest.raises(ValueError):
            apply_cut_and_fill(np.zeros((1, 1, 5)), 0.1, 0.5, 0.0, rng)


class TestCrossSubject:
    def test_lr_zero_unchanged(self, tiny_data):
        train, val, _ = tiny_data
        model = fresh()
        before = [p.data.copy() for p in model.parameters()]
        cfg = TrainConfig(epochs=1, lr=0.0, adapter_lr=0.0, weight_decay=0.0, batch_size=8)
        res = train_cross_subject(model, train, val, cfg)
        for p, b in zip(model.parameters(), before):
            np.testing.assert_array_equal(p.data, b)
        assert res.best_epoch == 1

    def test_frozen_unchanged(self, tiny_data):
        train, val, _ = tiny_data
        model = fresh()
        frozen = {n: p.data.copy() for n, p in model.named_parameters() if not p.trainable}
        assert set(frozen) == {"predecoder.fc.weight", "decoder.prototypes"}
        train_cross_subject(model, train, val, TrainConfig(epochs=2, batch_size=8, lr=1e-2))
        for n, p in model.named_parameters():
            if n in frozen:
                np.testing.assert_array_equal(p.data, frozen[n])

    def test_deterministic_trace(self, tiny_data, tmp_path):
        train, val, test = tiny_data
        texts = []
        for i in range(2):
            train_cross_subject(fresh(), train, val, TrainConfig(epochs=3, batch_size=8), test, tmp_path / f"{i}.tsv")
            texts.append((tmp_path / f"{i}.tsv").read_text())
        assert texts[0] == texts[1]
        lines = texts[0].splitlines()
        assert lines[0] == "epoch\tsplit\tloss\taccuracy\tauc"
        assert lines[1].split("\t")[:2] == ["1", "train"]
        assert lines[-1].split("\t")[1] == "test"

    def test_returns_best_validation_snapshot(self, tiny_data):
        train, val, _ = tiny_data
        model = fresh()
        res = train_cross_subject(model, train, val, TrainConfig(epochs=4, batch_size=8, lr=5e-3))
        vals = [r for r in res.history.rows if r[1] == "val"]
        best = max(vals, key=lambda r: (r[3], -r[2]))
        assert res.best_epoch == best[0]
        assert evaluate(model, val).accuracy == pytest.approx(best[3])

    def test_missing_adapters(self, tiny_data):
        train, val, _ = tiny_data
        with pytest.raises(ValueError):
            train_cross_subject(fresh(subjects=(0, 1)), train, val, TrainConfig(epochs=1))

    def test_empty_train(self, tiny_data):
        train, val, _ = tiny_data
        with pytest.raises(ValueError):
            train_cross_subject(fresh(), train.subset([]), val, TrainConfig(epochs=1))

    def test_adapter_lr_group(self):
        model = fresh()
        opt = build_optimizer(model, TrainConfig(lr=1e-3, adapter_lr=1e-5))
        lrs = [g.lr for g in opt.groups]
        dec = {id(p) for p in opt.groups[1].params}
        assert lrs == [1e-3, 1e-5]
        assert id(model.predecoder.fc.bank.R[0]) in dec
        assert id(model.sca.bank.R[0]) not in dec


class TestFinetune:
    def test_zero_epochs_identity(self, tiny_data):
        train, val, _ = tiny_data
        model = fresh()
        before = ck.dumps(ck.from_model(model))
        res = finetune_subject(model, 1, train, val, TrainConfig(), FinetuneConfig(epochs=0))
        assert ck.dumps(res.checkpoint) == before

    def test_isolation(self, tiny_data):
        train, val, _ = tiny_data
        model = fresh()
        for _, bank in model.banks():
            for s in bank.subjects:
                bank.R[s].data = np.random.default_rng(s).standard_normal(bank.R[s].shape) * 0.1
        others = {s: {k: v.data.copy() for k, v in model.subject_parameters(s).items()} for s in (0, 2)}
        target = {k: v.data.copy() for k, v in model.subject_parameters(1).items()}
        finetune_subject(model, 1, train, val, TrainConfig(batch_size=4, lr=1e-2, adapter_lr=1e-2), FinetuneConfig(epochs=3, lr_scale=1.0))
        for s, params in others.items():
            for k, v in model.subject_parameters(s).items():
                assert v.data.tobytes() == params[k].tobytes()
        assert any(not np.array_equal(model.subject_parameters(1)[k].data, target[k]) for k in target)

    def test_strict_unknown(self, tiny_data):
        train, val, _ = tiny_data
        with pytest.raises(KeyError):
            finetune_subject(fresh(subjects=(0, 1)), 2, train, val, TrainConfig(), FinetuneConfig(epochs=1))

    def test_non_strict_allocates(self, tiny_data):
        train, val, _ = tiny_data
        model = fresh(subjects=(0, 1))
        finetune_subject(model, 2, train, val, TrainConfig(batch_size=8), FinetuneConfig(epochs=1, strict=False))
        assert 2 in model.subjects

    def test_from_checkpoint(self, tiny_data):
        train, val, _ = tiny_data
        res = finetune_subject(ck.from_model(fresh()), 0, train, val, TrainConfig(batch_size=8), FinetuneConfig(epochs=1))
        assert set(r[1] for r in res.history.rows) <= {"val", "finetune"}


class TestLoso:
    def test_folds(self, tmp_path):
        ds = synth_generate(SynthSpec(subjects=3, classes=2, trials=16, channels=4, timesteps=24, seed=1))
        res = run_loso(ds, tiny_config(classes=2), TrainConfig(epochs=1, batch_size=8), out_dir=tmp_path)
        assert [f["subject"] for f in res.folds] == [0, 1, 2]
        assert all(f["adapter_probe"] == 0.0 for f in res.folds)
        assert sorted(p.name for p in tmp_path.iterdir()) == ["fold_0.tsv", "fold_1.tsv", "fold_2.tsv"]
        s = res.summary()
        assert s["folds"] == 3 and 0 <= s["accuracy_mean"] <= 1
        assert "auc_mean" in s

    def test_single_subject(self):
        ds = synth_generate(SynthSpec(subjects=1, trials=8, channels=4, timesteps=24))
        with pytest.raises(ValueError):
            run_loso(ds, tiny_config(classes=2), TrainConfig(epochs=1))

    def test_probe_detects_adapters(self, rng):
        model = fresh()
        x = rng.standard_normal((2, 4, 24))
        assert adapter_contribution(model, x, [0, 1]) == 0.0
        model.sca.bank.R[0].data[:] = 1.0
        assert adapter_contribution(model, x, [0, 1]) > 0.0
        assert adapter_contribution(model, x, [7, 7]) == 0.0


class TestPretrain:
    @pytest.fixture
    def data(self):
        return synth_generate(SynthSpec(subjects=2, classes=2, trials=16, channels=4, timesteps=24, seed=2))

    @pytest.mark.parametrize("r,kind", [(1.0, "reconstruction"), (0.0, "cut_and_fill")])
    def test_step_types(self, data, r, kind):
        model = fresh(subjects=(0, 1), classes=2)
        res = pretrain(model, data, PretrainConfig(r=r, epochs=2, batch_size=8))
        assert len(res.step_types) == 8  # 32 trials, batch 8, two epochs
        assert set(res.step_types) == {kind}
        assert len(res.recon_curve) == 3

    def test_mixed_and_state(self, data):
        model = fresh(subjects=(0, 1), classes=2)
        frozen = model.predecoder.fc.weight.data.copy()
        res = pretrain(model, data, PretrainConfig(r=0.5, epochs=4, batch_size=4, l_min=0.2, l_max=0.4))
        assert set(res.step_types) == {"reconstruction", "cut_and_fill"}
        assert all(k.startswith(("sca.", "sca_bn.", "stf.", "stf_bn.", "inception.")) for k in res.state)
        np.testing.assert_array_equal(model.predecoder.fc.weight.data, frozen)
        target = fresh(subjects=(0, 1), classes=2, seed=9)
        target.load_pretrained(res.state)

    def test_invalid(self, data):
        with pytest.raises(ValueError):
            pretrain(fresh(subjects=(0, 1), classes=2), data, PretrainConfig(r=1.5))


def test_metrics_log_format(tmp_path):
    log = MetricsLog(tmp_path / "m.tsv")
    log.add(1, "train", 0.5, 0.25, None)
    log.add(1, "val", 1.0, 1.0, 0.75)
    assert (tmp_path / "m.tsv").read_text() == (
        "epoch\tsplit\tloss\taccuracy\tauc\n1\ttrain\t0.500000\t0.250000\t\n1\tval\t1.000000\t1.000000\t0.750000\n"
    )
    assert log.text() == (tmp_path / "m.tsv").read_text()
