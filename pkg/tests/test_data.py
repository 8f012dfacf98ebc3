import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latte.checkpoint import BadMagicError, ChecksumError, FormatError, TruncatedError, VersionError
from latte.data import (
    DATASET_SHAPES,
    Dataset,
    DatasetMeta,
    EEGTrial,
    SplitScheme,
    SynthSpec,
    dumps_eegc,
    load_eegc,
    loads_eegc,
    save_eegc,
    split_dataset,
    synth_generate,
)


@pytest.fixture
def small():
    return synth_generate(SynthSpec(subjects=2, trials=12, channels=3, timesteps=10, seed=4))


def assert_same(a: Dataset, b: Dataset):
    assert a.x.tobytes() == b.x.tobytes()
    for f in ("y", "subject", "session"):
        np.testing.assert_array_equal(getattr(a, f), getattr(b, f))
    assert a.meta == b.meta


class TestEEGC:
    def test_round_trip_bitwise(self, small, tmp_path):
        path = tmp_path / "d.eegc"
        save_eegc(small, None, path)
        back = load_eegc(path)
        assert_same(back, small)
        assert dumps_eegc(back) == path.read_bytes()

    def test_trial_list_round_trip(self, tmp_path):
        meta = DatasetMeta(2, 3, 2, 1, 1, "mi")
        trials = [EEGTrial(np.arange(6, dtype=np.float32).reshape(2, 3) * k, k % 2, 0, 1) for k in range(3)]
        save_eegc(trials, meta, tmp_path / "t.eegc")
        back = load_eegc(tmp_path / "t.eegc")
        for a, b in zip(back.trials(), trials):
            assert a.samples.tobytes() == b.samples.tobytes()
            assert (a.label, a.subject, a.session) == (b.label, b.subject, b.session)
        assert back.meta == meta

    def test_empty_dataset(self):
        meta = DatasetMeta(4, 5, 2, 3, 2, "ern")
        empty = Dataset.from_trials([], meta)
        back = loads_eegc(dumps_eegc(empty))
        assert len(back) == 0
        assert back.meta == meta

    def test_layout(self):
        meta = DatasetMeta(1, 2, 2, 1, 1, "synthetic")
        ds = Dataset.from_trials([EEGTrial(np.array([[1.5, -2.0]], dtype=np.float32), 1, 0, 1)], meta)
        data = dumps_eegc(ds)
        assert data[:4] == b"EEGC"
        assert struct.unpack("<I", data[4:8])[0] == 1
        tail = data[-4 - 12 - 8 : -4]
        assert struct.unpack("<3I", tail[:12]) == (0, 1, 1)
        assert np.frombuffer(tail[12:], "<f4").tolist() == [1.5, -2.0]
        assert struct.unpack("<I", data[-4:])[0] == zlib.crc32(data[:-4]) & 0xFFFFFFFF

    def test_bad_crc(self, small):
        data = bytearray(dumps_eegc(small))
        data[-3] ^= 0x10
        with pytest.raises(ChecksumError):
            loads_eegc(bytes(data))

    def test_bad_sample_byte(self, small):
        data = bytearray(dumps_eegc(small))
        data[100] ^= 0x01
        with pytest.raises(ChecksumError):
            loads_eegc(bytes(data))

    @pytest.mark.parametrize("cut", [1, 3, 9, 30, 200, -5, -1])
    def test_truncated(self, small, cut):
        data = dumps_eegc(small)
        with pytest.raises(TruncatedError):
            loads_eegc(data[:cut])

    def test_bad_magic(self, small):
        with pytest.raises(BadMagicError):
            loads_eegc(b"LATC" + dumps_eegc(small)[4:])

    def test_bad_version(self, small):
        data = bytearray(dumps_eegc(small))
        data[4:8] = struct.pack("<I", 2)
        with pytest.raises(VersionError):
            loads_eegc(bytes(data))

    def test_huge_count_is_truncation(self, small):
        data = bytearray(dumps_eegc(small))
        pos = 8 + 20 + 4 + len(b"synthetic")
        data[pos : pos + 4] = struct.pack("<I", 10**9)
        with pytest.raises(TruncatedError):
            loads_eegc(bytes(data))

    def test_label_out_of_range_not_saved(self, small):
        small.y[0] = 7
        with pytest.raises(ValueError):
            dumps_eegc(small)

    def test_distinct_kinds(self):
        assert issubclass(ChecksumError, FormatError) and not issubclass(ChecksumError, TruncatedError)


class TestSynth:
    def test_deterministic_bytes(self):
        a = synth_generate(SynthSpec(seed=11, trials=20))
        b = synth_generate(SynthSpec(seed=11, trials=20))
        assert dumps_eegc(a) == dumps_eegc(b)
        assert dumps_eegc(a) != dumps_eegc(synth_generate(SynthSpec(seed=12, trials=20)))

    @settings(max_examples=25, deadline=None)
    @given(classes=st.integers(1, 5), trials=st.integers(1, 40), subjects=st.integers(1, 4))
    def test_balanced(self, classes, trials, subjects):
        ds = synth_generate(SynthSpec(subjects=subjects, classes=classes, trials=trials, channels=2, timesteps=8))
        assert len(ds) == subjects * trials
        for s in range(subjects):
            counts = np.bincount(ds.y[ds.subject == s], minlength=classes)
            assert counts.max() - counts.min() <= 1

    def test_imbalanced_preset(self):
        ds = synth_generate(SynthSpec(trials=100, class_weights=(0.7, 0.3), timesteps=16))
        assert np.bincount(ds.y[ds.subject == 0]).tolist() == [70, 30]

    def test_noiseless_shiftless_identical_across_subjects(self):
        ds = synth_generate(SynthSpec(subjects=3, trials=6, snr=float("inf"), shift=0.0))
        for c in range(2):
            rows = ds.x[ds.y == c]
            assert np.all(rows == rows[0])

    def test_shift_changes_subjects(self):
        ds = synth_generate(SynthSpec(subjects=3, trials=6, snr=float("inf"), shift=1.0))
        first = ds.x[(ds.y == 0) & (ds.subject == 0)][0]
        last = ds.x[(ds.y == 0) & (ds.subject == 2)][0]
        assert not np.allclose(first, last)

    def test_nearest_template_at_shift_zero(self):
        spec = dict(subjects=3, classes=3, sources=3, trials=60, seed=2, shift=0.0)
        clean = synth_generate(SynthSpec(snr=float("inf"), **spec))
        templates = np.stack([clean.x[clean.y == c][0].ravel() for c in range(3)])
        templates /= np.linalg.norm(templates, axis=1, keepdims=True)
        noisy = synth_generate(SynthSpec(snr=100.0, **spec))
        flat = noisy.x.reshape(len(noisy), -1)
        flat = flat / np.linalg.norm(flat, axis=1, keepdims=True)
        # trials carry a random polarity, so match on absolute correlation
        pred = np.argmax(np.abs(flat @ templates.T), axis=1)
        assert np.mean(pred == noisy.y) == 1.0

    def test_sessions_and_ids(self):
        ds = synth_generate(SynthSpec(subjects=2, trials=10, sessions=5, timesteps=8))
        assert sorted(set(ds.session.tolist())) == [1, 2, 3, 4, 5]
        assert sorted(set(ds.subject.tolist())) == [0, 1]
        ds.check()

    @pytest.mark.parametrize("kw", [dict(trials=0), dict(shift=1.5), dict(snr=0.0), dict(class_weights=(1.0,))])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            synth_generate(SynthSpec(**kw))


class TestSplits:
    def test_instance_wise_80(self):
        ds = synth_generate(SynthSpec(subjects=1, trials=160, timesteps=8, sessions=2))
        train, val, test = split_dataset(ds, SplitScheme.for_task("mi"))
        assert (len(train), len(val), len(test)) == (70, 10, 80)
        assert set(test.session.tolist()) == {2}

    def test_session_wise(self):
        ds = synth_generate(SynthSpec(subjects=3, trials=60, timesteps=8, sessions=6))
        train, val, test = split_dataset(ds, SplitScheme.for_task("ssvep"), seed=3)
        assert set(train.session.tolist()) | set(val.session.tolist()) <= {1, 2, 3, 4}
        assert not set(test.session.tolist()) & {1, 2, 3, 4}
        for s in range(3):
            n_train = np.sum((ds.subject == s) & (ds.session <= 4))
            assert abs(np.sum(val.subject == s) - n_train / 4) <= 1

    @pytest.mark.parametrize("task", ["mi", "ern", "synthetic"])
    def test_partition(self, task):
        sessions = 2 if task in ("mi", "synthetic") else 5
        ds = synth_generate(SynthSpec(subjects=2, trials=40, timesteps=8, sessions=sessions))
        ds.x = np.arange(len(ds), dtype=np.float32)[:, None, None] * np.ones(ds.x.shape[1:], np.float32)
        parts = split_dataset(ds, SplitScheme.for_task(task), seed=1)
        ids = [set(p.x[:, 0, 0].astype(int).tolist()) for p in parts]
        assert sum(len(i) for i in ids) == len(ds)
        assert set().union(*ids) == set(range(len(ds)))

    def test_val_stratified(self):
        ds = synth_generate(SynthSpec(subjects=1, trials=80, timesteps=8, sessions=1))
        _, val, _ = split_dataset(ds, SplitScheme("instance_wise", 0.25, (1,)))
        assert np.bincount(val.y).tolist() == [10, 10]

    def test_deterministic(self):
        ds = synth_generate(SynthSpec(subjects=2, trials=40, timesteps=8))
        a = split_dataset(ds, SplitScheme.for_task("mi"), seed=9)[1]
        b = split_dataset(ds, SplitScheme.for_task("mi"), seed=9)[1]
        np.testing.assert_array_equal(a.x, b.x)

    def test_missing_sessions(self):
        ds = synth_generate(SynthSpec(subjects=1, trials=10, timesteps=8, sessions=2))
        with pytest.raises(ValueError):
            split_dataset(ds, SplitScheme.for_task("ern"))

    def test_dataset_shapes(self):
        assert DATASET_SHAPES["mi"] == dict(channels=22, timesteps=438, subjects=9, classes=4)
        assert DATASET_SHAPES["ssvep"]["channels"] == 8
        assert DATASET_SHAPES["ern"]["timesteps"] == 160
