import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latte.config import ConfigError, RunConfig


def test_defaults_valid():
    cfg = RunConfig()
    cfg.validate()
    assert (cfg.epochs, cfg.batch_size, cfg.seed) == (200, 32, 0)


def test_round_trip_fixpoint():
    cfg = RunConfig.from_text("epochs = 7\nkernels = 3,5\nuse_adapters = false\nsynth_snr = inf\nfill = 0.25\n")
    text = cfg.to_text()
    again = RunConfig.from_text(text)
    assert again == cfg
    assert again.to_text() == text


@settings(max_examples=40, deadline=None)
@given(
    epochs=st.integers(0, 500),
    lr=st.floats(0, 1, allow_nan=False),
    windows=st.integers(1, 8),
    shift=st.floats(0, 1),
    adapters=st.booleans(),
)
def test_round_trip_property(epochs, lr, windows, shift, adapters):
    cfg = RunConfig(epochs=epochs, lr=lr, windows=windows, synth_shift=shift, use_adapters=adapters)
    assert RunConfig.from_text(cfg.to_text()) == cfg


def test_hash_stable():
    assert RunConfig().config_hash() == RunConfig().config_hash()
    assert RunConfig(seed=1).config_hash() != RunConfig().config_hash()
    assert len(RunConfig().config_hash()) == 64


def test_comments_and_blank_lines():
    cfg = RunConfig.from_text("# header\n\nlr = 0.01  # tuned\n")
    assert cfg.lr == 0.01


@pytest.mark.parametrize(
    "text,key",
    [
        ("bogus = 1", "bogus"),
        ("epochs = many", "epochs"),
        ("r = 2", "r"),
        ("l_min = 0.5\nl_max = 0.2", "l_max"),
        ("kernels = 4,9", "kernels"),
        ("task = speech", "task"),
        ("use_adapters = maybe", "use_adapters"),
        ("batch_size = 0", "batch_size"),
    ],
)
def test_invalid_names_key(text, key):
    with pytest.raises(ConfigError) as info:
        RunConfig.from_text(text)
    assert info.value.key == key


def test_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("epochs = 3\n")
    cfg = RunConfig.load(path, ["epochs=5", "seed=2"])
    assert (cfg.epochs, cfg.seed) == (5, 2)
    with pytest.raises(ConfigError):
        RunConfig.load(path, ["nonsense"])
    with pytest.raises(ConfigError):
        RunConfig.load(path, ["nope=1"])


def test_missing_equals():
    with pytest.raises(ConfigError):
        RunConfig.from_text("epochs 3")
