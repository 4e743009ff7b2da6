import pytest

from trat import config as C


def test_empty_config_is_all_defaults():
    cfg = C.loads("")
    assert cfg.sections == C.DEFAULTS
    t = cfg.train()
    assert (t.epochs, t.batch_size, t.lr, t.lr_drops) == (200, 128, 0.1, (100, 150))
    assert cfg.taylor().eta == 0.2 and cfg.taylor().lambda_inv == 6.0


def test_unknown_key_reports_position():
    text = "[train]\nepochs = 3\n  learning_rate = 0.1\n"
    with pytest.raises(C.ConfigError) as e:
        C.loads(text, "run.toml")
    assert (e.value.line, e.value.column) == (3, 3)
    assert str(e.value).startswith("run.toml:3:3:") and "learning_rate" in str(e.value)


def test_unknown_section_reports_position():
    with pytest.raises(C.ConfigError) as e:
        C.loads("[model]\narch = 'mlp-moons'\n\n[optimizer]\nlr = 1\n")
    assert (e.value.line, e.value.column) == (4, 1)


def test_parse_error_position():
    with pytest.raises(C.ConfigError) as e:
        C.loads("[train]\nepochs = = 3\n")
    assert e.value.line == 2 and e.value.column is not None


def test_wrong_type():
    with pytest.raises(C.ConfigError, match="wrong type") as e:
        C.loads("[train]\nepochs = \"ten\"\n")
    assert e.value.line == 2
    with pytest.raises(C.ConfigError):
        C.loads("[attack]\nsteps = true\n")


def test_int_accepted_for_float():
    assert C.loads("[train]\nlr = 1\n").train().lr == 1.0


def test_semantic_validation_is_config_error():
    with pytest.raises(C.ConfigError):
        C.loads("[train]\nepochs = 10\nlr_drops = [20]\n")
    with pytest.raises(C.ConfigError):
        C.loads("[taylor]\nmode = \"third\"\n")


def test_resolved_snapshot_round_trips():
    cfg = C.loads("[taylor]\nmode = \"zeroth+first\"\n[train]\nepochs = 5\nlr_drops = [2]\n")
    snap = cfg.to_toml()
    again = C.loads(snap)
    assert again.to_toml() == snap
    assert again["taylor"]["eta"] == 0.3


@pytest.mark.parametrize("name", C.PRESETS)
def test_presets_load(name):
    cfg = C.load(f"presets/{name}.toml")
    assert cfg["model"]["arch"] == "mlp-moons" and cfg["data"]["dataset"] == "moons"
    assert C.load(name).sections == cfg.sections


def test_preset_modes():
    modes = {n: C.load(n).taylor().mode for n in C.PRESETS}
    assert modes == {"moons-trades": "zeroth", "moons-taylor1": "zeroth+first",
                     "moons-taylor12": "zeroth+first+second"}


def test_missing_file():
    with pytest.raises(C.ConfigError, match="not found"):
        C.load("/nonexistent/x.toml")


def test_with_seed_does_not_mutate():
    cfg = C.loads("")
    other = cfg.with_seed(7)
    assert other["train"]["seed"] == 7 and cfg["train"]["seed"] == 0
