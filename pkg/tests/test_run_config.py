import pytest

from stcvit.run_config import PRESETS, RunConfig, RunConfigError, load_run_config, parse_run_config


def test_empty_config_is_desk_preset():
    cfg = parse_run_config("")
    assert cfg.preset == "desk"
    assert (cfg.dim, cfg.heads, cfg.depth, cfg.epochs, cfg.batch_size) == (128, 4, 2, 20, 4)
    assert cfg.leads == [6.0, 12.0, 18.0, 24.0, 36.0]


def test_paper_preset_with_override():
    cfg = parse_run_config("preset = paper\nepochs = 100  # longer schedule\n")
    assert (cfg.dim, cfg.heads, cfg.depth, cfg.batch_size, cfg.base_lr) == (1024, 16, 4, 12, 5e-5)
    assert cfg.epochs == 100


def test_values_are_typed():
    cfg = parse_run_config("""
        # small run
        dim = 16
        heads = 2
        adaptive_eval = true
        alpha = 0.1
        leads = 6, 12
        variant = vanilla_vit
    """)
    assert cfg.dim == 16
    assert cfg.adaptive_eval is True
    assert cfg.alpha == 0.1
    assert cfg.leads == [6.0, 12.0]
    assert cfg.variant == "vanilla_vit"


def test_all_problems_reported_at_once():
    text = "dim = 10\nbogus = 1\nepochs = 0\nthis line has no separator\ndim = 12\n"
    with pytest.raises(RunConfigError) as exc:
        parse_run_config(text)
    problems = exc.value.problems
    assert any("line 4" in p for p in problems)
    assert any("duplicate key 'dim'" in p for p in problems)
    assert any(p.startswith("bogus") for p in problems)
    assert any(p.startswith("epochs") for p in problems)


def test_model_constraints_checked_before_work():
    with pytest.raises(RunConfigError, match="not divisible"):
        parse_run_config("dim = 10\nheads = 4\n")


def test_unknown_preset_and_variant():
    with pytest.raises(RunConfigError) as exc:
        parse_run_config("preset = huge\n")
    assert any("preset" in p for p in exc.value.problems)
    with pytest.raises(RunConfigError):
        parse_run_config("variant = transformer\n")


def test_split_must_leave_test_range():
    with pytest.raises(RunConfigError, match="test range"):
        parse_run_config("train_fraction = 0.9\nval_fraction = 0.1\n")


def test_resolved_text_roundtrip():
    cfg = parse_run_config("dim = 32\nheads = 2\nleads = 6, 24\nbase_lr = 0.0003\ndata = d.stcg\n")
    assert parse_run_config(cfg.to_text()) == cfg


def test_settings_objects():
    cfg = parse_run_config("dim = 16\nheads = 2\ngamma = 0.5\ngeopotential_channel = z850\n")
    model = cfg.model_settings(["t2m", "u10", "v10", "z850"], 4, 8)
    assert (model.dim, model.height, model.width) == (16, 4, 8)
    train = cfg.train_settings()
    assert train.loss_weights.gamma == 0.5
    assert train.bindings.geopotential == "z850"
    assert train.base_lr == cfg.base_lr


def test_presets_are_valid_configs():
    for name, values in PRESETS.items():
        assert RunConfig(preset=name, **values).model_settings().dim == values["dim"]


def test_load_run_config(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("epochs = 3\n", encoding="utf-8")
    assert load_run_config(path).epochs == 3
    assert load_run_config(None) == parse_run_config("")
    with pytest.raises(FileNotFoundError):
        load_run_config(tmp_path / "missing.cfg")
