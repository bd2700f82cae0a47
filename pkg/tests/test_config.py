import pytest

from fate.config import ConfigError, ExperimentConfig, load_config, parse_config


def test_vision_defaults():
    cfg = parse_config("")
    assert (cfg.mu, cfg.B, cfg.tau, cfg.theta, cfg.lam) == (1.0, 32, 0.5, 0.95, 1.0)
    assert (cfg.n_dp, cfg.n_cp, cfg.adapt_lr, cfg.cls_lr) == (12, 12, 0.03, 0.03)
    assert (cfg.adapt_epochs, cfg.cls_epochs) == (10, 50)


def test_vl_defaults():
    cfg = parse_config("variant = vl\n")
    assert (cfg.mu, cfg.B, cfg.theta, cfg.n_dp, cfg.n_cp) == (16.0, 4, 0.95, 12, 16)
    assert (cfg.adapt_lr, cfg.cls_lr, cfg.adapt_epochs, cfg.cls_epochs, cfg.k) == (0.1, 0.0025, 20, 20, 16)


def test_parsing_types_and_comments():
    cfg = parse_config("""
        # comment
        variant = vision   # trailing
        theta = 0.8
        use_dp = off
        seeds = 3, 4
        strong_ops = rotate, contrast
        range.rotate = -10, 10
    """)
    assert cfg.theta == 0.8 and cfg.use_dp is False
    assert cfg.seeds == (3, 4) and cfg.strong_ops == ("rotate", "contrast")
    assert cfg.ranges["rotate"] == (-10.0, 10.0)


@pytest.mark.parametrize("text", [
    "nonsense = 1",
    "theta = high",
    "theta",
    "theta = 0.9\ntheta = 0.8",
    "variant = audio",
    "mu = 0.3",
    "lam = -1",
    "range.blur = 0, 1",
    "strong_ops = rotate, blur",
    "use_cp = maybe",
    "tau = 0",
])
def test_rejections(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_text_round_trip(tmp_path):
    cfg = parse_config("variant = vl\nseed = 7\nks = 1, 16\nrange.rotate = -5, 5\n")
    path = tmp_path / "cfg.txt"
    path.write_text(cfg.to_text())
    assert load_config(path) == cfg
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.cfg")


def test_replace_revalidates():
    with pytest.raises(ConfigError):
        ExperimentConfig().replace(theta=0.0)
