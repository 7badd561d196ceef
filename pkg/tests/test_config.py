import pytest

from specklemotion.config import PipelineConfig, format_kv, parse_kv, parse_overrides
from specklemotion.errors import ConfigError


def test_defaults():
    cfg = PipelineConfig()
    assert (cfg.patch_size, cfg.embed_dim, cfg.subsample_stride, cfg.neighborhood_radius) == (11, 5, 8, 1)
    assert cfg.lam == 1.0 and cfg.epsilon == 1e-8 and cfg.k == 121 and cfg.radius == 5
    assert cfg.max_iters == 100 and cfg.tol == 1e-6


@pytest.mark.parametrize("kw", [dict(patch_size=10), dict(patch_size=1), dict(embed_dim=0),
                                dict(patch_size=3, embed_dim=10), dict(lam=-1.0), dict(epsilon=0.0),
                                dict(slope_weight=-1.0), dict(threads=0)])
def test_invalid(kw):
    with pytest.raises(ConfigError):
        PipelineConfig(**kw)


def test_parse_kv_formats():
    text = "# comment\npatch_size = 7\nlambda: 0.5   # trailing\n\ntemporal = false\n"
    values = parse_kv(text)
    assert values == {"patch_size": "7", "lambda": "0.5", "temporal": "false"}
    cfg = PipelineConfig.from_mapping(values)
    assert cfg.patch_size == 7 and cfg.lam == 0.5 and cfg.temporal is False


def test_bad_line():
    with pytest.raises(ConfigError):
        parse_kv("just words")
    with pytest.raises(ConfigError):
        PipelineConfig.from_mapping({"patch_size": "eleven"})


def test_round_trip(tmp_path):
    cfg = PipelineConfig(patch_size=9, lam=2.5, temporal=False)
    path = tmp_path / "run.cfg"
    path.write_text(format_kv(cfg.to_dict()))
    assert PipelineConfig.load(path) == cfg


def test_overrides_and_unknown_keys(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("l = 3\nfoo = bar\n")
    cfg = PipelineConfig.load(path, parse_overrides(["embed_dim=4"]))
    assert cfg.embed_dim == 4 and cfg.extra == {"foo": "bar"}
    with pytest.raises(ConfigError):
        parse_overrides(["novalue"])
