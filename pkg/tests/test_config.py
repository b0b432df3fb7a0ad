import pytest
from hypothesis import given, settings, strategies as st

from dybo_gmsfem.config import ConfigError, eval_fraction, load_config, parse_config, parse_custom, write_config
from dybo_gmsfem.experiment import report_steps


def test_shipped_configs_load():
    ex1 = load_config("configs/example1.ini")
    assert ex1.dybo.dt == 1e-3 and ex1.dybo.m == 4 and ex1.gpc.r == 3
    assert ex1.output.report_times == [0.1, 0.2, 0.4, 0.8, 1.0]
    assert ex1.n_steps == 1000
    assert report_steps(ex1) == [100, 200, 400, 800, 1000]
    ex3 = load_config("configs/example3.ini")
    assert ex3.dybo.dt == pytest.approx(1 / 80)
    assert ex3.grid.n_coarse * ex3.grid.n_fine_per_coarse == 400
    assert report_steps(ex3) == [10, 20, 40, 60, 80]
    ex2 = load_config("configs/example2.ini")
    assert ex2.gpc.r == 4 and ex2.dybo.m == 3
    load_config("configs/example3-desk.ini")


def test_defaults_and_round_trip(tmp_path):
    cfg = parse_config("[grid]\nn_coarse = 4\n")
    assert cfg.grid.n_coarse == 4 and cfg.online.theta == 0.05 and cfg.online.max_rounds == 5
    write_config(cfg, tmp_path / "c.ini")
    back = load_config(tmp_path / "c.ini")
    assert back.as_dict() == cfg.as_dict()


@pytest.mark.parametrize("text, where", [
    ("[grid]\nn_coarse = 1\n", "[grid] n_coarse"),
    ("[grid]\nbogus = 1\n", "[grid] bogus"),
    ("[nosuch]\nx = 1\n", "unknown section"),
    ("[dybo]\nm = 0\n", "[dybo] m"),
    ("[dybo]\nm = 5\n", "[dybo] m"),
    ("[dybo]\ndt = 0.3\nT = 1\n", "[dybo] T"),
    ("[dybo]\ndt = abc\n", "[dybo] dt"),
    ("[gpc]\nr = 4\n", "[gpc] r"),
    ("[online]\nenabled = maybe\n", "[online] enabled"),
    ("[output]\nreport_times = 0.1 0.1005\n", "[output] report_times"),
    ("[output]\nreport_times = 2\n", "[output] report_times"),
    ("[media]\nmean = raster\n", "[media] raster_path"),
    ("[media]\nfluctuations = custom\ncustom = 1 2\n", "[media] custom"),
    ("[dybo]\nincrement_limit = -1\n", "[dybo] increment_limit"),
    ("[dybo]\nincrement_limit = sometimes\n", "[dybo] increment_limit"),
])
def test_invalid_configs_name_the_key(text, where):
    with pytest.raises(ConfigError) as exc:
        parse_config(text)
    assert where in str(exc.value)


def test_missing_file():
    with pytest.raises(ConfigError, match="not found"):
        load_config("does/not/exist.ini")


def test_custom_fluctuations():
    specs = parse_custom("0.1 1.2 1/8 diag-sin; 0.2 0.5 0.25 axis-cos")
    assert specs == [(0.1, 1.2, 0.125, "diag-sin"), (0.2, 0.5, 0.25, "axis-cos")]
    cfg = parse_config("[media]\nfluctuations = custom\ncustom = 0.1 1.2 1/8 diag-sin\n[gpc]\nr = 1\n[dybo]\nm = 2\n")
    assert cfg.gpc.r == 1
    with pytest.raises(ConfigError, match="variant"):
        parse_custom("0.1 1.2 0.1 wavy")


@settings(max_examples=30, deadline=None)
@given(num=st.integers(1, 1000), den=st.integers(1, 1000))
def test_eval_fraction(num, den):
    assert eval_fraction(f"{num}/{den}") == pytest.approx(num / den)
    assert eval_fraction(f" {num}e-3 ") == pytest.approx(num * 1e-3)
