import copy
import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from periodic_portfolio.config import build_experiment, load_config, parse_config
from periodic_portfolio.engine.constraints import ConstraintKind
from periodic_portfolio.engine.errors import ConfigError

CONFIG_DIR = Path(__file__).parent.parent / "configs"


def _edited(config: dict, block: str, **changes) -> dict:
    data = copy.deepcopy(config)
    data[block].update(changes)
    return data


class TestShippedConfigs:
    @pytest.mark.parametrize(
        "name", ["merton_gamma1.json", "sigmoid_factor.json", "log_growth.yaml"]
    )
    def test_builds(self, name):
        model, K, spec, settings = build_experiment(load_config(CONFIG_DIR / name))
        assert K.n == model.n
        assert settings.paths % 2 == 0
        assert 0.0 < model.m <= 1.0

    def test_merton_gamma1(self):
        model, K, spec, settings = build_experiment(
            load_config(CONFIG_DIR / "merton_gamma1.json")
        )
        assert K.kind is ConstraintKind.NO_SHORT_BORROW_CAP
        assert spec.gamma == 1.0
        assert model.M0 == pytest.approx(0.09)
        assert settings.seed == 20240611

    def test_sigmoid_level_sets_m(self):
        model, _, spec, _ = build_experiment(load_config(CONFIG_DIR / "sigmoid_factor.json"))
        assert model.m == pytest.approx(spec.h.lower)
        assert model.n == 2

    def test_log_growth(self):
        model, K, spec, _ = build_experiment(load_config(CONFIG_DIR / "log_growth.yaml"))
        assert spec.is_log
        assert spec.alpha is None
        assert K.kind is ConstraintKind.BORROW_CAP
        assert model.r_lower == pytest.approx(0.01)
        assert model.r_bar == pytest.approx(0.03)


class TestSchema:
    @pytest.mark.parametrize(
        "block, changes",
        [
            ("utility", {"gamma": 0.0}),
            ("utility", {"gamma": 1.5}),
            ("utility", {"alpha": 1.0}),
            ("utility", {"alpha": None}),
            ("utility", {"rho": -0.1}),
            ("numerics", {"paths": 255}),
            ("numerics", {"dt": 0.25}),
            ("numerics", {"seed": -1}),
            ("numerics", {"extra": 1}),
            ("constraints", {"kind": "box", "hi": [1.0]}),
            ("constraints", {"kind": "borrow_cap"}),
            ("constraints", {"kind": "cone"}),
        ],
    )
    def test_rejects(self, flat_config, block, changes):
        with pytest.raises(ConfigError):
            parse_config(_edited(flat_config, block, **changes))

    def test_missing_seed(self, flat_config):
        data = copy.deepcopy(flat_config)
        del data["numerics"]["seed"]
        with pytest.raises(ConfigError, match="seed"):
            parse_config(data)

    def test_unknown_family(self, flat_config):
        data = copy.deepcopy(flat_config)
        data["model"]["coefficients"]["family"] = "cubic"
        with pytest.raises(ConfigError):
            parse_config(data)

    def test_sigmoid_level_needs_bounds(self, flat_config):
        data = _edited(flat_config, "utility", h={"family": "sigmoid", "low": 0.5})
        with pytest.raises(ConfigError):
            parse_config(data)

    def test_odd_paths_allowed_without_antithetic(self, flat_config):
        config = parse_config(
            _edited(flat_config, "numerics", paths=255, antithetic=False)
        )
        assert config.numerics.paths == 255

    def test_log_mode_without_alpha(self, flat_config):
        data = _edited(flat_config, "utility", mode="log", alpha=None)
        assert parse_config(data).utility.alpha is None

    def test_engine_rejections_become_config_errors(self, flat_config):
        data = copy.deepcopy(flat_config)
        data["model"]["q"] = [2.0]
        config = parse_config(data)
        with pytest.raises(ConfigError, match="model block"):
            build_experiment(config)


class TestLoading:
    def test_yaml(self, tmp_path, flat_config):
        path = tmp_path / "experiment.yml"
        path.write_text(yaml.safe_dump(flat_config))
        assert load_config(path) == parse_config(flat_config)

    def test_json(self, write_config, flat_config):
        assert load_config(write_config(flat_config)) == parse_config(flat_config)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="Cannot read"):
            load_config(tmp_path / "absent.json")

    def test_malformed_json(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text('{"model": ')
        with pytest.raises(ConfigError, match="Cannot parse"):
            load_config(path)

    def test_top_level_must_be_mapping(self, tmp_path):
        path = tmp_path / "list.yaml"
        path.write_text("- 1\n- 2\n")
        with pytest.raises(ConfigError, match="mapping"):
            load_config(path)

    def test_json_round_trip(self, flat_config):
        config = parse_config(flat_config)
        assert parse_config(json.loads(config.to_json())) == config


class TestOverrides:
    def test_paths_and_seed(self, flat_config):
        config = parse_config(flat_config).with_overrides(paths=1024, seed=9)
        assert config.numerics.paths == 1024
        assert config.numerics.seed == 9
        assert config.numerics.periods == flat_config["numerics"]["periods"]

    def test_no_overrides_is_identity(self, flat_config):
        config = parse_config(flat_config)
        assert config.with_overrides() is config

    def test_invalid_override(self, flat_config):
        with pytest.raises(ConfigError, match="override"):
            parse_config(flat_config).with_overrides(paths=1023)


class TestBuilders:
    def test_flat_model(self, flat_config):
        model, K, spec, settings = build_experiment(parse_config(flat_config))
        assert K.kind is ConstraintKind.UNCONSTRAINED
        assert model.m == pytest.approx(0.8)
        assert model.M0 == pytest.approx(0.0)
        assert spec.alpha == 0.5 and spec.gamma == 0.5
        assert settings.steps_per_period == 8
        assert settings.dual_sweeps == 0
        assert settings.periods == 2

    def test_explicit_m(self, flat_config):
        model, *_ = build_experiment(parse_config(_edited(flat_config, "utility", m=0.5)))
        assert model.m == 0.5

    @pytest.mark.parametrize("dt, steps", [(0.25, 4), (0.3, 4), (1.0, 1), (2.0, 1)])
    def test_steps_from_dt(self, flat_config, dt, steps):
        data = copy.deepcopy(flat_config)
        del data["numerics"]["steps_per_period"]
        data["numerics"]["dt"] = dt
        *_, settings = build_experiment(parse_config(data))
        assert settings.steps_per_period == steps

    def test_default_steps(self, flat_config):
        data = copy.deepcopy(flat_config)
        del data["numerics"]["steps_per_period"]
        *_, settings = build_experiment(parse_config(data))
        assert settings.steps_per_period == 64

    def test_scalar_volatility(self, flat_config):
        data = copy.deepcopy(flat_config)
        data["model"]["coefficients"].update(mu=0.08, sigma=0.2)
        model, *_ = build_experiment(parse_config(data))
        np.testing.assert_allclose(model.sigma(0.0), [[0.2]])
        assert model.M0 == pytest.approx(0.09)

    def test_bound_overrides(self, flat_config):
        data = copy.deepcopy(flat_config)
        data["model"]["bounds"] = {"r_bar": 0.05, "M0": 0.2}
        model, *_ = build_experiment(parse_config(data))
        assert model.r_bar == 0.05
        assert model.M0 == 0.2
        assert model.r_lower == pytest.approx(0.02)
