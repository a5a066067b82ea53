import json
from pathlib import Path

import numpy as np
import pytest

from app.core.config import RunConfig, load_run_config
from app.core.errors import ConfigurationError, InputDataError, NumericalError, StageError, row_error
from app.core.logging import stage_logging
from app.core.utils import dump_json, stable_mean, standard_error, write_json


def test_defaults_mirror_published_pipeline():
    config = RunConfig()
    assert config.zones == [40, 50, 55, 60]
    assert (config.fidelity_kernel_width, config.prediction_kernel_width) == (1.0, 2.0)
    assert (config.bin_width, config.k_folds, config.n_pred) == (5.0, 10, 10000)


def test_bundled_config_loads():
    config = load_run_config(str(Path(__file__).parent / "data" / "configs" / "smoke.json"))
    assert config.zone_weights == {40: 0.4, 50: 0.3, 55: 0.2, 60: 0.1}
    assert config.calibration.participants_per_group == 12


def test_flags_override_file(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"seed": 1, "n_trials": 50}))
    config = load_run_config(str(path)).with_overrides(seed=9, n_trials=None)
    assert config.seed == 9
    assert config.n_trials == 50


def test_invalid_config_file(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"k_folds": 1}))
    with pytest.raises(ConfigurationError):
        load_run_config(str(path))
    with pytest.raises(ConfigurationError):
        load_run_config(str(tmp_path / "absent.json"))


def test_zone_weights_must_match_zones():
    with pytest.raises(ConfigurationError):
        RunConfig().with_overrides(zone_weights={70: 1.0})


def test_error_exit_codes():
    assert InputDataError("x").exit_code == 1
    assert ConfigurationError("x").exit_code == 1
    assert NumericalError("x").exit_code == 2
    wrapped = StageError("fatality", NumericalError("separated"))
    assert wrapped.exit_code == 2
    assert str(wrapped) == "stage 'fatality' failed: separated"
    assert str(row_error(4, "bad speed", "in.csv")) == "in.csv: row 4: bad speed"


def test_stage_logging_reraises():
    with pytest.raises(InputDataError):
        with stage_logging("compare", run_id="test"):
            raise InputDataError("boom")


def test_stable_statistics():
    values = [1e16, 1.0, -1e16, 1.0]
    assert stable_mean(values) == 0.5
    assert standard_error([2.0]) == 0.0
    assert standard_error([1.0, 2.0, 3.0, 4.0]) == pytest.approx(np.std([1, 2, 3, 4], ddof=1) / 2.0)


def test_json_is_canonical(tmp_path):
    text = dump_json({"b": np.float64(1.5), "a": np.arange(2)})
    assert text == '{\n  "a": [\n    0,\n    1\n  ],\n  "b": 1.5\n}\n'
    path = write_json(tmp_path / "nested" / "out.json", {"x": 1})
    assert path.read_text() == dump_json({"x": 1})
