import numpy as np
import pytest

from lindblad_vmc.config import DEFAULTS, ConfigError, ExperimentConfig
from lindblad_vmc.vmc import PAPER_LR, ScheduleSpec, schedule_value


def test_defaults_fill_every_section():
    cfg = ExperimentConfig.from_dict({})
    assert set(cfg.raw) == set(DEFAULTS)
    assert cfg.n_sites == 4
    assert cfg.sweep_points() == [(None, None)]
    assert cfg.model_config().n_params == init_count(cfg)


def init_count(cfg):
    from lindblad_vmc.ansatz import init_params
    return init_params(cfg.model_config()).theta.size


@pytest.mark.parametrize("data", [
    {"bogus": 1},
    {"model": {"sitez": 4}},
    {"optimizer": {"lr": {"bse": 0.1}}},
])
def test_unknown_keys_rejected(data):
    with pytest.raises(ConfigError, match="unknown config key"):
        ExperimentConfig.from_dict(data)


@pytest.mark.parametrize("data", [
    {"model": {"kind": "ladder"}},
    {"model": {"jumps": "dephasing"}},
    {"sweep": {"parameter": "h", "values": [1.0]}},
    {"sweep": {"parameter": "g", "values": []}},
    {"optimizer": {"iterations": 0}},
    {"optimizer": {"kind": "lbfgs"}},
    {"sampler": {"n_chains": 0}},
])
def test_invalid_values_rejected(data):
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict(data)


def test_scalar_schedule_shorthand():
    cfg = ExperimentConfig.from_dict({"optimizer": {"lr": 0.2, "iterations": 100}})
    opt = cfg.optimizer()
    assert schedule_value(opt.lr, 0) == 0.2
    assert schedule_value(opt.lr, 99) < 0.2


def test_explicit_and_constant_schedules():
    cfg = ExperimentConfig.from_dict({"optimizer": {
        "lr": {"base": PAPER_LR.base, "switch_step": PAPER_LR.switch_step,
               "decay_steps": PAPER_LR.decay_steps},
        "shift": {"schedule": False, "base": 0.1}}})
    opt = cfg.optimizer()
    assert opt.lr == PAPER_LR
    assert opt.shift == ScheduleSpec.constant(0.1)


def test_sweep_substitution():
    cfg = ExperimentConfig.from_dict({"model": {"kind": "heisenberg_chain", "sites": 3},
                                      "sweep": {"parameter": "By", "values": [0, 2]}})
    assert cfg.sweep_points() == [("By", 0.0), ("By", 2.0)]
    assert cfg.model_params("By", 2.0)["B"] == [-1.0, 2.0, 0.1]
    assert cfg.model_params("Jx", 0.5)["J"][0] == 0.5
    # the stored config is not mutated by substitution
    assert cfg.raw["model"]["B"][1] == 0.0
    a = cfg.superoperator("By", 0.0).dense()
    b = cfg.superoperator("By", 2.0).dense()
    assert not np.allclose(a, b)


def test_grid_sites():
    cfg = ExperimentConfig.from_dict({"model": {"kind": "tfi_grid", "dims": [2, 2]}})
    assert cfg.n_sites == 4
    assert cfg.superoperator().n_sites == 4


def test_digest_and_seed_override(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text('seed = 5\n[model]\nsites = 3\ng = 0.5\n')
    cfg = ExperimentConfig.load(path)
    assert cfg.seed == 5 and cfg.n_sites == 3
    assert cfg.digest() == ExperimentConfig.load(path).digest()
    other = cfg.with_seed(6)
    assert other.seed == 6 and cfg.seed == 5
    assert other.digest() != cfg.digest()


@pytest.mark.parametrize("name", ["smoke", "ising4", "heisenberg5", "grid2x2", "purity6", "cost_drop"])
def test_shipped_configs_load(name):
    from pathlib import Path
    path = Path(__file__).parent.parent / "configs" / f"{name}.toml"
    ExperimentConfig.load(path)


def test_site_order_option():
    from lindblad_vmc.exact import expectation_exact, steady_state_ed
    from lindblad_vmc.operators import magnetization_terms
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"model": {"site_order": "spiral"}})
    base = {"kind": "tfi_grid", "dims": [2, 2], "g": 1.3}
    a = ExperimentConfig.from_dict({"model": base})
    b = ExperimentConfig.from_dict({"model": dict(base, site_order="snake")})
    ra, rb = steady_state_ed(a.superoperator()), steady_state_ed(b.superoperator())
    for axis in "xyz":
        terms = magnetization_terms(4, axis)
        assert expectation_exact(terms, ra) == pytest.approx(expectation_exact(terms, rb), abs=1e-12)
