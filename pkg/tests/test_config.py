from __future__ import annotations

import json
import textwrap

import numpy as np
import pytest

from wjko.config import ConfigError, bundled_configs, load_config, parse_config

BASE = {
    "problem": {
        "dim": 1,
        "W": {"kind": "abs", "a": 0.2},
        "V": {"kind": "quadratic_capped", "s": 1.0, "cap_radius": 1.5},
        "rho0": {"points": [-0.5, 0.5]},
    },
    "control": {"mode": "fixed", "M": 1.0, "R": 1.0, "lip": 0.0, "knot_times": [0.0, 1.0],
                "knots": [{"points": [[0.5]], "weights": [1.0]}] * 2},
    "scheme": {"T": 1.0, "k": 4},
}


def _with(**updates):
    data = json.loads(json.dumps(BASE))
    for path, value in updates.items():
        node = data
        keys = path.split("__")
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        if value is None:
            node.pop(keys[-1], None)
        else:
            node[keys[-1]] = value
    return data


def test_minimal_config():
    cfg = parse_config(_with())
    assert cfg.scheme.tau == 0.25 and cfg.M == 1.0 and cfg.rho0.weights.tolist() == [0.5, 0.5]
    assert cfg.nu.at(0.3).points.tolist() == [[0.5]]
    assert cfg.formats == ("csv", "json") and cfg.emit_verify


@pytest.mark.parametrize("k", [0, -3, 2.5, "4"])
def test_nonpositive_step_names_scheme_k(k):
    with pytest.raises(ConfigError, match="scheme.k"):
        parse_config(_with(scheme__k=k))


def test_nonpositive_horizon_mentions_scheme_k():
    with pytest.raises(ConfigError, match="scheme.k"):
        parse_config(_with(scheme__T=0.0))


@pytest.mark.parametrize("updates, key", [
    ({"problem__W": {"kind": "yukawa"}}, "problem.W"),
    ({"problem__W": {"kind": "morse", "C_a": 0.5, "l_a": 2.0, "C_r": 1.0, "l_r": 1.0}}, "problem.W"),
    ({"problem__rho0": {"points": [0.0], "file": "x.csv"}}, "problem.rho0"),
    ({"problem__rho0": {}}, "problem.rho0"),
    ({"problem__rho0": {"points": [0.0, 1.0], "weights": [0.2, 0.2]}}, "problem.rho0"),
    ({"problem__rho0": {"sampler": {"kind": "gaussian", "n": 4}}}, "problem.rho0.sampler.seed"),
    ({"problem__rho0": {"sampler": {"kind": "cube", "n": 4, "seed": 1}}}, "problem.rho0.sampler.kind"),
    ({"problem__dim": 0}, "problem.dim"),
    ({"control__mode": "both"}, "control.mode"),
    ({"control__file": "nu.json"}, "control"),
    ({"control__knot_times": [0.0, 2.0]}, "control.knot_times"),
    ({"control__lip": -1.0}, "control.lip"),
    ({"scheme__inner": {"tolerance": 1.0}}, "scheme.inner"),
    ({"cost": {"kind": "evacuation", "x0": [1.0, 2.0]}}, "cost.x0"),
    ({"cost": {"kind": "evacuation", "speed": 1}}, "cost"),
    ({"output": {"formats": ["xml"]}}, "output.formats"),
    ({"oracle": {"k_list": [8, 12, 24]}}, "oracle.k_list"),
    ({"oracle": {"k_list": [8, 16], "k_ref": 24}}, "oracle.k_ref"),
    ({"verify": {"test_functions": [{"theta": {"start": 0.0, "stop": 0.5}, "xi": {"center": [0.0], "radius": 1}}]}},
     "verify.test_functions[0]"),
])
def test_errors_name_the_offending_key(updates, key):
    with pytest.raises(ConfigError) as exc:
        parse_config(_with(**updates))
    assert str(exc.value).startswith(key)


def test_control_section_required():
    data = _with()
    del data["control"]
    with pytest.raises(ConfigError, match="^control"):
        parse_config(data)


def test_parametrized_control_and_optimizer():
    data = _with(control={"mode": "parametrized", "masses": [1.0], "start": [[0.0]], "n_knots": 3,
                          "v_max": 1.0, "R": 2.0, "M": 1.0, "optimizer": {"method": "nelder_mead", "budget": 5}})
    cfg = parse_config(data)
    assert cfg.theta0.knot_times.tolist() == [0.0, 0.5, 1.0]
    assert cfg.optimizer.method == "nelder_mead" and cfg.control is None
    assert not cfg.nu.violations()
    data["control"]["optimizer"]["budget"] = -1
    with pytest.raises(ConfigError, match="control.optimizer"):
        parse_config(data)


def test_samplers_are_seeded_and_seed_override():
    s = {"kind": "gaussian", "n": 6, "centers": [[0.0], [5.0]], "scale": 0.1, "seed": 4}
    a = parse_config(_with(problem__rho0={"sampler": s}))
    b = parse_config(_with(problem__rho0={"sampler": s}))
    c = parse_config(_with(problem__rho0={"sampler": s}), seed=5)
    assert np.array_equal(a.rho0.points, b.rho0.points)
    assert not np.array_equal(a.rho0.points, c.rho0.points)
    assert np.sum(a.rho0.points > 2.5) == 3
    ball = parse_config(_with(problem__rho0={"sampler": {"kind": "uniform_ball", "n": 50, "radius": 0.5,
                                                         "seed": 0}}))
    assert np.all(np.abs(ball.rho0.points) <= 0.5)
    box = parse_config(_with(problem__rho0={"sampler": {"kind": "uniform_box", "n": 50, "low": 2, "high": 3,
                                                        "seed": 0}}))
    assert np.all((box.rho0.points >= 2) & (box.rho0.points <= 3))


def test_files_resolve_relative_to_config(tmp_path):
    (tmp_path / "sub").mkdir()
    (tmp_path / "sub" / "crowd.csv").write_text("x1,weight\n0.0,0.5\n1.0,0.5\n")
    nu = {"knot_times": [0.0, 1.0], "knots": [{"dim": 1, "points": [[0.0]], "weights": [1.0]},
                                              {"dim": 1, "points": [[0.5]], "weights": [1.0]}],
          "mode": "piecewise_linear"}
    (tmp_path / "sub" / "nu.json").write_text(json.dumps(nu))
    (tmp_path / "run.toml").write_text(textwrap.dedent("""
        [problem]
        dim = 1
        W = { kind = "zero" }
        V = { kind = "abs", a = 1.0 }
        rho0 = { file = "sub/crowd.csv" }
        [control]
        mode = "fixed"
        file = "sub/nu.json"
        M = 1.0
        R = 1.0
        lip = 0.5
        [scheme]
        T = 1.0
        k = 2
        [output]
        dir = "results"
    """))
    cfg = load_config(tmp_path / "run.toml")
    assert cfg.rho0.points.ravel().tolist() == [0.0, 1.0]
    assert cfg.nu.at(0.5).points.tolist() == [[0.25]]
    assert cfg.out_dir == tmp_path / "results"
    assert cfg.name == "run"


def test_json_config_and_read_errors(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps(BASE))
    assert load_config(tmp_path / "c.json").scheme.k == 4
    (tmp_path / "bad.toml").write_text("[scheme\n")
    with pytest.raises(ConfigError, match="cannot parse"):
        load_config(tmp_path / "bad.toml")
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "missing.toml")


@pytest.mark.parametrize("name", ["two_cluster_morse.toml", "abs_aggregation.toml", "smooth_convex.toml",
                                  "evacuation_1d.toml"])
def test_bundled_configs_load(name, tmp_path, monkeypatch):
    assert name in bundled_configs()
    monkeypatch.chdir(tmp_path)
    cfg = load_config(name)
    assert cfg.out_dir.is_relative_to(tmp_path)
    assert cfg.rho0.is_probability()
