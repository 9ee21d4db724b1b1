import numpy as np
import pytest

from safeguide import cbf
from safeguide.errors import ConfigError
from safeguide.scenario import BUNDLED, ScenarioFile, bundled_path, resolve, sample_initial_states

MINIMAL = """
[robot]
x = 2.0
y = 0.0
theta = 0.0
v = 0.0
omega = 0.0
"""


def test_minimal_file_uses_defaults():
    sf = ScenarioFile.loads(MINIMAL + '[controller]\nkind = "nominal"\n')
    sc = sf.to_scenario()
    assert sc.barrier is None and sc.controller == "nominal" and sc.dt == 1e-3


def test_qp_without_barrier_is_rejected():
    with pytest.raises(ConfigError, match="barrier"):
        ScenarioFile.loads(MINIMAL)


@pytest.mark.parametrize("name", BUNDLED)
def test_bundled_files_round_trip(name, tmp_path):
    sf = ScenarioFile.load(bundled_path(name))
    again = ScenarioFile.loads(sf.dumps())
    assert again == sf
    sf.dump(tmp_path / "x.toml")
    assert ScenarioFile.load(tmp_path / "x.toml") == sf


def test_bundled_example_matches_library_barrier():
    spec = ScenarioFile.load(bundled_path("example1")).barrier_spec()
    ref = cbf.example1_barrier()
    X, Y = np.meshgrid(np.linspace(-1, 8, 7), np.linspace(-1, 1, 5))
    assert np.array_equal(spec.h(X, Y), ref.h(X, Y))


@pytest.mark.parametrize("text,msg", [
    (MINIMAL + "[gains]\nk_rh = 2.0\n", r"\[gains\] unknown key 'k_rh'"),
    (MINIMAL + "colour = 1\n", "colour"),
    ("name = 'a'\n", r"missing required section \[robot\]"),
    (MINIMAL.replace("omega = 0.0\n", ""), r"\[robot\] missing required key 'omega'"),
    (MINIMAL.replace("x = 2.0", 'x = "two"'), r"\[robot\]\.x: expected a finite number"),
    (MINIMAL + "[barrier]\ncoeffs = [1, 2, 3]\n", "list of 6 numbers"),
    (MINIMAL + "[barrier]\ncoeffs = [1, 0, 0, 0, 0, 0]\nH = [[1, 0]]\n", "2x2"),
    (MINIMAL + '[controller]\nkind = "mpc"\n', "kind"),
    (MINIMAL + '[controller]\nkind = "nominal"\n[sim]\nhold = "foh"\n', "hold"),
    (MINIMAL + "[robot2]\n", "robot2"),
    ("[robot\n", "mem|string"),
])
def test_schema_errors_carry_location(text, msg):
    with pytest.raises(ConfigError, match=msg):
        ScenarioFile.loads(text, source="mem.toml")


def test_unsafe_initial_state_is_a_config_error():
    text = MINIMAL.replace("x = 2.0", "x = -3.0") + "[barrier]\ncoeffs = [1.0, 1.0, 0.0, 0.0, 0.0, -8.0]\n"
    with pytest.raises(ConfigError, match="initial state unsafe"):
        ScenarioFile.loads(text)


def test_missing_file():
    with pytest.raises(ConfigError, match="cannot read"):
        ScenarioFile.load("/nonexistent/file.toml")


def test_resolve_bundled_names(tmp_path):
    assert resolve("example2") == bundled_path("example2")
    p = tmp_path / "mine.toml"
    assert resolve(p) == p
    with pytest.raises(ConfigError):
        bundled_path("example3")


def test_sampling_is_deterministic_and_safe():
    sf = ScenarioFile.load(bundled_path("example2"))
    a = sample_initial_states(sf, 50, 3)
    assert np.array_equal(a, sample_initial_states(sf, 50, 3))
    assert not np.array_equal(a, sample_initial_states(sf, 50, 4))
    spec = sf.barrier_spec()
    assert np.all(spec.h(a[:, 0], a[:, 1]) > 0.05)
    assert np.all((a[:, 0] >= -6) & (a[:, 0] <= 1) & (np.abs(a[:, 3]) <= 5))


def test_sweep_section_required_for_sampling():
    sf = ScenarioFile.loads(MINIMAL + '[controller]\nkind = "nominal"\n')
    with pytest.raises(ConfigError, match="no \\[sweep\\]"):
        sample_initial_states(sf, 3, 0)
