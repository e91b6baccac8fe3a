import json

import numpy as np
import pytest
import yaml

from simulcontrol.cli import main, named_gate, parse_potential
from simulcontrol.errors import ScenarioError
from simulcontrol.lyapunov import LyapunovConfig, init_alpha, stabilize
from simulcontrol.pipeline import (Scenario, _fractional_power, gate_realization, load_scenario, plan_global,
                                   prepare, ramp_control, state_from_spec)
from simulcontrol.propagator import time_reverse_check
from simulcontrol.spectral import frame_basis


def test_ramp_endpoints_and_monotone():
    r = ramp_control(3.0)
    assert r.samples[0] == 0.0 and r.samples[-1] == -1.0
    assert np.all(np.diff(r.samples) <= 0)
    assert r.T == pytest.approx(3.0)
    back = r.reversed()
    assert back.samples[0] == -1.0 and back.samples[-1] == 0.0
    with pytest.raises(ValueError):
        ramp_control(0.0)


def test_state_specs():
    c = state_from_spec({"eigenstates": [2, 1], "phases": [0.5, 0.0]}, 4)
    assert c[0, 1] == pytest.approx(np.exp(0.5j)) and c[1, 0] == 1
    m = state_from_spec({"mix": [[[1, 1.0], [3, "0+1j"]]]}, 4)
    assert np.allclose(m[0], np.array([1, 0, 1j, 0]) / np.sqrt(2))
    u = state_from_spec({"unitary": [[[0, 0], [1, 0]], [[1, 0], [0, 0]]]}, 4)
    assert np.allclose(u[:, :2], [[0, 1], [1, 0]])
    with pytest.raises(ScenarioError):
        state_from_spec({"unitary": [[1, 1], [0, 1]]}, 4)
    with pytest.raises(ScenarioError):
        state_from_spec({"eigenstates": [1], "mix": []}, 4)
    with pytest.raises(ScenarioError):
        state_from_spec({"eigenstates": [1]}, 4, N=2)


def test_scenario_yaml_round_trip(tmp_path):
    data = {"name": "demo", "N": 2, "K": 8, "V": {"kind": "polynomial", "coefficients": [0, 1]},
            "psi0": {"eigenstates": [1, 2]}, "psif": {"eigenstates": [2, 1]},
            "lyapunov": {"max_iters": 5, "target": 1e-3}, "budgets": {"T_ramp": 2.0}}
    p = tmp_path / "s.yaml"
    p.write_text(yaml.safe_dump(data))
    sc = load_scenario(p)
    assert sc.N == 2 and sc.K == 8 and sc.lyapunov_max_iters == 5 and sc.T_ramp == 2.0
    p.write_text("K: 8\nbudgets: {T_rotation_max: 1.0e5}\n")
    assert load_scenario(p).T_rotation_max == 1e5
    again = Scenario.from_dict(sc.to_dict())
    assert again.to_dict() == sc.to_dict()


def test_scenario_rejections(tmp_path):
    with pytest.raises(ScenarioError):
        Scenario.from_dict({"K": 8, "colour": "blue"})
    with pytest.raises(ScenarioError):
        Scenario.from_dict({"N": 3, "K": 2})
    with pytest.raises(ScenarioError):
        Scenario.from_dict({"K": "many"})
    with pytest.raises(ScenarioError):
        Scenario.from_dict({"K": 8.5})
    sc = Scenario.from_dict({"N": 1, "K": 8, "psi0": {"eigenstates": [1]},
                             "psif": {"coeffs": [[0.5]]}})
    with pytest.raises(ScenarioError):
        prepare(sc)
    p = tmp_path / "bad.yaml"
    p.write_text("- 1\n- 2\n")
    with pytest.raises(ScenarioError):
        load_scenario(p)


def test_identity_plan_shortcut():
    sc = Scenario(N=2, K=8, psi0_spec={"eigenstates": [1, 2]}, psif_spec={"eigenstates": [1, 2]})
    plan = plan_global(sc)
    assert plan.segments == [] and plan.achieved_error == 0.0
    g = gate_realization(np.eye(2), Scenario(K=8))
    assert min(g.info["fidelities"]) == 1.0


def test_fractional_power(rng):
    A = rng.normal(size=(5, 5)) + 1j * rng.normal(size=(5, 5))
    U = np.linalg.qr(A)[0]
    p = _fractional_power(U)
    assert np.allclose(p(1.0), U, atol=1e-12)
    assert np.allclose(p(0.0), np.eye(5), atol=1e-12)
    assert np.allclose(p(0.3) @ p(0.7), U, atol=1e-12)
    assert np.allclose(p(0.5).conj().T @ p(0.5), np.eye(5), atol=1e-12)


def test_backward_half_reverses_in_isolation(small_linear):
    b, B = small_linear
    fb, fB, _ = frame_basis(b, B, -1.0)
    y = np.zeros((1, b.K), dtype=complex)
    y[0, :2] = [0.8, 0.6j]
    cfg = LyapunovConfig(init_alpha(y, fb, 1), 1, b.K, max_iters=4)
    plan, z_b, _ = stabilize(y, cfg, fb, fB)
    u = plan.control()
    # forward under u: y -> z_b, so conj(z_b) -> conj(y) under the reversed control
    assert time_reverse_check(np.conj(z_b), np.conj(y), u, fb, fB) < 1e-7


def test_parse_helpers():
    assert parse_potential("polynomial:0,1")(np.array([0.5]))[0] == pytest.approx(0.5)
    assert parse_potential("zero:")(np.array([0.3]))[0] == 0.0
    assert np.allclose(named_gate("phase:0.5"), np.diag([np.exp(0.5j), 1]))
    assert named_gate("identity:3").shape == (3, 3)
    h = named_gate("hadamard")
    assert np.allclose(h @ h, np.eye(2))


def run(capsys, *argv):
    code = main(list(argv))
    return code, capsys.readouterr().out


def test_cli_eig(capsys, tmp_path):
    code, out = run(capsys, "eig", "--K", "4", "--csv", str(tmp_path / "e.csv"),
                    "--emit-plots", str(tmp_path / "p.csv"))
    assert code == 0
    lam = json.loads(out)["lambda"]
    assert np.allclose(lam, (np.arange(1, 5) * np.pi) ** 2, rtol=1e-6)
    head = (tmp_path / "p.csv").read_text().splitlines()[0]
    assert head == "series,index,x,y"


def test_cli_check_conditions(capsys):
    code, out = run(capsys, "check-conditions", "--V", "zero:", "--K", "8", "--N", "1")
    rep = json.loads(out)
    assert code == 1 and not rep["C2"]["holds_at_truncation"]
    code, _ = run(capsys, "check-conditions", "--V", "polynomial:0,1", "--K", "8", "--N", "1")
    assert code == 0


def test_cli_simulate_and_moment(capsys, tmp_path):
    code, out = run(capsys, "moment-solve", "--K", "6", "--T", "2", "--control", str(tmp_path / "u.csv"))
    assert code == 0 and json.loads(out)["max_residual"] < 1e-8
    code, out = run(capsys, "simulate", "--V", "polynomial:0,1", "--K", "8", "--N", "2", "--psi0",
                    '{"eigenstates": [1, 2]}', "--psif", '{"eigenstates": [1, 2]}',
                    "--control", str(tmp_path / "u.csv"), "--trajectory", str(tmp_path / "t.csv"))
    res = json.loads(out)
    assert code == 0 and res["norm_drift"] < 1e-9 and res["gram_drift"] < 1e-8


def test_cli_lyapunov_and_local(capsys, tmp_path):
    code, out = run(capsys, "lyapunov-steer", "--K", "8", "--psi0", '{"mix": [[[1, 1], [2, 1]]]}',
                    "--psif", '{"mix": [[[1, 1], [2, 1]]]}', "--max-iters", "3",
                    "--log", str(tmp_path / "l.csv"))
    res = json.loads(out)
    assert code == 0 and res["V_final"] < res["V_initial"]
    code, out = run(capsys, "local-steer", "--V", "polynomial:0,1", "--K", "8", "--N", "2", "--T", "2",
                    "--psi0", '{"eigenstates": [1, 2]}', "--psif", '{"eigenstates": [1, 2]}',
                    "--reference", str(tmp_path / "ref"))
    res = json.loads(out)
    assert code == 0 and res["final_error_H3"] < 1e-6
    code, out = run(capsys, "local-steer", "--V", "polynomial:0,1", "--K", "8", "--N", "2", "--T", "2",
                    "--psi0", '{"eigenstates": [1, 2]}', "--psif", '{"eigenstates": [1, 2]}',
                    "--reference", str(tmp_path / "ref"), "--load-reference")
    assert code == 0 and json.loads(out)["reference_residuals"] == res["reference_residuals"]


def test_cli_lyapunov_uses_scenario_section(capsys, tmp_path):
    path = tmp_path / "s.yaml"
    path.write_text(yaml.safe_dump({"K": 8, "psi0": {"mix": [[[1, 1.0], [2, 1.0]]]},
                                    "lyapunov": {"max_iters": 2, "target": 1e-12}}))
    code, out = run(capsys, "lyapunov-steer", "--scenario", str(path))
    assert code == 0 and json.loads(out)["iterations"] == 2
    code, out = run(capsys, "lyapunov-steer", "--scenario", str(path), "--max-iters", "1")
    assert json.loads(out)["iterations"] == 1


def test_cli_plan_exit_codes(capsys, tmp_path):
    sc = tmp_path / "s.yaml"
    sc.write_text(yaml.safe_dump({"N": 1, "K": 8, "psi0": {"eigenstates": [1]},
                                  "psif": {"eigenstates": [1], "phases": [1e-9]}}))
    code, out = run(capsys, "plan", "--scenario", str(sc))
    assert code == 0 and json.loads(out)["achieved_error"] < 1e-8
    code, _ = run(capsys, "gate", "--gate", "identity:2", "--K", "8")
    assert code == 0
    bad = tmp_path / "b.yaml"
    bad.write_text(yaml.safe_dump({"N": 1, "K": 8, "psi0": {"eigenstates": [1]}, "psif": {"coeffs": [[2.0]]}}))
    code, _ = run(capsys, "plan", "--scenario", str(bad))
    assert code == 2
