import csv
import io
import json
import math

import pytest

from emitterdyn import cli
from emitterdyn import local_gates as gates


def write(tmp_path, text, name="scn.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def read_csv(text):
    lines = [l for l in text.splitlines() if not l.startswith("#")]
    return list(csv.DictReader(io.StringIO("\n".join(lines))))


GATE = """
kind: gate
model:
  type: exchange_gate
  params: {cooperativity: 1e5, detuning_ratio: 2.0}
"""


def test_single_point_gives_one_row(tmp_path, capsys):
    assert cli.main(["run", write(tmp_path, GATE)]) == 0
    out = capsys.readouterr().out
    assert out.startswith("# units:")
    rows = read_csv(out)
    assert len(rows) == 1
    ref = gates.simple_exchange_fidelity(gates.ExchangeGateSpec(0.05, 1.0, 2.0, 4 * 0.05 ** 2 / 1e5))
    assert float(rows[0]["fidelity"]) == pytest.approx(ref.fidelity, rel=1e-10)
    assert "coupling_re" in rows[0] and "coupling_im" in rows[0]


def test_unsigned_exponent_is_a_float(tmp_path):
    scn = cli.load_scenario(write(tmp_path, GATE))
    assert isinstance(scn["model"]["params"]["cooperativity"], float)


def test_gate_sweep_follows_analytic_path(tmp_path, capsys):
    text = GATE + """
sweep:
  - {parameter: params.detuning_ratio, values: [1, 5, 20]}
"""
    assert cli.main(["run", write(tmp_path, text)]) == 0
    rows = read_csv(capsys.readouterr().out)
    assert [float(r["detuning_ratio"]) for r in rows] == [1.0, 5.0, 20.0]
    for r in rows:
        x = float(r["detuning_ratio"])
        spec = cli.build_exchange_gate({"cooperativity": 1e5, "detuning_ratio": x})
        assert float(r["fidelity"]) == pytest.approx(gates.simple_exchange_fidelity(spec).fidelity,
                                                     rel=1e-10)


def test_two_dimensional_sweep_is_cartesian(tmp_path, capsys):
    text = GATE + """
sweep:
  - {parameter: params.dephasing_ratio, values: [0, 10]}
  - {parameter: params.detuning_ratio, start: 1, stop: 100, num: 3, scale: log}
"""
    assert cli.main(["run", write(tmp_path, text), "--format", "json"]) == 0
    payload = json.loads(capsys.readouterr().out)
    cols = payload["columns"]
    pairs = [(r[cols.index("dephasing_ratio")], r[cols.index("detuning_ratio")])
             for r in payload["rows"]]
    assert pairs == [(0.0, 1.0), (0.0, 10.0), (0.0, 100.0), (10.0, 1.0), (10.0, 10.0), (10.0, 100.0)]


def test_photon_statistics_scenario(tmp_path, capsys):
    text = """
kind: photonstats
model:
  type: two_level
  params: {gamma: 1.0}
  drive: {area: 3.141592653589793, duration: 0.1}
grid: {n_max: 3}
"""
    assert cli.main(["run", write(tmp_path, text)]) == 0
    row = read_csv(capsys.readouterr().out)[0]
    total = sum(float(row[k]) for k in ("p0", "p1", "p2", "p3plus"))
    assert total == pytest.approx(1.0, abs=1e-9)
    assert float(row["p1"]) > 0.9


def test_deterministic_output(tmp_path):
    text = GATE + """
sweep:
  - {parameter: params.detuning_ratio, start: 1, stop: 50, num: 7}
"""
    path = write(tmp_path, text)
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert cli.main(["run", path, "--out", str(a)]) == 0
    assert cli.main(["run", path, "--out", str(b), "--threads", "2"]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_parse_error_exit(tmp_path, capsys):
    assert cli.main(["run", write(tmp_path, "kind: [unclosed\n")]) == cli.EXIT_PARSE
    assert cli.main(["run", str(tmp_path / "missing.yaml")]) == cli.EXIT_PARSE
    assert cli.main(["preset", "no_such_preset"]) == cli.EXIT_PARSE
    capsys.readouterr()


@pytest.mark.parametrize("text", [
    "kind: nonsense\nmodel: {type: two_level}\n",
    "kind: gate\nmodel: {type: two_level}\n",
    "kind: gate\nmodel: {type: exchange_gate, params: {cooperativity: 1e4}}\n",
    GATE.replace("detuning_ratio: 2.0", "detuning_ratio: 2.0, bogus: 1"),
    GATE + "sweep:\n  - {parameter: params.nothing, values: [1]}\n",
    GATE + "sweep:\n  - {parameter: params.detuning_ratio, values: [1, .nan]}\n",
    GATE + "output: {format: xml}\n",
])
def test_schema_error_exit(tmp_path, capsys, text):
    assert cli.main(["run", write(tmp_path, text)]) == cli.EXIT_SCHEMA
    assert "schema error" in capsys.readouterr().err


def test_more_than_two_sweep_axes_rejected(tmp_path, capsys):
    text = GATE + """
sweep:
  - {parameter: params.detuning_ratio, values: [1]}
  - {parameter: params.dephasing_ratio, values: [0]}
  - {parameter: params.cooperativity, values: [1e4]}
"""
    assert cli.main(["validate", write(tmp_path, text)]) == cli.EXIT_SCHEMA
    assert "two" in capsys.readouterr().err


def test_numeric_failure_names_operation(tmp_path, capsys):
    text = """
kind: protocol
model:
  type: protocol
  params: {protocol: N, half_area: 3.0}
  defects: [{gamma_up: 1.0}]
"""
    assert cli.main(["run", write(tmp_path, text)]) == cli.EXIT_NUMERIC
    assert "protocol evaluation failed" in capsys.readouterr().err


def test_validate_and_list(tmp_path, capsys):
    assert cli.main(["validate", write(tmp_path, GATE)]) == 0
    assert capsys.readouterr().out.strip() == "ok"
    assert cli.main(["list-presets"]) == 0
    names = [l.split("\t")[0] for l in capsys.readouterr().out.splitlines()]
    assert names == cli.preset_names()
    assert {"fig_pns_3pi", "protocol_compare_distance"} <= set(names)


def test_gate_subcommand(capsys):
    assert cli.main(["gate", "simple", "--cooperativity", "1e4", "--ratios", "40", "50"]) == 0
    rows = read_csv(capsys.readouterr().out)
    assert len(rows) == 2
    assert float(rows[1]["max_fidelity"]) == pytest.approx(gates.single_mode_max_fidelity(1e4))
    assert cli.main(["gate", "fano", "--cooperativity", "500"]) == 0
    row = read_csv(capsys.readouterr().out)[0]
    assert row["fano_dip_phase"] == "1" and row["same_side_detuning"] == "1"


def test_pulse_preset_columns(capsys):
    assert cli.main(["preset", "fig_pns_3pi"]) == 0
    rows = read_csv(capsys.readouterr().out)
    assert list(rows[0]) == ["t_p", "area", "p0", "p1", "p2", "p3plus"]
    assert len(rows) == 31
    assert all(float(r["area"]) == pytest.approx(3 * math.pi) for r in rows)
