import json

import numpy as np
import pytest

from twin import io
from twin.activation import RootNodeSet
from twin.config import ConfigError, config_from_dict, default_config_dict, parse_config
from twin.geometry import default_electrodes, generate_slab


def _write(tmp_path, data, name="run.json"):
    p = tmp_path / name
    p.write_text(json.dumps(data))
    return p


# -- configuration --------------------------------------------------------------

def test_empty_inference_block_takes_defaults(tmp_path):
    cfg = parse_config(_write(tmp_path, {"seed": 3, "inference": {}}))
    inf = cfg.inference_config()
    assert inf.discrepancy_cutoff == 0.5
    assert inf.uniqueness_threshold == 0.5
    assert inf.samples_per_iteration == 64
    assert inf.population_size == 256
    assert inf.seed == 3


def test_emit_defaults_round_trip(tmp_path):
    data = default_config_dict(seed=9)
    cfg = parse_config(_write(tmp_path, data))
    assert cfg.to_dict() == data
    again = parse_config(_write(tmp_path, cfg.to_dict(), "again.json"))
    assert again == cfg


def test_missing_seed():
    with pytest.raises(ConfigError, match="seed"):
        config_from_dict({"inference": {}})


@pytest.mark.parametrize("data, word", [
    ({"seed": 0, "colour": 1}, "colour"),
    ({"seed": 0, "inference": {"cutof": 0.4}}, "cutof"),
    ({"seed": 0, "bounds": {"g_xx": [0, 1]}}, "g_xx"),
])
def test_unknown_keys_named(data, word):
    with pytest.raises(ConfigError, match=word):
        config_from_dict(data)


def test_bad_path_named(tmp_path):
    p = _write(tmp_path, {"seed": 0, "mesh": {"path": "nowhere/mesh.json"}})
    with pytest.raises(ConfigError, match="nowhere/mesh.json"):
        parse_config(p)


def test_relative_paths_resolve_against_config_dir(tmp_path):
    (tmp_path / "sub").mkdir()
    (tmp_path / "sub" / "t.csv").write_text("x")
    p = _write(tmp_path / "sub", {"seed": 0, "target": {"path": "t.csv"}})
    cfg = parse_config(p)
    assert cfg.target.path == str(tmp_path / "sub" / "t.csv")
    assert cfg.output_dir == "run"


@pytest.mark.parametrize("data", [
    {"seed": -1},
    {"seed": True},
    {"seed": 0, "inference": {"population_size": 2.5}},
    {"seed": 0, "inference": {"samples_per_iteration": 300}},
    {"seed": 0, "simulation": {"smoothing": 1}},
    {"seed": 0, "mesh": {"kind": "sphere"}},
    {"seed": 0, "table": {"apd_range": [300, 180]}},
    {"seed": 0, "activation": {"cv": [0.065, 0.044]}},
    {"seed": 0, "bounds": {"apd_min": [230, 180]}},
    {"seed": 0, "drug": {"fraction": 0}},
    {"seed": 0, "inference": []},
])
def test_invalid_values_rejected(data):
    with pytest.raises(ConfigError):
        config_from_dict(data)


def test_unreadable_and_malformed(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        parse_config(tmp_path / "absent.json")
    (tmp_path / "bad.json").write_text("{seed: 0")
    with pytest.raises(ConfigError, match="invalid JSON"):
        parse_config(tmp_path / "bad.json")


def test_bounds_override_reaches_inference():
    cfg = config_from_dict({"seed": 0, "bounds": {"apd_max": [260, 290]}})
    assert cfg.inference_config().bounds[5] == (260.0, 290.0)
    assert cfg.bounds_tuple()[0] == (-1.0, 1.0)


# -- file formats ---------------------------------------------------------------------

@pytest.fixture(scope="module")
def small():
    return generate_slab(3, 3, 3, 0.1, 40.0)


def test_mesh_round_trip(tmp_path, small):
    mesh, fibres, coords = small
    io.save_mesh(tmp_path / "m.json", mesh, fibres, coords)
    m2, f2, c2 = io.load_mesh(tmp_path / "m.json")
    np.testing.assert_array_equal(m2.nodes, mesh.nodes)
    np.testing.assert_array_equal(m2.tets, mesh.tets)
    np.testing.assert_array_equal(f2.f, fibres.f)
    np.testing.assert_array_equal(c2.as_array(), coords.as_array())


def test_mesh_format_errors(tmp_path, small):
    mesh, fibres, coords = small
    io.save_mesh(tmp_path / "m.json", mesh, fibres, coords)
    data = json.loads((tmp_path / "m.json").read_text())
    del data["coords"]
    _write(tmp_path, data, "nocoords.json")
    with pytest.raises(io.FormatError, match="coords"):
        io.load_mesh(tmp_path / "nocoords.json")
    data = json.loads((tmp_path / "m.json").read_text())
    data["fibres"][0] = [2.0, 0.0, 0.0]
    _write(tmp_path, data, "skew.json")
    with pytest.raises(io.FormatError, match="orthonormal"):
        io.load_mesh(tmp_path / "skew.json")
    (tmp_path / "list.json").write_text("[1, 2]")
    with pytest.raises(io.FormatError):
        io.load_mesh(tmp_path / "list.json")


def test_field_round_trip_is_float32(tmp_path, rng):
    vals = rng.normal(size=(7, 11)) * 40
    io.save_field(tmp_path / "f.bin", vals)
    back = io.load_field(tmp_path / "f.bin")
    np.testing.assert_array_equal(back, vals.astype(np.float32))
    raw = (tmp_path / "f.bin").read_bytes()
    (tmp_path / "cut.bin").write_bytes(raw[:-4])
    with pytest.raises(io.FormatError, match="76"):
        io.load_field(tmp_path / "cut.bin")
    (tmp_path / "head.bin").write_bytes(raw[:3])
    with pytest.raises(io.FormatError, match="header"):
        io.load_field(tmp_path / "head.bin")


def test_roots_round_trip(tmp_path):
    roots = RootNodeSet((3, 5), (0.0, 2.5))
    io.save_roots(tmp_path / "r.json", roots)
    assert io.load_roots(tmp_path / "r.json", 10) == roots
    with pytest.raises(io.FormatError, match="out of range"):
        io.load_roots(tmp_path / "r.json", 4)


def test_electrodes_round_trip(tmp_path, small):
    el = default_electrodes(small[0])
    io.save_electrodes(tmp_path / "e.json", el)
    np.testing.assert_array_equal(io.load_electrodes(tmp_path / "e.json").positions, el.positions)
    data = json.loads((tmp_path / "e.json").read_text())
    data.pop("V6")
    _write(tmp_path, data, "short.json")
    with pytest.raises(io.FormatError, match="V6"):
        io.load_electrodes(tmp_path / "short.json")


def test_atmap_round_trip_and_checks(tmp_path):
    t = np.array([0.0, 1.25, 30.5])
    io.save_atmap(tmp_path / "a.csv", t)
    np.testing.assert_array_equal(io.load_atmap(tmp_path / "a.csv", 3), t)
    with pytest.raises(io.FormatError, match="3 rows"):
        io.load_atmap(tmp_path / "a.csv", 4)
    io.save_atmap(tmp_path / "neg.csv", [0.0, -1.0])
    with pytest.raises(io.FormatError):
        io.load_atmap(tmp_path / "neg.csv")
    (tmp_path / "h.csv").write_text("node,t\n0,1\n")
    with pytest.raises(io.FormatError, match="header"):
        io.load_atmap(tmp_path / "h.csv")
