"""Splitting, CSV ingestion, windowing, synthetic corpora, the parameter
container, and run configuration parsing."""

import json
import math
import struct

import numpy as np
import pytest

from rclmamba.data import (
    ConfigError,
    DataError,
    HORIZONS,
    REPLACE_FRACTIONS,
    SYNTH_KINDS,
    config_to_dict,
    load_config,
    load_csv,
    load_params,
    make_windows,
    parse_config,
    resolve_dataset,
    save_params,
    split_series,
    synth_corpus,
)


def _rng(seed=0):
    return np.random.Generator(np.random.PCG64(seed))


# -- chronological split ---------------------------------------------------------


@pytest.mark.parametrize(
    "n,sizes",
    [
        (100, (60, 20, 20)),
        (101, (60, 20, 21)),
        (103, (61, 21, 21)),
        (10, (6, 2, 2)),
        (11, (6, 2, 3)),
    ],
)
def test_split_sizes(n, sizes):
    data = _rng(1).normal(size=(n, 3))
    sp = split_series(data)
    assert (len(sp.train), len(sp.val), len(sp.test)) == sizes
    assert len(sp.train) + len(sp.val) + len(sp.test) == n


def test_split_is_chronological_and_train_scaled():
    data = _rng(2).normal(size=(50, 2)) * 3.0 + 1.5
    sp = split_series(data)
    mean = data[:30].mean(axis=0)
    std = data[:30].std(axis=0)  # population std over the train rows only
    assert np.allclose(sp.mean, mean)
    assert np.allclose(sp.std, std)
    assert np.allclose(sp.train, (data[:30] - mean) / std)
    assert np.allclose(sp.val, (data[30:40] - mean) / std)
    assert np.allclose(sp.test, (data[40:] - mean) / std)
    # scaler comes from train, so train is exactly standardized but val is not
    assert np.allclose(sp.train.mean(axis=0), 0.0, atol=1e-12)
    assert np.allclose(sp.train.std(axis=0), 1.0, atol=1e-12)


def test_split_rejects_short_and_constant():
    with pytest.raises(DataError, match="at least 10 rows"):
        split_series(np.ones((9, 2)) * np.arange(2))
    data = _rng(3).normal(size=(40, 3))
    data[:24, 1] = 7.0  # constant inside the train span only
    with pytest.raises(DataError, match=r"columns \[1\]"):
        split_series(data)
    with pytest.raises(DataError, match=r"\[N, F\]"):
        split_series(np.zeros(30))


# -- CSV -------------------------------------------------------------------------


def _write_csv(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_load_csv_drops_timestamp(tmp_path):
    lines = ["date,a,b"]
    r = _rng(4)
    vals = r.normal(size=(20, 2))
    for i, (x, y) in enumerate(vals):
        lines.append(f"2020-01-{i + 1:02d},{float(x)!r},{float(y)!r}")
    p = _write_csv(tmp_path, "\n".join(lines) + "\n")
    sp = load_csv(p)
    assert sp.n_features == 2
    direct = split_series(vals)
    assert np.allclose(sp.train, direct.train)
    assert np.allclose(sp.test, direct.test)


def test_load_csv_error_coordinates(tmp_path):
    p = _write_csv(tmp_path, "date,a,b\n2020,1.0,2.0\n2020,oops,3.0\n")
    with pytest.raises(DataError, match=r"non-numeric value 'oops' at row 3, column 2"):
        load_csv(p)
    p2 = _write_csv(tmp_path, "date,a,b\n2020,1.0\n", name="w.csv")
    with pytest.raises(DataError, match="row 2 has 2 cells, header has 3"):
        load_csv(p2)
    p3 = _write_csv(tmp_path, "", name="e.csv")
    with pytest.raises(DataError, match="empty file"):
        load_csv(p3)
    p4 = _write_csv(tmp_path, "date\n2020\n", name="n.csv")
    with pytest.raises(DataError, match="timestamp column plus at least one"):
        load_csv(p4)
    with pytest.raises(DataError, match="no such file"):
        load_csv(tmp_path / "missing.csv")


# -- windows ----------------------------------------------------------------------


def test_make_windows_alignment():
    part = np.arange(10.0)[:, None] * np.array([1.0, 10.0])
    ws = make_windows(part, t_in=3, t_out=2)
    assert len(ws) == 6
    assert ws.inputs.shape == (6, 3, 2)
    assert ws.targets.shape == (6, 2, 2)
    for m in range(6):
        assert np.array_equal(ws.inputs[m], part[m : m + 3])
        assert np.array_equal(ws.targets[m], part[m + 3 : m + 5])


def test_make_windows_too_short():
    with pytest.raises(DataError, match="split too short: 4 rows < t_in\\+t_out = 5"):
        make_windows(np.zeros((4, 1)), t_in=3, t_out=2)
    ws = make_windows(np.zeros((5, 1)), t_in=3, t_out=2)
    assert len(ws) == 1


def test_make_windows_returns_copies():
    part = np.zeros((8, 1))
    ws = make_windows(part, 3, 2)
    ws.inputs[0, 0, 0] = 9.0
    assert part[0, 0] == 0.0


# -- synthetic corpora --------------------------------------------------------------


def test_synth_shapes_and_determinism():
    for kind in SYNTH_KINDS:
        a = synth_corpus(kind, 2, 300, 3, 0.5, seed=11)
        b = synth_corpus(kind, 2, 300, 3, 0.5, seed=11)
        c = synth_corpus(kind, 2, 300, 3, 0.5, seed=12)
        assert a.shape == (2, 300, 3)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)
    with pytest.raises(DataError, match="unknown synth kind"):
        synth_corpus("square-wave", 1, 100, 1, 0.1, seed=0)


def test_multi_sine_is_periodic_mixture():
    x = synth_corpus("multi-sine", 1, 4000, 2, 0.0, seed=5)[0]
    # noiseless channel amplitudes stay within the sum of component amps
    assert np.max(np.abs(x)) <= 4.5
    # energy concentrates at the three component periods
    spec = np.abs(np.fft.rfft(x[:, 0]))
    freqs = np.fft.rfftfreq(x.shape[0])
    top = np.argsort(spec)[-3:]
    got = sorted(1.0 / freqs[top])
    for period, found in zip(sorted((24.0, 37.0, 61.0)), got):
        assert abs(found - period) / period < 0.05


def test_ar1_statistics():
    x = synth_corpus("ar1-with-spikes", 1, 60_000, 1, 1.0, seed=6)[0, :, 0]
    lag1 = np.corrcoef(x[:-1], x[1:])[0, 1]
    assert abs(lag1 - 0.9) < 0.02
    sigma_stat = 1.0 / math.sqrt(1.0 - 0.81)
    spikes = np.abs(x - 0.9 * np.concatenate([[0.0], x[:-1]])) > 4.0 * sigma_stat
    rate = spikes.mean()
    assert 0.012 < rate < 0.028


# -- parameter container -------------------------------------------------------------


def test_container_round_trip_is_bit_exact(tmp_path):
    r = _rng(7)
    entries = {
        "w": r.normal(size=(4, 5)),
        "b": np.array([-0.0, 0.0, 1e-300, np.pi]),
        "scalar": np.float64(2.5),
        "deep": r.normal(size=(2, 3, 4)),
    }
    p = tmp_path / "x.rclp"
    save_params(entries, p)
    back = load_params(p)
    assert sorted(back) == sorted(entries)
    for name in entries:
        want = np.asarray(entries[name], dtype=np.float64)
        assert back[name].shape == want.shape
        assert np.array_equal(
            back[name].view(np.uint64), want.view(np.uint64)
        ), name  # bitwise, so -0.0 and subnormals survive
    assert p.read_bytes()[:4] == b"RCLP"


def test_container_name_order_is_canonical(tmp_path):
    a, b = tmp_path / "a.rclp", tmp_path / "b.rclp"
    x, y = np.ones(2), np.zeros(3)
    save_params({"m": x, "a": y}, a)
    save_params({"a": y, "m": x}, b)
    assert a.read_bytes() == b.read_bytes()


def test_container_error_paths(tmp_path):
    p = tmp_path / "junk.rclp"

    with pytest.raises(DataError, match="no such file"):
        load_params(p)

    p.write_bytes(b"RC")
    with pytest.raises(DataError, match="truncated header"):
        load_params(p)

    p.write_bytes(b"XXXX" + struct.pack("<II", 1, 0))
    with pytest.raises(DataError, match="bad magic"):
        load_params(p)

    p.write_bytes(b"RCLP" + struct.pack("<II", 9, 0))
    with pytest.raises(DataError, match="version mismatch: file 9"):
        load_params(p)

    p.write_bytes(b"RCLP" + struct.pack("<II", 1, 1) + struct.pack("<H", 3) + b"ab")
    with pytest.raises(DataError, match="truncated entry table"):
        load_params(p)

    # valid table but a payload that stops short
    good = tmp_path / "good.rclp"
    save_params({"w": np.ones(4)}, good)
    blob = good.read_bytes()
    p.write_bytes(blob[:-8])
    with pytest.raises(DataError, match="truncated payload for entry 'w'"):
        load_params(p)

    # unknown dtype tag inside an otherwise valid entry
    mutated = bytearray(blob)
    name_len = struct.unpack_from("<H", mutated, 12)[0]
    mutated[12 + 2 + name_len] = 7  # dtype tag byte
    p.write_bytes(bytes(mutated))
    with pytest.raises(DataError, match="unknown dtype tag 7 for entry 'w'"):
        load_params(p)


# -- configuration ---------------------------------------------------------------------


def test_parse_config_defaults_and_overrides():
    cfg = parse_config({})
    assert cfg.seed == 0
    assert cfg.mamba.d_model == 16
    assert cfg.pretrain.sigmas == (0.0, 1e-3, 1e-2)
    assert cfg.transfer.replace == 0.0

    cfg = parse_config(
        {
            "seed": 3,
            "data": "synth:multi-sine",
            "mamba": {"d_model": 8},
            "pretrain": {"sigmas": [0.0, 0.5], "n_t": 2},
            "training": {"max_train_batches": 5, "max_eval_windows": None},
            "transfer": {"replace": 0.5, "freeze": "frozen-a", "only_selective": True},
        }
    )
    assert cfg.seed == 3
    assert cfg.mamba.d_model == 8
    assert cfg.mamba.d_state == 16  # untouched sibling keeps its default
    assert cfg.pretrain.sigmas == (0.0, 0.5)
    assert cfg.training.max_train_batches == 5
    assert cfg.training.max_eval_windows is None
    assert cfg.transfer.only_selective is True


def test_parse_config_rejects_unknown_and_mistyped_keys():
    with pytest.raises(ConfigError) as ei:
        parse_config({"mamba": {"dmodel": 8}})
    assert ei.value.key == "mamba.dmodel"

    with pytest.raises(ConfigError) as ei:
        parse_config({"cheese": 1})
    assert ei.value.key == "cheese"

    with pytest.raises(ConfigError) as ei:
        parse_config({"mamba": {"d_model": "eight"}})
    assert ei.value.key == "mamba.d_model"
    assert "expected an integer" in str(ei.value)

    with pytest.raises(ConfigError) as ei:
        parse_config({"mamba": {"d_model": True}})  # bools are not ints here
    assert ei.value.key == "mamba.d_model"

    with pytest.raises(ConfigError) as ei:
        parse_config({"transfer": {"replace": 0.3}})
    assert ei.value.key == "transfer.replace"

    with pytest.raises(ConfigError) as ei:
        parse_config({"transfer": {"freeze": "all"}})
    assert ei.value.key == "transfer.freeze"

    with pytest.raises(ConfigError, match="JSON object"):
        parse_config([1, 2])


def test_load_config_file_errors(tmp_path):
    missing = tmp_path / "nope.json"
    with pytest.raises(ConfigError, match="no such config file"):
        load_config(missing)
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(bad)
    good = tmp_path / "good.json"
    good.write_text(json.dumps({"seed": 9, "synth": {"t": 500}}))
    cfg = load_config(good)
    assert cfg.seed == 9
    assert cfg.synth.t == 500


def test_config_round_trips_through_dict():
    cfg = parse_config({"seed": 4, "pretrain": {"sigmas": [0.0, 0.1, 0.2]}})
    d = config_to_dict(cfg)
    assert d["seed"] == 4
    assert d["pretrain"]["sigmas"] == [0.0, 0.1, 0.2]  # JSON-friendly list
    again = parse_config(json.loads(json.dumps(d)))
    assert config_to_dict(again) == d


def test_resolve_dataset_synth_and_csv(tmp_path):
    cfg = parse_config({"synth": {"t": 400, "f": 2, "noise_std": 0.3}})
    sp = resolve_dataset("synth:multi-sine", cfg.synth, seed=3)
    assert sp.n_features == 2
    assert len(sp.train) == 240

    lines = ["date,a,b"] + [f"t{i},{i},{2 * i + (i % 3)}" for i in range(30)]
    p = tmp_path / "d.csv"
    p.write_text("\n".join(lines) + "\n")
    sp2 = resolve_dataset(str(p), cfg.synth, seed=3)
    assert sp2.n_features == 2


def test_exported_grids():
    assert HORIZONS == (96, 192, 336, 720)
    assert REPLACE_FRACTIONS == (0.0, 0.25, 0.5, 0.75, 1.0)
