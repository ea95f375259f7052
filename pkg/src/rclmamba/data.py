"""Dataset ingestion, windowing, synthetic corpora, parameter containers,
and run-configuration parsing.

Splits are chronological 60/20/20 with the z-score scaler fitted on the
train portion only. The parameter container is a little-endian binary
format built for bit-exact round trips.
"""

from __future__ import annotations

import csv
import json
import math
import struct
import typing
from dataclasses import dataclass, field, fields as dc_fields
from pathlib import Path
from typing import Optional, Union

import numpy as np


class DataError(Exception):
    """Bad input data: unreadable file, malformed cell, degenerate channel."""


class ConfigError(Exception):
    """Config schema violation; carries the offending key."""

    def __init__(self, key: str, message: str):
        super().__init__(f"config key {key!r}: {message}")
        self.key = key


@dataclass
class DatasetSplit:
    train: np.ndarray  # [N_train, F], normalized
    val: np.ndarray    # [N_val, F]
    test: np.ndarray   # [N_test, F]
    mean: np.ndarray   # [F], train statistics
    std: np.ndarray    # [F]

    @property
    def n_features(self) -> int:
        return self.train.shape[1]


@dataclass
class WindowSet:
    inputs: np.ndarray   # [M, t_in, F]
    targets: np.ndarray  # [M, t_out, F]

    def __len__(self) -> int:
        return self.inputs.shape[0]


def split_series(data: np.ndarray) -> DatasetSplit:
    """Chronological 60/20/20 split; train gets the floor, the remainder is
    split evenly with the odd row going to test. Scaler from train only."""
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise DataError(f"expected a [N, F] series, got shape {data.shape}")
    n = data.shape[0]
    if n < 10:
        raise DataError(f"need at least 10 rows, got {n}")
    n_train = int(math.floor(0.6 * n))
    rem = n - n_train
    n_val = rem // 2
    train = data[:n_train]
    val = data[n_train:n_train + n_val]
    test = data[n_train + n_val:]
    mean = train.mean(axis=0)
    std = train.std(axis=0)
    flat = np.where(std == 0)[0]
    if flat.size:
        raise DataError(f"constant channel(s) in train split: columns {flat.tolist()}")
    return DatasetSplit(
        train=(train - mean) / std,
        val=(val - mean) / std,
        test=(test - mean) / std,
        mean=mean,
        std=std,
    )


def load_csv(path: Union[str, Path]) -> DatasetSplit:
    """Load a headered CSV whose first column is a timestamp (dropped) and
    whose remaining columns are numeric channels."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    rows: list[list[float]] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if len(header) < 2:
            raise DataError(f"{path}: need a timestamp column plus at least one channel")
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: row {line_no} has {len(row)} cells, header has {len(header)}")
            vals = []
            for col_idx, cell in enumerate(row[1:], start=2):
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise DataError(
                        f"{path}: non-numeric value {cell!r} at row {line_no}, column {col_idx}"
                    ) from None
            rows.append(vals)
    return split_series(np.asarray(rows, dtype=np.float64))


def make_windows(part: np.ndarray, t_in: int, t_out: int) -> WindowSet:
    """All stride-1 windows; window m's target starts exactly at its input's
    end (rows [m+t_in, m+t_in+t_out))."""
    part = np.asarray(part, dtype=np.float64)
    n = part.shape[0]
    m = n - t_in - t_out + 1
    if m < 1:
        raise DataError(f"split too short: {n} rows < t_in+t_out = {t_in + t_out}")
    win = np.lib.stride_tricks.sliding_window_view(part, t_in + t_out, axis=0)
    win = np.ascontiguousarray(win.transpose(0, 2, 1))  # [M, t_in+t_out, F]
    return WindowSet(inputs=win[:, :t_in].copy(), targets=win[:, t_in:].copy())


SYNTH_KINDS = ("multi-sine", "ar1-with-spikes")

# non-harmonic sample periods shared by the multi-sine generator and its tests
_SINE_PERIODS = (24.0, 37.0, 61.0)
_AR1_PHI = 0.9
_SPIKE_PROB = 0.02
_SPIKE_SCALE = 5.0


def synth_corpus(
    kind: str,
    n_series: int,
    t_len: int,
    n_features: int,
    noise_std: float,
    seed: int,
) -> np.ndarray:
    """Deterministic synthetic series, shape [n_series, T, F].

    multi-sine: per channel, three sinusoids with non-harmonic periods plus
    Gaussian noise. ar1-with-spikes: AR(1) with phi=0.9 whose innovations
    occasionally (p=0.02) carry an extra 5x-stationary-sigma shock, so the
    series shows sharp spikes while keeping its lag-1 autocorrelation.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    if kind == "multi-sine":
        amps = rng.uniform(0.5, 1.5, size=(n_series, n_features, 3))
        phases = rng.uniform(0.0, 2.0 * np.pi, size=(n_series, n_features, 3))
        t = np.arange(t_len, dtype=np.float64)
        periods = np.asarray(_SINE_PERIODS)
        # [S, F, 3, T] -> sum over components -> [S, T, F]
        angles = 2.0 * np.pi * t[None, None, None, :] / periods[None, None, :, None]
        waves = amps[..., None] * np.sin(angles + phases[..., None])
        x = waves.sum(axis=2).transpose(0, 2, 1)
        if noise_std > 0:
            x = x + noise_std * rng.standard_normal((n_series, t_len, n_features))
        return x
    if kind == "ar1-with-spikes":
        sigma_stat = noise_std / math.sqrt(1.0 - _AR1_PHI ** 2)
        prev = sigma_stat * rng.standard_normal((n_series, n_features))
        eps = noise_std * rng.standard_normal((n_series, t_len, n_features))
        spikes = rng.random((n_series, t_len, n_features)) < _SPIKE_PROB
        signs = np.where(rng.random((n_series, t_len, n_features)) < 0.5, -1.0, 1.0)
        shocks = eps + spikes * signs * (_SPIKE_SCALE * sigma_stat)
        x = np.empty((n_series, t_len, n_features), dtype=np.float64)
        for t in range(t_len):
            prev = _AR1_PHI * prev + shocks[:, t]
            x[:, t] = prev
        return x
    raise DataError(f"unknown synth kind {kind!r}; choices: {', '.join(SYNTH_KINDS)}")


# ---------------------------------------------------------------------------
# parameter container: magic "RCLP", little-endian f64 payload

_MAGIC = b"RCLP"
_VERSION = 1
_DTYPE_F64 = 0


def save_params(entries: dict[str, np.ndarray], path: Union[str, Path]) -> None:
    """Write named float64 arrays to the binary container format."""
    names = sorted(entries)
    table = bytearray()
    payload = bytearray()
    for name in names:
        arr = np.asarray(entries[name], dtype=np.float64)
        if arr.ndim:  # ascontiguousarray would promote rank 0 to rank 1
            arr = np.ascontiguousarray(arr)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"entry name too long: {name[:32]}...")
        offset = len(payload)
        table += struct.pack("<H", len(raw)) + raw
        table += struct.pack("<BB", _DTYPE_F64, arr.ndim)
        table += struct.pack(f"<{arr.ndim}I", *arr.shape)
        table += struct.pack("<Q", offset)
        payload += arr.astype("<f8").tobytes()
    head = _MAGIC + struct.pack("<II", _VERSION, len(names))
    with open(path, "wb") as fh:
        fh.write(head)
        fh.write(bytes(table))
        fh.write(bytes(payload))


def load_params(path: Union[str, Path]) -> dict[str, np.ndarray]:
    """Read a container back; bit-exact inverse of save_params."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    blob = path.read_bytes()
    if len(blob) < 12:
        raise DataError(f"{path}: truncated header")
    if blob[:4] != _MAGIC:
        raise DataError(f"{path}: bad magic {blob[:4]!r}")
    version, n_entries = struct.unpack_from("<II", blob, 4)
    if version != _VERSION:
        raise DataError(f"{path}: version mismatch: file {version}, supported {_VERSION}")
    pos = 12
    specs = []
    for _ in range(n_entries):
        try:
            (name_len,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + name_len].decode("utf-8")
            pos += name_len
            dtype_tag, rank = struct.unpack_from("<BB", blob, pos)
            pos += 2
            shape = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            (offset,) = struct.unpack_from("<Q", blob, pos)
            pos += 8
        except struct.error:
            raise DataError(f"{path}: truncated entry table") from None
        if dtype_tag != _DTYPE_F64:
            raise DataError(f"{path}: unknown dtype tag {dtype_tag} for entry {name!r}")
        specs.append((name, shape, offset))
    payload = blob[pos:]
    out: dict[str, np.ndarray] = {}
    for name, shape, offset in specs:
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(payload):
            raise DataError(f"{path}: truncated payload for entry {name!r}")
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=offset)
        out[name] = arr.reshape(shape).astype(np.float64, copy=True)
    return out


# ---------------------------------------------------------------------------
# run configuration

FREEZE_MODES = ("none", "frozen-a")
REPLACE_FRACTIONS = (0.0, 0.25, 0.5, 0.75, 1.0)
HORIZONS = (96, 192, 336, 720)


@dataclass
class MambaSettings:
    d_model: int = 16
    d_state: int = 16
    d_conv: int = 4
    expand: int = 2


@dataclass
class PretrainSettings:
    n_t: int = 3
    sigmas: tuple[float, ...] = (0.0, 1e-3, 1e-2)
    tau: float = 0.1
    epochs: int = 100
    lr: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 16
    window: int = 32
    max_batches_per_epoch: Optional[int] = None


@dataclass
class BackboneSettings:
    n_layer: int = 4
    t_in: int = 96
    t_out: int = 96


@dataclass
class TrainSettings:
    lr: float = 1e-4
    epochs: int = 100
    batch_size: int = 32
    max_train_batches: Optional[int] = None
    max_eval_windows: Optional[int] = None


@dataclass
class TransferSettings:
    replace: float = 0.0
    freeze: str = "none"
    only_selective: bool = False


@dataclass
class SynthSettings:
    t: int = 8000
    f: int = 4
    noise_std: float = 1.0


@dataclass
class ProbeSettings:
    max_windows: int = 16


@dataclass
class RunConfig:
    seed: int = 0
    data: Optional[str] = None
    mamba: MambaSettings = field(default_factory=MambaSettings)
    pretrain: PretrainSettings = field(default_factory=PretrainSettings)
    forecaster: BackboneSettings = field(default_factory=BackboneSettings)
    training: TrainSettings = field(default_factory=TrainSettings)
    transfer: TransferSettings = field(default_factory=TransferSettings)
    synth: SynthSettings = field(default_factory=SynthSettings)
    probe: ProbeSettings = field(default_factory=ProbeSettings)


_SECTIONS = {
    "mamba": MambaSettings,
    "pretrain": PretrainSettings,
    "forecaster": BackboneSettings,
    "training": TrainSettings,
    "transfer": TransferSettings,
    "synth": SynthSettings,
    "probe": ProbeSettings,
}


def _coerce(key: str, value, target_type):
    origin = getattr(target_type, "__origin__", None)
    if origin is Union:  # Optional[...]
        if value is None:
            return None
        inner = [a for a in target_type.__args__ if a is not type(None)]
        return _coerce(key, value, inner[0])
    if target_type is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if target_type is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return int(value)
    if target_type is bool:
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected a boolean, got {value!r}")
        return value
    if target_type is str:
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
        return value
    if origin is tuple:  # tuple[float, ...]
        if not isinstance(value, (list, tuple)):
            raise ConfigError(key, f"expected a list, got {value!r}")
        return tuple(float(v) for v in value)
    raise ConfigError(key, f"unsupported value {value!r}")


def _parse_section(name: str, d: dict, cls):
    if not isinstance(d, dict):
        raise ConfigError(name, f"expected an object, got {d!r}")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dc_fields(cls)}
    out = cls()
    for key, value in d.items():
        if key not in known:
            raise ConfigError(f"{name}.{key}", "unknown config key")
        setattr(out, key, _coerce(f"{name}.{key}", value, hints[key]))
    return out


def parse_config(d: dict) -> RunConfig:
    if not isinstance(d, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    cfg = RunConfig()
    for key, value in d.items():
        if key == "seed":
            cfg.seed = _coerce("seed", value, int)
        elif key == "data":
            cfg.data = None if value is None else _coerce("data", value, str)
        elif key in _SECTIONS:
            setattr(cfg, key if key != "forecaster" else "forecaster",
                    _parse_section(key, value, _SECTIONS[key]))
        else:
            raise ConfigError(key, "unknown config key")
    if cfg.transfer.freeze not in FREEZE_MODES:
        raise ConfigError("transfer.freeze", f"must be one of {FREEZE_MODES}")
    if cfg.transfer.replace not in REPLACE_FRACTIONS:
        raise ConfigError("transfer.replace", f"must be one of {REPLACE_FRACTIONS}")
    return cfg


def load_config(path: Union[str, Path]) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError("<file>", f"no such config file: {path}")
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as e:
        raise ConfigError("<file>", f"invalid JSON in {path}: {e}") from None
    return parse_config(raw)


def config_to_dict(cfg: RunConfig) -> dict:
    """Plain-dict snapshot for manifests."""
    out = {"seed": cfg.seed, "data": cfg.data}
    for name, cls in _SECTIONS.items():
        section = getattr(cfg, name)
        out[name] = {f.name: getattr(section, f.name) for f in dc_fields(cls)}
        for k, v in out[name].items():
            if isinstance(v, tuple):
                out[name][k] = list(v)
    return out


def resolve_dataset(spec: str, synth: SynthSettings, seed: int) -> DatasetSplit:
    """`spec` is either a CSV path or synth:<kind>."""
    if spec.startswith("synth:"):
        kind = spec[len("synth:"):]
        series = synth_corpus(kind, 1, synth.t, synth.f, synth.noise_std, seed)
        return split_series(series[0])
    return load_csv(spec)
