"""End-to-end runs: pretrain, train, probe, eval, verify.

Every run writes a manifest.json recording the command, the full config
snapshot, the seed, ISO timestamps, per-phase wall time, peak RSS, the
output paths, and a metric summary. Metric CSVs contain no timestamps,
so two runs with the same config and seed produce byte-identical metric
files.

Floats in CSVs are written with repr() and parse back exactly.
"""

from __future__ import annotations

import json
import resource
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import verify as verify_mod
from .block import MambaConfig, MambaParams, block_forward, init_params
from .data import (
    DataError,
    DatasetSplit,
    RunConfig,
    config_to_dict,
    load_params,
    resolve_dataset,
    save_params,
)
from .forecaster import (
    ForecasterConfig,
    TransferPlan,
    build_forecaster,
    evaluate,
    param_names,
    train_forecaster,
    transfer_params,
)
from .pretrain import NoiseLadder, PretrainConfig, pretrain
from .selectivity import SelectivityReport, emit_traces, memory_scores


class PhaseTimer:
    """Collects wall-clock seconds per named phase."""

    def __init__(self):
        self.phases: dict[str, float] = {}

    def phase(self, name: str):
        timer = self

        class _Ctx:
            def __enter__(self):
                self.t0 = time.perf_counter()
                return self

            def __exit__(self, *exc):
                timer.phases[name] = timer.phases.get(name, 0.0) + (time.perf_counter() - self.t0)
                return False

        return _Ctx()


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


def write_manifest(
    path: Union[str, Path],
    command: str,
    cfg: RunConfig,
    data_spec: Optional[str],
    started: str,
    timer: PhaseTimer,
    outputs: dict[str, str],
    summary: dict,
) -> None:
    manifest = {
        "command": command,
        "config": config_to_dict(cfg),
        "seed": cfg.seed,
        "data": data_spec,
        "started": started,
        "finished": _utc_now(),
        "wall_seconds": {k: round(v, 6) for k, v in timer.phases.items()},
        "ru_maxrss_kb": resource.getrusage(resource.RUSAGE_SELF).ru_maxrss,
        "outputs": outputs,
        "summary": summary,
    }
    Path(path).write_text(json.dumps(manifest, indent=2) + "\n")


def _pretrain_config(cfg: RunConfig) -> PretrainConfig:
    return PretrainConfig(
        n_t=cfg.pretrain.n_t,
        ladder=NoiseLadder(tuple(cfg.pretrain.sigmas)),
        tau=cfg.pretrain.tau,
        epochs=cfg.pretrain.epochs,
        lr=cfg.pretrain.lr,
        weight_decay=cfg.pretrain.weight_decay,
        seed=cfg.seed,
    )


def _mamba_config(cfg: RunConfig) -> MambaConfig:
    m = cfg.mamba
    return MambaConfig(m.d_model, m.d_state, m.d_conv, m.expand)


def _forecaster_config(cfg: RunConfig, n_features: int, t_out: Optional[int] = None) -> ForecasterConfig:
    return ForecasterConfig(
        n_features=n_features,
        d_model=cfg.mamba.d_model,
        d_state=cfg.mamba.d_state,
        n_layer=cfg.forecaster.n_layer,
        t_in=cfg.forecaster.t_in,
        t_out=cfg.forecaster.t_out if t_out is None else t_out,
        d_conv=cfg.mamba.d_conv,
        expand=cfg.mamba.expand,
    )


def pretrain_batches(split: DatasetSplit, window: int, batch_size: int, cap: Optional[int]) -> list[np.ndarray]:
    """Non-overlapping train-split windows grouped into fixed batches; the
    same list is replayed every epoch (augmentation noise still advances)."""
    arr = split.train
    n_win = arr.shape[0] // window
    if n_win < 1:
        raise DataError(f"train split too short for pretrain window {window}")
    windows = arr[: n_win * window].reshape(n_win, window, arr.shape[1])
    batches = [windows[i:i + batch_size] for i in range(0, n_win, batch_size)]
    if cap is not None:
        batches = batches[:cap]
    return batches


def run_pretrain(cfg: RunConfig, data_spec: str, out_path: Union[str, Path]) -> dict:
    """Contrastive pretraining; writes <out>, <stem>.losses.csv and
    <stem>.manifest.json. Container entries: embed, block.<field>."""
    started = _utc_now()
    timer = PhaseTimer()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)

    with timer.phase("data"):
        split = resolve_dataset(data_spec, cfg.synth, cfg.seed)
        batches = pretrain_batches(
            split, cfg.pretrain.window, cfg.pretrain.batch_size, cfg.pretrain.max_batches_per_epoch
        )
    with timer.phase("pretrain"):
        result = pretrain(_pretrain_config(cfg), _mamba_config(cfg), batches, split.n_features)

    losses_path = out_path.with_suffix(".losses.csv")
    manifest_path = out_path.with_suffix(".manifest.json")
    with timer.phase("write"):
        entries = {"embed": result.embed}
        entries.update({f"block.{k}": v for k, v in result.params.as_dict().items()})
        save_params(entries, out_path)
        with open(losses_path, "w") as fh:
            fh.write("epoch,intra,inter,total\n")
            for row in result.history:
                fh.write(f"{row.epoch},{row.intra!r},{row.inter!r},{row.total!r}\n")

    summary = {
        "epochs": len(result.history),
        "batches_per_epoch": len(batches),
        "final_total_loss": result.history[-1].total if result.history else None,
    }
    write_manifest(
        manifest_path, "pretrain", cfg, data_spec, started, timer,
        {"params": str(out_path), "losses": str(losses_path)}, summary,
    )
    return summary


def _plan_from(cfg: RunConfig) -> TransferPlan:
    t = cfg.transfer
    return TransferPlan(replace=t.replace, freeze=t.freeze, only_selective=t.only_selective)


def plan_label(plan: TransferPlan, n_layer: int, have_init: bool) -> str:
    """Metrics label; anything that copies zero layers is plain scratch so
    equivalent runs produce identical rows. No commas: the label sits in an
    unquoted CSV cell."""
    if not have_init or plan.n_replaced(n_layer) == 0:
        return "scratch"
    label = f"replace={plan.replace} freeze={plan.freeze}"
    if plan.only_selective:
        label += " selective"
    return label


def _load_block_source(entries: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    from .block import PARAM_FIELDS

    if "block.w_in" in entries:
        return {f: entries[f"block.{f}"] for f in PARAM_FIELDS}
    if "layers.0.w_in" in entries:
        return {f: entries[f"layers.0.{f}"] for f in PARAM_FIELDS}
    raise DataError("container holds no block arrays (expected block.* or layers.0.*)")


def write_metrics(path: Union[str, Path], rows: list[dict]) -> None:
    with open(path, "w") as fh:
        fh.write("dataset,horizon,plan,seed,MAE,MSE\n")
        for r in rows:
            fh.write(
                f"{r['dataset']},{r['horizon']},{r['plan']},{r['seed']},{r['MAE']!r},{r['MSE']!r}\n"
            )


def run_train(
    cfg: RunConfig,
    data_spec: str,
    init_path: Optional[Union[str, Path]],
    out_dir: Union[str, Path],
) -> dict:
    """Train the forecaster, optionally seeding layers from a pretrain
    container. Writes params.rclp, metrics.csv, epoch_log.csv, manifest.json."""
    started = _utc_now()
    timer = PhaseTimer()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    with timer.phase("data"):
        split = resolve_dataset(data_spec, cfg.synth, cfg.seed)
    fcfg = _forecaster_config(cfg, split.n_features)
    plan = _plan_from(cfg)

    masters = build_forecaster(fcfg, cfg.seed)
    frozen: frozenset[str] = frozenset()
    if init_path is not None:
        source = _load_block_source(load_params(init_path))
        frozen = transfer_params(masters, source, fcfg, plan)

    with timer.phase("train"):
        result = train_forecaster(
            masters,
            fcfg,
            split,
            lr=cfg.training.lr,
            epochs=cfg.training.epochs,
            batch_size=cfg.training.batch_size,
            seed=cfg.seed,
            frozen=frozen,
            max_train_batches=cfg.training.max_train_batches,
            max_eval_windows=cfg.training.max_eval_windows,
        )

    params_path = out_dir / "params.rclp"
    metrics_path = out_dir / "metrics.csv"
    history_path = out_dir / "epoch_log.csv"
    with timer.phase("write"):
        save_params(result.params, params_path)
        write_metrics(metrics_path, [{
            "dataset": data_spec,
            "horizon": fcfg.t_out,
            "plan": plan_label(plan, fcfg.n_layer, init_path is not None),
            "seed": cfg.seed,
            "MAE": result.test_mae,
            "MSE": result.test_mse,
        }])
        with open(history_path, "w") as fh:
            fh.write("epoch,train_mae,val_mae,val_mse\n")
            for row in result.history:
                fh.write(f"{row.epoch},{row.train_mae!r},{row.val_mae!r},{row.val_mse!r}\n")

    summary = {
        "best_epoch": result.best_epoch,
        "best_val_mae": result.best_val_mae,
        "test_mae": result.test_mae,
        "test_mse": result.test_mse,
        "frozen": sorted(frozen),
    }
    write_manifest(
        out_dir / "manifest.json", "train", cfg, data_spec, started, timer,
        {"params": str(params_path), "metrics": str(metrics_path), "epoch_log": str(history_path)},
        summary,
    )
    return summary


def probe_params(
    cfg: RunConfig, init_path: Optional[Union[str, Path]], n_features: int
) -> tuple[np.ndarray, MambaParams]:
    """(embed, block) to probe: from a container when given, otherwise the
    same seeded initialization pretraining would start from."""
    if init_path is not None:
        entries = load_params(init_path)
        if "embed" not in entries:
            raise DataError("container is missing the embed array")
        return entries["embed"], MambaParams.from_dict(_load_block_source(entries))
    seeds = np.random.SeedSequence(cfg.seed).generate_state(3, dtype=np.uint64)
    embed_rng = np.random.Generator(np.random.PCG64(int(seeds[0])))
    mcfg = _mamba_config(cfg)
    bound = 1.0 / np.sqrt(n_features)
    embed = embed_rng.uniform(-bound, bound, size=(n_features, mcfg.d_model))
    return embed, init_params(mcfg, int(seeds[1]))


def run_probe(
    cfg: RunConfig,
    data_spec: str,
    init_path: Optional[Union[str, Path]],
    out_dir: Union[str, Path],
) -> dict:
    """Selectivity instrumentation: run the block over non-overlapping test
    windows, pool memory scores into report.json, and emit the first
    window's delta/memory/heatmap traces."""
    started = _utc_now()
    timer = PhaseTimer()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    with timer.phase("data"):
        split = resolve_dataset(data_spec, cfg.synth, cfg.seed)
    embed, block = probe_params(cfg, init_path, split.n_features)
    if embed.shape[0] != split.n_features:
        raise DataError(
            f"embed expects {embed.shape[0]} features, dataset has {split.n_features}"
        )

    t_in = cfg.forecaster.t_in
    arr = split.test
    n_win = arr.shape[0] // t_in
    if n_win < 1:
        raise DataError(f"test split too short for probe windows of {t_in}")
    n_win = min(n_win, cfg.probe.max_windows)
    windows = arr[: n_win * t_in].reshape(n_win, t_in, arr.shape[1])

    with timer.phase("probe"):
        scores_all = []
        first_trace = None
        for w in range(n_win):
            x = (windows[w] @ embed)[None]
            _, trace = block_forward(block, x, want_trace=True)
            if first_trace is None:
                first_trace = trace
            scores_all.append(memory_scores(trace.hidden[0], trace.input_contrib[0]))
        pooled = np.concatenate(scores_all)
        report = SelectivityReport.from_scores(pooled)

    with timer.phase("write"):
        first_scores = scores_all[0]
        paths = emit_traces(
            out_dir, first_scores, first_trace.delta[0], first_trace.hidden[0], report
        )

    summary = {
        "n_windows": n_win,
        "n_steps": int(pooled.size),
        "fr": report.fr,
        "me": report.me,
        "n_sm": report.n_sm,
        "n_si": report.n_si,
        "n_nr": report.n_nr,
    }
    write_manifest(
        out_dir / "manifest.json", "probe", cfg, data_spec, started, timer,
        {k: str(v) for k, v in paths.items()}, summary,
    )
    return summary


def run_eval(
    cfg: RunConfig,
    data_spec: str,
    params_path: Union[str, Path],
    out_dir: Union[str, Path],
) -> dict:
    """Test-split metrics for a saved forecaster."""
    started = _utc_now()
    timer = PhaseTimer()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    with timer.phase("data"):
        split = resolve_dataset(data_spec, cfg.synth, cfg.seed)
    fcfg = _forecaster_config(cfg, split.n_features)
    entries = load_params(params_path)
    missing = [n for n in param_names(fcfg) if n not in entries]
    if missing:
        raise DataError(f"container is missing forecaster arrays: {missing[:4]}")
    masters = {n: entries[n] for n in param_names(fcfg)}

    from .data import make_windows

    with timer.phase("eval"):
        test_w = make_windows(split.test, fcfg.t_in, fcfg.t_out)
        idx = np.arange(len(test_w))
        if cfg.training.max_eval_windows is not None and len(test_w) > cfg.training.max_eval_windows:
            idx = np.unique(np.linspace(0, len(test_w) - 1, cfg.training.max_eval_windows).astype(int))
        test_mae, test_mse = evaluate(masters, fcfg, test_w.inputs[idx], test_w.targets[idx])

    metrics_path = out_dir / "metrics.csv"
    plan = _plan_from(cfg)
    with timer.phase("write"):
        write_metrics(metrics_path, [{
            "dataset": data_spec,
            "horizon": fcfg.t_out,
            "plan": plan_label(plan, fcfg.n_layer, False),
            "seed": cfg.seed,
            "MAE": test_mae,
            "MSE": test_mse,
        }])

    summary = {"test_mae": test_mae, "test_mse": test_mse, "n_windows": int(idx.size)}
    write_manifest(
        out_dir / "manifest.json", "eval", cfg, data_spec, started, timer,
        {"metrics": str(metrics_path)}, summary,
    )
    return summary


def run_verify(suite: str, seed: int, out_dir: Optional[Union[str, Path]] = None) -> verify_mod.SuiteResult:
    """Run a verification suite; optionally write report.json and the gate
    stationarity sigma sweep."""
    result = verify_mod.run_suite(suite, seed=seed)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.json").write_text(json.dumps(result.to_dict(), indent=2) + "\n")
        verify_mod.write_sigma_sweep(out_dir / "sweep.csv", verify_mod.sigma_sweep())
    return result
