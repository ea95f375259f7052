"""Pretrain a block, plant it in a forecaster, and compare against scratch.

The transfer copies the pretrained arrays into the first half of the layer
stack. With the frozen-a mode the decay exponents of those layers are
pinned, and the demo verifies they come out of training bit-identical.
"""

import numpy as np

from rclmamba import (
    FREEZE_A,
    ForecasterConfig,
    MambaConfig,
    NoiseLadder,
    PretrainConfig,
    TransferPlan,
    build_forecaster,
    pretrain,
    split_series,
    synth_corpus,
    train_forecaster,
    transfer_params,
)

SEED = 5
series = synth_corpus("multi-sine", 1, t_len=1600, n_features=3, noise_std=0.3, seed=SEED)[0]
split = split_series(series)
print("rows: train", split.train.shape[0], "val", split.val.shape[0], "test", split.test.shape[0])

block_cfg = MambaConfig(d_model=8, d_state=4, d_conv=2, expand=2)
fore_cfg = ForecasterConfig(
    n_features=3, d_model=8, d_state=4, n_layer=2, t_in=24, t_out=8, d_conv=2, expand=2
)

# stage 1: contrastive pretraining on non-overlapping train windows
win = 24
n_win = split.train.shape[0] // win
windows = split.train[: n_win * win].reshape(n_win, win, 3)
batches = [windows[i:i + 16] for i in range(0, n_win, 16)]
pre_cfg = PretrainConfig(
    n_t=3, ladder=NoiseLadder((0.0, 0.1, 0.3)), tau=0.1,
    epochs=5, lr=2e-3, weight_decay=1e-4, seed=SEED,
)
pre = pretrain(pre_cfg, block_cfg, batches, n_features=3)
print(f"pretrain: loss {pre.history[0].total:.4f} -> {pre.history[-1].total:.4f}")

# stage 2: supervised training, scratch vs transferred
def run(tag, plan=None):
    masters = build_forecaster(fore_cfg, SEED)
    frozen = ()
    if plan is not None:
        frozen = transfer_params(masters, pre.params, fore_cfg, plan)
    res = train_forecaster(
        masters, fore_cfg, split,
        lr=2e-3, epochs=10, batch_size=16, seed=SEED,
        frozen=frozen, max_train_batches=8, max_eval_windows=64,
    )
    print(f"{tag:10s} best epoch {res.best_epoch:2d}  val MAE {res.best_val_mae:.4f}  "
          f"test MAE {res.test_mae:.4f}  frozen {sorted(frozen) or 'nothing'}")
    return res

scratch = run("scratch")
plan = TransferPlan(replace=0.5, freeze=FREEZE_A)
warm = run("transfer", plan)

# the frozen decay exponents never moved
same = np.array_equal(warm.params["layers.0.a_log"], pre.params.a_log)
print("\nlayers.0.a_log bit-identical to the pretrained values:", same)

# the untouched upper layer trained freely from its own seeded init
fresh = build_forecaster(fore_cfg, SEED)
print("upper layer trained freely (weights moved):",
      not np.array_equal(fresh["layers.1.w_in"], warm.params["layers.1.w_in"]))
