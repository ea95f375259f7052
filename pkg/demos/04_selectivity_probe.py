"""Score how decisively a block gates its memory, step by step.

Each step gets s = r_in / (r_in + r_prev) from the cosine alignment of the
hidden state with the fresh input contribution versus the carried-over
state. Scores above 0.7 count as memory-suppressing, below 0.3 as
memory-insensitive; the focus ratio is the fraction of decisive steps.
"""

import numpy as np

from rclmamba import (
    MambaConfig,
    NoiseLadder,
    PretrainConfig,
    SelectivityReport,
    block_forward,
    classify_scores,
    init_params,
    memory_scores,
    pretrain,
    synth_corpus,
)

cfg = MambaConfig(d_model=8, d_state=4, d_conv=2, expand=2)
data = synth_corpus("ar1-with-spikes", 32, t_len=48, n_features=2, noise_std=1.0, seed=9)


def probe(params, embed, tag):
    x = data @ embed
    _, trace = block_forward(params, x, want_trace=True)
    pooled = np.concatenate([
        memory_scores(trace.hidden[b], trace.input_contrib[b]) for b in range(x.shape[0])
    ])
    report = SelectivityReport.from_scores(pooled)
    print(f"{tag:10s} FR {report.fr:.4f}  ME {report.me:.4f}  "
          f"(SM {report.n_sm}  SI {report.n_si}  NR {report.n_nr})")
    return report


# a fresh block barely commits either way
rng = np.random.default_rng(1)
embed0 = rng.uniform(-1 / np.sqrt(2), 1 / np.sqrt(2), size=(2, cfg.d_model))
fresh = probe(init_params(cfg, seed=1), embed0, "fresh")

# contrastive pretraining pushes steps toward the decisive ends
pre_cfg = PretrainConfig(
    n_t=3, ladder=NoiseLadder((0.0, 0.25, 0.5)), tau=0.1,
    epochs=8, lr=2e-3, weight_decay=1e-4, seed=1,
)
batches = [data[i:i + 16] for i in range(0, len(data), 16)]
pre = pretrain(pre_cfg, cfg, batches, n_features=2)
shaped = probe(pre.params, pre.embed, "pretrained")

print("\nfocus ratio rose:", shaped.fr > fresh.fr)

# label a single window to see the classes step by step
x1 = (data[:1] @ pre.embed)
_, tr = block_forward(pre.params, x1, want_trace=True)
scores = memory_scores(tr.hidden[0], tr.input_contrib[0])
labels = classify_scores(scores)
print("\nfirst window labels:", "".join({"SM": "S", "SI": "i", "NR": "."}[l] for l in labels))
print("(S = suppresses memory, i = ignores input, . = non-decisive)")
