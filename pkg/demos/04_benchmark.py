#!/usr/bin/env python3
"""RNN versus BiGRU across input window lengths.

A scaled-down version of the comparison in the acceptance suite: fewer
repetitions and epochs so it finishes in a couple of minutes. Pass
``--full`` for 5 repetitions of 30 epochs.
"""

import sys

import numpy as np

from gridcast import GridTopology, ModelConfig, SplitSpec, generate_state_series, train

full = "--full" in sys.argv
reps, epochs = (5, 30) if full else (2, 10)
series = generate_state_series(GridTopology.ring(6), T=2000, seed=0)
lengths = (5, 10, 15, 20)

table = {}
for arch in ("rnn", "bigru"):
    for l in lengths:
        scores = [
            train(ModelConfig(architecture=arch, input_dim=12, seq_len=l, seed=r), series, SplitSpec(), epochs=epochs)[1].test_nrmse
            for r in range(reps)
        ]
        table[arch, l] = np.mean(scores)
        print(f"{arch:5s} l={l:2d}: mean test NRMSE {table[arch, l]:.4f} over {reps} runs", flush=True)

# %% the table, one row per model
print("\nmodel  " + "  ".join(f"l={l:<5d}" for l in lengths))
for arch in ("rnn", "bigru"):
    print(f"{arch:5s}  " + "  ".join(f"{table[arch, l]:.4f} " for l in lengths))
bigru = [table["bigru", l] for l in lengths]
print(f"\nbigru max/min across window lengths: {max(bigru) / min(bigru):.3f}")
