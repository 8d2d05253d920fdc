#!/usr/bin/env python3
"""Checking hand-derived gradients against finite differences.

Every architecture's analytic gradient is compared with central finite
differences of the same loss. The smooth networks use the fourth-order
five-point formula with a wide step. The Conv1D front end has ReLU kinks,
so it uses the three-point formula with a small step.
"""

import time

from gridcast import ModelConfig, gradcheck
from gridcast.training import default_stencil

toy = dict(input_dim=4, hidden_size=3, depth=2, seq_len=4, horizon=2, conv_filters=2, conv_kernel=2, dropout_rate=0.05)

for arch in ("rnn", "gru", "bigru", "conv_bigru"):
    cfg = ModelConfig(architecture=arch, **toy)
    stencil, step = default_stencil(cfg)
    start = time.perf_counter()
    err = gradcheck(cfg, step=step, trials=5, stencil=stencil)
    print(f"{arch:11s} {stencil}-point, h={step:g}: worst relative error {err:.2e}  ({time.perf_counter() - start:.1f}s)")

# %% the classic three-point rule at h=1e-5 bottoms out on float64 roundoff:
# over enough trials some gradient entry lands near 1e-7, and such entries
# can only be resolved to a few parts in 1e5
cfg = ModelConfig(architecture="gru", **toy)
for stencil, step in ((3, 1e-5), (5, 1e-3)):
    print(f"\ngru, {stencil}-point, h={step:g}, 20 trials: {gradcheck(cfg, step=step, trials=20, stencil=stencil):.2e}", end="")
print()

# %% a zero-residual construction makes both gradients exactly zero
print(f"zero residual:        {gradcheck(cfg, trials=2, zero_residual=True):.1e}")
