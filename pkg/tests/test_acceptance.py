"""Acceptance gate: one test per criterion, each recording a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the lines are printed in an
"acceptance criteria" section at the end of the session (and immediately
with ``-s``). The benchmark criteria train 40 models and take several
minutes on one core.
"""

import time

import numpy as np
import pytest

from conftest import CRITERIA
from gridcast.cli import main
from gridcast.linalg import mode_product_quadratic
from gridcast.measurement import GridTopology, StateSeries, build_measurement_tensor, generate_state_series, measure
from gridcast.model import ModelConfig, build_model
from gridcast.training import SplitSpec, default_stencil, gradcheck, split_lengths, train

from oracles import quadratic_loops


def record(name, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    CRITERIA.append(line)
    print(line)
    assert ok, line


# toy scale: d <= 4, n <= 5, l <= 6, horizon <= 3, depth <= 2
GRAD_TOY = dict(input_dim=4, hidden_size=3, depth=2, seq_len=4, horizon=2, conv_filters=2, conv_kernel=2, dropout_rate=0.05)
GRAD_BOUND = {"rnn": 1e-5, "gru": 1e-5, "bigru": 1e-5, "conv_bigru": 1e-4}


def test_gradient_oracle_suite():
    start = time.perf_counter()
    errors = {}
    for arch, bound in GRAD_BOUND.items():
        cfg = ModelConfig(architecture=arch, **GRAD_TOY)
        stencil, step = default_stencil(cfg)
        errors[arch] = gradcheck(cfg, step=step, trials=20, seed=0, stencil=stencil)
    elapsed = time.perf_counter() - start
    ok = all(errors[a] < GRAD_BOUND[a] for a in errors) and elapsed < 60
    detail = ", ".join(f"{a} {e:.2e} (< {GRAD_BOUND[a]:g})" for a, e in errors.items())
    record("gradient oracle suite", ok, f"{detail}; 20 trials each; {elapsed:.1f}s (< 60s)")


def test_measurement_model_oracle():
    rng = np.random.default_rng(2024)
    instances = []
    for _ in range(100):
        n, M = int(rng.integers(1, 9)), int(rng.integers(1, 11))
        instances.append((rng.normal(size=(M, n, n)), rng.normal(size=n)))
    start = time.perf_counter()
    results = [mode_product_quadratic(H, x) for H, x in instances]
    elapsed = time.perf_counter() - start
    worst = max(float(np.max(np.abs(r - quadratic_loops(H, x)))) for r, (H, x) in zip(results, instances))
    record("measurement-model oracle", worst <= 1e-12 and elapsed < 1.0,
           f"max abs deviation {worst:.1e} (<= 1e-12) over 100 instances; {elapsed * 1e3:.1f}ms (< 1s)")


BENCH_LENGTHS = (5, 10, 15, 20)
BENCH_REPS = 5


@pytest.fixture(scope="module")
def benchmark():
    topo = GridTopology.ring(6)
    series = generate_state_series(topo, 2000, seed=0, profile="sinusoidal_load")
    # the measurement stream (noise 0.01) is generated as in the CLI; the forecasting target is the state
    tensor = build_measurement_tensor(topo, seed=0)
    measure(tensor, series.states[0], noise_sigma=0.01, seed=0)
    start = time.perf_counter()
    table = {}
    for arch in ("rnn", "bigru"):
        for l in BENCH_LENGTHS:
            runs = []
            for rep in range(BENCH_REPS):
                cfg = ModelConfig(architecture=arch, input_dim=12, seq_len=l, seed=rep)
                runs.append(train(cfg, series, SplitSpec(), epochs=30)[1].test_nrmse)
            table[arch, l] = float(np.mean(runs))
    return table, time.perf_counter() - start


def test_benchmark_ordering(benchmark):
    table, elapsed = benchmark
    cells = [f"l={l}: bigru {table['bigru', l]:.4f} vs rnn {table['rnn', l]:.4f}" for l in BENCH_LENGTHS]
    ok = all(table["bigru", l] < table["rnn", l] for l in BENCH_LENGTHS)
    record("benchmark ordering (bigru < rnn)", ok, "; ".join(cells) + f"; {elapsed / 60:.1f} min (< 20 min)")


def test_benchmark_stability(benchmark):
    table, _ = benchmark
    vals = [table["bigru", l] for l in BENCH_LENGTHS]
    ratio = max(vals) / min(vals)
    record("bigru stability across l", ratio < 1.5, f"max/min mean NRMSE = {ratio:.3f} (< 1.5)")


def test_smoke_learnability():
    data = StateSeries(np.tile([1.02, 0.98, -0.05, 0.11], (400, 1)))
    cfg = ModelConfig(architecture="gru", input_dim=4, hidden_size=4, depth=1, seq_len=5, horizon=2)
    start = time.perf_counter()
    _, rep = train(cfg, data, SplitSpec(), epochs=20, patience=20)
    elapsed = time.perf_counter() - start
    ok = min(rep.train_loss) < 1e-6 and elapsed < 30
    record("smoke learnability", ok, f"final loss {rep.train_loss[-1]:.2e} (< 1e-6) in {len(rep.train_loss)} epochs; {elapsed:.1f}s (< 30s)")


def test_determinism(tmp_path):
    assert main(["generate", "--buses", "3", "--steps", "500", "--seed", "1", "--out", str(tmp_path)]) == 0
    args = ["train", "--data", str(tmp_path / "states.csv"), "--arch", "bigru", "--hidden", "6", "--depth", "2",
            "--epochs", "3", "--seed", "11"]
    for sub in ("a", "b"):
        assert main([*args, "--out", str(tmp_path / sub)]) == 0
    same = {name: (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
            for name in ("model.ckpt", "report.json")}
    record("determinism", all(same.values()), ", ".join(f"{k} {'identical' if v else 'DIFFERENT'}" for k, v in same.items()))


def test_protocol_exactness(tmp_path):
    from gridcast.cells import ConvParams, conv1d_forward

    split = split_lengths(20_000, SplitSpec())
    conv_len = conv1d_forward(ConvParams(np.ones((64, 5, 12)), np.zeros(64)), np.zeros((20, 12)))[0].shape[0]
    assert main(["generate", "--buses", "3", "--steps", "400", "--out", str(tmp_path)]) == 0
    assert main(["train", "--data", str(tmp_path / "states.csv"), "--epochs", "1", "--hidden", "4", "--depth", "1",
                 "--out", str(tmp_path)]) == 0
    assert main(["forecast", "--data", str(tmp_path / "states.csv"), "--checkpoint", str(tmp_path / "model.ckpt"),
                 "--horizon", "50", "--out", str(tmp_path)]) == 0
    rows = len((tmp_path / "forecast.csv").read_text().splitlines()) - 1
    ok = split == (15_000, 1_000, 4_000) and conv_len == 16 and rows == 50
    record("protocol exactness", ok, f"split {split}, conv length {conv_len}, forecast rows {rows}")


def test_property_suites():
    import test_cells
    import test_metrics

    suites = {
        "convex-combination GRU state": test_cells.test_gru_state_is_a_convex_combination,
        "NRMSE affine invariance": test_metrics.test_affine_invariance,
        "BiGRU reduces to GRU": test_cells.test_bigru_with_silent_backward_direction_is_a_gru,
        "dropout identity in eval mode": test_cells.test_dropout_is_identity_in_eval_mode,
    }
    outcome = {}
    for name, fn in suites.items():
        try:
            fn()
            outcome[name] = True
        except AssertionError:
            outcome[name] = False
    record("property suites", all(outcome.values()), ", ".join(f"{k} {'ok' if v else 'FAILED'}" for k, v in outcome.items()))


def test_model_sizes_fit_gradcheck_budget():
    # the toy configurations above stay well inside the recommended 5,000-parameter budget
    for arch in GRAD_BOUND:
        assert build_model(ModelConfig(architecture=arch, **GRAD_TOY)).parameter_count() <= 5000


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v", "-s"]))
