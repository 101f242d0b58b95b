import numpy as np
import pytest

from sid.codegen import (
    CompileError,
    StepRunner,
    compile_ks_stage,
    compile_model,
    code_size_report,
    fresh_state,
    gru_instruction_count,
    kernel_instruction_count,
    ks_instruction_count,
    lstm_instruction_count,
    mlp_instruction_count,
    read_symbol,
    run_feedforward,
    write_symbol,
)
from sid.detection import KsDecisionConfig, build_ped, ks_hardware, vote_decide
from sid.fixedpoint import FX_ONE, fx_add, fx_array, fx_mul, fx_sub
from sid.machine import MachineConfig, run
from sid.models import (
    ModelBundle,
    infer_lr,
    infer_ocsvm,
    infer_svm,
    mlp_logits,
    predict_series,
)
from sid.training import init_gru, init_lstm, init_mlp

CONFIG = MachineConfig()
TOL = 2**-8


def quantize(values):
    """Snap floats to the Q16.16 grid."""
    return fx_array(values).astype(np.float64) / FX_ONE


def random_mlp(sizes, seed):
    return init_mlp(sizes, seed=seed)


# ---------------------------------------------------------------------------
# Code size
# ---------------------------------------------------------------------------

def test_mlp_code_sizes_match_targets():
    targets = {
        (384, 50, 2): 112,
        (384, 500, 2): 224,
        (384, 50, 25, 2): 208,
        (384, 200, 100, 2): 224,
    }
    for sizes, target in targets.items():
        prog = compile_model(random_mlp(list(sizes), seed=1), CONFIG)
        assert len(prog.instructions) == mlp_instruction_count(sizes, CONFIG.n_local)
        assert abs(prog.code_bytes - target) <= 64, (sizes, prog.code_bytes)


def test_lstm_200_code_size():
    m = init_lstm(200, 6, seed=2)
    prog = compile_model(m, CONFIG)
    assert len(prog.instructions) == lstm_instruction_count(200, 6, CONFIG.n_local) == 35
    assert prog.code_bytes == 560


def test_ks_and_vote_code_sizes():
    rng = np.random.default_rng(3)
    cfg = KsDecisionConfig()
    refs = [build_ped(quantize(rng.exponential(size=40)), 16) for _ in range(20)]
    ks_only = compile_ks_stage(refs, cfg, include_vote=False)
    assert len(ks_only.instructions) == ks_instruction_count(20, 40, "looped", False) == 18
    assert abs(ks_only.code_bytes - 352) <= 64
    vote_only = compile_ks_stage(refs, cfg, include_ks=False)
    assert vote_only.stages["vote"] == 2  # the vote itself is 32 bytes
    assert abs(vote_only.code_bytes - 32) <= 64


def test_kernel_svm_reduction_ratio():
    rng = np.random.default_rng(4)
    m = ModelBundle(
        "kernel_svm",
        {"coef": rng.normal(size=400) / 400, "sv": rng.normal(size=(400, 6)), "b": 0.1,
         "gamma": 0.5},
    )
    looped = compile_model(m, CONFIG, "looped")
    unrolled = compile_model(m, CONFIG, "unrolled")
    assert len(looped.instructions) == kernel_instruction_count(400, "looped")
    assert len(unrolled.instructions) == kernel_instruction_count(400, "unrolled")
    assert unrolled.code_bytes / looped.code_bytes >= 50


def test_code_size_report_text():
    rng = np.random.default_rng(5)
    m = ModelBundle(
        "kernel_svm",
        {"coef": rng.normal(size=8), "sv": rng.normal(size=(8, 4)), "b": 0.0, "gamma": 1.0},
    )
    report = code_size_report(
        [compile_model(m, CONFIG, "looped"), compile_model(m, CONFIG, "unrolled")]
    )
    assert "kernel_svm" in report
    line = [l for l in report.splitlines() if l.startswith("kernel_svm")][0]
    assert f"{13 * 16}" in line


def test_krr_is_rejected():
    m = ModelBundle("krr", {"w": np.ones(14), "b": 0.0, "lam": 1e-3})
    with pytest.raises(CompileError, match="feature"):
        compile_model(m, CONFIG)


def test_clamp_warning():
    m = ModelBundle("lr", {"w": [1e6, 1.0], "b": 0.0})
    with pytest.warns(RuntimeWarning, match="clamped"):
        prog = compile_model(m, CONFIG)
    assert "w" in prog.clamped


# ---------------------------------------------------------------------------
# Oracle equivalence (small instances; acceptance runs the pinned dimensions)
# ---------------------------------------------------------------------------

def test_lr_matches_oracle():
    rng = np.random.default_rng(6)
    m = ModelBundle("lr", {"w": rng.normal(0, 0.3, size=8), "b": 0.2})
    prog = compile_model(m, CONFIG)
    for _ in range(20):
        x = quantize(rng.uniform(-4, 4, size=8))
        out, _ = run_feedforward(prog, CONFIG, x, outputs=("prob", "decision"))
        want = infer_lr(m, x)
        assert abs(out["prob"][0] - want) <= TOL
        if abs(want - 0.5) > TOL:
            assert bool(out["decision"][0]) == (want >= 0.5)


def test_linear_svm_matches_oracle():
    rng = np.random.default_rng(7)
    m = ModelBundle(
        "linear_svm",
        {"coef": rng.normal(size=3), "sv": rng.normal(0, 0.4, size=(3, 6)), "b": -0.1},
    )
    prog = compile_model(m, CONFIG)
    for _ in range(20):
        x = quantize(rng.uniform(-4, 4, size=6))
        out, _ = run_feedforward(prog, CONFIG, x, outputs=("score", "decision"))
        label, score = infer_svm(m, x)
        assert abs(out["score"][0] - score) <= TOL
        if abs(score) > TOL:
            assert bool(out["decision"][0]) == (label > 0)


@pytest.mark.parametrize("strategy", ["looped", "unrolled"])
def test_kernel_svm_matches_oracle(strategy):
    rng = np.random.default_rng(8)
    m = ModelBundle(
        "kernel_svm",
        {
            "coef": rng.normal(0, 0.2, size=12),
            "sv": quantize(rng.uniform(-2, 2, size=(12, 6))),
            "b": 0.05,
            "gamma": 0.4,
        },
    )
    prog = compile_model(m, CONFIG, strategy)
    for _ in range(15):
        x = quantize(rng.uniform(-2, 2, size=6))
        out, _ = run_feedforward(prog, CONFIG, x, outputs=("score", "decision"))
        label, score = infer_svm(m, x)
        assert abs(out["score"][0] - score) <= TOL
        if abs(score) > TOL:
            assert bool(out["decision"][0]) == (label > 0)


def test_ocsvm_matches_oracle():
    rng = np.random.default_rng(9)
    coef = np.abs(rng.normal(0, 0.1, size=10))
    coef /= coef.sum()
    m = ModelBundle(
        "ocsvm",
        {"coef": coef, "sv": quantize(rng.normal(0, 1, size=(10, 6))), "rho": 0.4,
         "gamma": 0.5},
    )
    prog = compile_model(m, CONFIG)
    for _ in range(15):
        x = quantize(rng.normal(0, 1.5, size=6))
        out, _ = run_feedforward(prog, CONFIG, x, outputs=("score", "decision"))
        anomaly, score = infer_ocsvm(m, x)
        assert abs(out["score"][0] - score) <= TOL
        if abs(score) > TOL:
            assert bool(out["decision"][0]) == (not anomaly)


def test_mlp_matches_oracle():
    rng = np.random.default_rng(10)
    m = random_mlp([6, 8, 2], seed=11)
    prog = compile_model(m, CONFIG)
    for _ in range(20):
        x = quantize(rng.uniform(-2, 2, size=6))
        out, _ = run_feedforward(prog, CONFIG, x, outputs=("logits", "decision"))
        want = mlp_logits(m, x)
        assert np.abs(out["logits"] - want).max() <= TOL
        if abs(want[1] - want[0]) > TOL:
            assert bool(out["decision"][0]) == (want[1] >= want[0])


@pytest.mark.parametrize("kind", ["lstm", "gru"])
def test_rnn_step_matches_oracle(kind):
    rng = np.random.default_rng(12)
    init = init_lstm if kind == "lstm" else init_gru
    m = init(8, 6, seed=13)
    prog = compile_model(m, CONFIG)
    readings = quantize(rng.uniform(-1.5, 1.5, size=(12, 6)))
    runner = StepRunner(prog, CONFIG)
    for reading in readings:
        runner.step(reading)
    got = runner.errors()
    want = predict_series(m, readings)
    assert np.abs(got - want).max() <= TOL


def test_strategy_equivalence_kernel_svm():
    rng = np.random.default_rng(14)
    m = ModelBundle(
        "kernel_svm",
        {"coef": rng.normal(0, 0.2, size=9), "sv": quantize(rng.uniform(-2, 2, size=(9, 5))),
         "b": 0.1, "gamma": 0.6},
    )
    looped = compile_model(m, CONFIG, "looped")
    unrolled = compile_model(m, CONFIG, "unrolled")
    x = quantize(rng.uniform(-2, 2, size=5))
    out_l, state_l = run_feedforward(looped, CONFIG, x, outputs=("score", "decision"))
    out_u, state_u = run_feedforward(unrolled, CONFIG, x, outputs=("score", "decision"))
    for name in ("score", "decision", "acc", "kv", "sq"):
        a = state_l.memory[looped.addr(name) : looped.addr(name) + looped.length(name)]
        b = state_u.memory[unrolled.addr(name) : unrolled.addr(name) + unrolled.length(name)]
        assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# KS stage
# ---------------------------------------------------------------------------

def fx_window_errors(preds, acts):
    """Exact fixed-point materialization: err_i = sat(sum sat((p-a)^2))."""
    out = []
    for p_row, a_row in zip(fx_array(preds), fx_array(acts)):
        total = 0
        for p, a in zip(p_row, a_row):
            d = fx_sub(int(p), int(a))
            total = fx_add(total, fx_mul(d, d))
        out.append(total)
    return np.asarray(out, dtype=np.int64)


def make_refs(rng, cfg, n_ref=20):
    return [
        build_ped(quantize(rng.exponential(scale=rng.uniform(0.5, 1.5), size=cfg.window_errors)),
                  cfg.bins)
        for _ in range(n_ref)
    ]


def test_ks_stage_matches_hardware_oracle():
    rng = np.random.default_rng(15)
    cfg = KsDecisionConfig()
    refs = make_refs(rng, cfg)
    prog = compile_ks_stage(refs, cfg)
    for _ in range(10):
        observed = quantize(rng.exponential(scale=rng.uniform(0.5, 1.5), size=40))
        state = fresh_state(prog, CONFIG)
        write_symbol(state, prog, "errors", observed)
        run(state)
        d_values = read_symbol(state, prog, "d_values")
        rejects = read_symbol(state, prog, "rejects").astype(bool)
        for r, ref in enumerate(refs):
            d_count, reject = ks_hardware(ref, observed, cfg)
            assert int(d_values[r]) == d_count
            assert bool(rejects[r]) == reject
        want_decision = vote_decide(
            [ks_hardware(ref, observed, cfg)[1] for ref in refs], cfg
        )
        assert bool(read_symbol(state, prog, "decision")[0]) == want_decision


def test_ks_stage_boundary_ties_are_exact():
    # Observed errors placed exactly on reference boundaries: the one-ulp
    # shift keeps the <=-count convention bit-exact.
    cfg = KsDecisionConfig(window_errors=8, bins=4)
    ref_errors = quantize(np.linspace(0.5, 4.0, 8))
    ped = build_ped(ref_errors, 4)
    prog = compile_ks_stage([ped] * 20, cfg)
    observed = np.repeat(ped.boundaries, 2)
    state = fresh_state(prog, CONFIG)
    write_symbol(state, prog, "errors", observed)
    run(state)
    d_count, _ = ks_hardware(ped, observed, cfg)
    assert int(read_symbol(state, prog, "d_values")[0]) == d_count


def test_ks_strategy_equivalence():
    rng = np.random.default_rng(16)
    cfg = KsDecisionConfig()
    refs = make_refs(rng, cfg)
    looped = compile_ks_stage(refs, cfg, "looped")
    unrolled = compile_ks_stage(refs, cfg, "unrolled")
    preds = quantize(rng.uniform(-1, 1, size=(40, 6)))
    acts = quantize(rng.uniform(-1, 1, size=(40, 6)))
    errors_raw = fx_window_errors(preds, acts)

    state_l = fresh_state(looped, CONFIG)
    state_l.memory[looped.addr("errors") : looped.addr("errors") + 40] = errors_raw
    run(state_l)

    state_u = fresh_state(unrolled, CONFIG)
    write_symbol(state_u, unrolled, "predictions", preds.reshape(-1))
    write_symbol(state_u, unrolled, "actuals", acts.reshape(-1))
    run(state_u)

    for name in ("errors", "observed_hist", "d_values", "rejects", "votes", "decision"):
        a = state_l.memory[looped.addr(name) : looped.addr(name) + looped.length(name)]
        b = state_u.memory[unrolled.addr(name) : unrolled.addr(name) + unrolled.length(name)]
        assert np.array_equal(a, b), name


def test_ks_unrolled_instruction_count():
    rng = np.random.default_rng(17)
    cfg = KsDecisionConfig()
    refs = make_refs(rng, cfg)
    unrolled = compile_ks_stage(refs, cfg, "unrolled", include_vote=False)
    assert len(unrolled.instructions) == ks_instruction_count(20, 40, "unrolled", False)


def test_ks_reference_validation():
    cfg = KsDecisionConfig()
    short = build_ped(np.arange(10.0), 5)
    with pytest.raises(CompileError, match="equal-size"):
        compile_ks_stage([short], cfg)


def test_gru_instruction_count_formula():
    m = init_gru(200, 6, seed=18)
    prog = compile_model(m, CONFIG)
    assert len(prog.instructions) == gru_instruction_count(200, 6, CONFIG.n_local)


def test_symbol_table_text():
    m = ModelBundle("lr", {"w": [0.5, -0.5], "b": 0.0})
    prog = compile_model(m, CONFIG)
    text = prog.symbol_table_text()
    assert "input" in text and "decision" in text
