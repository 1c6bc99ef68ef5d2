import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qttt_lab.flops import (
    Budget,
    FlopModel,
    budget_table,
    full_ttt_equivalent_tokens,
    full_ttt_step_flops,
    gen_flops,
    matched_bon_trajectories,
    matched_thinking_tokens,
    prefill_flops,
    qttt_partial_flops,
    relative_gap,
)

BIG = FlopModel(32, 4096, 4)
T_LONG = 100_000


def _gen_oracle(L, d, r, M, T):
    # per-token summation, independent of the closed form
    return sum(2 * L * d * (T + m) + (4 + 2 * r) * L * d * d for m in range(M))


def _qttt_oracle(L, d, r, k, T, n):
    fwd = k * T * 2 * L * d + k * (2 + 2 * r) * L * d * d
    return n * 2 * fwd


def test_coefficients_follow_shape():
    m = FlopModel(1, 2, 4)
    assert (m.c_quad, m.c_tok) == (4, 48)
    with pytest.raises(ValueError):
        FlopModel(0, 2, 4)
    with pytest.raises(ValueError):
        FlopModel(1, 2.0, 4)


def test_prefill_small_example():
    assert prefill_flops(FlopModel(1, 2, 4), 10).flops == 880
    m = FlopModel(3, 5, 2)
    assert prefill_flops(m, 1).flops == m.c_quad + m.c_tok
    with pytest.raises(ValueError):
        prefill_flops(m, 0)


def test_large_prefill_is_exact_integer():
    f = prefill_flops(BIG, T_LONG).flops
    assert isinstance(f, int)
    assert f == 2 * 32 * 4096 * T_LONG**2 + 12 * 32 * 4096**2 * T_LONG


def test_gen_edge_cases():
    m = FlopModel(2, 8, 4)
    assert gen_flops(m, 0, 50).flops == 0
    assert gen_flops(m, 1, 50).flops == m.c_quad * 50 + m.c_tok
    with pytest.raises(ValueError):
        gen_flops(m, -1, 50)


@given(
    st.integers(1, 8), st.integers(1, 64), st.integers(1, 8), st.integers(0, 300), st.integers(1, 5000)
)
@settings(max_examples=200)
def test_gen_equals_per_token_sum(L, d, r, M, T):
    assert gen_flops(FlopModel(L, d, r), M, T).flops == _gen_oracle(L, d, r, M, T)


@given(st.integers(1, 8), st.integers(1, 64), st.integers(1, 8), st.integers(1, 200), st.integers(0, 50))
@settings(max_examples=200)
def test_qttt_partial_matches_oracle(L, d, r, k, n):
    T = k + 100
    assert qttt_partial_flops(FlopModel(L, d, r), k, T, n).flops == _qttt_oracle(L, d, r, k, T, n)


def test_qttt_zero_steps_and_bounds():
    m = FlopModel(2, 8, 4)
    assert qttt_partial_flops(m, 4, 10, 0).flops == 0
    with pytest.raises(ValueError):
        qttt_partial_flops(m, 11, 10, 1)
    with pytest.raises(ValueError):
        qttt_partial_flops(m, 0, 10, 1)


def test_in_span_terms_matter_when_k_equals_t():
    m = FlopModel(4, 64, 4)
    T = 512
    plain = qttt_partial_flops(m, T, T, 1).flops
    full = qttt_partial_flops(m, T, T, 1, in_span=True).flops
    assert full - plain == 2 * (m.c_quad * T * T + 2 * m.L * T * m.d**2)
    assert relative_gap(full, plain) > 0.3
    # small when k << T (the leftover is the in-span projection term)
    assert relative_gap(
        qttt_partial_flops(BIG, 128, T_LONG, 1, True).flops, qttt_partial_flops(BIG, 128, T_LONG, 1).flops
    ) < 0.05


def test_rule_of_thumb_reported_schedules():
    assert matched_thinking_tokens(BIG, 128, 32, T_LONG) == 8192
    assert matched_thinking_tokens(BIG, 400, 10, T_LONG) == 8000


def test_sixteen_steps_match_half_an_8k_budget():
    # 16 steps at k=128 buys half of an 8K thinking budget under the same rule
    assert matched_thinking_tokens(BIG, 128, 16, T_LONG) == 4096


def test_default_schedule_budget_gap_value():
    q = qttt_partial_flops(BIG, 128, T_LONG, 32).flops
    g = gen_flops(BIG, 8192, T_LONG).flops
    assert q == _qttt_oracle(32, 4096, 4, 128, T_LONG, 32)
    assert g == _gen_oracle(32, 4096, 4, 8192, T_LONG)
    assert relative_gap(g, q) == pytest.approx(0.0637, abs=5e-4)


@pytest.mark.xfail(strict=True, reason="direct evaluation gives a 6.37% gap; the 2Nk rule omits per-token and growing-cache terms")
def test_default_schedule_budget_gap_within_five_percent():
    q = qttt_partial_flops(BIG, 128, T_LONG, 32).flops
    g = gen_flops(BIG, 8192, T_LONG).flops
    assert relative_gap(g, q) <= 0.05


@pytest.mark.parametrize("k,n", [(128, 32), (400, 10)])
def test_exact_solver_close_to_rule_of_thumb(k, n):
    exact = matched_thinking_tokens(BIG, k, n, T_LONG, "exact")
    rule = matched_thinking_tokens(BIG, k, n, T_LONG)
    assert relative_gap(exact, rule) <= 0.10


@given(st.integers(1, 4), st.integers(2, 64), st.integers(1, 4), st.integers(1, 64), st.integers(0, 40))
@settings(max_examples=150)
def test_exact_solver_brackets_budget(L, d, r, k, n):
    m = FlopModel(L, d, r)
    T = 4 * k + 10
    budget = qttt_partial_flops(m, k, T, n).flops
    M = matched_thinking_tokens(m, k, n, T, "exact")
    assert gen_flops(m, M, T).flops <= budget < gen_flops(m, M + 1, T).flops
    # within one per-token quantum
    assert budget - gen_flops(m, M, T).flops < m.c_quad * (T + M) + m.c_tok


def test_unknown_mode():
    with pytest.raises(ValueError):
        matched_thinking_tokens(BIG, 1, 1, 10, "guess")


def test_bon_counts():
    m = FlopModel(2, 16, 4)
    one = gen_flops(m, 50, 200)
    assert matched_bon_trajectories(m, one, 50, 200) == 1
    assert matched_bon_trajectories(m, Budget(0, "zero"), 50, 200) == 1
    n = matched_bon_trajectories(m, Budget(7 * one.flops + 3, "x"), 50, 200)
    assert n == 7
    assert abs(matched_bon_trajectories(m, Budget(14 * one.flops + 6, "x"), 50, 200) - 2 * n) <= 1
    with pytest.raises(ValueError):
        matched_bon_trajectories(m, one, 0, 200)


def test_budget_non_negative():
    with pytest.raises(ValueError):
        Budget(-1, "neg")


_axes = st.sampled_from(["L", "d", "r", "T", "k", "n"])


@given(_axes, st.integers(1, 4), st.integers(1, 32), st.integers(1, 4), st.integers(1, 20), st.integers(0, 10))
@settings(max_examples=200)
def test_monotone_in_every_argument(axis, L, d, r, k, n):
    base = dict(L=L, d=d, r=r, T=3 * k + 5, k=k, n=n)
    bumped = dict(base)
    bumped[axis] += 1

    def costs(p):
        m = FlopModel(p["L"], p["d"], p["r"])
        return (
            prefill_flops(m, p["T"]).flops,
            gen_flops(m, p["n"], p["T"]).flops,
            qttt_partial_flops(m, p["k"], p["T"], p["n"]).flops,
        )

    assert all(b >= a for a, b in zip(costs(base), costs(bumped)))


def test_full_ttt_step_order_of_magnitude():
    assert full_ttt_step_flops(BIG, T_LONG).flops == 3 * prefill_flops(BIG, T_LONG).flops
    tokens = full_ttt_equivalent_tokens(BIG, T_LONG)
    assert 1.2 * T_LONG / 2 <= tokens <= 1.2 * T_LONG * 2


def test_budget_table_fields():
    t = budget_table(32, 4096, 4, T_LONG, 128, 32)
    assert t["T_think_rule_of_thumb"] == 8192
    assert t["qttt_partial"] == _qttt_oracle(32, 4096, 4, 128, T_LONG, 32)
    assert t["gen_vs_qttt_relative_gap"] == pytest.approx(0.0637, abs=5e-4)
