import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qttt_lab.model import ANS, BOS, EOS
from qttt_lab.tasks import (
    ALL_TYPES,
    BUG_TYPES,
    CALC_ERROR,
    DUPLICATE_TXN,
    LOST_UPDATE,
    NEEDLES,
    NEGATIVE_BAL,
    NONE,
    LogParseError,
    TaskRecord,
    Transfer,
    Verdict,
    count_bug_lines,
    overdraft_example_task,
    gen_code_needle_task,
    gen_transaction_task,
    parse_log,
    read_jsonl,
    record_from_task,
    remove_injection,
    render_task_tokens,
    score_answer,
    transaction_task_from_ops,
    transaction_task_from_record,
    verify_records,
    verify_transaction_log,
    write_jsonl,
)
from qttt_lab.tasks.code_needle import FIRST_NEEDLE_LINE

OVERDRAFT_LINES = [
    "[TX001]: Transfer $107: A=4000 → 3893, B=4200 → 4307",
    "[TX002]: Transfer $204: A=3893 → 3689, B=4307 → 4511",
    "[TX003]: Transfer $780: A=3689 → 2909, B=4511 → 5291",
    "[TX004]: Transfer $2925: A=2909 → -16, B=5291 → 8216",
    "[TX005]: Transfer $699: B=8216 → 7517, A=-16 → 683",
]


def _replay_oracle(accounts, ops):
    """Independent replay: first (type, tx) by a plain loop over the raw records."""
    bal = dict(accounts)
    total = sum(bal.values())
    history = []
    for op in ops:
        key = (op.amount, op.src, op.dst, op.src_old, op.dst_old)
        if key in history:
            return DUPLICATE_TXN, op.tx_id
        if (op.src_old, op.dst_old) != (bal[op.src], bal[op.dst]):
            return LOST_UPDATE, op.tx_id
        if op.src_old - op.src_new != op.amount or op.dst_new - op.dst_old != op.amount:
            return CALC_ERROR, op.tx_id
        if min(op.src_new, op.dst_new) < 0:
            return NEGATIVE_BAL, op.tx_id
        bal[op.src], bal[op.dst] = op.src_new, op.dst_new
        if sum(bal.values()) != total:
            return CALC_ERROR, op.tx_id
        history.append(key)
    return NONE, None


# -- overdraft example ------------------------------------------------------------------


def test_overdraft_example_lines_verbatim():
    task = overdraft_example_task()
    assert task.accounts == {"A": 4000, "B": 4200} and task.total == 8200
    assert task.lines() == OVERDRAFT_LINES
    assert json.loads(task.initial_state_line()) == {"account_A": 4000, "account_B": 4200, "total": 8200}


def test_overdraft_example_verdict():
    v = verify_transaction_log(overdraft_example_task())
    assert (v.valid, v.violated_rule, v.first_offender, v.bug_type) == (False, "non-negative", "TX004", NEGATIVE_BAL)


def test_overdraft_example_model_output_scores_correct():
    ans = '{"bug_type": NEGATIVE_BAL, "bug_location": TX004}'
    assert score_answer(overdraft_example_task(), ans).correct


def test_overdraft_render_contains_lines():
    r = render_task_tokens(overdraft_example_task())
    for line in OVERDRAFT_LINES:
        assert line in r.prompt_text


# -- generator / oracle ----------------------------------------------------------------


@pytest.mark.parametrize("n_ops", [25, 100, 500])
@pytest.mark.parametrize("bug", BUG_TYPES)
def test_round_trip_250_seeds(n_ops, bug):
    for seed in range(250):
        task = gen_transaction_task(n_ops, 2, bug, seed)
        assert task.n_ops == n_ops
        v = verify_transaction_log(task)
        assert (v.bug_type, v.first_offender) == (bug, task.bug_tx), (seed, n_ops, bug)


@pytest.mark.parametrize("n_ops", [25, 100, 500])
def test_clean_logs_always_valid(n_ops):
    for seed in range(250):
        task = gen_transaction_task(n_ops, 2, NONE, seed)
        assert verify_transaction_log(task).valid and task.bug_tx is None


@given(st.integers(0, 2**31), st.sampled_from(ALL_TYPES), st.integers(2, 5), st.integers(25, 120))
@settings(max_examples=150, deadline=None)
def test_verifier_agrees_with_replay_oracle(seed, bug, n_accounts, n_ops):
    task = gen_transaction_task(n_ops, n_accounts, bug, seed)
    assert _replay_oracle(task.accounts, task.ops) == (bug, task.bug_tx)
    assert task.bug_tx is None or task.op_index(task.bug_tx) == task.injected_index


def test_tx_ids_sequential_and_formatted():
    task = gen_transaction_task(120, 3, LOST_UPDATE, 4)
    assert [op.tx_id for op in task.ops] == [f"TX{i:03d}" for i in range(1, 121)]


def test_generation_is_deterministic():
    a = gen_transaction_task(60, 3, CALC_ERROR, 11)
    b = gen_transaction_task(60, 3, CALC_ERROR, 11)
    assert a.render_log() == b.render_log()
    assert a.render_log() != gen_transaction_task(60, 3, CALC_ERROR, 12).render_log()


@given(st.integers(0, 2**31), st.integers(2, 6), st.integers(25, 200))
@settings(max_examples=100, deadline=None)
def test_clean_log_conserves_total_at_every_prefix(seed, n_accounts, n_ops):
    task = gen_transaction_task(n_ops, n_accounts, NONE, seed)
    bal = dict(task.accounts)
    for op in task.ops:
        bal[op.src], bal[op.dst] = op.src_new, op.dst_new
        assert sum(bal.values()) == task.total
        assert 1 <= op.amount <= 999 and min(bal.values()) >= 0


@given(st.integers(0, 2**31), st.sampled_from(BUG_TYPES), st.integers(25, 150))
@settings(max_examples=150, deadline=None)
def test_removing_the_injection_restores_validity(seed, bug, n_ops):
    task = gen_transaction_task(n_ops, 2, bug, seed)
    fixed = remove_injection(task)
    assert fixed.n_ops == n_ops - 1
    assert verify_transaction_log(fixed).valid


def test_initial_balances_in_range():
    for seed in range(50):
        task = gen_transaction_task(25, 4, NONE, seed)
        assert all(1000 <= b <= 9000 for b in task.accounts.values())


@pytest.mark.parametrize("kwargs", [dict(n_ops=24), dict(n_ops=501), dict(n_accounts=1), dict(bug_type="TYPO")])
def test_generator_argument_errors(kwargs):
    args = dict(n_ops=30, n_accounts=2, bug_type=NONE, seed=0) | kwargs
    with pytest.raises(ValueError):
        gen_transaction_task(**args)


def test_wide_range_needs_flag():
    assert gen_transaction_task(4, 2, CALC_ERROR, 0, allow_wide=True).n_ops == 4


def test_hand_built_calc_error():
    task = transaction_task_from_ops({"A": 1000, "B": 1000}, [(10, "A", "B"), (20, "B", "A"), (30, "A", "B")])
    ops = list(task.ops)
    o = ops[1]
    ops[1] = Transfer(o.tx_id, o.amount, o.src, o.dst, o.src_old, o.src_old - o.amount + 1, o.dst_old, o.dst_new)
    v = verify_records(task.accounts, ops)
    assert (v.violated_rule, v.first_offender) == ("arithmetic", "TX002")


def test_verdict_invariants():
    with pytest.raises(ValueError):
        Verdict(True, "duplicate", None)
    with pytest.raises(ValueError):
        Verdict(False, "duplicate", None)


def test_parse_error_reports_line_number():
    text = overdraft_example_task().render_log().split("\n")
    text[3] = "[TX003]: Transfer 780 from A to B"
    with pytest.raises(LogParseError) as info:
        parse_log("\n".join(text))
    assert info.value.line_no == 4


def test_parse_tolerates_irregular_spacing():
    text = 'Initial state: {"account_A": 4000, "account_B": 4200, "total": 8200}\n'
    text += "[TX004]: Transfer $2925:A=2909 → -16,  B=5291 → 8216 \n"
    accounts, ops = parse_log(text)
    assert ops[0].src_new == -16 and ops[0].dst_new == 8216


# -- code needles ---------------------------------------------------------------------------


def test_five_line_task_has_one_needle():
    task = gen_code_needle_task(5, 0)
    assert task.n_lines == 5 and count_bug_lines(task) == 1
    with pytest.raises(ValueError):
        gen_code_needle_task(4, 0)


@pytest.mark.parametrize("seed", range(10))
def test_needle_fixed_across_lengths(seed):
    small, big = gen_code_needle_task(5, seed), gen_code_needle_task(10000, seed)
    assert small.needle == big.needle
    assert small.needle_line == big.needle_line
    assert small.lines[small.needle_index][1] == big.lines[big.needle_index][1]
    # distractors at the same line number agree: only the window grows
    big_map = dict(big.lines)
    assert all(big_map[no] == text for no, text in small.lines)


@given(st.integers(0, 2**31), st.integers(5, 800))
@settings(max_examples=100, deadline=None)
def test_lines_contiguous_and_single_needle(seed, n):
    task = gen_code_needle_task(n, seed)
    nos = [no for no, _ in task.lines]
    assert nos == list(range(nos[0], nos[0] + n))
    assert count_bug_lines(task) == 1
    assert task.needle_line >= FIRST_NEEDLE_LINE
    assert task.needle.matches(task.lines[task.needle_index][1])


def test_predicate_scan_of_long_files():
    for seed in range(len(NEEDLES) * 2):
        assert count_bug_lines(gen_code_needle_task(10000, seed)) == 1


def test_every_needle_kind_is_used():
    assert {gen_code_needle_task(5, s).needle.name for s in range(200)} == {n.name for n in NEEDLES}


def test_code_scorer_on_ground_truth():
    for seed in range(20):
        task = gen_code_needle_task(50, seed)
        assert score_answer(task, task.answer).correct
        assert score_answer(task, f"The bug is on L{task.needle_line}.").correct
        assert not score_answer(task, f"model.py:L{task.needle_line + 1}").correct
        assert not score_answer(task, f"other.py:L{task.needle_line}").correct


# -- scoring ---------------------------------------------------------------------------------


@pytest.mark.parametrize(
    "text,correct",
    [
        ('{"bug_type": "NEGATIVE_BAL", "bug_location": "TX004"}', True),
        ('  {"bug_type" : negative_bal , "bug_location":tx004 }', True),
        ("After replaying, A goes below zero. Answer: NEGATIVE_BAL at TX004.", True),
        ('{"bug_type": "NEGATIVE_BAL", "bug_location": "TX005"}', False),
        ('{"bug_type": "CALC_ERROR", "bug_location": "TX004"}', False),
        ('{"bug_type": "NEGATIVE_BAL", "bug_location": "TX4"}', False),
        ("no idea", False),
        ("NEGATIVE_BAL or CALC_ERROR at TX004", False),
    ],
)
def test_transaction_scoring_fixtures(text, correct):
    s = score_answer(overdraft_example_task(), text)
    assert s.correct is correct
    if not correct:
        assert s.reason


def test_clean_task_scoring():
    task = gen_transaction_task(25, 2, NONE, 0)
    assert score_answer(task, '{"bug_type": "NONE", "bug_location": null}').correct
    assert not score_answer(task, '{"bug_type": "CALC_ERROR", "bug_location": "TX001"}').correct


def test_scorer_accepts_own_answer_text():
    for bug in ALL_TYPES:
        task = gen_transaction_task(30, 2, bug, 5)
        assert score_answer(task, record_from_task(task).answer_text).correct


# -- dataset / rendering -----------------------------------------------------------------------


def test_jsonl_round_trip_is_bit_exact(tmp_path):
    tasks = [gen_transaction_task(25, 2, b, s) for b in ALL_TYPES for s in range(3)]
    tasks += [gen_code_needle_task(40, s) for s in range(3)]
    path = tmp_path / "d.jsonl"
    assert write_jsonl(path, tasks) == len(tasks)
    records = read_jsonl(path)
    again = tmp_path / "e.jsonl"
    write_jsonl(again, records)
    assert path.read_bytes() == again.read_bytes()
    assert records == [record_from_task(t) for t in tasks]
    assert list(json.loads(path.read_text(encoding="utf-8").splitlines()[0])) == [
        "id", "kind", "length_param", "context_text", "question_text", "answer", "seed"
    ]


def test_record_rebuilds_task():
    task = gen_transaction_task(40, 3, DUPLICATE_TXN, 2)
    back = transaction_task_from_record(record_from_task(task))
    assert back.render_log() == task.render_log() and back.bug_tx == task.bug_tx


def test_bad_jsonl_line(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"id": 1}\n', encoding="utf-8")
    with pytest.raises(ValueError):
        read_jsonl(p)
    with pytest.raises(ValueError):
        TaskRecord("x", "poem", 1, "", "", {}, 0)


@pytest.mark.parametrize("style", ["full", "compact"])
def test_render_is_deterministic_and_framed(style):
    task = gen_transaction_task(25, 2, CALC_ERROR, 1)
    a, b = render_task_tokens(task, style), render_task_tokens(task, style)
    assert a == b
    assert a.tokens[0] == BOS and a.prompt_tokens[-1] == ANS and a.tokens[-1] == EOS
    assert bytes(a.prompt_tokens[1:-1]) == a.prompt_bytes()
    assert bytes(a.answer_tokens[:-1]).decode() == a.answer_text


def test_targets_cover_the_offending_line():
    task = gen_transaction_task(25, 2, LOST_UPDATE, 3)
    r = render_task_tokens(task)
    line = bytes(r.tokens[i] for i in r.target_positions).decode()
    assert line == task.ops[task.injected_index].render()
    assert render_task_tokens(gen_transaction_task(25, 2, NONE, 3)).target_positions == ()


def test_code_targets():
    task = gen_code_needle_task(30, 7)
    r = render_task_tokens(task, "compact")
    line = bytes(r.tokens[i] for i in r.target_positions).decode()
    assert line == f"L{task.needle_line}: {task.needle.line}"


def test_unknown_style():
    with pytest.raises(ValueError):
        render_task_tokens(overdraft_example_task(), "poetry")


def test_length_sweep_grows_monotonically():
    counts = [len(render_task_tokens(gen_transaction_task(n, 2, CALC_ERROR, 0)).prompt_tokens)
              for n in (25, 50, 100, 250, 500)]
    assert counts == sorted(counts) and len(set(counts)) == 5
    assert 100 <= counts[0] < 10_000 and 10_000 <= counts[-1] < 100_000
    for n, c in zip((25, 50, 100, 250, 500), counts):
        print(f"n_ops={n}: {c} prompt tokens")
