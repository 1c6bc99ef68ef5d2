"""Multi-account transfer logs with exactly one injected anomaly.

A log is an initial balance per account plus a sequence of transfers, each
rendered as::

    [TX004]: Transfer $2925: A=2909 → -16, B=5291 → 8216

(debited account first).  Generation builds a clean log, inserts one
anomalous record at a uniformly random legal position, then re-derives all
later balances from the reported (committed) state.  Removing the inserted
record therefore restores the clean log.

Anomaly realizations:

* ``CALC_ERROR``: a fresh transfer whose reported new balance for one side
  is off by a nonzero offset in [-99, 99].
* ``NEGATIVE_BAL``: a transfer of ``balance + u`` (u in [1, 99]) that drives
  the debited account below zero; arithmetic is correct.
* ``LOST_UPDATE``: one side reports the balance from before that account's
  latest write as its old value (a stale read), then writes ``stale ± amount``.
* ``DUPLICATE_TXN``: the previous record is applied again verbatim (same
  amount, accounts, old and new balances) under a new id.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

from ..numeric import Rng, derive_seed

CALC_ERROR = "CALC_ERROR"
NEGATIVE_BAL = "NEGATIVE_BAL"
LOST_UPDATE = "LOST_UPDATE"
DUPLICATE_TXN = "DUPLICATE_TXN"
NONE = "NONE"
BUG_TYPES = (CALC_ERROR, NEGATIVE_BAL, LOST_UPDATE, DUPLICATE_TXN)
ALL_TYPES = BUG_TYPES + (NONE,)

RULE_TO_BUG = {
    "arithmetic": CALC_ERROR,
    "conservation": CALC_ERROR,
    "non-negative": NEGATIVE_BAL,
    "lost-update": LOST_UPDATE,
    "duplicate": DUPLICATE_TXN,
}

DEFAULT_OPS_RANGE = (25, 500)
AMOUNT_RANGE = (1, 999)
INIT_RANGE = (1000, 9000)
MAX_RETRIES = 32
ARROW = "→"


class InjectionError(RuntimeError):
    pass


class LogParseError(ValueError):
    def __init__(self, line_no: int, line: str, reason: str):
        super().__init__(f"line {line_no}: {reason}: {line!r}")
        self.line_no = line_no


@dataclass(frozen=True)
class Transfer:
    tx_id: str
    amount: int
    src: str
    dst: str
    src_old: int
    src_new: int
    dst_old: int
    dst_new: int

    def render(self) -> str:
        return (
            f"[{self.tx_id}]: Transfer ${self.amount}: "
            f"{self.src}={self.src_old} {ARROW} {self.src_new}, "
            f"{self.dst}={self.dst_old} {ARROW} {self.dst_new}"
        )

    @property
    def signature(self) -> tuple:
        return (self.amount, self.src, self.dst, self.src_old, self.dst_old)


@dataclass(frozen=True)
class TransactionTask:
    accounts: dict[str, int]
    ops: tuple[Transfer, ...]
    bug_type: str = NONE
    bug_tx: str | None = None
    seed: int | None = None
    injected_index: int | None = None

    @property
    def n_ops(self) -> int:
        return len(self.ops)

    @property
    def total(self) -> int:
        return sum(self.accounts.values())

    def initial_state_line(self) -> str:
        state = {f"account_{name}": bal for name, bal in self.accounts.items()}
        state["total"] = self.total
        return json.dumps(state)

    def lines(self) -> list[str]:
        return [op.render() for op in self.ops]

    def render_log(self) -> str:
        return "\n".join([f"Initial state: {self.initial_state_line()}", *self.lines()])

    def op_index(self, tx_id: str) -> int:
        for i, op in enumerate(self.ops):
            if op.tx_id == tx_id:
                return i
        raise KeyError(tx_id)


@dataclass(frozen=True)
class Verdict:
    valid: bool
    violated_rule: str | None = None
    first_offender: str | None = None

    def __post_init__(self):
        if self.valid != (self.violated_rule is None):
            raise ValueError("valid must hold exactly when no rule is violated")
        if (self.first_offender is None) != self.valid:
            raise ValueError("first_offender is set iff the log is invalid")

    @property
    def bug_type(self) -> str:
        return NONE if self.valid else RULE_TO_BUG[self.violated_rule]


def account_names(n: int) -> list[str]:
    names = []
    for i in range(n):
        s = ""
        i += 1
        while i:
            i, rem = divmod(i - 1, 26)
            s = chr(ord("A") + rem) + s
        names.append(s)
    return names


def tx_id(i: int, n_ops: int) -> str:
    return f"TX{i:0{max(3, len(str(n_ops)))}d}"


# -- replay / verification ------------------------------------------------------

_TX_RE = re.compile(
    r"^\s*\[?(?P<id>TX\d+)\]?\s*:\s*Transfer\s+\$(?P<amt>\d+)\s*:\s*"
    r"(?P<a>[A-Z]+)\s*=\s*(?P<ao>-?\d+)\s*(?:→|->)\s*(?P<an>-?\d+)\s*,\s*"
    r"(?P<b>[A-Z]+)\s*=\s*(?P<bo>-?\d+)\s*(?:→|->)\s*(?P<bn>-?\d+)\s*$"
)
_INIT_RE = re.compile(r"^\s*Initial state:\s*(?P<json>\{.*\})\s*$")


def parse_log(text: str) -> tuple[dict[str, int], list[Transfer]]:
    """Parse an ``Initial state:`` line followed by transfer lines."""
    accounts: dict[str, int] | None = None
    ops: list[Transfer] = []
    for no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        m = _INIT_RE.match(line)
        if m:
            try:
                state = json.loads(m["json"])
            except json.JSONDecodeError as exc:
                raise LogParseError(no, line, f"bad initial state ({exc.msg})") from None
            accounts = {
                k.removeprefix("account_"): int(v) for k, v in state.items() if k.startswith("account_")
            }
            if "total" in state and int(state["total"]) != sum(accounts.values()):
                raise LogParseError(no, line, "stated total disagrees with the balances")
            continue
        m = _TX_RE.match(line)
        if not m:
            raise LogParseError(no, line, "not a transfer record")
        if accounts is None:
            raise LogParseError(no, line, "transfer before the initial state")
        for name in (m["a"], m["b"]):
            if name not in accounts:
                raise LogParseError(no, line, f"unknown account {name}")
        if m["a"] == m["b"]:
            raise LogParseError(no, line, "transfer to the same account")
        ops.append(
            Transfer(
                m["id"], int(m["amt"]), m["a"], m["b"],
                int(m["ao"]), int(m["an"]), int(m["bo"]), int(m["bn"]),
            )
        )
    if accounts is None:
        raise LogParseError(0, "", "missing initial state")
    return accounts, ops


def verify_records(accounts: dict[str, int], ops: Sequence[Transfer]) -> Verdict:
    """Replay from the initial state and report the first rule violation.

    Per record, checks run in order: duplicate of an earlier record, stale
    old balance (lost update), arithmetic, negative balance, conservation.
    The committed state follows the reported new balances.
    """
    committed = dict(accounts)
    total = sum(accounts.values())
    seen: set[tuple] = set()
    for op in ops:
        if op.signature in seen:
            return Verdict(False, "duplicate", op.tx_id)
        if op.src_old != committed[op.src] or op.dst_old != committed[op.dst]:
            return Verdict(False, "lost-update", op.tx_id)
        if op.src_new != op.src_old - op.amount or op.dst_new != op.dst_old + op.amount:
            return Verdict(False, "arithmetic", op.tx_id)
        if op.src_new < 0 or op.dst_new < 0:
            return Verdict(False, "non-negative", op.tx_id)
        committed[op.src] = op.src_new
        committed[op.dst] = op.dst_new
        if sum(committed.values()) != total:
            return Verdict(False, "conservation", op.tx_id)
        seen.add(op.signature)
    return Verdict(True)


def verify_transaction_log(task: TransactionTask | str) -> Verdict:
    """Verdict for a task or for raw log text (parsed first, so text is the source of truth)."""
    text = task if isinstance(task, str) else task.render_log()
    accounts, ops = parse_log(text)
    return verify_records(accounts, ops)


# -- construction -----------------------------------------------------------------


def rederive(accounts: dict[str, int], plan: Iterable[tuple[int, str, str]]) -> list[Transfer]:
    """Consistent transfers for ``(amount, src, dst)`` triples from ``accounts``."""
    state = dict(accounts)
    plan = list(plan)
    out = []
    for i, (amount, src, dst) in enumerate(plan, start=1):
        out.append(
            Transfer(tx_id(i, len(plan)), amount, src, dst,
                     state[src], state[src] - amount, state[dst], state[dst] + amount)
        )
        state[src] -= amount
        state[dst] += amount
    return out


def transaction_task_from_ops(
    accounts: dict[str, int],
    transfers: Sequence[tuple[int, str, str]],
    bug_type: str = NONE,
    bug_tx: str | None = None,
) -> TransactionTask:
    """Task from explicit ``(amount, src, dst)`` transfers with consistent arithmetic."""
    ops = tuple(rederive(accounts, transfers))
    return TransactionTask(dict(accounts), ops, bug_type, bug_tx)


def _clean_plan(rng: Rng, names: list[str], balances: dict[str, int], n: int) -> list[tuple[int, str, str]]:
    state = dict(balances)
    plan = []
    lo, hi = AMOUNT_RANGE
    for _ in range(n):
        amount = rng.integers(lo, hi + 1)
        src = rng.choice(names)
        if state[src] < amount:
            able = [a for a in names if state[a] >= amount]
            if not able:
                amount = rng.integers(lo, max(state.values()) + 1)
                able = [a for a in names if state[a] >= amount]
            src = rng.choice(able)
        dst = rng.choice([a for a in names if a != src])
        plan.append((amount, src, dst))
        state[src] -= amount
        state[dst] += amount
    return plan


def _apply(state: dict[str, int], op: Transfer) -> None:
    state[op.src] = op.src_new
    state[op.dst] = op.dst_new


def _continue(state: dict[str, int], plan, start_id: int, n_ops: int) -> list[Transfer]:
    out = []
    for i, (amount, src, dst) in enumerate(plan, start=start_id):
        op = Transfer(tx_id(i, n_ops), amount, src, dst,
                      state[src], state[src] - amount, state[dst], state[dst] + amount)
        _apply(state, op)
        out.append(op)
    return out


def _inject(rng: Rng, bug_type: str, names, prefix: list[Transfer], state: dict[str, int],
            history: dict[str, list[int]], ident: str) -> Transfer:
    lo, hi = AMOUNT_RANGE
    if bug_type == DUPLICATE_TXN:
        return replace(prefix[-1], tx_id=ident)
    if bug_type == NEGATIVE_BAL:
        src = rng.choice(names)
        dst = rng.choice([a for a in names if a != src])
        amount = max(state[src], 0) + rng.integers(1, 100)
        return Transfer(ident, amount, src, dst,
                        state[src], state[src] - amount, state[dst], state[dst] + amount)
    if bug_type == CALC_ERROR:
        src = rng.choice([a for a in names if state[a] >= lo])
        dst = rng.choice([a for a in names if a != src])
        amount = rng.integers(lo, min(hi, state[src]) + 1)
        offset = rng.integers(1, 100) * (1 if rng.random() < 0.5 else -1)
        src_new, dst_new = state[src] - amount, state[dst] + amount
        if rng.random() < 0.5:
            src_new += offset
        else:
            dst_new += offset
        return Transfer(ident, amount, src, dst, state[src], src_new, state[dst], dst_new)
    if bug_type == LOST_UPDATE:
        # stale side: an account that has been written at least once
        written = [a for a in names if len(history[a]) >= 2]
        stale = rng.choice(written)
        stale_old = history[stale][-2]
        other = rng.choice([a for a in names if a != stale])
        if rng.random() < 0.5 and stale_old >= lo:
            src, dst = stale, other
            amount = rng.integers(lo, min(hi, stale_old) + 1)
            return Transfer(ident, amount, src, dst, stale_old, stale_old - amount,
                            state[dst], state[dst] + amount)
        if state[other] < lo:
            raise InjectionError("no funds to move into the stale account")
        src, dst = other, stale
        amount = rng.integers(lo, min(hi, state[src]) + 1)
        return Transfer(ident, amount, src, dst, state[src], state[src] - amount,
                        stale_old, stale_old + amount)
    raise ValueError(f"unknown bug type {bug_type!r}")


def _try_generate(n_ops: int, n_accounts: int, bug_type: str, rng: Rng) -> TransactionTask:
    names = account_names(n_accounts)
    balances = {a: rng.integers(INIT_RANGE[0], INIT_RANGE[1] + 1) for a in names}
    if bug_type == NONE:
        return TransactionTask(balances, tuple(rederive(balances, _clean_plan(rng, names, balances, n_ops))))

    plan = _clean_plan(rng, names, balances, n_ops - 1)
    if not verify_records(balances, rederive(balances, plan)).valid:
        raise InjectionError("clean base log is not itself clean")
    first_legal = 1 if bug_type in (DUPLICATE_TXN, LOST_UPDATE) else 0
    if n_ops - 1 < first_legal:
        raise InjectionError(f"{bug_type} needs at least {first_legal + 1} operations")
    j = rng.integers(first_legal, n_ops)  # 0-based index of the injected record

    state = dict(balances)
    history = {a: [b] for a, b in balances.items()}
    prefix = []
    for op in _continue(state, plan[:j], 1, n_ops):
        prefix.append(op)
        history[op.src].append(op.src_new)
        history[op.dst].append(op.dst_new)
    bad = _inject(rng, bug_type, names, prefix, state, history, tx_id(j + 1, n_ops))
    _apply(state, bad)
    suffix = _continue(state, plan[j:], j + 2, n_ops)
    ops = tuple(prefix + [bad] + suffix)
    return TransactionTask(balances, ops, bug_type, bad.tx_id, injected_index=j)


def gen_transaction_task(
    n_ops: int,
    n_accounts: int = 2,
    bug_type: str = NONE,
    seed: int = 0,
    allow_wide: bool = False,
) -> TransactionTask:
    """Generate a log of ``n_ops`` records with one anomaly of ``bug_type``.

    Candidates whose replay does not attribute exactly the injected
    ``(bug_type, tx)`` (an accidental earlier violation) are regenerated
    with the next sub-seed, up to ``MAX_RETRIES`` times.
    """
    lo, hi = DEFAULT_OPS_RANGE
    if not allow_wide and not lo <= n_ops <= hi:
        raise ValueError(f"n_ops={n_ops} outside [{lo}, {hi}]; pass allow_wide=True")
    if n_ops < 1:
        raise ValueError("n_ops must be >= 1")
    if n_accounts < 2:
        raise ValueError("need at least two accounts")
    if bug_type not in ALL_TYPES:
        raise ValueError(f"unknown bug type {bug_type!r}")
    for attempt in range(MAX_RETRIES):
        rng = Rng(derive_seed(seed, n_ops, n_accounts, ALL_TYPES.index(bug_type), attempt))
        try:
            task = _try_generate(n_ops, n_accounts, bug_type, rng)
        except InjectionError:
            continue
        verdict = verify_records(task.accounts, task.ops)
        if verdict.bug_type == bug_type and verdict.first_offender == task.bug_tx:
            return replace(task, seed=seed)
    raise InjectionError(f"could not inject {bug_type} into {n_ops} ops after {MAX_RETRIES} attempts")


def remove_injection(task: TransactionTask) -> TransactionTask:
    """The log with the anomalous record removed and later balances re-derived."""
    if task.bug_tx is None:
        return task
    j = task.op_index(task.bug_tx)
    plan = [(op.amount, op.src, op.dst) for i, op in enumerate(task.ops) if i != j]
    return transaction_task_from_ops(task.accounts, plan)


OVERDRAFT_EXAMPLE_ACCOUNTS = {"A": 4000, "B": 4200}
OVERDRAFT_EXAMPLE_TRANSFERS = [(107, "A", "B"), (204, "A", "B"), (780, "A", "B"), (2925, "A", "B"), (699, "B", "A")]


def overdraft_example_task() -> TransactionTask:
    """Five-record two-account log whose fourth transfer overdraws A to -16."""
    return transaction_task_from_ops(
        OVERDRAFT_EXAMPLE_ACCOUNTS, OVERDRAFT_EXAMPLE_TRANSFERS, NEGATIVE_BAL, "TX004"
    )
