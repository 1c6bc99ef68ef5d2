from .code_needle import CodeNeedleTask, NEEDLES, count_bug_lines, gen_code_needle_task
from .dataset import (
    CODE,
    TRANSACTIONS,
    TaskRecord,
    read_jsonl,
    record_from_task,
    transaction_task_from_record,
    write_jsonl,
)
from .render import RenderedTask, Score, render_task_tokens, score_answer
from .transactions import (
    ALL_TYPES,
    BUG_TYPES,
    CALC_ERROR,
    DUPLICATE_TXN,
    LOST_UPDATE,
    NEGATIVE_BAL,
    NONE,
    InjectionError,
    LogParseError,
    TransactionTask,
    Transfer,
    Verdict,
    overdraft_example_task,
    gen_transaction_task,
    parse_log,
    remove_injection,
    transaction_task_from_ops,
    verify_records,
    verify_transaction_log,
)

__all__ = [
    "CodeNeedleTask",
    "NEEDLES",
    "count_bug_lines",
    "gen_code_needle_task",
    "CODE",
    "TRANSACTIONS",
    "TaskRecord",
    "read_jsonl",
    "record_from_task",
    "transaction_task_from_record",
    "write_jsonl",
    "RenderedTask",
    "Score",
    "render_task_tokens",
    "score_answer",
    "ALL_TYPES",
    "BUG_TYPES",
    "CALC_ERROR",
    "DUPLICATE_TXN",
    "LOST_UPDATE",
    "NEGATIVE_BAL",
    "NONE",
    "InjectionError",
    "LogParseError",
    "TransactionTask",
    "Transfer",
    "Verdict",
    "overdraft_example_task",
    "gen_transaction_task",
    "parse_log",
    "remove_injection",
    "transaction_task_from_ops",
    "verify_records",
    "verify_transaction_log",
]
