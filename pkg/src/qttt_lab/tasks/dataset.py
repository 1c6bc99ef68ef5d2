"""Task records and the JSONL dataset format.

One task per line, keys in this order::

    {"id": "transactions-25-s3-NEGATIVE_BAL", "kind": "transactions",
     "length_param": 25, "context_text": "Initial state: {...}\\n[TX001]: ...",
     "question_text": "...", "answer": {"bug_type": "NEGATIVE_BAL",
     "bug_location": "TX004"}, "seed": 3}

Code tasks use ``"kind": "code"``, ``length_param`` = number of lines and
``"answer": {"file": "model.py", "line": 10345, "description": "..."}``.
Files are UTF-8 with ``\\n`` line endings; reading and re-writing a file
reproduces it byte for byte.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Union

from .code_needle import CodeNeedleTask
from .transactions import NONE, TransactionTask, parse_log, verify_records

TRANSACTIONS = "transactions"
CODE = "code"
KINDS = (TRANSACTIONS, CODE)

TX_QUESTION = (
    "Question: which rule breaks first, and at which transaction? "
    'Reply as {"bug_type": ..., "bug_location": ...}.'
)
CODE_QUESTION = "Question: which line contains the bug? Reply as file:L<number>."

_FIELDS = ("id", "kind", "length_param", "context_text", "question_text", "answer", "seed")


@dataclass(frozen=True)
class TaskRecord:
    id: str
    kind: str
    length_param: int
    context_text: str
    question_text: str
    answer: dict
    seed: int

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")

    def to_dict(self) -> dict:
        return {f: getattr(self, f) for f in _FIELDS}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False)

    @classmethod
    def from_dict(cls, data: dict) -> "TaskRecord":
        missing = [f for f in _FIELDS if f not in data]
        if missing:
            raise ValueError(f"task record is missing {missing}")
        return cls(**{f: data[f] for f in _FIELDS})

    @property
    def answer_text(self) -> str:
        if self.kind == TRANSACTIONS:
            return json.dumps({k: self.answer[k] for k in ("bug_type", "bug_location")})
        return f"{self.answer['file']}:L{self.answer['line']}"

    @property
    def target_line(self) -> str | None:
        """Prefix of the context line holding the evidence, if any."""
        if self.kind == TRANSACTIONS:
            loc = self.answer.get("bug_location")
            return None if loc is None else f"[{loc}]:"
        return f"L{self.answer['line']}: "


Task = Union[TransactionTask, CodeNeedleTask]


def record_from_task(task: Task | TaskRecord) -> TaskRecord:
    if isinstance(task, TaskRecord):
        return task
    if isinstance(task, TransactionTask):
        return TaskRecord(
            id=f"{TRANSACTIONS}-{task.n_ops}-s{task.seed}-{task.bug_type}",
            kind=TRANSACTIONS,
            length_param=task.n_ops,
            context_text=task.render_log(),
            question_text=TX_QUESTION,
            answer={"bug_type": task.bug_type, "bug_location": task.bug_tx},
            seed=task.seed if task.seed is not None else -1,
        )
    if isinstance(task, CodeNeedleTask):
        return TaskRecord(
            id=f"{CODE}-{task.n_lines}-s{task.seed}",
            kind=CODE,
            length_param=task.n_lines,
            context_text=task.render_file(),
            question_text=f"Bug: {task.needle.description}.\n{CODE_QUESTION}",
            answer={"file": task.file_name, "line": task.needle_line, "description": task.needle.description},
            seed=task.seed,
        )
    raise TypeError(f"not a task: {type(task).__name__}")


def transaction_task_from_record(record: TaskRecord) -> TransactionTask:
    """Rebuild a transaction task from its text; the answer supplies the label."""
    if record.kind != TRANSACTIONS:
        raise ValueError("not a transaction record")
    accounts, ops = parse_log(record.context_text)
    task = TransactionTask(
        accounts, tuple(ops), record.answer["bug_type"], record.answer["bug_location"], record.seed
    )
    if task.bug_type == NONE and not verify_records(accounts, ops).valid:
        raise ValueError(f"record {record.id} is labelled clean but fails replay")
    return task


def write_jsonl(path: str | Path, records: Iterable[TaskRecord | Task]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(record_from_task(rec).to_json() + "\n")
            n += 1
    return n


def read_jsonl(path: str | Path) -> list[TaskRecord]:
    out = []
    with open(path, encoding="utf-8", newline="\n") as fh:
        for no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(TaskRecord.from_dict(json.loads(line)))
            except (json.JSONDecodeError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{no}: {exc}") from None
    return out
