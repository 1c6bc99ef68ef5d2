"""Byte-level prompt rendering and tolerant answer scoring."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import PurePosixPath

from ..model.config import ANS, BOS, EOS
from .dataset import CODE, TRANSACTIONS, Task, TaskRecord, record_from_task
from .transactions import ALL_TYPES, NONE

STYLES = ("full", "compact")

TX_HEADER = (
    "Task: audit the transfer log below and report its first bug.\n"
    "Rules: the total never changes; no balance drops below 0; "
    "each new balance equals old minus or plus the amount.\n"
    "Bug types: CALC_ERROR, NEGATIVE_BAL, LOST_UPDATE, DUPLICATE_TXN.\n"
)
CODE_HEADER = "Task: locate the buggy line in the file below.\n"


@dataclass(frozen=True)
class RenderedTask:
    """Token form of a task: ``BOS prompt ANS answer EOS``.

    ``target_positions`` index ``tokens`` and cover the bytes of the context
    line holding the evidence (empty for clean logs).
    """

    prompt_text: str
    answer_text: str
    prompt_tokens: tuple[int, ...]
    answer_tokens: tuple[int, ...]
    target_positions: tuple[int, ...] = field(default=())

    @property
    def tokens(self) -> tuple[int, ...]:
        return self.prompt_tokens + self.answer_tokens

    @property
    def prompt_len(self) -> int:
        return len(self.prompt_tokens)

    @property
    def answer_marker_position(self) -> int:
        return len(self.prompt_tokens) - 1

    def prompt_bytes(self) -> bytes:
        return self.prompt_text.encode("utf-8")


def _header(kind: str, style: str) -> str:
    if style == "compact":
        return ""
    return TX_HEADER if kind == TRANSACTIONS else CODE_HEADER


def render_task_tokens(task: Task | TaskRecord, prompt_style: str = "full") -> RenderedTask:
    """Deterministic ``header + context + question`` followed by the answer marker.

    ``compact`` drops the header so toy-scale contexts stay short.
    """
    if prompt_style not in STYLES:
        raise ValueError(f"prompt_style must be one of {STYLES}")
    rec = record_from_task(task)
    head = _header(rec.kind, prompt_style) + rec.context_text + "\n"
    prompt = head + rec.question_text + "\n"
    prompt_b = prompt.encode("utf-8")
    prompt_tokens = (BOS, *prompt_b, ANS)
    answer_tokens = (*rec.answer_text.encode("utf-8"), EOS)

    targets: tuple[int, ...] = ()
    prefix = rec.target_line
    if prefix is not None:
        ctx_start = len(_header(rec.kind, prompt_style).encode("utf-8"))
        offset = 0
        for line in rec.context_text.split("\n"):
            n = len(line.encode("utf-8"))
            if line.startswith(prefix):
                start = 1 + ctx_start + offset  # +1 for BOS
                targets = tuple(range(start, start + n))
                break
            offset += n + 1
        else:
            raise ValueError(f"target line {prefix!r} not found in record {rec.id}")
    return RenderedTask(prompt, rec.answer_text, prompt_tokens, answer_tokens, targets)


# -- scoring --------------------------------------------------------------------------

_TYPE_FIELD = re.compile(r"bug_type\"?\s*[:=]\s*\"?\s*([A-Za-z_]+)", re.I)
_LOC_FIELD = re.compile(r"bug_location\"?\s*[:=]\s*\"?\s*(TX\s*\d+|none|null)", re.I)
_ANY_TYPE = re.compile(r"\b(" + "|".join(ALL_TYPES) + r")\b", re.I)
_ANY_TX = re.compile(r"\bTX\s*\d+\b", re.I)
_LINE_REF = re.compile(r"(?:([\w./-]+\.py)\s*:\s*)?\bL\s*(\d+)\b", re.I)


@dataclass(frozen=True)
class Score:
    correct: bool
    parsed: dict
    reason: str = ""


def _norm_tx(s: str) -> str:
    return re.sub(r"\s+", "", s).upper()


def _single(values: list[str]) -> str | None:
    distinct = list(dict.fromkeys(values))
    return distinct[0] if len(distinct) == 1 else None


def _score_transactions(expected: dict, text: str) -> Score:
    m = _TYPE_FIELD.search(text)
    bug_type = m.group(1).upper() if m else _single([t.upper() for t in _ANY_TYPE.findall(text)])
    m = _LOC_FIELD.search(text)
    if m:
        loc = _norm_tx(m.group(1))
        loc = None if loc in ("NONE", "NULL") else loc
    else:
        loc = _single([_norm_tx(t) for t in _ANY_TX.findall(text)])
    parsed = {"bug_type": bug_type, "bug_location": loc}
    if bug_type is None:
        return Score(False, parsed, "no unambiguous bug type")
    if bug_type != expected["bug_type"]:
        return Score(False, parsed, "wrong bug type")
    if expected["bug_type"] == NONE:
        return Score(True, parsed)
    if loc is None:
        return Score(False, parsed, "no unambiguous transaction id")
    if loc != expected["bug_location"]:
        return Score(False, parsed, "wrong transaction id")
    return Score(True, parsed)


def _score_code(expected: dict, text: str) -> Score:
    refs = _LINE_REF.findall(text)
    lines = list(dict.fromkeys(int(n) for _, n in refs))
    if len(lines) != 1:
        return Score(False, {"file": None, "line": None}, "no unambiguous line reference")
    files = [f for f, n in refs if f]
    file = files[0] if files else None
    parsed = {"file": file, "line": lines[0]}
    if file is not None and PurePosixPath(file).name != expected["file"]:
        return Score(False, parsed, "wrong file")
    if lines[0] != expected["line"]:
        return Score(False, parsed, "wrong line")
    return Score(True, parsed)


def score_answer(task: Task | TaskRecord, answer_text: str) -> Score:
    """Exact-content match of a free-form answer against the task label.

    Field extraction ignores case, whitespace and surrounding prose; the
    values themselves must match exactly (``TX4`` is not ``TX004``).
    """
    rec = record_from_task(task)
    if rec.kind == TRANSACTIONS:
        return _score_transactions(rec.answer, answer_text)
    if rec.kind == CODE:
        return _score_code(rec.answer, answer_text)
    return Score(False, {}, f"unknown kind {rec.kind}")
