"""Synthetic source files with one buggy line hidden among plausible code.

Every seed defines a virtual file in which each line is a pure function of
``(seed, offset from the needle)``.  A window of ``L`` lines places the
needle at ``floor(r * L)`` for a per-seed relative depth ``r``, so windows
of different lengths share the neighbourhood of the needle and the needle
keeps its absolute line number.  Distractor lines are checked against the
needle's predicate, so exactly one line exhibits the bug.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Callable

from ..numeric import Rng, derive_seed

FILE_NAME = "model.py"
FIRST_NEEDLE_LINE = 10001
MIN_LINES = 5


@dataclass(frozen=True)
class NeedleKind:
    name: str
    description: str
    line: str
    matches: Callable[[str], bool]


NEEDLES: tuple[NeedleKind, ...] = (
    NeedleKind(
        "unscaled_scores",
        "attention scores are not divided by the square root of the head dimension",
        "        scores = torch.matmul(q, k.transpose(-2, -1))",
        lambda s: "matmul(q, k.transpose" in s and "sqrt" not in s,
    ),
    NeedleKind(
        "softmax_without_temperature",
        "sampling probabilities ignore the temperature argument",
        "        probs = torch.softmax(logits, dim=-1)",
        lambda s: "softmax(logits," in s,
    ),
    NeedleKind(
        "norm_after_residual",
        "the block normalizes after the residual add instead of before the sublayer",
        "        x = self.ln_1(x + self.attn(x))",
        lambda s: re.search(r"self\.ln_\d\(x \+", s) is not None,
    ),
    NeedleKind(
        "mask_filled_with_zero",
        "masked attention positions are filled with zero instead of negative infinity",
        "        att = att.masked_fill(mask == 0, 0.0)",
        lambda s: "masked_fill(" in s and "-inf" not in s,
    ),
    NeedleKind(
        "unbiased_layernorm_variance",
        "layer norm variance divides by n - 1 instead of n",
        "        var = ((x - mean) ** 2).sum(-1, keepdim=True) / (n - 1)",
        lambda s: "/ (n - 1)" in s,
    ),
)

_VARS = ("x", "h", "y", "out", "hidden", "att", "feats", "z", "residual", "state")
_MODS = ("proj", "fc", "dropout", "ln_2", "mlp", "c_attn", "c_proj", "gate", "norm", "head")
_FUNCS = ("forward", "encode", "decode", "project", "step", "merge_heads", "split_heads", "reset")
_CLASSES = ("Block", "Attention", "MLP", "Encoder", "Decoder", "Router", "Embedding", "Head")
_ARGS = ("x", "hidden", "inputs", "features", "tokens")
_DTYPES = ("torch.float32", "torch.bfloat16", "torch.float16")
_COMMENTS = (
    "cache the projection for reuse",
    "shape: (batch, heads, seq, dim)",
    "keep the residual stream in fp32",
    "merge heads back into the model width",
    "NOTE: weights are tied at init time",
    "TODO: fuse these two kernels",
    "avoid recomputing the mask on every call",
    "scale before the nonlinearity",
)

_TEMPLATES: tuple[Callable[[Rng], str], ...] = (
    lambda r: "",
    lambda r: f"class {r.choice(_CLASSES)}(nn.Module):",
    lambda r: f"    def {r.choice(_FUNCS)}(self, {r.choice(_ARGS)}: torch.Tensor) -> torch.Tensor:",
    lambda r: f"        {r.choice(_VARS)} = self.{r.choice(_MODS)}({r.choice(_VARS)})",
    lambda r: f"        # {r.choice(_COMMENTS)}",
    lambda r: f"        {r.choice(_VARS)} = {r.choice(_VARS)}.view(b, t, {r.integers(1, 17)}, -1)",
    lambda r: f"        return {r.choice(_VARS)}",
    lambda r: f"        {r.choice(_VARS)} = {r.choice(_VARS)} + {r.choice(_VARS)}",
    lambda r: f"        if {r.choice(_VARS)} is not None:",
    lambda r: f"            {r.choice(_VARS)} = {r.choice(_VARS)}.to({r.choice(_DTYPES)})",
    lambda r: f"        self.{r.choice(_MODS)} = nn.Linear(d_model, {r.integers(1, 9)} * d_model)",
    lambda r: f"        self.{r.choice(_MODS)} = nn.Dropout({r.integers(0, 5) / 10})",
    # correct versions of the buggy patterns
    lambda r: "        scores = torch.matmul(q, k.transpose(-2, -1)) / math.sqrt(head_dim)",
    lambda r: "        probs = torch.softmax(logits / temperature, dim=-1)",
    lambda r: "        x = x + self.attn(self.ln_1(x))",
    lambda r: "        att = att.masked_fill(mask == 0, float('-inf'))",
    lambda r: "        var = ((x - mean) ** 2).mean(-1, keepdim=True)",
    lambda r: f"        x = x + self.mlp(self.ln_{r.integers(1, 3)}(x))",
)


@dataclass(frozen=True)
class CodeNeedleTask:
    lines: tuple[tuple[int, str], ...]
    needle_index: int
    needle: NeedleKind
    seed: int
    file_name: str = FILE_NAME

    @property
    def n_lines(self) -> int:
        return len(self.lines)

    @property
    def needle_line(self) -> int:
        return self.lines[self.needle_index][0]

    @property
    def answer(self) -> str:
        return f"{self.file_name}:L{self.needle_line}"

    def render_lines(self) -> list[str]:
        return [f"L{no}: {text}" for no, text in self.lines]

    def render_file(self) -> str:
        return "\n".join([self.file_name, *self.render_lines()])


def _family(seed: int) -> tuple[NeedleKind, float, int]:
    rng = Rng(derive_seed(seed, 0xFA41))
    needle = rng.choice(NEEDLES)
    depth = rng.random()
    line_no = FIRST_NEEDLE_LINE + rng.integers(0, 1000)
    return needle, depth, line_no


def distractor_line(seed: int, offset: int, needle: NeedleKind) -> str:
    """Line at ``offset`` from the needle; never satisfies the needle predicate."""
    rng = Rng(derive_seed(seed, 0xD157, offset + (1 << 32)))
    while True:
        text = rng.choice(_TEMPLATES)(rng)
        if not needle.matches(text):
            return text


def gen_code_needle_task(n_lines: int, seed: int = 0) -> CodeNeedleTask:
    """An ``n_lines`` window of the seed's virtual file.

    Line numbers are contiguous and the needle sits at a fixed absolute line
    in ``[FIRST_NEEDLE_LINE, FIRST_NEEDLE_LINE + 1000)``, so the window starts
    at ``needle_line - needle_index``.
    """
    if not MIN_LINES <= n_lines <= FIRST_NEEDLE_LINE:
        raise ValueError(f"n_lines must lie in [{MIN_LINES}, {FIRST_NEEDLE_LINE}], got {n_lines}")
    needle, depth, needle_no = _family(seed)
    idx = min(math.floor(depth * n_lines), n_lines - 1)
    lines = []
    for i in range(n_lines):
        offset = i - idx
        text = needle.line if offset == 0 else distractor_line(seed, offset, needle)
        lines.append((needle_no + offset, text))
    return CodeNeedleTask(tuple(lines), idx, needle, seed)


def needle_by_name(name: str) -> NeedleKind:
    for n in NEEDLES:
        if n.name == name:
            return n
    raise KeyError(name)


def count_bug_lines(task: CodeNeedleTask) -> int:
    return sum(task.needle.matches(text) for _, text in task.lines)
