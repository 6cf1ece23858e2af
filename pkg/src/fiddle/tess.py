"""Behavior-specification (.tes) files: parser, validator, serializer.

Grammar (whitespace and newlines are insignificant between tokens,
strings are double-quoted with backslash escapes):

    tess     := "START_FILE:" ident
                "SPAWN_TABLE:" "{" row ("," row)* "}"
                "INITIAL:" [ gbp ("," gbp)* ] ";"
    row      := int int int int int ident ident int int
    gbp      := "[" "{" lbp ("," lbp)* "}" "]"
    lbp      := "(" int "," int "," int ("," action)? ")"
    action   := "[" int "," int "," string "," string "]"

A local breakpoint (when, vid, line) stops the given process before
(when=1) or after (when=2) the line; a global breakpoint is a consistent
set of local breakpoints, at most one per process.  Actions with code 2
set a variable on a process once the whole global breakpoint is reached.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from . import mpl
from .errors import FiddleError

BEFORE_CODE = 1
AFTER_CODE = 2
SET_VAR_CODE = 2


class TessSyntaxError(FiddleError):
    code = "tess_syntax_error"

    def __init__(self, line: int, reason: str):
        self.line = line
        super().__init__(f"line {line}: {reason}")


class ConsistencyError(FiddleError):
    code = "tess_consistency_error"


@dataclass(frozen=True)
class SetVarAction:
    code: int
    vid: int
    var: str
    value: str  # holds a signed integer

    @property
    def int_value(self) -> int:
        return int(self.value)


@dataclass(frozen=True)
class LocalBp:
    when: int  # 1 = before, 2 = after
    vid: int
    line: int
    actions: tuple = ()


@dataclass(frozen=True)
class GlobalBp:
    breakpoints: tuple  # LocalBp, ordered as written, at most one per vid


@dataclass(frozen=True)
class SpawnRow:
    index: int
    spawn_line: int
    reserved: int
    parent_vid: int
    vid: int
    program: str
    source_file: str
    checksum: int
    tail: int


@dataclass(frozen=True)
class TessSpec:
    start_file: str
    spawn_rows: tuple
    global_bps: tuple


# -- lexer ---------------------------------------------------------------

_TOKEN_RE = re.compile(
    r'''(?P<ws>\s+)
      | (?P<string>"(?:[^"\\]|\\.)*")
      | (?P<int>-?\d+)
      | (?P<ident>[A-Za-z_][A-Za-z0-9_.]*)
      | (?P<punct>[{}\[\](),;:])
    ''',
    re.VERBOSE,
)


@dataclass(frozen=True)
class _Token:
    kind: str  # string|int|ident|punct
    text: str
    line: int


def _lex(text: str) -> list[_Token]:
    tokens = []
    pos = 0
    line = 1
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise TessSyntaxError(line, f"bad character {text[pos]!r}")
        if m.lastgroup != "ws":
            tokens.append(_Token(m.lastgroup, m.group(), line))
        line += m.group().count("\n")
        pos = m.end()
    return tokens


class _Parser:
    def __init__(self, tokens: list[_Token]):
        self.tokens = tokens
        self.pos = 0

    @property
    def _line(self) -> int:
        if self.pos < len(self.tokens):
            return self.tokens[self.pos].line
        return self.tokens[-1].line if self.tokens else 1

    def peek(self) -> Optional[_Token]:
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def take(self, kind: Optional[str] = None, text: Optional[str] = None) -> _Token:
        tok = self.peek()
        if tok is None:
            last = self.tokens[-1].line if self.tokens else 1
            raise TessSyntaxError(last, "unexpected end of file")
        if kind is not None and tok.kind != kind:
            raise TessSyntaxError(tok.line, f"expected {kind}, got {tok.text!r}")
        if text is not None and tok.text != text:
            raise TessSyntaxError(tok.line, f"expected {text!r}, got {tok.text!r}")
        self.pos += 1
        return tok

    def take_int(self) -> int:
        return int(self.take("int").text)

    def take_keyword(self, word: str):
        self.take("ident", word)
        self.take("punct", ":")

    def parse(self) -> TessSpec:
        self.take_keyword("START_FILE")
        start_file = self.take("ident").text

        self.take_keyword("SPAWN_TABLE")
        self.take("punct", "{")
        rows = [self.parse_row(0)]
        while self.peek() and self.peek().text == ",":
            self.take("punct", ",")
            rows.append(self.parse_row(len(rows)))
        self.take("punct", "}")

        self.take_keyword("INITIAL")
        gbps = []
        if self.peek() and self.peek().text == "[":
            gbps.append(self.parse_gbp())
            while self.peek() and self.peek().text == ",":
                self.take("punct", ",")
                gbps.append(self.parse_gbp())
        self.take("punct", ";")
        if self.peek() is not None:
            raise TessSyntaxError(self.peek().line,
                                  f"trailing content {self.peek().text!r}")
        return TessSpec(start_file, tuple(rows), tuple(gbps))

    def parse_row(self, index_hint: int) -> SpawnRow:
        numbers = [self.take_int() for _ in range(5)]
        program = self.take("ident").text
        source_file = self.take("ident").text
        checksum = self.take_int()
        tail = self.take_int()
        return SpawnRow(numbers[0], numbers[1], numbers[2], numbers[3], numbers[4],
                        program, source_file, checksum, tail)

    def parse_gbp(self) -> GlobalBp:
        self.take("punct", "[")
        self.take("punct", "{")
        bps = [self.parse_lbp()]
        while self.peek() and self.peek().text == ",":
            self.take("punct", ",")
            bps.append(self.parse_lbp())
        self.take("punct", "}")
        self.take("punct", "]")
        return GlobalBp(tuple(bps))

    def parse_lbp(self) -> LocalBp:
        line = self._line
        self.take("punct", "(")
        when = self.take_int()
        self.take("punct", ",")
        vid = self.take_int()
        self.take("punct", ",")
        bp_line = self.take_int()
        actions = []
        while self.peek() and self.peek().text == ",":
            self.take("punct", ",")
            actions.append(self.parse_action())
        self.take("punct", ")")
        if when not in (BEFORE_CODE, AFTER_CODE):
            raise ConsistencyError(
                f"line {line}: breakpoint code must be 1 (before) or 2 (after), got {when}")
        return LocalBp(when, vid, bp_line, tuple(actions))

    def parse_action(self) -> SetVarAction:
        self.take("punct", "[")
        code = self.take_int()
        self.take("punct", ",")
        vid = self.take_int()
        self.take("punct", ",")
        var = _unquote(self.take("string").text)
        self.take("punct", ",")
        value = _unquote(self.take("string").text)
        self.take("punct", "]")
        try:
            int(value)
        except ValueError:
            raise ConsistencyError(f"action value {value!r} is not an integer")
        return SetVarAction(code, vid, var, value)


def _unquote(text: str) -> str:
    body = text[1:-1]
    return re.sub(r"\\(.)", r"\1", body)


def _quote(text: str) -> str:
    return '"' + text.replace("\\", "\\\\").replace('"', '\\"') + '"'


def parse_tess(text: str) -> TessSpec:
    spec = _Parser(_lex(text)).parse()
    _check_consistency(spec)
    return spec


def load_tess(path: Path) -> TessSpec:
    return parse_tess(Path(path).read_text("utf-8"))


def _check_consistency(spec: TessSpec):
    vids = [row.vid for row in spec.spawn_rows]
    if len(set(vids)) != len(vids):
        raise ConsistencyError("duplicate vid in spawn table")
    roots = [row for row in spec.spawn_rows if row.parent_vid == 0]
    if len(roots) != 1:
        raise ConsistencyError(f"expected exactly one root row, found {len(roots)}")
    if roots[0].program != spec.start_file:
        raise ConsistencyError(
            f"root row program {roots[0].program!r} differs from start file "
            f"{spec.start_file!r}")
    known = set(vids)
    for i, gbp in enumerate(spec.global_bps, start=1):
        seen = set()
        for bp in gbp.breakpoints:
            if bp.vid in seen:
                raise ConsistencyError(
                    f"global breakpoint #{i} names vid {bp.vid} twice")
            seen.add(bp.vid)
            if bp.vid not in known:
                raise ConsistencyError(
                    f"global breakpoint #{i} references unknown vid {bp.vid}")
            for action in bp.actions:
                if action.vid not in known:
                    raise ConsistencyError(
                        f"action in global breakpoint #{i} references unknown "
                        f"vid {action.vid}")


def serialize_tess(spec: TessSpec) -> str:
    out = ["START_FILE:", f"    {spec.start_file}", "", "SPAWN_TABLE:", "    {"]
    for i, row in enumerate(spec.spawn_rows):
        comma = "," if i + 1 < len(spec.spawn_rows) else ""
        out.append(f"        {row.index} {row.spawn_line} {row.reserved} "
                   f"{row.parent_vid} {row.vid} {row.program} {row.source_file} "
                   f"{row.checksum} {row.tail}{comma}")
    out.extend(["    }", "", "INITIAL:"])
    if not spec.global_bps:
        out.append(";")
        return "\n".join(out)
    for i, gbp in enumerate(spec.global_bps):
        parts = []
        for bp in gbp.breakpoints:
            text = f"({bp.when},{bp.vid},{bp.line}"
            for action in bp.actions:
                text += (f",[{action.code},{action.vid},{_quote(action.var)},"
                         f"{_quote(action.value)}]")
            parts.append(text + ")")
        terminator = "," if i + 1 < len(spec.global_bps) else ";"
        out.append("    [{ " + ",".join(parts) + " }]" + terminator)
    return "\n".join(out)


def validate(spec: TessSpec, programs_dir: Path) -> list[str]:
    """Non-fatal lint: unknown breakpoint lines, odd action codes, and
    breakpoints on processes their parent could not have spawned yet."""
    warnings = []
    programs: dict[int, Optional[mpl.Program]] = {}
    rows_by_vid = {row.vid: row for row in spec.spawn_rows}
    runtime = mpl.Runtime(programs_dir)
    for row in spec.spawn_rows:
        try:
            programs[row.vid] = runtime.load_program(row.program)
        except mpl.UnknownProgram:
            programs[row.vid] = None
            warnings.append(f"program {row.program!r} (vid {row.vid}) not found "
                            f"under {programs_dir}")
    for i, gbp in enumerate(spec.global_bps, start=1):
        for bp in gbp.breakpoints:
            program = programs.get(bp.vid)
            if program is not None and bp.line not in program.lines:
                warnings.append(f"global breakpoint #{i}: no statement at line "
                                f"{bp.line} of {program.name}")
            for action in bp.actions:
                if action.code != SET_VAR_CODE:
                    warnings.append(f"global breakpoint #{i}: unknown action code "
                                    f"{action.code} (expected {SET_VAR_CODE})")
            row = rows_by_vid[bp.vid]
            if row.parent_vid != 0 and not _spawn_reachable(spec, row, i):
                warnings.append(
                    f"global breakpoint #{i} references vid {bp.vid} before its "
                    f"parent (vid {row.parent_vid}) could have passed spawn line "
                    f"{row.spawn_line}")
    return warnings


def _spawn_reachable(spec: TessSpec, row: SpawnRow, gbp_index: int) -> bool:
    """True when some earlier global breakpoint leaves the parent at or past
    the spawn line."""
    for gbp in spec.global_bps[:gbp_index - 1]:
        for bp in gbp.breakpoints:
            if bp.vid != row.parent_vid:
                continue
            if bp.when == BEFORE_CODE and bp.line > row.spawn_line:
                return True
            if bp.when == AFTER_CODE and bp.line >= row.spawn_line:
                return True
    return False
