"""MPL, a tiny line-numbered message-passing language, and its runtime.

Programs are UTF-8 text with one statement per physical line; `#` starts a
comment and blank lines are allowed, so statements can be pinned to exact
line numbers.  Tasks are single-threaded, hold signed 64-bit integer
variables, and talk through FIFO mailboxes of integer lists.

Statement set:

    mytid -> v
    spawn "name" -> v
    initsend
    pack v
    send v, tag
    recv tag
    unpack v
    set v = expr
    if expr goto N
    print "text"(, operand)*
    exit code

Execution is strictly one statement at a time (`execute_line`), which is
what the debugging engine's stepping and breakpoints hang off.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Union

from .errors import FiddleError

_INT64_MASK = (1 << 64) - 1
_INT64_SIGN = 1 << 63


def _wrap64(value: int) -> int:
    value &= _INT64_MASK
    return value - (1 << 64) if value >= _INT64_SIGN else value


class MplSyntaxError(FiddleError):
    code = "syntax_error"

    def __init__(self, line: int, reason: str):
        self.line = line
        self.reason = reason
        super().__init__(f"line {line}: {reason}")


class BadGoto(FiddleError):
    code = "bad_goto"

    def __init__(self, line: int, target: int):
        self.line = line
        self.target = target
        super().__init__(f"line {line}: goto target {target} is not a statement line")


class UnknownProgram(FiddleError):
    code = "unknown_program"


class UnknownTid(FiddleError):
    code = "unknown_tid"


class UninitializedVariable(FiddleError):
    code = "uninitialized"

    def __init__(self, name: str):
        self.name = name
        super().__init__(f"variable {name!r} read before assignment")


class ExpressionError(FiddleError):
    code = "parse_error"


# --------------------------------------------------------------------------
# Expressions

@dataclass(frozen=True)
class Num:
    value: int


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Unary:
    op: str
    operand: "Expr"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Expr"
    right: "Expr"


Expr = Union[Num, Var, Unary, BinOp]

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>\d+)|(?P<name>[A-Za-z_][A-Za-z0-9_]*)"
    r"|(?P<op>==|!=|<=|>=|[-+*/%<>()]))"
)

_CMP_OPS = ("==", "!=", "<", "<=", ">", ">=")
_ADD_OPS = ("+", "-")
_MUL_OPS = ("*", "/", "%")


def _tokenize_expr(text: str) -> list[str]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if not m or m.end() == pos:
            rest = text[pos:].strip()
            if not rest:
                break
            raise ExpressionError(f"bad token near {rest[:12]!r}")
        tokens.append(m.group("num") or m.group("name") or m.group("op"))
        pos = m.end()
    return tokens


class _ExprParser:
    def __init__(self, tokens: list[str]):
        self.tokens = tokens
        self.pos = 0

    def peek(self) -> Optional[str]:
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def take(self) -> str:
        tok = self.peek()
        if tok is None:
            raise ExpressionError("unexpected end of expression")
        self.pos += 1
        return tok

    def parse(self) -> Expr:
        expr = self.comparison()
        if self.peek() is not None:
            raise ExpressionError(f"trailing tokens after expression: {self.peek()!r}")
        return expr

    def comparison(self) -> Expr:
        left = self.additive()
        while self.peek() in _CMP_OPS:
            op = self.take()
            left = BinOp(op, left, self.additive())
        return left

    def additive(self) -> Expr:
        left = self.multiplicative()
        while self.peek() in _ADD_OPS:
            op = self.take()
            left = BinOp(op, left, self.multiplicative())
        return left

    def multiplicative(self) -> Expr:
        left = self.unary()
        while self.peek() in _MUL_OPS:
            op = self.take()
            left = BinOp(op, left, self.unary())
        return left

    def unary(self) -> Expr:
        if self.peek() == "-":
            self.take()
            return Unary("-", self.unary())
        return self.primary()

    def primary(self) -> Expr:
        tok = self.take()
        if tok == "(":
            inner = self.comparison()
            if self.take() != ")":
                raise ExpressionError("missing closing parenthesis")
            return inner
        if tok.isdigit():
            return Num(int(tok))
        if re.fullmatch(r"[A-Za-z_][A-Za-z0-9_]*", tok):
            return Var(tok)
        raise ExpressionError(f"unexpected token {tok!r}")


def parse_expr(text: str) -> Expr:
    return _ExprParser(_tokenize_expr(text)).parse()


def _trunc_div(a: int, b: int) -> int:
    q = abs(a) // abs(b)
    return -q if (a < 0) != (b < 0) else q


def eval_ast(expr: Expr, variables: dict[str, int]) -> int:
    if isinstance(expr, Num):
        return expr.value
    if isinstance(expr, Var):
        if expr.name not in variables:
            raise UninitializedVariable(expr.name)
        return variables[expr.name]
    if isinstance(expr, Unary):
        return _wrap64(-eval_ast(expr.operand, variables))
    left = eval_ast(expr.left, variables)
    right = eval_ast(expr.right, variables)
    op = expr.op
    if op == "+":
        return _wrap64(left + right)
    if op == "-":
        return _wrap64(left - right)
    if op == "*":
        return _wrap64(left * right)
    if op in ("/", "%"):
        if right == 0:
            raise ZeroDivisionError("division or modulo by zero")
        quotient = _trunc_div(left, right)
        return quotient if op == "/" else left - quotient * right
    # comparisons yield 0/1
    return int(
        {"==": left == right, "!=": left != right, "<": left < right,
         "<=": left <= right, ">": left > right, ">=": left >= right}[op]
    )


# --------------------------------------------------------------------------
# Statements

@dataclass(frozen=True)
class MyTidStmt:
    var: str


@dataclass(frozen=True)
class SpawnStmt:
    program: str
    var: str


@dataclass(frozen=True)
class InitSendStmt:
    pass


@dataclass(frozen=True)
class PackStmt:
    var: str


@dataclass(frozen=True)
class SendStmt:
    dest: str
    tag: int


@dataclass(frozen=True)
class RecvStmt:
    tag: int


@dataclass(frozen=True)
class UnpackStmt:
    var: str


@dataclass(frozen=True)
class SetStmt:
    var: str
    expr: Expr


@dataclass(frozen=True)
class IfGotoStmt:
    expr: Expr
    target: int


@dataclass(frozen=True)
class PrintStmt:
    parts: tuple  # str literals and Expr nodes, concatenated on output


@dataclass(frozen=True)
class ExitStmt:
    code: int


Statement = Union[
    MyTidStmt, SpawnStmt, InitSendStmt, PackStmt, SendStmt, RecvStmt,
    UnpackStmt, SetStmt, IfGotoStmt, PrintStmt, ExitStmt,
]

_IDENT = r"[A-Za-z_][A-Za-z0-9_]*"
_INT = r"-?\d+"

_STMT_PATTERNS = [
    ("mytid", re.compile(rf"^mytid\s*->\s*({_IDENT})$")),
    ("spawn", re.compile(rf'^spawn\s+"([^"]+)"\s*->\s*({_IDENT})$')),
    ("initsend", re.compile(r"^initsend$")),
    ("pack", re.compile(rf"^pack\s+({_IDENT})$")),
    ("send", re.compile(rf"^send\s+({_IDENT})\s*,\s*({_INT})$")),
    ("recv", re.compile(rf"^recv\s+({_INT})$")),
    ("unpack", re.compile(rf"^unpack\s+({_IDENT})$")),
    ("set", re.compile(rf"^set\s+({_IDENT})\s*=\s*(.+)$")),
    ("if", re.compile(r"^if\s+(.+?)\s+goto\s+(\d+)$")),
    ("print", re.compile(r"^print\s+(.+)$")),
    ("exit", re.compile(rf"^exit\s+({_INT})$")),
]


def _strip_comment(raw: str) -> str:
    in_string = False
    for i, ch in enumerate(raw):
        if ch == '"':
            in_string = not in_string
        elif ch == "#" and not in_string:
            return raw[:i]
    return raw


def _split_print_args(text: str, line: int) -> list[str]:
    parts = []
    depth = 0
    in_string = False
    current = []
    for ch in text:
        if ch == '"':
            in_string = not in_string
            current.append(ch)
        elif ch == "," and not in_string and depth == 0:
            parts.append("".join(current).strip())
            current = []
        else:
            if ch == "(" and not in_string:
                depth += 1
            elif ch == ")" and not in_string:
                depth -= 1
            current.append(ch)
    parts.append("".join(current).strip())
    if any(not p for p in parts):
        raise MplSyntaxError(line, "empty print operand")
    return parts


def parse_statement(text: str, line: int) -> Statement:
    for kind, pattern in _STMT_PATTERNS:
        m = pattern.match(text)
        if not m:
            continue
        try:
            if kind == "mytid":
                return MyTidStmt(m.group(1))
            if kind == "spawn":
                return SpawnStmt(m.group(1), m.group(2))
            if kind == "initsend":
                return InitSendStmt()
            if kind == "pack":
                return PackStmt(m.group(1))
            if kind == "send":
                return SendStmt(m.group(1), int(m.group(2)))
            if kind == "recv":
                return RecvStmt(int(m.group(1)))
            if kind == "unpack":
                return UnpackStmt(m.group(1))
            if kind == "set":
                return SetStmt(m.group(1), parse_expr(m.group(2)))
            if kind == "if":
                return IfGotoStmt(parse_expr(m.group(1)), int(m.group(2)))
            if kind == "print":
                parts = []
                for arg in _split_print_args(m.group(1), line):
                    if arg.startswith('"'):
                        if not (arg.endswith('"') and len(arg) >= 2):
                            raise MplSyntaxError(line, f"unterminated string {arg!r}")
                        parts.append(arg[1:-1])
                    else:
                        parts.append(parse_expr(arg))
                return PrintStmt(tuple(parts))
            if kind == "exit":
                return ExitStmt(int(m.group(1)))
        except ExpressionError as exc:
            raise MplSyntaxError(line, str(exc)) from exc
    raise MplSyntaxError(line, f"unrecognized statement {text!r}")


@dataclass
class Program:
    name: str
    filename: str
    source: str
    lines: dict[int, Statement]

    @property
    def statement_lines(self) -> list[int]:
        return sorted(self.lines)

    def first_line(self) -> int:
        stmts = self.statement_lines
        return stmts[0] if stmts else 0

    def next_line(self, line: int) -> int:
        """Next statement line strictly after `line`, or one past the end."""
        following = [n for n in self.lines if n > line]
        if following:
            return min(following)
        return (max(self.lines) if self.lines else line) + 1


def parse_program(source: str, name: str, filename: str = "") -> Program:
    lines: dict[int, Statement] = {}
    for lineno, raw in enumerate(source.splitlines(), start=1):
        text = _strip_comment(raw).strip()
        if not text:
            continue
        lines[lineno] = parse_statement(text, lineno)
    for lineno, stmt in lines.items():
        if isinstance(stmt, IfGotoStmt) and stmt.target not in lines:
            raise BadGoto(lineno, stmt.target)
    return Program(name=name, filename=filename or f"{name}.mpl", source=source, lines=lines)


# --------------------------------------------------------------------------
# Tasks and messages

@dataclass(frozen=True)
class Message:
    src: int
    tag: int
    payload: tuple


@dataclass(frozen=True)
class TaskStatus:
    state: str  # created|runnable|blocked_recv|stopped_before|stopped_after|exited|errored
    line: Optional[int] = None
    code: Optional[int] = None
    tag: Optional[int] = None
    reason: Optional[str] = None

    @classmethod
    def created(cls):
        return cls("created")

    @classmethod
    def runnable(cls):
        return cls("runnable")

    @classmethod
    def blocked_recv(cls, tag: int):
        return cls("blocked_recv", tag=tag)

    @classmethod
    def stopped_before(cls, line: int):
        return cls("stopped_before", line=line)

    @classmethod
    def stopped_after(cls, line: int):
        return cls("stopped_after", line=line)

    @classmethod
    def exited(cls, code: int, line: Optional[int] = None):
        return cls("exited", code=code, line=line)

    @classmethod
    def errored(cls, reason: str, line: Optional[int] = None):
        return cls("errored", reason=reason, line=line)

    @property
    def is_terminal(self) -> bool:
        return self.state in ("exited", "errored")

    @property
    def is_stopped(self) -> bool:
        """Stopped from the debugger's point of view (blocked recv is not)."""
        return self.state in ("created", "stopped_before", "stopped_after",
                              "exited", "errored")

    def payload(self) -> dict:
        out = {"state": self.state}
        for key in ("line", "code", "tag", "reason"):
            value = getattr(self, key)
            if value is not None:
                out[key] = value
        return out


class Task:
    """One simulated target process."""

    def __init__(self, tid: int, program: Program, status: TaskStatus):
        self.tid = tid
        self.program = program
        self.pc = program.first_line()
        self.vars: dict[str, int] = {}
        self.outbuf: list[int] = []
        self.inbuf: list[int] = []
        self.mailbox: list[Message] = []
        self.status = status
        self.output: list[str] = []
        # scheduler bookkeeping (owned by the engine)
        self.before_done_line: Optional[int] = None
        self.step_pending = False
        self.in_capture = False

    def __repr__(self):
        return f"<Task {self.tid} {self.program.name} pc={self.pc} {self.status.state}>"


@dataclass(frozen=True)
class StepOutcome:
    kind: str  # advanced|blocked|spawned|exited|output|errored
    line: int
    tag: Optional[int] = None
    program: Optional[str] = None
    tid: Optional[int] = None
    code: Optional[int] = None
    text: Optional[str] = None
    reason: Optional[str] = None


# --------------------------------------------------------------------------
# Runtime

class Runtime:
    """Holds tasks and programs for one node.

    All task execution must be driven from a single scheduler context; the
    runtime itself does no locking.  Debug tooling layers its own
    serialization on top (see the engine module).
    """

    def __init__(self, programs_dir: Optional[Path] = None, debug_capture: bool = False):
        self.programs_dir = Path(programs_dir) if programs_dir else None
        self.debug_capture = debug_capture
        self.tasks: dict[int, Task] = {}
        self.clock = 0
        self._next_tid = 1
        self._programs: dict[str, Program] = {}
        self._program_paths: dict[str, str] = {}
        # Optional hook mapping an externally visible destination tid to a
        # local one (set by the node daemon once a hub hands out global tids).
        self.resolve_tid: Optional[Callable[[int], Optional[int]]] = None
        # Optional capture hook run for debug-captured spawns; returns the
        # tid the spawner should see.  Installed by the engine.
        self.capture_hook: Optional[Callable[[Task, str], int]] = None

    def add_program(self, program: Program):
        self._programs[program.name] = program

    def load_program(self, name: str) -> Program:
        if name in self._programs:
            return self._programs[name]
        if self.programs_dir is not None:
            path = self.programs_dir / f"{name}.mpl"
            if path.is_file():
                program = parse_program(path.read_text("utf-8"), name, path.name)
                program_path = str(path)
                self._programs[name] = program
                self._program_paths[name] = program_path
                return program
        raise UnknownProgram(f"no program named {name!r}")

    def program_path(self, name: str) -> str:
        return self._program_paths.get(name, f"{name}.mpl")

    def create_task(self, program: Program, status: TaskStatus) -> Task:
        task = Task(self._next_tid, program, status)
        self._next_tid += 1
        self.tasks[task.tid] = task
        return task

    def spawn_task(self, name: str, debug_capture: bool) -> Task:
        program = self.load_program(name)
        status = TaskStatus.created() if debug_capture else TaskStatus.runnable()
        return self.create_task(program, status)

    def deliver(self, src_tid: int, dst_tid: int, tag: int, payload: list[int]):
        """Append a message to dst's mailbox, waking a matching blocked recv."""
        local = dst_tid
        if self.resolve_tid is not None:
            local = self.resolve_tid(dst_tid)
        if local is None or local not in self.tasks:
            raise UnknownTid(f"no task with tid {dst_tid}")
        dst = self.tasks[local]
        dst.mailbox.append(Message(src_tid, tag, tuple(payload)))
        if dst.status.state == "blocked_recv" and _tag_matches(dst.status.tag, tag):
            dst.status = TaskStatus.runnable()

    def runnable_tasks(self) -> list[Task]:
        return [t for t in sorted(self.tasks.values(), key=lambda t: t.tid)
                if t.status.state == "runnable" and not t.in_capture]


def _tag_matches(recv_tag: Optional[int], msg_tag: int) -> bool:
    return recv_tag == -1 or recv_tag == msg_tag


def deliver(runtime: Runtime, src_tid: int, dst_tid: int, tag: int, payload: list[int]):
    runtime.deliver(src_tid, dst_tid, tag, payload)


def spawn_task(runtime: Runtime, name: str, debug_capture: bool) -> int:
    return runtime.spawn_task(name, debug_capture).tid


def eval_expr(task: Task, expr_text: str) -> int:
    """Evaluate an expression against a task's variables.

    Comparison operators yield 0/1 and division truncates toward zero.
    """
    try:
        ast = parse_expr(expr_text)
    except ExpressionError:
        raise
    return eval_ast(ast, task.vars)


def _advance(task: Task, executed_line: int):
    task.pc = task.program.next_line(executed_line)
    task.before_done_line = None
    return None


def execute_line(task: Task, runtime: Runtime) -> StepOutcome:
    """Execute exactly one statement of a runnable task.

    A recv with no matching message yields `blocked` without consuming the
    line; the recv completes on a later turn once a message has arrived.
    Errors halt only the erring task.
    """
    line = task.pc
    stmt = task.program.lines.get(line)
    if stmt is None:
        # ran off the end of the program
        task.status = TaskStatus.exited(0, line=line)
        return StepOutcome("exited", line, code=0)

    def errored(reason: str) -> StepOutcome:
        task.status = TaskStatus.errored(reason, line=line)
        return StepOutcome("errored", line, reason=reason)

    try:
        if isinstance(stmt, MyTidStmt):
            task.vars[stmt.var] = task.tid
        elif isinstance(stmt, SpawnStmt):
            if runtime.debug_capture and runtime.capture_hook is not None:
                # Captured spawns are orchestrated by the engine scheduler,
                # which releases its lock around the capture; reaching this
                # branch means someone stepped the task outside the engine.
                new_task = runtime.spawn_task(stmt.program, True)
                result_tid = runtime.capture_hook(new_task, stmt.program)
            else:
                new_task = runtime.spawn_task(stmt.program, runtime.debug_capture)
                result_tid = new_task.tid
            task.vars[stmt.var] = result_tid
            runtime.clock += 1
            _advance(task, line)
            return StepOutcome("spawned", line, program=stmt.program, tid=result_tid)
        elif isinstance(stmt, InitSendStmt):
            task.outbuf = []
        elif isinstance(stmt, PackStmt):
            if stmt.var not in task.vars:
                raise UninitializedVariable(stmt.var)
            task.outbuf.append(task.vars[stmt.var])
        elif isinstance(stmt, SendStmt):
            if stmt.dest not in task.vars:
                raise UninitializedVariable(stmt.dest)
            runtime.deliver(task.tid, task.vars[stmt.dest], stmt.tag, list(task.outbuf))
        elif isinstance(stmt, RecvStmt):
            index = next((i for i, msg in enumerate(task.mailbox)
                          if _tag_matches(stmt.tag, msg.tag)), None)
            if index is None:
                task.status = TaskStatus.blocked_recv(stmt.tag)
                return StepOutcome("blocked", line, tag=stmt.tag)
            msg = task.mailbox.pop(index)
            task.inbuf = list(msg.payload)
        elif isinstance(stmt, UnpackStmt):
            if not task.inbuf:
                return errored("unpack from empty receive buffer")
            task.vars[stmt.var] = task.inbuf.pop(0)
        elif isinstance(stmt, SetStmt):
            task.vars[stmt.var] = eval_ast(stmt.expr, task.vars)
        elif isinstance(stmt, IfGotoStmt):
            if eval_ast(stmt.expr, task.vars) != 0:
                runtime.clock += 1
                task.pc = stmt.target
                task.before_done_line = None
                return StepOutcome("advanced", line)
        elif isinstance(stmt, PrintStmt):
            rendered = []
            for part in stmt.parts:
                if isinstance(part, str):
                    rendered.append(part)
                else:
                    rendered.append(str(eval_ast(part, task.vars)))
            text = "".join(rendered)
            task.output.append(text)
            runtime.clock += 1
            _advance(task, line)
            return StepOutcome("output", line, text=text)
        elif isinstance(stmt, ExitStmt):
            runtime.clock += 1
            task.status = TaskStatus.exited(stmt.code, line=line)
            return StepOutcome("exited", line, code=stmt.code)
        else:  # pragma: no cover - statement set is closed
            return errored(f"unsupported statement at line {line}")
    except UninitializedVariable as exc:
        return errored(str(exc))
    except ZeroDivisionError as exc:
        return errored(str(exc))
    except UnknownTid as exc:
        return errored(str(exc))

    runtime.clock += 1
    _advance(task, line)
    return StepOutcome("advanced", line)
