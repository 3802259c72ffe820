"""A small, total LaTeX tokenizer/parser.

Only the structure needed to query figures is recovered: commands with their
optional/required arguments, ``\\begin``/``\\end`` environments, brace
groups, comments, math and verbatim regions.  Nothing is expanded.  The parser
never raises; malformed input produces a best-effort tree with
``TexTree.degraded`` set.

Offsets in ``span`` attributes index into the decoded source string.  Sources
are decoded as ISO-8859-1, so they are byte offsets into the file as well.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Union

Span = tuple[int, int]


@dataclass
class Text:
    content: str
    span: Span


@dataclass
class Comment:
    content: str
    span: Span


@dataclass
class Verbatim:
    content: str
    span: Span
    name: str = "verbatim"


@dataclass
class Math:
    content: str
    span: Span
    delimiter: str = "$"
    # only populated when parsing with parse_math=True
    children: list["Node"] = field(default_factory=list)


@dataclass
class Group:
    children: list["Node"]
    span: Span
    bracket: bool = False

    @property
    def inner_span(self) -> Span:
        return (self.span[0] + 1, self.span[1] - 1) if self.span[1] > self.span[0] else self.span


@dataclass
class Command:
    name: str
    span: Span
    opt_args: list[Group] = field(default_factory=list)
    req_args: list[Group] = field(default_factory=list)
    starred: bool = False


@dataclass
class Environment:
    name: str
    span: Span
    children: list["Node"] = field(default_factory=list)
    opt_args: list[Group] = field(default_factory=list)
    req_args: list[Group] = field(default_factory=list)


Node = Union[Text, Comment, Verbatim, Math, Group, Command, Environment]


@dataclass
class TexTree:
    source: str
    root: Group
    degraded: bool = False


# Number of required arguments for commands whose arguments may be separated
# from the command name by whitespace.  Anything not listed only picks up
# immediately adjacent {..}/[..] groups.
DEFAULT_ARITIES: dict[str, int] = {
    "includegraphics": 1,
    "caption": 1,
    "subcaption": 1,
    "captionof": 2,
    "subfloat": 1,
    "label": 1,
    "ref": 1,
    "input": 1,
    "include": 1,
    "graphicspath": 1,
    "usepackage": 1,
    "documentclass": 1,
}

DEFINITION_COMMANDS = {
    "newcommand": 1, "renewcommand": 1, "providecommand": 1,
    "DeclareRobustCommand": 1, "newenvironment": 2, "renewenvironment": 2,
    "def": 1, "gdef": 1, "edef": 1, "xdef": 1, "let": 0,
}

ENV_ARITIES: dict[str, int] = {
    "subfigure": 1, "subtable": 1, "minipage": 1, "wrapfigure": 2,
    "wraptable": 2, "tabular": 1, "tabular*": 2, "tabularx": 2, "array": 1,
    "figure": 0, "figure*": 0, "table": 0, "table*": 0, "center": 0,
    "document": 0, "SCfigure": 0,
}

VERBATIM_ENVS = frozenset(
    {"verbatim", "verbatim*", "Verbatim", "lstlisting", "minted", "comment", "filecontents"}
)

# control symbols that take a single following character as argument
ACCENT_SYMBOLS = frozenset("'`^\"~=.")
OPT_ONLY = frozenset({"\\", "item", "newline"})

_DOC_TEXT = re.compile(r"[^\\{}%$\[\]]+")
_CAPTION_TEXT = re.compile(r"[^\\{}$\[\]]+")
_LETTERS = re.compile(r"[A-Za-z]+")
_BLANK_LINE = re.compile(r"\n[ \t\r\f\v]*\n")

MAX_DEPTH = 200


class _Parser:
    def __init__(
        self,
        src: str,
        *,
        comments: bool,
        arities: Mapping[str, int],
        parse_math: bool,
        offset: int = 0,
    ):
        self.src = src
        self.n = len(src)
        self.pos = 0
        self.comments = comments
        self.arities = arities
        self.parse_math = parse_math
        self.offset = offset
        self.degraded = False
        self._text_re = _DOC_TEXT if comments else _CAPTION_TEXT
        # stack of open scopes: "{", "[" or ("env", name)
        self.open: list = []

    def span(self, start: int, end: int) -> Span:
        return (start + self.offset, end + self.offset)

    # -- scopes ----------------------------------------------------------

    def sequence(self, stop, depth: int) -> tuple[list[Node], bool]:
        """Parse nodes until ``stop`` is consumed; return (children, closed)."""
        children: list[Node] = []
        src = self.src
        while self.pos < self.n:
            c = src[self.pos]
            if c == "}":
                if stop == "}":
                    self.pos += 1
                    return children, True
                self.degraded = True
                if "{" in self.open:
                    return children, False
                self.pos += 1  # stray closing brace
                continue
            if c == "]" and stop == "]":
                self.pos += 1
                return children, True
            if c == "{":
                if depth >= MAX_DEPTH:
                    self.degraded = True
                    self._text(children, self.pos, self.pos + 1)
                    self.pos += 1
                    continue
                children.append(self.group(depth + 1))
                continue
            if c == "%" and self.comments:
                end = src.find("\n", self.pos)
                end = self.n if end < 0 else end
                children.append(Comment(src[self.pos + 1 : end], self.span(self.pos, end)))
                self.pos = end
                continue
            if c == "$":
                self.dollar_math(children)
                continue
            if c == "\\":
                result = self.control(children, stop, depth)
                if result is not None:
                    return children, result
                continue
            m = self._text_re.match(src, self.pos)
            end = m.end() if m else self.pos + 1
            self._text(children, self.pos, end)
            self.pos = end
        if stop is not None:
            self.degraded = True
        return children, stop is None

    def _text(self, children: list[Node], start: int, end: int) -> None:
        if children and isinstance(children[-1], Text) and children[-1].span[1] == start + self.offset:
            last = children[-1]
            last.content += self.src[start:end]
            last.span = (last.span[0], end + self.offset)
        else:
            children.append(Text(self.src[start:end], self.span(start, end)))

    def group(self, depth: int) -> Group:
        start = self.pos
        self.pos += 1
        self.open.append("{")
        children, _closed = self.sequence("}", depth)
        self.open.pop()
        return Group(children, self.span(start, self.pos))

    def bracket_group(self, depth: int) -> Group:
        start = self.pos
        self.pos += 1
        self.open.append("[")
        children, _closed = self.sequence("]", depth)
        self.open.pop()
        return Group(children, self.span(start, self.pos), bracket=True)

    def bracket_closes(self, pos: int) -> bool:
        """True if the '[' at pos has a matching ']' at brace depth zero."""
        src = self.src
        depth = 0
        i = pos + 1
        while i < self.n:
            c = src[i]
            if c == "\\":
                i += 2
                continue
            if c == "{":
                depth += 1
            elif c == "}":
                depth -= 1
                if depth < 0:
                    return False
            elif c == "]" and depth == 0:
                return True
            elif c == "\n" and _BLANK_LINE.match(src, i):
                return False
            elif c == "%" and self.comments:
                j = src.find("\n", i)
                if j < 0:
                    return False
                i = j
                continue
            i += 1
        return False

    # -- arguments -------------------------------------------------------

    def skip_space(self, pos: int) -> int:
        """Skip spaces/tabs and at most one newline (not a paragraph break)."""
        src = self.src
        newline = False
        while pos < self.n:
            c = src[pos]
            if c in " \t\r":
                pos += 1
            elif c == "\n" and not newline:
                newline = True
                pos += 1
            else:
                break
        return pos

    def args(self, arity: int | None, depth: int, opt_only: bool = False, env: bool = False):
        opt: list[Group] = []
        req: list[Group] = []
        src = self.src
        if arity is None:
            # unknown command: only immediately adjacent groups
            while self.pos < self.n:
                c = src[self.pos]
                if c == "{" and depth < MAX_DEPTH and not opt_only:
                    req.append(self.group(depth + 1))
                elif c == "[" and self.bracket_closes(self.pos):
                    opt.append(self.bracket_group(depth + 1))
                else:
                    break
            return opt, req
        # environments without required arguments still accept one [..]
        while (len(req) < arity or (env and not arity and not opt)) and depth < MAX_DEPTH:
            p = self.skip_space(self.pos)
            if p >= self.n:
                break
            c = src[p]
            if c == "[" and self.bracket_closes(p):
                self.pos = p
                opt.append(self.bracket_group(depth + 1))
            elif c == "{" and len(req) < arity:
                self.pos = p
                req.append(self.group(depth + 1))
            else:
                break
        return opt, req

    # -- control sequences ----------------------------------------------

    def read_name(self) -> str | None:
        """Read the control sequence name after a backslash at self.pos."""
        src = self.src
        if self.pos + 1 >= self.n:
            return None
        m = _LETTERS.match(src, self.pos + 1)
        if m:
            self.pos = m.end()
            return m.group()
        self.pos += 2
        return src[self.pos - 1]

    def control(self, children: list[Node], stop, depth: int):
        start = self.pos
        name = self.read_name()
        if name is None:
            self.degraded = True
            self._text(children, start, self.n)
            self.pos = self.n
            return None
        if name == "begin" and depth < MAX_DEPTH:
            env = self.environment(start, depth)
            if env is not None:
                children.append(env)
                return None
        if name == "end":
            env_name = self.braced_name()
            if env_name is not None:
                if stop == ("end", env_name):
                    return True
                self.degraded = True
                if ("env", env_name) in self.open:
                    self.pos = start  # let the enclosing environment close
                    return False
                return None  # stray \end: dropped
        if name in ("(", "["):
            if self.delimited_math(children, start, "\\" + name, "\\" + ")]"[name == "["]):
                return None
        if name == "verb":
            self.verb(children, start)
            return None
        starred = False
        if self.pos < self.n and self.src[self.pos] == "*" and (name.isalpha() or name == "\\"):
            starred = True
            self.pos += 1
        if name in DEFINITION_COMMANDS:
            children.append(self.definition(name, start, starred, depth))
            return None
        if name in ACCENT_SYMBOLS:
            children.append(self.accent(name, start, depth))
            return None
        if name in OPT_ONLY:
            opt, req = self.args(None, depth, opt_only=True)
        elif name.isalpha() or name in self.arities:
            opt, req = self.args(self.arities.get(name), depth)
        else:
            opt, req = [], []
        children.append(Command(name, self.span(start, self.pos), opt, req, starred))
        return None

    def braced_name(self) -> str | None:
        p = self.skip_space(self.pos)
        if p < self.n and self.src[p] == "{":
            end = self.src.find("}", p)
            if end > p and "\n" not in self.src[p:end] and "{" not in self.src[p + 1 : end]:
                self.pos = end + 1
                return self.src[p + 1 : end].strip()
        return None

    def environment(self, start: int, depth: int) -> Environment | None:
        name = self.braced_name()
        if name is None:
            self.degraded = True
            return None
        if name in VERBATIM_ENVS:
            end_tag = "\\end{%s}" % name
            body_start = self.pos
            end = self.src.find(end_tag, body_start)
            if end < 0:
                self.degraded = True
                end = self.n
                self.pos = self.n
            else:
                self.pos = end + len(end_tag)
            return Environment(
                name,
                self.span(start, self.pos),
                [Verbatim(self.src[body_start:end], self.span(body_start, end), name)],
            )
        opt, req = self.args(ENV_ARITIES.get(name), depth, env=True)
        self.open.append(("env", name))
        children, _closed = self.sequence(("end", name), depth + 1)
        self.open.pop()
        return Environment(name, self.span(start, self.pos), children, opt, req)

    def definition(self, name: str, start: int, starred: bool, depth: int) -> Command:
        src = self.src
        req: list[Group] = []
        opt: list[Group] = []
        p = self.skip_space(self.pos)
        if p < self.n and src[p] == "{":
            self.pos = p
            req.append(self.group(depth + 1))
        elif p < self.n and src[p] == "\\":
            self.pos = p
            tok_start = p
            self.read_name()
            req.append(Group([Text(src[tok_start:self.pos], self.span(tok_start, self.pos))],
                             self.span(tok_start, self.pos)))
        bodies = DEFINITION_COMMANDS[name]
        if name == "let":
            # \let\a=\b or \let\a\b
            p = self.skip_space(self.pos)
            if p < self.n and src[p] == "=":
                p = self.skip_space(p + 1)
            if p < self.n and src[p] == "\\":
                self.pos = p
                self.read_name()
        got = 0
        while got < bodies and self.pos < self.n:
            p = self.skip_space(self.pos)
            if p >= self.n:
                break
            c = src[p]
            if c == "[" and self.bracket_closes(p):
                self.pos = p
                opt.append(self.bracket_group(depth + 1))
            elif c == "{":
                self.pos = p
                req.append(self.group(depth + 1))
                got += 1
            elif name in ("def", "gdef", "edef", "xdef") and (c == "#" or c.isdigit()):
                self.pos = p + 1  # parameter text
            else:
                break
        return Command(name, self.span(start, self.pos), opt, req, starred)

    def accent(self, name: str, start: int, depth: int) -> Command:
        src = self.src
        req: list[Group] = []
        if self.pos < self.n:
            c = src[self.pos]
            if c == "{" and depth < MAX_DEPTH:
                req.append(self.group(depth + 1))
            elif c == "\\" and self.pos + 1 < self.n and src[self.pos + 1] in "ij" and (
                self.pos + 2 >= self.n or not src[self.pos + 2].isalpha()
            ):
                p = self.pos
                self.pos += 2
                req.append(Group([Command(src[p + 1], self.span(p, self.pos))], self.span(p, self.pos)))
            elif c.isalnum():
                req.append(Group([Text(c, self.span(self.pos, self.pos + 1))], self.span(self.pos, self.pos + 1)))
                self.pos += 1
        return Command(name, self.span(start, self.pos), [], req)

    def verb(self, children: list[Node], start: int) -> None:
        src = self.src
        p = self.pos
        if p < self.n and src[p] == "*":
            p += 1
        if p >= self.n:
            self.degraded = True
            self.pos = p
            return
        delim = src[p]
        end = src.find(delim, p + 1)
        nl = src.find("\n", p + 1)
        if end < 0 or (0 <= nl < end):
            self.degraded = True
            self.pos = p + 1
            return
        children.append(Verbatim(src[p + 1 : end], self.span(start, end + 1), "verb"))
        self.pos = end + 1

    # -- math ------------------------------------------------------------

    def find_math_close(self, pos: int, closer: str) -> int:
        """Index of the closing delimiter or -1 (stops at paragraph breaks)."""
        src = self.src
        i = pos
        while i < self.n:
            c = src[i]
            if c == "\\":
                if src.startswith(closer, i):
                    return i
                i += 2
                continue
            if c == "$" and closer.startswith("$"):
                if src.startswith(closer, i):
                    return i
                if closer == "$$":
                    return -1
            if c == "%" and self.comments:
                j = src.find("\n", i)
                i = self.n if j < 0 else j
                continue
            if c == "\n" and _BLANK_LINE.match(src, i):
                return -1
            i += 1
        return -1

    def dollar_math(self, children: list[Node]) -> None:
        start = self.pos
        delim = "$$" if self.src.startswith("$$", start) else "$"
        body = start + len(delim)
        end = self.find_math_close(body, delim)
        if end < 0:
            self.degraded = True
            self._text(children, start, start + 1)
            self.pos = start + 1
            return
        self.pos = end + len(delim)
        children.append(self.math_node(body, end, start, delim))

    def delimited_math(self, children: list[Node], start: int, opener: str, closer: str) -> bool:
        body = self.pos
        end = self.find_math_close(body, closer)
        if end < 0:
            self.degraded = True
            return False
        self.pos = end + len(closer)
        children.append(self.math_node(body, end, start, opener))
        return True

    def math_node(self, body: int, end: int, start: int, delim: str) -> Math:
        node = Math(self.src[body:end], self.span(start, self.pos), delim)
        if self.parse_math:
            sub = _Parser(
                self.src[body:end],
                comments=self.comments,
                arities=self.arities,
                parse_math=True,
                offset=self.offset + body,
            )
            node.children, _ = sub.sequence(None, 0)
            self.degraded |= sub.degraded
        return node


def parse_tex(
    source: str,
    *,
    comments: bool = True,
    arities: Mapping[str, int] | None = None,
    parse_math: bool = False,
) -> TexTree:
    """Parse LaTeX source into a tree.  Never raises.

    With ``comments=False`` a ``%`` is ordinary text; this is the mode used
    for caption fragments, whose comments were already removed.
    """
    table = DEFAULT_ARITIES if arities is None else arities
    parser = _Parser(source, comments=comments, arities=table, parse_math=parse_math)
    children, _ = parser.sequence(None, 0)
    return TexTree(source, Group(children, (0, len(source))), parser.degraded)


def child_lists(node: Node) -> Iterator[list[Node]]:
    """Yield the scopes (sibling lists) directly owned by ``node``."""
    if isinstance(node, Group):
        yield node.children
    elif isinstance(node, Environment):
        for arg in node.opt_args + node.req_args:
            yield arg.children
        yield node.children
    elif isinstance(node, Command):
        for arg in node.opt_args + node.req_args:
            yield arg.children
    elif isinstance(node, Math):
        if node.children:
            yield node.children


def walk(node: Node) -> Iterator[Node]:
    """Depth-first pre-order traversal."""
    stack = [node]
    while stack:
        current = stack.pop()
        yield current
        nested = [child for scope in child_lists(current) for child in scope]
        stack.extend(reversed(nested))


def decode_tex(data: bytes) -> str:
    """Decode .tex bytes as ISO-8859-1 (total: one character per byte)."""
    return data.decode("iso-8859-1")
