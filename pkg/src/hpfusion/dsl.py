"""Domain model and text grammar for fusion-operator specifications.

A spec describes one member of the generalized Hadamard-product fusion
family: input/projection dimensions, R parallel branches (each with a
pair of unary activations and an optional post-fusion MLP), and an
ordered reduction plan that partitions the branches into sum/prod steps.

Grammar (whitespace-insensitive, '#' starts a line comment)::

    spec      := "fusion" "{" dims branch+ plan "}"
    dims      := "dims" "{" assign+ "}"            # keys: dq dv tq tv to classes
    assign    := key "=" integer ";"
    branch    := "branch" ident "{" "fq" "=" act ";" "fv" "=" act ";" [post] "}"
    post      := "post" "=" "mlp" "(" "layers" "=" int "," "hidden" "=" int
                 ["," "skip" "=" int] ["," "dropout" "=" real] ")" ";"
    plan      := "reduce" "{" step+ "}"
    step      := ("sum" | "prod") "(" ident ("," ident)* ["with" "squash" "=" act] ")" ";"
    act       := "identity" | "lrelu" | "selu" | "sigmoid" | "tanh"

Canonical serialization uses two-space indent, fields in grammar order,
branches in declaration order; ``parse_spec(serialize_spec(s))`` is
structurally equal to ``s``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .tensor_core import (
    ALL_ACTIVATIONS,
    IDENTITY,
    LEAKY_RELU,
    SELU,
    SIGMOID,
    TANH,
    ActivationKind,
)

ACT_NAMES = {
    "identity": IDENTITY,
    "lrelu": LEAKY_RELU,
    "selu": SELU,
    "sigmoid": SIGMOID,
    "tanh": TANH,
}
_ACT_TEXT = {
    "identity": "identity",
    "leaky_relu": "lrelu",
    "selu": "selu",
    "sigmoid": "sigmoid",
    "tanh": "tanh",
}

_DIM_KEYS = ("dq", "dv", "tq", "tv", "to", "classes")


class ParseError(ValueError):
    """Syntax or semantic error in spec text, with 1-based position."""

    def __init__(self, message: str, line: int, col: int):
        super().__init__(f"{line}:{col}: {message}")
        self.message = message
        self.line = line
        self.col = col


@dataclass(frozen=True)
class Dims:
    """Feature and projection lengths; all must be >= 1."""

    d_q: int
    d_v: int
    t_q: int
    t_v: int
    t_o: int
    n_classes: int


@dataclass(frozen=True)
class PostFusionConfig:
    """Post-fusion MLP shape. n_layers == 0 means the MLP is the identity."""

    n_layers: int = 0
    hidden: int = 0
    skip_period: int = 3
    dropout: float = 0.0


IDENTITY_POST = PostFusionConfig()


@dataclass(frozen=True)
class BranchSpec:
    id: str
    f_q: ActivationKind
    f_v: ActivationKind
    post: PostFusionConfig = IDENTITY_POST


@dataclass(frozen=True)
class ReductionStep:
    """One fold step: op in {"sum", "prod"}, applied over the named branches.

    squash, when present, is applied to each member's output before the op.
    """

    op: str
    members: tuple[str, ...]
    squash: ActivationKind | None = None


@dataclass(frozen=True)
class ReductionPlan:
    steps: tuple[ReductionStep, ...]


@dataclass(frozen=True)
class FusionSpec:
    dims: Dims
    branches: tuple[BranchSpec, ...]
    plan: ReductionPlan
    # Advisory metadata only; excluded from structural equality.
    seed_hint: int | None = field(default=None, compare=False)

    def branch_ids(self) -> tuple[str, ...]:
        return tuple(b.id for b in self.branches)


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


def validate_spec(spec: FusionSpec) -> list[str]:
    """Return all invariant violations; an empty list means the spec is valid."""
    out: list[str] = []
    d = spec.dims
    for name, value in (
        ("dims.d_q", d.d_q),
        ("dims.d_v", d.d_v),
        ("dims.t_q", d.t_q),
        ("dims.t_v", d.t_v),
        ("dims.t_o", d.t_o),
        ("dims.n_classes", d.n_classes),
    ):
        if value < 1:
            out.append(f"{name} must be >= 1, got {value}")

    if not spec.branches:
        out.append("spec has no branches")
    seen: set[str] = set()
    for b in spec.branches:
        if b.id in seen:
            out.append(f"duplicate branch id {b.id!r}")
        seen.add(b.id)
        p = b.post
        if p.n_layers < 0:
            out.append(f"branch {b.id}: post layers must be >= 0, got {p.n_layers}")
        if p.n_layers > 0 and p.hidden < 1:
            out.append(f"branch {b.id}: post hidden must be >= 1, got {p.hidden}")
        if p.skip_period < 1:
            out.append(f"branch {b.id}: post skip must be >= 1, got {p.skip_period}")
        if not 0.0 <= p.dropout < 1.0:
            out.append(f"branch {b.id}: post dropout must be in [0, 1), got {p.dropout}")

    if not spec.plan.steps:
        out.append("plan has no steps")
    ids = set(spec.branch_ids())
    used: set[str] = set()
    for i, step in enumerate(spec.plan.steps, start=1):
        if step.op not in ("sum", "prod"):
            out.append(f"step {i}: unknown operator {step.op!r}")
        if not step.members:
            out.append(f"step {i} has no members")
        step_seen: set[str] = set()
        for m in step.members:
            if m not in ids:
                out.append(f"plan references unknown branch {m!r}")
            if m in step_seen:
                out.append(f"branch {m} listed twice in step {i}")
            elif m in used:
                out.append(f"branch {m} appears in multiple steps")
            step_seen.add(m)
            used.add(m)
    for bid in spec.branch_ids():
        if bid not in used:
            out.append(f"plan does not cover branch {bid}")
    return out


# ---------------------------------------------------------------------------
# Tokenizer
# ---------------------------------------------------------------------------

_NUMBER_RE = re.compile(r"[0-9]+(\.[0-9]+)?([eE][+-]?[0-9]+)?")
_IDENT_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")
_PUNCT = "{}()=;,"


@dataclass(frozen=True)
class _Token:
    kind: str  # "ident", "int", "real", one of _PUNCT, or "eof"
    text: str
    line: int
    col: int


def _tokenize(text: str) -> list[_Token]:
    toks: list[_Token] = []
    line, col = 1, 1
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch == "\n":
            i += 1
            line += 1
            col = 1
            continue
        if ch in " \t\r":
            i += 1
            col += 1
            continue
        if ch == "#":
            while i < n and text[i] != "\n":
                i += 1
            continue
        if ch in _PUNCT:
            toks.append(_Token(ch, ch, line, col))
            i += 1
            col += 1
            continue
        if ch in "0123456789":
            m = _NUMBER_RE.match(text, i)
            lexeme = m.group(0)
            kind = "int" if m.group(1) is None and m.group(2) is None else "real"
            toks.append(_Token(kind, lexeme, line, col))
            i = m.end()
            col += len(lexeme)
            continue
        m = _IDENT_RE.match(text, i)
        if m:
            lexeme = m.group(0)
            toks.append(_Token("ident", lexeme, line, col))
            i = m.end()
            col += len(lexeme)
            continue
        raise ParseError(f"unexpected character {ch!r}", line, col)
    toks.append(_Token("eof", "", line, col))
    return toks


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


class _Parser:
    def __init__(self, text: str):
        self.toks = _tokenize(text)
        self.pos = 0

    def peek(self) -> _Token:
        return self.toks[self.pos]

    def next(self) -> _Token:
        tok = self.toks[self.pos]
        if tok.kind != "eof":
            self.pos += 1
        return tok

    def fail(self, message: str, tok: _Token | None = None):
        tok = tok or self.peek()
        raise ParseError(message, tok.line, tok.col)

    def expect(self, kind: str, what: str | None = None) -> _Token:
        tok = self.peek()
        if tok.kind != kind:
            shown = tok.text if tok.kind != "eof" else "end of input"
            self.fail(f"expected {what or kind!r}, found {shown!r}")
        return self.next()

    def keyword(self, word: str) -> _Token:
        tok = self.peek()
        if tok.kind != "ident" or tok.text != word:
            shown = tok.text if tok.kind != "eof" else "end of input"
            self.fail(f"expected {word!r}, found {shown!r}")
        return self.next()

    def parse_int(self, what: str) -> tuple[int, _Token]:
        tok = self.expect("int", f"integer for {what}")
        return int(tok.text), tok

    def parse_real(self, what: str) -> tuple[float, _Token]:
        tok = self.peek()
        if tok.kind not in ("int", "real"):
            self.fail(f"expected number for {what}, found {tok.text!r}")
        self.next()
        return float(tok.text), tok

    def parse_act(self) -> ActivationKind:
        tok = self.expect("ident", "activation name")
        if tok.text not in ACT_NAMES:
            self.fail(
                f"unknown activation {tok.text!r} (expected one of "
                f"{', '.join(ACT_NAMES)})",
                tok,
            )
        return ACT_NAMES[tok.text]

    # grammar productions -------------------------------------------------

    def parse_spec(self) -> FusionSpec:
        self.keyword("fusion")
        self.expect("{")
        dims = self.parse_dims()
        branches: list[BranchSpec] = []
        while self.peek().kind == "ident" and self.peek().text == "branch":
            branches.append(self.parse_branch(branches))
        if not branches:
            self.fail("expected at least one 'branch' block")
        plan = self.parse_plan([b.id for b in branches])
        self.expect("}")
        self.expect("eof", "end of input")
        spec = FusionSpec(dims=dims, branches=tuple(branches), plan=plan)
        leftover = validate_spec(spec)
        if leftover:  # pragma: no cover - parse checks should catch everything
            raise ParseError(leftover[0], 1, 1)
        return spec

    def parse_dims(self) -> Dims:
        self.keyword("dims")
        open_tok = self.expect("{")
        values: dict[str, int] = {}
        while self.peek().kind == "ident":
            key_tok = self.next()
            if key_tok.text not in _DIM_KEYS:
                self.fail(
                    f"unknown dims key {key_tok.text!r} (expected one of "
                    f"{', '.join(_DIM_KEYS)})",
                    key_tok,
                )
            if key_tok.text in values:
                self.fail(f"duplicate dims key {key_tok.text!r}", key_tok)
            self.expect("=")
            value, value_tok = self.parse_int(key_tok.text)
            if value < 1:
                self.fail(f"dims.{_dim_field(key_tok.text)} must be >= 1, got {value}", value_tok)
            self.expect(";")
            values[key_tok.text] = value
        close_tok = self.expect("}")
        for key in _DIM_KEYS:
            if key not in values:
                raise ParseError(f"dims missing key {key!r}", close_tok.line, close_tok.col)
        return Dims(
            d_q=values["dq"],
            d_v=values["dv"],
            t_q=values["tq"],
            t_v=values["tv"],
            t_o=values["to"],
            n_classes=values["classes"],
        )

    def parse_branch(self, so_far: list[BranchSpec]) -> BranchSpec:
        self.keyword("branch")
        id_tok = self.expect("ident", "branch name")
        if any(b.id == id_tok.text for b in so_far):
            self.fail(f"duplicate branch id {id_tok.text!r}", id_tok)
        self.expect("{")
        self.keyword("fq")
        self.expect("=")
        f_q = self.parse_act()
        self.expect(";")
        self.keyword("fv")
        self.expect("=")
        f_v = self.parse_act()
        self.expect(";")
        post = IDENTITY_POST
        if self.peek().kind == "ident" and self.peek().text == "post":
            post = self.parse_post()
        self.expect("}")
        return BranchSpec(id=id_tok.text, f_q=f_q, f_v=f_v, post=post)

    def parse_post(self) -> PostFusionConfig:
        self.keyword("post")
        self.expect("=")
        self.keyword("mlp")
        self.expect("(")
        self.keyword("layers")
        self.expect("=")
        layers, _ = self.parse_int("layers")
        self.expect(",")
        self.keyword("hidden")
        self.expect("=")
        hidden, hidden_tok = self.parse_int("hidden")
        skip_period = 3
        dropout = 0.0
        while self.peek().kind == ",":
            self.next()
            key_tok = self.expect("ident", "'skip' or 'dropout'")
            if key_tok.text == "skip":
                self.expect("=")
                skip_period, skip_tok = self.parse_int("skip")
                if skip_period < 1:
                    self.fail(f"post skip must be >= 1, got {skip_period}", skip_tok)
            elif key_tok.text == "dropout":
                self.expect("=")
                dropout, drop_tok = self.parse_real("dropout")
                if not 0.0 <= dropout < 1.0:
                    self.fail(f"post dropout must be in [0, 1), got {dropout}", drop_tok)
            else:
                self.fail(f"unknown mlp field {key_tok.text!r}", key_tok)
        self.expect(")")
        self.expect(";")
        if layers == 0:
            return IDENTITY_POST
        if hidden < 1:
            self.fail(f"post hidden must be >= 1, got {hidden}", hidden_tok)
        return PostFusionConfig(
            n_layers=layers, hidden=hidden, skip_period=skip_period, dropout=dropout
        )

    def parse_plan(self, branch_ids: list[str]) -> ReductionPlan:
        reduce_tok = self.keyword("reduce")
        self.expect("{")
        steps: list[ReductionStep] = []
        known = set(branch_ids)
        used: set[str] = set()
        while self.peek().kind == "ident" and self.peek().text in ("sum", "prod"):
            op = self.next().text
            self.expect("(")
            members: list[str] = []
            step_seen: set[str] = set()
            squash: ActivationKind | None = None
            while True:
                m_tok = self.expect("ident", "branch name")
                if m_tok.text not in known:
                    self.fail(f"plan references unknown branch {m_tok.text!r}", m_tok)
                if m_tok.text in step_seen:
                    self.fail(f"branch {m_tok.text} listed twice in step {len(steps) + 1}", m_tok)
                if m_tok.text in used:
                    self.fail(f"branch {m_tok.text} appears in multiple steps", m_tok)
                members.append(m_tok.text)
                step_seen.add(m_tok.text)
                used.add(m_tok.text)
                if self.peek().kind == ",":
                    self.next()
                    continue
                break
            if self.peek().kind == "ident" and self.peek().text == "with":
                self.next()
                self.keyword("squash")
                self.expect("=")
                squash = self.parse_act()
            self.expect(")")
            self.expect(";")
            steps.append(ReductionStep(op=op, members=tuple(members), squash=squash))
        if not steps:
            self.fail("expected at least one 'sum' or 'prod' step")
        close_tok = self.expect("}")
        for bid in branch_ids:
            if bid not in used:
                raise ParseError(
                    f"plan does not cover branch {bid}", reduce_tok.line, reduce_tok.col
                )
        _ = close_tok
        return ReductionPlan(steps=tuple(steps))


def _dim_field(key: str) -> str:
    return {
        "dq": "d_q",
        "dv": "d_v",
        "tq": "t_q",
        "tv": "t_v",
        "to": "t_o",
        "classes": "n_classes",
    }[key]


def parse_spec(text: str) -> FusionSpec:
    """Parse and validate spec text; raises ParseError with line:col on any violation."""
    return _Parser(text).parse_spec()


# ---------------------------------------------------------------------------
# Serializer
# ---------------------------------------------------------------------------


def serialize_spec(spec: FusionSpec) -> str:
    """Render the canonical text form. Deterministic; round-trips through parse_spec."""
    lines = ["fusion {", "  dims {"]
    d = spec.dims
    for key, value in (
        ("dq", d.d_q),
        ("dv", d.d_v),
        ("tq", d.t_q),
        ("tv", d.t_v),
        ("to", d.t_o),
        ("classes", d.n_classes),
    ):
        lines.append(f"    {key} = {value};")
    lines.append("  }")
    for b in spec.branches:
        lines.append(f"  branch {b.id} {{")
        lines.append(f"    fq = {_ACT_TEXT[b.f_q.tag]};")
        lines.append(f"    fv = {_ACT_TEXT[b.f_v.tag]};")
        if b.post.n_layers > 0:
            p = b.post
            lines.append(
                f"    post = mlp(layers={p.n_layers}, hidden={p.hidden}, "
                f"skip={p.skip_period}, dropout={p.dropout!r});"
            )
        lines.append("  }")
    lines.append("  reduce {")
    for step in spec.plan.steps:
        body = ", ".join(step.members)
        if step.squash is not None:
            body += f" with squash = {_ACT_TEXT[step.squash.tag]}"
        lines.append(f"    {step.op}({body});")
    lines.append("  }")
    lines.append("}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Built-in presets
# ---------------------------------------------------------------------------

#: Published hyperparameters for the full-scale VQA configuration.
FULL_SCALE_DIMS = Dims(d_q=2400, d_v=2048, t_q=310, t_v=310, t_o=510, n_classes=2000)

#: Small dimensions where a full training run takes CPU minutes.
DESK_DIMS = Dims(d_q=16, d_v=16, t_q=8, t_v=8, t_o=8, n_classes=10)

PRESET_NAMES = ("mlb", "mutan_r5", "ne", "ne_fg", "ne_ps", "ne_fg_mlp6")

_MLP6 = PostFusionConfig(n_layers=6, hidden=128, skip_period=3, dropout=0.0)


def _sum_all_plan(ids: tuple[str, ...]) -> ReductionPlan:
    return ReductionPlan(steps=(ReductionStep(op="sum", members=ids),))


def _gated_plan(ids: tuple[str, ...], squash: ActivationKind) -> ReductionPlan:
    return ReductionPlan(
        steps=(
            ReductionStep(op="sum", members=ids[:-1]),
            ReductionStep(op="prod", members=ids[-1:], squash=squash),
        )
    )


def preset_spec(name: str, dims: Dims | None = None, rank: int | None = None) -> FusionSpec:
    """Build a named preset, optionally resized to other dims or branch count.

    "ne"-family branches always use SeLU on the visual side and cycle the
    question-side activation through the candidate set; gated presets
    ("ne_fg", "ne_ps", "ne_fg_mlp6") need rank >= 2.
    """
    if name not in PRESET_NAMES:
        raise ValueError(f"unknown preset {name!r} (expected one of {', '.join(PRESET_NAMES)})")
    dims = dims or FULL_SCALE_DIMS
    if name == "mlb":
        if rank not in (None, 1):
            raise ValueError("preset 'mlb' is the rank-1 configuration")
        rank = 1
    else:
        rank = rank if rank is not None else 5
    if rank < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    ids = tuple(f"b{r}" for r in range(1, rank + 1))

    if name in ("mlb", "mutan_r5"):
        branches = tuple(BranchSpec(id=i, f_q=IDENTITY, f_v=IDENTITY) for i in ids)
        return FusionSpec(dims=dims, branches=branches, plan=_sum_all_plan(ids))

    post = _MLP6 if name == "ne_fg_mlp6" else IDENTITY_POST
    branches = tuple(
        BranchSpec(id=i, f_q=ALL_ACTIVATIONS[r % len(ALL_ACTIVATIONS)], f_v=SELU, post=post)
        for r, i in enumerate(ids)
    )
    if name == "ne":
        return FusionSpec(dims=dims, branches=branches, plan=_sum_all_plan(ids))
    if rank < 2:
        raise ValueError(f"preset {name!r} needs rank >= 2 (one branch is the gate)")
    squash = SIGMOID if name in ("ne_fg", "ne_fg_mlp6") else TANH
    return FusionSpec(dims=dims, branches=branches, plan=_gated_plan(ids, squash))


def builtin_presets() -> dict[str, FusionSpec]:
    """All named presets at full-scale dims, keyed by name."""
    return {name: preset_spec(name) for name in PRESET_NAMES}
