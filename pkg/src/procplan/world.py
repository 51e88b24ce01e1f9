"""STRIPS-subset domains, task instances, and the grounded transition engine.

Text formats are s-expressions. A domain looks like::

    (define (domain minecraft)
      (:types moveable agent static)
      (:predicates (agentat ?v0 - static) ...)
      (:action move
        :parameters (?v0 - static ?v1 - static)
        :precondition (and (agentat ?v0) (adjacent ?v0 ?v1))
        :effect (and (agentat ?v1) (not (agentat ?v0)))))

and an instance::

    (define (problem train-000)
      (:domain minecraft)
      (:objects agent - agent loc-0-0 - static ...)
      (:observation (agentat loc-0-0) ...)
      (:goal (and (inventory grass-0))))

Only conjunctions of (possibly negated) literals are supported.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

ROOT_TYPE = "object"
UNSUPPORTED = ("forall", "when", "or", "exists", "imply", "increase", "decrease", "either")


class DomainSyntaxError(ValueError):
    def __init__(self, message: str, line: int | None = None, col: int | None = None):
        self.line, self.col = line, col
        where = f" (line {line}, col {col})" if line is not None else ""
        super().__init__(message + where)


class UnsupportedConstruct(DomainSyntaxError):
    pass


class NotApplicable(RuntimeError):
    pass


class Atom(NamedTuple):
    pred: str
    args: tuple[str, ...]

    def __str__(self) -> str:
        return f"({' '.join((self.pred,) + self.args)})"


@dataclass(frozen=True)
class Predicate:
    name: str
    arg_types: tuple[str, ...]

    @property
    def arity(self) -> int:
        return len(self.arg_types)


@dataclass(frozen=True)
class ActionSchema:
    name: str
    params: tuple[tuple[str, str], ...]  # (?var, type)
    pre_pos: tuple[Atom, ...]
    pre_neg: tuple[Atom, ...]
    add: tuple[Atom, ...]
    delete: tuple[Atom, ...]

    @property
    def param_names(self) -> tuple[str, ...]:
        return tuple(p for p, _ in self.params)

    def ground(self, args: Sequence[str]) -> "GroundedAction":
        if len(args) != len(self.params):
            raise ValueError(f"{self.name} takes {len(self.params)} arguments, got {len(args)}")
        binding = dict(zip(self.param_names, args))

        def sub(atoms):
            return frozenset(Atom(a.pred, tuple(binding.get(x, x) for x in a.args)) for a in atoms)

        return GroundedAction(
            self.name, tuple(args),
            pre_pos=sub(self.pre_pos), pre_neg=sub(self.pre_neg),
            add=sub(self.add), delete=sub(self.delete), schema=self,
        )


@dataclass(frozen=True)
class GroundedAction:
    name: str
    args: tuple[str, ...]
    pre_pos: frozenset = field(default=frozenset(), compare=False, repr=False)
    pre_neg: frozenset = field(default=frozenset(), compare=False, repr=False)
    add: frozenset = field(default=frozenset(), compare=False, repr=False)
    delete: frozenset = field(default=frozenset(), compare=False, repr=False)
    schema: ActionSchema | None = field(default=None, compare=False, repr=False)

    @property
    def bindings(self) -> dict[str, str]:
        return dict(zip(self.schema.param_names, self.args)) if self.schema else {}

    def __str__(self) -> str:
        return f"{self.name}({','.join(self.args)})"


@dataclass(frozen=True)
class SymbolicState:
    atoms: frozenset

    def __contains__(self, atom) -> bool:
        return atom in self.atoms

    def __len__(self) -> int:
        return len(self.atoms)

    def sorted_atoms(self) -> list[Atom]:
        return sorted(self.atoms)


@dataclass(frozen=True)
class Domain:
    name: str
    types: dict  # type -> parent type
    predicates: dict  # name -> Predicate
    schemas: tuple[ActionSchema, ...]

    def schema(self, name: str) -> ActionSchema:
        for s in self.schemas:
            if s.name == name:
                return s
        raise KeyError(name)

    def is_subtype(self, t: str, parent: str) -> bool:
        seen = set()
        while t is not None and t not in seen:
            if t == parent:
                return True
            seen.add(t)
            t = self.types.get(t)
        return parent == ROOT_TYPE

    def static_predicates(self) -> set[str]:
        dynamic = {a.pred for s in self.schemas for a in s.add + s.delete}
        return set(self.predicates) - dynamic

    def max_add_effects(self) -> int:
        return max((len(s.add) for s in self.schemas), default=1) or 1


@dataclass(frozen=True)
class TaskInstance:
    id: str
    objects: tuple[tuple[str, str], ...]
    init: SymbolicState
    goal: frozenset
    meta: dict = field(default_factory=dict, compare=False, hash=False)

    def key(self) -> tuple:
        return (tuple(sorted(self.init.atoms)), tuple(sorted(self.goal)))


# --------------------------------------------------------------------------- #
# transitions

def applicable(state: SymbolicState, action: GroundedAction) -> bool:
    atoms = state.atoms
    return action.pre_pos <= atoms and not (action.pre_neg & atoms)


def apply(state: SymbolicState, action: GroundedAction) -> SymbolicState:
    if not applicable(state, action):
        raise NotApplicable(str(action))
    return SymbolicState((state.atoms - action.delete) | action.add)


def goal_satisfied(state: SymbolicState, goal: Iterable[Atom]) -> bool:
    return frozenset(goal) <= state.atoms


def objects_by_type(domain: Domain, objects: Sequence[tuple[str, str]]) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {}
    for t in set(domain.types) | {ROOT_TYPE}:
        out[t] = sorted(o for o, ot in objects if domain.is_subtype(ot, t))
    return out


def ground_actions(domain: Domain, objects: Sequence[tuple[str, str]]) -> list[GroundedAction]:
    """Every type-consistent binding of every schema, schema order then lexicographic args."""
    by_type = objects_by_type(domain, objects)
    out = []
    for schema in domain.schemas:
        pools = [by_type.get(t, []) for _, t in schema.params]
        for args in itertools.product(*pools):
            out.append(schema.ground(args))
    return out


# --------------------------------------------------------------------------- #
# s-expression reader

class _Tok(str):
    line: int
    col: int


def _tokenize(text: str) -> list[_Tok]:
    toks = []
    line, col, i, n = 1, 1, 0, len(text)
    while i < n:
        ch = text[i]
        if ch == "\n":
            line, col, i = line + 1, 1, i + 1
            continue
        if ch.isspace():
            i, col = i + 1, col + 1
            continue
        if ch == ";":
            while i < n and text[i] != "\n":
                i += 1
            continue
        if ch in "()":
            t = _Tok(ch)
            t.line, t.col = line, col
            toks.append(t)
            i, col = i + 1, col + 1
            continue
        j = i
        while j < n and not text[j].isspace() and text[j] not in "();":
            j += 1
        t = _Tok(text[i:j].lower())
        t.line, t.col = line, col
        toks.append(t)
        col += j - i
        i = j
    return toks


def _read_sexpr(text: str):
    toks = _tokenize(text)
    if not toks:
        raise DomainSyntaxError("empty input", 1, 1)
    pos = 0

    def read():
        nonlocal pos
        if pos >= len(toks):
            last = toks[-1]
            raise DomainSyntaxError("unexpected end of input", last.line, last.col)
        tok = toks[pos]
        pos += 1
        if tok == "(":
            lst = _SList()
            lst.line, lst.col = tok.line, tok.col
            while True:
                if pos >= len(toks):
                    raise DomainSyntaxError("unbalanced '('", tok.line, tok.col)
                if toks[pos] == ")":
                    pos += 1
                    return lst
                lst.append(read())
        if tok == ")":
            raise DomainSyntaxError("unexpected ')'", tok.line, tok.col)
        return tok

    exprs = []
    while pos < len(toks):
        exprs.append(read())
    return exprs


class _SList(list):
    line: int = 0
    col: int = 0


def _loc(x):
    return getattr(x, "line", None), getattr(x, "col", None)


def _unwrap_define(exprs, kind: str):
    if len(exprs) == 1 and isinstance(exprs[0], list) and exprs[0] and exprs[0][0] == "define":
        d = exprs[0]
        name = None
        if len(d) > 1 and isinstance(d[1], list) and len(d[1]) == 2 and d[1][0] == kind:
            name = str(d[1][1])
        return name, list(d[2:])
    return None, exprs


def _typed_list(items, where) -> list[tuple[str, str]]:
    """`a b - t c - u d` -> [(a,t),(b,t),(c,u),(d,object)]."""
    out, pending = [], []
    i = 0
    while i < len(items):
        it = items[i]
        if isinstance(it, list):
            raise DomainSyntaxError("expected a name in typed list", *_loc(it))
        if it == "-":
            if i + 1 >= len(items):
                raise DomainSyntaxError("missing type after '-'", *_loc(it))
            if isinstance(items[i + 1], list):
                _check_supported(items[i + 1])
                raise DomainSyntaxError("malformed type after '-'", *_loc(items[i + 1]))
            out.extend((p, str(items[i + 1])) for p in pending)
            pending = []
            i += 2
            continue
        pending.append(str(it))
        i += 1
    out.extend((p, ROOT_TYPE) for p in pending)
    return out


def _check_supported(expr):
    if isinstance(expr, list):
        if expr and isinstance(expr[0], str) and expr[0] in UNSUPPORTED:
            raise UnsupportedConstruct(f"unsupported construct '{expr[0]}'", *_loc(expr))
        for e in expr:
            _check_supported(e)


def _literals(expr, where: str) -> list[tuple[bool, list]]:
    _check_supported(expr)
    if not isinstance(expr, list):
        raise DomainSyntaxError(f"expected a literal list in {where}", *_loc(expr))
    if not expr:
        return []
    if expr[0] == "and":
        out = []
        for e in expr[1:]:
            out.extend(_literals(e, where))
        return out
    if expr[0] == "not":
        if len(expr) != 2 or not isinstance(expr[1], list):
            raise DomainSyntaxError("malformed negation", *_loc(expr))
        return [(False, expr[1])]
    return [(True, expr)]


def _atom(expr, predicates, scope_types, domain_types, is_subtype, where) -> Atom:
    if not expr or isinstance(expr[0], list):
        raise DomainSyntaxError(f"malformed atom in {where}", *_loc(expr))
    name = str(expr[0])
    if name not in predicates:
        raise DomainSyntaxError(f"unknown predicate '{name}'", *_loc(expr))
    pred = predicates[name]
    args = [str(a) for a in expr[1:]]
    if any(isinstance(a, list) for a in expr[1:]):
        raise DomainSyntaxError(f"nested term in atom '{name}'", *_loc(expr))
    if len(args) != pred.arity:
        raise DomainSyntaxError(f"predicate '{name}' expects {pred.arity} args, got {len(args)}", *_loc(expr))
    for a, t in zip(args, pred.arg_types):
        if a not in scope_types:
            kind = "variable" if a.startswith("?") else "object"
            raise DomainSyntaxError(f"undeclared {kind} '{a}' in {where}", *_loc(expr))
        if not is_subtype(scope_types[a], t):
            raise DomainSyntaxError(f"'{a}' of type {scope_types[a]} does not fit slot type {t} of '{name}'", *_loc(expr))
    return Atom(name, tuple(args))


def parse_domain(text: str) -> Domain:
    exprs = _read_sexpr(text)
    name, sections = _unwrap_define(exprs, "domain")
    types: dict[str, str | None] = {ROOT_TYPE: None}
    predicates: dict[str, Predicate] = {}
    schemas: list[ActionSchema] = []

    def is_sub(t, parent):
        seen = set()
        while t is not None and t not in seen:
            if t == parent:
                return True
            seen.add(t)
            t = types.get(t)
        return parent == ROOT_TYPE

    def check_type(t, where):
        if t not in types:
            raise DomainSyntaxError(f"undeclared type '{t}'", *_loc(where))

    for sec in sections:
        if not isinstance(sec, list) or not sec:
            raise DomainSyntaxError("expected a section", *_loc(sec))
        head = sec[0]
        if head == ":requirements" or head == ":domain":
            continue
        if head == ":types":
            declared = _typed_list(sec[1:], sec)
            for t, _ in declared:
                types.setdefault(t, ROOT_TYPE)
            for t, parent in declared:
                if parent != ROOT_TYPE:
                    types.setdefault(parent, ROOT_TYPE)
                types[t] = parent if t != ROOT_TYPE else None
        elif head == ":predicates":
            for p in sec[1:]:
                if not isinstance(p, list) or not p or isinstance(p[0], list):
                    raise DomainSyntaxError("malformed predicate declaration", *_loc(p))
                params = _typed_list(p[1:], p)
                for v, t in params:
                    check_type(t, p)
                pname = str(p[0])
                if pname in predicates:
                    raise DomainSyntaxError(f"duplicate predicate '{pname}'", *_loc(p))
                predicates[pname] = Predicate(pname, tuple(t for _, t in params))
        elif head == ":action":
            schemas.append(_parse_action(sec, predicates, types, is_sub, check_type, schemas))
        else:
            _check_supported(sec)
            raise DomainSyntaxError(f"unknown section '{head}'", *_loc(sec))
    return Domain(name or "domain", {t: p for t, p in types.items() if t != ROOT_TYPE},
                  predicates, tuple(schemas))


def _parse_action(sec, predicates, types, is_sub, check_type, existing) -> ActionSchema:
    if len(sec) < 2 or isinstance(sec[1], list):
        raise DomainSyntaxError("action needs a name", *_loc(sec))
    name = str(sec[1])
    if any(s.name == name for s in existing):
        raise DomainSyntaxError(f"duplicate schema name '{name}'", *_loc(sec))
    fields = {}
    i = 2
    while i < len(sec):
        key = sec[i]
        if isinstance(key, list) or not key.startswith(":"):
            raise DomainSyntaxError(f"expected a keyword in action '{name}'", *_loc(key))
        if i + 1 >= len(sec):
            raise DomainSyntaxError(f"missing value for {key}", *_loc(key))
        fields[str(key)] = sec[i + 1]
        i += 2
    params = _typed_list(fields.get(":parameters", []), sec)
    for v, t in params:
        if not v.startswith("?"):
            raise DomainSyntaxError(f"parameter '{v}' must start with '?'", *_loc(sec))
        check_type(t, sec)
    scope = dict(params)
    pre = _literals(fields.get(":precondition", []), f"precondition of '{name}'")
    eff = _literals(fields.get(":effect", []), f"effect of '{name}'")
    where_p, where_e = f"precondition of '{name}'", f"effect of '{name}'"
    pre_pos = [_atom(a, predicates, scope, types, is_sub, where_p) for s, a in pre if s]
    pre_neg = [_atom(a, predicates, scope, types, is_sub, where_p) for s, a in pre if not s]
    add = [_atom(a, predicates, scope, types, is_sub, where_e) for s, a in eff if s]
    delete = [_atom(a, predicates, scope, types, is_sub, where_e) for s, a in eff if not s]
    if set(add) & set(delete):
        raise DomainSyntaxError(f"atom both added and deleted in '{name}'", *_loc(sec))
    return ActionSchema(name, tuple(params), tuple(pre_pos), tuple(pre_neg), tuple(add), tuple(delete))


def parse_instance(text: str, domain: Domain) -> TaskInstance:
    exprs = _read_sexpr(text)
    name, sections = _unwrap_define(exprs, "problem")
    objects: list[tuple[str, str]] = []
    init_x, goal_x = [], None
    for sec in sections:
        if not isinstance(sec, list) or not sec:
            raise DomainSyntaxError("expected a section", *_loc(sec))
        head = sec[0]
        if head == ":domain":
            continue
        if head == ":objects":
            objects = _typed_list(sec[1:], sec)
            for o, t in objects:
                if t != ROOT_TYPE and t not in domain.types:
                    raise DomainSyntaxError(f"undeclared type '{t}'", *_loc(sec))
        elif head in (":observation", ":init"):
            init_x = list(sec[1:])
        elif head == ":goal":
            goal_x = sec[1] if len(sec) > 1 else _SList()
        else:
            _check_supported(sec)
            raise DomainSyntaxError(f"unknown section '{head}'", *_loc(sec))
    scope = dict(objects)
    init = frozenset(_atom(a, domain.predicates, scope, domain.types, domain.is_subtype, "observation")
                     for a in init_x)
    goal_lits = _literals(goal_x if goal_x is not None else _SList(), "goal")
    if any(not s for s, _ in goal_lits):
        raise UnsupportedConstruct("negative goals are not supported")
    goal = frozenset(_atom(a, domain.predicates, scope, domain.types, domain.is_subtype, "goal")
                     for _, a in goal_lits)
    return TaskInstance(name or "instance", tuple(objects), SymbolicState(init), goal)


# --------------------------------------------------------------------------- #
# printers

def _typed(items: Sequence[tuple[str, str]]) -> str:
    return " ".join(f"{n} - {t}" for n, t in items)


def _lits(pos, neg=()) -> str:
    parts = [str(a) for a in pos] + [f"(not {a})" for a in neg]
    return "(and " + " ".join(parts) + ")" if parts else "(and)"


def print_domain(domain: Domain) -> str:
    lines = [f"(define (domain {domain.name})"]
    lines.append("  (:types " + " ".join(
        f"{t} - {p}" if p and p != ROOT_TYPE else t for t, p in domain.types.items()) + ")")
    lines.append("  (:predicates")
    for p in domain.predicates.values():
        args = " ".join(f"?v{i} - {t}" for i, t in enumerate(p.arg_types))
        lines.append(f"    ({p.name}{' ' + args if args else ''})")
    lines.append("  )")
    for s in domain.schemas:
        lines.append(f"  (:action {s.name}")
        lines.append(f"    :parameters ({_typed(s.params)})")
        lines.append(f"    :precondition {_lits(s.pre_pos, s.pre_neg)}")
        lines.append(f"    :effect {_lits(s.add, s.delete)})")
    lines.append(")")
    return "\n".join(lines) + "\n"


def print_instance(inst: TaskInstance, domain_name: str = "minecraft") -> str:
    lines = [f"(define (problem {inst.id})", f"  (:domain {domain_name})"]
    lines.append("  (:objects " + _typed(inst.objects) + ")")
    lines.append("  (:observation")
    lines.extend(f"    {a}" for a in sorted(inst.init.atoms))
    lines.append("  )")
    lines.append("  (:goal " + _lits(sorted(inst.goal)) + ")")
    lines.append(")")
    return "\n".join(lines) + "\n"


def format_plan(actions: Iterable[GroundedAction]) -> str:
    return "".join(f"{a}\n" for a in actions)


def parse_plan(text: str, domain: Domain) -> list[GroundedAction]:
    out = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith(";"):
            continue
        if not line.endswith(")") or "(" not in line:
            raise DomainSyntaxError("expected name(arg,...)", lineno, 1)
        name, rest = line.split("(", 1)
        args = [a.strip() for a in rest[:-1].split(",")] if rest[:-1].strip() else []
        try:
            schema = domain.schema(name.strip().lower())
        except KeyError:
            raise DomainSyntaxError(f"unknown action '{name.strip()}'", lineno, 1) from None
        out.append(schema.ground([a.lower() for a in args]))
    return out
