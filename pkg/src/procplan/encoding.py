"""Word-level tokenization of domain knowledge, observations, goals and actions.

Context layout: ``BOS dk SEP observation SEP goal SEP``. Atoms are written as
``pred arg ...`` in sorted order; actions as ``name ( arg , arg )``.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .world import Atom, Domain, GroundedAction, SymbolicState, TaskInstance

PAD, BOS, EOS, SEP = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<sep>")
PUNCT = ("(", ")", ",")
MARKERS = ("pre", "not", "add", "del")


class OutOfVocabulary(KeyError):
    pass


class ParseFailure(ValueError):
    def __init__(self, reason: str, position: int):
        self.reason, self.position = reason, position
        super().__init__(f"{reason} at token {position}")


class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[:4]) != RESERVED:
            raise ValueError("vocabulary must start with the reserved tokens")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def __contains__(self, tok: str) -> bool:
        return tok in self.index

    def id(self, tok: str) -> int:
        try:
            return self.index[tok]
        except KeyError:
            raise OutOfVocabulary(tok) from None

    def ids(self, toks: Iterable[str]) -> list[int]:
        return [self.id(t) for t in toks]

    def token(self, i: int) -> str:
        if not 0 <= i < len(self.tokens):
            raise OutOfVocabulary(f"id {i}")
        return self.tokens[i]

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls(Path(path).read_text().splitlines())


def domain_tokens(domain: Domain) -> list[str]:
    out = []
    for s in domain.schemas:
        out.append(s.name)
        out.extend(s.param_names)
        out.append("pre")
        for a in s.pre_pos:
            out.extend(atom_tokens(a))
        for a in s.pre_neg:
            out.append("not")
            out.extend(atom_tokens(a))
        out.append("add")
        for a in s.add:
            out.extend(atom_tokens(a))
        out.append("del")
        for a in s.delete:
            out.extend(atom_tokens(a))
    return out


def atom_tokens(atom: Atom) -> list[str]:
    return [atom.pred, *atom.args]


def atoms_tokens(atoms: Iterable[Atom]) -> list[str]:
    out = []
    for a in sorted(atoms):
        out.extend(atom_tokens(a))
    return out


def action_tokens(action: GroundedAction) -> list[str]:
    out = [action.name, "("]
    for i, a in enumerate(action.args):
        if i:
            out.append(",")
        out.append(a)
    out.append(")")
    return out


def build_vocab(domain: Domain, instances: Sequence[TaskInstance]) -> Vocabulary:
    if not instances:
        raise ValueError("need at least one instance")
    tokens = list(RESERVED) + list(PUNCT) + list(MARKERS)
    seen = set(tokens)

    def push(t):
        if t not in seen:
            seen.add(t)
            tokens.append(t)

    for p in domain.predicates:
        push(p)
    for s in domain.schemas:
        push(s.name)
    for t in domain_tokens(domain):
        push(t)
    for inst in instances:
        for name, _ in inst.objects:
            push(name)
    return Vocabulary(tokens)


@dataclass(frozen=True)
class EncodedContext:
    ids: tuple[int, ...]
    spans: dict  # "dk" | "observation" | "goal" -> (start, end)

    def __len__(self) -> int:
        return len(self.ids)


def encode_context(obs: SymbolicState | Iterable[Atom], goal: Iterable[Atom], domain: Domain,
                   vocab: Vocabulary) -> EncodedContext:
    atoms = obs.atoms if isinstance(obs, SymbolicState) else obs
    ids = [BOS]
    spans = {}
    for name, toks in (("dk", domain_tokens(domain)), ("observation", atoms_tokens(atoms)),
                       ("goal", atoms_tokens(goal))):
        start = len(ids)
        ids.extend(vocab.ids(toks))
        spans[name] = (start, len(ids))
        ids.append(SEP)
    return EncodedContext(tuple(ids), spans)


def _decode_atoms(ids: Sequence[int], vocab: Vocabulary, domain: Domain) -> list[Atom]:
    out, i = [], 0
    while i < len(ids):
        name = vocab.token(ids[i])
        pred = domain.predicates.get(name)
        if pred is None:
            raise ParseFailure(f"expected a predicate, got {name!r}", i)
        args = tuple(vocab.token(t) for t in ids[i + 1:i + 1 + pred.arity])
        if len(args) != pred.arity:
            raise ParseFailure("truncated atom", i)
        out.append(Atom(name, args))
        i += 1 + pred.arity
    return out


def decode_context(ctx: EncodedContext, vocab: Vocabulary, domain: Domain):
    """Inverse of encode_context for the observation and goal spans."""
    o0, o1 = ctx.spans["observation"]
    g0, g1 = ctx.spans["goal"]
    return _decode_atoms(ctx.ids[o0:o1], vocab, domain), _decode_atoms(ctx.ids[g0:g1], vocab, domain)


def encode_action(action: GroundedAction, vocab: Vocabulary) -> list[int]:
    return vocab.ids(action_tokens(action))


def encode_plan(actions: Iterable[GroundedAction], vocab: Vocabulary) -> list[int]:
    out = []
    for a in actions:
        out.extend(encode_action(a, vocab))
    out.append(EOS)
    return out


def decode_action(ids: Sequence[int], vocab: Vocabulary, domain: Domain, objects=None,
                  start: int = 0) -> tuple[GroundedAction, int]:
    """Parse one ``name ( arg , ... )`` action at `start`; returns (action, next position)."""
    n = len(ids)
    types = dict(objects) if objects is not None else None

    def tok(i):
        if i >= n:
            raise ParseFailure("truncated action", i)
        t = ids[i]
        if not 0 <= t < len(vocab):
            raise ParseFailure(f"token id {t} outside vocabulary", i)
        return vocab.tokens[t]

    name = tok(start)
    try:
        schema = domain.schema(name)
    except KeyError:
        raise ParseFailure("unknown action", start) from None
    if tok(start + 1) != "(":
        raise ParseFailure("expected '('", start + 1)
    i = start + 2
    args = []
    for k, (_, ptype) in enumerate(schema.params):
        if k:
            if tok(i) != ",":
                raise ParseFailure("expected ','", i)
            i += 1
        arg = tok(i)
        if types is not None:
            if arg not in types:
                raise ParseFailure(f"unknown object {arg!r}", i)
            if not domain.is_subtype(types[arg], ptype):
                raise ParseFailure(f"object {arg!r} is not a {ptype}", i)
        elif arg in RESERVED or arg in PUNCT:
            raise ParseFailure(f"bad argument {arg!r}", i)
        args.append(arg)
        i += 1
    if tok(i) != ")":
        raise ParseFailure("expected ')'", i)
    return schema.ground(args), i + 1


def decode_plan(ids: Sequence[int], vocab: Vocabulary, domain: Domain, objects=None):
    """Split a generated token stream into actions.

    Returns (actions, failure) where failure is the ParseFailure that stopped
    parsing, or None when the stream ended cleanly at EOS.
    """
    actions, i = [], 0
    ids = list(ids)
    while True:
        if i < len(ids) and ids[i] == EOS:
            return actions, None
        if i >= len(ids):
            return actions, ParseFailure("missing EOS", i)
        try:
            act, i = decode_action(ids, vocab, domain, objects, start=i)
        except ParseFailure as e:
            return actions, e
        actions.append(act)
