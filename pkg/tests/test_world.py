import pytest
from hypothesis import given, strategies as st

from procplan.minecraft import DOMAIN_TEXT, SuiteConfig, generate_suite, minecraft_domain
from procplan.world import (Atom, DomainSyntaxError, NotApplicable, SymbolicState, UnsupportedConstruct, apply,
                            applicable, goal_satisfied, ground_actions, parse_domain, parse_instance, parse_plan,
                            print_domain, print_instance, format_plan)

TINY = """
(define (domain tiny)
  (:types block - thing thing)
  (:predicates (on ?x - block ?y - block) (clear ?x - block) (held ?x - block) (handfree))
  (:action grab
    :parameters (?x - block)
    :precondition (and (clear ?x) (handfree) (not (held ?x)))
    :effect (and (held ?x) (not (handfree)) (not (clear ?x)))))
"""


def test_parse_tiny_domain():
    d = parse_domain(TINY)
    assert d.name == "tiny"
    assert d.is_subtype("block", "thing")
    s = d.schema("grab")
    assert s.params == (("?x", "block"),)
    assert Atom("held", ("?x",)) in s.pre_neg
    assert set(s.delete) == {Atom("handfree", ()), Atom("clear", ("?x",))}


def test_minecraft_domain_round_trip():
    d = minecraft_domain()
    assert parse_domain(print_domain(d)) == d
    assert [s.name for s in d.schemas] == ["recall", "move", "craftplank", "equip", "pick"]


def test_apply_and_not_applicable():
    d = minecraft_domain()
    state = SymbolicState(frozenset({Atom("agentat", ("a",)), Atom("adjacent", ("a", "b"))}))
    mv = d.schema("move").ground(["a", "b"])
    nxt = apply(state, mv)
    assert Atom("agentat", ("b",)) in nxt and Atom("agentat", ("a",)) not in nxt
    with pytest.raises(NotApplicable):
        apply(nxt, mv)
    assert state.atoms == frozenset({Atom("agentat", ("a",)), Atom("adjacent", ("a", "b"))})


def test_negative_precondition_blocks():
    d = parse_domain(TINY)
    g = d.schema("grab").ground(["b1"])
    s = SymbolicState(frozenset({Atom("clear", ("b1",)), Atom("handfree", ()), Atom("held", ("b1",))}))
    assert not applicable(s, g)


@pytest.mark.parametrize("text, msg", [
    ("(define (domain x) (:predicates (p ?a - nope)))", "undeclared type 'nope'"),
    ("(define (domain x) (:predicates (p ?a)) (:action a :parameters (?a) :precondition (q ?a) :effect (p ?a)))",
     "unknown predicate 'q'"),
    ("(define (domain x) (:predicates (p ?a)) (:action a :parameters (?a) :precondition (p ?b) :effect (p ?a)))",
     r"undeclared variable '\?b'"),
    ("(define (domain x) (:predicates (p ?a)) (:action a :parameters (?a) :precondition (p ?a ?a) :effect ()))",
     "expects 1 args"),
    ("(define (domain x) (:predicates (p ?a)) (:action a :parameters (?a) :effect (p ?a))"
     " (:action a :parameters (?a) :effect (p ?a)))", "duplicate schema name 'a'"),
    ("(define (domain x) (:predicates (p ?a)) (:action a :parameters (?a) :effect (and (p ?a) (not (p ?a)))))",
     "both added and deleted"),
])
def test_domain_errors(text, msg):
    with pytest.raises(DomainSyntaxError, match=msg):
        parse_domain(text)


@pytest.mark.parametrize("construct", ["forall", "when", "or", "exists"])
def test_unsupported_constructs(construct):
    text = f"(define (domain x) (:predicates (p ?a)) (:action a :parameters (?a) :effect ({construct} (p ?a))))"
    with pytest.raises(UnsupportedConstruct, match=construct):
        parse_domain(text)


def test_either_type_is_unsupported():
    with pytest.raises(UnsupportedConstruct, match="either"):
        parse_domain("(define (domain x) (:types a b) (:predicates (p ?v - (either a b))))")


def test_error_carries_line_and_column():
    text = "(define (domain x)\n  (:predicates (p ?a))\n  (:action a :parameters (?a)\n     :effect (zz ?a)))"
    with pytest.raises(DomainSyntaxError) as e:
        parse_domain(text)
    assert (e.value.line, e.value.col) == (4, 14)


def test_grounding_order_and_count():
    d = minecraft_domain()
    objs = (("agent", "agent"), ("l1", "static"), ("l0", "static"), ("g", "moveable"))
    acts = ground_actions(d, objs)
    # recall 1x1, move 2x2, craftplank 1x1x1, equip 1x1, pick 1x2
    assert len(acts) == 1 + 4 + 1 + 1 + 2
    assert [str(a) for a in acts[1:5]] == ["move(l0,l0)", "move(l0,l1)", "move(l1,l0)", "move(l1,l1)"]


def test_instance_round_trip_and_plan_text():
    d, train, _ = generate_suite(SuiteConfig(grid_w=3, grid_h=3), 4, 1, seed=1)
    for inst in train:
        back = parse_instance(print_instance(inst), d)
        assert back == inst
        plan = [d.schema(s.split("(")[0]).ground(s[s.index("(") + 1:-1].split(",")) for s in inst.meta["plan"]]
        assert parse_plan(format_plan(plan), d) == plan


def test_negative_goal_rejected(domain):
    text = "(define (problem p) (:objects a - static) (:observation (agentat a)) (:goal (not (agentat a))))"
    with pytest.raises(UnsupportedConstruct):
        parse_instance(text, domain)


@given(st.lists(st.sampled_from(["a", "b", "c"]), min_size=1, max_size=6))
def test_move_chain_keeps_single_agent_position(path):
    d = minecraft_domain()
    locs = ["a", "b", "c"]
    adj = {Atom("adjacent", (x, y)) for x in locs for y in locs if x != y}
    s = SymbolicState(frozenset(adj | {Atom("agentat", ("a",))}))
    for nxt in path:
        here = next(a.args[0] for a in s.atoms if a.pred == "agentat")
        act = d.schema("move").ground([here, nxt])
        if applicable(s, act):
            s = apply(s, act)
        assert sum(a.pred == "agentat" for a in s.atoms) == 1
    assert goal_satisfied(s, adj)
