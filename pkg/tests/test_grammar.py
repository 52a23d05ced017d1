import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from astgan.grammar import (
    END, TOKEN, ActionSpace, ApplyRule, AstNode, CodeParseError, DuplicateConstructorError, FrontierState, GenToken,
    GrammarError, GrammarSyntaxError, IllegalActionError, IllTypedAstError, IncompleteDerivationError,
    TrailingActionsError, UndefinedNonterminalError, actions_to_ast, ast_to_actions, check_ast, legal_action_mask,
    load_grammar, parse_code, random_derivation, render_code, rule_mask,
)

from helpers import jobs_grammar, toy_grammar

WORDS = ["a", "b", "x1", "foo", "+", "42"]
GRAMMARS = {"jobs": jobs_grammar(), "toy": toy_grammar()}


def test_jobs_grammar_shape(jobs):
    assert jobs.root == "Query"
    user = [p for p in jobs.productions if not p.synthetic]
    assert len(user) == 12
    # Goal* adds one cons and one nil production
    assert len(jobs) == 14
    assert jobs.production(jobs.nil_id["Goal"]).fields == ()


def test_comment_and_blank_lines_ignored():
    g = load_grammar("# c\n\nA -> a(x:token)  # trailing\n")
    assert len(g) == 1 and g.root == "A"


def test_syntax_error_reports_line():
    with pytest.raises(GrammarSyntaxError) as exc:
        load_grammar("A -> a(x:token)\nA => b()\n")
    assert exc.value.lineno == 2


def test_undefined_nonterminal():
    with pytest.raises(UndefinedNonterminalError, match="B"):
        load_grammar("A -> a(x:B)\n")


def test_duplicate_constructor():
    with pytest.raises(DuplicateConstructorError):
        load_grammar("A -> a(x:token)\nA -> a(y:token)\n")


def test_empty_grammar_rejected():
    with pytest.raises(GrammarError):
        load_grammar("# nothing\n")


def test_unproductive_nonterminal_rejected():
    with pytest.raises(GrammarError):
        load_grammar("A -> a(x:A)\n")


def test_hash_is_stable_and_content_sensitive(jobs):
    again = load_grammar("\n".join(str(p) for p in jobs.productions if not p.synthetic))
    assert again.hash64() == jobs.hash64()
    other = load_grammar("Query -> answer(goals:Goal*)\nGoal -> language(name:token)\n")
    assert other.hash64() != jobs.hash64()


def test_reference_action_sequence(jobs):
    ast = parse_code("answer([language(java)])", jobs)
    acts = ast_to_actions(ast, jobs)
    ans = jobs.by_constructor["answer"].id
    lang = jobs.by_constructor["language"].id
    assert acts == [ApplyRule(ans), ApplyRule(jobs.cons_id["Goal"]), ApplyRule(lang), GenToken("java"), GenToken(END),
                    ApplyRule(jobs.nil_id["Goal"])]
    assert actions_to_ast(acts, jobs) == ast


def test_ill_typed_ast_reports_path(jobs):
    lang = jobs.by_constructor["language"].id
    bad = AstNode(jobs.by_constructor["answer"].id, ((AstNode(lang, (AstNode(lang, (AstNode.leaf("x"),)),)),),))
    with pytest.raises(IllTypedAstError) as exc:
        check_ast(bad, jobs)
    assert exc.value.path


def test_empty_leaf_is_ill_typed(jobs):
    lang = jobs.by_constructor["language"].id
    ast = AstNode(jobs.by_constructor["answer"].id, ((AstNode(lang, (AstNode.leaf(()),)),),))
    with pytest.raises(IllTypedAstError):
        check_ast(ast, jobs)


def test_truncated_and_trailing_actions(jobs):
    acts = ast_to_actions(parse_code("answer([loc(austin)])", jobs), jobs)
    with pytest.raises(IncompleteDerivationError):
        actions_to_ast(acts[:-1], jobs)
    with pytest.raises(TrailingActionsError):
        actions_to_ast(acts + [GenToken("x")], jobs)


def test_illegal_action_reports_step(jobs):
    lang = jobs.by_constructor["language"].id
    with pytest.raises(IllegalActionError) as exc:
        actions_to_ast([ApplyRule(lang)], jobs)
    assert exc.value.step == 0


def test_mask_examples(jobs):
    s = FrontierState.initial(jobs)
    m = rule_mask(s, jobs)
    assert m.sum() == 1 and m[jobs.by_constructor["answer"].id]
    s = s.apply(ApplyRule(jobs.by_constructor["answer"].id), jobs)
    m = rule_mask(s, jobs)
    assert set(np.flatnonzero(m)) == {jobs.cons_id["Goal"], jobs.nil_id["Goal"]}


def test_token_field_mask(jobs):
    space = ActionSpace(jobs, ["java", "austin"], 5)
    s = FrontierState.initial(jobs)
    for a in [ApplyRule(jobs.by_constructor["answer"].id), ApplyRule(jobs.cons_id["Goal"]),
              ApplyRule(jobs.by_constructor["language"].id)]:
        s = s.apply(a, jobs)
    assert s.top.type == TOKEN
    nl = ["jobs", "in", "java"]
    m = legal_action_mask(s, space, nl)
    assert not m[: space.n_rules].any()
    assert m[space.vocab_offset : space.end_index].all()
    assert not m[space.end_index]  # a field cannot close before its first token
    assert m[space.copy_offset : space.copy_offset + 3].all() and not m[space.copy_offset + 3 :].any()
    s = s.apply(GenToken("java"), jobs)
    m = legal_action_mask(s, space, nl)
    assert m[space.vocab_offset : space.copy_offset].all()


def test_mask_rejects_overlong_input(jobs):
    space = ActionSpace(jobs, [], 2)
    with pytest.raises(ValueError):
        legal_action_mask(FrontierState.initial(jobs), space, ["a", "b", "c"])


def test_render_and_parse(jobs):
    code = "answer([not(loc(new york)), or(company(ibm), company(dell))])"
    ast = parse_code(code, jobs)
    assert render_code(ast, jobs) == code
    assert parse_code("answer( [ not( loc( new   york ) ),or(company(ibm),company(dell)) ] )", jobs) == ast


@pytest.mark.parametrize("bad", ["", "answer(", "answer([language(java)]", "answer([frob(x)])",
                                 "answer([language()])", "answer([language(java)]) x"])
def test_parse_errors(jobs, bad):
    with pytest.raises(CodeParseError):
        parse_code(bad, jobs)


def test_toy_render_roundtrip(toy):
    code = "program([assign(x, binop(name(y), +, num(1))), ifs(name(c), [call(f, [])], [])])"
    assert render_code(parse_code(code, toy), toy) == code


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["jobs", "toy"]))
def test_roundtrip_and_mask_property(seed, which):
    g = GRAMMARS[which]
    rng = np.random.default_rng(seed)
    acts = random_derivation(g, rng, WORDS, max_steps=300)
    if acts is None:
        return
    space = ActionSpace(g, WORDS, 4)
    s = FrontierState.initial(g)
    for a in acts:
        m = legal_action_mask(s, space, ["a", "b"])
        assert m.any()
        idx = a.production if isinstance(a, ApplyRule) else space.vocab_offset + space.vocab_index(a.token)
        assert m[idx]
        s = s.apply(a, g)
    assert s.complete
    ast = actions_to_ast(acts, g)
    check_ast(ast, g)
    assert ast_to_actions(ast, g) == acts
    assert parse_code(render_code(ast, g), g) == ast
