"""Grammars shared across test modules."""

from pathlib import Path

from astgan.config import asset
from astgan.grammar import load_grammar

TOY_GRAMMAR = """
# statements and expressions with two sequence types
Prog -> program(body:Stmt*)
Stmt -> assign(target:token, value:Expr)
Stmt -> call(fn:token, args:Expr*)
Stmt -> ifs(cond:Expr, then:Stmt*, orelse:Stmt*)
Expr -> name(id:token)
Expr -> num(n:token)
Expr -> binop(left:Expr, op:token, right:Expr)
"""


def jobs_grammar():
    return load_grammar(Path(asset("jobs.grammar")).read_text())


def toy_grammar():
    return load_grammar(TOY_GRAMMAR)


# acceptance lines, printed by the terminal-summary hook in conftest.py
ACCEPTANCE = {}


def record(criterion: int, ok: bool, detail: str) -> bool:
    ACCEPTANCE[criterion] = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}"
    return ok
