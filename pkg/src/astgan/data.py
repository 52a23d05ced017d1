"""Corpus records, tokenization, vocabularies and the synthetic job-query corpus."""

from __future__ import annotations

import json
import logging
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grammar import END, ActionSpace, AstNode, Grammar, parse_code, render_code

log = logging.getLogger(__name__)

PAD, UNK = "<pad>", "<unk>"
PAD_ID, UNK_ID, END_ID = 0, 1, 2

_TOKEN_RE = re.compile(r"""(?<![\w'"])"[^"]*"|(?<![\w'"])'[^']*'|\w+|[^\w\s]""")


class CorpusError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace and punctuation; quoted strings stay whole."""
    out = []
    for m in _TOKEN_RE.finditer(text):
        tok = m.group(0)
        out.append(tok if tok[0] in "'\"" and len(tok) > 1 else tok.lower())
    return out


@dataclass
class Example:
    id: str
    nl: list[str]
    code: str
    ast: AstNode
    text: str = ""

    def to_json(self) -> str:
        return json.dumps({"id": self.id, "nl": self.text or " ".join(self.nl), "code": self.code})


def make_example(rec_id: str, text: str, code: str, g: Grammar) -> Example:
    ast = parse_code(code, g)
    if render_code(ast, g) != code:
        raise CorpusError(f"record {rec_id}: code is not in canonical form: {code!r}")
    return Example(rec_id, tokenize(text), code, ast, text)


def load_corpus(path, g: Grammar) -> list[Example]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                rec_id, text, code = str(rec["id"]), rec["nl"], rec["code"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise CorpusError(f"{path}:{lineno}: malformed record ({exc})") from None
            try:
                out.append(make_example(rec_id, text, code, g))
            except ValueError as exc:
                raise CorpusError(f"record {rec_id!r} ({path}:{lineno}): {exc}") from None
    if not out:
        log.warning("corpus %s is empty", path)
    return out


def save_corpus(examples, path) -> None:
    Path(path).write_text("".join(ex.to_json() + "\n" for ex in examples), encoding="utf-8")


class Vocabulary:
    """Token ids with PAD=0, UNK=1, END=2 reserved."""

    def __init__(self, tokens, min_freq=1):
        self.min_freq = min_freq
        self.tokens = [PAD, UNK, END] + [t for t in tokens if t not in (PAD, UNK, END)]
        self.index = {t: i for i, t in enumerate(self.tokens)}

    @classmethod
    def build(cls, counts: Counter, min_freq=1) -> "Vocabulary":
        kept = sorted((t for t, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
        return cls(kept, min_freq)

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, tok):
        return tok in self.index

    def id(self, tok) -> int:
        return self.index.get(tok, UNK_ID)

    def ids(self, toks) -> list[int]:
        return [self.id(t) for t in toks]

    @property
    def ordinary(self) -> list[str]:
        return self.tokens[3:]


def leaf_tokens(ast: AstNode):
    if ast.is_leaf:
        yield from ast.tokens
        return
    for c in ast.children:
        for x in c if isinstance(c, tuple) else (c,):
            yield from leaf_tokens(x)


def build_vocab(examples, g: Grammar, min_freq=1, max_input_len=40):
    """Returns ``(nl_vocab, code_vocab, action_space)``."""
    if not examples:
        raise CorpusError("build_vocab: empty corpus")
    nl_counts = Counter(t for ex in examples for t in ex.nl)
    code_counts = Counter(t for ex in examples for t in leaf_tokens(ex.ast))
    nl_vocab = Vocabulary.build(nl_counts, min_freq)
    code_vocab = Vocabulary.build(code_counts, min_freq)
    return nl_vocab, code_vocab, ActionSpace(g, code_vocab.ordinary, max_input_len)


# ------------------------------------------------------------ synthetic data

LANGUAGES = ["java", "python", "perl", "haskell", "lisp", "prolog", "cobol", "fortran", "ruby", "scala",
             "golang", "javascript", "php", "delphi", "pascal", "ada", "smalltalk", "erlang", "ocaml",
             "visual basic"]
CITIES = ["austin", "dallas", "houston", "boston", "seattle", "denver", "chicago", "atlanta", "phoenix",
          "portland", "new york", "san francisco", "los angeles", "san antonio", "salt lake city"]
COMPANIES = ["microsoft", "ibm", "google", "oracle", "apple", "intel", "dell", "motorola", "compaq", "sun",
             "nvidia", "texas instruments", "hewlett packard"]
TITLES = ["developer", "engineer", "programmer", "consultant", "analyst", "administrator", "architect",
          "tester", "web developer", "project manager", "software engineer"]
PLATFORMS = ["windows", "linux", "unix", "solaris", "vms", "aix", "mac os", "windows nt"]
AREAS = ["databases", "networking", "graphics", "security", "ai", "machine learning", "games",
         "telecommunications", "finance", "multimedia"]
DEGREES = ["bs", "ms", "phd", "mba", "ba", "ma"]

_PHRASES = {
    "language": ["using {}", "that use {}", "involving {} programming"],
    "loc": ["in {}", "located in {}", "based in {}"],
    "company": ["at {}", "offered by {}", "at the company {}"],
    "title": ["as a {}", "with the title {}", "for a {} position"],
    "platform": ["on {}", "running on {}", "on the {} platform"],
    "area": ["in the area of {}", "in the {} field", "related to {}"],
    "salary_greater_than": ["paying more than {}", "that pay over {}", "with a salary above {}"],
    "req_exp": ["requiring {} years of experience", "with {} years experience", "needing {} years of experience"],
    "req_deg": ["for {} graduates", "requiring a {} degree", "with a {} degree"],
}
_NEGATED = {
    "language": ["not using {}", "that do not use {}"],
    "loc": ["not in {}", "outside {}"],
    "company": ["not at {}", "not offered by {}"],
}
_DISJUNCT = {
    "language": "using {} or {}",
    "loc": "in {} or {}",
    "company": "at {} or {}",
    "platform": "on {} or {}",
}
_OPENERS = ["what jobs are there", "show me jobs", "list all jobs", "which jobs are", "find jobs",
            "are there any jobs", "give me the jobs", "i want a job"]
_NAMED = {"language": LANGUAGES, "loc": CITIES, "company": COMPANIES, "title": TITLES,
          "platform": PLATFORMS, "area": AREAS, "req_deg": DEGREES}
_SYLLABLES = ["ba", "ko", "zu", "ri", "ta", "mo", "xe", "lin", "dar", "vo", "qui", "sen", "pra", "gol", "fi", "nex"]


def _invented_name(rng) -> str:
    return "".join(_SYLLABLES[int(rng.integers(len(_SYLLABLES)))] for _ in range(int(rng.integers(2, 4))))


def _entity(kind, rng, p_novel):
    if kind == "salary_greater_than":
        return str(int(rng.integers(30, 200)) * 1000)
    if kind == "req_exp":
        return str(int(rng.integers(1, 16)))
    if kind != "req_deg" and rng.random() < p_novel:
        return _invented_name(rng)
    pool = _NAMED[kind]
    return pool[int(rng.integers(len(pool)))]


def _choice(seq, rng):
    return seq[int(rng.integers(len(seq)))]


def generate_synthetic_corpus(g: Grammar, n: int, rng: np.random.Generator, p_novel=0.25) -> list[Example]:
    """``n`` aligned (utterance, query) pairs drawn from phrase templates.

    Entities come from open lists: with probability ``p_novel`` a name slot
    gets an invented word, so a share of the pairs can only be decoded by
    copying from the utterance.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    missing = [c for c in ["answer", "not", "or", *_PHRASES] if c not in g.by_constructor]
    if missing:
        raise ValueError(f"grammar lacks constructors needed by the job-query templates: {missing}")
    kinds = list(_PHRASES)
    out = []
    for i in range(n):
        k = int(rng.choice([1, 2, 3], p=[0.4, 0.4, 0.2]))
        chosen = [kinds[j] for j in rng.permutation(len(kinds))[:k]]
        phrases, goals = [], []
        for kind in chosen:
            r = rng.random()
            if kind in _NEGATED and r < 0.12:
                x = _entity(kind, rng, p_novel)
                phrases.append(_choice(_NEGATED[kind], rng).format(x))
                goals.append(f"not({kind}({x}))")
            elif kind in _DISJUNCT and r > 0.9:
                x = _entity(kind, rng, p_novel)
                y = _entity(kind, rng, p_novel)
                while y == x:
                    y = _entity(kind, rng, p_novel)
                phrases.append(_DISJUNCT[kind].format(x, y))
                goals.append(f"or({kind}({x}), {kind}({y}))")
            else:
                x = _entity(kind, rng, p_novel)
                phrases.append(_choice(_PHRASES[kind], rng).format(x))
                goals.append(f"{kind}({x})")
        joiner = " and " if rng.random() < 0.4 else " "
        text = _choice(_OPENERS, rng) + " " + joiner.join(phrases)
        if rng.random() < 0.3:
            text += " ?"
        code = f"answer([{', '.join(goals)}])"
        out.append(make_example(f"syn-{i:05d}", text, code, g))
    return out
