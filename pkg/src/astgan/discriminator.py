"""Consistency scorer for (utterance, AST) pairs.

The utterance is encoded with its own bidirectional LSTM; the AST is encoded
bottom-up, each internal node combining its children through per-position
transforms, so sibling order matters.  A two-class bilinear head compares the
root vector with the utterance summary:

    out_k = h_root W_k h_nl + b_k,    P_sim = softmax(out)[match]
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Value, xavier_uniform
from .data import UNK, Vocabulary, tokenize
from .grammar import AstNode, Grammar, check_ast, map_leaves, render_code
from .nn import BiEncoder, dropper

MATCH, MISMATCH = 0, 1


@dataclass
class TreeEncoding:
    nodes: dict  # preorder path (tuple of child positions) -> (Ht,) vector
    root: Value


@dataclass
class ConsistencyScore:
    logits: np.ndarray
    p_sim: float


def mask_shared_tokens(nl_tokens, ast: AstNode, rate: float, rng):
    """Replace a random subset of the utterance's token types by ``<unk>`` in the utterance and the tree alike.

    A word that was copied into the program stays consistent on both sides,
    so D learns that an unknown word matching an unknown leaf is no evidence
    of a mismatch.
    """
    hidden = {t for t in sorted(set(nl_tokens)) if rng.random() < rate}
    if not hidden:
        return nl_tokens, ast
    fn = lambda t: UNK if t in hidden else t  # noqa: E731
    return [fn(t) for t in nl_tokens], map_leaves(ast, fn)


def _desugar(ast: AstNode, g: Grammar):
    """Yield the tree as (production | None, children, tokens), lists as cons chains."""
    if ast.is_leaf:
        return (None, (), ast.tokens)
    p = g.production(ast.production)
    kids = []
    for f, c in zip(p.fields, ast.children):
        if f.is_sequence:
            chain = (g.nil_id[f.type], (), None)
            for x in reversed(c):
                chain = (g.cons_id[f.type], (_desugar(x, g), chain), None)
            kids.append(chain)
        else:
            kids.append(_desugar(c, g))
    return (ast.production, tuple(kids), None)


class Discriminator:
    def __init__(self, grammar: Grammar, nl_vocab: Vocabulary, code_vocab: Vocabulary, hidden_size=128,
                 embed_size=64, seed=0, program_encoder="tree", params: ParameterStore | None = None,
                 dropout=0.0, unk_rate=0.0):
        if program_encoder not in ("tree", "sequence"):
            raise ValueError(f"program_encoder must be 'tree' or 'sequence', got {program_encoder!r}")
        self.g = grammar
        self.nl_vocab = nl_vocab
        self.code_vocab = code_vocab
        self.hidden = hidden_size
        self.program_encoder = program_encoder
        self.dropout = dropout
        self.unk_rate = unk_rate
        rng = np.random.default_rng(seed)
        self.params = params if params is not None else ParameterStore(seed)
        p, H, E = self.params, hidden_size, embed_size
        self.encoder = BiEncoder(p, "dis.enc", len(nl_vocab), E, H, rng)
        if program_encoder == "tree":
            self.arity = max(len(x.fields) for x in grammar.productions)
            p.add("dis.leaf_emb", xavier_uniform((len(code_vocab), E), len(code_vocab), E, rng))
            p.add("dis.leaf.W", xavier_uniform((E, H), E, H, rng))
            p.add("dis.leaf.b", np.zeros(H))
            p.add("dis.prod_emb", xavier_uniform((len(grammar), H), len(grammar), H, rng))
            for k in range(self.arity):
                p.add(f"dis.child.{k}", xavier_uniform((H, H), H, H, rng))
            p.add("dis.node.b", np.zeros(H))
            prog_dim = H
        else:
            surface = [x.constructor for x in grammar.productions if not x.synthetic] + list("()[],")
            self.surface_vocab = Vocabulary(surface + code_vocab.ordinary)
            self.code_encoder = BiEncoder(p, "dis.code_enc", len(self.surface_vocab), E, H, rng)
            prog_dim = 2 * H
        self.prog_dim = prog_dim
        p.add("dis.head.W0", xavier_uniform((prog_dim, 2 * H), prog_dim, 2 * H, rng))
        p.add("dis.head.W1", xavier_uniform((prog_dim, 2 * H), prog_dim, 2 * H, rng))
        p.add("dis.head.b", np.zeros(2))

    # ------------------------------------------------------- tree encoder

    def _encode_trees(self, asts, drop=None):
        """Bottom-up encoding of a batch of trees, one height level at a time.

        Returns the (B, H) root Value and, per tree, a map from node path to
        row index in the stacked node table.
        """
        p, H = self.params, self.hidden
        leaves, nodes = [], []  # nodes: (height, production, child refs, tree, path)
        paths = []

        def walk(t, b, path):
            prod, kids, toks = t
            if prod is None:
                leaves.append([self.code_vocab.id(x) for x in toks])
                ref = ("leaf", len(leaves) - 1)
                paths.append((b, path, ref))
                return ref, 0
            refs, hmax = [], 0
            for i, k in enumerate(kids):
                r, hh = walk(k, b, path + (i,))
                refs.append(r)
                hmax = max(hmax, hh)
            nodes.append((hmax + 1, prod, refs))
            ref = ("node", len(nodes) - 1)
            paths.append((b, path, ref))
            return ref, hmax + 1

        roots = []
        for b, ast in enumerate(asts):
            check_ast(ast, self.g)
            roots.append(walk(_desugar(ast, self.g), b, ())[0])

        # rows: 0 is a zero vector, then leaves, then nodes level by level
        row_of = {}
        L = max(len(x) for x in leaves) if leaves else 1
        tables = [Value(np.zeros((1, H)))]
        nrows = 1
        if leaves:
            ids = np.zeros((len(leaves), L), np.int64)
            w = np.zeros((len(leaves), L, 1), np.float32)
            for i, x in enumerate(leaves):
                ids[i, : len(x)] = x
                w[i, : len(x)] = 1.0 / len(x)
            emb = ad.embedding_lookup(p["dis.leaf_emb"], ids)
            if drop is not None:
                emb = drop(emb)
            emb = ad.sum(ad.mul(emb, w), axis=1)
            tables.append(ad.tanh(ad.add(ad.matmul(emb, p["dis.leaf.W"]), p["dis.leaf.b"])))
            for i in range(len(leaves)):
                row_of[("leaf", i)] = nrows + i
            nrows += len(leaves)
        by_height: dict[int, list[int]] = {}
        for i, (hgt, _, _) in enumerate(nodes):
            by_height.setdefault(hgt, []).append(i)
        for hgt in sorted(by_height):
            idx = by_height[hgt]
            table = ad.concat(tables, axis=0) if len(tables) > 1 else tables[0]
            acc = ad.embedding_lookup(p["dis.prod_emb"], [nodes[i][1] for i in idx])
            for k in range(self.arity):
                rows = [row_of[nodes[i][2][k]] if k < len(nodes[i][2]) else 0 for i in idx]
                if any(rows):
                    acc = ad.add(acc, ad.matmul(ad.take_rows(table, rows), p[f"dis.child.{k}"]))
            tables.append(ad.tanh(ad.add(acc, p["dis.node.b"])))
            for j, i in enumerate(idx):
                row_of[("node", i)] = nrows + j
            nrows += len(idx)
        table = ad.concat(tables, axis=0)
        root = ad.take_rows(table, [row_of[r] for r in roots])
        node_rows = [dict() for _ in asts]
        for b, path, ref in paths:
            node_rows[b][path] = row_of[ref]
        return root, table, node_rows

    def encode_tree(self, ast: AstNode) -> TreeEncoding:
        root, table, node_rows = self._encode_trees([ast])
        nodes = {path: table.data[r] for path, r in node_rows[0].items()}
        return TreeEncoding(nodes, ad.reshape(root, (self.hidden,)))

    def _encode_programs(self, asts, drop=None) -> Value:
        if self.program_encoder == "tree":
            return self._encode_trees(asts, drop)[0]
        seqs = [self.surface_vocab.ids(tokenize(render_code(a, self.g))) for a in asts]
        return self.code_encoder(seqs, drop).summary

    # -------------------------------------------------------------- head

    def logits(self, nl_lists, asts, rng=None) -> Value:
        """(B, 2) class logits, column 0 = match; ``rng`` enables dropout."""
        if len(nl_lists) != len(asts) or not asts:
            raise ValueError("logits: need equally many utterances and trees, at least one")
        p = self.params
        drop = dropper(self.dropout, rng)
        h_nl = self.encoder([self.nl_vocab.ids(x) for x in nl_lists], drop).summary
        h_r = self._encode_programs(asts, drop)
        if drop is not None:
            h_nl, h_r = drop(h_nl), drop(h_r)
        cols = [ad.sum(ad.mul(ad.matmul(h_r, p[f"dis.head.W{k}"]), h_nl), axis=1) for k in (0, 1)]
        return ad.add(ad.stack(cols, axis=1), p["dis.head.b"])

    def warm_start_encoder(self, gen) -> bool:
        """Copy the generator's utterance encoder into D's when vocabularies and shapes agree.

        The copy initialises D's encoder; the two sets of parameters stay separate.
        """
        if gen.nl_vocab.tokens != self.nl_vocab.tokens:
            return False
        pairs = [(k, "dis." + k[len("gen."):]) for k, _ in gen.params.items() if k.startswith("gen.enc.")]
        if not all(d in self.params and self.params[d].shape == gen.params[k].shape for k, d in pairs):
            return False
        for k, d in pairs:
            self.params[d].data[...] = gen.params[k].data
        return True

    def p_sim(self, nl_lists, asts) -> np.ndarray:
        with ad.no_grad():
            return ad.softmax(self.logits(nl_lists, asts), axis=1).data[:, MATCH].astype(np.float64)

    def score(self, nl_tokens, ast) -> ConsistencyScore:
        with ad.no_grad():
            out = self.logits([nl_tokens], [ast])
            prob = ad.softmax(out, axis=1)
        return ConsistencyScore(out.data[0].copy(), float(prob.data[0, MATCH]))

    def loss(self, nl_lists, asts, labels, rng=None) -> Value:
        """Mean of -[y log D + (1 - y) log(1 - D)] with D = P_sim.

        With ``rng`` given, training-time noise applies: shared-token masking
        at ``unk_rate`` and dropout.
        """
        if not asts:
            raise ValueError("discriminator_loss: empty batch")
        labels = np.asarray(labels)
        if rng is not None and self.unk_rate > 0:
            pairs = [mask_shared_tokens(x, a, self.unk_rate, rng) for x, a in zip(nl_lists, asts)]
            nl_lists, asts = [p[0] for p in pairs], [p[1] for p in pairs]
        lsm = ad.log_softmax(self.logits(nl_lists, asts, rng), axis=1)
        picked = ad.pick(lsm, np.where(labels > 0, MATCH, MISMATCH))
        return ad.mul(ad.mean(picked), -1.0)


def discriminator_loss(dis: Discriminator, batch) -> Value:
    """``batch`` holds (nl_tokens, ast, label) triples, label 1 = real."""
    if not batch:
        raise ValueError("discriminator_loss: empty batch")
    nl, asts, labels = zip(*batch)
    return dis.loss(list(nl), list(asts), list(labels))
