"""Recursive-descent parser for the constraint language.

Grammar (precedence NOT > AND > OR > IMPLIES, `->` right-associative):

    formula     := implication
    implication := disjunction ("->" implication)?
    disjunction := conjunction ("or" conjunction)*
    conjunction := unary ("and" unary)*
    unary       := "not" unary | quantified | core annotation?
    core        := "(" formula ")" | atom
    quantified  := ("forall" | "exists") IDENT "in" INT ".." INT ":" formula
    annotation  := "{" "k" "=" NUMBER "}"
    atom        := IDENT ("=" | "!=") STRING
                 | expr CMP expr
                 | expr "in" "[" NUMBER "," NUMBER "]"
    expr        := term (("+" | "-") term)*
    term        := factor ("*" factor)*
    factor      := NUMBER | ref | "(" expr ")" | "-" factor
    ref         := IDENT ("[" expr "]")?

Quantifier ranges are half-open: `forall t in 0..30` binds t to 0..29.
`e in [l, u]` is sugar for `e >= l and e <= u`. String equality targets a
categorical column's one-hot component.
"""

from __future__ import annotations

import re

from .ast import (
    And,
    Arith,
    Cmp,
    FeatureRef,
    Implies,
    Lit,
    NegExpr,
    Not,
    OneHotIs,
    Or,
    Quant,
    SeriesRef,
    set_hardness,
)

KEYWORDS = {"and", "or", "not", "forall", "exists", "in"}
CMP_OPS = {">=", "<=", ">", "<", "=", "!="}


class ConstraintSyntaxError(ValueError):
    def __init__(self, message, line, col):
        super().__init__(f"{message} (line {line}, column {col})")
        self.line = line
        self.col = col


_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<comment>\#[^\n]*)
  | (?P<number>\d+\.(?!\.)\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?|\d+(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<string>"[^"\n]*")
  | (?P<op>->|\.\.|>=|<=|!=|==|[><=+\-*()\[\]{},:])
""",
    re.VERBOSE,
)


class Token:
    __slots__ = ("kind", "text", "line", "col")

    def __init__(self, kind, text, line, col):
        self.kind = kind
        self.text = text
        self.line = line
        self.col = col

    def __repr__(self):
        return f"Token({self.kind}, {self.text!r})"


def tokenize(text):
    tokens = []
    pos, line, line_start = 0, 1, 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ConstraintSyntaxError(f"unexpected character {text[pos]!r}", line, pos - line_start + 1)
        kind = m.lastgroup
        tok_text = m.group()
        if kind not in ("ws", "comment"):
            if kind == "ident" and tok_text in KEYWORDS:
                kind = "keyword"
            if kind == "op" and tok_text == "==":
                tok_text = "="
            tokens.append(Token(kind, tok_text, line, pos - line_start + 1))
        newlines = tok_text.count("\n")
        if newlines:
            line += newlines
            line_start = pos + tok_text.rfind("\n") + 1
        pos = m.end()
    tokens.append(Token("eof", "", line, pos - line_start + 1))
    return tokens


class _Parser:
    def __init__(self, tokens):
        self.tokens = tokens
        self.pos = 0

    def peek(self, ahead=0):
        return self.tokens[min(self.pos + ahead, len(self.tokens) - 1)]

    def next(self):
        tok = self.tokens[self.pos]
        self.pos = min(self.pos + 1, len(self.tokens) - 1)
        return tok

    def expect(self, text, kind=None):
        tok = self.peek()
        if tok.text != text or (kind and tok.kind != kind):
            self.fail(f"expected {text!r}, found {tok.text!r}")
        return self.next()

    def fail(self, message):
        tok = self.peek()
        raise ConstraintSyntaxError(message, tok.line, tok.col)

    # formula levels ---------------------------------------------------------

    def formula(self):
        left = self.disjunction()
        if self.peek().text == "->":
            self.next()
            return Implies(left, self.formula())
        return left

    def disjunction(self):
        items = [self.conjunction()]
        while self.peek().kind == "keyword" and self.peek().text == "or":
            self.next()
            items.append(self.conjunction())
        return items[0] if len(items) == 1 else Or(tuple(items))

    def conjunction(self):
        items = [self.unary()]
        while self.peek().kind == "keyword" and self.peek().text == "and":
            self.next()
            items.append(self.unary())
        return items[0] if len(items) == 1 else And(tuple(items))

    def unary(self):
        tok = self.peek()
        if tok.kind == "keyword" and tok.text == "not":
            self.next()
            return Not(self.unary())
        if tok.kind == "keyword" and tok.text in ("forall", "exists"):
            return self.annotated(self.quantified())
        return self.annotated(self.core())

    def annotated(self, node):
        if self.peek().text == "{":
            self.next()
            key = self.next()
            if key.text != "k":
                self.fail(f"unknown annotation {key.text!r} (only k=VALUE is supported)")
            self.expect("=")
            num = self.next()
            if num.kind != "number":
                self.fail("annotation value must be a number")
            self.expect("}")
            node = set_hardness(node, float(num.text))
        return node

    def quantified(self):
        kind = self.next().text
        var = self.next()
        if var.kind != "ident":
            self.fail("expected a quantifier variable name")
        kw = self.next()
        if not (kw.kind == "keyword" and kw.text == "in"):
            self.fail("expected 'in' after quantifier variable")
        lo = self.int_literal()
        self.expect("..")
        hi = self.int_literal()
        self.expect(":")
        body = self.formula()
        return Quant(kind, var.text, lo, hi, body)

    def int_literal(self):
        tok = self.next()
        if tok.kind != "number" or not re.fullmatch(r"\d+", tok.text):
            self.fail("expected an integer bound")
        return int(tok.text)

    def core(self):
        if self.peek().text == "(":
            # Either a parenthesized formula or a parenthesized arithmetic
            # expression starting an atom; try the atom interpretation first.
            mark = self.pos
            try:
                return self.atom()
            except ConstraintSyntaxError:
                self.pos = mark
            self.expect("(")
            inner = self.formula()
            self.expect(")")
            return inner
        return self.atom()

    def atom(self):
        # categorical (in)equality: IDENT (= | !=) "category"
        if (
            self.peek().kind == "ident"
            and self.peek(1).text in ("=", "!=")
            and self.peek(2).kind == "string"
        ):
            column = self.next().text
            op = self.next().text
            category = self.next().text[1:-1]
            return OneHotIs(column, category, equal=(op == "="))
        left = self.expr()
        tok = self.peek()
        if tok.kind == "keyword" and tok.text == "in":
            self.next()
            self.expect("[")
            lo = self.signed_number()
            self.expect(",")
            hi = self.signed_number()
            self.expect("]")
            return And((Cmp(">=", left, Lit(lo)), Cmp("<=", left, Lit(hi))))
        if tok.text not in CMP_OPS:
            self.fail(f"expected a comparison operator, found {tok.text!r}")
        op = self.next().text
        if op == "!=":
            self.fail("'!=' is only supported against a categorical value in quotes")
        right = self.expr()
        return Cmp(op, left, right)

    def signed_number(self):
        sign = 1.0
        if self.peek().text == "-":
            self.next()
            sign = -1.0
        tok = self.next()
        if tok.kind != "number":
            self.fail("expected a number")
        return sign * float(tok.text)

    # arithmetic -------------------------------------------------------------

    def expr(self):
        left = self.term()
        while self.peek().text in ("+", "-"):
            op = self.next().text
            left = Arith(op, left, self.term())
        return left

    def term(self):
        left = self.factor()
        while self.peek().text == "*":
            self.next()
            left = Arith("*", left, self.factor())
        return left

    def factor(self):
        tok = self.peek()
        if tok.text == "-":
            self.next()
            return NegExpr(self.factor())
        if tok.kind == "number":
            self.next()
            return Lit(float(tok.text))
        if tok.kind == "ident":
            name = self.next().text
            if self.peek().text == "[":
                self.next()
                index = self.expr()
                self.expect("]")
                return SeriesRef(name, index)
            return FeatureRef(name)
        if tok.text == "(":
            self.next()
            inner = self.expr()
            self.expect(")")
            return inner
        self.fail(f"expected a value, found {tok.text!r}")


def parse(text, schema=None, instances=1):
    """Parse constraint text into a Formula; validates feature references
    against the schema when one is given."""
    if not text or not text.strip():
        raise ConstraintSyntaxError("empty constraint", 1, 1)
    parser = _Parser(tokenize(text))
    formula = parser.formula()
    trailing = parser.peek()
    if trailing.kind != "eof":
        parser.fail(f"unexpected trailing input {trailing.text!r}")
    if schema is not None:
        from .compiler import validate

        validate(formula, schema, instances=instances)
    return formula
