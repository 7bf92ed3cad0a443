"""Formula AST: arithmetic terms, comparison atoms, connectives, quantifiers."""

from __future__ import annotations

from dataclasses import dataclass


# --- arithmetic expressions -------------------------------------------------


@dataclass(frozen=True)
class Lit:
    value: float


@dataclass(frozen=True)
class Var:
    """A quantifier-bound integer variable."""

    name: str


@dataclass(frozen=True)
class FeatureRef:
    """A scalar column reference, possibly instance-suffixed (alcohol_2)."""

    name: str


@dataclass(frozen=True)
class SeriesRef:
    """An indexed series reference like S[t] or I[25]."""

    name: str
    index: object  # Lit | Var | Arith over those


@dataclass(frozen=True)
class Arith:
    op: str  # '+', '-', '*'
    left: object
    right: object


@dataclass(frozen=True)
class NegExpr:
    arg: object


# --- formulas ----------------------------------------------------------------

STRICT_COMPLEMENT = {">=": "<", "<=": ">", ">": "<=", "<": ">="}


@dataclass(frozen=True)
class Cmp:
    """Comparison atom. Strict and non-strict forms compile identically;
    hard evaluation keeps them distinct. ``k`` is an optional per-atom
    hardness override."""

    op: str  # '>=', '<=', '>', '<', '='
    left: object
    right: object
    k: float | None = None


@dataclass(frozen=True)
class OneHotIs:
    """Categorical (in)equality: force a one-hot component to 1 or 0."""

    column: str
    category: str
    equal: bool
    k: float | None = None


@dataclass(frozen=True)
class And:
    items: tuple


@dataclass(frozen=True)
class Or:
    items: tuple


@dataclass(frozen=True)
class Not:
    item: object


@dataclass(frozen=True)
class Implies:
    antecedent: object
    consequent: object


@dataclass(frozen=True)
class Quant:
    """Bounded quantifier over the half-open integer range [lo, hi)."""

    kind: str  # 'forall' | 'exists'
    var: str
    lo: int
    hi: int
    body: object


def set_hardness(f, k):
    """Apply a hardness annotation to every atom in the subtree that does
    not already carry one (innermost annotation wins)."""
    if isinstance(f, Cmp):
        return f if f.k is not None else Cmp(f.op, f.left, f.right, k=k)
    if isinstance(f, OneHotIs):
        return f if f.k is not None else OneHotIs(f.column, f.category, f.equal, k=k)
    if isinstance(f, And):
        return And(tuple(set_hardness(i, k) for i in f.items))
    if isinstance(f, Or):
        return Or(tuple(set_hardness(i, k) for i in f.items))
    if isinstance(f, Not):
        return Not(set_hardness(f.item, k))
    if isinstance(f, Implies):
        return Implies(set_hardness(f.antecedent, k), set_hardness(f.consequent, k))
    if isinstance(f, Quant):
        return Quant(f.kind, f.var, f.lo, f.hi, set_hardness(f.body, k))
    raise TypeError(f"not a formula node: {f!r}")
