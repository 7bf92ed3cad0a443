"""Compilation of formulas to differentiable log-weights c(x) <= 0.

Soft semantics, per connective:
  inequality a >= b   ->  -ln(1 + e^{-k(a-b)})
  inequality a <= b   ->  -ln(1 + e^{-k(b-a)})
  equality   a = b    ->  c[a >= b] + c[a <= b]
  conjunction         ->  sum
  disjunction         ->  ln(e^x + e^y - e^{x+y}), evaluated stably as
                          ln(1 + e^{min-max} - e^{min}) + max
Negation never appears in compiled formulas: inputs are rewritten to
negation normal form first, where negated inequalities flip.

Constraints are authored in original data units; compilation composes
feature reads with the inverse normalization so the gradient lives in
model space.
"""

from __future__ import annotations

import math

import numpy as np

from .. import autodiff as ad
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
    Var,
    STRICT_COMPLEMENT,
)

LN2 = math.log(2.0)


class ConstraintSchemaError(ValueError):
    pass


def _atom_count(f):
    if isinstance(f, (Cmp, OneHotIs)):
        return 1
    if isinstance(f, (And, Or)):
        return sum(_atom_count(i) for i in f.items)
    return 1


def _flatten_and(items):
    flat = []
    for item in items:
        if isinstance(item, And):
            flat.extend(_flatten_and(item.items))
        else:
            flat.append(item)
    return flat


def _expr_shape(e):
    """Structure of an expression with references erased; two expressions
    with equal shapes can evaluate as one stacked block."""
    if isinstance(e, Lit):
        return "lit"
    if isinstance(e, (FeatureRef, SeriesRef)):
        return "ref"
    if isinstance(e, Arith):
        l, r = _expr_shape(e.left), _expr_shape(e.right)
        if l is None or r is None:
            return None
        return (e.op, l, r)
    if isinstance(e, NegExpr):
        inner = _expr_shape(e.arg)
        return None if inner is None else ("neg", inner)
    return None


def stable_or(x, y):
    """Log-weight of a disjunction: ln(e^x + e^y - e^{x+y}).

    Evaluated as ln(1 + e^{min-max} - e^{min}) + max, which keeps the log
    argument in [1, 2] and stays finite for arbitrarily negative inputs.
    """
    x = float(x)
    y = float(y)
    if x > 0 or y > 0:
        raise ValueError(f"log-weights must be <= 0, got ({x}, {y})")
    lo, hi = (x, y) if x <= y else (y, x)
    return math.log1p(math.exp(lo - hi) - math.exp(lo)) + hi


# --- reference resolution ----------------------------------------------------


def _split_instance(name, instances):
    """alcohol_2 -> ('alcohol', 1) in multi-instance mode."""
    if instances == 1:
        return name, 0
    base, _, suffix = name.rpartition("_")
    if base and suffix.isdigit():
        idx = int(suffix)
        if 1 <= idx <= instances:
            return base, idx - 1
    raise ConstraintSchemaError(
        f"{name!r}: multi-instance constraints must suffix every reference "
        f"with an instance index _1.._{instances}"
    )


def _resolve_slot(ref, schema, instances, env):
    if isinstance(ref, FeatureRef):
        name, inst = _lookup(ref.name, schema, instances)
        try:
            slot = schema.numeric_slot(name)
        except (KeyError, ValueError) as e:
            raise ConstraintSchemaError(str(e)) from None
        return inst * schema.width + slot
    if isinstance(ref, SeriesRef):
        name, inst = _lookup(ref.name, schema, instances)
        idx = _eval_index(ref.index, env)
        try:
            slot = schema.series_slot(name, idx)
        except (KeyError, ValueError, IndexError) as e:
            raise ConstraintSchemaError(str(e)) from None
        return inst * schema.width + slot
    raise TypeError(f"not a reference: {ref!r}")


def _lookup(name, schema, instances):
    if instances == 1:
        if name in schema._by_name:
            return name, 0
        raise ConstraintSchemaError(f"unknown column {name!r}")
    base, inst = _split_instance(name, instances)
    if base in schema._by_name:
        return base, inst
    raise ConstraintSchemaError(f"unknown column {base!r} (from {name!r})")


def _eval_index(e, env):
    if isinstance(e, Lit):
        v = e.value
        if v != int(v):
            raise ConstraintSchemaError(f"series index must be an integer, got {v}")
        return int(v)
    if isinstance(e, (FeatureRef,)):
        if e.name in env:
            return env[e.name]
        raise ConstraintSchemaError(f"unbound index variable {e.name!r}")
    if isinstance(e, Var):
        if e.name in env:
            return env[e.name]
        raise ConstraintSchemaError(f"unbound index variable {e.name!r}")
    if isinstance(e, Arith):
        l, r = _eval_index(e.left, env), _eval_index(e.right, env)
        return {"+": l + r, "-": l - r, "*": l * r}[e.op]
    if isinstance(e, NegExpr):
        return -_eval_index(e.arg, env)
    raise ConstraintSchemaError(f"unsupported series index expression: {e!r}")


# --- negation normal form ----------------------------------------------------


def to_nnf(f, negate=False, env=None):
    """Rewrite to NNF: no NOT, no IMPLIES, quantifiers expanded to finite
    conjunctions/disjunctions, series indices resolved to constants.
    Negated inequalities flip to their strict complements."""
    env = env or {}
    if isinstance(f, Cmp):
        if f.op == "=":
            if negate:
                raise ConstraintSchemaError(
                    "negation of a real-valued equality has no supported soft semantics"
                )
            return Cmp("=", _subst(f.left, env), _subst(f.right, env), k=f.k)
        op = STRICT_COMPLEMENT[f.op] if negate else f.op
        return Cmp(op, _subst(f.left, env), _subst(f.right, env), k=f.k)
    if isinstance(f, OneHotIs):
        return OneHotIs(f.column, f.category, f.equal != negate, k=f.k)
    if isinstance(f, Not):
        return to_nnf(f.item, not negate, env)
    if isinstance(f, Implies):
        # material implication: a -> b == not a or b
        a = to_nnf(f.antecedent, not negate, env)
        b = to_nnf(f.consequent, negate, env)
        return And((a, b)) if negate else Or((a, b))
    if isinstance(f, And):
        items = tuple(to_nnf(i, negate, env) for i in f.items)
        return Or(items) if negate else And(items)
    if isinstance(f, Or):
        items = tuple(to_nnf(i, negate, env) for i in f.items)
        return And(items) if negate else Or(items)
    if isinstance(f, Quant):
        values = range(f.lo, f.hi)
        items = tuple(to_nnf(f.body, negate, {**env, f.var: v}) for v in values)
        if not items:
            raise ConstraintSchemaError(f"empty quantifier range {f.lo}..{f.hi}")
        if len(items) == 1:
            return items[0]
        want_and = (f.kind == "forall") != negate
        return And(items) if want_and else Or(items)
    raise TypeError(f"not a formula node: {f!r}")


def _subst(e, env):
    """Replace quantifier variables with integer literals inside expressions."""
    if isinstance(e, Lit):
        return e
    if isinstance(e, Var):
        if e.name in env:
            return Lit(float(env[e.name]))
        raise ConstraintSchemaError(f"unbound variable {e.name!r}")
    if isinstance(e, FeatureRef):
        if e.name in env:  # bare quantifier variable used as a number
            return Lit(float(env[e.name]))
        return e
    if isinstance(e, SeriesRef):
        return SeriesRef(e.name, Lit(float(_eval_index(e.index, env))))
    if isinstance(e, Arith):
        return Arith(e.op, _subst(e.left, env), _subst(e.right, env))
    if isinstance(e, NegExpr):
        return NegExpr(_subst(e.arg, env))
    raise TypeError(f"not an expression node: {e!r}")


def is_nnf(f):
    if isinstance(f, (Cmp, OneHotIs)):
        return True
    if isinstance(f, (And, Or)):
        return all(is_nnf(i) for i in f.items)
    return False


def onehot_atom(column, category, equal=True):
    """Categorical atom: force one-hot component to 1 (equality) or 0."""
    return OneHotIs(column, category, equal=equal)


def validate(f, schema, instances=1):
    """Resolve every reference; raises ConstraintSchemaError on failure."""
    nnf = to_nnf(f)
    _walk_validate(nnf, schema, instances)
    return nnf


def _walk_validate(f, schema, instances):
    if isinstance(f, Cmp):
        for side in (f.left, f.right):
            _validate_expr(side, schema, instances)
    elif isinstance(f, OneHotIs):
        name, _ = _lookup(f.column, schema, instances)
        try:
            schema.onehot_slot(name, f.category)
        except (KeyError, ValueError) as e:
            raise ConstraintSchemaError(str(e)) from None
    elif isinstance(f, (And, Or)):
        for i in f.items:
            _walk_validate(i, schema, instances)
    else:
        raise TypeError(f"unexpected node after NNF: {f!r}")


def _validate_expr(e, schema, instances):
    if isinstance(e, Lit):
        return
    if isinstance(e, (FeatureRef, SeriesRef)):
        _resolve_slot(e, schema, instances, {})
        return
    if isinstance(e, Arith):
        _validate_expr(e.left, schema, instances)
        _validate_expr(e.right, schema, instances)
        return
    if isinstance(e, NegExpr):
        _validate_expr(e.arg, schema, instances)
        return
    raise TypeError(f"not an expression node: {e!r}")


# --- differentiable compilation -----------------------------------------------


class CompiledConstraint:
    """A formula compiled to a differentiable log-weight over model space.

    ``log_weight`` and ``grad`` operate on single model-space vectors;
    the ``*_batch`` forms evaluate whole (n, d) sample matrices in one
    graph pass (rows are independent, so seeding the batch backward with
    ones yields per-row gradients).
    """

    def __init__(self, formula, schema, k, lam, normalization, instances=1, one_sided=False):
        if k <= 0 or lam <= 0:
            raise ValueError("hardness k and scale lambda must be positive")
        if not is_nnf(formula):
            raise ValueError("compile requires a formula in negation normal form")
        self.formula = formula
        self.schema = schema
        self.k = float(k)
        self.lam = float(lam)
        self.normalization = normalization
        self.instances = int(instances)
        self.one_sided = one_sided
        _walk_validate(formula, schema, instances)
        self.dim = instances * schema.width
        self._mean = np.tile(normalization.mean, instances)
        self._std = np.tile(normalization.std, instances)
        self.graph = ad.DiffGraph(self._build, input_names=("x",))

    # graph construction

    def _build(self, leaves):
        x = leaves["x"]
        if x.value.ndim == 1:
            x = ad.broadcast_to(x, (1, self.dim))
        if x.value.shape[-1] != self.dim:
            raise ValueError(f"expected {self.dim} components, got {x.value.shape[-1]}")
        c = self._formula_node(self.formula, x)
        if self.lam != 1.0:
            c = ad.mul(c, self.lam)
        # disjunction chains can round a hair above zero; the invariant
        # c(x) <= 0 is enforced exactly (ties route the gradient through c)
        c = ad.minimum(c, 0.0)
        # a formula over literals only never touches x; broadcast to batch shape
        c = ad.broadcast_to(c, (x.value.shape[0], 1))
        return ad.sum_reduce(c, axis=1)

    def _formula_node(self, f, x):
        if isinstance(f, Cmp):
            return self._atom(f, x)
        if isinstance(f, OneHotIs):
            return self._onehot(f, x)
        if isinstance(f, And):
            # conjunction is an exact sum: flatten nested Ands so quantifier
            # expansions expose their atom families to the fusion pass
            items = _flatten_and(f.items)
            parts = []
            for group in self._fuse_groups(items):
                if isinstance(group, list):
                    parts.append(self._fused_atoms(group, x))
                else:
                    parts.append(self._formula_node(group, x))
            acc = parts[0]
            for p in parts[1:]:
                acc = ad.add(acc, p)
            return acc
        if isinstance(f, Or):
            acc = self._formula_node(f.items[0], x)
            for item in f.items[1:]:
                acc = self._stable_or_node(acc, self._formula_node(item, x))
            return acc
        raise TypeError(f"unexpected node in compiled formula: {f!r}")

    # Conjunctions produced by expanding a quantifier contain long runs of
    # structurally identical atoms that differ only in the columns they
    # touch; those compile to one block gather over stacked columns instead
    # of per-atom graph nodes. Same math, same gradients, ~atom-count fewer
    # tape nodes.

    def _fuse_groups(self, items):
        groups = []
        by_key = {}
        for item in items:
            key = self._atom_template(item)
            if key is None:
                groups.append(item)
                continue
            if key in by_key:
                by_key[key].append(item)
            else:
                bucket = [item]
                by_key[key] = bucket
                groups.append(bucket)
        return [g[0] if isinstance(g, list) and len(g) == 1 else g for g in groups]

    def _atom_template(self, f):
        """Structural key for fusable inequality atoms, or None."""
        if not isinstance(f, Cmp) or f.op == "=":
            return None
        shape_l = _expr_shape(f.left)
        shape_r = _expr_shape(f.right)
        if shape_l is None or shape_r is None:
            return None
        return (f.op, f.k, shape_l, shape_r)

    def _fused_atoms(self, atoms, x):
        k = atoms[0].k if atoms[0].k is not None else self.k
        lefts = self._expr_block([a.left for a in atoms], x)
        rights = self._expr_block([a.right for a in atoms], x)
        margin = ad.sub(lefts, rights)
        if atoms[0].op in ("<=", "<"):
            margin = ad.neg(margin)
        # literal-only groups have no batch dimension yet
        margin = ad.broadcast_to(margin, (x.value.shape[0], len(atoms)))
        return ad.sum_reduce(self._ineq(margin, k), axis=1, keepdims=True)

    def _expr_block(self, exprs, x):
        """Compile structurally identical expressions as one (batch, n) block."""
        e0 = exprs[0]
        if isinstance(e0, Lit):
            return ad.Tensor(np.array([e.value for e in exprs]))
        if isinstance(e0, (FeatureRef, SeriesRef)):
            slots = [_resolve_slot(e, self.schema, self.instances, {}) for e in exprs]
            cols = ad.select_columns(x, slots)
            return ad.add(ad.mul(cols, self._std[slots]), self._mean[slots])
        if isinstance(e0, Arith):
            l = self._expr_block([e.left for e in exprs], x)
            r = self._expr_block([e.right for e in exprs], x)
            if e0.op == "+":
                return ad.add(l, r)
            if e0.op == "-":
                return ad.sub(l, r)
            return ad.mul(l, r)
        if isinstance(e0, NegExpr):
            return ad.neg(self._expr_block([e.arg for e in exprs], x))
        raise TypeError(f"not an expression node: {e0!r}")

    @staticmethod
    def _stable_or_node(a, b):
        lo = ad.minimum(a, b)
        hi = ad.maximum(a, b)
        arg = ad.add(ad.add(1.0, ad.exp(ad.sub(lo, hi))), ad.neg(ad.exp(lo)))
        return ad.add(ad.ln(arg), hi)

    def _atom(self, atom, x):
        k = atom.k if atom.k is not None else self.k
        margin = ad.sub(self._expr(atom.left, x), self._expr(atom.right, x))
        if atom.op == "=":
            return ad.add(self._ineq(margin, k), self._ineq(ad.neg(margin), k))
        if atom.op in (">=", ">"):
            return self._ineq(margin, k)
        return self._ineq(ad.neg(margin), k)  # <= and <

    def _ineq(self, margin, k):
        # satisfied when margin >= 0
        if self.one_sided:
            return ad.minimum(ad.mul(margin, k), 0.0)
        return ad.neg(ad.softplus(ad.neg(ad.mul(margin, k))))

    def _onehot(self, atom, x):
        name, inst = _lookup(atom.column, self.schema, self.instances)
        slot = inst * self.schema.width + self.schema.onehot_slot(name, atom.category)
        value = ad.select_columns(x, [slot])
        k = atom.k if atom.k is not None else self.k
        target = 1.0 if atom.equal else 0.0
        margin = ad.sub(value, target)
        return ad.add(self._ineq(margin, k), self._ineq(ad.neg(margin), k))

    def _expr(self, e, x):
        if isinstance(e, Lit):
            return ad.Tensor(np.float64(e.value))
        if isinstance(e, (FeatureRef, SeriesRef)):
            slot = _resolve_slot(e, self.schema, self.instances, {})
            col = ad.select_columns(x, [slot])
            return ad.add(ad.mul(col, self._std[slot]), self._mean[slot])
        if isinstance(e, Arith):
            l, r = self._expr(e.left, x), self._expr(e.right, x)
            if e.op == "+":
                return ad.add(l, r)
            if e.op == "-":
                return ad.sub(l, r)
            return ad.mul(l, r)
        if isinstance(e, NegExpr):
            return ad.neg(self._expr(e.arg, x))
        raise TypeError(f"not an expression node: {e!r}")

    # evaluation

    def log_weight_batch(self, x):
        x = np.asarray(x, dtype=np.float64)
        if not np.all(np.isfinite(x)):
            raise FloatingPointError("non-finite input to constraint")
        return self.graph.forward(x=np.atleast_2d(x))

    def grad_batch(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        values = self.log_weight_batch(x)
        grads = self.graph.backward(np.ones_like(values))["x"]
        return values, grads

    def log_weight(self, x):
        return float(self.log_weight_batch(np.atleast_2d(x))[0])

    def grad(self, x):
        _, g = self.grad_batch(np.atleast_2d(x))
        return g[0]

    def static_upper_bound(self):
        """A compile-time bound B with c(x) <= B for every finite x.

        Inequalities are bounded by 0, equalities by -2 ln 2 (their value
        at exact equality); conjunction sums bounds, disjunction combines
        them with the probabilistic sum.
        """
        return self.lam * self._bound(self.formula)

    def split_conjunction(self):
        """Split a top-level conjunction into separately compiled parts,
        cheapest (fewest atoms) first. c(x) is exactly the sum of the
        parts' log-weights, so rejection sampling may test them as
        independent Bernoulli stages and short-circuit the expensive ones.
        Returns [self] when the formula is not a conjunction.
        """
        if not isinstance(self.formula, And):
            return [self]
        parts = [
            CompiledConstraint(item, self.schema, self.k, self.lam, self.normalization,
                               self.instances, self.one_sided)
            for item in self.formula.items
        ]
        return sorted(parts, key=lambda p: _atom_count(p.formula))

    def _bound(self, f):
        if isinstance(f, Cmp):
            if f.op == "=" and not self.one_sided:
                return -2.0 * LN2
            return 0.0
        if isinstance(f, OneHotIs):
            return 0.0 if self.one_sided else -2.0 * LN2
        if isinstance(f, And):
            return sum(self._bound(i) for i in f.items)
        if isinstance(f, Or):
            acc = self._bound(f.items[0])
            for item in f.items[1:]:
                acc = stable_or(acc, self._bound(item))
            return acc
        raise TypeError(f"unexpected node: {f!r}")


def compile_formula(formula, schema, k=1.0, lam=1.0, normalization=None, instances=1, one_sided=False):
    """NNF-rewrite then compile a Formula to a CompiledConstraint."""
    from ..data import Normalization

    if normalization is None:
        normalization = Normalization.identity(schema.width)
    nnf = to_nnf(formula)
    return CompiledConstraint(nnf, schema, k, lam, normalization, instances, one_sided)


def compile_constraint(text, schema, k=1.0, lam=1.0, normalization=None, instances=1, one_sided=False):
    """Parse constraint text and compile it."""
    from .parser import parse

    formula = parse(text, schema=schema, instances=instances)
    return compile_formula(formula, schema, k, lam, normalization, instances, one_sided)


# --- hard evaluation ----------------------------------------------------------


def eval_hard(f, x, schema, instances=1, env=None):
    """Classical Boolean semantics on a single original-unit row.

    ``x`` is a model-space-layout vector in original units (decoded);
    integer and categorical comparisons are exact because decode rounds
    and arg-maxes first.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    env = env or {}
    if isinstance(f, Cmp):
        a = _eval_expr(f.left, x, schema, instances, env)
        b = _eval_expr(f.right, x, schema, instances, env)
        return {
            ">=": a >= b,
            "<=": a <= b,
            ">": a > b,
            "<": a < b,
            "=": a == b,
        }[f.op]
    if isinstance(f, OneHotIs):
        name, inst = _lookup(f.column, schema, instances)
        slot = inst * schema.width + schema.onehot_slot(name, f.category)
        return (x[slot] == 1.0) == f.equal
    if isinstance(f, And):
        return all(eval_hard(i, x, schema, instances, env) for i in f.items)
    if isinstance(f, Or):
        return any(eval_hard(i, x, schema, instances, env) for i in f.items)
    if isinstance(f, Not):
        return not eval_hard(f.item, x, schema, instances, env)
    if isinstance(f, Implies):
        return (not eval_hard(f.antecedent, x, schema, instances, env)) or eval_hard(
            f.consequent, x, schema, instances, env
        )
    if isinstance(f, Quant):
        values = range(f.lo, f.hi)
        results = (eval_hard(f.body, x, schema, instances, {**env, f.var: v}) for v in values)
        return all(results) if f.kind == "forall" else any(results)
    raise TypeError(f"not a formula node: {f!r}")


def _eval_expr(e, x, schema, instances, env):
    if isinstance(e, Lit):
        return e.value
    if isinstance(e, FeatureRef):
        if e.name in env:
            return float(env[e.name])
        return x[_resolve_slot(e, schema, instances, env)]
    if isinstance(e, SeriesRef):
        return x[_resolve_slot(e, schema, instances, env)]
    if isinstance(e, Arith):
        l = _eval_expr(e.left, x, schema, instances, env)
        r = _eval_expr(e.right, x, schema, instances, env)
        return {"+": l + r, "-": l - r, "*": l * r}[e.op]
    if isinstance(e, NegExpr):
        return -_eval_expr(e.arg, x, schema, instances, env)
    raise TypeError(f"not an expression node: {e!r}")
