"""Constraint language: parsing, NNF rewriting, differentiable compilation."""

from .ast import (
    And,
    Arith,
    Cmp,
    FeatureRef,
    Lit,
    NegExpr,
    Not,
    OneHotIs,
    Or,
    Implies,
    Quant,
    SeriesRef,
    Var,
)
from .parser import ConstraintSyntaxError, parse
from .compiler import (
    CompiledConstraint,
    ConstraintSchemaError,
    compile_constraint,
    compile_formula,
    eval_hard,
    onehot_atom,
    stable_or,
    to_nnf,
)

__all__ = [
    "And",
    "Arith",
    "Cmp",
    "CompiledConstraint",
    "ConstraintSchemaError",
    "ConstraintSyntaxError",
    "FeatureRef",
    "Implies",
    "Lit",
    "NegExpr",
    "Not",
    "OneHotIs",
    "Or",
    "Quant",
    "SeriesRef",
    "Var",
    "compile_constraint",
    "compile_formula",
    "eval_hard",
    "onehot_atom",
    "parse",
    "stable_or",
    "to_nnf",
]
