import pytest

from constrainedgen.data import Column, TableSchema
from constrainedgen.logic import (
    And,
    Arith,
    Cmp,
    ConstraintSyntaxError,
    FeatureRef,
    Implies,
    Lit,
    Not,
    OneHotIs,
    Or,
    Quant,
    SeriesRef,
    parse,
)


def wine_schema():
    cols = [
        "fixed_acidity",
        "volatile_acidity",
        "citric_acid",
        "residual_sugar",
        "chlorides",
        "free_sulfur_dioxide",
        "total_sulfur_dioxide",
        "density",
        "pH",
        "sulphates",
        "alcohol",
    ]
    return TableSchema([Column(c, "real") for c in cols])


def test_single_atom():
    f = parse("alcohol >= 11.0")
    assert f == Cmp(">=", FeatureRef("alcohol"), Lit(11.0))


def test_precedence_not_and_or_implies():
    f = parse("not a >= 1 and b >= 2 or c >= 3 -> d >= 4")
    assert isinstance(f, Implies)
    assert isinstance(f.antecedent, Or)
    assert isinstance(f.antecedent.items[0], And)
    assert isinstance(f.antecedent.items[0].items[0], Not)


def test_implies_right_associative():
    f = parse("a >= 1 -> b >= 2 -> c >= 3")
    assert isinstance(f, Implies)
    assert isinstance(f.consequent, Implies)


def test_in_range_sugar():
    f = parse("x in [1.5, 2.5]")
    assert f == And((Cmp(">=", FeatureRef("x"), Lit(1.5)), Cmp("<=", FeatureRef("x"), Lit(2.5))))


def test_in_range_negative_bounds():
    f = parse("x in [-2, -1]")
    assert f == And((Cmp(">=", FeatureRef("x"), Lit(-2.0)), Cmp("<=", FeatureRef("x"), Lit(-1.0))))


def test_wine_complex_constraint_shape():
    text = (
        "(fixed_acidity in [5.0,6.0] or fixed_acidity in [8.0,9.0]) "
        "and alcohol >= 11.0 and (residual_sugar <= 5.0 -> citric_acid >= 0.5)"
    )
    f = parse(text, schema=wine_schema())
    assert isinstance(f, And) and len(f.items) == 3
    assert isinstance(f.items[0], Or)
    assert isinstance(f.items[2], Implies)


def test_quantifier_half_open_range():
    f = parse("forall t in 0..30: S[t] >= 0 and I[t] >= 0")
    assert f == Quant(
        "forall", "t", 0, 30, And((Cmp(">=", SeriesRef("S", FeatureRef("t")), Lit(0.0)),
                                   Cmp(">=", SeriesRef("I", FeatureRef("t")), Lit(0.0))))
    )


def test_arithmetic_in_atoms():
    f = parse("S[0] + I[0] <= 100")
    assert isinstance(f, Cmp)
    assert isinstance(f.left, Arith) and f.left.op == "+"


def test_multi_instance_references():
    f = parse("alcohol_1 > alcohol_2 + 1")
    assert f == Cmp(">", FeatureRef("alcohol_1"), Arith("+", FeatureRef("alcohol_2"), Lit(1.0)))


def test_onehot_equality_and_inequality():
    assert parse('education = "Masters"') == OneHotIs("education", "Masters", True)
    assert parse('race != "White"') == OneHotIs("race", "White", False)


def test_adult_style_formula():
    f = parse('age >= 40 and (race != "White" or education = "Masters")')
    assert isinstance(f, And)
    assert isinstance(f.items[1], Or)


def test_hardness_annotation_on_group():
    f = parse("(S[0] = 95 and I[0] = 5) {k=7} and (forall t in 0..3: I[t] >= 0) {k=1}")
    eq = f.items[0]
    assert all(atom.k == 7.0 for atom in eq.items)
    assert f.items[1].body.k == 1.0


def test_syntax_error_carries_position():
    with pytest.raises(ConstraintSyntaxError) as exc:
        parse("alcohol >= ")
    assert "line 1" in str(exc.value)


def test_empty_constraint_rejected():
    with pytest.raises(ConstraintSyntaxError):
        parse("   ")


def test_trailing_garbage_rejected():
    with pytest.raises(ConstraintSyntaxError, match="trailing"):
        parse("a >= 1 b")


def test_neq_on_numbers_rejected():
    with pytest.raises(ConstraintSyntaxError, match="categorical"):
        parse("a != 1")


def test_unknown_feature_rejected():
    from constrainedgen.logic import ConstraintSchemaError

    with pytest.raises(ConstraintSchemaError, match="unknown column"):
        parse("nope >= 1", schema=wine_schema())


def test_quantifier_out_of_bounds_rejected():
    from constrainedgen.data import esirs_schema
    from constrainedgen.logic import ConstraintSchemaError

    with pytest.raises(ConstraintSchemaError):
        parse("forall t in 0..31: S[t] >= 0", schema=esirs_schema(30))


def test_comments_and_newlines():
    f = parse("# header comment\nalcohol >= 11.0\n# tail\n")
    assert isinstance(f, Cmp)


def test_strict_and_nonstrict_ops_parse():
    for op in (">=", "<=", ">", "<", "="):
        f = parse(f"a {op} 1")
        assert f.op == op
