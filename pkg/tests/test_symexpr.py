import pytest
from hypothesis import given, strategies as st

from opsmith.symexpr import (
    ONE,
    Add,
    FloorDiv,
    IntConst,
    Iterator,
    Mod,
    Mul,
    NonIntegralSize,
    OutOfDomain,
    SizeRef,
    Sub,
    SymbolicSize,
    Variable,
    eval_expr,
    eval_size,
    free_iterators,
    in_range_certain,
    infer_domain,
    parse_expr,
    parse_size,
    render_expr,
    size_div,
    size_divides,
    size_from_powers,
    size_mul,
)

H = Variable("H")
K = Variable("K")
N = Variable("N")
W = Variable("W")
B = Variable("B", primary=False)
C = Variable("C", primary=False)
s = Variable("s", primary=False)

VARS = {v.name: v for v in (H, K, N, W, B, C, s)}


def sz(**exps):
    return size_from_powers({VARS[name]: e for name, e in exps.items()})


class TestSymbolicSize:
    def test_one_renders_and_multiplies(self):
        assert str(ONE) == "1"
        assert size_mul(ONE, sz(H=1)) == sz(H=1)

    def test_rendering_is_sorted_by_name(self):
        assert str(sz(s=-1, H=1)) == "H*s^-1"
        assert str(sz(K=2)) == "K^2"

    def test_primary_never_negative(self):
        with pytest.raises(ValueError):
            size_from_powers({H: -1})

    def test_mul_cancels(self):
        assert size_mul(sz(H=1, s=-1), sz(s=1)) == sz(H=1)

    def test_div_valid_and_invalid(self):
        assert size_div(sz(H=1), sz(s=1)) == sz(H=1, s=-1)
        assert size_div(sz(K=1), sz(H=1)) is None

    def test_divides(self):
        # a coefficient divides a primary (the quotient may carry B^-1)
        assert size_divides(sz(B=1), sz(N=1))
        # a primary never divides an unrelated primary
        assert not size_divides(sz(H=1), sz(K=1))
        assert size_divides(sz(s=1), sz(s=1, W=1))

    def test_eval(self):
        assert eval_size(sz(H=1, s=-1), {"s": 2, "H": 8}) == 4
        with pytest.raises(NonIntegralSize):
            eval_size(sz(H=1, s=-1), {"s": 3, "H": 8})
        assert eval_size(ONE, {}) == 1

    def test_eval_missing_variable(self):
        with pytest.raises(KeyError):
            eval_size(sz(H=1), {})

    def test_parse_round_trip(self):
        for text in ("1", "H", "K^2", "H*s^-1", "B*C"):
            assert str(parse_size(text, VARS)) == text

    def test_parse_unknown_variable(self):
        with pytest.raises(ValueError):
            parse_size("Q", VARS)


class TestEvalExpr:
    def test_split_mod_example(self):
        # (C*i + j) % (B*C) with i=5, j=1, B=4, C=3  ->  16 % 12 = 4
        i = Iterator("i", sz(N=1))
        j = Iterator("j", sz(C=1))
        e = Mod(Add(Mul(SizeRef(sz(C=1)), i), j), SizeRef(sz(B=1, C=1)))
        val = eval_expr(e, {"i": 5, "j": 1}, {"B": 4, "C": 3, "N": 8})
        assert val == 4

    def test_iterator_out_of_range(self):
        i = Iterator("i", sz(H=1))
        with pytest.raises(OutOfDomain):
            eval_expr(i, {"i": 8}, {"H": 8})
        with pytest.raises(OutOfDomain):
            eval_expr(i, {"i": -1}, {"H": 8})

    def test_floordiv_and_mod_of_negatives(self):
        i = Iterator("i", sz(H=1))
        off = Sub(i, SizeRef(sz(K=1)))
        env = {"H": 8, "K": 3}
        assert eval_expr(FloorDiv(off, SizeRef(sz(K=1))), {"i": 1}, env) == -1
        assert eval_expr(Mod(off, SizeRef(sz(K=1))), {"i": 1}, env) == 1

    def test_free_iterators(self):
        i = Iterator("i", sz(H=1))
        r = Iterator("r", sz(K=1))
        e = Add(Mul(SizeRef(sz(K=1)), i), r)
        assert set(free_iterators(e)) == {"i", "r"}
        assert free_iterators(e)["r"].size == sz(K=1)


class TestDomains:
    def test_equality_ignores_domain(self):
        i = Iterator("i", sz(H=1))
        a = Mod(i, SizeRef(sz(B=1)))
        b = Mod(i, SizeRef(sz(B=1)), domain=sz(B=1))
        assert a == b
        assert hash(a) == hash(b)

    def test_infer_domain(self):
        i = Iterator("i", sz(H=1))
        assert infer_domain(Mod(i, SizeRef(sz(B=1)))) == sz(B=1)
        assert infer_domain(FloorDiv(i, SizeRef(sz(B=1)))) == sz(B=1, H=1) * sz(B=-2)
        assert infer_domain(Mul(SizeRef(sz(B=1)), i)) == sz(B=1, H=1)

    def test_infer_domain_split_shape(self):
        g = Iterator("g", sz(H=1, B=-1))
        j = Iterator("j", sz(B=1))
        e = Add(Mul(SizeRef(sz(B=1)), g), j)
        assert infer_domain(e) == sz(H=1)


class TestInRange:
    def test_basic_judgments(self):
        i = Iterator("i", sz(H=1))
        r = Iterator("r", sz(K=1))
        assert in_range_certain(i)
        assert in_range_certain(Mod(Sub(i, r), SizeRef(sz(B=1))))
        assert in_range_certain(FloorDiv(i, SizeRef(sz(B=1))))
        assert in_range_certain(Mul(SizeRef(sz(B=1)), i))
        assert not in_range_certain(Sub(i, r))
        assert not in_range_certain(SizeRef(sz(K=1)))

    def test_split_shaped_add(self):
        g = Iterator("g", sz(H=1, B=-1))
        j = Iterator("j", sz(B=1))
        assert in_range_certain(Add(Mul(SizeRef(sz(B=1)), g), j))
        # mismatched coefficient and right-operand domain: no proof
        assert not in_range_certain(Add(Mul(SizeRef(sz(C=1)), g), j))


class TestRenderParse:
    def test_render_examples(self):
        i = Iterator("i", sz(H=1))
        r = Iterator("r", sz(K=1))
        e = Mod(Add(Mul(SizeRef(sz(C=1)), i), r), SizeRef(sz(B=1, C=1)))
        assert render_expr(e) == "(C*i+r)%(B*C)"
        off = Sub(Add(i, r), FloorDiv(SizeRef(sz(K=1)), IntConst(2)))
        assert render_expr(off) == "i+r-K/2"

    def test_rename(self):
        i = Iterator("i0", sz(H=1))
        assert render_expr(i, names={"i0": "i_H"}) == "i_H"

    @given(st.data())
    def test_round_trip_random_exprs(self, data):
        iters = {
            "i": Iterator("i", sz(H=1)),
            "j": Iterator("j", sz(K=1)),
        }

        def gen(depth):
            kind = data.draw(
                st.sampled_from(
                    ["iter", "int", "size"]
                    if depth == 0
                    else ["iter", "int", "size", "add", "sub", "mul", "div", "mod"]
                )
            )
            if kind == "iter":
                return data.draw(st.sampled_from(list(iters.values())))
            if kind == "int":
                return IntConst(data.draw(st.integers(0, 9)))
            if kind == "size":
                return SizeRef(
                    data.draw(st.sampled_from([sz(B=1), sz(C=1), sz(B=1, C=1), sz(K=1)]))
                )
            a, b = gen(depth - 1), gen(depth - 1)
            if kind == "mul" and isinstance(a, SizeRef) and isinstance(b, SizeRef):
                # graphs never build a product of two bare sizes; it is
                # always folded into a single reference
                return SizeRef(size_mul(a.size, b.size))
            return {"add": Add, "sub": Sub, "mul": Mul, "div": FloorDiv, "mod": Mod}[kind](a, b)

        e = gen(3)
        assert parse_expr(render_expr(e), iters, VARS) == e
