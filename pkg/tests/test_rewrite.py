import pytest
from hypothesis import given, settings, strategies as st

from opsmith.rewrite import (
    Rule,
    RuleParseError,
    default_rules,
    measure,
    parse_rules,
    simplify,
    _rewrite_first,
    _rewrite_pair_first,
)
from opsmith.symexpr import (
    Add,
    FloorDiv,
    IntConst,
    Iterator,
    Mod,
    Mul,
    SizeRef,
    Sub,
    Variable,
    eval_expr,
    size_from_powers,
)

H = Variable("H")
K = Variable("K")
B = Variable("B", primary=False)
C = Variable("C", primary=False)

VARS = {v.name: v for v in (H, K, B, C)}


def sz(**exps):
    return size_from_powers({VARS[name]: e for name, e in exps.items()})


i = Iterator("i", sz(H=1))
j = Iterator("j", sz(C=1))
r = Iterator("r", sz(K=1))


class TestRuleParsing:
    def test_default_rules_load(self):
        rules = default_rules()
        assert len(rules) > 20
        paired = [ru for ru in rules if ru.paired]
        assert [ru.rule_id for ru in paired if not ru.approx] == ["split-merge-pair"]
        assert any(ru.approx for ru in rules)
        assert not any(ru.approx for ru in default_rules(include_approx=False))

    def test_rejects_unnamed_rule(self):
        with pytest.raises(RuleParseError):
            parse_rules("#0+0 => #0")

    def test_rejects_arity_mismatch(self):
        with pytest.raises(RuleParseError):
            parse_rules("bad: [#0, #1] => #0")


class TestKnownSimplifications:
    def simplify1(self, expr):
        out, fired = simplify([expr], default_rules(include_approx=False))
        return out[0], fired

    def test_strided_merge_collapses(self):
        # (B*i)/(B*C) -> i/C: an oversized regrouping of a strided dim
        e = FloorDiv(Mul(SizeRef(sz(B=1)), i), SizeRef(sz(B=1, C=1)))
        out, fired = self.simplify1(e)
        assert out == FloorDiv(i, SizeRef(sz(C=1)))
        assert "strided-div" in fired

    def test_canonical_expr_untouched(self):
        e = Add(Mul(SizeRef(sz(C=1)), i), j)
        out, fired = self.simplify1(e)
        assert fired == []
        assert out == e

    def test_unfold_expr_untouched_by_exact_rules(self):
        e = Sub(Add(i, r), FloorDiv(SizeRef(sz(K=1)), IntConst(2)))
        out, fired = self.simplify1(e)
        assert fired == []

    def test_split_then_merge_same_param_recomposes(self):
        # B*(i/B) + i%B -> i
        e = Add(
            Mul(SizeRef(sz(B=1)), FloorDiv(i, SizeRef(sz(B=1)))),
            Mod(i, SizeRef(sz(B=1))),
        )
        out, fired = self.simplify1(e)
        assert out == i
        assert "recompose" in fired

    def test_merge_after_split_pair(self):
        # split produces C*g + j; a merge by B*C regroups it; the pair
        # rule rewrites both halves at once
        g = Iterator("g", sz(H=1))
        split = Add(Mul(SizeRef(sz(C=1)), g), j)
        entries = [
            FloorDiv(split, SizeRef(sz(B=1, C=1))),
            Mod(split, SizeRef(sz(B=1, C=1))),
        ]
        out, fired = simplify(entries, default_rules(include_approx=False))
        assert "split-merge-pair" in fired
        assert out[0] == FloorDiv(g, SizeRef(sz(B=1)))
        assert out[1] == Add(Mul(SizeRef(sz(C=1)), Mod(g, SizeRef(sz(B=1)))), j)

    def test_bounded_value_mod_dropped(self):
        # j ranges over [0, C), so j % (B*C) is just j
        e = Mod(j, SizeRef(sz(B=1, C=1)))
        out, fired = self.simplify1(e)
        assert out == j
        assert fired == ["mod-of-bounded"]

    def test_bounded_value_div_is_zero_only_for_integral_divisor(self):
        # i ranges over [0, H); H does not integrally divide H*B^-1
        # (the quotient carries B^-1), so nothing may fire
        e = FloorDiv(i, SizeRef(sz(H=1, B=-1)))
        out, fired = self.simplify1(e)
        assert fired == []

    def test_approx_rule_fires_on_unfold_of_split(self):
        # the window offset passing through a division is only an
        # approximate identity; it marks the form non-canonical.  The
        # guards ask for a coefficient-sized window over a
        # primary-bearing divisor.
        rc = Iterator("rc", sz(C=1))
        u = Sub(Add(i, rc), FloorDiv(SizeRef(sz(C=1)), IntConst(2)))
        entries = [
            FloorDiv(u, SizeRef(sz(H=1, B=-1))),
            Mod(u, SizeRef(sz(H=1, B=-1))),
        ]
        _, fired_exact = simplify(entries, default_rules(include_approx=False))
        assert fired_exact == []
        _, fired = simplify(entries, default_rules(include_approx=True))
        assert "offset-through-div" in fired

    def test_approx_rule_respects_primary_window_guard(self):
        # a primary-sized window (the convolution case) must stay put
        u = Sub(Add(i, r), FloorDiv(SizeRef(sz(K=1)), IntConst(2)))
        entries = [
            FloorDiv(u, SizeRef(sz(H=1, B=-1))),
            Mod(u, SizeRef(sz(H=1, B=-1))),
        ]
        _, fired = simplify(entries, default_rules(include_approx=True))
        assert fired == []


def leaf_strategy():
    return st.sampled_from(
        [i, j, r, IntConst(0), IntConst(1), IntConst(2),
         SizeRef(sz(B=1)), SizeRef(sz(C=1))]
    )


@st.composite
def expr_strategy(draw, depth=3):
    if depth == 0:
        return draw(leaf_strategy())
    kind = draw(st.sampled_from(["leaf", "add", "sub", "mul", "div", "mod"]))
    if kind == "leaf":
        return draw(leaf_strategy())
    if kind == "mul":
        scale = draw(st.sampled_from([sz(B=1), sz(C=1), sz(B=1, C=1)]))
        return Mul(SizeRef(scale), draw(expr_strategy(depth=depth - 1)))
    if kind in ("div", "mod"):
        divisor = draw(st.sampled_from([sz(B=1), sz(C=1), sz(B=1, C=1)]))
        cls = FloorDiv if kind == "div" else Mod
        return cls(draw(expr_strategy(depth=depth - 1)), SizeRef(divisor))
    cls = Add if kind == "add" else Sub
    return cls(
        draw(expr_strategy(depth=depth - 1)),
        draw(expr_strategy(depth=depth - 1)),
    )


class TestRuleProperties:
    @settings(max_examples=300, deadline=None)
    @given(expr_strategy(), st.integers(0, 7), st.integers(0, 2), st.integers(0, 2),
           st.sampled_from([2, 3, 4]), st.sampled_from([2, 3]))
    def test_exact_rules_preserve_value(self, e, vi, vj, vr, vb, vc):
        env = {"H": 8, "K": 3, "B": vb, "C": vc}
        iters = {"i": vi, "j": vj % vc, "r": vr}
        before = eval_expr(e, iters, env)
        out, _ = simplify([e], default_rules(include_approx=False))
        after = eval_expr(out[0], iters, env)
        assert before == after

    @settings(max_examples=200, deadline=None)
    @given(expr_strategy())
    def test_each_rewrite_decreases_measure(self, e):
        rules = default_rules(include_approx=False)
        entries = [e]
        for _ in range(2000):
            m_before = measure(entries)
            step = _rewrite_first(entries[0], rules)
            if step is not None:
                entries = [step[0]]
            else:
                pair = _rewrite_pair_first(entries, rules)
                if pair is None:
                    break
                entries = pair[0]
            assert measure(entries) < m_before
        else:
            pytest.fail("no fixpoint reached")
