import logging
import math
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from symprune.bundleio import TensorBundle, gen_gaussian, gen_mlp
from symprune.exprcore import G, W, X, node, parse_expr, ShapeError
from symprune.fitness import (SENTINEL, ExternalEvaluator, FitnessCache, FitnessScore,
                              ReconProxy, TargetRecovery, fitness_external, fitness_recon,
                              fitness_target, rank_key, spearman)
from symprune.pruner import Structured, Unstructured, builtin_metric

from conftest import make_layer


def avg_ranks(xs):
    order = sorted(range(len(xs)), key=lambda i: xs[i])
    ranks = [0.0] * len(xs)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and xs[order[j + 1]] == xs[order[i]]:
            j += 1
        for k in range(i, j + 1):
            ranks[order[k]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def pearson(a, b):
    ma, mb = sum(a) / len(a), sum(b) / len(b)
    num = sum((x - ma) * (y - mb) for x, y in zip(a, b))
    den = math.sqrt(sum((x - ma) ** 2 for x in a) * sum((y - mb) ** 2 for y in b))
    return num / den


@pytest.fixture(scope="module")
def aniso():
    return gen_gaussian(0, anisotropy=[8, 1, 1, 1])


@pytest.fixture(scope="module")
def mlp():
    return gen_mlp(0, d=16, h=8, o=4, n_samples=32)


class TestScore:
    def test_sentinel(self):
        assert FitnessScore.of(float("nan")) == SENTINEL
        assert FitnessScore.of(float("-inf")) == SENTINEL
        assert FitnessScore.of(2.5) == FitnessScore(2.5, True)
        assert not SENTINEL.finite and SENTINEL.value == math.inf

    def test_rank_order(self):
        a = rank_key(FitnessScore(0.5), 3, 7)
        b = rank_key(FitnessScore(0.5), 5, 1)
        c = rank_key(FitnessScore(0.5), 3, 2)
        d = rank_key(SENTINEL, 1, 0)
        assert sorted([d, b, a, c]) == [c, a, b, d]


class TestSpearman:
    def test_against_hand_ranks(self, rng):
        for _ in range(30):
            a = rng.integers(0, 5, 15).astype(float)
            b = rng.standard_normal(15)
            np.testing.assert_allclose(spearman(a, b), pearson(avg_ranks(list(a)), avg_ranks(list(b))),
                                       rtol=1e-12, atol=1e-12)

    def test_constant_is_nan(self):
        assert math.isnan(spearman(np.ones(5), np.arange(5.0)))

    @given(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=30))
    @settings(max_examples=200, deadline=None)
    def test_bounds(self, xs):
        a = np.array(xs)
        r = spearman(a, a[::-1].copy())
        assert math.isnan(r) or -1.0 <= r <= 1.0


class TestRecon:
    def test_magnitude_is_exactly_one(self, aniso):
        assert fitness_recon(builtin_metric("magnitude"), aniso) == FitnessScore(1.0)

    def test_magnitude_is_exactly_one_nm(self, mlp):
        assert fitness_recon(builtin_metric("magnitude"), mlp, Structured(2, 4)).value == 1.0

    def test_wanda_beats_magnitude_on_anisotropic_inputs(self):
        wins = sum(fitness_recon(builtin_metric("wanda"), gen_gaussian(s, anisotropy=[8, 1, 1, 1])).value < 1
                   for s in range(20))
        assert wins >= 18

    def test_degenerate_division(self, aniso):
        s = fitness_recon(node("div", W, node("sub", W, W)), aniso)
        assert s == SENTINEL or s.value > 0.5
        assert not math.isnan(s.value)

    def test_overflow_is_sentinel(self, aniso):
        t = node("exp", node("exp", node("exp", node("sqr", W))))
        assert fitness_recon(t, aniso) == SENTINEL

    def test_reproducible(self, mlp):
        t = parse_expr("(((W) abs (#)) mul ((G) abs (#)))")
        a, b = ReconProxy(mlp)(t), ReconProxy(mlp)(t)
        assert a.value.hex() == b.value.hex()

    def test_threads_do_not_change_score(self, mlp):
        t = builtin_metric("gblm1")
        assert ReconProxy(mlp, threads=2)(t) == ReconProxy(mlp, threads=1)(t)

    def test_unnormalized_sum(self, mlp):
        proxy = ReconProxy(mlp, normalize=False)
        t = builtin_metric("wanda")
        assert proxy(t).value == math.fsum(proxy.layer_errors(t))

    def test_skips_zero_baseline_layers(self):
        # all weights zero: every mask loses nothing, baseline below eps
        zero = make_layer(np.zeros((2, 4)), np.ones((2, 4)), np.ones((3, 4)), name="z")
        live = make_layer([[1.0, 2, 3, 4]], [[4.0, 3, 2, 1]], np.eye(4), name="l")
        b = TensorBundle([zero, live])
        assert fitness_recon(builtin_metric("magnitude"), b).value == 1.0

    def test_empty_bundle(self):
        with pytest.raises(ValueError):
            ReconProxy(TensorBundle())

    def test_shape_error_propagates(self, mlp):
        with pytest.raises(ShapeError):
            ReconProxy(mlp)(node("norm2", W))


class TestTarget:
    def test_self_is_zero(self, mlp):
        t = builtin_metric("prunerzero")
        assert fitness_target(t, mlp, t).value == 0.0

    def test_increasing_transform_is_zero(self, mlp):
        target = parse_expr("(((W) abs (#)) mul ((G) abs (#)))")
        assert fitness_target(node("exp", node("sqrt", target)), mlp, target).value == pytest.approx(0, abs=1e-12)

    def test_negation_is_two(self, mlp):
        target = builtin_metric("wanda")
        assert fitness_target(node("neg", target), mlp, target).value == 2.0

    def test_constant_saliency_is_sentinel(self, mlp):
        assert fitness_target(node("sub", W, W), mlp, builtin_metric("wanda")) == SENTINEL

    def test_matches_hand_oracle(self, mlp):
        tree, target = builtin_metric("magnitude"), builtin_metric("gblm1")
        from symprune.exprcore import evaluate
        terms = []
        for layer in mlp:
            a = [float(v) for v in evaluate(tree, layer)[0].ravel()]
            b = [float(v) for v in evaluate(target, layer)[0].ravel()]
            terms.append(1 - pearson(avg_ranks(a), avg_ranks(b)))
        np.testing.assert_allclose(fitness_target(tree, mlp, target).value, sum(terms) / len(terms),
                                   rtol=1e-10)

    @pytest.mark.parametrize("text", ["(W) abs (#)", "((G) mul (W))", "(((W) sub (G)) mul (X))",
                                      "(W) tanh (#)", "((X) add (G))"])
    def test_bounds(self, mlp, text):
        s = fitness_target(parse_expr(text), mlp, builtin_metric("prunerzero"))
        assert s == SENTINEL or 0.0 <= s.value <= 2.0


class TestExternal:
    def test_echo(self):
        assert fitness_external(W, "echo 6.95").value == 6.95

    def test_nonzero_exit(self, caplog):
        with caplog.at_level(logging.WARNING):
            assert fitness_external(W, "exit 1") == SENTINEL
        assert "exited 1" in caplog.text

    def test_nan(self):
        assert fitness_external(W, "echo nan") == SENTINEL

    def test_garbage(self):
        assert fitness_external(W, "echo ppl=3") == SENTINEL
        assert fitness_external(W, "echo 1 2") == SENTINEL

    def test_timeout(self):
        assert fitness_external(W, "sleep 5", timeout=0.2) == SENTINEL

    def test_placeholder_is_quoted(self):
        t = parse_expr("((W) mul (G))")
        ev = ExternalEvaluator("printf '%s' {expr} | wc -c")
        assert ev(t).value == len("((W) mul (G))")

    def test_stdin_carries_expression(self, tmp_path):
        script = tmp_path / "score.py"
        script.write_text("import sys\nline = sys.stdin.readline()\n"
                          "print(len(line) if line.endswith('\\n') else -1)\n")
        ev = ExternalEvaluator(f"{sys.executable} {script}")
        assert ev(parse_expr("(G) abs (#)")).value == len("(G) abs (#)") + 1

    def test_empty_template(self):
        with pytest.raises(ValueError):
            ExternalEvaluator("   ")


class _Counting:
    def __init__(self, fn):
        self.fn = fn
        self.calls = 0

    def __call__(self, t):
        self.calls += 1
        return self.fn(t)


class TestCache:
    def test_hits_and_misses(self, mlp):
        inner = _Counting(ReconProxy(mlp))
        cache = FitnessCache(inner)
        trees = [W, node("exp", node("log", W)), node("skp", W), node("mul", W, G), node("mul", W, G)]
        scores = [cache(t) for t in trees]
        assert scores[0] == scores[1] == scores[2]
        assert inner.calls == cache.misses == 2
        assert cache.hits == 3 and cache.queries == len(trees)

    def test_equivalent_trees_score_identically(self, mlp):
        cache = FitnessCache(TargetRecovery(mlp, builtin_metric("prunerzero")))
        base = parse_expr("(((W) abs (#)) mul ((G) abs (#)))")
        wrapped = node("sqrt", node("sqr", node("abs", node("abs", base))))
        assert cache(wrapped) == cache(node("abs", base))

    def test_sentinel_cached(self):
        inner = _Counting(lambda t: SENTINEL)
        cache = FitnessCache(inner)
        cache(X)
        cache(X)
        assert inner.calls == 1 and cache.hits == 1
