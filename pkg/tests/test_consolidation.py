import json
import math
import random

import mpmath
import pytest

from rimrule.consolidation import (
    AgentOracle,
    EditProposal,
    FailureContext,
    MatrixOracle,
    consolidate,
    data_cost,
    default_accuracy_evaluator,
    enumerate_edits,
    mdl,
    model_cost,
    plug_in_code,
    prompt_consolidate,
    select_alpha,
    verify_local_optimum,
)
from rimrule.eval_harness import CaseScript, MockAgent, RuleTrigger, ScriptedOutcome, TraceStep
from rimrule.generation import FailureCase
from rimrule.model_gateway import MockGateway
from rimrule.rule_core import (
    ErrorType,
    Rule,
    RuleLibrary,
    ToolScope,
    parse_symbolic,
)

from brute_force import best_prune_subset, pipeline_instance, random_instance, rule_with_length


def _library(*rules) -> RuleLibrary:
    return RuleLibrary(tuple(rules))


def _matrix(cover: dict[str, list[str]], contexts=None) -> MatrixOracle:
    bits = {}
    for rule_id, fids in cover.items():
        for fid in fids:
            bits[(rule_id, fid)] = True
    return MatrixOracle(bits, contexts)


class TestCosts:
    def test_model_cost_direct_arithmetic(self):
        lib = _library(rule_with_length(0, 6), rule_with_length(1, 9))
        assert model_cost(lib, 0.5) == pytest.approx(7.5)

    def test_model_cost_empty_is_zero(self):
        assert model_cost(_library(), 0.5) == 0.0

    def test_model_cost_linear_in_alpha(self):
        lib = _library(rule_with_length(0, 6), rule_with_length(1, 9))
        assert model_cost(lib, 1.0) == pytest.approx(2 * model_cost(lib, 0.5))

    def test_data_cost_matches_high_precision_form(self):
        fids = [f"f{i}" for i in range(10)]
        lib = _library(rule_with_length(0, 4))
        oracle = _matrix({lib.rules[0].id: fids[:7]})
        got = data_cost(lib, fids, oracle)
        with mpmath.workdps(50):
            expected = -(7 * mpmath.log(mpmath.mpf(7) / 10) + 3 * mpmath.log(mpmath.mpf(3) / 10))
        assert got == pytest.approx(6.108643, abs=1e-6)
        assert got == pytest.approx(float(expected), abs=1e-12)

    def test_data_cost_zero_at_both_ends(self):
        fids = [f"f{i}" for i in range(10)]
        lib = _library(rule_with_length(0, 4))
        assert data_cost(lib, fids, _matrix({})) == 0.0
        assert data_cost(lib, fids, _matrix({lib.rules[0].id: fids})) == 0.0

    def test_mdl_sum(self):
        fids = [f"f{i}" for i in range(10)]
        a, b = rule_with_length(0, 6), rule_with_length(1, 9)
        oracle = _matrix({a.id: fids[:7], b.id: fids[:7]})
        assert mdl(_library(a, b), fids, 0.5, oracle) == pytest.approx(13.608643, abs=1e-6)

    def test_alpha_must_be_positive(self):
        lib = _library(rule_with_length(0, 6))
        with pytest.raises(ValueError):
            model_cost(lib, 0.0)
        with pytest.raises(ValueError):
            mdl(lib, ["f0"], 0.0, _matrix({}))

    def test_empty_failure_set_rejected(self):
        with pytest.raises(ValueError):
            data_cost(_library(), [], _matrix({}))

    def test_plug_in_code_bounds(self):
        with pytest.raises(ValueError):
            plug_in_code(5, 4)
        assert plug_in_code(5, 10) == pytest.approx(10 * math.log(2))


class TestEnumerateEdits:
    def _scoped_rule(self, index, tools):
        rule = rule_with_length(index, 4)
        return Rule(
            rule.id, rule.nl_text, ErrorType.TOOL_SELECTION,
            ToolScope.of_tools(tools), rule.symbolic, rule.provenance,
        )

    def test_prunes_plus_single_category_generalize(self):
        rules = [rule_with_length(0, 4), rule_with_length(1, 4), self._scoped_rule(2, ["t1", "t2"])]
        edits, skipped = enumerate_edits(_library(*rules), {"t1": "CAT", "t2": "CAT"})
        prunes = [e for e in edits if e.kind == "prune"]
        generalizes = [e for e in edits if e.kind == "generalize"]
        assert len(prunes) == 3
        assert [g.rule_id for g in generalizes] == [rules[2].id]
        assert generalizes[0].target_category == "CAT"
        assert skipped == []

    def test_tools_spanning_two_categories_not_generalized(self):
        rule = self._scoped_rule(0, ["t1", "t2"])
        edits, skipped = enumerate_edits(_library(rule), {"t1": "CAT_A", "t2": "CAT_B"})
        assert [e.kind for e in edits] == ["prune"]
        assert skipped == []

    def test_unmapped_tool_reported(self):
        rule = self._scoped_rule(0, ["t1", "mystery"])
        edits, skipped = enumerate_edits(_library(rule), {"t1": "CAT"})
        assert [e.kind for e in edits] == ["prune"]
        assert skipped == [(rule.id, ["mystery"])]

    def test_empty_library(self):
        assert enumerate_edits(_library(), {}) == ([], [])

    def test_delta_mdl_is_sum_of_parts(self):
        edit = EditProposal("prune", "r", delta_model_cost=-3.0, delta_data_cost=1.25)
        assert edit.delta_mdl == pytest.approx(-1.75, abs=1e-12)


class TestConsolidate:
    def test_redundant_pair_prunes_one_and_guards_the_other(self):
        fids = [f"f{i}" for i in range(8)]
        a, b = rule_with_length(0, 6), rule_with_length(1, 6)
        oracle = _matrix({a.id: fids, b.id: fids})
        final, trace = consolidate(_library(a, b), fids, 0.5, oracle)
        assert len(final) == 1
        assert len(trace.edits) == 1
        assert trace.edits[0].kind == "prune"
        assert trace.edits[0].delta_model == pytest.approx(-3.0)
        assert trace.edits[0].delta_data == pytest.approx(0.0)
        # the surviving rule still corrects everything; its prune was rejected
        assert oracle.count_corrected(final, fids) == 8

    def test_degenerate_collapse_guard_fixture(self):
        # two complementary halves of n=20; alpha small enough that the
        # model-cost saving (0.6) cannot pay for the 20*ln2 data-cost jump
        fids = [f"f{i:02d}" for i in range(20)]
        r, s = rule_with_length(0, 6), rule_with_length(1, 6)
        oracle = _matrix({r.id: fids[:10], s.id: fids[10:]})
        lib = _library(r, s)
        assert 20 * math.log(2) > 0.1 * 6
        final, trace = consolidate(lib, fids, 0.1, oracle)
        assert final.ids == lib.ids
        assert trace.edits == ()

    def test_strict_descent_and_local_optimum(self):
        rng = random.Random(123)
        for _ in range(10):
            library, fids, oracle = random_instance(rng)
            final, trace = consolidate(library, fids, 0.5, oracle)
            values = [trace.edits[0].mdl_before] if trace.edits else []
            for edit in trace.edits:
                assert edit.mdl_after < edit.mdl_before - 1e-9
                values.append(edit.mdl_after)
            if values:
                assert values == sorted(values, reverse=True)
                assert all(math.isfinite(v) for v in values)
            assert verify_local_optimum(final, fids, 0.5, oracle)
            assert trace.passes <= len(library) + 1

    def test_brute_force_is_a_lower_bound_on_any_instance(self):
        # iid bit matrices are the stress regime: greedy must stay above the
        # exhaustive optimum and land on a local optimum, but need not match
        rng = random.Random(2024)
        for _ in range(15):
            library, fids, oracle = random_instance(rng)
            final, _ = consolidate(library, fids, 0.5, oracle)
            final_mdl = mdl(final, fids, 0.5, oracle)
            best_value, _ = best_prune_subset(library, fids, oracle, 0.5)
            assert final_mdl >= best_value - 1e-9
            assert verify_local_optimum(final, fids, 0.5, oracle)

    def test_matches_brute_force_on_most_pool_shaped_instances(self):
        rng = random.Random(2024)
        matches = 0
        total = 30
        for _ in range(total):
            library, fids, oracle = pipeline_instance(rng)
            final, _ = consolidate(library, fids, 0.5, oracle)
            final_mdl = mdl(final, fids, 0.5, oracle)
            best_value, _ = best_prune_subset(library, fids, oracle, 0.5)
            assert final_mdl >= best_value - 1e-9
            if final_mdl <= best_value + 1e-9:
                matches += 1
        assert matches / total >= 0.8

    def test_monotone_oracle(self):
        fids = [f"f{i}" for i in range(12)]
        rng = random.Random(5)
        library, fids, oracle = random_instance(rng)
        k_full = oracle.count_corrected(library, fids)
        for rule in library:
            assert oracle.count_corrected(library.without(rule.id), fids) <= k_full

    def test_generalize_never_increases_model_cost(self):
        rule = rule_with_length(0, 4)
        for k_tools in (1, 2, 4):
            scoped = Rule(
                rule.id, rule.nl_text, ErrorType.TOOL_SELECTION,
                ToolScope.of_tools([f"t{i}" for i in range(k_tools)]),
                rule.symbolic, rule.provenance,
            )
            lib = _library(scoped)
            general = lib.with_rule_scope(rule.id, ToolScope.of_category("CAT"))
            delta = model_cost(general, 0.5) - model_cost(lib, 0.5)
            assert delta == pytest.approx(0.5 * (1 - k_tools))
            assert delta <= 0.0

    def test_generalize_can_widen_coverage_through_the_filter(self):
        # rule scoped to t1 corrects f2 in the bit matrix, but the scope
        # filter hides it for f2 (tools {t2}); generalizing to the shared
        # category unlocks the correction and wins on data cost
        base = rule_with_length(0, 4)
        scoped = Rule(
            base.id, base.nl_text, ErrorType.TOOL_SELECTION,
            ToolScope.of_tools(["t1"]), base.symbolic, base.provenance,
        )
        anchor = rule_with_length(1, 3)  # keeps k > 0 so prunes stay guarded
        contexts = {
            "f1": FailureContext(("t1",), frozenset({"CAT"})),
            "f2": FailureContext(("t2",), frozenset({"CAT"})),
            "f3": FailureContext(("t3",), frozenset()),
        }
        oracle = _matrix(
            {scoped.id: ["f1", "f2"], anchor.id: ["f3"]},
            contexts=contexts,
        )
        lib = _library(scoped, anchor)
        fids = ["f1", "f2", "f3"]
        assert oracle.count_corrected(lib, fids) == 2
        final, trace = consolidate(lib, fids, 0.1, oracle, {"t1": "CAT"})
        assert oracle.count_corrected(final, fids) == 3
        assert any(e.kind == "generalize" for e in trace.edits)
        assert final.get(scoped.id).tool_scope == ToolScope.of_category("CAT")

    def test_oracle_cache_round_trip(self, tmp_path):
        fids = [f"f{i}" for i in range(4)]
        rule = rule_with_length(0, 4)
        lib = _library(rule)
        path = tmp_path / "cache.json"
        oracle = MatrixOracle({(rule.id, fid): True for fid in fids}, cache_path=path)
        assert oracle.count_corrected(lib, fids) == 4
        oracle.save_cache()
        reloaded = MatrixOracle({}, cache_path=path)  # bits gone; cache answers
        assert reloaded.count_corrected(lib, fids) == 4


class TestSelectAlpha:
    def _fixture(self):
        fids = [f"f{i}" for i in range(4)]
        rule = rule_with_length(0, 4)
        lib = _library(rule)
        oracle = _matrix({rule.id: fids})
        return lib, fids, oracle

    def test_argmax_accuracy(self):
        lib, fids, oracle = self._fixture()
        scripted = {0.1: 0.50, 0.5: 0.60, 1.0: 0.55}
        chosen = select_alpha(
            lib, fids, [0.1, 0.5, 1.0], oracle, lambda library, alpha: scripted[alpha]
        )
        assert chosen == 0.5

    def test_tie_breaks_toward_larger_alpha(self):
        lib, fids, oracle = self._fixture()
        chosen = select_alpha(lib, fids, [0.1, 0.5, 1.0], oracle, lambda library, alpha: 0.4)
        assert chosen == 1.0

    def test_single_element_grid(self):
        lib, fids, oracle = self._fixture()
        assert select_alpha(lib, fids, [0.7], oracle, lambda library, alpha: 0.1) == 0.7

    def test_empty_grid_rejected(self):
        lib, fids, oracle = self._fixture()
        with pytest.raises(ValueError):
            select_alpha(lib, fids, [], oracle, lambda library, alpha: 0.0)

    def test_default_evaluator_uses_oracle_fraction(self):
        lib, fids, oracle = self._fixture()
        evaluate = default_accuracy_evaluator(fids, oracle)
        assert evaluate(lib, 0.5) == 1.0


class TestPromptConsolidate:
    def test_near_duplicates_merge_to_one(self, small_vocab):
        merged_text = "If the query involves a relative chain, then resolve intermediates first."
        merge_response = json.dumps(
            {"rules": [{"nl_text": merged_text, "error_type": "decomposition error"}]}
        )
        classification = json.dumps(
            {
                "domain": "RELATIONSHIP_RESOLUTION",
                "qualifier": ["RELATIONSHIP_CHAIN_TRAVERSAL"],
                "action": ["DECOMPOSE_QUERY"],
                "strength": "MANDATORY",
                "tool_category": "GENEALOGY_QUERY",
            }
        )
        gw = MockGateway(
            matchers=[
                ("Merge or rewrite the candidate rules", merge_response),
                ("classify individual rules", classification),
            ]
        )
        a = Rule.from_nl("If relative chain, then resolve intermediates.", ErrorType.DECOMPOSITION, provenance=("f1",))
        b = Rule.from_nl("If chains of relatives, then resolve the middle entity.", ErrorType.DECOMPOSITION, provenance=("f2",))
        out = prompt_consolidate(_library(a, b), gw, small_vocab)
        assert len(out) == 1
        assert out.rules[0].nl_text == merged_text
        assert out.rules[0].provenance == ("f1", "f2")
        assert out.rules[0].symbolic is not None

    def test_failed_linguistic_check_keeps_original(self, small_vocab):
        merge_response = json.dumps(
            {"rules": [{"nl_text": "Merge everything always.", "error_type": "decomposition error"}]}
        )
        gw = MockGateway(matchers=[("Merge or rewrite", merge_response)])
        a = Rule.from_nl("If x, then y.", ErrorType.DECOMPOSITION)
        original = _library(a)
        assert prompt_consolidate(original, gw, small_vocab) == original

    def test_empty_library_is_identity(self, small_vocab):
        empty = _library()
        assert prompt_consolidate(empty, MockGateway(), small_vocab) == empty


class TestAgentOracle:
    def test_agent_oracle_matches_mock_behavior(self):
        failure = FailureCase(
            id="f1",
            query="q1",
            tools=(),
            incorrect_trace=(TraceStep(tool="t", args={}),),
            gold_trace=(TraceStep(tool="t", args={}),),
            gold_answer="yes",
        )
        rule = rule_with_length(0, 4)
        lib = _library(rule)
        agent = MockAgent(
            {
                "q1": CaseScript(
                    base=ScriptedOutcome(answer="no"),
                    triggers=(
                        RuleTrigger(contains=("situation 0",), outcome=ScriptedOutcome(answer="yes")),
                    ),
                )
            }
        )
        oracle = AgentOracle(agent, retriever=lambda library, f: [r.nl_text for r in library])
        assert oracle.corrects(lib, failure) is True
        assert oracle.corrects(_library(), failure) is False
