from __future__ import annotations

import re

import pytest
from hypothesis import given, strategies as st

from fedmesh.datastore import (
    ClinicalObservation,
    CoverageRule,
    EnrollmentRow,
    EnrollmentStatus,
    GuidanceDoc,
    NO_ENROLLMENT,
    NO_OBSERVATION,
    SymptomClass,
    load_guidance,
    render_enrollment_text,
    render_guidance_text,
    render_observation_text,
    render_rule_text,
)
from fedmesh.errors import ParseError
from fedmesh.policies import (
    Appropriateness,
    ClinicPolicy,
    CoverageInquiry,
    CoverageStatus,
    InsurerPolicy,
    Recommendation,
    SpecialistConsult,
    SpecialistPolicy,
    TREATMENT_CONSERVATIVE,
    TREATMENT_HA_INJECTION,
    consult_from_inquiry,
    infer_treatment,
    parse_consult,
    parse_inquiry,
    parse_recommendation,
    parse_treatment_step,
    parse_verdict_fields,
    prerequisites_satisfied,
    render_consult,
    render_inquiry,
    render_recommendation,
    render_verdict,
    CoverageVerdict,
)
from fedmesh.pseudonym import CaseToken, normalize_id
from fedmesh.runtime import ToolCall, ToolExchange, ToolResult

from conftest import GOLDEN_TOKENS

HEX64 = re.compile(r"[0-9a-fA-F]{64}")

TOKEN = CaseToken(GOLDEN_TOKENS["CLN-0001"])


def _obs(
    pid="CLN-0001",
    symptom=SymptomClass.MODERATE,
    weeks=12,
    limitation="difficulty stairs and prolonged standing",
    prior=("NSAID_2_weeks", "home_exercises"),
):
    return ClinicalObservation(
        patient_id=normalize_id(pid),
        symptom_class=symptom,
        duration_weeks=weeks,
        functional_limitation=limitation,
        prior_conservative_tx=tuple(prior),
    )


def _inquiry(treatment=TREATMENT_CONSERVATIVE, prior=("NSAID_2_weeks", "home_exercises"), **kw):
    return CoverageInquiry(
        patient_token=kw.get("token", TOKEN),
        symptom_class=kw.get("symptom", SymptomClass.MODERATE),
        duration_weeks=kw.get("weeks", 12),
        functional_limitation=kw.get("limitation", "difficulty stairs and prolonged standing"),
        prior_tx=tuple(prior),
        proposed_treatment=treatment,
    )


def _exchange(tool: str, text: str, args: dict | None = None) -> ToolExchange:
    return ToolExchange(ToolCall(tool, args or {}), ToolResult(tool, text))


# ---------------------------------------------------------------------------
# Templates
# ---------------------------------------------------------------------------


def test_render_inquiry_canonical_shape():
    text = render_inquiry(_inquiry())
    lines = text.split("\n")
    assert lines[0] == "Coverage inquiry for patient_token=" + TOKEN.hex
    assert lines[1].startswith("Presentation: moderate symptoms, 12 weeks; limitation: ")
    assert "Proposed treatment: conservative_management." in lines
    assert lines[-1] == "Please advise coverage and any prerequisites."


def test_parse_inquiry_round_trips_fixture_cases():
    for prior in [(), ("NSAID_2_weeks",), ("NSAID_3_weeks", "physio_4_weeks")]:
        inquiry = _inquiry(prior=prior, limitation="pain at rest; limited ROM")
        assert parse_inquiry(render_inquiry(inquiry)) == inquiry


def test_parse_inquiry_rejects_freeform_text():
    with pytest.raises(ParseError) as err:
        parse_inquiry("hello")
    assert err.value.field == "patient_token"


def test_parse_inquiry_rejects_bad_token():
    text = render_inquiry(_inquiry()).replace(TOKEN.hex, "zz" * 32)
    with pytest.raises(ParseError) as err:
        parse_inquiry(text)
    assert err.value.field == "patient_token"


def test_consult_strips_token_structurally():
    consult = consult_from_inquiry(_inquiry())
    assert not hasattr(consult, "patient_token")
    assert not HEX64.search(render_consult(consult))


def test_recommendation_round_trip():
    rec = Recommendation(
        verdict=Appropriateness.APPROPRIATE_AFTER_STEPS,
        reasoning="Ladder incomplete.",
        next_steps="Complete: Physiotherapy 6 weeks.",
        source_doc="osteoarthritis_knee_guidance.md",
    )
    assert parse_recommendation(render_recommendation(rec)) == rec
    without_steps = Recommendation(
        verdict=Appropriateness.APPROPRIATE_NOW,
        reasoning="Fine.",
        next_steps=None,
        source_doc="osteoarthritis_knee_guidance.md",
    )
    assert parse_recommendation(render_recommendation(without_steps)) == without_steps


def test_verdict_fields_round_trip():
    rec = Recommendation(Appropriateness.APPROPRIATE_NOW, "ok", None, "doc.md")
    verdict = CoverageVerdict(
        coverage=CoverageStatus.COVERED_WITH_PREREQUISITES,
        prerequisites_outstanding=("physiotherapy_6_weeks",),
        appropriateness=rec,
        summary="Covered once prerequisites are met.",
        next_steps="Complete outstanding prerequisites: physiotherapy_6_weeks.",
    )
    fields = parse_verdict_fields(render_verdict(verdict))
    assert fields["coverage"] is CoverageStatus.COVERED_WITH_PREREQUISITES
    assert fields["outstanding"] == ("physiotherapy_6_weeks",)
    assert fields["appropriateness"] is Appropriateness.APPROPRIATE_NOW


def test_verdict_requires_outstanding_when_conditional():
    rec = Recommendation(Appropriateness.APPROPRIATE_NOW, "ok", None, "doc.md")
    with pytest.raises(ValueError):
        CoverageVerdict(
            coverage=CoverageStatus.COVERED_WITH_PREREQUISITES,
            prerequisites_outstanding=(),
            appropriateness=rec,
            summary="s",
            next_steps="n",
        )


codes = st.from_regex(r"[A-Za-z][A-Za-z0-9_]{0,15}", fullmatch=True).filter(lambda c: c != "none")
limitations = st.text(
    alphabet=st.characters(blacklist_characters="\n\r", blacklist_categories=("Cs",)),
    min_size=1,
    max_size=80,
)
tokens = st.from_regex(r"[0-9a-f]{64}", fullmatch=True).map(CaseToken)


@st.composite
def inquiries(draw):
    return CoverageInquiry(
        patient_token=draw(tokens),
        symptom_class=draw(st.sampled_from(list(SymptomClass))),
        duration_weeks=draw(st.integers(0, 10_000)),
        functional_limitation=draw(limitations),
        prior_tx=tuple(draw(st.lists(codes, max_size=5))),
        proposed_treatment=draw(codes),
    )


@st.composite
def consults(draw):
    return SpecialistConsult(
        symptom_class=draw(st.sampled_from(list(SymptomClass))),
        duration_weeks=draw(st.integers(0, 10_000)),
        functional_limitation=draw(limitations),
        prior_tx=tuple(draw(st.lists(codes, max_size=5))),
        proposed_treatment=draw(codes),
    )


@given(inquiries())
def test_inquiry_round_trip_property(inquiry):
    assert parse_inquiry(render_inquiry(inquiry)) == inquiry


@given(consults())
def test_consult_round_trip_property(consult):
    assert parse_consult(render_consult(consult)) == consult


@given(inquiries())
def test_consult_from_any_inquiry_has_no_hex64(inquiry):
    assert not HEX64.search(render_consult(consult_from_inquiry(inquiry)))


# ---------------------------------------------------------------------------
# Decision tables
# ---------------------------------------------------------------------------


def test_parse_treatment_step_families():
    assert parse_treatment_step("physio_6_weeks").family == "physio"
    assert parse_treatment_step("physio_6_weeks").weeks == 6
    assert parse_treatment_step("NSAID_2_weeks").family == "analgesia"
    assert parse_treatment_step("acetaminophen_2_weeks").family == "analgesia"
    assert parse_treatment_step("home_exercises").family == "other"
    assert parse_treatment_step("home_exercises").weeks == 0


def test_infer_treatment_table():
    # moderate without a completed 6-week physio course stays conservative
    assert infer_treatment(_obs()) == TREATMENT_CONSERVATIVE
    # mild stays conservative
    assert infer_treatment(_obs(symptom=SymptomClass.MILD, prior=("acetaminophen_2_weeks",))) == (
        TREATMENT_CONSERVATIVE
    )
    # severe with analgesia >= 2w and physio >= 4w escalates
    assert (
        infer_treatment(
            _obs(symptom=SymptomClass.SEVERE, prior=("NSAID_3_weeks", "physio_4_weeks"))
        )
        == TREATMENT_HA_INJECTION
    )
    # severe without the evidenced steps stays conservative (tie toward less invasive)
    assert (
        infer_treatment(_obs(symptom=SymptomClass.SEVERE, prior=("NSAID_3_weeks",)))
        == TREATMENT_CONSERVATIVE
    )
    # moderate with completed physio escalates (row CLN-0005)
    assert (
        infer_treatment(_obs(prior=("NSAID_2_weeks", "physio_6_weeks")))
        == TREATMENT_HA_INJECTION
    )


def _rule(prereqs=("physiotherapy_6_weeks", "failed_simple_analgesia"), covered=True):
    return CoverageRule(
        plan_id="PLAN-A",
        treatment_code=TREATMENT_HA_INJECTION,
        covered=covered,
        prerequisites=tuple(prereqs),
    )


def test_prerequisites_satisfied_both_met():
    ok, outstanding = prerequisites_satisfied(
        _rule(), _inquiry(prior=("NSAID_2_weeks", "physio_6_weeks"))
    )
    assert ok and outstanding == ()


def test_prerequisites_outstanding_in_rule_order():
    ok, outstanding = prerequisites_satisfied(_rule(), _inquiry(prior=("NSAID_2_weeks",)))
    assert not ok
    assert outstanding == ("physiotherapy_6_weeks",)


def test_prerequisites_empty_list_satisfied():
    ok, outstanding = prerequisites_satisfied(_rule(prereqs=()), _inquiry(prior=()))
    assert ok and outstanding == ()


def test_prerequisites_unknown_code_is_unmet():
    ok, outstanding = prerequisites_satisfied(
        _rule(prereqs=("mystery_requirement",)), _inquiry(prior=("physio_6_weeks",))
    )
    assert not ok
    assert outstanding == ("mystery_requirement",)


def test_physio_four_weeks_does_not_satisfy_six():
    ok, outstanding = prerequisites_satisfied(
        _rule(), _inquiry(prior=("NSAID_3_weeks", "physio_4_weeks"))
    )
    assert not ok
    assert outstanding == ("physiotherapy_6_weeks",)


# ---------------------------------------------------------------------------
# Clinic policy
# ---------------------------------------------------------------------------


def test_clinic_policy_turn_sequence():
    policy = ClinicPolicy()
    body = "Confirm coverage for CLN-0001"
    history: list[ToolExchange] = []

    turn1 = policy.decide(body, history)
    assert turn1.tool_calls[0].tool == "csv_lookup"
    assert turn1.tool_calls[0].args["patient_id"] == "CLN-0001"
    history.append(_exchange("csv_lookup", render_observation_text(_obs())))

    turn2 = policy.decide(body, history)
    assert turn2.tool_calls[0].tool == "hmac_token"
    history.append(_exchange("hmac_token", TOKEN.hex))

    turn3 = policy.decide(body, history)
    assert turn3.tool_calls[0].tool == "relay_call"
    assert turn3.tool_calls[0].args["target"] == "insurer"
    inquiry = parse_inquiry(turn3.tool_calls[0].args["body"])
    assert inquiry.patient_token == TOKEN
    assert inquiry.proposed_treatment == TREATMENT_CONSERVATIVE
    history.append(_exchange("relay_call", "Coverage: Not covered\n..."))

    final = policy.decide(body, history)
    assert final.tool_calls == ()
    assert final.message == "Coverage: Not covered\n..."


def test_clinic_policy_explicit_treatment_overrides_inference():
    policy = ClinicPolicy()
    body = "Confirm coverage for CLN-0003 for knee_hyaluronic_injection"
    history = [
        _exchange(
            "csv_lookup",
            render_observation_text(
                _obs(
                    pid="CLN-0003",
                    symptom=SymptomClass.SEVERE,
                    weeks=24,
                    limitation="pain at rest; limited ROM",
                    prior=("NSAID_3_weeks", "physio_4_weeks"),
                )
            ),
        ),
        _exchange("hmac_token", TOKEN.hex),
    ]
    decision = policy.decide(body, history)
    inquiry = parse_inquiry(decision.tool_calls[0].args["body"])
    assert inquiry.proposed_treatment == TREATMENT_HA_INJECTION


def test_clinic_policy_unknown_patient():
    policy = ClinicPolicy()
    history = [_exchange("csv_lookup", NO_OBSERVATION)]
    decision = policy.decide("Confirm coverage for CLN-9999", history)
    assert decision.tool_calls == ()
    assert "Patient not found" in decision.message


def test_clinic_policy_request_without_id():
    decision = ClinicPolicy().decide("Confirm coverage please", [])
    assert decision.tool_calls == ()
    assert "Patient not found" in decision.message


def test_clinic_policy_is_pure():
    policy = ClinicPolicy()
    body = "Confirm coverage for CLN-0001"
    assert policy.decide(body, []) == policy.decide(body, [])


# ---------------------------------------------------------------------------
# Insurer policy
# ---------------------------------------------------------------------------


def _enrollment_text(plan="PLAN-A", status="active"):
    return render_enrollment_text(
        EnrollmentRow(
            subject_token=TOKEN,
            insurance_number="INS-441122",
            plan_id=plan,
            status=EnrollmentStatus(status),
        )
    )


def _recommendation_text(verdict=Appropriateness.APPROPRIATE_NOW):
    return render_recommendation(
        Recommendation(verdict, "Consistent with guidance.", None, "osteoarthritis_knee_guidance.md")
    )


def _run_insurer(inquiry: CoverageInquiry, enrollment_text: str, rule_text: str | None):
    """Drive the insurer policy across its turns against canned tool output."""
    policy = InsurerPolicy()
    body = render_inquiry(inquiry)
    history: list[ToolExchange] = []

    decision = policy.decide(body, history)
    assert decision.tool_calls[0].tool == "enrollment_match"
    assert decision.tool_calls[0].args["token"] == inquiry.patient_token.hex
    history.append(_exchange("enrollment_match", enrollment_text))

    decision = policy.decide(body, history)
    if rule_text is not None:
        assert decision.tool_calls[0].tool == "coverage_lookup"
        history.append(_exchange("coverage_lookup", rule_text))
        decision = policy.decide(body, history)

    assert decision.tool_calls[0].tool == "relay_call"
    assert decision.tool_calls[0].args["target"] == "specialist"
    consult_body = decision.tool_calls[0].args["body"]
    history.append(_exchange("relay_call", _recommendation_text()))

    final = policy.decide(body, history)
    assert final.tool_calls == ()
    return consult_body, parse_verdict_fields(final.message)


def test_insurer_not_covered_when_rule_absent():
    consult_body, fields = _run_insurer(
        _inquiry(), _enrollment_text(), "no coverage rule"
    )
    assert fields["coverage"] is CoverageStatus.NOT_COVERED
    assert fields["appropriateness"] is Appropriateness.APPROPRIATE_NOW
    parse_consult(consult_body)  # the consult is well formed and token free
    assert not HEX64.search(consult_body)


def test_insurer_not_covered_when_rule_says_no():
    rule_text = render_rule_text(_rule(covered=False, prereqs=()))
    _, fields = _run_insurer(_inquiry(treatment=TREATMENT_HA_INJECTION), _enrollment_text("PLAN-C"), rule_text)
    assert fields["coverage"] is CoverageStatus.NOT_COVERED


def test_insurer_covered_with_prerequisites():
    rule_text = render_rule_text(_rule())
    _, fields = _run_insurer(
        _inquiry(treatment=TREATMENT_HA_INJECTION, prior=("NSAID_2_weeks",)),
        _enrollment_text(),
        rule_text,
    )
    assert fields["coverage"] is CoverageStatus.COVERED_WITH_PREREQUISITES
    assert fields["outstanding"] == ("physiotherapy_6_weeks",)


def test_insurer_covered_when_prerequisites_met():
    rule_text = render_rule_text(_rule())
    _, fields = _run_insurer(
        _inquiry(treatment=TREATMENT_HA_INJECTION, prior=("NSAID_2_weeks", "physio_6_weeks")),
        _enrollment_text(),
        rule_text,
    )
    assert fields["coverage"] is CoverageStatus.COVERED


def test_insurer_unmatched_token_still_consults():
    consult_body, fields = _run_insurer(_inquiry(), NO_ENROLLMENT, None)
    assert fields["coverage"] is CoverageStatus.NOT_COVERED
    assert "no active enrolment found" in str(fields["summary"]).lower()
    parse_consult(consult_body)


def test_insurer_inactive_enrollment_is_not_covered():
    _, fields = _run_insurer(_inquiry(), _enrollment_text(status="inactive"), None)
    assert fields["coverage"] is CoverageStatus.NOT_COVERED
    assert "no active enrolment found" in str(fields["summary"]).lower()


def test_insurer_parse_failure_response():
    decision = InsurerPolicy().decide("nonsense body", [])
    assert decision.tool_calls == ()
    assert "patient_token" in decision.message


def test_insurer_forward_token_hook_leaks_token():
    policy = InsurerPolicy(forward_token=True)
    body = render_inquiry(_inquiry())
    history = [_exchange("enrollment_match", NO_ENROLLMENT)]
    decision = policy.decide(body, history)
    assert HEX64.search(decision.tool_calls[0].args["body"])


# ---------------------------------------------------------------------------
# Specialist policy
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def guidance_docs(workspace):
    return load_guidance(workspace.root / "specialist")


def _run_specialist(consult: SpecialistConsult, docs: list[GuidanceDoc]) -> Recommendation:
    policy = SpecialistPolicy()
    body = render_consult(consult)
    decision = policy.decide(body, [])
    assert decision.tool_calls[0].tool == "guidance_search"
    history = [_exchange("guidance_search", render_guidance_text(docs))]
    final = policy.decide(body, history)
    assert final.tool_calls == ()
    return parse_recommendation(final.message)


def test_specialist_conservative_moderate(guidance_docs):
    rec = _run_specialist(consult_from_inquiry(_inquiry()), guidance_docs)
    assert rec.verdict is Appropriateness.APPROPRIATE_NOW
    assert rec.source_doc == "osteoarthritis_knee_guidance.md"


def test_specialist_red_flag_dominates(guidance_docs):
    consult = consult_from_inquiry(_inquiry(limitation="locked knee since yesterday"))
    rec = _run_specialist(consult, guidance_docs)
    assert rec.verdict is Appropriateness.NOT_CURRENTLY_APPROPRIATE
    assert "urgent" in rec.next_steps.lower()
    assert rec.source_doc == "osteoarthritis_knee_red_flags.md"


def test_specialist_injection_missing_physio(guidance_docs):
    consult = consult_from_inquiry(
        _inquiry(treatment=TREATMENT_HA_INJECTION, prior=("NSAID_2_weeks",))
    )
    rec = _run_specialist(consult, guidance_docs)
    assert rec.verdict is Appropriateness.APPROPRIATE_AFTER_STEPS
    assert "physiotherapy" in rec.next_steps.lower()


def test_specialist_injection_when_ladder_complete(guidance_docs):
    consult = consult_from_inquiry(
        _inquiry(treatment=TREATMENT_HA_INJECTION, prior=("NSAID_2_weeks", "physio_6_weeks"))
    )
    rec = _run_specialist(consult, guidance_docs)
    assert rec.verdict is Appropriateness.APPROPRIATE_NOW


def test_specialist_severe_conservative_escalates(guidance_docs):
    consult = consult_from_inquiry(
        _inquiry(symptom=SymptomClass.SEVERE, limitation="pain at rest", prior=())
    )
    rec = _run_specialist(consult, guidance_docs)
    assert rec.verdict is Appropriateness.APPROPRIATE_AFTER_STEPS
    assert "escalat" in (rec.next_steps or "").lower()


def test_specialist_unknown_treatment(guidance_docs):
    consult = consult_from_inquiry(_inquiry(treatment="acupuncture_course"))
    rec = _run_specialist(consult, guidance_docs)
    assert rec.verdict is Appropriateness.NOT_CURRENTLY_APPROPRIATE


def test_specialist_parse_failure_response():
    decision = SpecialistPolicy().decide("not a consult", [])
    assert decision.tool_calls == ()
    assert "Unable to process" in decision.message
