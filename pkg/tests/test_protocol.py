from pathlib import Path

import pytest

import wedgelab
from conftest import flat_panel
from wedgelab.design import ClusterSequence, build_schematic
from wedgelab.estimation import VarianceComponents
from wedgelab.lottery import COVARIATE_WEEK, build_full_design
from wedgelab.panel import CovariateProfile, PanelDataset
from wedgelab.protocol import (
    COMPONENT_TITLES,
    COMPONENTS,
    ProtocolError,
    check_consistency,
    emit_comparison,
    emit_source,
    parse_protocol,
    validate_protocol,
)

FIXTURE = Path(wedgelab.__file__).parent / "fixtures" / "vaccine_lottery.protocol"


def fixture_text() -> str:
    return FIXTURE.read_text()


def edited(old: str, new: str) -> str:
    text = fixture_text()
    assert old in text, f"fixture no longer contains {old!r}"
    return text.replace(old, new)


def drop_section(text: str, header: str) -> str:
    lines = text.splitlines()
    out, skipping = [], False
    for ln in lines:
        if ln.strip() == header:
            skipping = True
            continue
        if skipping and ln.strip().startswith("["):
            skipping = False
        if not skipping:
            out.append(ln)
    return "\n".join(out)


def minimal_text() -> str:
    lines = ["protocol_version = 1"]
    for comp in COMPONENTS:
        for col in ("target_trial", "emulation"):
            lines.append(f"[{col}.{comp}]")
            if comp == "follow_up":
                lines += ["study_start = 1", "study_end = 6"]
            elif comp == "causal_contrast":
                lines.append("estimand = ATT")
            elif comp == "analysis_plan":
                lines += ["estimator = att_gt_unadjusted", "inference = permutation"]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# parsing the bundled worked-example protocol


def test_fixture_parses_without_errors():
    doc, diags = validate_protocol(FIXTURE)
    assert doc is not None
    assert [d for d in diags if d.severity == "error"] == []
    em = doc.emulation
    assert em.estimand == "ATT"
    assert em.horizon == 3
    assert (em.study_start, em.study_end) == (15, 30)
    assert em.excluded_weeks == 1
    assert em.threshold_pct == 70.0
    assert em.as_of_week == COVARIATE_WEEK
    assert em.estimator == "att_gt_doubly_robust"
    assert "placebo_pretrends" in em.inference
    assert "parallel_trends" in em.flags
    tt = doc.target_trial
    assert tt.estimand == "ATE"
    assert tt.estimator == "mixed_model_exposure_time"
    assert "randomization" in tt.flags


def test_emit_source_round_trips():
    doc = parse_protocol(FIXTURE)
    text = emit_source(doc)
    again = parse_protocol(text.encode())
    assert again.target_trial == doc.target_trial
    assert again.emulation == doc.emulation
    assert again.blocks == doc.blocks
    assert emit_source(again) == text


def test_missing_component_is_an_error():
    text = drop_section(fixture_text(), "[emulation.follow_up]")
    doc, diags = validate_protocol(text.encode())
    assert doc is None
    hits = [d for d in diags if d.severity == "error" and "missing: follow_up" in d.message]
    assert len(hits) == 1
    assert hits[0].component == 4


def test_unregistered_estimator_is_an_error():
    text = edited("estimator = att_gt_doubly_robust", "estimator = synthetic_control")
    doc, diags = validate_protocol(text.encode())
    assert doc is None
    hits = [d for d in diags if "synthetic_control" in d.message]
    assert hits and hits[0].component == 8
    assert "registry" in hits[0].message
    assert hits[0].line is not None


def test_parse_protocol_raises_with_diagnostics():
    with pytest.raises(ProtocolError, match="invalid protocol"):
        parse_protocol(b"not a protocol at all")
    try:
        parse_protocol(b"protocol_version = 1\n")
    except ProtocolError as exc:
        assert len(exc.diagnostics) == 16  # every component missing, both columns
    else:
        pytest.fail("expected ProtocolError")


def test_validate_is_total_on_garbage():
    doc, diags = validate_protocol(b"\xff\xfe\x00garbage")
    assert doc is None
    assert diags and "could not read" in diags[0].message
    doc, diags = validate_protocol(b"just words\n")
    assert doc is None
    assert any("expected 'key = value'" in d.message for d in diags)
    assert any("protocol_version" in d.message for d in diags)


@pytest.mark.parametrize(
    "old, new, fragment",
    [
        ("protocol_version = 1", "protocol_version = 9", "unsupported protocol_version 9"),
        ("estimand = ATT", "estimand = ATTE", "not one of ATE/ATT/other"),
        ("horizon = 3", "horizon = 0", "must be >= 1"),
        ("study_start = 15", "study_start = 31", "start after end"),
        ("inference = cluster_bootstrap, placebo_pretrends", "inference = tea_leaves", "unknown inference id"),
        ("flags = parallel_trends", "flags = parallel_worlds", "unknown assumption flag"),
    ],
)
def test_field_validation_messages(old, new, fragment):
    doc, diags = validate_protocol(edited(old, new).encode())
    assert doc is None
    assert any(fragment in d.message for d in diags), [str(d) for d in diags]


def test_line_numbers_and_section_errors():
    text = "protocol_version = 1\n[emulation.eligibility]\nwingspan = 4\n"
    doc, diags = validate_protocol(text.encode())
    assert doc is None
    bad = [d for d in diags if "unknown key 'wingspan'" in d.message]
    assert bad and bad[0].line == 3 and bad[0].component == 1
    text = "units = states\nprotocol_version = 1\n"
    _, diags = validate_protocol(text.encode())
    assert any("before any section header" in d.message for d in diags)
    text = "protocol_version = 1\n[emulation.outcomes]\n[emulation.outcomes]\n"
    _, diags = validate_protocol(text.encode())
    assert any("duplicate section" in d.message and d.line == 3 for d in diags)
    _, diags = validate_protocol(b"protocol_version = 1\n[emulation.vibes]\n")
    assert any("unknown component 'vibes'" in d.message for d in diags)


def test_minimal_document_and_comparison_table():
    doc, diags = validate_protocol(minimal_text().encode())
    assert doc is not None
    assert [d for d in diags if d.severity == "error"] == []
    table = emit_comparison(doc)
    lines = table.splitlines()
    assert "Hypothetical Target Trial" in lines[0]
    assert "Observational Study Analog/Emulation" in lines[0]
    for comp in COMPONENTS:
        label = f"{COMPONENT_TITLES[comp]}"
        assert sum(1 for ln in lines if label in ln) == 1
    # one content row per component for the minimal document
    assert sum(1 for ln in lines if ln.startswith("-")) == 9


def test_comparison_wraps_long_text():
    doc = parse_protocol(FIXTURE)
    table = emit_comparison(doc, width=34)
    lines = table.splitlines()
    label = "1. Eligibility criteria"
    start = next(i for i, ln in enumerate(lines) if ln.startswith(label))
    # The eligibility prose needs several wrapped rows below the label.
    cont = 0
    for ln in lines[start + 1 :]:
        if ln.startswith("-"):
            break
        cont += 1
    assert cont >= 2


# ---------------------------------------------------------------------------
# consistency against a design and data


def _eligible_covariates(ids, week=COVARIATE_WEEK):
    profiles = tuple(
        CovariateProfile(cid, 40.0 + 0.5 * k, 55.0 + 0.5 * k, 45.0 - 0.5 * k)
        for k, cid in enumerate(ids)
    )
    return profiles, week


def test_consistency_clean_on_worked_example():
    doc = parse_protocol(FIXTURE)
    full = build_full_design()
    profiles, week = _eligible_covariates(full.cluster_ids)
    panel = flat_panel(full, VarianceComponents(0.0, 0.0), 0.33, seed=0).with_covariates(profiles, week)
    diags = check_consistency(doc, full, panel)
    assert [d for d in diags if d.severity == "error"] == []
    warnings = [d for d in diags if d.severity == "warning"]
    assert len(warnings) == 1
    assert warnings[0].component == 6
    assert "MO" in warnings[0].message
    assert "horizon of 3" in warnings[0].message


def test_consistency_catches_range_mismatch():
    doc = parse_protocol(edited("study_start = 15", "study_start = 16").encode())
    full = build_full_design()
    profiles, week = _eligible_covariates(full.cluster_ids)
    panel = flat_panel(full, VarianceComponents(0.0, 0.0), 0.33, seed=0).with_covariates(profiles, week)
    diags = check_consistency(doc, full, panel)
    errs = [d for d in diags if d.severity == "error"]
    assert any(d.component == 4 and "do not match" in d.message for d in errs)


def test_consistency_catches_ineligible_cluster_and_exclusions():
    doc = parse_protocol(FIXTURE)
    full = build_full_design()
    profiles, week = _eligible_covariates(full.cluster_ids)
    profiles = (CovariateProfile("OH", 72.0, 80.0, 20.0),) + profiles[1:]
    panel = flat_panel(full, VarianceComponents(0.0, 0.0), 0.33, seed=0).with_covariates(profiles, week)
    diags = check_consistency(doc, full, panel)
    assert any(
        d.severity == "error" and d.component == 1 and "'OH' fails eligibility" in d.message
        for d in diags
    )

    doc2 = parse_protocol(edited("exclusions =\ntext = Midwest", "exclusions = IA\ntext = Midwest").encode())
    profiles2, week = _eligible_covariates(full.cluster_ids)
    panel2 = flat_panel(full, VarianceComponents(0.0, 0.0), 0.33, seed=0).with_covariates(profiles2, week)
    diags2 = check_consistency(doc2, full, panel2)
    assert any(
        d.severity == "error" and d.component == 1 and "exclusion list" in d.message for d in diags2
    )


def test_consistency_covariate_week_mismatch():
    doc = parse_protocol(FIXTURE)
    full = build_full_design()
    profiles, _ = _eligible_covariates(full.cluster_ids)
    panel = flat_panel(full, VarianceComponents(0.0, 0.0), 0.33, seed=0).with_covariates(profiles, 22)
    diags = check_consistency(doc, full, panel)
    assert any(
        d.severity == "error" and d.component == 1 and "week 18" in d.message and "week 22" in d.message
        for d in diags
    )


def test_consistency_washout_rule():
    doc = parse_protocol(
        edited("study_start = 15", "study_start = 1").replace("study_end = 30", "study_end = 8").encode()
    )
    sch = build_schematic(
        [ClusterSequence("a", 4), ClusterSequence("z", None)], (1, 8), n_excluded=2
    )
    profiles, week = _eligible_covariates(sch.cluster_ids)
    panel = flat_panel(sch, VarianceComponents(0.0, 0.0), 0.33, seed=0).with_covariates(profiles, week)
    diags = check_consistency(doc, sch, panel)
    assert any(
        d.severity == "error" and d.component == 4 and "washes out 2 week(s)" in d.message
        for d in diags
    )


def test_consistency_flag_and_timing_cautions():
    doc, diags = validate_protocol(minimal_text().encode())
    assert doc is not None
    # all four clusters adopt: no never-treated comparator, spread 1 week
    sch = build_schematic(
        [
            ClusterSequence("a", 2, n_excluded=0),
            ClusterSequence("b", 2, n_excluded=0),
            ClusterSequence("c", 3, n_excluded=0),
            ClusterSequence("d", 3, n_excluded=0),
        ],
        (1, 6),
    )
    panel = flat_panel(sch, VarianceComponents(0.0, 0.0), 0.33, seed=0)
    out = check_consistency(doc, sch, panel)
    comps = [d.component for d in out]
    assert comps == sorted(comps)  # ordered by component
    assert any(d.component == 7 and "no stated identification basis" in d.message for d in out)
    assert any(d.component == 7 and "timing-only design" in d.message for d in out)
    assert any(d.component == 1 and "not checked" in d.message for d in out)


def test_diagnostic_str_and_dict():
    doc, diags = validate_protocol(b"protocol_version = 1\n[emulation.vibes]\n")
    assert doc is None
    d = diags[0]
    s = str(d)
    assert "error" in s and "line 2" in s
    assert d.to_dict()["severity"] == "error"
    assert set(d.to_dict()) == {"severity", "component", "message", "line"}
