import json
from pathlib import Path

import pytest

import wedgelab
from wedgelab import __version__
from wedgelab.cli import main
from wedgelab.design import design_to_csv, render_schematic, restrict_clusters
from wedgelab.did import read_att_grid_csv
from wedgelab.estimation import VarianceComponents
from wedgelab.lottery import build_full_design
from wedgelab.panel import CovariateProfile, covariates_to_csv, panel_to_csv
from wedgelab.simulate import EffectProfile, generate_panel

pytestmark = pytest.mark.filterwarnings("ignore:adoption group")

FIXTURE = Path(wedgelab.__file__).parent / "fixtures" / "vaccine_lottery.protocol"


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("clidata")
    full = build_full_design()
    means = {t: 50.0 for t in full.periods}
    noisy = generate_panel(
        full, VarianceComponents(0.05, 0.20), means, EffectProfile.constant(0.33), seed=1234
    )
    (d / "panel.csv").write_text(panel_to_csv(noisy))
    flat = generate_panel(
        full, VarianceComponents(0.0, 0.0), means, EffectProfile.constant(0.33), seed=0
    )
    (d / "flatpanel.csv").write_text(panel_to_csv(flat))
    profiles = tuple(
        CovariateProfile(cid, 40.0 + 0.5 * k, 60.0 + 0.3 * k, 45.0 - 0.4 * k)
        for k, cid in enumerate(full.cluster_ids)
    )
    (d / "covariates.csv").write_text(covariates_to_csv(profiles))
    (d / "design.csv").write_text(design_to_csv(full))
    (d / "announcements.csv").write_text("cluster,announce_week\na,3\nb,5\nz,\n")
    return d


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


# ---------------------------------------------------------------------------
# exit codes and plumbing


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert __version__ in capsys.readouterr().out


def test_usage_errors_exit_2(capsys):
    for argv in (
        ["design"],  # missing subcommand
        ["power", "analytic", "--design", "midwest_full"],  # missing required flags
        ["power", "simulate", "--design", "midwest_full", "--sigma2", "0.39",
         "--icc", "0.26", "--delta", "0.33"],  # --seed is required
        ["did", "attgt", "--design", "midwest_full", "--panel", "x.csv", "--mode", "loess"],
    ):
        with pytest.raises(SystemExit) as exc:
            main(argv)
        assert exc.value.code == 2
        capsys.readouterr()


def test_runtime_errors_exit_1(capsys):
    code, out, err = run(capsys, "design", "render", "--design", "no_such_file.csv")
    assert code == 1
    assert err.startswith("wedgelab: ")
    code, _, err = run(
        capsys, "power", "analytic", "--design", "midwest_full",
        "--sigma2", "0.26", "--icc", "0.39", "--delta", "0.33", "--alpha", "7",
    )
    assert code == 1
    assert "alpha" in err


def test_bad_config_exits_2(capsys, data_dir):
    with pytest.raises(SystemExit) as exc:
        main(["--config", str(data_dir / "no_such.cfg"), "design", "render",
              "--design", "midwest_full"])
    assert exc.value.code == 2
    capsys.readouterr()


# ---------------------------------------------------------------------------
# design


def test_design_render_matches_library(capsys):
    code, out, _ = run(capsys, "design", "render", "--design", "midwest_full")
    assert code == 0
    assert out == render_schematic(build_full_design()) + "\n"


def test_design_build_from_announcements(capsys, data_dir):
    code, out, _ = run(
        capsys, "design", "build",
        "--announcements", str(data_dir / "announcements.csv"),
        "--start", "1", "--end", "9",
    )
    assert code == 0
    lines = out.splitlines()
    assert lines[0] == "cluster,period,status"
    assert "a,3,excluded" in lines  # announcement week washed out
    assert "a,4,exposed" in lines
    assert "z,9,control" in lines


def test_design_build_requires_source(capsys):
    code, _, err = run(capsys, "design", "build", "--start", "1", "--end", "4")
    assert code == 1
    assert "--announcements or --builtin" in err


def test_design_restrict(capsys):
    code, out, _ = run(
        capsys, "design", "restrict", "--design", "midwest_full", "--keep", "OH, IA",
    )
    assert code == 0
    want = design_to_csv(restrict_clusters(build_full_design(), ["OH", "IA"]))
    assert out == want


def test_design_groups_json(capsys):
    code, out, _ = run(capsys, "design", "groups", "--design", "midwest_full")
    assert code == 0
    payload = json.loads(out)
    assert payload["version"] == __version__
    assert payload["groups"]["20"] == ["OH"]
    assert payload["groups"]["30"] == ["MO"]
    assert len(payload["never_exposed"]) == 8


def test_design_from_csv_file(capsys, data_dir):
    code, out, _ = run(
        capsys, "design", "groups", "--design", str(data_dir / "design.csv"),
        "--format", "text",
    )
    assert code == 0
    assert "20: OH" in out
    assert "never:" in out


# ---------------------------------------------------------------------------
# match / estimate


def test_match_csv_output(capsys, data_dir):
    code, out, _ = run(
        capsys, "match", "--covariates", str(data_dir / "covariates.csv"),
        "--treated", "OH,IL", "--pool", "IA,IN,KS",
    )
    assert code == 0
    lines = out.strip().splitlines()
    assert lines[0] == "treated,control"
    assert len(lines) == 3
    assert lines[1].startswith("OH,")


def test_estimate_trend_json(capsys, data_dir):
    code, out, _ = run(
        capsys, "estimate", "trend", "--design", "midwest_full",
        "--panel", str(data_dir / "panel.csv"), "--changepoint", "20",
    )
    assert code == 0
    payload = json.loads(out)
    assert payload["n_obs"] == 166
    assert abs(payload["mean_start"] - 50.0) < 1.0
    assert payload["changepoint"] == 20


def test_estimate_vc_json(capsys, data_dir):
    code, out, _ = run(
        capsys, "estimate", "vc", "--design", "midwest_full",
        "--panel", str(data_dir / "panel.csv"),
    )
    assert code == 0
    payload = json.loads(out)
    assert payload["n_obs"] == 166
    assert 0.0 <= payload["icc"] < 1.0
    assert payload["sigma2_marginal"] > 0


# ---------------------------------------------------------------------------
# power


def test_power_analytic_json(capsys):
    code, out, _ = run(
        capsys, "power", "analytic", "--design", "midwest_full",
        "--sigma2", "0.26", "--icc", "0.39", "--delta", "0.33",
    )
    assert code == 0
    payload = json.loads(out)
    assert payload["version"] == __version__
    assert payload["excluded_policy"] == "as_exposed"
    assert abs(payload["power"] - 0.7685) < 5e-4
    assert payload["design_id"] == "midwest_full"


def test_power_analytic_text_and_out_file(capsys, tmp_path):
    dest = tmp_path / "power.txt"
    code, out, _ = run(
        capsys, "power", "analytic", "--design", "matched_pairs",
        "--sigma2", "0.35", "--icc", "0.42", "--delta", "0.33",
        "--format", "text", "--out", str(dest),
    )
    assert code == 0
    assert out == ""  # routed to the file instead
    text = dest.read_text()
    assert text.startswith("power 0.59")
    assert "design=matched_pairs" in text


def test_power_calibrate_text(capsys):
    code, out, _ = run(capsys, "power", "calibrate-excluded", "--format", "text")
    assert code == 0
    assert "selected: as_exposed" in out
    for policy in ("drop", "as_control", "as_exposed"):
        assert policy in out


def test_power_simulate_deterministic(capsys):
    argv = (
        "power", "simulate", "--design", "adopters_only",
        "--sigma2", "0.35", "--icc", "0.42", "--delta", "0.33",
        "--n-sims", "150", "--seed", "5", "--vc-mode", "known",
    )
    code, out1, _ = run(capsys, *argv)
    assert code == 0
    payload = json.loads(out1)
    assert payload["method"] == "simulated"
    assert payload["n_sims"] == 150 and payload["seed"] == 5
    assert 0.0 <= payload["power"] <= 1.0
    assert payload["mc_se"] > 0
    code, out2, _ = run(capsys, *argv)
    assert out2 == out1


# ---------------------------------------------------------------------------
# did / trial


def test_did_attgt_csv(capsys, data_dir, tmp_path):
    dest = tmp_path / "grid.csv"
    code, out, _ = run(
        capsys, "did", "attgt", "--design", "midwest_full",
        "--panel", str(data_dir / "flatpanel.csv"), "--mode", "unadjusted",
        "--out", str(dest),
    )
    assert code == 0
    grid = read_att_grid_csv(dest)
    assert len(grid.entries) == 22
    assert all(abs(c.att - 0.33) < 1e-9 for c in grid.entries)


def test_did_aggregate_from_grid_csv(capsys, data_dir, tmp_path):
    dest = tmp_path / "grid.csv"
    run(
        capsys, "did", "attgt", "--design", "midwest_full",
        "--panel", str(data_dir / "flatpanel.csv"), "--mode", "unadjusted",
        "--out", str(dest),
    )
    code, out, _ = run(
        capsys, "did", "aggregate", "--att-grid", str(dest), "--horizon", "3",
    )
    assert code == 0
    payload = json.loads(out)
    assert abs(payload["estimate"] - 0.33) < 1e-9
    assert payload["method"] == "att_aggregate"


def test_did_bootstrap_json(capsys, data_dir):
    code, out, _ = run(
        capsys, "did", "bootstrap", "--design", "midwest_full",
        "--panel", str(data_dir / "flatpanel.csv"), "--mode", "unadjusted",
        "-B", "200", "--seed", "7",
    )
    assert code == 0
    payload = json.loads(out)
    assert abs(payload["estimate"] - 0.33) < 1e-9
    assert payload["se"] == 0.0
    assert payload["ci_low"] == pytest.approx(0.33)


def test_did_placebo_passes_on_flat_panel(capsys, data_dir):
    code, out, _ = run(
        capsys, "did", "placebo", "--design", "midwest_full",
        "--panel", str(data_dir / "flatpanel.csv"), "--mode", "unadjusted",
        "-B", "200", "--seed", "3",
    )
    assert code == 0
    payload = json.loads(out)
    assert payload["passed"] is True
    assert payload["intervals"]
    for iv in payload["intervals"]:
        assert iv["ci_low"] <= 0.0 <= iv["ci_high"]


def test_trial_fit_json(capsys, data_dir):
    code, out, _ = run(
        capsys, "trial", "fit", "--design", "midwest_full",
        "--panel", str(data_dir / "flatpanel.csv"), "--horizon", "3",
    )
    assert code == 0
    payload = json.loads(out)
    assert abs(payload["estimate"] - 0.33) < 1e-9


def test_trial_permute_json(capsys, data_dir):
    code, out, _ = run(
        capsys, "trial", "permute", "--design", "midwest_full",
        "--panel", str(data_dir / "flatpanel.csv"),
        "--estimator", "att_gt", "--mode", "unadjusted",
        "--n-perms", "99", "--seed", "31",
    )
    assert code == 0
    payload = json.loads(out)
    assert payload["method"] == "permutation"
    assert 0.0 < payload["p_value"] <= 1.0


# ---------------------------------------------------------------------------
# protocol


def test_protocol_validate_ok(capsys):
    code, out, _ = run(capsys, "protocol", "validate", "--protocol", str(FIXTURE))
    assert code == 0
    assert "OK: protocol is valid" in out


def test_protocol_validate_with_design_and_data(capsys, data_dir):
    code, out, _ = run(
        capsys, "protocol", "validate", "--protocol", str(FIXTURE),
        "--design", "midwest_full",
        "--panel", str(data_dir / "flatpanel.csv"),
        "--covariates", str(data_dir / "covariates.csv"),
        "--covariate-week", "18",
        "--format", "json",
    )
    assert code == 0  # warnings only
    payload = json.loads(out)
    assert payload["valid"] is True
    assert payload["n_errors"] == 0
    warnings = [d for d in payload["diagnostics"] if d["severity"] == "warning"]
    assert len(warnings) == 1 and "MO" in warnings[0]["message"]


def test_protocol_validate_bad_file(capsys, tmp_path):
    bad = tmp_path / "broken.protocol"
    bad.write_text("protocol_version = 1\n[emulation.outcomes]\n")
    code, out, _ = run(capsys, "protocol", "validate", "--protocol", str(bad))
    assert code == 1
    assert "column missing" in out


def test_protocol_report_writes_files(capsys, tmp_path):
    outdir = tmp_path / "report"
    code, out, _ = run(
        capsys, "protocol", "report", "--protocol", str(FIXTURE),
        "--outdir", str(outdir), "--design", "midwest_full",
    )
    assert code == 0
    assert (outdir / "protocol_comparison.txt").exists()
    assert (outdir / "protocol.json").exists()
    assert (outdir / "design_schematic.png").read_bytes()[:4] == b"\x89PNG"
    assert "protocol_comparison.txt" in out
    comparison = (outdir / "protocol_comparison.txt").read_text()
    assert "Hypothetical Target Trial" in comparison


# ---------------------------------------------------------------------------
# repro


def test_repro_tables_without_data(capsys, tmp_path):
    outdir = tmp_path / "repro"
    code, out, _ = run(capsys, "repro", "tables", "--outdir", str(outdir))
    assert code == 0
    for name in (
        "table_power.csv",
        "table_power.txt",
        "calibration.json",
        "schematic_midwest_full.png",
        "schematic_matched_pairs.png",
        "schematic_adopters_only.png",
        "power_comparison.png",
        "run_metadata.json",
    ):
        assert (outdir / name).exists(), name
    meta = json.loads((outdir / "run_metadata.json").read_text())
    assert meta["excluded_policy"] == "as_exposed"
    assert "event_study.png" not in meta["files"]
    # determinism: a second run produces byte-identical tables
    outdir2 = tmp_path / "repro2"
    run(capsys, "repro", "tables", "--outdir", str(outdir2))
    assert (outdir2 / "table_power.csv").read_bytes() == (outdir / "table_power.csv").read_bytes()
    assert (outdir2 / "table_power.txt").read_bytes() == (outdir / "table_power.txt").read_bytes()


def test_repro_tables_with_data(capsys, tmp_path, data_dir):
    outdir = tmp_path / "repro_full"
    code, out, _ = run(
        capsys, "repro", "tables", "--outdir", str(outdir),
        "--panel", str(data_dir / "panel.csv"),
        "--covariates", str(data_dir / "covariates.csv"),
    )
    assert code == 0
    for name in ("table_matched_pairs.csv", "table_parameters.csv", "event_study.png"):
        assert (outdir / name).exists(), name
    rows = (outdir / "table_parameters.csv").read_text().splitlines()
    assert rows[0].startswith("design_id,")
    assert len(rows) == 3


# ---------------------------------------------------------------------------
# config file and data-dir resolution


def test_config_supplies_paths(capsys, data_dir, tmp_path):
    cfg = tmp_path / "wedgelab.cfg"
    cfg.write_text(
        "[paths]\n"
        f"panel = {data_dir / 'flatpanel.csv'}\n"
        "design = midwest_full\n"
    )
    code, out, _ = run(
        capsys, "--config", str(cfg), "did", "aggregate",
        "--mode", "unadjusted", "--horizon", "3",
    )
    assert code == 0
    payload = json.loads(out)
    assert abs(payload["estimate"] - 0.33) < 1e-9


def test_data_dir_flag_resolves_bare_names(capsys, data_dir, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    code, out, _ = run(
        capsys, "--data-dir", str(data_dir), "did", "aggregate",
        "--design", "midwest_full", "--panel", "flatpanel.csv",
        "--mode", "unadjusted",
    )
    assert code == 0
    assert abs(json.loads(out)["estimate"] - 0.33) < 1e-9


def test_env_var_resolves_bare_names(capsys, data_dir, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.setenv("WEDGELAB_DATA_DIR", str(data_dir))
    code, out, _ = run(
        capsys, "did", "aggregate",
        "--design", "midwest_full", "--panel", "flatpanel.csv",
        "--mode", "unadjusted",
    )
    assert code == 0
    assert abs(json.loads(out)["estimate"] - 0.33) < 1e-9
