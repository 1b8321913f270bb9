import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from adapfl import experiment as ex
from adapfl import metrics
from adapfl.cli import main
from adapfl.data import partition_zones
from adapfl.federation import read_round_log
from adapfl.frameio import read_frames
from adapfl.grid import ZoneId, mean_vil
from adapfl.nn import load_weights

SMOKE = Path(__file__).resolve().parents[1] / "configs" / "smoke.ini"


def run(capsys, *argv):
    code = main([*argv, "--config", str(SMOKE)])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("trained")
    for regime in ("IL", "FL", "adapFL"):
        assert main(["train", "--regime", regime, "--out", str(root / regime), "--config", str(SMOKE)]) == 0
    return root


class TestSynth:
    def test_files_manifest_and_checksum(self, tmp_path, capsys):
        code, out, _ = run(capsys, "synth", "--out", str(tmp_path / "a"), "--n-frames", "500")
        assert code == 0
        assert len(list((tmp_path / "a").glob("*.vil"))) == 500
        assert len((tmp_path / "a" / "frames.idx").read_text().splitlines()) == 500
        run(capsys, "synth", "--out", str(tmp_path / "b"), "--n-frames", "500")
        assert ex.directory_checksum(tmp_path / "a") == ex.directory_checksum(tmp_path / "b")
        run(capsys, "synth", "--out", str(tmp_path / "c"), "--n-frames", "500", "--seed", "1")
        assert ex.directory_checksum(tmp_path / "a") != ex.directory_checksum(tmp_path / "c")

    def test_printed_means_match_field_stats(self, tmp_path, capsys):
        _, out, _ = run(capsys, "synth", "--out", str(tmp_path))
        printed = {ZoneId(l.split()[1]): float(l.split()[2]) for l in out.splitlines() if l.startswith("mean_vil")}
        zones = partition_zones(read_frames(tmp_path))
        for z, seq in zones.items():
            assert printed[z] == pytest.approx(metrics.field_stats([mean_vil(f) for f in seq]).mean, abs=5e-7)


class TestTrain:
    def test_outputs(self, trained):
        assert sorted(p.name for p in (trained / "FL").iterdir()) == ["global.adfl", "round_log_FL.csv"]
        ad = sorted(p.name for p in (trained / "adapFL").iterdir())
        assert "global.adfl" in ad and "personalized_central.adfl" in ad and "round_log_adapFL.csv" in ad
        assert len([n for n in ad if n.startswith("personalized_")]) == 5
        assert len(list((trained / "IL").glob("individual_*.adfl"))) == 5
        log = read_round_log(trained / "FL" / "round_log_FL.csv")
        assert [r.round for r in log] == [1] * 4 + [2] * 4

    def test_rerun_identical(self, trained, tmp_path):
        assert main(["train", "--regime", "adapFL", "--out", str(tmp_path), "--config", str(SMOKE)]) == 0
        assert ex.directory_checksum(tmp_path) == ex.directory_checksum(trained / "adapFL")

    def test_budget_mismatch_is_config_error(self, tmp_path, capsys):
        cfg = tmp_path / "bad.ini"
        cfg.write_text(SMOKE.read_text().replace("adapfl_rounds = 1", "adapfl_rounds = 2"))
        code = main(["train", "--regime", "FL", "--config", str(cfg), "--out", str(tmp_path / "o")])
        assert code == 1 and capsys.readouterr().err.startswith("adapfl-error:config:")


@pytest.fixture(scope="module")
def evaluated(trained, tmp_path_factory):
    out = tmp_path_factory.mktemp("eval")
    weights = [trained / "IL", trained / "FL", *sorted((trained / "adapFL").glob("personalized_*.adfl"))]
    assert main(["eval", "--weights", *map(str, weights), "--out", str(out), "--config", str(SMOKE)]) == 0
    return out


class TestEval:
    def test_skill_score_recomputes(self, evaluated):
        for table in ("results_zones.csv", "results_central.csv"):
            rows = metrics.read_eval_rows(evaluated / table)
            base = {(r["zone"], r["split"]): r["mse"] for r in rows if r["regime"] == "COTREC"}
            assert len(base) >= 1
            for r in rows:
                if r["regime"] != "COTREC":
                    assert r["skill_score"] == 1.0 - r["mse"] / base[(r["zone"], r["split"])]

    def test_table_structure(self, evaluated):
        zones = metrics.read_eval_rows(evaluated / "results_zones.csv")
        central = metrics.read_eval_rows(evaluated / "results_central.csv")
        for z in ("zone1", "zone2", "zone3", "zone4"):
            assert {r["regime"] for r in zones if r["zone"].value == z} == {"COTREC", "IL", "FL", "adapFL"}
        tags = {r["regime"] for r in central if r["split"] == "test"}
        assert tags == {"COTREC", "FL", "IL (central)", "adapFL (central)", "adapFL (zone1)", "adapFL (zone2)",
                        "adapFL (zone3)", "adapFL (zone4)"}
        own = [r for r in zones if r["regime"] == "adapFL" and r["zone"] is ZoneId.ZONE1]
        cross = [r for r in central if r["regime"] == "adapFL (zone1)" and r["split"] == "test"]
        assert len(own) == 1 and len(cross) == 1 and own[0] != cross[0]

    def test_histograms_and_renders(self, evaluated):
        edges, counts = metrics.read_histogram(evaluated / "histograms" / "FL_zone2_mse.csv")
        assert counts.sum() == metrics.read_eval_rows(evaluated / "results_zones.csv")[0]["n_images"]
        img = ex.read_pgm(evaluated / "renders" / "FL_zone2_00_prediction.pgm")
        assert img.shape == (32, 32) and img.dtype == np.uint8
        assert ex.read_pgm(evaluated / "renders" / "FL_zone2_00_input0.pgm").shape == (50, 50)

    def test_duplicate_stems_rejected(self, trained, tmp_path, capsys):
        code = main(["eval", "--weights", str(trained / "FL"), str(trained / "adapFL"), "--out", str(tmp_path),
                     "--config", str(SMOKE)])
        assert code == 1 and "global" in capsys.readouterr().err


class TestSweep:
    def test_endpoints_match_train(self, trained, tmp_path, capsys):
        assert main(["sweep", "--out", str(tmp_path / "s"), "--config", str(SMOKE)]) == 0
        capsys.readouterr()
        rows = ex.read_sweep(tmp_path / "s" / "sweep.csv")
        assert sorted({r["n_rounds"] for r in rows}) == [0, 1, 2]
        assert all(r["n_rounds"] * 1 + r["local_epochs"] == 2 for r in rows)
        assert main(["eval", "--weights", str(trained / "IL"), str(trained / "FL"), "--out", str(tmp_path / "e"),
                     "--config", str(SMOKE)]) == 0
        evals = metrics.read_eval_rows(tmp_path / "e" / "results_zones.csv")
        mse = {(r["regime"], r["zone"].value): r["mse"] for r in evals}
        for r in rows:
            if r["n_rounds"] == 0:
                assert r["mse"] == mse[("IL", r["zone"])]
            if r["n_rounds"] == 2:
                assert r["mse"] == mse[("FL", r["zone"])]


class TestDivergenceAndStats:
    def test_divergence_matrix(self, tmp_path, capsys):
        assert main(["divergence", "--out", str(tmp_path), "--config", str(SMOKE)]) == 0
        labels, m = metrics.read_matrix(tmp_path / "divergence.csv")
        assert labels == [z.value for z in ZoneId] and m.shape == (5, 5)
        assert np.array_equal(m, m.T) and np.all(np.diag(m) == 0)
        assert len({m[i, j] for i in range(5) for j in range(i + 1, 5)}) == 10

    def test_divergence_from_weight_files(self, trained, tmp_path, capsys):
        files = sorted((trained / "IL").glob("*.adfl"))
        assert main(["divergence", "--weights", *map(str, files), "--out", str(tmp_path),
                     "--config", str(SMOKE)]) == 0
        labels, _ = metrics.read_matrix(tmp_path / "divergence.csv")
        assert labels == [f.stem for f in files]

    def test_stats_round_trip(self, tmp_path, capsys):
        code, out, _ = run(capsys, "stats", "--out", str(tmp_path), "--zones", "zone1,central")
        assert code == 0
        rows = metrics.read_stats_reports(tmp_path / "stats.csv")
        assert [(z.value, s) for z, s, _ in rows] == [("zone1", "train"), ("zone1", "test"),
                                                       ("central", "train"), ("central", "test")]
        assert metrics.write_stats_reports(rows) == out
        _, counts = metrics.read_histogram(tmp_path / "histograms" / "accumulated_vil_zone1_train.csv")
        assert counts.sum() > 0


class TestErrors:
    def test_unknown_key(self, tmp_path, capsys):
        cfg = tmp_path / "c.ini"
        cfg.write_text("[training]\nbogus = 1\n")
        assert main(["stats", "--config", str(cfg)]) == 1
        assert capsys.readouterr().err.startswith("adapfl-error:config:")

    def test_bad_arguments(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--regime", "XL"])
        assert exc.value.code == 1

    def test_missing_frames_dir(self, tmp_path, capsys):
        code, _, err = run(capsys, "stats", "--frames", str(tmp_path / "nope"))
        assert code == 2 and err.startswith("adapfl-error:data:")

    def test_corrupt_weights(self, trained, tmp_path, capsys):
        bad = tmp_path / "global.adfl"
        data = bytearray((trained / "FL" / "global.adfl").read_bytes())
        data[-1] ^= 0xFF
        bad.write_bytes(bytes(data))
        code, _, err = run(capsys, "eval", "--weights", str(bad), "--out", str(tmp_path / "o"))
        assert code == 2 and "checksum" in err

    @pytest.mark.filterwarnings("ignore:overflow encountered:RuntimeWarning",
                                "ignore:invalid value encountered:RuntimeWarning")
    def test_nan_loss_is_numeric_error(self, tmp_path, capsys):
        cfg = tmp_path / "c.ini"
        cfg.write_text(SMOKE.read_text().replace("batch_size = 16", "batch_size = 16\nlearning_rate = 1e30"))
        code = main(["train", "--regime", "IL", "--config", str(cfg), "--out", str(tmp_path / "o")])
        assert code == 3 and capsys.readouterr().err.startswith("adapfl-error:numeric:")


def test_console_entry_point(tmp_path):
    exe = shutil.which("adapfl")
    cmd = [exe] if exe else [sys.executable, "-m", "adapfl.cli"]
    res = subprocess.run(cmd + ["synth", "--n-frames", "3", "--out", str(tmp_path)], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.startswith("frames 3")
