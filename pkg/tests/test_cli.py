"""Tests for the command line interface and its output contracts."""

import json

import numpy as np
import pytest

from dcbf.cli import apply_overrides, load_config, main, scenario_from_dict
from dcbf.core import ConfigError


def _short_config(tmp_path, **extra):
    obj = {
        "experiment": "RX_BF",
        "n_cycles": 3,
        "noise_power": 0.1,
        "seed": 5,
    }
    obj.update(extra)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(obj))
    return path


class TestConfigHandling:
    def test_load_bundled_config(self):
        cfg = load_config("rx_bf_interf")
        assert cfg.experiment == "RX_BF_INTERF"
        assert cfg.interferer_power > 0

    def test_unknown_field_rejected_with_path(self):
        with pytest.raises(ConfigError, match="not_a_field"):
            scenario_from_dict({"not_a_field": 1})
        with pytest.raises(ConfigError, match="mesh.bogus"):
            scenario_from_dict({"mesh": {"bogus": 2}})

    def test_overrides(self):
        cfg = load_config("rx_bf")
        cfg2 = apply_overrides(cfg, ["seed=99", "mesh.n_nodes=2", "noise_power=0.25"])
        assert cfg2.seed == 99
        assert cfg2.mesh.n_nodes == 2
        assert cfg2.noise_power == 0.25

    def test_bad_override_path(self):
        cfg = load_config("rx_bf")
        with pytest.raises(ConfigError, match="unknown"):
            apply_overrides(cfg, ["nope.deep=1"])

    def test_missing_config_is_config_error(self, tmp_path, capsys):
        rc = main(["run", "--config", str(tmp_path / "absent.json"), "--out", str(tmp_path)])
        assert rc == 2
        assert "config error" in capsys.readouterr().err


class TestRun:
    def test_run_writes_outputs(self, tmp_path, capsys):
        cfg_path = _short_config(tmp_path)
        out = tmp_path / "out"
        rc = main(["run", "--config", str(cfg_path), "--out", str(out)])
        assert rc == 0
        csv_lines = (out / "cycles.csv").read_text().splitlines()
        assert csv_lines[0].startswith("# schema=cycles-v1 manifest=")
        header = csv_lines[1].split(",")
        assert header[0] == "cycle"
        assert "gain_snr_db" in header
        assert len(csv_lines) == 2 + 3  # comment + header + n_cycles rows
        summary = json.loads((out / "summary.json").read_text())
        manifest = json.loads((out / "manifest.json").read_text())
        assert summary["manifest"] == manifest["manifest_sha256"]
        assert manifest["seed"] == 5
        assert manifest["virtual_time_s"]["end"] == pytest.approx(3 * 0.2)

    def test_rerun_byte_identical(self, tmp_path):
        cfg_path = _short_config(tmp_path)
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert main(["run", "--config", str(cfg_path), "--out", str(out1)]) == 0
        assert main(["run", "--config", str(cfg_path), "--out", str(out2)]) == 0
        assert (out1 / "cycles.csv").read_bytes() == (out2 / "cycles.csv").read_bytes()
        assert (out1 / "summary.json").read_bytes() == (out2 / "summary.json").read_bytes()

    def test_seed_override_changes_values_not_schema(self, tmp_path):
        cfg_path = _short_config(tmp_path)
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert main(["run", "--config", str(cfg_path), "--out", str(out1)]) == 0
        assert main(["run", "--config", str(cfg_path), "--out", str(out2), "--seed", "77"]) == 0
        a = (out1 / "cycles.csv").read_text().splitlines()
        b = (out2 / "cycles.csv").read_text().splitlines()
        assert a[1] == b[1]  # same column header
        assert a[2:] != b[2:]

    def test_summary_gains_match_csv_recompute(self, tmp_path):
        cfg_path = _short_config(tmp_path, n_cycles=4)
        out = tmp_path / "out"
        assert main(["run", "--config", str(cfg_path), "--out", str(out)]) == 0
        lines = (out / "cycles.csv").read_text().splitlines()
        header = lines[1].split(",")
        gi = header.index("gain_snr_db")
        fi = header.index("flags")
        gains = []
        for row in lines[2:]:
            cells = row.split(",")
            if "warmup" in cells[fi]:
                continue
            g = float(cells[gi])
            if np.isfinite(g):
                gains.append(10 ** (g / 10))
        recomputed = 10 * np.log10(np.mean(gains))
        summary = json.loads((out / "summary.json").read_text())
        assert abs(summary["gain_snr_db_timeavg"] - recomputed) <= 1e-9

    def test_iq_dump(self, tmp_path):
        cfg_path = _short_config(tmp_path)
        out = tmp_path / "out"
        assert main(["run", "--config", str(cfg_path), "--out", str(out), "--iq-dump"]) == 0
        assert (out / "frames" / "source.iq").exists()
        assert (out / "frames" / "source.iq.json").exists()


class TestBounds:
    def test_spot_values(self, tmp_path):
        out = tmp_path / "bounds.csv"
        rc = main(["bounds", "--n", "3", "--phi-min", "0", "--phi-max", "1", "--steps", "3",
                   "--out", str(out)])
        assert rc == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "phi_var,power_gain_db,rx_gain_db,inr_bound"
        first = lines[1].split(",")
        assert float(first[0]) == 0.0
        assert float(first[1]) == pytest.approx(9.542, abs=0.001)
        assert float(first[3]) == 0.0

    def test_single_node_flat_zero(self, tmp_path):
        out = tmp_path / "bounds.csv"
        assert main(["bounds", "--n", "1", "--steps", "5", "--out", str(out)]) == 0
        for row in out.read_text().splitlines()[1:]:
            cells = row.split(",")
            assert float(cells[1]) == pytest.approx(0.0)
            assert float(cells[3]) == 0.0

    def test_bad_range(self, tmp_path, capsys):
        rc = main(["bounds", "--phi-min", "2", "--phi-max", "1", "--out", str(tmp_path / "b.csv")])
        assert rc == 2


class TestSyncDemo:
    def test_prints_rounds_and_hexdump(self, capsys):
        rc = main(["sync-demo", "--rounds", "2", "--snr-db", "20"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "encoded LEADER_REPLY" in out
        assert "round 0" in out and "round 1" in out
        assert "delta_hat" in out

    def test_symmetric_residual_zero(self, capsys):
        main(["sync-demo", "--rounds", "1", "--snr-db", "60", "--delta-s", "0.001"])
        out = capsys.readouterr().out
        line = [ln for ln in out.splitlines() if "round 0" in ln][0]
        residual = float(line.split("residual = ")[1].split(" s")[0])
        assert abs(residual) < 1e-12

    def test_asymmetry_residual(self, capsys):
        main(["sync-demo", "--rounds", "1", "--snr-db", "60", "--asym-samples", "4"])
        out = capsys.readouterr().out
        line = [ln for ln in out.splitlines() if "round 0" in ln][0]
        residual = float(line.split("residual = ")[1].split(" s")[0])
        assert abs(residual) == pytest.approx(4 / 2 / 2e6, rel=1e-6)

    def test_snr_sweep_monotone(self, capsys):
        rc = main(["sync-demo", "--rounds", "30", "--sweep", "4,6,8"])
        assert rc == 0
        out = capsys.readouterr().out
        rms = []
        for line in out.splitlines():
            if "rms = " in line and "dB:" in line:
                rms.append(float(line.split("rms = ")[1].split(" s")[0]))
        assert len(rms) == 3
        assert rms[0] > rms[1] > rms[2]


class TestDumpFrame:
    def test_dump_and_reload(self, tmp_path):
        out = tmp_path / "f.iq"
        rc = main(["dump-frame", "--kind", "rx-source", "--out", str(out)])
        assert rc == 0
        from dcbf.waveform import read_frame_iq

        sig, layout = read_frame_iq(out)
        assert layout.total_length == 75560

    def test_tx_node_dump(self, tmp_path):
        out = tmp_path / "n2.iq"
        assert main(["dump-frame", "--kind", "tx-node", "--node-id", "2", "--out", str(out)]) == 0
        meta = json.loads((tmp_path / "n2.iq.json").read_text())
        assert meta["total_length"] == 91472
