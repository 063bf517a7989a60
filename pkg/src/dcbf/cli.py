"""Command line interface: experiment dispatch and results emission.

Subcommands:
  run        execute a scenario config, emit cycles.csv / summary.json / manifest.json
  bounds     tabulate the phase-error performance bounds
  sync-demo  run time-transfer rounds and dump one encoded message as hex
  dump-frame export a frame as float32 I/Q with a JSON layout sidecar

Exit codes: 0 ok, 2 config error, 3 runtime error. Set DCBF_LOG for verbosity.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from fractions import Fraction
from importlib import resources
from pathlib import Path

import numpy as np

from . import metrics, timesync, waveform
from .core import ConfigError, MeshConfig, NodeState, substream
from .impairments import ChannelModel, NoiseSpec
from .scenario import CycleRecord, ScenarioConfig, run_scenario, validate_scenario

CSV_SCHEMA = "cycles-v1"
ARTIFACT_VERSION = "0.1.0"

log = logging.getLogger("dcbf")


# ---------------------------------------------------------------------------
# Config handling
# ---------------------------------------------------------------------------


def _mesh_from_dict(obj: dict) -> MeshConfig:
    known = {f.name for f in dataclasses.fields(MeshConfig)}
    for key in obj:
        if key not in known:
            raise ConfigError(f"mesh.{key}", "unknown field")
    return MeshConfig(**obj)


def scenario_from_dict(obj: dict) -> ScenarioConfig:
    known = {f.name for f in dataclasses.fields(ScenarioConfig)}
    for key in obj:
        if key not in known:
            raise ConfigError(key, "unknown field")
    obj = dict(obj)
    if "mesh" in obj and isinstance(obj["mesh"], dict):
        obj["mesh"] = _mesh_from_dict(obj["mesh"])
    return validate_scenario(ScenarioConfig(**obj))


def load_config(path_or_name: str) -> ScenarioConfig:
    """Load a JSON scenario config from a path, or by bundled config name."""
    path = Path(path_or_name)
    if path.exists():
        text = path.read_text()
    else:
        name = path_or_name if path_or_name.endswith(".json") else path_or_name + ".json"
        ref = resources.files("dcbf").joinpath("configs", name)
        if not ref.is_file():
            raise ConfigError("config", f"no such file or bundled config: {path_or_name}")
        text = ref.read_text()
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON: {exc}") from exc
    return scenario_from_dict(obj)


def apply_overrides(cfg: ScenarioConfig, overrides: list[str]) -> ScenarioConfig:
    """Apply key=value overrides; dotted keys reach into mesh.* fields."""
    obj = dataclasses.asdict(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError("override", f"expected key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        parts = key.split(".")
        target = obj
        for p in parts[:-1]:
            if p not in target or not isinstance(target[p], dict):
                raise ConfigError(key, "unknown override path")
            target = target[p]
        if parts[-1] not in target:
            raise ConfigError(key, "unknown field")
        target[parts[-1]] = value
    return scenario_from_dict(obj)


def _manifest_hash(cfg_dict: dict, seed: int) -> str:
    canonical = json.dumps(
        {"artifact_version": ARTIFACT_VERSION, "seed": seed, "config": cfg_dict},
        sort_keys=True,
        separators=(",", ":"),
    )
    return hashlib.sha256(canonical.encode()).hexdigest()


# ---------------------------------------------------------------------------
# Emission
# ---------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x))


def cycle_csv_lines(records: list[CycleRecord], n_nodes: int, manifest: str) -> list[str]:
    cols = ["cycle", "t_virtual_s", "flags"]
    for i in range(1, n_nodes + 1):
        cols += [
            f"siso_snr_db_{i}",
            f"siso_inr_db_{i}",
            f"siso_sinr_db_{i}",
            f"det_stat_{i}",
            f"cfo_hz_{i}",
        ]
    cols += [
        "bf_snr_db",
        "bf_inr_db",
        "bf_sinr_db",
        "gain_snr_db",
        "sinr_improvement_db",
        "inr_reduction_db",
        "bf_snr_c_db",
        "gain_c_db",
        "beamformer_ref",
    ]
    lines = [f"# schema={CSV_SCHEMA} manifest={manifest}", ",".join(cols)]

    def node_val(lst: list[float], i: int) -> float:
        return lst[i] if i < len(lst) else float("nan")

    for r in records:
        row = [str(r.cycle), _fmt(r.t_virtual_s), r.flags]
        for i in range(n_nodes):
            row += [
                _fmt(node_val(r.siso_snr_db, i)),
                _fmt(node_val(r.siso_inr_db, i)),
                _fmt(node_val(r.siso_sinr_db, i)),
                _fmt(node_val(r.detection_stat, i)),
                _fmt(node_val(r.cfo_est_hz, i)),
            ]
        row += [
            _fmt(r.bf_snr_db),
            _fmt(r.bf_inr_db),
            _fmt(r.bf_sinr_db),
            _fmt(r.gain_snr_db),
            _fmt(r.sinr_improvement_db),
            _fmt(r.inr_reduction_db),
            _fmt(r.bf_snr_c_db),
            _fmt(r.gain_c_db),
            r.beamformer_ref,
        ]
        lines.append(",".join(row))
    return lines


def _timeavg_db(values_db: list[float]) -> float:
    """Linear-domain mean of finite dB entries, back in dB; nan if none."""
    lin = [10 ** (v / 10) for v in values_db if np.isfinite(v)]
    if not lin:
        return float("nan")
    return float(10 * np.log10(np.mean(lin)))


def summarize(records: list[CycleRecord], cfg: ScenarioConfig, manifest: str) -> dict:
    steady = [r for r in records if "warmup" not in r.flags]
    n = cfg.mesh.n_nodes
    summary = {
        "schema": "summary-v1",
        "manifest": manifest,
        "experiment": cfg.experiment,
        "n_cycles": len(records),
        "n_warmup": sum(1 for r in records if "warmup" in r.flags),
        "n_acq_failures": sum(1 for r in records if "acq_fail" in r.flags),
        "gain_snr_db_timeavg": _timeavg_db([r.gain_snr_db for r in steady]),
        "gain_c_db_timeavg": _timeavg_db([r.gain_c_db for r in steady]),
        "sinr_improvement_db_timeavg": _timeavg_db([r.sinr_improvement_db for r in steady]),
        "inr_reduction_db_timeavg": _timeavg_db([r.inr_reduction_db for r in steady]),
        "bounds": {
            "power_gain_db_phi0": metrics.to_db(metrics.power_gain_bound(n, 0.0)),
            "rx_snr_gain_db_phi0": metrics.to_db(metrics.rx_snr_gain_bound(n, 0.0)),
            "inr_reduction_bound_phi0": metrics.inr_reduction_bound(n, 0.0),
        },
    }
    if cfg.experiment == "COHERENCE":
        t_end = cfg.n_cycles * cfg.mesh.cycle_period_s
        phi_terminal = cfg.phase_walk_var_per_s * max(t_end - cfg.feedback_halt_time_s, 0.0)
        summary["bounds"]["phi_var_terminal"] = phi_terminal
        summary["bounds"]["power_gain_db_phi_terminal"] = metrics.to_db(
            metrics.power_gain_bound(n, phi_terminal)
        )
    return summary


def _write_run_outputs(out_dir: Path, cfg: ScenarioConfig, records: list[CycleRecord]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg_dict = dataclasses.asdict(cfg)
    manifest = _manifest_hash(cfg_dict, cfg.seed)
    lines = cycle_csv_lines(records, cfg.mesh.n_nodes, manifest)
    (out_dir / "cycles.csv").write_text("\n".join(lines) + "\n")
    summary = summarize(records, cfg, manifest)
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    manifest_obj = {
        "artifact_version": ARTIFACT_VERSION,
        "manifest_sha256": manifest,
        "seed": cfg.seed,
        "config": cfg_dict,
        "outputs": ["cycles.csv", "summary.json"],
        "virtual_time_s": {"start": 0.0, "end": cfg.n_cycles * cfg.mesh.cycle_period_s},
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest_obj, indent=2, sort_keys=True) + "\n")


def _dump_template_frames(out_dir: Path, cfg: ScenarioConfig) -> None:
    frames_dir = out_dir / "frames"
    frames_dir.mkdir(parents=True, exist_ok=True)
    mesh = cfg.mesh
    if cfg.experiment in ("RX_BF", "RX_BF_INTERF"):
        sig, layout = waveform.build_frame(
            waveform.FrameSpec(waveform.FrameKind.RX_BF_SOURCE, amble_seed=0, payload_seed=cfg.seed), mesh
        )
        waveform.write_frame_iq(frames_dir / "source.iq", sig, layout)
        if cfg.experiment == "RX_BF_INTERF":
            sig, layout = waveform.build_frame(
                waveform.FrameSpec(waveform.FrameKind.RX_BF_INTERFERER, payload_seed=cfg.seed), mesh
            )
            waveform.write_frame_iq(frames_dir / "interferer.iq", sig, layout)
    else:
        for i in range(1, mesh.n_nodes + 1):
            sig, layout = waveform.build_frame(
                waveform.FrameSpec(
                    waveform.FrameKind.TX_BF_NODE, amble_seed=0, payload_seed=cfg.seed, node_id=i
                ),
                mesh,
            )
            waveform.write_frame_iq(frames_dir / f"node_{i}.iq", sig, layout)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_run(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    overrides = list(args.override or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    log.info("running %s for %d cycles (seed %d)", cfg.experiment, cfg.n_cycles, cfg.seed)
    records = run_scenario(cfg)
    out_dir = Path(args.out)
    _write_run_outputs(out_dir, cfg, records)
    if args.iq_dump:
        _dump_template_frames(out_dir, cfg)
    print(f"wrote {out_dir / 'cycles.csv'} ({len(records)} cycles)")
    return 0


def cmd_bounds(args: argparse.Namespace) -> int:
    if args.steps < 1 or args.phi_max < args.phi_min or args.phi_min < 0:
        raise ConfigError("phi range", "need 0 <= phi-min <= phi-max and steps >= 1")
    grid = np.linspace(args.phi_min, args.phi_max, args.steps)
    lines = ["phi_var,power_gain_db,rx_gain_db,inr_bound"]
    for phi in grid:
        lines.append(
            ",".join(
                [
                    _fmt(phi),
                    _fmt(metrics.to_db(metrics.power_gain_bound(args.n, phi))),
                    _fmt(metrics.to_db(metrics.rx_snr_gain_bound(args.n, phi))),
                    _fmt(metrics.inr_reduction_bound(args.n, phi)),
                ]
            )
        )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(lines) + "\n")
    print(f"wrote {out} ({args.steps} rows)")
    return 0


def _sync_rounds(snr_db: float, args: argparse.Namespace, seed_label: str, fresh: bool = False) -> list:
    """Run sync rounds; fresh=True restarts the follower each round so the
    per-round residual statistics are i.i.d. (used for the SNR sweep)."""
    leader = NodeState(node_id="L")
    follower = NodeState(node_id="F", timestamp_offset_s=args.delta_s)
    up = ChannelModel(taps=np.array([1.0 + 0j]), tof_delay=args.tof_samples, label="F->L")
    down = ChannelModel(
        taps=np.array([1.0 + 0j]), tof_delay=args.tof_samples + args.asym_samples, label="L->F"
    )
    noise = NoiseSpec(10 ** (-snr_db / 10))
    rng = substream(args.seed, "sync", seed_label)
    history: list = []
    results = []
    for _ in range(args.rounds):
        if fresh:
            follower = NodeState(node_id="F", timestamp_offset_s=args.delta_s)
            history = []
        results.append(
            timesync.run_sync_round(
                leader, follower, up, down, noise, rng, use_index=args.use_index, history=history
            )
        )
    return results


def cmd_sync_demo(args: argparse.Namespace) -> int:
    msg = timesync.SyncMessage(
        timesync.MessageKind.LEADER_REPLY,
        t_tx_follower=timesync.Timestamp.from_fraction(Fraction(12345, 8)),
        t_tx_leader=timesync.Timestamp.from_fraction(Fraction(12347, 8)),
        t_rx_leader=timesync.Timestamp.from_fraction(Fraction(98765, 64)),
    )
    bits = timesync.encode_sync_message(msg)
    hexdump = np.packbits(bits).tobytes().hex()
    print(f"encoded LEADER_REPLY ({len(bits)} coded bits): {hexdump}")

    print(f"rounds at Es/N0 = {args.snr_db:.1f} dB (initial offset {args.delta_s} s):")
    for i, res in enumerate(_sync_rounds(args.snr_db, args, "demo")):
        if not res.success:
            print(f"  round {i}: decode failure (round aborted)")
            continue
        print(
            f"  round {i}: delta_hat = {float(res.delta_hat):+.9e} s, "
            f"residual = {float(res.residual):+.3e} s, fec_corrected = {res.corrected_bits}"
        )

    if args.sweep:
        snrs = [float(s) for s in args.sweep.split(",")]
        print("Es/N0 sweep (residual RMS over rounds, fresh follower each round):")
        for snr in snrs:
            results = _sync_rounds(snr, args, f"sweep{snr}", fresh=True)
            # an aborted round leaves the full offset uncorrected
            residuals = [float(r.residual) if r.success else args.delta_s for r in results]
            rms = float(np.sqrt(np.mean(np.square(residuals)))) if residuals else float("inf")
            fails = sum(1 for r in results if not r.success)
            print(f"  {snr:6.1f} dB: rms = {rms:.3e} s, failures = {fails}/{len(results)}")
    return 0


def cmd_dump_frame(args: argparse.Namespace) -> int:
    mesh = MeshConfig()
    kind = {
        "rx-source": waveform.FrameKind.RX_BF_SOURCE,
        "rx-interferer": waveform.FrameKind.RX_BF_INTERFERER,
        "tx-node": waveform.FrameKind.TX_BF_NODE,
    }[args.kind]
    spec = waveform.FrameSpec(
        kind,
        amble_seed=0,
        payload_seed=args.seed or 0,
        node_id=args.node_id if kind is waveform.FrameKind.TX_BF_NODE else None,
    )
    sig, layout = waveform.build_frame(spec, mesh)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    waveform.write_frame_iq(out, sig, layout)
    print(f"wrote {out} ({layout.total_length} samples) and {out}.json")
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dcbf", description="Distributed coherent beamforming simulator")
    sub = p.add_subparsers(dest="command", required=True)

    pr = sub.add_parser("run", help="run a scenario config")
    pr.add_argument("--config", required=True, help="JSON config path or bundled name (e.g. rx_bf_interf)")
    pr.add_argument("--out", required=True, help="output directory")
    pr.add_argument("--seed", type=int, default=None, help="override the config seed")
    pr.add_argument("--override", action="append", metavar="KEY=VALUE", help="override config fields")
    pr.add_argument("--iq-dump", action="store_true", help="also export template frames as I/Q")
    pr.set_defaults(func=cmd_run)

    pb = sub.add_parser("bounds", help="tabulate phase-error performance bounds")
    pb.add_argument("--n", type=int, default=3, help="mesh size N")
    pb.add_argument("--phi-min", type=float, default=0.0)
    pb.add_argument("--phi-max", type=float, default=1.0)
    pb.add_argument("--steps", type=int, default=101)
    pb.add_argument("--out", default="bounds.csv")
    pb.set_defaults(func=cmd_bounds)

    ps = sub.add_parser("sync-demo", help="demonstrate RF time transfer rounds")
    ps.add_argument("--rounds", type=int, default=5)
    ps.add_argument("--snr-db", type=float, default=20.0, help="side-channel Es/N0 in dB")
    ps.add_argument("--delta-s", type=float, default=1.25e-3, help="initial follower offset (s)")
    ps.add_argument("--tof-samples", type=int, default=20)
    ps.add_argument("--asym-samples", type=int, default=0, help="extra downlink ToF (samples)")
    ps.add_argument("--use-index", action="store_true", help="index-compressed probes")
    ps.add_argument("--sweep", default=None, help="comma-separated Es/N0 list for an RMS sweep")
    ps.add_argument("--seed", type=int, default=0)
    ps.set_defaults(func=cmd_sync_demo)

    pd = sub.add_parser("dump-frame", help="export a frame as float32 I/Q + JSON sidecar")
    pd.add_argument("--kind", choices=["rx-source", "rx-interferer", "tx-node"], required=True)
    pd.add_argument("--node-id", type=int, default=1)
    pd.add_argument("--out", required=True)
    pd.add_argument("--seed", type=int, default=0)
    pd.set_defaults(func=cmd_dump_frame)
    return p


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("DCBF_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        log.debug("runtime failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
