"""Command-line pipeline: mixture in, one WAV per separated source out.

Configuration comes from defaults, then an optional flat key=value file,
then command-line flags, in increasing precedence.  Every run with the
same input, configuration and seed produces byte-identical outputs.

Exit codes: 0 success, 1 I/O failure, 2 configuration error,
3 simulation divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import audio_io, auditory_maps, filterbank, oscillator_net, separation
from .audio_io import AudioIOError, AudioSignal
from .auditory_maps import CAM, CSM, FrameSpec
from .oscillator_net import NetParams, SimulationDiverged

# A detected source must carry at least this fraction of the mixture RMS;
# weaker phase groups are reported as residual fragments, not sources.
MIN_SOURCE_RMS_FRACTION = 0.05

_NET_FIELDS = {
    f.name: f.type for f in dataclasses.fields(NetParams) if f.name not in ("kappa", "seed")
}


class ConfigError(Exception):
    """Invalid configuration key or value."""


@dataclass
class PipelineConfig:
    """Everything a separation run needs besides the input file."""

    map_kind: str = CAM
    window_ms: int = 32
    seed: int = 0
    out_dir: str = "."
    dump_maps: bool = False
    dump_spikes: bool = False
    dump_masks: bool = False
    num_sources_hint: int | None = None
    net_overrides: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.map_kind not in (CAM, CSM):
            raise ConfigError(f"map_kind must be 'cam' or 'csm', got {self.map_kind!r}")
        if self.window_ms not in (4, 32):
            raise ConfigError(f"window_ms must be 4 or 32, got {self.window_ms!r}")
        if self.num_sources_hint is not None and self.num_sources_hint < 1:
            raise ConfigError("num_sources_hint must be a positive integer")
        for key, value in self.net_overrides.items():
            if key not in _NET_FIELDS:
                raise ConfigError(f"unknown network parameter {key!r}")
            if not isinstance(value, (int, float, bool)):
                raise ConfigError(f"network parameter {key!r} must be numeric")

    def net_params(self) -> NetParams:
        params = oscillator_net.params_for_kind(self.map_kind)
        return dataclasses.replace(params, seed=self.seed, **self.net_overrides)


def _parse_scalar(key: str, raw: str):
    raw = raw.strip()
    if key in ("dump_maps", "dump_spikes", "dump_masks", "noise"):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key} must be a boolean, got {raw!r}")
    if key in ("window", "window_ms", "seed", "steps_per_frame", "num_sources_hint"):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key} must be an integer, got {raw!r}") from None
    if key in ("map", "map_kind", "out_dir"):
        return raw
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"{key} must be a number, got {raw!r}") from None


def load_config_file(path) -> dict:
    """Parse a flat key=value config file ('#' starts a comment)."""
    values = {}
    try:
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
                key, _, raw = line.partition("=")
                key = key.strip()
                alias = {"map": "map_kind", "window": "window_ms"}.get(key, key)
                if alias not in (
                    "map_kind", "window_ms", "seed", "out_dir", "dump_maps",
                    "dump_spikes", "dump_masks", "num_sources_hint", *_NET_FIELDS,
                ):
                    raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
                values[alias] = _parse_scalar(key if key in ("map", "window") else alias, raw)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return values


def build_config(file_values: dict, flag_values: dict) -> PipelineConfig:
    """Merge config sources: defaults, then file, then flags."""
    merged = dict(file_values)
    merged.update({k: v for k, v in flag_values.items() if v is not None})
    config = PipelineConfig()
    for key, value in merged.items():
        if key in _NET_FIELDS:
            config.net_overrides[key] = value
        elif hasattr(config, key):
            setattr(config, key, value)
        else:
            raise ConfigError(f"unknown configuration key {key!r}")
    config.validate()
    return config


def _prepare_input(input_path) -> AudioSignal:
    sig = audio_io.read_wav(input_path)
    return audio_io.resample_to_8k(sig)


def _dump_spike_record(record, path) -> None:
    with open(path, "w") as fh:
        fh.write("layer,channel,bin,spike_time\n")
        if record.layer1:
            for (i, j) in sorted(record.layer1):
                for t in record.layer1[(i, j)]:
                    fh.write(f"1,{j},{i},{t:.6f}\n")
        for j, times in enumerate(record.layer2):
            for t in times:
                fh.write(f"2,{j},-1,{t:.6f}\n")


def _dump_groupings(groupings, path) -> None:
    with open(path, "w") as fh:
        fh.write("frame,channel,group\n")
        for f, grouping in enumerate(groupings):
            for c in range(len(grouping.labels)):
                fh.write(f"{f},{c},{int(grouping.labels[c])}\n")


def _dump_masks(masks, out_dir) -> list[str]:
    paths = []
    for mask in masks:
        stem = os.path.join(str(out_dir), f"mask_source_{mask.source_id:02d}")
        auditory_maps.write_pgm(mask.values.astype(np.float64), stem + ".pgm")
        np.savetxt(stem + ".csv", mask.values, fmt="%d", delimiter=",")
        paths.extend([stem + ".pgm", stem + ".csv"])
    return paths


def _simulate_all(frames, params, config, record_layer1=False):
    """One grouping per frame, with per-frame child seeds."""
    children = np.random.SeedSequence(config.seed).spawn(len(frames))
    groupings = []
    records = []
    for frame, child in zip(frames, children):
        record, grouping = oscillator_net.simulate_frame(
            frame, params, rng=np.random.default_rng(child), record_layer1=record_layer1
        )
        groupings.append(grouping)
        records.append(record)
    return groupings, records


def run_separation(input_path, config: PipelineConfig) -> dict:
    """Full pipeline; writes WAVs, report and requested dumps.

    Returns the report dictionary (also written as report.json).
    """
    config.validate()
    started = time.time()
    os.makedirs(config.out_dir, exist_ok=True)

    sig = _prepare_input(input_path)
    channels = filterbank.analyze(sig)
    fspec = FrameSpec(config.window_ms)
    if config.map_kind == CAM:
        frames = auditory_maps.build_cam_from_channels(channels, fspec)
    else:
        frames = auditory_maps.build_csm_from_channels(channels, fspec)

    report = {
        "input": str(input_path),
        "map_kind": config.map_kind,
        "window_ms": config.window_ms,
        "seed": config.seed,
        "frames": len(frames),
        "num_sources": 0,
        "sources": [],
        "residual_groups": 0,
    }
    written = []

    if frames:
        params = config.net_params()
        groupings, records = _simulate_all(
            frames, params, config, record_layer1=config.dump_spikes
        )
        masks = separation.groups_to_masks(groupings)

        frame_len = fspec.window_samples
        total = len(frames) * frame_len
        mixture = AudioSignal(sig.samples[:total], sig.sample_rate)
        mix_rms = float(np.sqrt(np.mean(mixture.samples**2)))

        estimates = []
        for mask in masks:
            est = separation.apply_mask_and_synthesize(channels, mask, frame_len)
            rms = float(np.sqrt(np.mean(est.samples**2)))
            estimates.append((mask, est, rms))

        # Cull on the raw masked energy, then normalize the survivors.
        kept = [e for e in estimates if e[2] >= MIN_SOURCE_RMS_FRACTION * mix_rms]
        kept.sort(key=lambda e: (-e[2], e[0].source_id))
        if config.num_sources_hint is not None:
            kept = kept[: config.num_sources_hint]
        report["residual_groups"] = len(estimates) - len(kept)

        for out_id, (mask, est, rms) in enumerate(kept):
            est = separation.normalize_energy(est, mixture, frame_len)
            wav_path = os.path.join(config.out_dir, f"source_{out_id:02d}.wav")
            audio_io.write_wav(est, wav_path)
            written.append(wav_path)
            report["sources"].append(
                {
                    "id": out_id,
                    "wav": os.path.basename(wav_path),
                    "rms_fraction": round(rms / mix_rms, 6) if mix_rms > 0 else 0.0,
                    "mean_channels_per_frame": round(
                        float(mask.values.sum(axis=0).mean()), 3
                    ),
                }
            )
        report["num_sources"] = len(kept)

        if config.dump_maps:
            written += auditory_maps.dump_frames(frames, config.out_dir)
        if config.dump_spikes:
            for f, record in enumerate(records):
                path = os.path.join(config.out_dir, f"spikes_frame_{f:04d}.csv")
                _dump_spike_record(record, path)
                written.append(path)
            grouping_path = os.path.join(config.out_dir, "groupings.csv")
            _dump_groupings(groupings, grouping_path)
            written.append(grouping_path)
        if config.dump_masks:
            written += _dump_masks([m for m, _, _ in kept], config.out_dir)

    report["runtime_seconds"] = round(time.time() - started, 3)
    report_path = os.path.join(config.out_dir, "report.json")
    with open(report_path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    written.append(report_path)
    report["written"] = written
    return report


def run_diagnostics(input_path, config: PipelineConfig) -> dict:
    """Build maps and simulate, write requested dumps, skip resynthesis."""
    config.validate()
    if not (config.dump_maps or config.dump_spikes):
        warnings.warn("no dump flags given; diagnostics run produces no files")
        return {"written": []}
    os.makedirs(config.out_dir, exist_ok=True)

    sig = _prepare_input(input_path)
    fspec = FrameSpec(config.window_ms)
    builder = (
        auditory_maps.build_cam if config.map_kind == CAM else auditory_maps.build_csm
    )
    frames = builder(sig, fspec)
    written = []
    if config.dump_maps:
        written += auditory_maps.dump_frames(frames, config.out_dir)
    if config.dump_spikes and frames:
        params = config.net_params()
        groupings, records = _simulate_all(frames, params, config, record_layer1=True)
        for f, record in enumerate(records):
            path = os.path.join(config.out_dir, f"spikes_frame_{f:04d}.csv")
            _dump_spike_record(record, path)
            written.append(path)
        grouping_path = os.path.join(config.out_dir, "groupings.csv")
        _dump_groupings(groupings, grouping_path)
        written.append(grouping_path)
    return {"written": written}


def _build_parser(prog: str, description: str) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog=prog, description=description)
    parser.add_argument("input", help="input WAV file (PCM, mono or stereo)")
    parser.add_argument("--config", help="flat key=value configuration file")
    parser.add_argument("--map", choices=(CAM, CSM), dest="map_kind", default=None,
                        help="auditory map kind (default cam)")
    parser.add_argument("--window", type=int, dest="window_ms", default=None,
                        help="analysis window in ms: 4 or 32 (default 32)")
    parser.add_argument("--seed", type=int, default=None, help="run seed (default 0)")
    parser.add_argument("--dump-maps", action="store_true", default=None,
                        dest="dump_maps", help="write one PGM+CSV per map frame")
    parser.add_argument("--dump-spikes", action="store_true", default=None,
                        dest="dump_spikes", help="write spike rasters and groupings")
    parser.add_argument("--dump-masks", action="store_true", default=None,
                        dest="dump_masks", help="write per-source masks (PGM+CSV)")
    parser.add_argument("--out-dir", dest="out_dir", default=None,
                        help="output directory (default .)")
    return parser


def _run_cli(argv, runner, prog, description) -> int:
    parser = _build_parser(prog, description)
    args = parser.parse_args(argv)
    try:
        file_values = load_config_file(args.config) if args.config else {}
        flag_values = {
            "map_kind": args.map_kind,
            "window_ms": args.window_ms,
            "seed": args.seed,
            "dump_maps": args.dump_maps,
            "dump_spikes": args.dump_spikes,
            "dump_masks": args.dump_masks,
            "out_dir": args.out_dir,
        }
        config = build_config(file_values, flag_values)
    except ConfigError as exc:
        print(f"{prog}: configuration error: {exc}", file=sys.stderr)
        return 2
    try:
        report = runner(args.input, config)
    except ConfigError as exc:
        print(f"{prog}: configuration error: {exc}", file=sys.stderr)
        return 2
    except (AudioIOError, OSError) as exc:
        print(f"{prog}: I/O error: {exc}", file=sys.stderr)
        return 1
    except SimulationDiverged as exc:
        print(f"{prog}: simulation diverged: {exc}", file=sys.stderr)
        return 3
    if "num_sources" in report:
        print(f"{report['num_sources']} source(s) written to {config.out_dir}")
    return 0


def main(argv=None) -> int:
    return _run_cli(
        argv if argv is not None else sys.argv[1:],
        run_separation,
        "oscsep",
        "Separate a monophonic mixture into sources by oscillatory correlation.",
    )


def diagnose_main(argv=None) -> int:
    return _run_cli(
        argv if argv is not None else sys.argv[1:],
        run_diagnostics,
        "oscsep-diagnose",
        "Build auditory maps and spike rasters without resynthesis.",
    )


if __name__ == "__main__":
    sys.exit(main())
