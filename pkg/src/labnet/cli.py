"""Command-line entry point: ``labnet {simulate,enhance,eval,bench,train,describe}``.

Configuration comes from an optional YAML file with sections ``dsp``, ``model``,
``train`` and ``sim`` (see ``configs/default.yaml``); command-line flags override
file values.  Every command that writes an output directory also writes the fully
resolved configuration there as ``config.yaml``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
import torch
import yaml

from .audio import AudioError, read_multichannel, write_wav
from .dsp import DspConfig, InputError
from .kernels import ContractError
from .model import ABLATIONS, LABNet, ModelConfig, ablated, enhance, enhance_stream
from .params import CorruptModelError, describe, load_params, save_params
from .resources import count_macs, count_params, latency_report
from .roomsim import SceneConstraints
from .train import TrainConfig, TrainingDiverged, grad_check, train_toy

log = logging.getLogger("labnet")

SECTIONS = {"dsp": DspConfig, "model": ModelConfig, "train": TrainConfig, "sim": SceneConstraints}
SIM_EXTRA = ("seconds",)
TUPLE_FIELDS = {"channel_range", "betas", "length", "width", "height", "t60", "snr_db", "noises"}


class ConfigError(ValueError):
    pass


class UsageError(ValueError):
    pass


# --------------------------------------------------------------------- config


def load_config(path) -> dict:
    """Read and validate a YAML config; unknown sections or keys are errors."""
    if path is None:
        return {}
    try:
        raw = yaml.safe_load(Path(path).read_text()) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    for section, body in raw.items():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section {section!r}; expected {sorted(SECTIONS)}")
        if not isinstance(body, dict):
            raise ConfigError(f"section {section!r} must be a mapping")
        known = {f.name for f in fields(SECTIONS[section])}
        if section == "sim":
            known |= set(SIM_EXTRA)
        unknown = set(body) - known
        if unknown:
            raise ConfigError(f"unknown key(s) in {section!r}: {sorted(unknown)}")
    return raw


def _build(section: str, values: dict):
    cls = SECTIONS[section]
    kwargs = {k: tuple(v) if k in TUPLE_FIELDS and isinstance(v, list) else v
              for k, v in values.items() if k not in SIM_EXTRA}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section!r} config: {exc}") from exc


def resolve(raw: dict, overrides: dict[str, dict]) -> dict:
    """Merge file values with flag overrides (flags win, ``None`` means unset)."""
    out = {}
    for section in SECTIONS:
        merged = dict(raw.get(section, {}))
        merged.update({k: v for k, v in overrides.get(section, {}).items() if v is not None})
        out[section] = merged
    return out


def configs(resolved: dict):
    return {s: _build(s, resolved[s]) for s in SECTIONS}


def echo_config(resolved: dict, objs: dict, out_dir) -> None:
    """Write the fully resolved configuration (dataclass defaults included)."""
    full = {}
    for section, obj in objs.items():
        d = asdict(obj)
        full[section] = {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
    if "seconds" in resolved["sim"]:
        full["sim"]["seconds"] = resolved["sim"]["seconds"]
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    (Path(out_dir) / "config.yaml").write_text(yaml.safe_dump(full, sort_keys=True))


# --------------------------------------------------------------------- helpers


def parse_mics(text: str) -> list[int]:
    """``"4"`` -> [4]; ``"2..8"`` -> [2, ..., 8]; ``"1,3,6"`` -> [1, 3, 6]."""
    try:
        if ".." in text:
            lo, hi = (int(t) for t in text.split(".."))
            values = list(range(lo, hi + 1))
        else:
            values = [int(t) for t in text.split(",")]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad channel spec {text!r}") from exc
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError(f"bad channel spec {text!r}")
    return values


def get_model(args, objs) -> LABNet:
    """Load ``--model`` or build a seeded untrained model (optionally ablated)."""
    ablate = getattr(args, "ablate", None)
    if getattr(args, "model", None):
        if ablate:
            raise UsageError("--ablate builds a fresh variant and cannot be combined with --model")
        return load_params(args.model)
    cfg = objs["model"]
    if ablate:
        cfg = ablated(cfg, ablate)
    return LABNet(cfg, objs["dsp"])


def _entries(manifest):
    from .roomsim import read_manifest

    return read_manifest(manifest)


# --------------------------------------------------------------------- commands


def cmd_simulate(args, resolved, objs) -> int:
    from .roomsim import build_dataset

    if not args.synthetic and not (args.clean_dir and args.noise_dir):
        raise UsageError("give --synthetic or both --clean-dir and --noise-dir")
    seconds = resolved["sim"].get("seconds", 4.0)
    manifest, errors = build_dataset(
        args.out, args.count, split=args.split, mics=resolved["sim"].get("mics"),
        clean_dir=None if args.synthetic else args.clean_dir,
        noise_dir=None if args.synthetic else args.noise_dir,
        seed=args.seed, seconds=seconds, constraints=objs["sim"])
    echo_config(resolved, objs, args.out)
    print(f"wrote {args.count - len(errors)} utterances to {manifest}")
    if errors:
        print(f"{len(errors)} utterance(s) failed; see errors.jsonl", file=sys.stderr)
        return 1
    return 0


def cmd_enhance(args, resolved, objs) -> int:
    cfg = objs["dsp"]
    if args.baseline == "mvdr":
        from .baselines import mvdr, oracle_stats
        from .roomsim import load_recording

        if not args.manifest:
            raise UsageError("--baseline mvdr needs --manifest for the oracle statistics")
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for entry in _entries(args.manifest):
            if args.id and entry["id"] != args.id:
                continue
            rec = load_recording(entry)
            write_wav(out / f"{entry['id']}.wav", mvdr(rec.noisy, oracle_stats(rec, cfg), cfg))
        echo_config(resolved, objs, out)
        return 0

    model = get_model(args, objs)
    if args.manifest:
        from .roomsim import load_recording

        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for entry in _entries(args.manifest):
            if args.id and entry["id"] != args.id:
                continue
            rec = load_recording(entry)
            write_wav(out / f"{entry['id']}.wav", _run_model(rec.noisy, model, args.stream))
        echo_config(resolved, objs, out)
        return 0
    if not args.input:
        raise UsageError("give --input WAV(s) or --manifest")
    noisy = read_multichannel(args.input, cfg.sample_rate)
    if args.mics is not None and noisy.shape[0] != args.mics:
        raise InputError(f"expected {args.mics} channels, input has {noisy.shape[0]}")
    write_wav(args.out, _run_model(noisy, model, args.stream), cfg.sample_rate)
    print(f"wrote {args.out} ({noisy.shape[0]} channels, {noisy.shape[1]} samples)")
    return 0


def _run_model(noisy, model: LABNet, stream: bool) -> np.ndarray:
    noisy = np.asarray(noisy, dtype=np.float32)
    if not stream:
        return enhance(noisy, model).numpy()
    lat = model.dsp.latency_samples
    return enhance_stream(noisy, model)[lat:lat + noisy.shape[1]].numpy()


def cmd_eval(args, resolved, objs) -> int:
    from . import metrics

    entries = _entries(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.enhancer == "labnet":
        enhancer = metrics.labnet_enhancer(get_model(args, objs))
    elif args.enhancer == "mvdr":
        enhancer = metrics.mvdr_enhancer(objs["dsp"])
    else:
        enhancer = getattr(metrics, f"{args.enhancer}_enhancer")
    sweep = args.mics or [None]
    summaries = []
    for c in sweep:
        report = metrics.evaluate(entries, enhancer, channels=c)
        report.meta["enhancer"] = args.enhancer
        name = "report.jsonl" if c is None else f"report_c{c:02d}.jsonl"
        report.write(out / name)
        summaries.append(report.summary())
        s = report.summary()
        print(f"C={c if c is not None else 'all'}: n={s['count']} failed={s['failed']} "
              f"SI-SNRi={s['mean_si_snr_improvement_db']:.2f} dB STOI={s['mean_stoi']:.3f} "
              f"LSD={s['mean_lsd_db']:.2f} dB")
        for err in report.errors:
            print(f"  failed {err['id']}: {err['error']}", file=sys.stderr)
    if len(sweep) > 1:
        (out / "sweep.jsonl").write_text("".join(json.dumps(s, sort_keys=True) + "\n"
                                                 for s in summaries))
    echo_config(resolved, objs, out)
    return 0


def measure_rtf(model: LABNet, channels: int, seconds: float, seed: int = 0) -> float:
    """Wall-clock time of streaming enhancement divided by the audio duration."""
    n = int(seconds * model.dsp.sample_rate)
    x = np.random.default_rng(seed).standard_normal((channels, n)).astype(np.float32) * 0.1
    t0 = time.perf_counter()
    enhance_stream(x, model, flush=False)
    return (time.perf_counter() - t0) / seconds


def bench_report(model: LABNet, mics: list[int], rtf_seconds: float = 0.0,
                 rtf_channels: int = 6) -> dict:
    report = {"params": count_params(model),
              "macs_per_second": {str(c): count_macs(model, c) for c in mics},
              "latency": latency_report(model)}
    if rtf_seconds > 0:
        report["rtf"] = {"channels": rtf_channels,
                         "value": measure_rtf(model, rtf_channels, rtf_seconds)}
    return report


def cmd_bench(args, resolved, objs) -> int:
    model = get_model(args, objs)
    report = bench_report(model, args.mics, args.rtf_seconds, args.rtf_channels)
    print(f"parameters: {report['params']}")
    for c, macs in report["macs_per_second"].items():
        print(f"MACs/s at C={c}: {macs / 1e9:.4f} G")
    if "rtf" in report:
        print(f"streaming real-time factor at C={report['rtf']['channels']}: "
              f"{report['rtf']['value']:.3f}")
    lat = report["latency"]
    print(f"latency: {lat['window_ms']:.0f} ms window + {lat['gla_iters']} GLA iteration(s) x "
          f"{lat['window_ms']:.0f} ms = {lat['total_ms']:.0f} ms")
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "bench.json").write_text(json.dumps(report, indent=2, sort_keys=True))
        echo_config(resolved, objs, args.out)
    return 0


def cmd_train(args, resolved, objs) -> int:
    if args.grad_check:
        cfg = objs["model"] if "hidden" in resolved["model"] else ModelConfig(hidden=8)
        worst = grad_check(cfg, eps=args.eps)
        print(f"worst relative gradient error: {worst:.3e}")
        return 0
    out = args.resume or args.out
    if not out:
        raise UsageError("give --out (or --resume DIR)")
    if not args.manifest:
        raise UsageError("--manifest is required for training")
    train = _entries(args.manifest)
    valid = _entries(args.valid_manifest) if args.valid_manifest else None
    echo_config(resolved, objs, out)
    try:
        result = train_toy(train, objs["model"], objs["train"], valid_recs=valid,
                           dsp_cfg=objs["dsp"], out_dir=out, resume=bool(args.resume))
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 1
    save_params(result.model, Path(out) / "model.labnet")
    h = result.history
    if h:
        print(f"epochs {h[0]['epoch']}..{h[-1]['epoch']}: train loss "
              f"{h[0]['train_loss']:.4f} -> {h[-1]['train_loss']:.4f}")
    return 0


def cmd_describe(args, resolved, objs) -> int:
    model = get_model(args, objs)
    info = describe(model)
    info["params"] = count_params(model)
    print(json.dumps(info, indent=2, sort_keys=True))
    return 0


# --------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="labnet", description=__doc__.split("\n")[0])
    p.add_argument("--config", help="YAML config with dsp/model/train/sim sections")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def model_flags(sp):
        sp.add_argument("--model", help="parameter file; default is a seeded untrained model")
        sp.add_argument("--ablate", choices=sorted(ABLATIONS))
        sp.add_argument("--hidden", type=int)
        sp.add_argument("--model-seed", type=int)

    s = sub.add_parser("simulate", help="synthesise a multichannel dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=10)
    s.add_argument("--mics", type=int)
    s.add_argument("--split", choices=["train", "valid", "test"], default="train")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--seconds", type=float)
    s.add_argument("--synthetic", action="store_true")
    s.add_argument("--clean-dir")
    s.add_argument("--noise-dir")

    e = sub.add_parser("enhance", help="enhance a recording or a dataset")
    model_flags(e)
    e.add_argument("--input", nargs="+", help="one multichannel WAV or mono WAVs (lexical order)")
    e.add_argument("--out", required=True, help="output WAV, or directory with --manifest")
    e.add_argument("--mics", type=int, help="expected channel count")
    e.add_argument("--baseline", choices=["labnet", "mvdr"], default="labnet")
    e.add_argument("--manifest")
    e.add_argument("--id", help="only this utterance of the manifest")
    e.add_argument("--stream", action="store_true", help="frame-by-frame causal processing")

    v = sub.add_parser("eval", help="score an enhancer on a manifest")
    model_flags(v)
    v.add_argument("--manifest", required=True)
    v.add_argument("--out", required=True)
    v.add_argument("--enhancer", choices=["identity", "oracle", "labnet", "mvdr"], default="labnet")
    v.add_argument("--mics", type=parse_mics, help="channel count, list or range like 2..8")

    b = sub.add_parser("bench", help="parameters, MACs, real-time factor and latency")
    model_flags(b)
    b.add_argument("--mics", type=parse_mics, default=[1, 3, 6])
    b.add_argument("--rtf-seconds", type=float, default=2.0)
    b.add_argument("--rtf-channels", type=int, default=6)
    b.add_argument("--out")

    t = sub.add_parser("train", help="toy-scale training")
    t.add_argument("--manifest")
    t.add_argument("--valid-manifest")
    t.add_argument("--out")
    t.add_argument("--resume", metavar="DIR", help="continue the run checkpointed in DIR")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--segment-seconds", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--hidden", type=int)
    t.add_argument("--grad-check", action="store_true")
    t.add_argument("--eps", type=float, default=1e-5)

    d = sub.add_parser("describe", help="print model hyper-parameters")
    model_flags(d)
    return p


def overrides(args) -> dict[str, dict]:
    g = lambda name: getattr(args, name, None)  # noqa: E731
    o = {"dsp": {}, "model": {"hidden": g("hidden"), "seed": g("model_seed")},
         "train": {}, "sim": {"seconds": g("seconds")}}
    if args.command == "train":
        o["train"] = {"epochs": g("epochs"), "lr0": g("lr"), "batch_size": g("batch_size"),
                      "segment_seconds": g("segment_seconds"), "seed": g("seed")}
    if args.command == "simulate":
        o["sim"]["mics"] = g("mics")
    return o


COMMANDS = {"simulate": cmd_simulate, "enhance": cmd_enhance, "eval": cmd_eval,
            "bench": cmd_bench, "train": cmd_train, "describe": cmd_describe}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("LABNET_NUM_THREADS")
    if threads:
        try:
            torch.set_num_threads(int(threads))
        except ValueError:
            print(f"error: LABNET_NUM_THREADS must be an integer, got {threads!r}", file=sys.stderr)
            return 2
    try:
        config = args.config
        if config is None and getattr(args, "resume", None):
            # a resumed run starts from the configuration echoed into its directory
            echoed = Path(args.resume) / "config.yaml"
            config = echoed if echoed.exists() else None
        resolved = resolve(load_config(config), overrides(args))
        objs = configs(resolved)
        return COMMANDS[args.command](args, resolved, objs)
    except (ConfigError, UsageError, InputError, AudioError, CorruptModelError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ContractError, ArithmeticError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
