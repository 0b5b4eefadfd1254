"""Command-line entry point: ``meterflow <command> [flags]``.

Every command writes its outputs and a ``manifest.json`` under ``--out``.
Exit codes: 0 success, 2 usage, 3 numeric failure, 4 I/O.
"""

from __future__ import annotations

import argparse
import calendar
import configparser
import csv
import dataclasses
import json
import logging
import sys
import time
import zlib
from collections import defaultdict
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import read_checkpoint, save_state, state_from_checkpoint
from .data import (
    ConditionEncoder,
    Profile,
    SynthConfig,
    derive_numeric_conditions,
    load_dataset,
    read_profiles_csv,
    synth_dataset,
    write_manifest,
    write_profiles_csv,
)
from .errors import NumericError
from .flow import FlowSchedule, GuidanceSpec, TrainConfig, TrainingData, init_state, sample, train
from .metrics import condition_rmse, crps, permutation_test, ple, summarize
from .nn import NetConfig
from .tasks import downsample, make_missing_mask, projector_from_payload

log = logging.getLogger("meterflow")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
TASK_KIND = {"generate": None, "constrained": "peak_total", "impute": "impute", "superres": "superres"}


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration


def _tuple_of(kind):
    return lambda s: tuple(kind(v.strip()) for v in s.split(",") if v.strip())


def _bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


SCHEMA: dict[str, dict[str, tuple]] = {
    "synth": {
        "n_customers": (int, 100),
        "categories": (_tuple_of(str), SynthConfig.categories),
        "years": (_tuple_of(int), SynthConfig.years),
        "months": (_tuple_of(int), SynthConfig.months),
        "period": (str, SynthConfig.period),
        "weeks_per_month": (int, SynthConfig.weeks_per_month),
        "steps_per_day": (int, SynthConfig.steps_per_day),
        "n_harmonics": (int, SynthConfig.n_harmonics),
        "noise_scale": (float, SynthConfig.noise_scale),
        "peak_rate": (float, SynthConfig.peak_rate),
        "peak_height": (float, SynthConfig.peak_height),
        "peak_max_len": (int, SynthConfig.peak_max_len),
        "split_seed": (int, SynthConfig.split_seed),
    },
    "model": {k: (int, getattr(NetConfig, k)) for k in ("n_layers", "model_dim", "ff_dim", "n_heads", "conv_kernel", "patch_len")},
    "train": {
        "batch_size": (int, TrainConfig.batch_size),
        "learning_rate": (float, TrainConfig.learning_rate),
        "weight_decay": (float, TrainConfig.weight_decay),
        "n_iters": (int, TrainConfig.n_iters),
        "ema_decay": (float, TrainConfig.ema_decay),
        "t_floor": (float, TrainConfig.t_floor),
        "log_every": (int, TrainConfig.log_every),
        "val_every": (int, TrainConfig.val_every),
        "val_batches": (int, TrainConfig.val_batches),
        "checkpoint_every": (int, TrainConfig.checkpoint_every),
    },
    "sample": {
        "n_samples": (int, 100),
        "n_steps": (int, FlowSchedule.n_steps),
        "t_floor": (float, FlowSchedule.t_floor),
        "delta": (float, FlowSchedule.delta),
        "batch_size": (int, 256),
        "final_hard_projection": (_bool, True),
        "clip_margin": (float, -1.0),
        "tolerance": (float, 1e-6),
    },
    "evaluate": {
        "n_permutations": (int, 1000),
    },
}
PAPER_SAMPLES = 1500


def load_config(path: str | None) -> dict[str, dict]:
    """Defaults overlaid with an INI file; unknown sections or keys are usage errors."""
    cfg = {sec: {k: default for k, (_, default) in keys.items()} for sec, keys in SCHEMA.items()}
    if path is None:
        return cfg
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except configparser.Error as e:
        raise UsageError(f"cannot parse config {path}: {e}") from None
    for sec in parser.sections():
        if sec not in SCHEMA:
            raise UsageError(f"unknown config section [{sec}]")
        for key, raw in parser.items(sec):
            if key not in SCHEMA[sec]:
                raise UsageError(f"unknown config key {key!r} in [{sec}]")
            kind = SCHEMA[sec][key][0]
            try:
                cfg[sec][key] = kind(raw)
            except ValueError as e:
                raise UsageError(f"bad value for [{sec}] {key}: {e}") from None
    return cfg


def substream(seed: int, name: str) -> int:
    """Independent 63-bit seed for a named consumer (data, train, noise, permutation, mask)."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode())])
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


def _jsonable(obj):
    if dataclasses.is_dataclass(obj):
        obj = dataclasses.asdict(obj)
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def write_run_manifest(out: Path, args, config: dict, **fields) -> dict:
    doc = {
        "command": args.command,
        "version": __version__,
        "argv": list(args.argv),
        "seed": args.seed,
        "precision": args.precision,
        "paper_scale": args.paper_scale,
        "config": config,
    }
    doc.update(fields)
    doc = _jsonable(doc)
    (out / "manifest.json").write_text(json.dumps(doc, indent=2))
    return doc


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args, cfg) -> dict:
    s = dict(cfg["synth"])
    n = s.pop("n_customers")
    try:
        scfg = SynthConfig(**s)
    except ValueError as e:
        raise UsageError(str(e)) from None
    ds = synth_dataset(substream(args.seed, "data"), n, scfg)
    write_profiles_csv(args.out / "profiles.csv", ds.profiles)
    write_manifest(args.out / "dataset.json", ds)
    return write_run_manifest(
        args.out, args, {"synth": cfg["synth"]},
        outputs={"profiles": "profiles.csv", "dataset": "dataset.json"},
        n_profiles=len(ds), splits={k: len(v) for k, v in ds.splits.items()},
    )


def _load_data_dir(path: Path):
    csv_path, man = path / "profiles.csv", path / "dataset.json"
    if not csv_path.exists() or not man.exists():
        raise FileNotFoundError(f"{path} lacks profiles.csv and dataset.json")
    return load_dataset(csv_path, man)


def _net_config(args, cfg, encoder, steps_per_day) -> NetConfig:
    base = NetConfig.paper() if args.paper_scale else NetConfig(**cfg["model"])
    return dataclasses.replace(base, cond_vocab_sizes=tuple(encoder.vocab_sizes), steps_per_day=steps_per_day, precision=args.precision)


def cmd_train(args, cfg) -> dict:
    if args.data is None:
        raise UsageError("train needs --data DIR")
    ds = _load_data_dir(Path(args.data))
    spd = {p.steps_per_day for p in ds.profiles}
    lengths = {p.padded_len for p in ds.profiles}
    if len(spd) != 1 or len(lengths) != 1:
        raise UsageError("all profiles must share steps_per_day and padded length")
    spd, T = spd.pop(), lengths.pop()
    try:
        tcfg = TrainConfig(seed=substream(args.seed, "train"), **cfg["train"])
    except ValueError as e:
        raise UsageError(str(e)) from None

    if args.resume:
        ckpt = read_checkpoint(args.resume)
        encoder = ConditionEncoder.from_dict(ckpt.meta["encoder"])
        ncfg = ckpt.config
        state = state_from_checkpoint(ckpt, tcfg)
    else:
        encoder = ConditionEncoder(tuple(sorted({p.category for p in ds.profiles})), tuple(sorted({p.year for p in ds.profiles})))
        try:
            ncfg = _net_config(args, cfg, encoder, spd)
        except ValueError as e:
            raise UsageError(str(e)) from None
        state = init_state(ncfg, tcfg)
    if T % ncfg.patch_len:
        raise UsageError(f"padded length {T} is not a multiple of patch_len {ncfg.patch_len}")

    tr = TrainingData.from_dataset(ds.subset("train"), encoder, ncfg.dtype)
    val_ds = ds.subset("val")
    val = TrainingData.from_dataset(val_ds, encoder, ncfg.dtype) if len(val_ds) else None
    meta = {"encoder": encoder.to_dict(), "padded_len": T, "steps_per_day": spd, "train_config": dataclasses.asdict(tcfg)}
    ckpt_path = args.out / "model.ckpt"
    saved = {}

    def checkpoint(st):
        saved["ckpt"] = save_state(ckpt_path, st, meta)

    loss_path = args.out / "loss.csv"
    append = bool(args.resume) and loss_path.exists()
    t0 = time.perf_counter()
    status, error = "ok", None
    try:
        state = train(tr, ncfg, tcfg, val=val, state=state, checkpoint=checkpoint)
    except NumericError as e:
        status, error = "numeric_failure", str(e)
        raise
    finally:
        elapsed = time.perf_counter() - t0
        hist = state.history
        with open(loss_path, "a" if append else "w", newline="") as fh:
            w = csv.writer(fh)
            if not append:
                w.writerow(["iter", "loss", "val_loss"])
            for h in hist:
                w.writerow([h["iter"], repr(h["loss"]), repr(h["val_loss"]) if "val_loss" in h else ""])
        ck = saved.get("ckpt")
        write_run_manifest(
            args.out, args, {"model": ncfg.to_dict(), "train": dataclasses.asdict(tcfg)},
            data=str(args.data), resume=args.resume, status=status, error=error,
            iterations=ck.meta["iteration"] if ck else 0, train_seconds=elapsed,
            checkpoint="model.ckpt" if ck else None,
            params_checksum=ck.checksum("ema") if ck else None,
        )
    return json.loads((args.out / "manifest.json").read_text())


# -- sampling commands


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise UsageError(f"{path} is not valid JSON: {e}") from None


def _source_profile(spec: dict, base: Path) -> Profile:
    path = Path(spec["csv"])
    path = path if path.is_absolute() else base / path
    profiles = read_profiles_csv(path)
    row = int(spec.get("row", 0))
    if not 0 <= row < len(profiles):
        raise UsageError(f"row {row} outside {path} ({len(profiles)} profiles)")
    return profiles[row]


def _resolve_payload(kind, payload: dict, source: Profile | None, seed: int) -> dict:
    """Fill ``impute``/``superres`` payloads given as a source profile plus a mask or block length."""
    if source is None or kind is None:
        return payload
    V = source.valid_len
    if kind == "impute" and "indices" not in payload:
        m = payload.get("mask", {})
        try:
            missing = make_missing_mask(V, float(m["rate"]), int(m["min_block"]), int(m["max_block"]), int(m.get("seed", substream(seed, "mask"))))
        except KeyError as e:
            raise UsageError(f"impute mask spec is missing {e.args[0]!r}") from None
        idx = np.flatnonzero(~missing)
        return {"indices": idx.tolist(), "values": source.values[idx].tolist()}
    if kind == "superres" and "values" not in payload:
        L = int(payload["block_len"])
        return {"block_len": L, "values": downsample(source.values, L, V).tolist()}
    if kind == "peak_total" and "max" not in payload:
        c = derive_numeric_conditions(source)
        return {"max": c.max, "min": c.min, "avg": c.avg}
    return payload


def _condition_profile(y1: dict, meta: dict, source: Profile | None) -> Profile:
    T, spd = int(meta["padded_len"]), int(meta["steps_per_day"])
    if source is not None:
        fields = dict(category=source.category, year=source.year, month=source.month,
                      first_weekday=source.first_weekday, valid_len=source.valid_len, customer_id=source.customer_id)
        fields.update(y1)
    else:
        fields = dict(y1)
    try:
        year, month = int(fields["year"]), int(fields["month"])
        category = str(fields["category"])
    except KeyError as e:
        raise UsageError(f"y1 lacks {e.args[0]!r}") from None
    first, days = calendar.monthrange(year, month)
    default_len = days * spd if T == 31 * spd else T
    return Profile(
        np.zeros(T), valid_len=int(fields.get("valid_len", default_len)), steps_per_day=spd,
        first_weekday=int(fields.get("first_weekday", first)), category=category, year=year, month=month,
        customer_id=int(fields.get("customer_id", -1)),
    )


def cmd_task(args, cfg) -> dict:
    """Shared body of generate / constrained / impute / superres."""
    if args.manifest is None:
        raise UsageError(f"{args.command} needs --manifest PATH")
    man_path = Path(args.manifest)
    man = _read_json(man_path)
    expected = TASK_KIND[args.command]
    guidance = man.get("guidance") or {}
    kind = guidance.get("kind")
    if kind != expected:
        raise UsageError(f"{args.command} expects guidance kind {expected!r}, manifest has {kind!r}")
    if "checkpoint_path" not in man:
        raise UsageError("sampling manifest lacks checkpoint_path")
    ck_path = Path(man["checkpoint_path"])
    ck_path = ck_path if ck_path.is_absolute() else man_path.parent / ck_path
    ckpt = read_checkpoint(ck_path)
    checksum = ckpt.checksum("ema")
    encoder = ConditionEncoder.from_dict(ckpt.meta["encoder"])
    net = ckpt.load_net("ema")
    if args.precision != net.cfg.precision:
        net.cfg = dataclasses.replace(net.cfg, precision=args.precision)
        net.to(net.cfg.dtype)

    seed = int(man.get("seed", args.seed))
    scfg = dict(cfg["sample"])
    sched_doc = {k: man.get("schedule", {}).get(k, scfg[k]) for k in ("n_steps", "t_floor", "delta")}
    schedule = FlowSchedule(int(sched_doc["n_steps"]), float(sched_doc["t_floor"]), float(sched_doc["delta"]))
    n_samples = int(man.get("n_samples", PAPER_SAMPLES if args.paper_scale else scfg["n_samples"]))

    source = _source_profile(man["source"], man_path.parent) if "source" in man else None
    try:
        ref = _condition_profile(man.get("y1", {}), ckpt.meta, source)
        cond = encoder.encode(ref, check_calendar=True)
        payload = _resolve_payload(kind, guidance.get("payload", {}), source, seed)
        op = projector_from_payload(kind, payload, ref.valid_len, scfg["tolerance"]) if kind else None
    except (ValueError, KeyError, TypeError) as e:
        raise UsageError(f"bad sampling manifest: {e}") from None
    if ref.valid_len % ckpt.config.patch_len:
        raise UsageError(f"valid_len {ref.valid_len} is not a multiple of patch_len {ckpt.config.patch_len}")

    spec = GuidanceSpec(op, final_hard_projection=scfg["final_hard_projection"]) if op else None
    clip = scfg["clip_margin"] if scfg["clip_margin"] >= 0 else None
    t0 = time.perf_counter()
    res = sample(net, cond, ref.valid_len, ref.padded_len, n_samples, guidance=spec, schedule=schedule,
                 seed=substream(seed, "noise"), batch_size=scfg["batch_size"], clip_margin=clip)
    elapsed = time.perf_counter() - t0

    profiles = [
        dataclasses.replace(ref, values=row, customer_id=ref.customer_id if ref.customer_id >= 0 else i)
        for i, row in enumerate(res.samples)
    ]
    write_profiles_csv(args.out / "samples.csv", profiles)
    diag = None
    if op is not None:
        diag = "diagnostics.csv"
        with open(args.out / diag, "w", newline="") as fh:
            w = csv.writer(fh)
            extra = ["max", "min", "avg"] if kind == "peak_total" else []
            w.writerow(["sample", "residual_pre", "residual_post"] + extra)
            for i, (pre, post) in enumerate(zip(res.pre_projection, res.samples)):
                row = [i, repr(op.residual(pre)), repr(op.residual(post))]
                if kind == "peak_total":
                    row += [repr(float(v)) for v in op.f(post)]
                w.writerow(row)
    return write_run_manifest(
        args.out, args, {"sample": scfg},
        sampling_manifest=_jsonable(man), resolved_guidance={"kind": kind, "payload": payload} if kind else None,
        schedule=sched_doc, noise_seed=substream(seed, "noise"), n_samples=n_samples,
        checkpoint_path=str(ck_path), params_checksum=checksum,
        condition={"category": ref.category, "year": ref.year, "month": ref.month,
                   "first_weekday": ref.first_weekday, "valid_len": ref.valid_len},
        outputs={"samples": "samples.csv", "diagnostics": diag}, sample_seconds=elapsed,
    )


# -- evaluation


def _group(profiles):
    groups = defaultdict(list)
    for p in profiles:
        groups[(p.category, p.month)].append(p)
    return groups


def _target_key(p: Profile) -> tuple:
    return (p.customer_id, p.year, p.month, p.first_weekday)


def evaluate_sets(real: list[Profile], generated: list[Profile], *, task: str, n_permutations: int, seed: int) -> list[dict]:
    """One report per (category, month) present in both sets."""
    greal, ggen = _group(real), _group(generated)
    reports = []
    for key in sorted(set(greal) & set(ggen)):
        R, G = greal[key], ggen[key]
        lens = {p.valid_len for p in R} | {p.valid_len for p in G}
        if len(lens) != 1:
            raise UsageError(f"{key}: valid lengths differ between sets: {sorted(lens)}")
        V = lens.pop()
        X = np.stack([p.valid for p in R])
        Y = np.stack([p.valid for p in G])
        rep = {"task": task, "category": key[0], "month": key[1], "mmd": None, "p_value": None,
               "crps": None, "ple": None, "rmse": None, "n_samples": len(G), "seed": seed}
        if len(R) >= 2 and len(G) >= 2:
            res = permutation_test(X, Y, n_permutations, seed=substream(seed, "permutation"))
            rep["mmd"], rep["p_value"] = res.mmd, res.p_value
        # reconstruction scores need members tagged with the customer id of their target
        members = defaultdict(list)
        for p in G:
            members[_target_key(p)].append(p.valid)
        targets_seen = defaultdict(int)
        for p in R:
            targets_seen[_target_key(p)] += 1
        ambiguous = [k for k in members if targets_seen.get(k, 0) > 1]
        if ambiguous:
            raise UsageError(f"generated profiles match several real profiles: {ambiguous[:3]}")
        paired = [(p, np.stack(members[_target_key(p)])) for p in R if _target_key(p) in members]
        if paired:
            rep["crps"] = summarize([crps(ens, p.valid) for p, ens in paired])
            rep["ple"] = summarize([ple(ens, p.valid) for p, ens in paired])
            peak = "min" if key[0] == "PV" else "max"
            samples, targets = [], []
            for p, ens in paired:
                c = derive_numeric_conditions(p)
                for row in ens:
                    samples.append(row)
                    targets.append((c.min if peak == "min" else c.max, c.avg))
            r = condition_rmse(np.stack(samples), targets, V, peak=peak)
            rep["rmse"] = {"peak": r["rmse_peak"], "avg": r["rmse_avg"]}
        reports.append(rep)
    return reports


def cmd_evaluate(args, cfg) -> dict:
    if args.real is None or args.generated is None:
        raise UsageError("evaluate needs --real CSV and --generated CSV")
    real, gen = read_profiles_csv(args.real), read_profiles_csv(args.generated)
    reports = evaluate_sets(real, gen, task=args.task, n_permutations=cfg["evaluate"]["n_permutations"], seed=args.seed)
    if not reports:
        raise UsageError("no (category, month) group appears in both sets")
    overall = {}
    for field in ("mmd", "p_value"):
        vals = [r[field] for r in reports if r[field] is not None]
        if vals:
            overall[field] = summarize(vals)
    for field in ("crps", "ple"):
        vals = [r[field]["mean"] for r in reports if r[field] is not None]
        if vals:
            overall[field] = summarize(vals)
    (args.out / "report.json").write_text(json.dumps({"reports": reports, "overall": overall}, indent=2))
    return write_run_manifest(args.out, args, {"evaluate": cfg["evaluate"]}, real=str(args.real),
                              generated=str(args.generated), outputs={"report": "report.json"})


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "generate": cmd_task,
    "constrained": cmd_task,
    "impute": cmd_task,
    "superres": cmd_task,
    "evaluate": cmd_evaluate,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI file with [synth] [model] [train] [sample] [evaluate] sections")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", type=Path, default=Path("."))
    common.add_argument("--precision", choices=("f32", "f64"), default="f32")
    common.add_argument("--paper-scale", action="store_true", help="12 layers, width 128, 1500 samples per request")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="meterflow", description="Flow-matching load profile generation with projection guidance.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    t = sub.add_parser("train", parents=[common], help="train a velocity model")
    t.add_argument("--data", help="directory holding profiles.csv and dataset.json")
    t.add_argument("--resume", help="checkpoint to continue from")
    for name in ("generate", "constrained", "impute", "superres"):
        s = sub.add_parser(name, parents=[common], help=f"{name} samples from a sampling manifest")
        s.add_argument("--manifest", help="sampling manifest JSON")
    e = sub.add_parser("evaluate", parents=[common], help="score generated profiles against real ones")
    e.add_argument("--real")
    e.add_argument("--generated")
    e.add_argument("--task", default="generate")
    return p


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"meterflow: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        args.out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args, cfg)
    except (UsageError, ValueError) as e:
        print(f"meterflow: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"meterflow: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"meterflow: I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
