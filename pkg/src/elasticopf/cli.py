"""Command-line entry point: ``elasticopf {case,gendata,train,eval,track}``.

Runs are driven by a JSON config file (see README for the schema); command
line flags override individual fields. Exit codes: 0 success, 1 domain
error, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dataset as dsmod
from .evaluation import (MissingLabel, compute_metrics, oracle_predictions, predict_testset,
                         storage_comparison, tracking_csv, tracking_eval)
from .grid_model import (CaseError, NetworkCase, case_to_dict, derive_subnetwork, load_case,
                         resolve_case, write_case)
from .neuralnet import (AdamState, CorruptFile, EmptyTrainSet, LengthMismatch, ShapeMismatch,
                        TrainConfig, TrainHistory, TrainingData, VersionMismatch,
                        init_elastic_dnn, load_checkpoint, param_count, save_checkpoint,
                        train_incremental)
from .opf import SolverOptions
from .powerflow import PowerFlowError

logger = logging.getLogger("elasticopf")

DOMAIN_ERRORS = (CaseError, PowerFlowError, dsmod.TooFewLabeled, dsmod.InvalidSlotMap,
                 dsmod.UnfittedDimension, EmptyTrainSet, LengthMismatch, ShapeMismatch,
                 CorruptFile, VersionMismatch, MissingLabel, FileNotFoundError)


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int
    cases: list[str] = field(default_factory=list)
    expanding: dict | None = None
    sampling: dict = field(default_factory=dict)
    tracking: dict = field(default_factory=dict)
    solver: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    output_dir: str = "run"
    base_dir: Path = field(default=Path("."), repr=False)

    KEYS = ("seed", "cases", "expanding", "sampling", "tracking", "solver", "model", "train",
            "output_dir")

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
        unknown = set(raw) - set(cls.KEYS)
        if unknown:
            raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
        if not isinstance(raw.get("seed"), int):
            raise ConfigError(f"{path}: an integer 'seed' is required")
        if bool(raw.get("cases")) == bool(raw.get("expanding")):
            raise ConfigError(f"{path}: give exactly one of 'cases' or 'expanding'")
        cfg = cls(**raw, base_dir=path.parent)
        for spec in cfg.case_specs():
            cfg._resolve(spec)  # fail early on a missing case file
        return cfg

    def case_specs(self) -> list[str]:
        return list(self.cases) if self.cases else [self.expanding["base"]]

    def _resolve(self, spec: str) -> NetworkCase:
        p = Path(spec)
        if not p.is_absolute() and (self.base_dir / p).exists():
            return load_case(self.base_dir / p)
        try:
            return resolve_case(spec)
        except FileNotFoundError:
            raise FileNotFoundError(f"case {spec!r} is neither a file nor a bundled case") from None

    def network_cases(self) -> list[NetworkCase]:
        if self.cases:
            return [self._resolve(s) for s in self.cases]
        base = self._resolve(self.expanding["base"])
        return [derive_subnetwork(base, int(n)) for n in self.expanding["targets"]]

    @property
    def out(self) -> Path:
        p = Path(self.output_dir)
        return p if p.is_absolute() else self.base_dir / p

    def solver_options(self) -> SolverOptions:
        return SolverOptions(**self.solver)

    def train_config(self, **overrides) -> TrainConfig:
        kw = {"seed": self.seed, **self.train,
              **{k: v for k, v in overrides.items() if v is not None}}
        return TrainConfig(**kw)

    @property
    def hidden_dims(self) -> tuple[int, ...]:
        return tuple(self.model.get("hidden_dims", (256, 128, 64)))


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _json(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


# --------------------------------------------------------------------------
# case


def cmd_case(args) -> int:
    case = resolve_case(args.file)
    if args.action == "validate":
        print(f"{case.name}: {case.n_bus} buses, {case.n_gen} generators, "
              f"{case.n_branch} branches, {case.n_load_slots} load slots")
    elif args.action == "dump":
        text = json.dumps(case_to_dict(case), indent=1) + "\n"
        if args.output:
            _write(Path(args.output), text)
        else:
            sys.stdout.write(text)
    else:
        if args.target is None:
            raise ConfigError("case derive needs --target")
        sub = derive_subnetwork(case, args.target)
        out = Path(args.output or f"{sub.name}.m")
        _write(out, write_case(sub))
        print(f"wrote {out} ({sub.n_bus} buses, {sub.n_branch} branches)")
    return 0


# --------------------------------------------------------------------------
# gendata


def cmd_gendata(args) -> int:
    cfg = RunConfig.load(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    cases = cfg.network_cases()
    opts = cfg.solver_options()
    load_range = tuple(cfg.sampling.get("load_range", (0.9, 1.1)))
    if args.tracking:
        tr = cfg.tracking
        profile = dsmod.daily_profile(tr.get("swing", 0.54), tr.get("slots", 288))
        ds = dsmod.generate_tracking_dataset(cases, profile, tr.get("per_slot_n", 2), seed=seed,
                                             opts=opts, load_range=load_range, jobs=args.jobs)
        out = Path(args.out) if args.out else cfg.out / "tracking"
    else:
        n = args.n or cfg.sampling.get("n_per_network", 100)
        ds = dsmod.generate_dataset(cases, n, cfg.sampling.get("split_fraction", 0.8), seed=seed,
                                    opts=opts, load_range=load_range, jobs=args.jobs)
        out = Path(args.out) if args.out else cfg.out / "data"
    files = dsmod.save_dataset(ds, out, provenance=not args.no_provenance)
    for k, case in enumerate(ds.cases):
        print(f"{case.name}: {len(ds.train[k])} train, {len(ds.test[k])} test")
    print(f"wrote {len(files)} files to {out}")
    return 0


# --------------------------------------------------------------------------
# train


def _data_dir(cfg, args) -> Path:
    if getattr(args, "data", None):
        return Path(args.data)
    return cfg.out / ("tracking" if getattr(args, "tracking", False) else "data")


def _ckpt_path(cfg, args) -> Path:
    if getattr(args, "checkpoint", None):
        return Path(args.checkpoint)
    return cfg.out / ("tracking.ckpt" if getattr(args, "tracking", False) else "model.ckpt")


def _echo(entry):
    losses = " ".join(f"{k}:{v:.3e}" for k, v in entry["train_loss"].items())
    logger.info("epoch %d lr %.2e train %s", entry["epoch"], entry["lr"], losses)


def _train_one(dnn, data, tcfg, ckpt: Path, scaler, extra, resume_from=None):
    adam, start, history = None, 0, None
    if resume_from is not None:
        adam, start = resume_from.adam, resume_from.extra.get("epochs_done", 0)
        history = TrainHistory(epochs=_history_from_json(resume_from.extra.get("history", [])))
    dnn, history = train_incremental(dnn, data, tcfg, adam=adam, start_epoch=start,
                                     history=history, log=_echo)
    extra = {**extra, "epochs_done": start + tcfg.epochs, "train_config": tcfg.to_dict(),
             "history": _history_to_json(history.epochs)}
    save_checkpoint(dnn, ckpt, scaler=scaler, extra=extra, adam=history.adam)
    _write(ckpt.with_suffix(".history.csv"), history.to_csv())
    return dnn, history


def _history_to_json(epochs):
    return [{**e, "train_loss": {str(k): v for k, v in e["train_loss"].items()},
             "test_loss": {str(k): v for k, v in e["test_loss"].items()}} for e in epochs]


def _history_from_json(epochs):
    return [{**e, "train_loss": {int(k): v for k, v in e["train_loss"].items()},
             "test_loss": {int(k): v for k, v in e["test_loss"].items()}} for e in epochs]


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config)
    ds = dsmod.load_dataset(_data_dir(cfg, args))
    tcfg = cfg.train_config(epochs=args.epochs, seed=args.seed)
    hidden = cfg.hidden_dims
    ckpt = _ckpt_path(cfg, args)
    names = [c.name for c in ds.cases]
    if args.separate:
        # one standalone network per feeder, the per-feeder baseline
        for k, case in enumerate(ds.cases):
            path = ckpt.with_name(f"{ckpt.stem}.sep{k}.ckpt")
            resume = load_checkpoint(path) if args.resume else None
            dnn = resume.dnn if resume else init_elastic_dnn(
                ((ds.layout.in_sizes[k],), (ds.layout.out_sizes[k],)), hidden,
                seed=tcfg.seed + k, va_mask=ds.layout.va_mask[:ds.layout.out_sizes[k]])
            data = TrainingData(train={0: ds.arrays(k, "train")},
                                test={0: ds.arrays(k, "test")} if ds.test[k] else {})
            _train_one(dnn, data, tcfg, path, ds.scaler,
                       {"networks": [case.name], "network_index": k}, resume)
            print(f"wrote {path}")
        return 0
    resume = load_checkpoint(ckpt) if args.resume else None
    if resume is not None:
        if tuple(resume.dnn.in_sizes) != tuple(ds.layout.in_sizes):
            raise LengthMismatch(f"{ckpt} was trained on a different network set")
        dnn = resume.dnn
    else:
        dnn = init_elastic_dnn((ds.layout.in_sizes, ds.layout.out_sizes), hidden,
                               seed=tcfg.seed, va_mask=ds.layout.va_mask)
    nets = None if args.networks is None else list(range(args.networks))
    data = TrainingData.from_dataset(ds, nets)
    dnn, hist = _train_one(dnn, data, tcfg, ckpt, ds.scaler, {"networks": names}, resume)
    last = hist.epochs[-1]["train_loss"] if hist.epochs else {}
    print(f"wrote {ckpt} after {len(hist.epochs)} epochs; final train loss "
          + ", ".join(f"{names[k]} {v:.3e}" for k, v in last.items()))
    return 0


# --------------------------------------------------------------------------
# eval / track


def _separate_paths(ckpt: Path, n: int) -> list[Path]:
    return [ckpt.with_name(f"{ckpt.stem}.sep{k}.ckpt") for k in range(n)]


def cmd_eval(args) -> int:
    cfg = RunConfig.load(args.config)
    ds = dsmod.load_dataset(_data_dir(cfg, args))
    timing = not args.no_provenance
    n = len(ds.cases)
    out = {}
    if args.oracle_as_prediction:
        preds = [oracle_predictions(ds, k) for k in range(n)]
        report = compute_metrics(ds.cases, ds.test, preds, timing=False)
        report.notes["mode"] = "oracle voltages fed through post-processing"
        out = report.to_dict()
    else:
        ckpt = load_checkpoint(_ckpt_path(cfg, args))
        dnn = ckpt.dnn
        if tuple(dnn.in_sizes) != tuple(ds.layout.in_sizes):
            raise LengthMismatch("checkpoint and dataset describe different networks")
        preds = [predict_testset(dnn, ds, k) for k in range(n)]
        report = compute_metrics(ds.cases, ds.test, preds, timing=timing)
        report.storage = storage_comparison(dnn, bytes_per_param=8)
        out = report.to_dict()
        if args.separate:
            models = [load_checkpoint(p).dnn for p in _separate_paths(_ckpt_path(cfg, args), n)]
            sep_preds = [predict_testset(m, ds, k, network_index=0) for k, m in enumerate(models)]
            sep = compute_metrics(ds.cases, ds.test, sep_preds, timing=timing)
            out["separate"] = sep.to_dict()["networks"]
            sep_params = sum(param_count(m) for m in models)
            out["storage"].update({"separate_checkpoint_params": sep_params,
                                   "checkpoint_ratio": param_count(dnn) / sep_params})
    path = Path(args.output) if args.output else cfg.out / "metrics.json"
    _write(path, _json(out))
    for m in out["networks"]:
        sp = "n/a" if m["speedup"] is None else f"x{m['speedup']:.0f}"
        print(f"{m['name']}: eta_opt {m['eta_opt']:.3f}%  V {m['eta_v']:.2f}  "
              f"Pg {m['eta_pg']:.2f}  Qg {m['eta_qg']:.2f}  Sl {m['eta_sl']:.2f}  "
              f"Pd {m['eta_pd']:.2f}  Qd {m['eta_qd']:.2f}  speed-up {sp}")
    print(f"wrote {path}")
    return 0


def cmd_track(args) -> int:
    cfg = RunConfig.load(args.config)
    args.tracking = True
    ds = dsmod.load_dataset(_data_dir(cfg, args))
    dnn = load_checkpoint(_ckpt_path(cfg, args)).dnn
    points = tracking_eval(dnn, ds)
    path = Path(args.output) if args.output else cfg.out / "tracking.csv"
    _write(path, tracking_csv(points))
    gaps = np.array([p.rel_gap for p in points])
    print(f"{len(points)} slots, median gap {100 * np.median(gaps):.3f}%, "
          f"{100 * np.mean(gaps < 0.02):.1f}% of slots within 2%")
    print(f"wrote {path}")
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="elasticopf", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("case", help="validate, dump or shrink a MATPOWER case (file or bundled name)")
    c.add_argument("action", choices=("validate", "dump", "derive"))
    c.add_argument("file")
    c.add_argument("--target", type=int, help="bus count for derive")
    c.add_argument("-o", "--output")
    c.set_defaults(func=cmd_case)

    g = sub.add_parser("gendata", help="sample loads and label them with the OPF oracle")
    g.add_argument("config")
    g.add_argument("--tracking", action="store_true", help="build the daily tracking set")
    g.add_argument("--jobs", type=int, default=1)
    g.add_argument("--no-provenance", action="store_true",
                   help="write timestamps and solve times as null (byte-stable output)")
    g.add_argument("--seed", type=int)
    g.add_argument("--n", type=int, help="samples per network")
    g.add_argument("--out")
    g.set_defaults(func=cmd_gendata)

    t = sub.add_parser("train", help="train the unified model (or --separate baselines)")
    t.add_argument("config")
    t.add_argument("--data")
    t.add_argument("--checkpoint")
    t.add_argument("--tracking", action="store_true", help="train on the tracking set")
    t.add_argument("--separate", action="store_true", help="one standalone model per network")
    t.add_argument("--resume", action="store_true", help="continue from the checkpoint")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--networks", type=int, help="train only the first N networks")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="compute metrics.json on the test split")
    e.add_argument("config")
    e.add_argument("--data")
    e.add_argument("--checkpoint")
    e.add_argument("--separate", action="store_true", help="also score the standalone models")
    e.add_argument("--oracle-as-prediction", action="store_true",
                   help="feed oracle voltages through the pipeline (sanity check)")
    e.add_argument("--no-provenance", action="store_true", help="omit wall-clock timings")
    e.add_argument("-o", "--output")
    e.set_defaults(func=cmd_eval, tracking=False)

    k = sub.add_parser("track", help="cost trajectory over the tracking day as CSV")
    k.add_argument("config")
    k.add_argument("--data")
    k.add_argument("--checkpoint")
    k.add_argument("-o", "--output")
    k.set_defaults(func=cmd_track)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DOMAIN_ERRORS as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except (ValueError, TypeError) as exc:
        # bad values in an otherwise well-formed config
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
