"""Command-line entry point.

Subcommands: gen-data, train, eval, ablate, inspect-bank, regen-demo.
Exit codes: 0 success, 1 usage error, 2 config error, 3 runtime failure.
Every command that writes an output directory also writes ``manifest.json``
(resolved config, seeds, versions); ``--manifest`` replays such a run.
"""
from __future__ import annotations

import os

# pin BLAS to one thread before numpy loads, so reductions are reproducible
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "BLIS_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse  # noqa: E402
import csv  # noqa: E402
import io  # noqa: E402
import json  # noqa: E402
import platform  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

import duallevel  # noqa: E402
from duallevel import ablation  # noqa: E402
from duallevel.bank import bank_stats, load_bank, save_bank  # noqa: E402
from duallevel.config import ConfigError, RunConfig, load_config, published_preset  # noqa: E402
from duallevel.model import load_checkpoint, save_checkpoint  # noqa: E402
from duallevel.regen import InteractionStrategy, regenerate  # noqa: E402
from duallevel.selftrain import build_datasets, evaluate_miou, metrics_csv, train  # noqa: E402
from duallevel.synthdata import gen_dataset, load_dataset, save_dataset  # noqa: E402

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- shared helpers -------------------------------------------------------------


def versions() -> dict:
    import scipy

    return {
        "duallevel": duallevel.__version__,
        "backend": duallevel.BACKEND,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
    }


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _resolve_config(args) -> RunConfig:
    if getattr(args, "manifest_doc", None) is not None:
        return RunConfig.from_dict(args.manifest_doc["config"])
    if getattr(args, "preset", None) == "published":
        user = load_config(args.config).to_dict() if args.config else {}
        # keys the user file leaves at their desk default still come from the preset
        cfg = RunConfig.from_dict(_merge(published_preset().to_dict(), _diff(RunConfig().to_dict(), user)))
    else:
        cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key] = _parse_value(value)
    if overrides:
        cfg = cfg.replace(**overrides)
    return cfg


def _diff(default: dict, doc: dict) -> dict:
    out = {}
    for k, v in doc.items():
        if isinstance(v, dict):
            sub = _diff(default[k], v)
            if sub:
                out[k] = sub
        elif default[k] != v:
            out[k] = v
    return out


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(base[k], v) if isinstance(v, dict) and isinstance(base.get(k), dict) else v
    return out


def _write_manifest(out: Path, command: str, cfg: RunConfig | None, options: dict, outputs: list[str]) -> None:
    doc = {
        "tool": "duallevel",
        "command": command,
        "options": options,
        "config": cfg.to_dict() if cfg is not None else None,
        "seeds": {"data": cfg.data.seed, "train": cfg.train.seed} if cfg is not None else {},
        "versions": versions(),
        "outputs": sorted(outputs),
    }
    (out / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _datasets(cfg: RunConfig, data_dir):
    if data_dir is None:
        return build_datasets(cfg)
    source, target, _ = load_dataset(data_dir)
    return source, target


def _csv(rows: list[dict], cols: list[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([repr(float(r[c])) if isinstance(r[c], float) else r[c] for c in cols])
    return buf.getvalue()


# -- commands -------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _resolve_config(args)
    if args.seed is not None:
        cfg = cfg.replace(**{"data.seed": args.seed})
    d = cfg.data
    source, target, manifest = gen_dataset(d.source, d.target, d.n_source, d.n_target, d.seed, d.height, d.width)
    out = _out_dir(args.out)
    manifest["run"] = {"command": "gen-data", "config": cfg.to_dict(), "versions": versions()}
    save_dataset(out, source, target, manifest)
    print(f"wrote {len(source)} source and {len(target)} target images to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    if args.seed is not None:
        cfg = cfg.replace(**{"train.seed": args.seed})
    source, target = _datasets(cfg, args.data)
    result = train(cfg, source, target, semantic_only=args.semantic_only)
    out = _out_dir(args.out)
    (out / "metrics.csv").write_text(metrics_csv(result.metrics, cfg.n_classes))
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    outputs = ["metrics.csv", "config.json"]
    bank_bytes = save_bank(result.bank) if result.bank is not None else b""
    (out / "checkpoint.bin").write_bytes(save_checkpoint(result.model, bank_bytes))
    outputs.append("checkpoint.bin")
    if result.bank is not None:
        (out / "bank.bin").write_bytes(bank_bytes)
        outputs.append("bank.bin")
    options = {"data": str(args.data) if args.data else None, "semantic_only": args.semantic_only}
    _write_manifest(out, "train", cfg, options, outputs)
    print(f"final target mIoU {result.metrics[-1]['miou_target']:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if not args.checkpoint:
        raise UsageError("eval needs --checkpoint")
    cfg = _resolve_config(args)
    model, _ = load_checkpoint(Path(args.checkpoint).read_bytes())
    if model.n_classes != cfg.n_classes:
        raise ConfigError(f"checkpoint has {model.n_classes} classes, config has {cfg.n_classes}")
    source, target = _datasets(cfg, args.data)
    ds = target if args.split == "target" else source
    iou, miou = evaluate_miou(model, ds)
    rows = [{"class": c, "iou": float(v)} for c, v in enumerate(iou)]
    text = _csv(rows, ["class", "iou"]) + f"mean,{miou!r}\n"
    if args.out:
        out = _out_dir(args.out)
        (out / "eval.csv").write_text(text)
        options = {"checkpoint": str(args.checkpoint), "data": str(args.data) if args.data else None,
                   "split": args.split}
        _write_manifest(out, "eval", cfg, options, ["eval.csv"])
    sys.stdout.write(text)
    return EXIT_OK


def cmd_ablate(args) -> int:
    if not args.grid:
        raise UsageError("ablate needs --grid")
    cfg = _resolve_config(args)
    seeds = _int_list(args.seeds)
    values = [_parse_value(v) for v in args.values.split(",")] if args.values else None
    vs = ablation.variants(args.grid, values)
    configs = [ablation.variant_config(cfg, v, s) for v in vs for s in seeds]
    if args.grid != "components":
        ablation.check_shared(cfg, configs, args.grid)
    source, target = _datasets(cfg, args.data)
    out = _out_dir(args.out)
    rows = []
    outputs = []
    for v in vs:
        for s in seeds:
            res = ablation.run_variant(cfg, v, s, source, target)
            last = res.metrics[-1]
            rows.append({"axis": args.grid, "variant": v.name, "seed": s, "final_miou": last["miou_target"],
                         "L_src": last["L_src"], "L_tgt": last["L_tgt"], "L_ins": last["L_ins"],
                         "L_overall": last["L_overall"]})
            name = f"metrics_{args.grid}_{v.name.replace('/', '-')}_seed{s}.csv"
            (out / name).write_text(metrics_csv(res.metrics, cfg.n_classes))
            outputs.append(name)
            print(f"{args.grid}={v.name} seed={s} final mIoU {last['miou_target']:.4f}", flush=True)
    cols = ["axis", "variant", "seed", "final_miou", "L_src", "L_tgt", "L_ins", "L_overall"]
    (out / "ablation.csv").write_text(_csv(rows, cols))
    summary = ablation.summarize(rows)
    (out / "summary.csv").write_text(_csv(summary, ["variant", "seeds", "mean_miou", "std_miou"]))
    outputs += ["ablation.csv", "summary.csv"]
    options = {"grid": args.grid, "seeds": seeds, "values": values, "data": str(args.data) if args.data else None}
    _write_manifest(out, "ablate", cfg, options, outputs)
    return EXIT_OK


def cmd_inspect_bank(args) -> int:
    data = Path(args.bank).read_bytes()
    if data[:4] == b"DLCK":
        _, data = load_checkpoint(data)
        if not data:
            raise ValueError("checkpoint carries no bank (semantic-only run)")
    stats = bank_stats(load_bank(data))
    text = json.dumps(stats, indent=2, sort_keys=True) + "\n"
    if args.out:
        out = _out_dir(args.out)
        (out / "bank_stats.json").write_text(text)
        _write_manifest(out, "inspect-bank", None, {"bank": str(args.bank)}, ["bank_stats.json"])
    sys.stdout.write(text)
    return EXIT_OK


_DEMO = {
    "z": [[0.7, 0.3]],
    "q": [[0.1, 0.2, 0.3, 0.4]],
    "bank_labels": [0, 0, 1, 1],
}


def cmd_regen_demo(args) -> int:
    doc = json.loads(Path(args.input).read_text()) if args.input else _DEMO
    try:
        z = np.asarray(doc["z"], dtype=np.float64)
        q = np.asarray(doc["q"], dtype=np.float64)
        labels = np.asarray(doc["bank_labels"], dtype=np.int64)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"regen-demo input needs z, q and bank_labels: {exc}") from exc
    try:
        strategy = InteractionStrategy(args.z_mode, args.q_mode, args.phi)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    res = regenerate(z[None], q[None], labels, strategy)
    report = {
        "strategy": {"z_mode": args.z_mode, "q_mode": args.q_mode, "phi": args.phi},
        "pixels": [
            {"z": z[i].tolist(), "q_alpha": q[i].tolist(), "z_sc": res.z_sc[0, i].tolist(),
             "q_ga": res.q_ga[0, i].tolist(), "q_hat": res.q_hat[0, i].tolist(), "z_hat": res.z_hat[0, i].tolist(),
             "scale_fallback": bool(res.scale_fallback[0, i])}
            for i in range(len(z))
        ],
    }
    text = json.dumps(report, indent=2) + "\n"
    if args.out:
        out = _out_dir(args.out)
        (out / "regen_demo.json").write_text(text)
        _write_manifest(out, "regen-demo", None, {"input": args.input, **report["strategy"]}, ["regen_demo.json"])
    sys.stdout.write(text)
    return EXIT_OK


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


# -- parser ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="duallevel", description="Dual-level pseudo-label self-training on a synthetic benchmark.")
    p.add_argument("--version", action="version", version=f"duallevel {duallevel.__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def config_args(sp, replay=True):
        sp.add_argument("--config", help="run configuration JSON (keys may be partial)")
        sp.add_argument("--preset", choices=["published"], help="start from a named preset instead of desk defaults")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted config override, repeatable")
        if replay:
            sp.add_argument("--manifest", help="replay the run recorded in this manifest.json")

    sp = sub.add_parser("gen-data", help="generate the paired source/target benchmark")
    config_args(sp)
    sp.add_argument("--out", required=True, help="dataset directory to write")
    sp.add_argument("--seed", type=int, help="override data.seed")
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train one model and write metrics and a checkpoint")
    config_args(sp)
    sp.add_argument("--out", required=True, help="run directory to write")
    sp.add_argument("--data", help="dataset directory from gen-data (default: generate from config)")
    sp.add_argument("--seed", type=int, help="override train.seed")
    sp.add_argument("--semantic-only", action="store_true", help="drop the bank: plain self-training baseline")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint's per-class IoU")
    config_args(sp)
    sp.add_argument("--checkpoint", help="checkpoint.bin written by train")
    sp.add_argument("--data", help="dataset directory from gen-data (default: generate from config)")
    sp.add_argument("--split", choices=["source", "target"], default="target", help="split to score (default: target)")
    sp.add_argument("--out", help="directory for eval.csv (default: print only)")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="sweep one axis over variants and seeds")
    config_args(sp)
    sp.add_argument("--grid", help=f"axis: {', '.join(ablation.AXIS_KEYS)}")
    sp.add_argument("--out", required=True, help="directory for per-variant and summary CSVs")
    sp.add_argument("--seeds", default="0,1,2", help="comma-separated train seeds (default: 0,1,2)")
    sp.add_argument("--values", help="comma-separated values replacing the axis defaults")
    sp.add_argument("--data", help="dataset directory from gen-data (default: generate from config)")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("inspect-bank", help="print per-class statistics of a bank or checkpoint file")
    sp.add_argument("--bank", required=True, help="bank.bin or checkpoint.bin")
    sp.add_argument("--out", help="directory for bank_stats.json (default: print only)")
    sp.set_defaults(func=cmd_inspect_bank)

    sp = sub.add_parser("regen-demo", help="show every regeneration stage for small inputs")
    sp.add_argument("--input", help="JSON with z (N x C), q (N x K) and bank_labels (K)")
    sp.add_argument("--phi", type=float, default=0.9, help="smoothing weight in [0, 1]")
    sp.add_argument("--z-mode", choices=["smoothing", "scaling"], default="smoothing")
    sp.add_argument("--q-mode", choices=["smoothing", "scaling"], default="scaling")
    sp.add_argument("--out", help="directory for regen_demo.json (default: print only)")
    sp.set_defaults(func=cmd_regen_demo)
    return p


def _apply_manifest(args) -> None:
    """Load ``--manifest`` and restore the recorded command options."""
    args.manifest_doc = None
    path = getattr(args, "manifest", None)
    if not path:
        return
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"manifest not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid manifest {p}: {exc}") from exc
    run = doc.get("run", doc)  # dataset manifests nest the run record
    if run.get("command") != args.command:
        raise ConfigError(f"manifest records command {run.get('command')!r}, not {args.command!r}")
    if run.get("config") is None:
        raise ConfigError("manifest has no config to replay")
    args.manifest_doc = run
    opts = run.get("options", {})
    if args.command == "train":
        args.data = args.data or opts.get("data")
        args.semantic_only = args.semantic_only or bool(opts.get("semantic_only"))
    elif args.command == "ablate":
        args.grid = opts.get("grid")
        args.seeds = ",".join(str(s) for s in opts.get("seeds", []))
        args.values = ",".join(json.dumps(v) if not isinstance(v, str) else v for v in opts["values"]) if opts.get("values") else None
        args.data = args.data or opts.get("data")
    elif args.command == "eval":
        args.data = args.data or opts.get("data")
        args.checkpoint = args.checkpoint or opts.get("checkpoint")
        args.split = opts.get("split", args.split)
    recorded = run.get("versions", {}).get("backend")
    if recorded and recorded != duallevel.BACKEND:
        print(f"warning: manifest was recorded with the {recorded} backend, running {duallevel.BACKEND}",
              file=sys.stderr)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        _apply_manifest(args)
        if args.manifest_doc is not None and (args.config or args.set or args.preset):
            raise UsageError("--manifest cannot be combined with --config, --preset or --set")
        if getattr(args, "seed", None) is not None and args.manifest_doc is not None:
            raise UsageError("--manifest cannot be combined with --seed")
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError, FloatingPointError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
