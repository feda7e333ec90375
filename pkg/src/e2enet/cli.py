"""Command-line interface: ``e2enet {synth,train,eval,report,topology}``.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from contextlib import nullcontext
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data, metrics
from .config import ConfigError, default_config, load_config
from .model import CheckpointError, build_model, load_checkpoint, full_arch
from .tensor import ShapeError
from .topology import flow_proportions
from .training import NonFiniteLossError, evaluate, train

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    pass


def _threads(n):
    if n is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=int(n))


def _triple(text: str):
    try:
        vals = tuple(int(v) for v in text.replace("x", ",").split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected three integers like 1,3,3, got {text!r}") from None
    if len(vals) != 3:
        raise argparse.ArgumentTypeError(f"expected three integers, got {text!r}")
    return vals


def _write_json(path, obj):
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _load_cfg(path):
    return load_config(path) if path else default_config()


def _dataset(path):
    path = Path(path)
    if not (path / "manifest.json").exists():
        raise UsageError(f"{path} has no manifest.json")
    records, manifest = data.load_dataset(path)
    if not records:
        raise UsageError(f"{path} holds no records")
    return records, manifest


# --------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    cfg = _load_cfg(args.config)
    spec = cfg.data
    seed = spec.seed if args.seed is None else args.seed
    records = data.synth_generate(spec, args.count, seed)
    try:
        data.write_dataset(args.out, records, spec, seed)
    except OSError as e:
        raise UsageError(f"cannot write to {args.out}: {e.strerror or e}") from None
    print(f"wrote {len(records)} volumes to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_cfg(args.config)
    arch, tcfg = cfg.arch, cfg.train
    if args.no_dsff:
        arch = replace(arch, use_dsff=False)
    if args.no_shift:
        arch = replace(arch, use_shift=False)
    if args.shift_size is not None:
        arch = replace(arch, shift_offsets=(-args.shift_size, 0, args.shift_size))
    if args.kernel is not None:
        arch = replace(arch, fusion_kernel=args.kernel)
    if args.sparsity is not None:
        arch = replace(arch, S=args.sparsity)
    if args.static:
        tcfg = replace(tcfg, static_topology=True)
    if args.delta_t is not None:
        tcfg = replace(tcfg, delta_T=args.delta_t)
    if args.seed is not None:
        tcfg = replace(tcfg, seed=args.seed)
    if args.epochs is not None:
        tcfg = replace(tcfg, epochs=args.epochs)
    if args.iters_per_epoch is not None:
        tcfg = replace(tcfg, iters_per_epoch=args.iters_per_epoch)

    records, manifest = _dataset(args.data)
    _check_classes(arch, manifest)
    val = _dataset(args.val)[0] if args.val else None
    params = build_model(arch, tcfg.seed)

    def log(rec):
        if not args.quiet:
            print(json.dumps(rec, sort_keys=True), flush=True)

    try:
        train(params, arch, records, tcfg, out_dir=args.out, val_records=val, log=log)
    except NonFiniteLossError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _check_classes(arch, manifest):
    for e in manifest["records"]:
        if e.get("num_classes", arch.num_classes) != arch.num_classes:
            raise UsageError(f"record {e['id']} has {e['num_classes']} classes, "
                             f"model predicts {arch.num_classes}")


def cmd_eval(args) -> int:
    arch, params, _ = load_checkpoint(args.model)
    records, manifest = _dataset(args.data)
    _check_classes(arch, manifest)
    for rec in records:
        if rec.labels is None:
            raise UsageError(f"record {rec.id} carries no labels")
        if int(rec.labels.max()) >= arch.num_classes:
            raise UsageError(f"record {rec.id} has labels beyond {arch.num_classes} classes")
    per_record = []
    for rec in records:
        per_class, md = evaluate(params, arch, [rec])
        per_record.append({"id": rec.id, "per_class_dice": per_class, "mdice": md})
    per_class = np.mean([r["per_class_dice"] for r in per_record], axis=0).tolist()
    out = {
        "per_class_dice": per_class,
        "mdice": float(np.mean(per_class)),
        "params_M": metrics.count_params(params) / 1e6,
        "flops_G": metrics.model_flops(arch) / 1e9,
        "records": per_record,
    }
    _write_json(args.report, out)
    print(f"mDice {out['mdice']:.4f} over {len(records)} volumes")
    return EXIT_OK


def _read_pool(path):
    doc = json.loads(Path(path).read_text())
    if isinstance(doc, list):
        doc = {"entries": doc}
    entries = doc.get("entries", [])
    if not entries:
        raise UsageError(f"pool {path} is empty")
    return entries, doc


def cmd_report(args) -> int:
    if args.model:
        arch, params, _ = load_checkpoint(args.model)
    else:
        arch = full_arch(args.full_sparsity)
        params = build_model(arch, 0)
    entries, doc = _read_pool(args.pool)
    per_class, md = [], None
    if args.metrics:
        m = json.loads(Path(args.metrics).read_text())
        per_class, md = m.get("per_class_dice", []), m.get("mdice")
    rep = metrics.report(params, arch, entries, per_class, md,
                         alpha1=doc.get("alpha1", 1.0), alpha2=doc.get("alpha2", 0.5),
                         patch=args.patch, mdice_scale=doc.get("mdice_scale", 100.0))
    _write_json(args.out, rep.to_json())
    print(rep.summary())
    return EXIT_OK


def cmd_topology(args) -> int:
    model = Path(args.model)
    if not (model / "topology.json").exists():
        raise UsageError(f"{model} has no topology.json")
    _, params, _ = load_checkpoint(model)
    nodes = []
    for m in sorted(params.masks.values(), key=lambda m: (m.kind != "fusion", m.stage, m.level)):
        row = {"kind": m.kind, "stage": m.stage, "level": m.level, "cin": m.cin, "cout": m.cout,
               "n_active": m.n_active, "density": m.density}
        if m.groups is not None:
            row.update(zip(("p_down", "p_forward", "p_up"), flow_proportions(m, m.groups)))
        nodes.append(row)
    _write_json(args.out, {"nodes": nodes})
    for r in nodes:
        flows = "" if "p_down" not in r else \
            f"  down {r['p_down']:.3f}  fwd {r['p_forward']:.3f}  up {r['p_up']:.3f}"
        print(f"{r['kind']:8s} ({r['stage']},{r['level']})  density {r['density']:.3f}{flows}")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="e2enet", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic phantom dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a phantom dataset")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--val", help="dataset scored after every epoch")
    p.add_argument("--static", action="store_true", help="freeze the initial sparse topology")
    p.add_argument("--no-shift", action="store_true", help="disable the depth shift")
    p.add_argument("--no-dsff", action="store_true", help="dense fusion convolutions")
    p.add_argument("--shift-size", type=int, help="shift offsets (-k, 0, k)")
    p.add_argument("--kernel", type=_triple, help="fusion kernel, e.g. 1,3,3")
    p.add_argument("--sparsity", type=float)
    p.add_argument("--delta-t", type=int, help="iterations between topology updates")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--iters-per-epoch", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="sliding-window evaluation of a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="parameter, FLOPs and trade-off accounting")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--model")
    g.add_argument("--full-sparsity", type=float,
                   help="account for the full-size configuration at this sparsity instead")
    p.add_argument("--pool", required=True)
    p.add_argument("--metrics", help="eval report supplying the model's mDice")
    p.add_argument("--patch", type=_triple)
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("topology", help="per-node density and flow proportions")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_topology)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with _threads(args.threads):
            return args.func(args)
    except ConfigError as e:
        print(f"error: config {e}", file=sys.stderr)
    except (UsageError, CheckpointError, data.VolumeFormatError, ShapeError,
            FileNotFoundError, json.JSONDecodeError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
