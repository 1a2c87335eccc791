"""Command-line surface: dataset generation, training, metric audits,
swap/interpolation grids, the OOD benchmark, and report emission.

Every command appends an entry to the output directory's `manifest.json`
before exiting 0.  Exit codes: 0 success, 1 numeric or runtime failure,
2 usage error.  A flat INI config file can preset objective and training
values; explicit flags override it.  The environment variable CLEAR_DATA_DIR
supplies the default dataset root.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import datetime
import json
import os
import sys
from pathlib import Path

import numpy as np

from .autodiff import ContractViolation, NumericFault, Tensor
from .benchmark import run_ood_benchmark
from .datasets import (LabeledImageSet, export_png_dir, gen_styled_shapes,
                       load_idx, write_idx)
from .imaging import make_grid, make_strip, write_png
from .losses import ClearConfig
from .mi import gmig
from .networks import restore_model
from .training import run_mi_simulation, train_clear, _encode_mu

_DATA_ENV = "CLEAR_DATA_DIR"


# -- manifest ------------------------------------------------------------------


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def append_manifest(out_dir, entry: dict) -> Path:
    """Append one run entry to the directory's single manifest file."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "manifest.json"
    if path.exists():
        data = json.loads(path.read_text())
    else:
        data = {"entries": []}
    data["entries"].append(entry)
    path.write_text(json.dumps(data, indent=2, sort_keys=True))
    return path


def _entry(command: str, resolved: dict, seeds=None, input_hashes=None,
           outputs=None, config_path=None) -> dict:
    return {
        "command": command,
        "config_path": str(config_path) if config_path else None,
        "resolved": resolved,
        "seeds": seeds or {},
        "input_hashes": input_hashes or {},
        "outputs": [str(o) for o in (outputs or [])],
        "timestamp": _now(),
    }


# -- dataset directory io --------------------------------------------------------


def save_dataset_dir(ds: LabeledImageSet, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if ds.channels != 1:
        raise ContractViolation("IDX dataset directories are grayscale; "
                                "use --png export for colored sets")
    write_idx(out_dir / "images.idx", ds.images)
    write_idx(out_dir / "content_labels.idx", ds.content_labels)
    write_idx(out_dir / "style_labels.idx", ds.style_labels)
    # hash the dataset as stored: pixels quantized to the 255 levels IDX holds
    stored = LabeledImageSet(np.floor(ds.images * 255.0 + 0.5) / 255.0,
                             ds.content_labels, ds.style_labels)
    meta = {"n": ds.n, "p": ds.n_classes, "m": ds.n_styles,
            "image_size": ds.image_size, "data_hash": stored.data_hash(),
            "contingency": ds.contingency.tolist()}
    (out_dir / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_dataset_dir(path) -> LabeledImageSet:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset directory {path} does not exist")
    images = load_idx(path / "images.idx")[:, None]
    content = load_idx(path / "content_labels.idx")
    style = load_idx(path / "style_labels.idx")
    return LabeledImageSet(images, content, style)


def _resolve_data_dir(arg) -> Path:
    if arg:
        return Path(arg)
    env = os.environ.get(_DATA_ENV)
    if env:
        return Path(env)
    raise ContractViolation(
        f"no dataset directory: pass --data or set {_DATA_ENV}")


# -- config file -------------------------------------------------------------------


def _load_config_file(path) -> dict:
    """Flat INI: [clear] objective fields, [train] loop fields."""
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ContractViolation(f"config file {path} not found or unreadable")
    out = {}
    if parser.has_section("clear"):
        sec = parser["clear"]
        for key in ("beta", "alpha", "tau"):
            if key in sec:
                out[key] = sec.getfloat(key)
        for key in ("metric", "variant"):
            if key in sec:
                out[key] = sec.get(key)
        if "dz" in sec:
            out["dz"] = sec.getint("dz")
    if parser.has_section("train"):
        sec = parser["train"]
        for key in ("epochs", "batch_size", "seed"):
            if key in sec:
                out[key] = sec.getint(key)
        if "lr" in sec:
            out["lr"] = sec.getfloat("lr")
    return out


def _resolve_train_settings(args) -> dict:
    """defaults < config file < explicit flags."""
    resolved = {"beta": None, "alpha": None, "tau": None, "metric": "cosine",
                "variant": "ps", "dz": 16, "epochs": 30, "batch_size": 128,
                "lr": 1e-3, "seed": None}
    if args.config:
        resolved.update(_load_config_file(args.config))
    for key in list(resolved):
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value
    if resolved["dz"] % 2 != 0:
        raise ContractViolation("--dz must be even (latents split in half)")
    metric = resolved["metric"]
    defaults = ClearConfig.for_metric(metric)
    if resolved["alpha"] is None:
        resolved["alpha"] = defaults.alpha1
    if resolved["tau"] is None:
        resolved["tau"] = defaults.tau
    if resolved["beta"] is None:
        resolved["beta"] = defaults.beta
    if resolved["seed"] is None:
        resolved["seed"] = int.from_bytes(os.urandom(4), "little")
    return resolved


def _clear_config(resolved: dict) -> ClearConfig:
    half = resolved["dz"] // 2
    return ClearConfig(beta=resolved["beta"], alpha1=resolved["alpha"],
                       alpha2=resolved["alpha"], tau=resolved["tau"],
                       metric=resolved["metric"], variant=resolved["variant"],
                       d_c=half, d_s=half)


# -- commands ---------------------------------------------------------------------


def cmd_simulate(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    trace = run_mi_simulation(args.direction, seed=args.seed,
                              steps_per_level=args.steps_per_level, tau=args.tau)
    trace_path = out_dir / f"trace_{args.direction}.csv"
    trace.to_csv(trace_path)
    plot_path = out_dir / f"trend_{args.direction}.csv"
    with open(plot_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "mi", "loss"])
        for row in trace.rows:
            writer.writerow([row["step"], f"{row['mi']:.12g}", f"{row['loss']:.12g}"])
    append_manifest(out_dir, _entry(
        "simulate",
        {"direction": args.direction, "steps_per_level": args.steps_per_level,
         "tau": args.tau},
        seeds={"seed": args.seed}, outputs=[trace_path, plot_path]))
    return 0


def cmd_gen_data(args) -> int:
    out_dir = Path(args.out)
    ds = gen_styled_shapes(p=args.p, m=args.m, n_per_cell=args.n_per_cell,
                           image_size=args.size, seed=args.seed,
                           style_kind=args.style_kind)
    outputs = []
    if ds.channels == 1:
        save_dataset_dir(ds, out_dir)
        outputs += [out_dir / "images.idx", out_dir / "content_labels.idx",
                    out_dir / "style_labels.idx", out_dir / "meta.json"]
    elif not args.png:
        raise ContractViolation("colored datasets need --png (IDX is grayscale)")
    if args.png:
        manifest_csv = export_png_dir(ds, out_dir / "png")
        outputs.append(manifest_csv)
    append_manifest(out_dir, _entry(
        "gen-data",
        {"p": args.p, "m": args.m, "n_per_cell": args.n_per_cell,
         "size": args.size, "style_kind": args.style_kind},
        seeds={"seed": args.seed},
        input_hashes={"dataset": ds.data_hash()}, outputs=outputs))
    return 0


def cmd_train(args) -> int:
    resolved = _resolve_train_settings(args)
    config = _clear_config(resolved)
    ds = load_dataset_dir(_resolve_data_dir(args.data))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    model, history = train_clear(
        ds, config, seed=resolved["seed"], epochs=resolved["epochs"],
        batch_size=min(resolved["batch_size"], ds.n), lr=resolved["lr"],
        audit_every=args.audit_every, checkpoint_dir=out_dir,
        checkpoint_every=args.checkpoint_every)
    history_path = out_dir / "history.csv"
    history.to_csv(history_path)
    append_manifest(out_dir, _entry(
        "train", resolved, seeds={"seed": resolved["seed"]},
        input_hashes={"dataset": ds.data_hash(),
                      "history": history.history_hash()},
        outputs=[out_dir / "final.ckpt", history_path],
        config_path=args.config))
    return 0


def cmd_gmig(args) -> int:
    model = restore_model(args.checkpoint)
    ds = load_dataset_dir(_resolve_data_dir(args.data))
    n_audit = min(args.n_samples, ds.n)
    mu_c, mu_s = _encode_mu(model, ds.images[:n_audit])
    report = gmig(mu_c, mu_s, ds.content_labels[:n_audit])
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    append_manifest(out_path.parent, _entry(
        "gmig", {"checkpoint": str(args.checkpoint), "n_samples": n_audit},
        input_hashes={"dataset": ds.data_hash()}, outputs=[out_path]))
    return 0


def _encode_means_at(model, ds, indices):
    code = model.encode(Tensor(ds.images[indices]), training=False)
    return model.reparameterize(code, None, eps=0.0)


def cmd_swap(args) -> int:
    model = restore_model(args.checkpoint)
    ds = load_dataset_dir(_resolve_data_dir(args.data))
    indices = [int(tok) for tok in args.indices.split(",") if tok]
    if not indices:
        raise ContractViolation("no sample indices given")
    if any(i < 0 or i >= ds.n for i in indices):
        raise ContractViolation(f"sample index out of range [0, {ds.n})")
    z_c, z_s = _encode_means_at(model, ds, np.asarray(indices))
    g = len(indices)
    tiles = []
    for i in range(g):
        zc_row = Tensor(np.repeat(z_c.data[i:i + 1], g, axis=0))
        row = model.decode(zc_row, Tensor(z_s.data), training=False).data
        tiles.append(row)
    grid = make_grid(np.concatenate(tiles), g, g, sep=1)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_png(out_path, grid)
    append_manifest(out_path.parent, _entry(
        "swap", {"checkpoint": str(args.checkpoint), "indices": indices},
        input_hashes={"dataset": ds.data_hash()}, outputs=[out_path]))
    return 0


def cmd_interpolate(args) -> int:
    model = restore_model(args.checkpoint)
    ds = load_dataset_dir(_resolve_data_dir(args.data))
    for name, idx in (("src", args.src), ("tgt", args.tgt)):
        if idx < 0 or idx >= ds.n:
            raise ContractViolation(f"--{name} index out of range [0, {ds.n})")
    if args.steps < 2:
        raise ContractViolation("--steps must be at least 2")
    z_c, z_s = _encode_means_at(model, ds, np.asarray([args.src, args.tgt]))
    lam = np.linspace(0.0, 1.0, args.steps)[:, None]
    if args.axis == "content":
        zc_path = (1 - lam) * z_c.data[0] + lam * z_c.data[1]
        zs_path = np.repeat(z_s.data[0:1], args.steps, axis=0)
    else:
        zc_path = np.repeat(z_c.data[0:1], args.steps, axis=0)
        zs_path = (1 - lam) * z_s.data[0] + lam * z_s.data[1]
    tiles = model.decode(Tensor(zc_path), Tensor(zs_path), training=False).data
    strip = make_strip(tiles, sep=1)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_png(out_path, strip)
    append_manifest(out_path.parent, _entry(
        "interpolate",
        {"checkpoint": str(args.checkpoint), "src": args.src, "tgt": args.tgt,
         "axis": args.axis, "steps": args.steps},
        input_hashes={"dataset": ds.data_hash()}, outputs=[out_path]))
    return 0


def cmd_ood_bench(args) -> int:
    resolved = _resolve_train_settings(args)
    ds = load_dataset_dir(_resolve_data_dir(args.data))
    variants = [v.strip().replace("-", "_") for v in args.variants.split(",") if v.strip()]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    half = resolved["dz"] // 2
    report = run_ood_benchmark(
        ds, k=args.k, n_splits=args.n_splits, variants=variants,
        seed=resolved["seed"],
        vae_params={"beta": resolved["beta"], "alpha1": resolved["alpha"],
                    "alpha2": resolved["alpha"], "tau": resolved["tau"],
                    "metric": resolved["metric"], "d_c": half, "d_s": half},
        epochs=resolved["epochs"], batch_size=resolved["batch_size"],
        lr=resolved["lr"], head_epochs=args.head_epochs)
    report_path = out_dir / "benchmark.json"
    report.to_json(report_path)
    csv_path = out_dir / "benchmark.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["split", "model", "accuracy", "auroc", "ap",
                         "delta_accuracy", "delta_auroc", "delta_ap"])
        for s in report.splits:
            b = s["baseline"]
            writer.writerow([s["split"], "baseline", b["accuracy"], b["auroc"],
                             b["ap"], "", "", ""])
            for name, metric in s["variants"].items():
                d = s["deltas"][name]
                writer.writerow([s["split"], name, metric["accuracy"],
                                 metric["auroc"], metric["ap"],
                                 d["accuracy"], d["auroc"], d["ap"]])
    append_manifest(out_dir, _entry(
        "ood-bench",
        {**resolved, "k": args.k, "n_splits": args.n_splits,
         "variants": variants},
        seeds={"seed": resolved["seed"]},
        input_hashes={"dataset": ds.data_hash()},
        outputs=[report_path, csv_path], config_path=args.config))
    return 0


def cmd_report(args) -> int:
    src = Path(args.src)
    lines = []
    bench = src / "benchmark.json"
    if bench.exists():
        data = json.loads(bench.read_text())
        lines.append(f"OOD benchmark: k={data['k']}, splits={len(data['splits'])}")
        med = data.get("medians", {})
        for name, deltas in med.get("deltas", {}).items():
            lines.append(
                f"  {name}: median delta acc={deltas['accuracy']:+.4f} "
                f"auroc={deltas['auroc']:+.4f} ap={deltas['ap']:+.4f}")
        base = med.get("baseline", {})
        if base:
            lines.append(f"  baseline median acc={base['accuracy']:.4f}")
    history = src / "history.csv"
    if history.exists():
        with open(history) as fh:
            rows = list(csv.DictReader(fh))
        if rows:
            first, last = rows[0], rows[-1]
            lines.append(f"training history: {len(rows)} steps")
            lines.append(f"  total {first['total']} -> {last['total']}")
            audited = [r["gmig"] for r in rows if r["gmig"]]
            if audited:
                lines.append(f"  final gmig audit {audited[-1]}")
    if not lines:
        raise ContractViolation(f"nothing to report under {src}")
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    out_path = Path(args.out) if args.out else src / "report.txt"
    out_path.write_text(text)
    append_manifest(out_path.parent, _entry(
        "report", {"src": str(src)}, outputs=[out_path]))
    return 0


# -- parser -----------------------------------------------------------------------


def _add_train_flags(sp) -> None:
    sp.add_argument("--config", default=None, help="INI config file")
    sp.add_argument("--variant", default=None,
                    choices=["ps", "tc", "l1out", "club-s", "club_s", "none"])
    sp.add_argument("--metric", default=None,
                    choices=["cosine", "l2", "jeffrey", "mahalanobis"])
    sp.add_argument("--beta", type=float, default=None)
    sp.add_argument("--alpha", type=float, default=None)
    sp.add_argument("--tau", type=float, default=None)
    sp.add_argument("--dz", type=int, default=None)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--epochs", type=int, default=None)
    sp.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    sp.add_argument("--lr", type=float, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="clearvae",
        description="content/style disentanglement: data, training, audits, benchmarks")
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("simulate", help="Gaussian-mixture MI trend simulation")
    sp.add_argument("--direction", required=True, choices=["max", "min"])
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--steps-per-level", dest="steps_per_level", type=int, default=100)
    sp.add_argument("--tau", type=float, default=0.3)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("gen-data", help="generate the synthetic styled-shapes set")
    sp.add_argument("--p", type=int, default=10)
    sp.add_argument("--m", type=int, default=6)
    sp.add_argument("--n-per-cell", dest="n_per_cell", type=int, default=50)
    sp.add_argument("--size", type=int, default=28, choices=[16, 28])
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--style-kind", dest="style_kind", default="transform",
                    choices=["transform", "color"])
    sp.add_argument("--png", action="store_true", help="also export PNG + CSV manifest")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train one model variant")
    sp.add_argument("--data", default=None)
    sp.add_argument("--out", required=True)
    sp.add_argument("--audit-every", dest="audit_every", type=int, default=1)
    sp.add_argument("--checkpoint-every", dest="checkpoint_every", type=int, default=None)
    _add_train_flags(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("gmig", help="disentanglement audit of a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", default=None)
    sp.add_argument("--n-samples", dest="n_samples", type=int, default=1024)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gmig)

    sp = sub.add_parser("swap", help="content/style swapping grid")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", default=None)
    sp.add_argument("--indices", required=True, help="comma-separated sample indices")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_swap)

    sp = sub.add_parser("interpolate", help="latent interpolation strip")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", default=None)
    sp.add_argument("--src", type=int, required=True)
    sp.add_argument("--tgt", type=int, required=True)
    sp.add_argument("--axis", required=True, choices=["content", "style"])
    sp.add_argument("--steps", type=int, default=8)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_interpolate)

    sp = sub.add_parser("ood-bench", help="unseen-style generalization benchmark")
    sp.add_argument("--data", default=None)
    sp.add_argument("--k", type=int, required=True)
    sp.add_argument("--n-splits", dest="n_splits", type=int, default=5)
    sp.add_argument("--variants", default="ps")
    sp.add_argument("--head-epochs", dest="head_epochs", type=int, default=30)
    sp.add_argument("--out", required=True)
    _add_train_flags(sp)
    sp.set_defaults(func=cmd_ood_bench)

    sp = sub.add_parser("report", help="summarize artifacts in a directory")
    sp.add_argument("--src", required=True)
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "variant", None):
        args.variant = args.variant.replace("-", "_")
    try:
        return args.func(args)
    except (ContractViolation, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (NumericFault, RuntimeError, OSError) as err:
        print(f"run failed: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
