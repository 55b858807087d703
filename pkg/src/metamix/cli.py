"""Command-line driver: ``metamix {pretrain,search,finetune,analyze,report}``.

Every artifact goes under ``--out``:

    fp.ckpt.npz          full-precision checkpoint (pretrain)
    meta.ckpt.npz        meta-state after bit selection (search)
    assignment.json      per-layer bits and alpha softmax (search)
    alpha_trace.csv      alpha softmax after each bit-search iteration (search)
    cost_report.json     per-layer op_i / bits / bops (search, finetune)
    final.ckpt.npz       fine-tuned mixed-precision model (finetune)
    finetune_report.json accuracy, BOPs, per-epoch history, timings (finetune)
    metrics.csv          per-iteration metrics of every command
    bn_trace.csv, act_hist_<layer>_<bits>.csv, qgauss_var.csv,
    hessian_per_op.csv   instrumentation (analyze)

Each command reads what the previous one wrote, so a pipeline can be
resumed at any stage.  Exit status is 0 on success, 1 on a runtime error
and 2 on a usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import instrument as ins
from .config import ConfigError, RunConfig
from .costmodel import RegularizerCfg, bops, cost_report, count_ops, resolve_budget
from .data import load_dataset
from .mixsearch import BitAssignment
from .trainer import MetaMixTrainer, MetricsLog, load_checkpoint, save_checkpoint
from .zoo import Model

log = logging.getLogger("metamix")


def _atomic_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _write_json(path: Path, obj) -> None:
    _atomic_text(path, json.dumps(obj, indent=2) + "\n")


def _load_data(cfg: RunConfig, spec):
    kind = cfg.get("data", "kind")
    kw = cfg.data_kwargs()
    if kind == "blobs":
        kw = {"n": kw["n_train"], "seed": kw["seed"], "num_classes": spec.num_classes,
              "dim": int(np.prod(spec.input_shape)), "shape": spec.input_shape,
              "separation": 10.0}
    path = cfg.data_path()
    if kind in ("cifar10", "mnist") and not path.exists():
        raise FileNotFoundError(f"dataset directory {path} does not exist")
    return load_dataset(kind, path, **kw)


def _trainer(cfg: RunConfig, model: Model, with_reg: bool = False) -> MetaMixTrainer:
    plan = cfg.plan()
    reg = None
    if with_reg:
        ct = count_ops(model.spec, model.weight_bits)
        t = resolve_budget(ct, cfg.get("search", "t_bops"), model.spec.candidates)
        unit = float(cfg.get("search", "unit") or t)
        reg = RegularizerCfg(t, cfg.lambda_r(), unit)
    return MetaMixTrainer(model, plan, reg=reg, seed=cfg.seed,
                          metrics=MetricsLog(cfg.out / "metrics.csv"))


def _load_compatible(cfg: RunConfig, path: Path):
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found; run the previous stage first")
    model, header, arrays = load_checkpoint(path)
    expected = cfg.model_spec()
    if model.spec.to_text() != expected.to_text() or model.weight_bits != int(cfg.get("model", "weight_bits")):
        raise ValueError(f"checkpoint {path} was written for a different model than the config describes")
    return model, header, arrays


# -- commands ----------------------------------------------------------------------------


def cmd_pretrain(cfg: RunConfig, args) -> dict:
    spec = cfg.model_spec()
    model = Model(spec, seed=cfg.seed, weight_bits=int(cfg.get("model", "weight_bits")),
                  bn_momentum=float(cfg.get("model", "bn_momentum")))
    train, test = _load_data(cfg, spec)
    tr = _trainer(cfg, model)
    res = tr.pretrain(train, test)
    save_checkpoint(cfg.out / "fp.ckpt.npz", model, extra={"stage": "pretrain", "eval": res})
    _write_json(cfg.out / "pretrain_report.json", {**res, "timings": tr.timings, "seed": cfg.seed})
    return res


def cmd_search(cfg: RunConfig, args) -> dict:
    model, _, _ = _load_compatible(cfg, Path(args.checkpoint or cfg.out / "fp.ckpt.npz"))
    train, _ = _load_data(cfg, model.spec)
    tr = _trainer(cfg, model, with_reg=True)
    assignment = tr.run_bit_selection(train)
    _atomic_text(cfg.out / "assignment.json", assignment.to_json() + "\n")
    report = cost_report(tr.cost, assignment)
    report.update({"t_bops": tr.reg.t_bops, "lambda_r": tr.reg.lambda_r})
    _write_json(cfg.out / "cost_report.json", report)
    names = sorted(model.branch_sets)
    rows = [(r["iter"], r["layer"], *r["softmax"]) for r in tr.alpha_trace]
    width = max((len(r) - 2 for r in rows), default=0)
    _csv(cfg.out / "alpha_trace.csv", ["iter", "layer"] + [f"p{j}" for j in range(width)], rows)
    save_checkpoint(cfg.out / "meta.ckpt.npz", model, tr, extra={"stage": "search"})
    summary = {"bops": report["total_bops"], "t_bops": tr.reg.t_bops, "timings": tr.timings,
               "layers": len(names)}
    _write_json(cfg.out / "search_summary.json", summary)
    return summary


def cmd_finetune(cfg: RunConfig, args) -> dict:
    if args.uniform is not None:
        src = Path(args.checkpoint or cfg.out / "fp.ckpt.npz")
    else:
        src = Path(args.checkpoint or cfg.out / "meta.ckpt.npz")
    model, _, _ = _load_compatible(cfg, src)
    if args.uniform is not None:
        assignment = BitAssignment.uniform(model.spec.searched_layers(), args.uniform)
        tag = f"uniform{args.uniform}"
    else:
        apath = Path(args.assignment or cfg.out / "assignment.json")
        if not apath.exists():
            raise FileNotFoundError(f"assignment {apath} not found; run search first")
        assignment = BitAssignment.from_json(apath.read_text())
        tag = "mixed"
    train, test = _load_data(cfg, model.spec)
    tr = _trainer(cfg, model)
    res = tr.run_weight_training(train, test, assignment)
    report = {"kind": tag, "accuracy": res["accuracy"], "loss": res["loss"], "bops": res["bops"],
              "history": res["history"], "timings": tr.timings, "seed": cfg.seed,
              "source_checkpoint": str(src)}
    suffix = "" if tag == "mixed" else f"_{tag}"
    _write_json(cfg.out / f"finetune_report{suffix}.json", report)
    _write_json(cfg.out / f"cost_report{suffix}.json" if suffix else cfg.out / "cost_report.json",
                cost_report(tr.cost, assignment))
    save_checkpoint(cfg.out / f"final{suffix}.ckpt.npz", model, extra={"stage": "finetune",
                                                                      "assignment": assignment.to_json()})
    return {k: report[k] for k in ("kind", "accuracy", "bops")}


def _csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    tmp.replace(path)


def cmd_analyze(cfg: RunConfig, args) -> dict:
    out = cfg.out
    summary: dict = {}
    qrows = ins.quantized_gaussian_variance(n=cfg.analyze_int("qgauss_n"), seed=cfg.seed,
                                           out_path=out / "qgauss_var.csv")
    summary["qgauss_var"] = dict(qrows)

    fp_path = Path(args.checkpoint or out / "fp.ckpt.npz")
    model, _, _ = _load_compatible(cfg, fp_path)
    train, test = _load_data(cfg, model.spec)
    start = model.state_dict()

    # BN running-variance traces, every regime from the same FP starting point
    traces, fluct = [], {}
    bn_layer = cfg.get("analyze", "bn_layer")
    for regime in ("random_fp", "random_w4", "bit_meta"):
        model.load_state_dict(start)
        tr = _trainer(cfg, model)
        t = ins.trace_bn(model, train, bn_layer, regime, cfg.analyze_int("bn_iterations"),
                         every=cfg.analyze_int("bn_every"), trainer=tr, seed=cfg.seed,
                         epoch_len=cfg.analyze_int("bn_epoch_len"), lr=tr.plan.lr_meta)
        traces.append(t)
        layer = ins.select_layers(model, bn_layer)[0]
        fluct[regime] = ins.relative_fluctuation(t.series(layer)[1], window=min(20, len(t.rows)))
    _csv(out / "bn_trace.csv", ("regime", "iteration", "layer", "statistic", "value"),
         [(t.regime, *r) for t in traces for r in t.rows])
    summary["bn_relative_fluctuation"] = fluct

    # activation histograms and Hessian traces use the searched meta-state when present
    meta_path = out / "meta.ckpt.npz"
    if meta_path.exists():
        model, _, _ = _load_compatible(cfg, meta_path)
    else:
        model.load_state_dict(start)
    sample = test.x[: cfg.analyze_int("hessian_samples")]
    hist_layer = cfg.get("analyze", "hist_layer")
    bits = sorted({model.layers[hist_layer].branch_set.act_bits(i)
                   for i in range(model.layers[hist_layer].branch_set.B)}, reverse=True)
    hists = ins.act_histogram(model, hist_layer, bits, sample, out_dir=out)
    summary["act_variance"] = {str(b): h.variance for b, h in hists.items()}
    summary["act_variance_spread"] = ins.variance_spread(hists)

    apath = out / "assignment.json"
    assignment = BitAssignment.from_json(apath.read_text()) if apath.exists() else None
    if assignment is not None:
        model.set_mode("fixed", assignment=assignment, quantize_weights=False)
    ct = count_ops(model.spec, model.weight_bits)
    rows = ins.hessian_trace_per_op(model, sample, test.y[: len(sample)], ct,
                                    probes=cfg.analyze_int("hessian_probes"), seed=cfg.seed,
                                    assignment=assignment, out_path=out / "hessian_per_op.csv")
    if assignment is not None:
        rho = ins.rank_correlation(rows)
        # undefined when every layer got the same bit-width; JSON has no NaN
        summary["hessian_rank_correlation"] = None if np.isnan(rho) else rho
    _write_json(out / "analyze_summary.json", summary)
    return summary


def cmd_report(cfg: RunConfig, args) -> dict:
    out = cfg.out
    parts = {}
    for name in ("pretrain_report", "search_summary", "finetune_report", "analyze_summary"):
        p = out / f"{name}.json"
        if p.exists():
            parts[name] = json.loads(p.read_text())
    for p in sorted(out.glob("finetune_report_uniform*.json")):
        parts.setdefault(p.stem, json.loads(p.read_text()))
    if not parts:
        raise FileNotFoundError(f"no reports under {out}; nothing to summarise")
    lines = [f"run directory: {out}"]
    if "pretrain_report" in parts:
        lines.append(f"FP accuracy         {parts['pretrain_report']['accuracy']:.4f}")
    if "search_summary" in parts:
        s = parts["search_summary"]
        lines.append(f"searched BOPs       {s['bops']} (target {s['t_bops']:.0f}, "
                     f"ratio {s['bops'] / s['t_bops']:.3f})")
    for key, rep in parts.items():
        if key.startswith("finetune_report"):
            lines.append(f"{rep['kind']:<19} acc {rep['accuracy']:.4f}  BOPs {rep['bops']}")
    if "analyze_summary" in parts:
        f = parts["analyze_summary"].get("bn_relative_fluctuation", {})
        for regime, v in f.items():
            lines.append(f"BN fluctuation      {regime:<10} {v:.5f}")
    text = "\n".join(lines)
    print(text)
    _write_json(out / "report.json", parts)
    return parts


COMMANDS = {
    "pretrain": cmd_pretrain,
    "search": cmd_search,
    "finetune": cmd_finetune,
    "analyze": cmd_analyze,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="metamix", description=__doc__.split("\n\n")[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config value (repeatable)")
    common.add_argument("--seed", type=int, help="seed for init, data order and probes")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("pretrain", parents=[common], help="train the full-precision model")
    s = sub.add_parser("search", parents=[common], help="bit selection (bit-meta + bit-search)")
    s.add_argument("--checkpoint", help="FP checkpoint (default <out>/fp.ckpt.npz)")
    f = sub.add_parser("finetune", parents=[common], help="fixed-bit weight training")
    f.add_argument("--checkpoint", help="starting checkpoint (default meta-state, or FP with --uniform)")
    f.add_argument("--assignment", help="assignment JSON (default <out>/assignment.json)")
    f.add_argument("--uniform", type=int, metavar="BITS",
                   help="fine-tune a uniform-bit baseline from the FP checkpoint instead")
    a = sub.add_parser("analyze", parents=[common], help="instrumentation CSVs")
    a.add_argument("--checkpoint", help="FP checkpoint for the BN traces")
    sub.add_parser("report", parents=[common], help="summarise the artifacts of a run")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = RunConfig.load(args.config, args.set, seed=args.seed, out=args.out)
    except ConfigError as e:
        print(f"metamix: config error: {e}", file=sys.stderr)
        return 2
    cfg.out.mkdir(parents=True, exist_ok=True)
    _atomic_text(cfg.out / f"{args.command}.config.ini", cfg.to_text())
    try:
        result = COMMANDS[args.command](cfg, args)
    except (OSError, ValueError, KeyError) as e:
        print(f"metamix {args.command}: error: {e}", file=sys.stderr)
        return 1
    if args.command != "report":
        print(json.dumps(result, indent=2, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
