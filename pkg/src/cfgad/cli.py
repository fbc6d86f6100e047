"""Command-line entry points: train, evaluate, sweep, ablate, synth.

Sweeps run every (seed x ablation x sweep-axis) cell, appending to
metrics.csv as each cell finishes so partial results survive failures.
The only environment variable read is CFGAD_LOG_LEVEL.
"""

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from .config import build_graph, parse_config
from .pipeline import evaluate, load_state, save_state, train
from .plots import line_chart

log = logging.getLogger("cfgad")

CSV_COLUMNS = ("experiment_id", "seed", "ablation", "p", "alpha", "gamma",
               "macro_f1", "auc_roc", "auc_pr", "wall_clock_s")


def _setup_logging():
    level = os.environ.get("CFGAD_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")


def _cells(config, ablations=None):
    """Cross product of seeds, ablations, and any sweep axes."""
    base = config.pipeline
    ps = config.sweep_p or (base.hetero_fraction,)
    alphas = config.sweep_alpha or (base.alpha,)
    gammas = config.sweep_gamma or (base.gamma,)
    for ablation in (ablations or config.ablations):
        for p in ps:
            for alpha in alphas:
                for gamma in gammas:
                    for seed in config.seeds:
                        yield dict(ablation=ablation, hetero_fraction=p,
                                   alpha=alpha, gamma=gamma, seed=seed)


def _run_cell(config, cell):
    pipe_cfg = dataclasses.replace(config.pipeline, **cell)
    g = build_graph(config.dataset, cell["seed"])
    return train(g, pipe_cfg)


def _cell_id(config, cell):
    return (f"{config.name}/{cell['ablation']}/p{cell['hetero_fraction']}"
            f"/a{cell['alpha']}/g{cell['gamma']}/s{cell['seed']}")


def _write_plots(rows, out_dir):
    """Mean test metric vs p, one curve per ablation."""
    ps = sorted({r["p"] for r in rows})
    if len(ps) < 2:
        return
    for metric, fname in (("macro_f1", "macro_f1_vs_p.svg"),
                          ("auc_roc", "auc_roc_vs_p.svg")):
        series = []
        for ablation in sorted({r["ablation"] for r in rows}):
            pts = []
            for p in ps:
                vals = [r[metric] for r in rows
                        if r["ablation"] == ablation and r["p"] == p]
                if vals:
                    pts.append((p, sum(vals) / len(vals)))
            if pts:
                series.append((ablation, pts))
        svg = line_chart(series, title=f"test {metric} vs fraction of "
                         "manipulated heterophilic nodes",
                         xlabel="p", ylabel=metric)
        (Path(out_dir) / fname).write_text(svg)


def run_experiment(config, out_dir, ablations=None):
    """Execute all cells; returns the number of failed cells."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "metrics.csv"
    rows, failed = [], 0
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        fh.flush()
        for cell in _cells(config, ablations):
            cell_id = _cell_id(config, cell)
            try:
                result, _ = _run_cell(config, cell)
            except Exception:
                log.exception("cell %s failed", cell_id)
                failed += 1
                continue
            test = result.metrics["test"]
            row = dict(experiment_id=cell_id, seed=cell["seed"],
                       ablation=cell["ablation"], p=cell["hetero_fraction"],
                       alpha=cell["alpha"], gamma=cell["gamma"],
                       macro_f1=test["macro_f1"], auc_roc=test["auc_roc"],
                       auc_pr=test["auc_pr"], wall_clock_s=result.wall_clock)
            writer.writerow(row)
            fh.flush()
            rows.append(row)
            slug = cell_id.replace("/", "_")
            (out / f"{slug}.json").write_text(result.to_json())
            log.info("cell %s: test macro_f1=%.4f auc_roc=%.4f", cell_id,
                     test["macro_f1"], test["auc_roc"])
    if rows:
        _write_plots(rows, out)
    return failed


def cmd_train(args):
    config = parse_config(args.config)
    seed = args.seed if args.seed is not None else config.pipeline.seed
    overrides = {"seed": seed}
    if args.ablation:
        overrides["ablation"] = args.ablation
    pipe_cfg = dataclasses.replace(config.pipeline, **overrides)
    g = build_graph(config.dataset, seed)
    result, state = train(g, pipe_cfg)
    out = Path(args.out or config.out)
    out.mkdir(parents=True, exist_ok=True)
    save_state(state, out / "checkpoint.ckpt")
    (out / "run.json").write_text(result.to_json())
    print(json.dumps(result.metrics, indent=2))
    return 0


def cmd_evaluate(args):
    config = parse_config(args.config)
    state = load_state(args.checkpoint)
    seed = args.seed if args.seed is not None else state.config.seed
    g = build_graph(config.dataset, seed)
    mask = getattr(g.splits, args.split)
    metrics = evaluate(g, state, mask)
    print(json.dumps({args.split: metrics}, indent=2))
    return 0


def cmd_sweep(args, ablations=None):
    config = parse_config(args.config)
    failed = run_experiment(config, args.out or config.out, ablations)
    if failed:
        log.error("%d cell(s) failed; completed cells are preserved", failed)
        return 1
    return 0


def cmd_ablate(args):
    config = parse_config(args.config)
    ablations = (args.ablation,) if args.ablation else ("full", "two", "ano", "att", "ori")
    failed = run_experiment(config, args.out or config.out, ablations)
    return 1 if failed else 0


def cmd_synth(args):
    config = parse_config(args.config)
    seed = args.seed if args.seed is not None else 0
    spec = config.dataset.synthetic_spec(seed)
    from .graph import generate_synthetic
    g = generate_synthetic(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "edges.tsv", "w") as fh:
        fh.write("# src\tdst\n")
        for i, j in g.edges:
            fh.write(f"{i}\t{j}\n")
    with open(out / "features.csv", "w") as fh:
        for row in g.features.data:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")
    with open(out / "labels.csv", "w") as fh:
        fh.write("\n".join(str(int(v)) for v in g.labels) + "\n")
    print(f"wrote {g.n} nodes / {g.num_edges} edges to {out}")
    return 0


def main(argv=None):
    _setup_logging()
    parser = argparse.ArgumentParser(
        prog="cfgad",
        description="counterfactual neighborhood augmentation experiments")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--config", required=True, help="experiment config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None)
        p.add_argument("--ablation", default=None,
                       choices=("full", "two", "ano", "att", "ori"))
        if checkpoint:
            p.add_argument("--checkpoint", required=True)

    common(sub.add_parser("train", help="run one training cell"))
    pe = sub.add_parser("evaluate", help="metrics from a checkpoint")
    common(pe, checkpoint=True)
    pe.add_argument("--split", default="test", choices=("train", "val", "test"))
    common(sub.add_parser("sweep", help="run every configured cell"))
    common(sub.add_parser("ablate", help="run all five ablations"))
    ps = sub.add_parser("synth", help="write synthetic dataset files")
    ps.add_argument("--config", required=True)
    ps.add_argument("--seed", type=int, default=None)
    ps.add_argument("--out", required=True)

    args = parser.parse_args(argv)
    handlers = {"train": cmd_train, "evaluate": cmd_evaluate,
                "sweep": cmd_sweep, "ablate": cmd_ablate, "synth": cmd_synth}
    try:
        return handlers[args.verb](args)
    except (ValueError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
