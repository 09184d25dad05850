"""Command-line front end.

Every command reads the same YAML config (``-c``; omitted means all defaults)
and works below one output root (``paths.out`` or ``--out``)::

    world/      gen-world      ground-truth models per category
    data/       gen-data       source pool, target pool, target test maps
    sources/    train-sources  bootstrapped source models + training logs
    prior/      learn-prior    prior.mvp + prior.json (kind, mask, rank, ...)
    target/     train-target   model.mvm, train_log.csv, regularizer.json
    eval/       eval           detections.csv, metrics.csv, pr.csv, confusion.csv
    protocol/   protocol       results.csv (+ confusion.csv for sparse runs)
    report/     report         SVG figures rendered from eval/ and protocol/ CSVs

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .detection import Detection, EvaluationError, detect, evaluate
from .io import (DatasetFormatError, load_split_maps, load_windows, save_split,
                 sha256_file, write_detections, write_manifest)
from .model import ModelFormatError, load_model, save_model
from .priors import MaskSpec, PriorError, apply_mask, build_sparse_prior, compute_dense_sigma, \
    load_prior, save_prior
from .regularizer import RegularizerError, build_regularizer, factorize
from .svm import TrainingError, TrainLog, bootstrap_sources, stack_examples, train_transformed
from .synth import (World, factor_method, first_k, generate_world, prior_relations, run_protocol,
                    sample_maps, sample_windows)

log = logging.getLogger("mvprior")


class CommandError(RuntimeError):
    """Runtime failure (exit code 1)."""


def _fmt(x) -> str:
    return repr(float(x))


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        wr.writerows(rows)


def _read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class Context:
    def __init__(self, args):
        self.args = args
        self.cfg = cfgmod.load_config(args.config)
        self.built = cfgmod.build(self.cfg)
        self.root = Path(args.out or self.cfg["paths"]["out"])
        self.config_hash = sha256_file(args.config) if args.config else "defaults"

    @property
    def layout(self):
        return self.built.layout

    def output(self, name: str) -> Path:
        d = self.root / name
        if d.exists() and any(d.iterdir()):
            if not self.args.force:
                raise CommandError(f"{d} exists; pass --force to overwrite")
            shutil.rmtree(d)
        d.mkdir(parents=True, exist_ok=True)
        return d

    def need(self, rel: str) -> Path:
        p = self.root / rel
        if not p.exists():
            raise CommandError(f"missing upstream artifact {p}")
        return p

    def manifest(self, d: Path, seeds: dict, **extra):
        write_manifest(d, seeds, dict(command=self.args.command, config_sha256=self.config_hash,
                                      **extra))


def _model_name(category: str) -> str:
    return category.replace("/", "_")


def _load_world(ctx: Context) -> World:
    d = ctx.need("world/models")
    models = {}
    for p in sorted(d.glob("*.mvm")):
        m = load_model(p)
        if m.layout.n_params != ctx.layout.n_params:
            raise cfgmod.ConfigError("layout", f"world model {p.name} does not match the config layout")
        models[m.meta] = m
    return World(ctx.built.world, None, {}, models)


# -- commands ---------------------------------------------------------------------------------

def cmd_gen_world(ctx: Context):
    out = ctx.output("world")
    world = generate_world(ctx.built.world)
    (out / "models").mkdir()
    for name, model in world.models.items():
        save_model(model, out / "models" / f"{_model_name(name)}.mvm")
    ctx.manifest(out, {"world.seed": ctx.cfg["world"]["seed"]},
                 categories=list(world.models))


def cmd_gen_data(ctx: Context):
    world = _load_world(ctx)
    d = ctx.cfg["data"]
    out = ctx.output("data")
    src_rng, tgt_rng, test_rng = (np.random.default_rng(s)
                                  for s in np.random.SeedSequence(d["seed"]).spawn(3))
    src = sample_windows(world, "source", d["source_pool"], d["neg_count"], src_rng)
    tgt = sample_windows(world, "target", d["target_pool"], d["neg_count"], tgt_rng)
    maps, gts = sample_maps(world, "target", d["n_maps"], d["per_map"], test_rng,
                            tuple(d["map_shape"]), d["cell_size"])
    save_split(out / "source", windows=src)
    save_split(out / "target" / "train", windows=tgt)
    save_split(out / "target" / "test", maps, gts)
    ctx.manifest(out, {"data.seed": d["seed"]}, n_test_boxes=len(gts))


def cmd_train_sources(ctx: Context):
    ws = load_windows(ctx.need("data/source/windows.win"))
    pr = ctx.cfg["prior"]
    out = ctx.output("sources")
    logs: list = []
    models = bootstrap_sources(ws, ctx.layout, pr["n_sources"], pr["source_k"], pr["seed"],
                               ctx.built.trainer, logs)
    (out / "logs").mkdir()
    for i, (m, tl) in enumerate(zip(models, logs)):
        save_model(m, out / f"source_{i:03d}.mvm")
        tl.write_csv(out / "logs" / f"source_{i:03d}.csv")
    ctx.manifest(out, {"prior.seed": pr["seed"], "trainer.seed": ctx.cfg["trainer"]["seed"]})


def cmd_learn_prior(ctx: Context):
    pr, g = ctx.cfg["prior"], ctx.cfg["geometry"]
    info = dict(kind=pr["kind"], mask=pr["mask"], data_views=list(pr["data_views"]))
    if pr["kind"] == "none":
        out = ctx.output("prior")
    else:
        paths = sorted(ctx.need("sources").glob("source_*.mvm"))
        if not paths:
            raise CommandError("no source models under sources/")
        sources = [load_model(p) for p in paths]
        if sources[0].layout != ctx.layout:
            raise cfgmod.ConfigError("layout", "source models were trained with a different layout")
        out = ctx.output("prior")
        if pr["kind"] == "dense":
            sigma = compute_dense_sigma(sources)
        else:
            rels = prior_relations(pr["kind"], ctx.layout, ctx.built.ellipsoid, ctx.built.camera,
                                   g["patch_radius"], g["max_partners"])
            sigma = build_sparse_prior(sources, rels, pr["kind"], pr["mean_over"])
        if pr["mask"] != "none":
            sigma = apply_mask(sigma, MaskSpec(pr["mask"], tuple(pr["data_views"])))
        save_prior(sigma, out / "prior.mvp")
        info.update(rank=sigma.rank(), P=ctx.layout.n_params, n_sources=len(sources),
                    n_blocks=len(sigma.blocks))
    (out / "prior.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    ctx.manifest(out, {"prior.seed": pr["seed"]})


def _target_counts(ctx: Context):
    t, d = ctx.cfg["target"], ctx.cfg["data"]
    if t["availability"] is not None:
        return list(t["availability"])
    k = d["target_pool"] if t["k"] == "all" else t["k"]
    return [k] * ctx.layout.views


def cmd_train_target(ctx: Context):
    ws = load_windows(ctx.need("data/target/train/windows.win"))
    info = json.loads(ctx.need("prior/prior.json").read_text())
    counts = _target_counts(ctx)
    have = [int(np.sum(ws.views == v)) for v in range(ctx.layout.views)]
    if any(c > h for c, h in zip(counts, have)):
        raise CommandError(f"target pool has {have} positives per view, asked for {counts}")
    sub = first_k(ws, ctx.layout, counts)
    if sub.features.shape[1:] != (ctx.layout.rows, ctx.layout.cols, ctx.layout.cell_dim):
        raise cfgmod.ConfigError("layout", "target windows do not match the config layout")
    fac, reg_info = None, {"kind": "none", "lambda": 0.0}
    if info["kind"] != "none":
        try:
            sigma = load_prior(ctx.need("prior/prior.mvp"), ctx.layout, info.get("data_views", ()))
        except PriorError as exc:
            raise cfgmod.ConfigError("layout", f"prior does not fit the target layout: {exc}") from exc
        reg = build_regularizer(sigma)
        method = ctx.cfg["prior"]["factorization"]
        method = factor_method(info["kind"]) if method == "auto" else method
        fac = factorize(reg, method)
        reg_info = dict(kind=info["kind"], factorization=method, condition=fac.condition,
                        **reg.summary())
    out = ctx.output("target")
    tl = TrainLog()
    model = train_transformed(stack_examples(sub, ctx.layout), fac, ctx.built.trainer,
                              meta=f"target prior={info['kind']}", train_log=tl)
    save_model(model, out / "model.mvm")
    tl.write_csv(out / "train_log.csv")
    (out / "regularizer.json").write_text(json.dumps(reg_info, indent=2, sort_keys=True,
                                                     default=float) + "\n")
    ctx.manifest(out, {"trainer.seed": ctx.cfg["trainer"]["seed"]}, counts=counts)


def read_detections(path) -> list[Detection]:
    out = []
    for r in _read_csv(path):
        out.append(Detection((float(r["x"]), float(r["y"]), float(r["w"]), float(r["h"])),
                             float(r["score"]), int(r["view"]), int(r["model_id"]), r["image_id"]))
    return out


def cmd_eval(ctx: Context):
    maps, gts = load_split_maps(ctx.need("data/target/test"))
    e = ctx.cfg["eval"]
    if ctx.args.detections:
        dets = read_detections(ctx.args.detections)
        name = Path(ctx.args.detections).stem
    else:
        model_path = Path(ctx.args.model) if ctx.args.model else ctx.need("target/model.mvm")
        model = load_model(model_path)
        if model.layout != ctx.layout:
            raise cfgmod.ConfigError("layout", f"{model_path} does not match the config layout")
        thr = -np.inf if e["score_threshold"] is None else e["score_threshold"]
        dets = [d for fm in maps for d in detect(model, fm, thr, e["nms_iou"])]
        name = model.meta or model_path.stem
    rep = evaluate(dets, gts, ctx.layout.views, e["iou"])
    out = ctx.output("eval")
    write_detections(dets, out / "detections.csv")
    row = rep.as_row()
    _write_csv(out / "metrics.csv", ["name", "measure", "value"],
               [[name, k, _fmt(v)] for k, v in row.items()]
               + [[name, "n_gt", _fmt(rep.n_gt)], [name, "n_tp", _fmt(rep.n_tp)]])
    _write_csv(out / "pr.csv", ["name", "rank", "recall", "precision"],
               [[name, i + 1, _fmt(r), _fmt(p)] for i, (r, p) in enumerate(zip(rep.recall, rep.precision))])
    V = ctx.layout.views
    _write_csv(out / "confusion.csv", ["name", "true_bin", "pred_bin", "count"],
               [[name, t, p, int(rep.confusion[t, p])] for t in range(V) for p in range(V)])
    ctx.manifest(out, {}, **{k: float(v) for k, v in row.items()})
    print(" ".join(f"{k}={v:.4f}" for k, v in row.items()))


def cmd_protocol(ctx: Context):
    spec = cfgmod.protocol_spec(ctx.cfg)
    world = generate_world(ctx.built.world)
    out = ctx.output("protocol")

    def progress(rep, method, label, values):
        log.info("rep %d %s k=%s %s", rep, method.name, label,
                 " ".join(f"{k}={v:.3f}" for k, v in values.items()))

    rows = run_protocol(spec, world, progress)
    _write_csv(out / "results.csv", ["protocol", "method", "k", "repetition", "measure", "value"],
               [[r["protocol"], r["method"], r["k"], r["repetition"], r["measure"], _fmt(r["value"])]
                for r in rows])
    conf_rows = []
    for r in rows:
        if "confusion" in r:
            C = r["confusion"]
            conf_rows += [[r["method"], r["k"], t, p, int(C[t, p])]
                          for t in range(C.shape[0]) for p in range(C.shape[1])]
    if conf_rows:
        _write_csv(out / "confusion.csv", ["name", "k", "true_bin", "pred_bin", "count"], conf_rows)
    ctx.manifest(out, {"world.seed": ctx.cfg["world"]["seed"], "protocol.seed": spec.seed})


def _confusion_from_rows(rows, V):
    C = np.zeros((V, V), dtype=np.int64)
    for r in rows:
        C[int(r["true_bin"]), int(r["pred_bin"])] = int(r["count"])
    return C


def render_report(eval_dir: Path | None, protocol_dir: Path | None, out: Path) -> list[Path]:
    """Render every figure derivable from the given CSV directories; return written paths."""
    from . import plotting

    written = []
    if eval_dir is not None:
        curves: dict = {}
        for r in _read_csv(eval_dir / "pr.csv"):
            rec, prec = curves.setdefault(r["name"], ([], []))
            rec.append(float(r["recall"]))
            prec.append(float(r["precision"]))
        curves = {k: (np.array(a), np.array(b)) for k, (a, b) in curves.items()}
        plotting.pr_figure(curves, out / "pr_curve.svg")
        written.append(out / "pr_curve.svg")
        conf_rows = _read_csv(eval_dir / "confusion.csv")
        V = max(int(r["true_bin"]) for r in conf_rows) + 1
        plotting.confusion_figure(_confusion_from_rows(conf_rows, V), out / "confusion.svg",
                                  conf_rows[0]["name"])
        written.append(out / "confusion.svg")
    if protocol_dir is not None:
        rows = [r for r in _read_csv(protocol_dir / "results.csv")
                if r["repetition"] in ("mean", "std")]
        stats: dict = {}
        order: dict = {}
        for r in rows:
            stats[(r["method"], r["k"], r["measure"], r["repetition"])] = float(r["value"])
            order.setdefault(r["method"], [])
            if r["k"] not in order[r["method"]]:
                order[r["method"]].append(r["k"])
        series = {m: [(k, stats[(m, k, "AP", "mean")], stats[(m, k, "AP", "std")],
                       stats[(m, k, "VP", "mean")], stats[(m, k, "VP", "std")]) for k in ks]
                  for m, ks in order.items()}
        plotting.kshot_figure(series, out / "kshot.svg")
        written.append(out / "kshot.svg")
        conf_path = protocol_dir / "confusion.csv"
        if conf_path.exists():
            groups: dict = {}
            for r in _read_csv(conf_path):
                groups.setdefault((r["name"], r["k"]), []).append(r)
            for (name, k), grp in sorted(groups.items()):
                V = max(int(r["true_bin"]) for r in grp) + 1
                p = out / f"confusion_{name}_{k}.svg"
                plotting.confusion_figure(_confusion_from_rows(grp, V), p, f"{name} (k={k})")
                written.append(p)
    return written


def cmd_report(ctx: Context):
    ev = ctx.root / "eval"
    pr = ctx.root / "protocol"
    ev = ev if (ev / "metrics.csv").exists() else None
    pr = pr if (pr / "results.csv").exists() else None
    if ev is None and pr is None:
        raise CommandError(f"nothing to report under {ctx.root}: run eval or protocol first")
    out = ctx.output("report")
    for p in render_report(ev, pr, out):
        log.info("wrote %s", p)
    if ev is not None:
        shutil.copy(ev / "metrics.csv", out / "metrics.csv")
    if pr is not None:
        shutil.copy(pr / "results.csv", out / "results.csv")


COMMANDS = {
    "gen-world": cmd_gen_world,
    "gen-data": cmd_gen_data,
    "train-sources": cmd_train_sources,
    "learn-prior": cmd_learn_prior,
    "train-target": cmd_train_target,
    "eval": cmd_eval,
    "report": cmd_report,
    "protocol": cmd_protocol,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mvprior", description="Multi-view template priors: "
                                 "synthetic data, training, evaluation and reports.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("-c", "--config", help="YAML config (defaults when omitted)")
        p.add_argument("-o", "--out", help="output root (overrides paths.out)")
        p.add_argument("--force", action="store_true", help="overwrite existing output")
        if name == "eval":
            g = p.add_mutually_exclusive_group()
            g.add_argument("--model", help="model file (default: <out>/target/model.mvm)")
            g.add_argument("--detections", help="evaluate a detections CSV instead of a model")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.config and not Path(args.config).is_file():
            raise cfgmod.ConfigError("<file>", f"config file {args.config} not found")
        ctx = Context(args)
        COMMANDS[args.command](ctx)
    except cfgmod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (CommandError, OSError, DatasetFormatError, ModelFormatError, PriorError,
            RegularizerError, TrainingError, EvaluationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
