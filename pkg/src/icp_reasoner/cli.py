"""Command-line front end: gen-data, trace, train, eval, infer, report.

Every command takes ``--config FILE.toml``; keys of the section named after
the command (or of the top-level table) set option defaults, and explicit
flags override them. Unknown keys are rejected.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from . import _io
from .datasets import (
    DatasetError,
    RegistrationSample,
    fit_pair,
    gen_synthetic_set,
    load_centroid_scans,
    load_sample,
    serialize_sample,
    split_dataset,
)
from .evaluation import (
    EvalMode,
    Reference,
    build_report,
    classification_metrics,
    predict,
    reports_csv,
    reports_json,
)
from .geometry import GeometryError, PointCloud
from .icp import IcpConfig, Variant
from .nar.executor import infer
from .nar.model import CheckpointError, ModelConfig, Processor, load_checkpoint, save_checkpoint
from .nar.training import TrainingError, train
from .trajectory import (
    HintMode,
    TrajectoryParseError,
    deserialize_trajectory,
    normalize,
    record_trajectory,
    serialize_trajectory,
)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("icp_reasoner")


class ConfigError(ValueError):
    pass


# -- shared helpers ----------------------------------------------------------


def _read_manifest(data_dir: Path) -> dict:
    path = data_dir / "manifest.json"
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise DatasetError(f"{path}: no manifest; run gen-data first") from None


def _load_split(data_dir: Path, split: str) -> List[RegistrationSample]:
    manifest = _read_manifest(data_dir)
    names = ("train", "eval", "test") if split == "all" else (split,)
    tags = []
    for name in names:
        if name not in manifest["splits"]:
            raise DatasetError(f"manifest has no split {name!r}")
        tags += manifest["splits"][name]
    return [load_sample(data_dir / "samples" / f"{_safe(t)}.json") for t in tags]


def _safe(tag: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in tag)


def _icp_cfg(args) -> IcpConfig:
    return IcpConfig(Variant(args.variant), args.tolerance, args.max_iter, args.k_neighbors)


def _add_icp_args(p, defaults=True):
    p.add_argument("--variant", choices=[v.value for v in Variant],
                   default="p2p" if defaults else None)
    p.add_argument("--hints", choices=[h.value for h in HintMode],
                   default="p12" if defaults else None)
    p.add_argument("--tolerance", type=float, default=1e-10 if defaults else None)
    p.add_argument("--max-iter", type=int, default=50 if defaults else None)
    p.add_argument("--k-neighbors", type=int, default=5 if defaults else None)


# -- commands ----------------------------------------------------------------


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    if args.centroids:
        samples = []
        for f in args.centroids:
            samples += load_centroid_scans(f, args.pair_distance, args.pair_tolerance)
        split = split_dataset(samples, ratios=(args.ratios or (0.6, 0.2, 0.2)), seed=args.seed)
        source = {"kind": "centroids", "files": [str(f) for f in args.centroids],
                  "pair_distance": args.pair_distance, "pair_tolerance": args.pair_tolerance}
    else:
        counts = (args.train, args.eval, args.test)
        samples = gen_synthetic_set(sum(counts), args.n_points, args.seed,
                                    coord_range=args.coord_range, max_rot_deg=args.max_rot_deg,
                                    max_trans=args.max_trans)
        split = split_dataset(samples, counts=counts, seed=args.seed)
        source = {"kind": "synthetic", "n_points": args.n_points,
                  "coord_range": args.coord_range, "max_rot_deg": args.max_rot_deg,
                  "max_trans": args.max_trans}
    for part in split.parts().values():
        for s in part:
            _io.atomic_write(out / "samples" / f"{_safe(s.tag)}.json", serialize_sample(s))
    manifest = {"seed": args.seed, "source": source,
                "splits": {k: [s.tag for s in v] for k, v in split.parts().items()}}
    _io.atomic_write(out / "manifest.json", _io.dumps(manifest))
    log.info("wrote %d samples to %s", sum(len(v) for v in split.parts().values()), out)
    return 0


def cmd_trace(args) -> int:
    data = Path(args.data)
    out = Path(args.out)
    cfg = _icp_cfg(args)
    samples = _load_split(data, args.split)
    written = []
    for s in samples:
        src, tgt = fit_pair(s, args.n_nodes, args.seed)
        traj = record_trajectory(src, tgt, cfg, HintMode(args.hints), s.gt_transform,
                                 args.gt_optimisation)
        traj.meta["tag"] = s.tag
        if not args.raw:
            traj = normalize(traj)
        name = f"{_safe(s.tag)}.json"
        _io.atomic_write(out / name, serialize_trajectory(traj))
        written.append(name)
    manifest = {"data": str(data), "split": args.split, "variant": cfg.variant.value,
                "hints": args.hints, "gt_optimisation": bool(args.gt_optimisation),
                "t_max": cfg.max_iter, "n_nodes": args.n_nodes, "files": written}
    _io.atomic_write(out / "traces.json", _io.dumps(manifest))
    log.info("wrote %d trajectories to %s", len(written), out)
    return 0


def _load_traces(trace_dir: Path):
    manifest = json.loads((trace_dir / "traces.json").read_text())
    trajs = []
    for name in manifest["files"]:
        path = trace_dir / name
        try:
            traj = deserialize_trajectory(path.read_bytes())
        except TrajectoryParseError as exc:
            raise TrajectoryParseError(f"{path}: {exc}") from exc
        trajs.append(traj if traj.normalized else normalize(traj))
    return manifest, trajs


def cmd_train(args) -> int:
    manifest, trajs = _load_traces(Path(args.traces))
    cfg = ModelConfig(hidden_dim=args.hidden, processor=Processor(args.processor),
                      teacher_prob=args.teacher_prob, learn_rate=args.lr,
                      batch_size=args.batch_size, train_steps=args.steps,
                      grad_clip=args.grad_clip, scalar_loss_scale=args.alpha, seed=args.seed,
                      teacher_per_step=not args.teacher_per_trajectory)

    def progress(rec, _):
        if args.log_every and (rec.step + 1) % args.log_every == 0:
            log.info("step %d loss %.6g grad-norm %.4g", rec.step + 1, rec.loss, rec.grad_norm)

    params, history = train(trajs, cfg, callback=progress)
    out = Path(args.out)
    extra = {"variant": manifest["variant"], "hints": manifest["hints"],
             "gt_optimisation": manifest["gt_optimisation"], "t_max": manifest["t_max"],
             "n_nodes": trajs[0].n, "tolerance": trajs[0].meta.get("tolerance"),
             "k_neighbors": trajs[0].meta.get("k_neighbors")}
    _io.atomic_write(out, save_checkpoint(params, extra))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "loss", "grad_norm", "clipped_norm"])
    for r in history.records:
        w.writerow([r.step, format(r.loss, ".17g"), format(r.grad_norm, ".17g"),
                    format(r.clipped_norm, ".17g")])
    loss_csv = Path(args.loss_csv) if args.loss_csv else out.with_suffix(".loss.csv")
    _io.atomic_write(loss_csv, buf.getvalue())
    log.info("final loss %.6g; checkpoint %s", history.losses[-1] if history.records else
             float("nan"), out)
    return 0


def _load_model(path):
    try:
        return load_checkpoint(Path(path).read_bytes())
    except FileNotFoundError:
        raise CheckpointError(f"{path}: no such checkpoint") from None


def _icp_from(args, extra: dict) -> IcpConfig:
    return IcpConfig(Variant(args.variant or extra.get("variant", "p2p")),
                     args.tolerance if args.tolerance is not None else extra.get("tolerance", 1e-10),
                     args.max_iter or extra.get("t_max", 50),
                     args.k_neighbors or extra.get("k_neighbors", 5))


def cmd_eval(args) -> int:
    samples = _load_split(Path(args.data), args.split)
    mode = EvalMode(args.mode)
    extra, model = {}, None
    if mode is EvalMode.NAR:
        if not args.checkpoint:
            raise ConfigError("--mode nar needs --checkpoint")
        model, extra = _load_model(args.checkpoint)
    icp_cfg = _icp_from(args, extra)
    hints = HintMode(args.hints or extra.get("hints", "p12"))
    n = args.n_nodes or extra.get("n_nodes")
    preds = predict(samples, model if model is not None else icp_cfg, mode, icp_cfg, hints, n,
                    args.seed, bool(extra.get("gt_optimisation", False)))
    reports = [build_report(preds, mode, Reference.ALGORITHM),
               build_report(preds, mode, Reference.GROUND_TRUTH)]
    out = Path(args.out)
    _io.atomic_write(out / "eval.csv", reports_csv(reports, args.timing))
    _io.atomic_write(out / "eval.json", reports_json(reports, args.name, args.timing))
    gt = reports[1].summary()
    log.info("median RTE_GT %.3g, median RRE_GT %.3g, median F1_T %.3f",
             gt["rte"]["median"], gt["rre"]["median"], reports[0].summary()["f1"]["median"])
    return 0


def _cloud_doc(c: PointCloud):
    return {"points": c.points, "mask": c.mask.astype(int)}


def cmd_infer(args) -> int:
    model, extra = _load_model(args.checkpoint)
    if args.pair:
        samples = [load_sample(p) for p in args.pair]
    else:
        samples = _load_split(Path(args.data), args.split)
    n = extra.get("n_nodes")
    icp_cfg = _icp_from(args, extra)
    out = Path(args.out)
    rows = []
    for s in samples:
        src, tgt = fit_pair(s, n, args.seed)
        res = infer(src, tgt, model, t_max=icp_cfg.max_iter,
                    gt_step=bool(extra.get("gt_optimisation", False)))
        doc = {"tag": s.tag, "stop_step": res.stop_step, "terminated": res.terminated,
               "phase_labels": res.phase_labels,
               "correspondences": res.correspondences.index,
               "final_src": _cloud_doc(res.final_src), "final_tgt": _cloud_doc(res.final_tgt)}
        if args.compare:
            ref = record_trajectory(src, tgt, icp_cfg, HintMode(extra.get("hints", "p12")))
            f1 = classification_metrics(res.correspondences,
                                        ref.output["final_correspondences"]).f1
            doc["f1_vs_algorithm"] = f1
            rows.append((s.tag, f1))
        if not res.terminated:
            log.warning("%s: rollout hit the step cap without a stop signal", s.tag)
        _io.atomic_write(out / f"{_safe(s.tag)}.pred.json", _io.dumps(doc))
    for tag, f1 in rows:
        log.info("%s F1 vs algorithm %.3f", tag, f1)
    log.info("wrote %d predictions to %s", len(samples), out)
    return 0


def cmd_report(args) -> int:
    """Collect eval summaries into one table: benchmark x family x metric."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["benchmark", "family", "metric", "median", "q1", "q3", "iqr", "outliers",
                "count"])
    for path in args.inputs:
        doc = json.loads(Path(path).read_text())
        for bench, fams in doc.items():
            for fam, body in fams.items():
                for metric, st in body["metrics"].items():
                    if "median" not in st:
                        continue
                    w.writerow([bench, fam, metric] + [format(float(st[k]), ".17g") for k in
                                                       ("median", "q1", "q3", "iqr")]
                               + [st["outliers"], st["count"]])
    _io.atomic_write(Path(args.out), buf.getvalue())
    return 0


# -- parser and config -------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="icp-reasoner",
                                     description="Classical ICP traces and a learned executor.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="TOML file; flags override its values")
        p.add_argument("--seed", type=int, default=0)
        p.set_defaults(func=func)
        return p

    p = add("gen-data", cmd_gen_data, "write synthetic or centroid-scan samples")
    p.add_argument("--out", required=True)
    p.add_argument("--n-points", type=int, default=32)
    p.add_argument("--train", type=int, default=1000)
    p.add_argument("--eval", type=int, default=64)
    p.add_argument("--test", type=int, default=64)
    p.add_argument("--coord-range", type=float, default=40.0)
    p.add_argument("--max-rot-deg", type=float, default=45.0)
    p.add_argument("--max-trans", type=float, default=20.0)
    p.add_argument("--centroids", nargs="+", help="centroid scan files instead of synthetic data")
    p.add_argument("--pair-distance", type=float)
    p.add_argument("--pair-tolerance", type=float, default=0.5)
    p.add_argument("--ratios", type=float, nargs=3)

    p = add("trace", cmd_trace, "record algorithm trajectories")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=["train", "eval", "test", "all"], default="train")
    p.add_argument("--n-nodes", type=int)
    p.add_argument("--gt-optimisation", action="store_true")
    p.add_argument("--raw", action="store_true", help="store unnormalised trajectories")
    _add_icp_args(p)

    p = add("train", cmd_train, "fit the executor to recorded trajectories")
    p.add_argument("--traces", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--loss-csv")
    p.add_argument("--steps", type=int, default=10000)
    p.add_argument("--hidden", type=int, default=256)
    p.add_argument("--processor", choices=[v.value for v in Processor], default="triplet_mpnn")
    p.add_argument("--teacher-prob", type=float, default=0.1)
    p.add_argument("--teacher-per-trajectory", action="store_true")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--grad-clip", type=float, default=1.0)
    p.add_argument("--alpha", type=float, default=1.0, help="scalar loss scale")
    p.add_argument("--log-every", type=int, default=100)

    p = add("eval", cmd_eval, "score the executor or the classical algorithm")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=["train", "eval", "test", "all"], default="test")
    p.add_argument("--mode", choices=[m.value for m in EvalMode], default="nar")
    p.add_argument("--checkpoint")
    p.add_argument("--n-nodes", type=int)
    p.add_argument("--name", default="run", help="benchmark name in the JSON summary")
    p.add_argument("--timing", action="store_true", help="include wall-clock runtimes")
    _add_icp_args(p, defaults=False)

    p = add("infer", cmd_infer, "predict registrations with a trained executor")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pair", nargs="+", help="sample files")
    p.add_argument("--data")
    p.add_argument("--split", choices=["train", "eval", "test", "all"], default="test")
    p.add_argument("--compare", action="store_true", help="also report F1 against the algorithm")
    _add_icp_args(p, defaults=False)

    p = add("report", cmd_report, "merge eval summaries into one table")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    return parser


def _coerce(action: argparse.Action, key: str, value):
    if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true or false")
        return value
    if action.nargs in ("+", "*") or isinstance(action.nargs, int):
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list")
        items = value
    else:
        items = [value]
    out = []
    for v in items:
        if isinstance(v, bool) or isinstance(v, (dict, list)):
            raise ConfigError(f"{key}: unexpected value {v!r}")
        try:
            v = action.type(v) if action.type else v
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: cannot read {v!r}") from None
        if action.choices is not None and v not in action.choices:
            raise ConfigError(f"{key}: {v!r} not one of {list(action.choices)}")
        out.append(v)
    return out if items is value else out[0]


def apply_config(sub: argparse.ArgumentParser, command: str, path: str) -> None:
    """Install config-file values as defaults on ``sub``; unknown keys raise."""
    try:
        doc = tomllib.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"{path}: no such config file") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    commands = {"gen-data", "trace", "train", "eval", "infer", "report"}
    table = {k: v for k, v in doc.items() if k not in commands}
    section = doc.get(command, {})
    if not isinstance(section, dict):
        raise ConfigError(f"{path}: [{command}] must be a table")
    table.update(section)
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config", "func")}
    defaults = {}
    for key, value in table.items():
        dest = key.replace("-", "_")
        if dest not in actions:
            raise ConfigError(f"{path}: unknown key {key!r} for {command}")
        defaults[dest] = _coerce(actions[dest], key, value)
        actions[dest].required = False
    sub.set_defaults(**defaults)


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    try:
        if known.config:
            subs = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
            cmd = next((a for a in argv if a in subs.choices), None)
            if cmd not in subs.choices:
                parser.error("a command is required before --config")
            apply_config(subs.choices[cmd], cmd, known.config)
    except ConfigError as exc:
        print(f"icp-reasoner: config error: {exc}", file=sys.stderr)
        return 2
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose > 1 else logging.INFO
                        if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DatasetError, TrajectoryParseError, CheckpointError, TrainingError,
            GeometryError, ValueError, OSError) as exc:
        module = type(exc).__module__.rsplit(".", 1)[-1]
        print(f"icp-reasoner: error [{module}]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
