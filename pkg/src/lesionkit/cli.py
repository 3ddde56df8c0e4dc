"""``lesionkit`` command-line entry point.

Exit codes: 0 success, 1 validation error, 2 I/O error.  Every run writes
a ``run.json`` echoing the fully resolved parameters.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .components import CONNECTIVITIES, filter_small_components
from .gradcheck import check_objective, check_objective_logits, random_instance
from .losses import DEFAULT_FOCAL_EXPONENT, OBJECTIVES, LossConfig, objective_loss
from .metrics import HIT_RULES, MetricConfig, SCALAR_FIELDS, aggregate, evaluate_case
from .optim import OptimConfig, compare_objectives, optimize, rows_to_csv, rows_to_json, sweep
from .phantom import PhantomSpec, benchmark_spec, generate, save_phantom
from .volume import Volume, VolumeFormatError, load_volume, save_volume

GRAD_TOLERANCE = 1e-5
SEED_ENV = "LESIONKIT_SEED"

LOSS_FLAGS = {
    "alpha": float,
    "beta": float,
    "gamma": float,
    "delta": float,
    "eps_weight": float,
    "w_bg": float,
    "eps_mil": float,
    "lambda_cat_final": float,
    "lambda_mil": float,
    "warmup_T": int,
}
METRIC_FLAGS = {
    "small_lesion_tau": ("--tau", int),
    "hit_rule": ("--hit-rule", str),
    "eps_metric": ("--eps-metric", float),
    "near_distance_mm": ("--near-distance-mm", float),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def __init__(self, *args, **kwargs):
        kwargs.setdefault("allow_abbrev", False)
        super().__init__(*args, **kwargs)

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _env_seed(seed):
    env = os.environ.get(SEED_ENV)
    return int(env) if env not in (None, "") else seed


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"cannot parse config {path}: {exc}") from None


def _add_loss_flags(p):
    d = LossConfig()
    for name, typ in LOSS_FLAGS.items():
        p.add_argument(f"--{name.replace('_', '-')}", dest=name, type=typ, default=None,
                       help=f"loss {name} (default: {getattr(d, name)})")
    p.add_argument("--connectivity", type=int, choices=CONNECTIVITIES, default=None,
                   help="lesion connectivity (default: 26)")
    p.add_argument("--config", default=None, help="JSON config file (default: none)")


def _resolve_loss(args, base: dict | None = None) -> LossConfig:
    data = dict(base or {})
    for name in list(LOSS_FLAGS) + ["connectivity"]:
        value = getattr(args, name, None)
        if value is not None:
            data[name] = value
    return LossConfig.from_dict(data)


def _add_metric_flags(p, with_config=True):
    d = MetricConfig()
    for name, (flag, typ) in METRIC_FLAGS.items():
        kw = {"choices": HIT_RULES} if name == "hit_rule" else {}
        p.add_argument(flag, dest=name, type=typ, default=None,
                       help=f"{name} (default: {getattr(d, name)})", **kw)
    p.add_argument("--size-bins", default=None, help="comma-separated voxel-count edges (default: 10,50,200,inf)")
    if with_config:
        p.add_argument("--connectivity", type=int, choices=CONNECTIVITIES, default=None,
                       help="lesion connectivity (default: 26)")
        p.add_argument("--config", default=None, help="JSON metric config file (default: none)")


def _resolve_metric(args, base: dict | None = None) -> MetricConfig:
    data = dict(base or {})
    for name in METRIC_FLAGS:
        value = getattr(args, name, None)
        if value is not None:
            data[name] = value
    if getattr(args, "size_bins", None):
        data["size_bins"] = [float(x) for x in args.size_bins.split(",")]
    if getattr(args, "connectivity", None) is not None:
        data["connectivity"] = args.connectivity
    return MetricConfig.from_dict(data)


def _write_run_json(args, default_dir, params: dict):
    path = Path(args.run_json) if args.run_json else Path(default_dir) / "run.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    record = {"command": args.command, "version": __version__, "params": params}
    path.write_text(json.dumps(record, indent=2, default=_json_default) + "\n")


def _json_default(obj):
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, float) and math.isinf(obj):
        return "inf"
    raise TypeError(f"not serializable: {type(obj)}")


def _write_text(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


# --- subcommands -----------------------------------------------------------


def cmd_gen(args):
    data = _read_json(args.spec)
    n_cases = int(data.pop("n_cases", 1))
    prefix = data.pop("name_prefix", "case")
    spec = PhantomSpec.from_dict(data)
    seed = _env_seed(args.seed if args.seed is not None else spec.seed)
    out = Path(args.out_dir)
    names = []
    for i in range(n_cases):
        name = f"{prefix}{i:03d}"
        save_phantom(generate(spec.with_seed(seed + i)), out, name)
        names.append(name)
    resolved = spec.with_seed(seed).to_dict()
    resolved.update(n_cases=n_cases, name_prefix=prefix)
    _write_run_json(args, out, {"spec": resolved, "cases": names, "out_dir": str(out)})
    print(f"wrote {n_cases} phantom(s) to {out}")


def cmd_loss(args):
    cfg = _resolve_loss(args, _read_json(args.config) if args.config else None)
    p = load_volume(args.pred)
    gt = load_volume(args.gt)
    lv = objective_loss(args.objective, p.values(), gt.values(), cfg, args.step,
                        focal_exponent=args.focal_exponent)
    if args.grad_out:
        save_volume(Volume(lv.grad, p.spacing), args.grad_out)
    params = {"pred": args.pred, "gt": args.gt, "objective": args.objective, "step": args.step,
              "focal_exponent": args.focal_exponent, "loss_cfg": cfg.to_dict(), "grad_out": args.grad_out,
              "value": lv.value}
    _write_run_json(args, Path(args.grad_out).parent if args.grad_out else ".", params)
    print(f"{args.objective} loss = {lv.value!r}")


def cmd_grad_check(args):
    cfg = _resolve_loss(args, _read_json(args.config) if args.config else None)
    seed = _env_seed(args.seed)
    rng = np.random.default_rng(seed)
    p, gt = random_instance(rng, (args.dims,) * 3)
    if args.space == "logit":
        z = np.log(p) - np.log1p(-p)
        res = check_objective_logits(args.objective, z, gt, cfg, args.step, focal_exponent=args.focal_exponent)
    else:
        res = check_objective(args.objective, p, gt, cfg, args.step, focal_exponent=args.focal_exponent)
    ok = res.max_rel_error < GRAD_TOLERANCE
    params = {"objective": args.objective, "dims": args.dims, "seed": seed, "space": args.space, "step": args.step,
              "focal_exponent": args.focal_exponent, "loss_cfg": cfg.to_dict(),
              "max_rel_error": res.max_rel_error, "checked": res.checked, "tolerance": GRAD_TOLERANCE}
    _write_run_json(args, ".", params)
    print(f"objective={args.objective} dims={args.dims} seed={seed} checked={res.checked} "
          f"max_rel_error={res.max_rel_error:.3e} {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def _stems(directory):
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"not a directory: {directory}")
    return {f.name[:-4]: f for f in sorted(directory.glob("*.npy"))}


def _eval_one(task):
    pred_path, gt_path, cfg = task
    pred, gt = load_volume(pred_path), load_volume(gt_path)
    if pred.spacing != gt.spacing:
        raise ValueError(f"spacing mismatch between {pred_path} and {gt_path}")
    return evaluate_case(pred, gt, cfg)


def cmd_eval(args):
    cfg = _resolve_metric(args, _read_json(args.config) if args.config else None)
    preds, gts = _stems(args.pred), _stems(args.gt)
    unmatched = sorted(set(preds) ^ set(gts))
    if unmatched:
        raise ValueError(f"unmatched case stems: {', '.join(unmatched)}")
    stems = sorted(preds)
    tasks = [(preds[s], gts[s], cfg) for s in stems]
    reports = _map(_eval_one, tasks, args.jobs)

    rows = [{"case": s, **r.to_row()} for s, r in zip(stems, reports)]
    summary = aggregate(reports)
    columns = list(rows[0]) if rows else ["case", *SCALAR_FIELDS]
    mean_row = {"case": "__mean__", **{c: summary[c]["mean"] for c in columns if c != "case"}}
    std_row = {"case": "__std__", **{c: summary[c]["std"] for c in columns if c != "case"}}
    _write_text(args.out, rows_to_csv(rows + [mean_row, std_row]))
    if args.json:
        payload = {"config": cfg.to_dict(), "cases": rows, "summary": summary}
        _write_text(args.json, json.dumps(payload, indent=2, default=_json_default) + "\n")
    _write_run_json(args, Path(args.out).parent, {"pred": args.pred, "gt": args.gt, "out": args.out,
                                                  "json": args.json, "jobs": args.jobs,
                                                  "metric_cfg": cfg.to_dict(), "cases": stems})
    print(f"evaluated {len(stems)} case(s) -> {args.out}")


def cmd_postprocess(args):
    vol = load_volume(getattr(args, "in"))
    out = filter_small_components(vol, args.min_size, args.connectivity)
    out_path = args.out or str(Path(getattr(args, "in")).with_name(Path(getattr(args, "in")).name[:-4] + ".pp.npy"))
    save_volume(out, out_path)
    _write_run_json(args, Path(out_path).parent, {"in": getattr(args, "in"), "out": out_path,
                                                  "min_size": args.min_size, "connectivity": args.connectivity})
    print(f"kept {int(out.data.sum())} of {int(vol.values().sum())} voxels -> {out_path}")


def _add_optim_flags(p):
    d = OptimConfig()
    p.add_argument("--steps", type=int, default=None, help=f"descent steps (default: {d.steps})")
    p.add_argument("--lr", dest="learning_rate", type=float, default=None, help=f"learning rate (default: {d.learning_rate})")
    p.add_argument("--init-logit", type=float, default=None, help=f"initial logit (default: {d.init_logit})")
    p.add_argument("--threshold", type=float, default=None, help=f"binarization threshold (default: {d.threshold})")
    p.add_argument("--record-every", type=int, default=None, help=f"trace interval (default: {d.record_every})")
    p.add_argument("--focal-exponent", type=float, default=None, help=f"focal Tversky exponent (default: {d.focal_exponent})")
    p.add_argument("--tau", dest="small_lesion_tau", type=int, default=None, help="small-lesion threshold in voxels (default: 50)")
    _add_loss_flags(p)


def _resolve_optim(args, **overrides) -> OptimConfig:
    data = _read_json(args.config) if args.config else {}
    loss_data = data.pop("loss_cfg", {}) or {}
    metric_data = data.pop("metric_cfg", {}) or {}
    for key in ("steps", "learning_rate", "init_logit", "threshold", "record_every", "focal_exponent"):
        value = getattr(args, key, None)
        if value is not None:
            data[key] = value
    data.update(overrides)
    if getattr(args, "small_lesion_tau", None) is not None:
        metric_data["small_lesion_tau"] = args.small_lesion_tau
    steps = int(data.get("steps", OptimConfig.steps))
    loss_data.setdefault("warmup_T", max(1, steps // 10))
    data["loss_cfg"] = _resolve_loss(args, loss_data)
    data["metric_cfg"] = MetricConfig.from_dict(metric_data)
    return OptimConfig.from_dict(data)


def _phantom_set(args):
    first = _env_seed(args.first_seed)
    if args.phantom_spec:
        spec = PhantomSpec.from_dict(_read_json(args.phantom_spec))
        specs = [spec.with_seed(first + i) for i in range(args.phantoms)]
    else:
        specs = [benchmark_spec(first + i, args.lcnr) for i in range(args.phantoms)]
    return [generate(s) for s in specs], [s.to_dict() for s in specs]


def cmd_optimize(args):
    if args.gt:
        gt = load_volume(args.gt)
        image = load_volume(args.image) if args.image else gt
        source = {"gt": args.gt, "image": args.image}
    else:
        seed = _env_seed(args.phantom_seed)
        ph = generate(benchmark_spec(seed, args.lcnr))
        image, gt = ph.image, ph.mask
        source = {"phantom": ph.spec.to_dict()}
    overrides = {"objective": args.objective} if args.objective else {}
    cfg = _resolve_optim(args, **overrides)
    prob, trace = optimize(image, gt, cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_volume(prob, out / "prob.npy")
    _write_text(out / "trace.csv", trace.to_csv())
    _write_run_json(args, out, {**source, "optim_cfg": cfg.to_dict(), "out_dir": str(out)})
    final = trace.entries[-1]
    print(f"{cfg.objective}: step {final.step} loss {final.loss:.6g} dice {final.report.dice:.4f}")


def _table_out(args, rows, params):
    _write_text(args.out, rows_to_csv(rows))
    if args.json:
        _write_text(args.json, rows_to_json(rows))
    _write_run_json(args, Path(args.out).parent, params)


def _add_phantom_set_flags(p):
    p.add_argument("--phantoms", type=int, default=10, help="number of seeded phantoms (default: 10)")
    p.add_argument("--first-seed", type=int, default=0, help="seed of the first phantom (default: 0)")
    p.add_argument("--lcnr", type=float, default=1.0, help="lesion contrast-to-noise ratio (default: 1.0)")
    p.add_argument("--phantom-spec", default=None, help="JSON phantom spec replacing the benchmark (default: none)")
    p.add_argument("--out", required=True, help="CSV output path")
    p.add_argument("--json", default=None, help="optional JSON output path (default: none)")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes (default: 1)")


def cmd_compare(args):
    phantoms, specs = _phantom_set(args)
    objectives = [o.strip() for o in args.objectives.split(",") if o.strip()]
    base = _resolve_optim(args)
    configs = [base.replace(objective=o) for o in objectives]
    rows = compare_objectives(phantoms, configs, args.jobs)
    _table_out(args, rows, {"objectives": objectives, "optim_cfg": base.to_dict(), "phantoms": specs,
                            "jobs": args.jobs})
    print(f"compared {len(objectives)} objective(s) on {len(phantoms)} phantom(s) -> {args.out}")


def cmd_sweep(args):
    phantoms, specs = _phantom_set(args)
    cats = [float(x) for x in args.grid_lambda_cat.split(",")]
    mils = [float(x) for x in args.grid_lambda_mil.split(",")]
    base = _resolve_optim(args, objective="catmil")
    rows = sweep(phantoms, cats, mils, base, args.jobs)
    _table_out(args, rows, {"lambda_cat_values": cats, "lambda_mil_values": mils, "optim_cfg": base.to_dict(),
                            "phantoms": specs, "jobs": args.jobs})
    print(f"swept {len(rows)} weight pair(s) -> {args.out}")


def _map(fn, tasks, jobs):
    if jobs > 1 and len(tasks) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, tasks))
    return [fn(t) for t in tasks]


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    parser = _Parser(prog="lesionkit", description="Component-adaptive lesion losses, metrics and experiments.")
    parser.add_argument("--version", action="version", version=f"lesionkit {__version__}")
    parser.add_argument("--run-json", default=None,
                        help="where to write run.json (default: next to the command's output)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate seeded phantoms", formatter_class=fmt)
    p.add_argument("--spec", required=True, help="phantom spec JSON (PhantomSpec fields, optional n_cases, name_prefix)")
    p.add_argument("--out-dir", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override the phantom seed (default: value in --spec)")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("loss", help="evaluate an objective and its gradient")
    p.add_argument("--pred", required=True, help="probability volume (.npy)")
    p.add_argument("--gt", required=True, help="ground-truth mask (.npy)")
    p.add_argument("--objective", choices=OBJECTIVES, default="catmil", help="objective (default: catmil)")
    p.add_argument("--step", type=int, default=0, help="training step for the warm-up schedule (default: 0)")
    p.add_argument("--focal-exponent", type=float, default=DEFAULT_FOCAL_EXPONENT,
                   help=f"focal Tversky exponent (default: {DEFAULT_FOCAL_EXPONENT})")
    p.add_argument("--grad-out", default=None, help="write dL/dp here (default: not written)")
    _add_loss_flags(p)
    p.set_defaults(func=cmd_loss)

    p = sub.add_parser("grad-check", help="finite-difference check of an objective's gradient")
    p.add_argument("--objective", choices=OBJECTIVES, default="catmil", help="objective (default: catmil)")
    p.add_argument("--dims", type=int, default=6, help="cube edge length of the random instance (default: 6)")
    p.add_argument("--seed", type=int, default=0, help="instance seed (default: 0)")
    p.add_argument("--space", choices=("prob", "logit"), default="prob", help="differentiate w.r.t. (default: prob)")
    p.add_argument("--step", type=int, default=0, help="training step for the warm-up schedule (default: 0)")
    p.add_argument("--focal-exponent", type=float, default=DEFAULT_FOCAL_EXPONENT,
                   help=f"focal Tversky exponent (default: {DEFAULT_FOCAL_EXPONENT})")
    _add_loss_flags(p)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("eval", help="evaluate prediction masks against ground truth")
    p.add_argument("--pred", required=True, help="directory of predicted masks")
    p.add_argument("--gt", required=True, help="directory of ground-truth masks (paired by file stem)")
    p.add_argument("--out", required=True, help="CSV report path")
    p.add_argument("--json", default=None, help="optional JSON report path (default: none)")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes (default: 1)")
    _add_metric_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("postprocess", help="remove small connected components")
    p.add_argument("--in", required=True, help="input mask (.npy)")
    p.add_argument("--out", default=None, help="output mask (default: <in>.pp.npy)")
    p.add_argument("--min-size", type=int, default=5, help="minimum component size in voxels (default: 5)")
    p.add_argument("--connectivity", type=int, choices=CONNECTIVITIES, default=26, help="connectivity (default: 26)")
    p.set_defaults(func=cmd_postprocess)

    p = sub.add_parser("optimize", help="direct logit optimisation on one case")
    p.add_argument("--gt", default=None, help="ground-truth mask (default: generate a benchmark phantom)")
    p.add_argument("--image", default=None, help="intensity volume (default: none)")
    p.add_argument("--phantom-seed", type=int, default=0, help="benchmark phantom seed when --gt is absent (default: 0)")
    p.add_argument("--lcnr", type=float, default=1.0, help="benchmark phantom lcnr (default: 1.0)")
    p.add_argument("--objective", choices=OBJECTIVES, default=None, help="objective (default: catmil)")
    p.add_argument("--out-dir", required=True, help="output directory for prob.npy, trace.csv, run.json")
    _add_optim_flags(p)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("compare", help="compare objectives on a seeded phantom set")
    p.add_argument("--objectives", default="dicece,tversky,focal_tversky,catmil",
                   help="comma-separated objectives (default: dicece,tversky,focal_tversky,catmil)")
    _add_phantom_set_flags(p)
    _add_optim_flags(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("sweep", help="CATMIL weight sensitivity sweep")
    p.add_argument("--grid-lambda-cat", default="0.1,0.2",
                   help="comma-separated lambda_cat_final values (default: 0.1,0.2)")
    p.add_argument("--grid-lambda-mil", default="0.1,0.2",
                   help="comma-separated lambda_mil values (default: 0.1,0.2)")
    _add_phantom_set_flags(p)
    _add_optim_flags(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        code = args.func(args)
        return 0 if code is None else int(code)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (VolumeFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, TypeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
