"""``lesionbench`` command line.

Exit codes: 0 success, 2 bad arguments (including channel mismatches),
3 I/O or file-format errors, 4 grid mismatch.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from lesionbench import __version__
from lesionbench.classifier import CLASSIFIERS
from lesionbench.cohort import (
    ManifestCase,
    evaluate_method,
    load_manifest,
    manifest_dict,
    methods_of,
    missing_files,
)
from lesionbench.errors import LesionBenchError
from lesionbench.metrics import METRIC_NAMES, Counts, MetricsReport, evaluate_pair
from lesionbench.phantom import PhantomSpec, generate_case
from lesionbench.pipeline import (
    PRIOR,
    CascadeCase,
    PatchSpec,
    histogram_match,
    inject_prior,
    load_model,
    run_cascade,
    save_model,
    train_cascade,
)
from lesionbench.report import json_text, provenance, write_csv, write_json
from lesionbench.stats import aggregate, bland_altman, roc_sweep, wilcoxon_signed_rank
from lesionbench.volgrid import read_volume, write_volume

log = logging.getLogger("lesionbench")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_GRID = 0, 2, 3, 4
IO_CODES = {"io-error", "corrupt-file", "unsupported-dtype", "invalid-header", "unsupported-format", "missing-files"}

REPORT_COLUMNS = ["case_id", "scanner", "gt_tlv_ml", *METRIC_NAMES, *Counts.__dataclass_fields__, "pred_volume_mm3", "gt_volume_mm3"]
ROC_COLUMNS = ["threshold", "lfpr", "ltpr", "dice", "n_lfpr_excluded", "n_ltpr_excluded"]
SUMMARY_COLUMNS = ["method", "group", "metric", "statistic", "value", "min", "max", "count", "n_excluded"]
BA_COLUMNS = ["case_id", "pred_ml", "gt_ml", "mean_ml", "diff_ml"]
WILCOXON_COLUMNS = ["method_a", "method_b", "metric", "n_pairs", "n_effective", "statistic", "w_plus", "w_minus", "p_value", "test", "note"]

# execution-only settings that must not change outputs, so they stay out of provenance
_NOT_CONFIG = {"func", "jobs", "out", "out_dir", "out_prob", "out_mask", "verbose"}


def _exit_code(err: LesionBenchError) -> int:
    if err.code == "grid-mismatch":
        return EXIT_GRID
    if err.code in IO_CODES:
        return EXIT_IO
    return EXIT_USAGE


def _config(args) -> dict:
    cfg = {}
    for k, v in sorted(vars(args).items()):
        if k in _NOT_CONFIG:
            continue
        if isinstance(v, list):
            cfg[k] = [str(x) if isinstance(x, Path) else x for x in v]
        else:
            cfg[k] = str(v) if isinstance(v, Path) else v
    return cfg


def _formats(text: str) -> list[str]:
    fmts = [f.strip() for f in text.split(",") if f.strip()]
    bad = [f for f in fmts if f not in ("json", "csv")]
    if not fmts or bad:
        raise argparse.ArgumentTypeError(f"formats must be a comma list of json,csv (got {text!r})")
    return fmts


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _default_jobs() -> int:
    try:
        return max(1, int(os.environ.get("LESIONBENCH_JOBS", "1")))
    except ValueError:
        return 1


def _filters(args) -> tuple[bool, bool]:
    return args.filter_side in ("both", "pred"), args.filter_side in ("both", "gt")


def _report_row(r: MetricsReport, case_id="", scanner="", tlv=None) -> dict:
    row = {"case_id": case_id, "scanner": scanner, "gt_tlv_ml": tlv}
    row.update({m: r.metric(m) for m in METRIC_NAMES})
    row.update(vars(r.counts))
    row.update(pred_volume_mm3=r.pred_volume_mm3, gt_volume_mm3=r.gt_volume_mm3)
    return row


def _grid(steps: int) -> list[float]:
    return [round(i / (steps - 1), 12) for i in range(steps)] if steps > 1 else [0.5]


def _cohort_cases(args, methods=()) -> list[ManifestCase]:
    cases = load_manifest(args.manifest)
    missing = missing_files(cases, methods)
    if missing:
        for m in missing:
            print(f"missing: {m}", file=sys.stderr)
        if not getattr(args, "skip_missing", False):
            raise LesionBenchError("missing-files", f"{len(missing)} case file(s) missing; use --skip-missing to continue")
        bad = {m.split(":", 1)[0] for m in missing}
        cases = [c for c in cases if c.case_id not in bad]
        if not cases:
            raise LesionBenchError("missing-files", "no complete cases left")
    return cases


def _inputs(cases: list[ManifestCase], methods=()) -> list[Path]:
    return [p for c in cases for p in c.files(methods)]


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def cmd_eval(args) -> int:
    filter_pred, filter_gt = _filters(args)
    report = evaluate_pair(
        read_volume(args.pred),
        read_volume(args.gt),
        args.connectivity,
        args.min_mm3,
        filter_pred=filter_pred,
        filter_gt=filter_gt,
    )
    prov = provenance("eval", _config(args), [args.pred, args.gt])
    if args.out is None:
        sys.stdout.write(json_text({"provenance": prov, "report": report.to_dict()}))
        return EXIT_OK
    if "json" in args.formats:
        write_json(f"{args.out}.json", {"provenance": prov, "report": report.to_dict()})
    if "csv" in args.formats:
        write_csv(f"{args.out}.csv", REPORT_COLUMNS, [_report_row(report)], prov)
    return EXIT_OK


# ---------------------------------------------------------------------------
# cohort-level commands
# ---------------------------------------------------------------------------


def _roc_outputs(cases, method, args, prov, out_dir: Path) -> list[dict]:
    pairs = []
    for c in cases:
        prob_path = c.probabilities.get(method, c.predictions[method])
        pairs.append((read_volume(prob_path), read_volume(c.gt)))
    curves = []
    for min_mm3 in args.roc_min_mm3:
        curve = roc_sweep(pairs, _grid(args.grid_steps), min_mm3, args.connectivity, args.roc_mode, args.jobs)
        tag = f"{min_mm3:g}"
        if "csv" in args.formats:
            write_csv(out_dir / f"roc_{method}_min{tag}.csv", ROC_COLUMNS, curve.rows(), prov)
        curves.append({"method": method, "min_mm3": min_mm3, "mode": curve.mode, "points": curve.rows()})
    return curves


def _ba_summary(records, method: str) -> dict:
    """Bland-Altman of predicted vs ground-truth lesion volume in ml (diff = pred - gt)."""
    pairs = [(r.report.pred_volume_mm3 / 1000.0, r.report.gt_volume_mm3 / 1000.0) for r in records]
    ba = bland_altman(pairs)
    rows = [
        {"case_id": r.case_id, "pred_ml": p, "gt_ml": g, "mean_ml": m, "diff_ml": d}
        for r, (p, g), (m, d) in zip(records, ba.pairs, ba.points())
    ]
    return {
        "method": method,
        "mean_diff_ml": ba.mean_diff,
        "sd_diff_ml": ba.sd_diff,
        "loa_low_ml": ba.loa_low,
        "loa_high_ml": ba.loa_high,
        "points": rows,
    }


def _wilcoxon_rows(per_method: dict, metrics, zero_method: str) -> list[dict]:
    rows = []
    names = list(per_method)
    for i, a in enumerate(names):
        for b in names[i + 1 :]:
            for metric in metrics:
                pairs = [
                    (ra.report.metric(metric), rb.report.metric(metric))
                    for ra, rb in zip(per_method[a], per_method[b])
                    if ra.report.metric(metric) is not None and rb.report.metric(metric) is not None
                ]
                row = {"method_a": a, "method_b": b, "metric": metric, "n_pairs": len(pairs)}
                if pairs:
                    res = wilcoxon_signed_rank([p[0] for p in pairs], [p[1] for p in pairs], zero_method)
                    row.update(
                        n_effective=res.n_effective,
                        statistic=res.statistic,
                        w_plus=res.w_plus,
                        w_minus=res.w_minus,
                        p_value=res.p_value,
                        test=res.method,
                        note=res.note,
                    )
                else:
                    row.update(note="no-defined-pairs")
                rows.append(row)
    return rows


def _summary_rows(per_method: dict, group_key: str) -> list[dict]:
    rows = []
    for method, records in per_method.items():
        for stat in ("median", "mean"):
            for r in aggregate(records, group_key, stat):
                d = vars(r).copy()
                d["method"] = method
                rows.append(d)
    return rows


def _selected_methods(args, cases) -> list[str]:
    methods = args.methods or methods_of(cases)
    if not methods:
        raise LesionBenchError("invalid-manifest", "manifest lists no predictions")
    return methods


def cmd_cohort(args) -> int:
    cases = load_manifest(args.manifest)
    methods = _selected_methods(args, cases)
    cases = _cohort_cases(args, methods)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    prov = provenance("cohort", _config(args), _inputs(cases, methods))
    filter_pred, filter_gt = _filters(args)
    per_method = {
        m: evaluate_method(cases, m, args.connectivity, args.min_mm3, filter_pred, filter_gt, args.jobs) for m in methods
    }
    result = {"provenance": prov, "methods": methods, "per_case": {}, "aggregate": {}, "roc": [], "bland_altman": []}
    for m, records in per_method.items():
        rows = [_report_row(r.report, r.case_id, r.scanner_id, r.gt_tlv_ml) for r in records]
        result["per_case"][m] = rows
        if "csv" in args.formats:
            write_csv(out_dir / f"per_case_{m}.csv", REPORT_COLUMNS, rows, prov)
    for key in ("none", "tlv", "scanner"):
        rows = _summary_rows(per_method, key)
        result["aggregate"][key] = rows
        if "csv" in args.formats:
            write_csv(out_dir / f"aggregate_{key}.csv", SUMMARY_COLUMNS, rows, prov)
    for m in methods:
        result["roc"].extend(_roc_outputs(cases, m, args, prov, out_dir))
        if len(cases) >= 2:
            ba = _ba_summary(per_method[m], m)
            result["bland_altman"].append(ba)
            if "csv" in args.formats:
                write_csv(out_dir / f"bland_altman_{m}.csv", BA_COLUMNS, ba["points"], prov)
    if len(methods) >= 2:
        rows = _wilcoxon_rows(per_method, METRIC_NAMES, args.zero_method)
        result["wilcoxon"] = rows
        if "csv" in args.formats:
            write_csv(out_dir / "wilcoxon.csv", WILCOXON_COLUMNS, rows, prov)
    if "json" in args.formats:
        write_json(out_dir / "cohort.json", result)
    return EXIT_OK


def cmd_roc(args) -> int:
    cases = _cohort_cases(args, [args.method])
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    prov = provenance("roc", _config(args), _inputs(cases, [args.method]))
    curves = _roc_outputs(cases, args.method, args, prov, out_dir)
    if "json" in args.formats:
        write_json(out_dir / f"roc_{args.method}.json", {"provenance": prov, "curves": curves})
    return EXIT_OK


def cmd_wilcoxon(args) -> int:
    if len(args.methods) != 2:
        raise LesionBenchError("invalid-arguments", "wilcoxon needs exactly two --methods")
    cases = _cohort_cases(args, args.methods)
    prov = provenance("wilcoxon", _config(args), _inputs(cases, args.methods))
    filter_pred, filter_gt = _filters(args)
    per_method = {
        m: evaluate_method(cases, m, args.connectivity, args.min_mm3, filter_pred, filter_gt, args.jobs)
        for m in args.methods
    }
    rows = _wilcoxon_rows(per_method, args.metrics, args.zero_method)
    _emit(args, prov, {"provenance": prov, "tests": rows}, WILCOXON_COLUMNS, rows)
    return EXIT_OK


def cmd_bland_altman(args) -> int:
    cases = _cohort_cases(args, [args.method])
    prov = provenance("bland-altman", _config(args), _inputs(cases, [args.method]))
    filter_pred, filter_gt = _filters(args)
    records = evaluate_method(cases, args.method, args.connectivity, args.min_mm3, filter_pred, filter_gt, args.jobs)
    summary = _ba_summary(records, args.method)
    _emit(args, prov, {"provenance": prov, **summary}, BA_COLUMNS, summary["points"])
    return EXIT_OK


def _emit(args, prov, payload: dict, columns, rows) -> None:
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if "json" in args.formats:
        write_json(out.with_name(out.name + ".json"), payload)
    if "csv" in args.formats:
        write_csv(out.with_name(out.name + ".csv"), columns, rows, prov)


# ---------------------------------------------------------------------------
# synth / train / apply / match-hist
# ---------------------------------------------------------------------------


def _suffix(fmt: str) -> str:
    return ".nii" if fmt == "nifti" else ".lbv"


def cmd_synth(args) -> int:
    if args.spec is not None:
        import json

        spec_dict = json.loads(Path(args.spec).read_text())
    else:
        spec_dict = {}
    spec_dict["seed"] = args.seed
    for key, val in (
        ("dims", args.dims),
        ("n_lesions", args.n_lesions),
        ("n_noise_blobs", args.noise_blobs),
    ):
        if val is not None:
            spec_dict[key] = val
    spec = PhantomSpec.from_dict(spec_dict)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    prov = provenance("synth", _config(args), [args.spec] if args.spec else [])
    sfx = _suffix(args.format)

    from concurrent.futures import ThreadPoolExecutor

    def one(i: int) -> ManifestCase:
        case = generate_case(spec, i)
        cid = f"case{i:03d}"
        cdir = out_dir / cid
        cdir.mkdir(exist_ok=True)
        channels = {}
        for name, vol in case.channels.items():
            channels[name] = cdir / f"{name.lower()}{sfx}"
            write_volume(vol, channels[name], args.format)
        write_volume(case.gt, cdir / f"gt{sfx}", args.format)
        write_volume(case.noise, cdir / f"noise{sfx}", args.format)
        prior = None
        if args.prior == "oracle":
            from lesionbench.volgrid import probability_map

            prior = cdir / f"prior{sfx}"
            write_volume(probability_map(case.gt.data, case.gt.spacing), prior, args.format)
        write_json(cdir / "manifest.json", {"provenance": prov, "phantom": case.manifest})
        scanner = args.scanners[i % len(args.scanners)]
        return ManifestCase(cid, cdir / f"gt{sfx}", scanner, channels, prior)

    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            cases = list(pool.map(one, range(args.n_cases)))
    else:
        cases = [one(i) for i in range(args.n_cases)]
    payload = manifest_dict(cases, out_dir)
    payload["provenance"] = prov
    payload["phantom_spec"] = spec.to_dict()
    write_json(out_dir / "cohort.json", payload)
    return EXIT_OK


def _load_channels(paths: dict, prior, names, use_prior: bool, label: str) -> dict:
    missing = [n for n in names if n not in paths]
    if missing:
        raise LesionBenchError("channel-mismatch", f"{label} lacks channels {missing}")
    chans = {n: read_volume(paths[n]) for n in names}
    if use_prior:
        if prior is None:
            raise LesionBenchError("channel-mismatch", f"{label} has no prior map")
        chans = inject_prior(chans, read_volume(prior))
    return chans


def _case_channels(case: ManifestCase, names, use_prior: bool) -> dict:
    return _load_channels(case.channels, case.prior, names, use_prior, case.case_id)


def cmd_train(args) -> int:
    cases = _cohort_cases(args)
    if args.val_manifest is not None:
        val = load_manifest(args.val_manifest)
        train = cases
    elif args.val_cases > 0:
        if args.val_cases >= len(cases):
            raise LesionBenchError("invalid-arguments", "--val-cases must leave at least one training case")
        train, val = cases[: -args.val_cases], cases[-args.val_cases :]
    else:
        train, val = cases, []
    names = args.channels or list(train[0].channels)
    spec = PatchSpec(args.edge, tuple(names) + ((PRIOR,) if args.prior_channel else ()))

    def load(c):
        return CascadeCase(_case_channels(c, names, args.prior_channel), read_volume(c.gt))

    factory = CLASSIFIERS[args.classifier]
    model = train_cascade(
        [load(c) for c in train],
        [load(c) for c in val],
        lambda: factory(args.k),
        spec,
        args.seed,
        candidate_threshold=args.candidate_threshold,
        stage1_threshold=args.stage1_threshold,
        grid=_grid(args.grid_steps),
        min_mm3=args.min_mm3,
        connectivity=args.connectivity,
        jobs=args.jobs,
    )
    inputs = _inputs(train) + _inputs(val)
    digest = save_model(model, args.out, provenance("train", _config(args), inputs))
    print(digest)
    return EXIT_OK


def cmd_apply(args) -> int:
    model = load_model(args.model)
    use_prior = model.patch_spec.has_prior
    names = [c for c in model.patch_spec.channels if c != PRIOR]
    sfx = _suffix(args.format)
    if args.manifest is None:
        if not args.channel or args.out_mask is None:
            raise LesionBenchError("invalid-arguments", "single-case apply needs --channel NAME=PATH and --out-mask")
        given = dict(c.split("=", 1) for c in args.channel)
        if list(given) != names or use_prior != (args.prior is not None):
            raise LesionBenchError(
                "channel-mismatch",
                f"model expects channels {list(model.patch_spec.channels)}, got {list(given) + (['PRIOR'] if args.prior else [])}",
            )
        out = run_cascade(model, _load_channels(given, args.prior, names, use_prior, "input"), args.jobs)
        write_volume(out.mask, args.out_mask, args.format)
        if args.out_prob:
            write_volume(out.probability, args.out_prob, args.format)
        return EXIT_OK

    cases = _cohort_cases(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    prov = provenance("apply", _config(args), [args.model, *_inputs(cases)])
    for c in cases:
        out = run_cascade(model, _case_channels(c, names, use_prior), args.jobs)
        c.predictions[args.method] = out_dir / f"{c.case_id}_{args.method}_mask{sfx}"
        c.probabilities[args.method] = out_dir / f"{c.case_id}_{args.method}_prob{sfx}"
        write_volume(out.mask, c.predictions[args.method], args.format)
        write_volume(out.probability, c.probabilities[args.method], args.format)
    payload = manifest_dict(cases, out_dir)
    payload["provenance"] = prov
    write_json(out_dir / "cohort.json", payload)
    return EXIT_OK


def cmd_match_hist(args) -> int:
    out = histogram_match(read_volume(args.src), read_volume(args.ref))
    write_volume(out, args.out, args.format)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lesionbench", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"lesionbench {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    ev = argparse.ArgumentParser(add_help=False)
    ev.add_argument("--connectivity", type=int, choices=(6, 18, 26), default=26)
    ev.add_argument("--min-mm3", type=float, default=5.0, help="minimum lesion size in mm^3 (default 5)")
    ev.add_argument(
        "--filter-side", choices=("both", "pred", "gt"), default="both", help="which masks the size filter applies to"
    )
    out = argparse.ArgumentParser(add_help=False)
    out.add_argument("--formats", type=_formats, default=["json", "csv"], help="comma list of json,csv")
    jobs = argparse.ArgumentParser(add_help=False)
    jobs.add_argument("--jobs", type=int, default=_default_jobs(), help="worker threads (env LESIONBENCH_JOBS)")
    vol = argparse.ArgumentParser(add_help=False)
    vol.add_argument("--format", choices=("nifti", "raw"), default="nifti", help="volume file format")
    roc = argparse.ArgumentParser(add_help=False)
    roc.add_argument("--roc-min-mm3", type=_floats, default=[5.0, 10.0, 15.0])
    roc.add_argument("--grid-steps", type=int, default=51)
    roc.add_argument("--roc-mode", choices=("mean", "pooled"), default="mean")
    man = argparse.ArgumentParser(add_help=False)
    man.add_argument("manifest", type=Path, help="cohort manifest JSON")
    man.add_argument("--skip-missing", action="store_true")
    zero = argparse.ArgumentParser(add_help=False)
    zero.add_argument("--zero-method", choices=("wilcox", "pratt"), default="wilcox")

    s = sub.add_parser("eval", parents=[ev, out], help="metrics for one prediction/ground-truth pair")
    s.add_argument("pred", type=Path)
    s.add_argument("gt", type=Path)
    s.add_argument("--out", help="output prefix (writes PREFIX.json / PREFIX.csv); stdout JSON if omitted")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("cohort", parents=[man, ev, out, jobs, roc, zero], help="cohort tables, ROC, Bland-Altman, Wilcoxon")
    s.add_argument("--methods", type=lambda t: [m for m in t.split(",") if m], default=None)
    s.add_argument("--out-dir", required=True, type=Path)
    s.set_defaults(func=cmd_cohort)

    s = sub.add_parser("roc", parents=[man, out, jobs, roc], help="lesion-wise ROC curves for one method")
    s.add_argument("--connectivity", type=int, choices=(6, 18, 26), default=26)
    s.add_argument("--method", required=True)
    s.add_argument("--out-dir", required=True, type=Path)
    s.set_defaults(func=cmd_roc)

    s = sub.add_parser("wilcoxon", parents=[man, ev, out, jobs, zero], help="paired test between two methods")
    s.add_argument("--methods", nargs=2, required=True)
    s.add_argument("--metrics", nargs="+", choices=METRIC_NAMES, default=list(METRIC_NAMES))
    s.add_argument("--out", required=True, help="output prefix")
    s.set_defaults(func=cmd_wilcoxon)

    s = sub.add_parser("bland-altman", parents=[man, ev, out, jobs], help="volume agreement for one method")
    s.add_argument("--method", required=True)
    s.add_argument("--out", required=True, help="output prefix")
    s.set_defaults(func=cmd_bland_altman)

    s = sub.add_parser("synth", parents=[vol, jobs], help="generate a phantom cohort")
    s.add_argument("--out-dir", required=True, type=Path)
    s.add_argument("--n-cases", type=int, required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--spec", type=Path, help="PhantomSpec JSON")
    s.add_argument("--dims", type=int, nargs=3)
    s.add_argument("--n-lesions", type=int)
    s.add_argument("--noise-blobs", type=int)
    s.add_argument("--scanners", type=lambda t: t.split(","), default=["phantom"])
    s.add_argument("--prior", choices=("none", "oracle"), default="none", help="write an oracle prior (= ground truth)")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", parents=[man, jobs], help="train a cascade model")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True, type=Path, help="model archive path")
    s.add_argument("--val-manifest", type=Path)
    s.add_argument("--val-cases", type=int, default=0, help="hold out the last N cases for validation")
    s.add_argument("--classifier", choices=sorted(CLASSIFIERS), default="knn")
    s.add_argument("--k", type=int, default=5)
    s.add_argument("--edge", type=int, default=11)
    s.add_argument("--channels", type=lambda t: t.split(","), help="ordered intensity channels (first = FLAIR)")
    s.add_argument("--prior-channel", action="store_true", help="add the case prior map as an extra channel")
    s.add_argument("--candidate-threshold", type=float)
    s.add_argument("--stage1-threshold", type=float, default=0.5)
    s.add_argument("--grid-steps", type=int, default=51)
    s.add_argument("--min-mm3", type=float, default=5.0)
    s.add_argument("--connectivity", type=int, choices=(6, 18, 26), default=26)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("apply", parents=[vol, jobs], help="run a trained cascade")
    s.add_argument("--model", required=True, type=Path)
    s.add_argument("manifest", nargs="?", type=Path, help="cohort manifest (omit for single-case mode)")
    s.add_argument("--skip-missing", action="store_true")
    s.add_argument("--method", default="cascade")
    s.add_argument("--out-dir", type=Path, default=Path("."))
    s.add_argument("--channel", action="append", help="NAME=PATH, in model channel order (single-case mode)")
    s.add_argument("--prior", help="prior map path (single-case mode)")
    s.add_argument("--out-mask")
    s.add_argument("--out-prob")
    s.set_defaults(func=cmd_apply)

    s = sub.add_parser("match-hist", parents=[vol], help="histogram-match a volume to a reference")
    s.add_argument("src", type=Path)
    s.add_argument("ref", type=Path)
    s.add_argument("--out", required=True, type=Path)
    s.set_defaults(func=cmd_match_hist)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except LesionBenchError as err:
        print(f"lesionbench {args.command}: error: {err.code}: {err.message}", file=sys.stderr)
        return _exit_code(err)


if __name__ == "__main__":
    sys.exit(main())
