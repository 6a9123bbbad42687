"""
Command-line entry point for the cine-MR quantification pipeline.

Subcommands:
- phantom:  write seeded synthetic cases in ACDC layout.
- train:    train the segmentation network (and optionally the RoI network) on cases.
- segment:  write predicted label maps per frame.
- quantify: write per-case clinical metrics from predictions or ground-truth masks.
- evaluate: join predicted and manual metrics into the concordance table.
- bench:    time locate + segment + quantify per study and compare with manual times.

Settings resolve as defaults < --config file < environment (CARDIQ_SEED) < flags.
Exit codes: 0 success, 1 pipeline error, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from phantom_simulator import phantom_suite, save_phantom_case
from service.errors import CardiqError, ValidationError
from service.model_io import load_params, save_params
from service.quant import ClinicalMetrics, quantify_frames, quantify_study
from service.roi import crop_labels, crop_resample, locate_heart
from service.segnet import NetworkParams, segment_study, train, train_roi
from service.settings import (
    PER_STUDY_BUDGET_S,
    RunConfig,
    apply_overrides,
    env_overrides,
    log_level,
    read_config_file,
)
from service.study_io import (
    frame_file_name,
    list_case_dirs,
    load_acdc_case,
    read_manual_times_csv,
    read_metrics,
    write_label_nifti,
    write_metrics,
    write_report,
)
from tools.stats import (
    concordance_table,
    cross_training_from_metrics,
    ejection_fraction_errors,
    mean_sd,
    read_paired_series_csv,
    series_from_metrics,
    timing_comparison,
)

logger = logging.getLogger("cardiq")


# --- 1. Argument parsing ---

def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="plain-text 'key = value' defaults file")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    parser.add_argument("--frame-base", dest="frame_base", type=int, choices=(0, 1))
    parser.add_argument("--format", dest="report_format", choices=("csv", "json"))
    parser.add_argument("--workers", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cardiq", description="Biventricular cine-MR quantification")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="write synthetic cases")
    p.add_argument("--n", dest="n_cases", type=int)
    p.add_argument("--out", dest="output", type=Path, required=True)

    p = sub.add_parser("train", help="train the networks on cases")
    p.add_argument("--cases", type=Path, required=True)
    p.add_argument("--out", dest="output", type=Path, required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--lambda-prior", dest="lambda_prior", type=float)
    p.add_argument("--augment", action="store_true", default=None)
    p.add_argument("--depth", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--train-roi", dest="train_roi", action="store_true")
    p.add_argument("--precision", choices=("float32", "float64"))

    p = sub.add_parser("segment", help="write predicted masks")
    p.add_argument("--model", type=Path)
    p.add_argument("--cases", type=Path, required=True)
    p.add_argument("--out", dest="output", type=Path, required=True)
    p.add_argument("--locate", choices=("heuristic", "learned"))

    p = sub.add_parser("quantify", help="write per-case clinical metrics")
    p.add_argument("--cases", type=Path, required=True)
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--model", type=Path)
    source.add_argument("--masks", action="store_true", help="quantify the ground-truth masks")
    p.add_argument("--out", dest="output", type=Path, required=True)
    p.add_argument("--locate", choices=("heuristic", "learned"))

    p = sub.add_parser("evaluate", help="concordance tables from metrics files or paired series")
    p.add_argument("--pred", type=Path, help="automatic metrics (CSV or JSON from quantify)")
    p.add_argument("--truth", type=Path, help="manual metrics (CSV or JSON from quantify)")
    p.add_argument("--pred-b", dest="pred_b", type=Path, help="second automatic run; adds the cross-training table")
    p.add_argument("--series", type=Path, help="long-format CSV: case_id, metric, manual, auto")
    p.add_argument("--out", dest="output", type=Path, required=True)

    p = sub.add_parser("bench", help="per-study timing")
    p.add_argument("--model", type=Path)
    p.add_argument("--cases", type=Path, required=True)
    p.add_argument("--manual-times", dest="manual_times", type=Path)
    p.add_argument("--repetitions", dest="bench_repetitions", type=int)
    p.add_argument("--locate", choices=("heuristic", "learned"))
    p.add_argument("--out", dest="output", type=Path)

    for action in sub.choices.values():
        _common(action)
    return parser


_HYPER_FLAGS = ("depth", "width")
_NOT_SETTINGS = ("command", "config", "verbose", "cases", "masks", "train_roi") + _HYPER_FLAGS


def resolve_config(args: argparse.Namespace) -> RunConfig:
    config = RunConfig(command=args.command)
    if args.config is not None:
        if not args.config.exists():
            raise ValidationError(f"config file does not exist: {args.config}")
        apply_overrides(config, read_config_file(args.config))
    apply_overrides(config, env_overrides())
    flags = {k: v for k, v in vars(args).items() if k not in _NOT_SETTINGS}
    config.inputs = [args.cases] if getattr(args, "cases", None) is not None else []
    for key in ("model", "manual_times", "pred", "truth", "pred_b", "series"):
        if key in flags:
            setattr(config, key, flags.pop(key))
    apply_overrides(config, flags)
    config.validate()
    return config


def _configure_logging(verbose: bool) -> None:
    level = logging.DEBUG if verbose else log_level()
    logging.basicConfig(
        level=level,
        format="%(asctime)s %(levelname)s %(name)s %(message)s",
        stream=sys.stderr,
        force=True,
    )


# --- 2. Helpers ---

def _map_cases(fn: Callable[[Path], Any], cases: Sequence[Path], workers: int) -> List[Any]:
    if workers <= 1 or len(cases) <= 1:
        return [fn(c) for c in cases]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, cases))


def _load_model(config: RunConfig) -> Optional[NetworkParams]:
    return load_params(config.model) if config.model is not None else None


def _case_dirs(config: RunConfig) -> List[Path]:
    return list_case_dirs(config.inputs[0])


def _training_sets(config: RunConfig) -> Tuple[List[Tuple[np.ndarray, np.ndarray]], List[Tuple[np.ndarray, np.ndarray]]]:
    """Cropped (image, labels) slices for the segmentation net and native ones for the RoI net."""
    seg_set: List[Tuple[np.ndarray, np.ndarray]] = []
    roi_set: List[Tuple[np.ndarray, np.ndarray]] = []
    for case_dir in _case_dirs(config):
        study, truth = load_acdc_case(case_dir, config.frame_base)
        if not truth:
            logger.warning("case %s has no ground truth, skipped", study.case_id)
            continue
        roi = locate_heart(study, "heuristic")
        for frame, label_map in truth:
            for k in range(study.n_slices):
                image = study.intensities[frame, k]
                seg_set.append((crop_resample(image, study.spacing, roi), crop_labels(label_map.labels[k], study.spacing, roi)))
                roi_set.append((image, label_map.labels[k]))
    if not seg_set:
        raise ValidationError(f"no ground-truth frames found under {config.inputs[0]}")
    return seg_set, roi_set


def _predict_case(params: NetworkParams, config: RunConfig, case_dir: Path):
    study, _ = load_acdc_case(case_dir, config.frame_base)
    roi = locate_heart(study, config.locate, params if config.locate == "learned" else None)
    return study, roi, segment_study(params, study, roi)


# --- 3. Subcommands ---

def cmd_phantom(config: RunConfig, args: argparse.Namespace) -> int:
    cases = phantom_suite(config.n_cases, config.seed)
    for case in cases:
        save_phantom_case(config.output, case)
    print(f"Wrote {len(cases)} phantom cases to {config.output}")
    return 0


def cmd_train(config: RunConfig, args: argparse.Namespace) -> int:
    seg_set, roi_set = _training_sets(config)
    hyper = {k: getattr(args, k) for k in _HYPER_FLAGS if getattr(args, k) is not None}
    params = train(seg_set, config.train, hyper)
    if args.train_roi:
        params = train_roi(roi_set, config.train, params)
    save_params(params, config.output)
    final = params.loss_history[-1] if params.loss_history else float("nan")
    print(f"Trained on {len(seg_set)} slices; final loss {final:.5f}; saved {config.output}")
    return 0


def cmd_segment(config: RunConfig, args: argparse.Namespace) -> int:
    params = _load_model(config)

    def run_case(case_dir: Path) -> int:
        study, _, maps = _predict_case(params, config, case_dir)
        out_dir = config.output / study.case_id
        for label_map in maps:
            name = frame_file_name(study.case_id, label_map.frame_index, "_pred", config.frame_base)
            write_label_nifti(label_map, out_dir / name)
        return len(maps)

    written = _map_cases(run_case, _case_dirs(config), config.workers)
    print(f"Wrote {sum(written)} predicted frames for {len(written)} cases to {config.output}")
    return 0


def cmd_quantify(config: RunConfig, args: argparse.Namespace) -> int:
    params = None if args.masks else _load_model(config)

    def run_case(case_dir: Path) -> ClinicalMetrics:
        if params is None:
            study, truth = load_acdc_case(case_dir, config.frame_base)
            if not truth:
                raise ValidationError(f"case {study.case_id} has no ground-truth masks")
            return quantify_frames(
                [m for _, m in truth],
                provided=(study.ed_frame, study.es_frame),
                height_m=study.height_m,
                weight_kg=study.weight_kg,
                case_id=study.case_id,
            )
        study, _, maps = _predict_case(params, config, case_dir)
        return quantify_study(study, maps)

    metrics = _map_cases(run_case, _case_dirs(config), config.workers)
    write_metrics(metrics, config.output, config.report_format)
    print(f"Wrote metrics for {len(metrics)} cases to {config.output}")
    return 0


def cmd_evaluate(config: RunConfig, args: argparse.Namespace) -> int:
    cross: List[Any] = []
    if config.series is not None:
        series = read_paired_series_csv(config.series)
    else:
        truth = read_metrics(config.truth)
        pred = read_metrics(config.pred)
        series = series_from_metrics(truth, pred)
        if config.pred_b is not None:
            cross = cross_training_from_metrics(truth, pred, read_metrics(config.pred_b))
    table = concordance_table(series)
    errors = ejection_fraction_errors(series)
    write_report([], table, config.output, config.report_format, cross_training=cross, errors=errors)
    print(f"Wrote {len(table)}-row concordance table to {config.output}")
    if cross:
        print(f"Cross-training table: {len(cross)} rows")
    for s in errors:
        verdict = "within" if s.within_reference else "outside"
        print(
            f"{s.metric_name} error {s.mean_error:.1f} ± {s.sd_error:.1f} "
            f"({verdict} interobserver {s.reference[0]:.1f} ± {s.reference[1]:.1f})"
        )
    return 0


def cmd_bench(config: RunConfig, args: argparse.Namespace) -> int:
    params = _load_model(config)
    rows: List[Dict[str, Any]] = []
    # sequential on purpose: the per-study figure is single-threaded
    for case_dir in _case_dirs(config):
        study, _ = load_acdc_case(case_dir, config.frame_base)
        times = []
        for _ in range(config.bench_repetitions):
            start = time.perf_counter()
            roi = locate_heart(study, config.locate, params if config.locate == "learned" else None)
            quantify_study(study, segment_study(params, study, roi))
            times.append(time.perf_counter() - start)
        rows.append({"case_id": study.case_id, "seconds": float(np.mean(times))})
        logger.info("case %s: %.3f s per study", study.case_id, rows[-1]["seconds"])

    df = pd.DataFrame(rows, columns=["case_id", "seconds"])
    mean, sd = mean_sd(df["seconds"]) if len(df) > 1 else (float(df["seconds"].iloc[0]), 0.0)
    print(f"Automatic: {mean:.3f} ± {sd:.3f} s per study over {len(df)} studies")
    if mean > PER_STUDY_BUDGET_S:
        logger.warning("mean time per study %.2f s exceeds the %.1f s budget", mean, PER_STUDY_BUDGET_S)

    if config.manual_times is not None:
        manual = read_manual_times_csv(config.manual_times)
        paired = df.set_index("case_id").join(manual.rename("manual"), how="inner")
        if len(paired) < 2:
            raise ValidationError("need manual times for at least 2 benchmarked cases")
        summary = timing_comparison(paired["seconds"], paired["manual"])
        print(
            f"Manual: {summary.manual_mean:.1f} ± {summary.manual_sd:.1f} s; "
            f"difference {summary.mean_difference:.1f} s (95% CI {summary.ci_low:.1f} - {summary.ci_high:.1f})"
        )
    if config.output is not None:
        config.output.parent.mkdir(parents=True, exist_ok=True)
        df.to_csv(config.output, index=False, float_format="%.4f", lineterminator="\n")
    return 0


COMMAND_HANDLERS: Dict[str, Callable[[RunConfig, argparse.Namespace], int]] = {
    "phantom": cmd_phantom,
    "train": cmd_train,
    "segment": cmd_segment,
    "quantify": cmd_quantify,
    "evaluate": cmd_evaluate,
    "bench": cmd_bench,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    _configure_logging(args.verbose)
    try:
        config = resolve_config(args)
        return COMMAND_HANDLERS[config.command](config, args)
    except (CardiqError, OSError) as e:
        logger.error("%s failed: %s", args.command, e)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
