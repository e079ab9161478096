"""Experiment orchestration: config parsing, pipeline subcommands,
inference-latency measurement and plot-data emission."""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset, build_dataset, load_interactions
from .distill import Direction, DistillConfig, SamplingScheme, sampling_distribution
from .evaluation import EvalReport, aggregate_runs, evaluate
from .models import FactorModel, load_model, save_model, score_matrix
from .ranking import RankDiffReport, rank_diff_report, snapshot, write_analytics
from .synth import synthetic_interactions
from .train import Seeds, TrainConfig, train_baseline_kd, train_bd, train_cf

__all__ = ["ExperimentSpec", "run_experiment", "measure_latency", "emit_plots", "main"]

MODES = ("bd", "baseline-kd", "cf-only", "analyze", "latency")


@dataclass
class ExperimentSpec:
    """Everything one experiment needs, loadable from a single JSON file.

    Paths and seeds can be overridden through the environment
    (BIDISTILL_DATA_PATH, BIDISTILL_OUT_DIR, BIDISTILL_SEED) and through
    command-line flags.
    """

    mode: str = "bd"
    data_path: str | None = None
    delimiter: str | None = None
    third_column: str = "rating"
    min_ratings: int = 10
    split_seed: int = 0
    synthetic: dict | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    eval_ks: tuple[int, ...] = (50, 100)
    runs: int = 5
    base_seed: int = 0
    out_dir: str = "runs"
    baseline_schemes: tuple[str, ...] = ()
    teacher_checkpoint: str | None = None
    student_checkpoint: str | None = None
    latency_repetitions: int = 5
    scatter_top_r: int = 1000
    config_path: str | None = None  # original file, echoed verbatim when set

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.runs < 1:
            raise ValueError("runs must be >= 1")
        if self.mode in ("bd", "baseline-kd", "cf-only") and not (
                self.data_path or self.synthetic):
            raise ValueError(f"mode {self.mode} needs data_path or a synthetic block")
        if self.mode == "analyze" and not (self.teacher_checkpoint and self.student_checkpoint):
            raise ValueError("analyze mode needs teacher_checkpoint and student_checkpoint")
        if self.mode == "latency" and not self.teacher_checkpoint:
            raise ValueError("latency mode needs teacher_checkpoint")
        self.train.validate()


def _train_config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    distill = d.pop("distill", {})
    seeds = d.pop("seeds", {})
    dc = DistillConfig(**{**distill, "scheme": SamplingScheme(distill["scheme"])}
                       if "scheme" in distill else distill)
    return TrainConfig(**d, distill=dc, seeds=Seeds(**seeds))


def spec_from_dict(payload: dict, config_path: str | None = None) -> ExperimentSpec:
    payload = dict(payload)
    train = payload.pop("train", {})
    spec = ExperimentSpec(**{**payload,
                             "eval_ks": tuple(payload.get("eval_ks", (50, 100))),
                             "baseline_schemes": tuple(payload.get("baseline_schemes", ())),
                             "train": _train_config_from_dict(train)},
                          )
    spec.config_path = config_path
    return spec


def load_spec(path: str | Path) -> ExperimentSpec:
    payload = json.loads(Path(path).read_text())
    return spec_from_dict(payload, config_path=str(path))


def apply_env_overrides(spec: ExperimentSpec, env: dict | None = None) -> ExperimentSpec:
    env = os.environ if env is None else env
    if env.get("BIDISTILL_DATA_PATH"):
        spec.data_path = env["BIDISTILL_DATA_PATH"]
    if env.get("BIDISTILL_OUT_DIR"):
        spec.out_dir = env["BIDISTILL_OUT_DIR"]
    if env.get("BIDISTILL_SEED"):
        spec.base_seed = int(env["BIDISTILL_SEED"])
    return spec


def spec_to_dict(spec: ExperimentSpec) -> dict:
    d = asdict(spec)
    d["train"]["distill"]["scheme"] = spec.train.distill.scheme.value
    d.pop("config_path")
    return d


def run_seeds(base_seed: int, run: int) -> Seeds:
    b = base_seed * 1000 + run * 10
    return Seeds(teacher_init=b + 1, student_init=b + 2, sampling=b + 3, negatives=b + 4)


def load_spec_dataset(spec: ExperimentSpec) -> Dataset:
    if spec.data_path:
        rows = load_interactions(spec.data_path, spec.delimiter, spec.third_column)
    elif spec.synthetic:
        rows = synthetic_interactions(**spec.synthetic)
    else:
        raise ValueError("no data source configured")
    return build_dataset(rows, min_ratings=spec.min_ratings, seed=spec.split_seed)


def measure_latency(model: FactorModel, dataset: Dataset, repetitions: int = 5) -> dict:
    """Wall time of generating the full recommendation list for every user,
    repeated; plus parameter counts."""
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    observed = dataset.observed_mask()
    times = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        scores = score_matrix(model)
        scores[observed] = -np.inf
        np.argsort(-scores, axis=1, kind="stable")
        times.append(time.perf_counter() - t0)
    return {
        "param_count": model.param_count,
        "embedding_params": int(model.P.size + model.Q.size),
        "d": model.d,
        "repetitions": repetitions,
        "times": times,
        "min": min(times),
        "mean": float(np.mean(times)),
    }


def _svg_header(width: int, height: int) -> str:
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}">\n'
            f'<rect width="{width}" height="{height}" fill="white"/>\n')


def _bars_svg(values: np.ndarray, path: Path) -> None:
    W, H = 800, 400
    parts = [_svg_header(W, H)]
    mid = H / 2.0
    parts.append(f'<line x1="0" y1="{mid:.1f}" x2="{W}" y2="{mid:.1f}" '
                 f'stroke="black" stroke-width="1"/>\n')
    if values.size:
        vmax = float(np.abs(values).max()) or 1.0
        bw = W / values.size
        for i, v in enumerate(values):
            h = abs(float(v)) / vmax * (mid - 10.0)
            y = mid - h if v > 0 else mid
            parts.append(f'<rect x="{i * bw:.3f}" y="{y:.3f}" width="{max(bw, 0.5):.3f}" '
                         f'height="{h:.3f}" fill="steelblue"/>\n')
    parts.append("</svg>\n")
    path.write_text("".join(parts))


def _scatter_svg(rank_s: np.ndarray, rank_t: np.ndarray, path: Path) -> None:
    W = H = 500
    parts = [_svg_header(W, H)]
    parts.append(f'<line x1="0" y1="{H}" x2="{W}" y2="0" stroke="red" '
                 f'stroke-dasharray="4" stroke-width="1"/>\n')
    if rank_s.size:
        rmax = float(max(rank_s.max(), rank_t.max()))
        for s, t in zip(rank_s, rank_t):
            x = float(s) / rmax * (W - 10) + 5
            y = H - (float(t) / rmax * (H - 10) + 5)
            parts.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="1.5" fill="steelblue" '
                         f'fill-opacity="0.5"/>\n')
    parts.append("</svg>\n")
    path.write_text("".join(parts))


def emit_plots(report: RankDiffReport, out_dir: str | Path) -> None:
    """Sorted rank-difference series and rank scatter as CSV plus minimal
    static SVG renderings; byte-deterministic for identical inputs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "rankdiff_sorted.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "diff"])
        for i, d in enumerate(report.diffs_sorted):
            w.writerow([i, int(d)])
    _bars_svg(report.diffs_sorted, out / "rankdiff_sorted.svg")
    _scatter_svg(report.scatter_rank_s, report.scatter_rank_t, out / "scatter.svg")


def _improvement(new: dict[int, float], old: dict[int, float]) -> dict[int, float]:
    return {k: (new[k] - old[k]) / old[k] if old[k] else float("nan") for k in new}


def _eval_and_save(model, dataset, spec, label, seed, run_dir) -> EvalReport:
    rep = evaluate(model, dataset, spec.eval_ks, model_label=label, seed=seed)
    rep.save(run_dir / f"eval_{label}.json")
    return rep


def _write_metrics_csv(path: Path, reports: list[EvalReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "k", "metric", "seed", "value"])
        for rep in reports:
            rep.append_csv_rows(w)


def _make_run_dir(spec: ExperimentSpec) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = Path(spec.out_dir)
    run_dir = base / f"{spec.mode}-{stamp}"
    k = 1
    while run_dir.exists():
        run_dir = base / f"{spec.mode}-{stamp}-{k}"
        k += 1
    run_dir.mkdir(parents=True)
    return run_dir


def _echo_config(spec: ExperimentSpec, run_dir: Path) -> None:
    if spec.config_path and Path(spec.config_path).exists():
        (run_dir / "config.json").write_bytes(Path(spec.config_path).read_bytes())
    else:
        (run_dir / "config.json").write_text(json.dumps(spec_to_dict(spec), indent=2))


def run_experiment(spec: ExperimentSpec) -> Path:
    """Execute the selected mode end to end; returns the run directory."""
    spec.validate()
    run_dir = _make_run_dir(spec)
    _echo_config(spec, run_dir)

    if spec.mode in ("bd", "cf-only", "baseline-kd"):
        dataset = load_spec_dataset(spec)
        dataset.save(run_dir / "dataset.json")
        _run_training_mode(spec, dataset, run_dir)
    elif spec.mode == "analyze":
        dataset = load_spec_dataset(spec)
        teacher = load_model(spec.teacher_checkpoint)
        student = load_model(spec.student_checkpoint)
        report = rank_diff_report(snapshot(teacher, dataset, 0),
                                  snapshot(student, dataset, 0),
                                  dataset.test_item, spec.scatter_top_r)
        write_analytics(report, run_dir)
        emit_plots(report, run_dir)
    elif spec.mode == "latency":
        dataset = load_spec_dataset(spec)
        out = {"teacher": measure_latency(load_model(spec.teacher_checkpoint), dataset,
                                          spec.latency_repetitions)}
        if spec.student_checkpoint:
            out["student"] = measure_latency(load_model(spec.student_checkpoint), dataset,
                                             spec.latency_repetitions)
        (run_dir / "latency.json").write_text(json.dumps(out, indent=2))
    return run_dir


def _run_training_mode(spec: ExperimentSpec, dataset: Dataset, run_dir: Path) -> None:
    all_reports: list[EvalReport] = []
    by_label: dict[str, list[EvalReport]] = {}

    for run in range(spec.runs):
        cfg = TrainConfig(**{**asdict(spec.train),
                             "distill": spec.train.distill,
                             "seeds": run_seeds(spec.base_seed, run)})
        sub = run_dir / f"run{run}"
        sub.mkdir()
        reports: dict[str, EvalReport] = {}

        if spec.mode == "cf-only":
            for role in ("teacher", "student"):
                model, _ = train_cf(dataset, cfg, role, log_path=sub / f"trainlog_{role}.jsonl")
                save_model(model, sub / f"{role}.npz")
                reports[role] = _eval_and_save(model, dataset, spec, role, run, sub)
        elif spec.mode == "bd":
            bd_t, bd_s, log = train_bd(dataset, cfg, log_path=sub / "trainlog_bd.jsonl")
            save_model(bd_t, sub / "bd_teacher.npz")
            save_model(bd_s, sub / "bd_student.npz")
            (sub / "sync.json").write_text(json.dumps(
                {"snapshot_epochs": log.snapshot_epochs, "avg_rank_difference": log.sync}))
            reports["bd_teacher"] = _eval_and_save(bd_t, dataset, spec, "bd_teacher", run, sub)
            reports["bd_student"] = _eval_and_save(bd_s, dataset, spec, "bd_student", run, sub)
            for role in ("teacher", "student"):
                model, _ = train_cf(dataset, cfg, role, log_path=sub / f"trainlog_{role}.jsonl")
                save_model(model, sub / f"{role}.npz")
                reports[role] = _eval_and_save(model, dataset, spec, role, run, sub)
            for name in spec.baseline_schemes:
                scheme = SamplingScheme(name)
                kd_s, _ = train_baseline_kd(dataset, cfg, scheme,
                                            load_model(sub / "teacher.npz"),
                                            log_path=sub / f"trainlog_kd_{scheme.value}.jsonl")
                label = f"kd_{scheme.value}"
                save_model(kd_s, sub / f"{label}.npz")
                reports[label] = _eval_and_save(kd_s, dataset, spec, label, run, sub)
        elif spec.mode == "baseline-kd":
            if spec.teacher_checkpoint:
                teacher = load_model(spec.teacher_checkpoint)
            else:
                teacher, _ = train_cf(dataset, cfg, "teacher",
                                      log_path=sub / "trainlog_teacher.jsonl")
                save_model(teacher, sub / "teacher.npz")
            scheme = spec.train.distill.scheme
            kd_s, _ = train_baseline_kd(dataset, cfg, scheme, teacher,
                                        log_path=sub / "trainlog_kd.jsonl")
            label = f"kd_{scheme.value}"
            save_model(kd_s, sub / f"{label}.npz")
            reports["teacher"] = _eval_and_save(teacher, dataset, spec, "teacher", run, sub)
            reports[label] = _eval_and_save(kd_s, dataset, spec, label, run, sub)

        for label, rep in reports.items():
            by_label.setdefault(label, []).append(rep)
            all_reports.append(rep)

    _write_metrics_csv(run_dir / "metrics.csv", all_reports)

    summary: dict = {"mode": spec.mode, "runs": spec.runs,
                     "aggregates": {}, "improvements": {}}
    aggs = {label: aggregate_runs(reps) for label, reps in by_label.items()}
    for label, agg in aggs.items():
        summary["aggregates"][label] = agg.to_dict()
    if "bd_teacher" in aggs and "teacher" in aggs:
        summary["improvements"]["improv_t"] = {
            "hit": _improvement(aggs["bd_teacher"].hit, aggs["teacher"].hit),
            "ndcg": _improvement(aggs["bd_teacher"].ndcg, aggs["teacher"].ndcg)}
    if "bd_student" in aggs and "student" in aggs:
        summary["improvements"]["improv_s"] = {
            "hit": _improvement(aggs["bd_student"].hit, aggs["student"].hit),
            "ndcg": _improvement(aggs["bd_student"].ndcg, aggs["student"].ndcg)}
    kd_labels = [l for l in aggs if l.startswith("kd_")]
    if kd_labels and "bd_student" in aggs:
        best = {k: max(aggs[l].hit[k] for l in kd_labels) for k in spec.eval_ks}
        summary["improvements"]["improv_b"] = {
            "hit": _improvement(aggs["bd_student"].hit, best)}
    (run_dir / "summary.json").write_text(json.dumps(_stringify_keys(summary), indent=2))


def _stringify_keys(obj):
    if isinstance(obj, dict):
        return {str(k): _stringify_keys(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_stringify_keys(v) for v in obj]
    return obj


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON experiment spec")
    p.add_argument("--data", help="interaction log path (overrides config)")
    p.add_argument("--out", help="output directory (overrides config)")
    p.add_argument("--runs", type=int, help="number of independent runs")
    p.add_argument("--seed", type=int, help="base seed (overrides config)")
    p.add_argument("--min-ratings", type=int, help="user activity filter")


def _spec_from_args(args, mode: str) -> ExperimentSpec:
    spec = load_spec(args.config) if args.config else ExperimentSpec()
    spec.mode = mode
    apply_env_overrides(spec)
    if getattr(args, "data", None):
        spec.data_path = args.data
    if getattr(args, "out", None):
        spec.out_dir = args.out
    if getattr(args, "runs", None):
        spec.runs = args.runs
    if getattr(args, "seed", None) is not None:
        spec.base_seed = args.seed
    if getattr(args, "min_ratings", None):
        spec.min_ratings = args.min_ratings
    return spec


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(prog="bidistill",
                                 description="Bidirectional distillation experiments")
    sub = ap.add_subparsers(dest="command", required=True)

    for cmd, mode in (("train-bd", "bd"), ("train-kd", "baseline-kd"), ("train-cf", "cf-only")):
        p = sub.add_parser(cmd, help=f"run the {mode} training pipeline")
        _add_common(p)
        if cmd == "train-kd":
            p.add_argument("--teacher", help="frozen teacher checkpoint")
            p.add_argument("--scheme", choices=[s.value for s in SamplingScheme])

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("test", "val"), default="test")
    p.add_argument("--ks", type=int, nargs="+", default=[50, 100])

    p = sub.add_parser("analyze", help="rank-difference analytics for two checkpoints")
    _add_common(p)
    p.add_argument("--teacher", required=True)
    p.add_argument("--student", required=True)

    p = sub.add_parser("latency", help="inference latency of checkpoints")
    _add_common(p)
    p.add_argument("--teacher", required=True)
    p.add_argument("--student")
    p.add_argument("--reps", type=int, default=5)

    p = sub.add_parser("dump-sampling", help="dump one user's sampling distribution")
    _add_common(p)
    p.add_argument("--teacher", required=True)
    p.add_argument("--student", required=True)
    p.add_argument("--user", type=int, required=True)
    p.add_argument("--direction", choices=[d.value for d in Direction], default="t_to_s")
    p.add_argument("--scheme", choices=[s.value for s in SamplingScheme],
                   default="rank-discrepancy")

    args = ap.parse_args(argv)

    if args.command in ("train-bd", "train-kd", "train-cf"):
        mode = {"train-bd": "bd", "train-kd": "baseline-kd", "train-cf": "cf-only"}[args.command]
        spec = _spec_from_args(args, mode)
        if args.command == "train-kd":
            if getattr(args, "teacher", None):
                spec.teacher_checkpoint = args.teacher
            if getattr(args, "scheme", None):
                spec.train.distill.scheme = SamplingScheme(args.scheme)
        run_dir = run_experiment(spec)
        print(run_dir)
        return 0

    if args.command == "eval":
        spec = _spec_from_args(args, "cf-only")
        dataset = load_spec_dataset(spec)
        model = load_model(args.checkpoint)
        rep = evaluate(model, dataset, tuple(args.ks), split=args.split,
                       model_label=Path(args.checkpoint).stem)
        print(json.dumps(rep.to_dict(), indent=2))
        return 0

    if args.command == "analyze":
        spec = _spec_from_args(args, "analyze")
        spec.teacher_checkpoint = args.teacher
        spec.student_checkpoint = args.student
        run_dir = run_experiment(spec)
        print(run_dir)
        return 0

    if args.command == "latency":
        spec = _spec_from_args(args, "latency")
        spec.teacher_checkpoint = args.teacher
        spec.student_checkpoint = args.student
        spec.latency_repetitions = args.reps
        run_dir = run_experiment(spec)
        print((run_dir / "latency.json").read_text())
        return 0

    if args.command == "dump-sampling":
        spec = _spec_from_args(args, "analyze")
        dataset = load_spec_dataset(spec)
        teacher = load_model(args.teacher)
        student = load_model(args.student)
        snap_t = snapshot(teacher, dataset, 0)
        snap_s = snapshot(student, dataset, 0)
        items, rt, rs, w, p_ = sampling_distribution(
            SamplingScheme(args.scheme), Direction(args.direction),
            snap_t, snap_s, args.user, spec.train.distill)
        writer = csv.writer(sys.stdout)
        writer.writerow(["item", "rank_t", "rank_s", "weight", "probability"])
        for row in zip(items, rt, rs, w, p_):
            writer.writerow([int(row[0]), int(row[1]), int(row[2]),
                             f"{row[3]:.10g}", f"{row[4]:.10g}"])
        return 0

    return 1


if __name__ == "__main__":
    sys.exit(main())
