"""Command-line orchestration of the two-phase pipeline.

Every command writes under ``<out>/<name>/`` (``manifest.json``,
``checkpoints/``, ``csv/``).  Outputs are a pure function of the config and
seed: no timestamps, sorted JSON keys, fixed float formatting.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import platform
import sys
from pathlib import Path

import numpy as np
import pydantic
import scipy

from . import __version__
from .config import ExperimentConfig, build_datasets, build_density, load_config
from .density import NumericalError
from .distill import DistillDivergence, distill_run
from .flowmatch import sample, train_fm, write_history, write_trajectory
from .geodesic import (
    DegeneratePathError,
    DiscretePath,
    GeodesicDivergence,
    action,
    el_residual,
    grid_geodesic_oracle,
    optimize_path,
    polyline_action,
    write_path_csv,
)
from .metrics import (
    el_residual_curve,
    endpoint_rmse,
    energy_distance,
    interpolant_nodes,
    interpolant_residual,
    path_smoothness,
)
from .nets import load_checkpoint, save_checkpoint
from .persistence import fmt, write_csv

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3


class ConfigError(Exception):
    pass


class Run:
    """Output directory of one named experiment."""

    def __init__(self, cfg: ExperimentConfig, out: str | Path):
        self.cfg = cfg
        self.root = Path(out) / cfg.name
        self.ckpt = self.root / "checkpoints"
        self.csv = self.root / "csv"
        for p in (self.ckpt, self.csv):
            p.mkdir(parents=True, exist_ok=True)
        self.cd = build_density(cfg)
        self.train, self.test = build_datasets(cfg, self.cd)

    def record(self, command: str, files: list[Path]) -> None:
        path = self.root / "manifest.json"
        manifest = json.loads(path.read_text("utf-8")) if path.exists() else {}
        if manifest.get("config_hash") not in (None, self.cfg.digest()):
            manifest = {}  # a different config owns this directory now; start over
        manifest.update(
            {
                "config": self.cfg.model_dump(mode="json"),
                "config_hash": self.cfg.digest(),
                "seed": self.cfg.seed,
                "versions": {
                    "geoflow": __version__,
                    "numpy": np.__version__,
                    "scipy": scipy.__version__,
                    "pydantic": pydantic.__version__,
                    "python": platform.python_version(),
                },
            }
        )
        outputs = manifest.setdefault("outputs", {})
        outputs[command] = sorted(str(f.relative_to(self.root)) for f in files)
        path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", "utf-8")

    def velocity_path(self, mode: str) -> Path:
        return self.ckpt / f"velocity_{mode}.gfnc"


def _bounds(cfg, x0, x1):
    if cfg.geodesic.bounds is not None:
        return cfg.geodesic.bounds
    lo = np.minimum(x0, x1) - 3.0
    hi = np.maximum(x0, x1) + 3.0
    return ((float(lo[0]), float(hi[0])), (float(lo[1]), float(hi[1])))


def cmd_geodesic(run: Run) -> list[Path]:
    """Node-based solve and grid-oracle comparison for the first test pairs."""
    cfg = run.cfg
    m = run.cd.conditional
    if m is None:
        raise ConfigError("geodesic command needs a non-flat density")
    gcfg = cfg.geodesic.build()
    files, rows = [], []
    for i in range(min(cfg.geodesic.pairs, len(run.test))):
        x0, x1 = run.test.x0[i], run.test.x1[i]
        lin = DiscretePath.linear(x0, x1, cfg.geodesic.n_nodes)
        res = optimize_path(lin, m, gcfg)
        f = run.csv / f"geodesic_pair{i}.csv"
        write_path_csv(f, res.path)
        files.append(f)
        oracle = float("nan")
        if m.dim == 2:
            poly, oracle = grid_geodesic_oracle(m, x0, x1, _bounds(cfg, x0, x1), cfg.geodesic.oracle_resolution)
            f = run.csv / f"oracle_pair{i}.csv"
            write_csv(f, ["x0", "x1"], poly)
            files.append(f)
        rows.append(
            [
                i,
                action(lin, m),
                action(res.path, m),
                polyline_action(res.path.nodes, m),
                oracle,
                float(np.mean(el_residual(lin, m))),
                float(np.mean(el_residual(res.path, m))),
            ]
        )
    f = run.csv / "geodesic_actions.csv"
    write_csv(
        f,
        ["pair", "linear_action", "optimized_action", "optimized_polyline_action", "oracle_action",
         "linear_residual", "optimized_residual"],
        rows,
    )
    files.append(f)
    return files


def cmd_distill(run: Run) -> list[Path]:
    cfg = run.cfg
    dcfg = cfg.distill.build(cfg.seed)
    pairs = run.train.subset(slice(0, min(cfg.distill.n_pairs, len(run.train))))
    result = distill_run(pairs, run.cd, dcfg)
    files = [run.ckpt / "teacher.gfnc", run.ckpt / "student.gfnc", run.csv / "distill_history.csv"]
    save_checkpoint(result.teacher, files[0])
    save_checkpoint(result.student, files[1])
    result.write_history(files[2])
    return files


def _student_for(run: Run, mode: str):
    if mode != "geodesic":
        return None
    path = run.cfg.fm.student_checkpoint
    path = Path(path) if path else run.ckpt / "student.gfnc"
    if not path.exists():
        raise ConfigError(f"fm.student_checkpoint: geodesic mode needs a student checkpoint, {path} not found")
    return load_checkpoint(path)


def cmd_train_fm(run: Run) -> list[Path]:
    cfg = run.cfg
    mode = cfg.fm.interpolant
    net, history = train_fm(run.train, _student_for(run, mode), cfg.fm.build(cfg.seed))
    files = [run.velocity_path(mode), run.csv / f"fm_history_{mode}.csv"]
    save_checkpoint(net, files[0])
    write_history(files[1], history)
    return files


def cmd_sample(run: Run) -> list[Path]:
    cfg = run.cfg
    path = Path(cfg.sample.checkpoint) if cfg.sample.checkpoint else run.velocity_path(cfg.fm.interpolant)
    if not path.exists():
        raise ConfigError(f"sample.checkpoint: {path} not found")
    net = load_checkpoint(path)
    k = min(cfg.sample.n, len(run.test))
    rep = sample(net, run.test.x0[:k], run.test.cond[:k], cfg.sample.nfe, cfg.sample.method)
    f = run.csv / f"trajectory_{path.stem}_nfe{cfg.sample.nfe}.csv"
    write_trajectory(f, rep)
    return [f]


def cmd_eval(run: Run) -> list[Path]:
    """Metrics over whatever checkpoints the run directory holds."""
    cfg = run.cfg
    m = run.cd.conditional
    summary: dict = {"name": cfg.name, "seed": cfg.seed, "n_test": len(run.test)}
    files = []

    rows = []
    for mode in ("linear", "geodesic"):
        path = run.velocity_path(mode)
        if not path.exists():
            continue
        net = load_checkpoint(path)
        for nfe in cfg.eval.nfe:
            rep = sample(net, run.test.x0, run.test.cond, nfe)
            rmse = endpoint_rmse(rep.endpoint, run.test.x1)
            ed = energy_distance(rep.endpoint, run.test.x1, cfg.eval.energy_max_points)
            rows.append([mode, nfe, rmse, ed])
            summary[f"endpoint_rmse_{mode}_nfe{nfe}"] = rmse
            summary[f"energy_distance_{mode}_nfe{nfe}"] = ed
    if rows:
        f = run.csv / "fm_metrics.csv"
        write_csv(f, ["interpolant", "nfe", "endpoint_rmse", "energy_distance"], rows)
        files.append(f)

    student_path = run.ckpt / "student.gfnc"
    k = min(cfg.eval.curve_pairs, len(run.test))
    x0, x1 = run.test.x0[:k], run.test.x1[:k]
    if student_path.exists() and m is not None:
        student = load_checkpoint(student_path)
        tg = np.arange(1, cfg.eval.t_grid + 1) / (cfg.eval.t_grid + 1.0)
        lin_curve, _ = el_residual_curve(None, m, (x0, x1), tg)
        stu_curve, skipped = el_residual_curve(student, m, (x0, x1), tg)
        f = run.csv / "el_residual_curve.csv"
        write_csv(f, ["t", "linear", "student"], np.column_stack([tg, lin_curve, stu_curve]))
        files.append(f)
        summary["residual_linear"] = float(np.mean(interpolant_residual(None, m, x0, x1)))
        summary["residual_student"] = float(np.mean(interpolant_residual(student, m, x0, x1)))
        summary["residual_curve_skipped"] = skipped
        smooth_rows = []
        for i in range(k):
            pl = path_smoothness(interpolant_nodes(None, x0[i], x1[i], 10))
            ps = path_smoothness(interpolant_nodes(student, x0[i], x1[i], 10))
            smooth_rows.append([i, *pl, *ps])
        f = run.csv / "path_smoothness.csv"
        write_csv(f, ["pair", "ppl_linear", "turning_linear", "ppl_student", "turning_student"], smooth_rows)
        files.append(f)
    f = run.root / "summary.json"
    f.write_text(json.dumps({k: _jsonable(v) for k, v in summary.items()}, sort_keys=True, indent=2) + "\n", "utf-8")
    files.append(f)
    return files


def _jsonable(v):
    if isinstance(v, float):
        return float(fmt(v))
    return v


COMMANDS = {
    "geodesic": cmd_geodesic,
    "distill": cmd_distill,
    "train-fm": cmd_train_fm,
    "sample": cmd_sample,
    "eval": cmd_eval,
}


def cmd_pipeline(run: Run) -> list[Path]:
    """distill, linear and geodesic flow matching, sampling and evaluation in sequence."""
    files = []
    files += _recorded(run, "distill")
    for mode in ("linear", "geodesic"):
        sub = run.cfg.model_copy(update={"fm": run.cfg.fm.model_copy(update={"interpolant": mode})})
        sub_run = _rebind(run, sub)
        files += _recorded(sub_run, "train-fm", key=f"train-fm-{mode}")
        files += _recorded(sub_run, "sample", key=f"sample-{mode}")
    files += _recorded(run, "eval")
    return files


def _rebind(run: Run, cfg: ExperimentConfig) -> Run:
    new = Run.__new__(Run)
    new.__dict__.update(run.__dict__)
    new.cfg = cfg
    return new


def _recorded(run: Run, command: str, key: str | None = None) -> list[Path]:
    files = COMMANDS[command](run)
    run.record(key or command, files)
    return files


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="geoflow", description="Probability-density geodesic flow matching lab")
    p.add_argument("command", choices=[*COMMANDS, "pipeline"])
    p.add_argument("--config", required=True, help="path to the JSON experiment config")
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.add_argument("--out", default="runs", help="parent directory of run directories")
    return p


def _format_validation(exc: pydantic.ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(x) for x in err["loc"]) or "<root>"
        lines.append(f"{loc}: {err['msg']}")
    return "\n".join(lines)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.seed)
        run = Run(cfg, args.out)
        if args.command == "pipeline":
            cmd_pipeline(run)
        else:
            _recorded(run, args.command)
    except (NumericalError, GeodesicDivergence, DistillDivergence, DegeneratePathError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except pydantic.ValidationError as exc:
        print(f"config error:\n{_format_validation(exc)}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigError, FileNotFoundError, json.JSONDecodeError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
