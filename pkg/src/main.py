import json
import logging
import os
import sys
from datetime import datetime
from pathlib import Path
from typing import Callable, List, Optional, Tuple

import numpy as np
import typer

from src.common.artifacts import write_report
from src.common.db import create_tables, get_session
from src.common.errors import AblationDirectionError, ArtifactError, ConfigError, HirsError
from src.common.settings import artifact_header, get_out_root, parse_cli_overrides
from src.services import evalsuite, synthbench, trainer
from src.services.data import Dataset, cached_dataset, load_dataset, prepare_dataset, save_dataset
from src.services.edgegen import format_gate_matrix
from src.services.run_config import RunConfig, load_run_config, parse_list
from src.services.run_ledger import RunLedgerService

logger = logging.getLogger(__name__)

app = typer.Typer(
    name="hirs",
    help="Hypergraph feature-interaction recommender: training, evaluation and benchmarks.",
    no_args_is_help=True,
    add_completion=False,
)

EXTRA_ARGS = {"allow_extra_args": True, "ignore_unknown_options": True}

Artifacts = List[Tuple[str, Path]]
Body = Callable[[RunConfig, Path, str], Tuple[dict, Artifacts]]


def setup_logging(level: Optional[str] = None):
    level = (level or os.getenv("HIRS_LOG_LEVEL", "INFO")).upper()
    if level not in logging.getLevelNamesMapping():
        raise typer.BadParameter(f"unknown log level '{level}'", param_hint="--log-level")
    logging.basicConfig(level=level, format="%(asctime)s - %(levelname)s - %(message)s")
    logging.getLogger().setLevel(level)


@app.callback()
def configure(
    log_level: Optional[str] = typer.Option(
        None, "--log-level", help="DEBUG, INFO, WARNING or ERROR (default: HIRS_LOG_LEVEL or INFO)"
    ),
):
    setup_logging(log_level)


def _output_dir(cfg: RunConfig, subcommand: str) -> Path:
    if cfg.options.out_dir:
        return Path(cfg.options.out_dir)
    stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
    return get_out_root() / f"{stamp}-{subcommand}-{cfg.hash[:10]}"


def _execute(subcommand: str, ctx: typer.Context, config: Optional[Path], seed: Optional[int], body: Body):
    """Loads the config, records the run in the ledger and maps errors to exit codes."""
    ledger = None
    run_id = None
    try:
        cfg = load_run_config(config, parse_cli_overrides(list(ctx.args)), seed)
        out_dir = _output_dir(cfg, subcommand)
        out_dir.mkdir(parents=True, exist_ok=True)
        create_tables()
        ledger = RunLedgerService(get_session())
        run_id = ledger.create_run(subcommand, cfg.hash, cfg.seed, str(out_dir)).run_id
        ledger.update_run_status(run_id, "running")

        summary, artifacts = body(cfg, out_dir, artifact_header(subcommand, cfg.hash))

        for kind, path in artifacts:
            ledger.add_artifact(run_id, kind, str(path))
        ledger.update_run_status(run_id, "completed", summary)
        logger.info(f"{subcommand} finished; artifacts in {out_dir}")
        typer.echo(json.dumps({"status": "ok", "out_dir": str(out_dir), **summary}, default=str))
    except HirsError as e:
        logger.error(f"{subcommand} failed: {e.message}")
        if ledger is not None and run_id is not None:
            ledger.update_run_status(run_id, "failed", e.to_dict())
        typer.echo(json.dumps(e.to_dict(), default=str), err=True)
        raise typer.Exit(code=2)
    except typer.Exit:
        raise
    except Exception as e:
        logger.exception(f"{subcommand} failed unexpectedly")
        if ledger is not None and run_id is not None:
            ledger.update_run_status(run_id, "failed", {"error": type(e).__name__, "message": str(e)})
        typer.echo(json.dumps({"error": "internal_error", "message": str(e)}), err=True)
        raise typer.Exit(code=1)


def _dataset(cfg: RunConfig) -> Dataset:
    if cfg.options.dataset_path:
        return load_dataset(cfg.options.dataset_path)
    if cfg.options.spec_path:
        spec = synthbench.load_planted_spec(cfg.options.spec_path)
        n = cfg.options.synth_samples or spec.n_samples
        generated = synthbench.generate(spec, n, np.random.default_rng([cfg.seed, 10]))
        return generated.split(np.random.default_rng([cfg.seed, 11]))
    if not cfg.schema.ratings_path:
        raise ConfigError("no data source: set ratings_path, dataset_path or spec_path")
    if not Path(cfg.schema.ratings_path).is_file():
        raise ConfigError(f"ratings file not found: {cfg.schema.ratings_path}")
    if cfg.options.use_cache:
        return cached_dataset(cfg.schema, cfg.seed)
    return prepare_dataset(cfg.schema, cfg.seed)


def _checkpoint(cfg: RunConfig, dataset: Dataset) -> trainer.ModelState:
    if not cfg.options.checkpoint:
        raise ArtifactError("this command needs --checkpoint <path>")
    return trainer.load_checkpoint(cfg.options.checkpoint, cfg.train, dataset.vocab.size)


def _spec(cfg: RunConfig) -> synthbench.PlantedSpec:
    if not cfg.options.spec_path:
        raise ConfigError("this command needs --spec_path <file>")
    return synthbench.load_planted_spec(cfg.options.spec_path)


# --- Command bodies ---


def run_train(cfg: RunConfig, out_dir: Path, header: str):
    dataset = _dataset(cfg)
    result = trainer.train(dataset, cfg.train, out_dir, cfg.hash, cfg.options.resume_from)
    test = trainer.evaluate(result.state, dataset.test, cfg.train) if dataset.test else None
    summary = {
        "best_epoch": result.state.best_epoch,
        "best_val_recall10": result.best_recall,
        "test": test.metrics if test else None,
        "single_label_batches": result.single_label_batches,
    }
    report = write_report(out_dir / "test_metrics.json", "train", cfg.hash, summary)
    artifacts = [
        ("metrics", out_dir / "metrics.jsonl"),
        ("checkpoint", out_dir / "best.ckpt"),
        ("checkpoint", out_dir / "last.ckpt"),
        ("report", report),
    ]
    return summary, artifacts


def run_evaluate(cfg: RunConfig, out_dir: Path, header: str):
    dataset = _dataset(cfg)
    state = _checkpoint(cfg, dataset)
    ranking = trainer.evaluate(state, dataset.test, cfg.train)
    body = {"checkpoint": cfg.options.checkpoint, **ranking.to_dict()}
    report = write_report(out_dir / "metrics.json", "evaluate", cfg.hash, body)
    return ranking.to_dict(), [("report", report)]


def run_ablate(cfg: RunConfig, out_dir: Path, header: str):
    flags = [f.strip() for f in cfg.options.flags.split(",") if f.strip()]
    reports = trainer.ablate(_dataset(cfg), cfg.train, flags, workers=cfg.options.workers)
    body = {"variants": {name: r.to_dict() for name, r in reports.items()}}
    report = write_report(out_dir / "ablation.json", "ablate", cfg.hash, body)
    summary = {name: r.metrics["recall@10"] for name, r in reports.items()}
    return summary, [("report", report)]


def run_sweep(cfg: RunConfig, out_dir: Path, header: str):
    values = parse_list(cfg.options.sweep_values) or None
    rows = trainer.sweep(
        _dataset(cfg), cfg.train, cfg.options.sweep_param, values, workers=cfg.options.workers
    )
    report = write_report(out_dir / "sweep.json", "sweep", cfg.hash, {"runs": rows})
    summary = {str(row["value"]): row["metrics"]["recall@10"] for row in rows}
    return summary, [("report", report)]


def run_dump(cfg: RunConfig, out_dir: Path, header: str):
    dataset = _dataset(cfg)
    state = _checkpoint(cfg, dataset)
    samples = dataset.test[: cfg.options.dump_samples]
    gates = trainer.collect_eval_gates(state, samples, cfg.train)
    artifacts: Artifacts = []
    for i, (sample, gate) in enumerate(zip(samples, gates)):
        names = [dataset.vocab.name_of(fid) for fid, _ in sample.features]
        text = evalsuite.dump_incidence(gate.values, names, cfg.train.gate_threshold, header)
        artifacts.append(("dump", evalsuite.write_text(out_dir / f"interactions_{i}.txt", text)))
        raw = header + "\n" + format_gate_matrix(gate.values, names)
        artifacts.append(("dump", evalsuite.write_text(out_dir / f"gates_{i}.txt", raw)))
    histogram = evalsuite.order_histogram([g.values for g in gates], cfg.train.gate_threshold)
    report = write_report(
        out_dir / "order_histogram.json", "dump-interactions", cfg.hash, histogram.to_dict()
    )
    return {"samples": len(samples), **histogram.to_dict()}, artifacts + [("report", report)]


def run_synth_gen(cfg: RunConfig, out_dir: Path, header: str):
    spec = _spec(cfg)
    n = cfg.options.synth_samples or spec.n_samples
    generated = synthbench.generate(spec, n, np.random.default_rng([cfg.seed, 10]))
    dataset = generated.split(np.random.default_rng([cfg.seed, 11]))
    data_path = save_dataset(out_dir / "synth.hirsdata", dataset, header)
    truth = write_report(
        out_dir / "ground_truth.json",
        "synth-gen",
        cfg.hash,
        {
            "spec": spec.model_dump(),
            "bayes_accuracy": synthbench.bayes_accuracy(spec),
            "positive_rate": float(np.mean([s.label for s in generated.samples])),
        },
    )
    return {"samples": n, "dataset": str(data_path)}, [("dataset", data_path), ("report", truth)]


def run_synth_bench(cfg: RunConfig, out_dir: Path, header: str):
    spec = _spec(cfg)
    if cfg.options.synth_samples:
        spec = spec.model_copy(update={"n_samples": cfg.options.synth_samples})
    suite = synthbench.ablation_suite(
        spec,
        cfg.train,
        seeds=parse_list(cfg.options.synth_seeds, int),
        workers=cfg.options.workers,
        strict=False,
    )
    fit = synthbench.interaction_fit_check(seed=cfg.seed)
    body = {"ablation": suite.to_dict(), "interaction_fit": fit.to_dict()}
    report = write_report(out_dir / "synth_bench.json", "synth-bench", cfg.hash, body)
    if cfg.options.strict and suite.violations:
        raise AblationDirectionError(
            f"ablation ordering violated: {suite.violations[0]}", violations=suite.violations
        )
    return {"violations": suite.violations, **fit.to_dict()}, [("report", report)]


def run_gradcheck(cfg: RunConfig, out_dir: Path, header: str):
    reports = [
        trainer.gradcheck_objective(cfg.train, seed, cfg.options.gradcheck_tolerance)
        for seed in range(cfg.seed, cfg.seed + cfg.options.gradcheck_seeds)
    ]
    worst = max(reports, key=lambda r: r.max_rel_error)
    body = {"seeds": [r.to_dict() for r in reports], "worst": worst.to_dict()}
    report = write_report(out_dir / "gradcheck.json", "gradcheck", cfg.hash, body)
    worst.raise_if_failed()
    return {"max_rel_error": worst.max_rel_error, "passed": worst.passed}, [("report", report)]


def run_bench_scaling(cfg: RunConfig, out_dir: Path, header: str):
    dataset = _dataset(cfg)
    samples = dataset.train[: cfg.options.bench_samples]
    ks = parse_list(cfg.options.bench_ks, int)
    ms = parse_list(cfg.options.bench_ms, int) or [min(s.m for s in samples)]
    table = evalsuite.scaling_bench(
        samples, dataset.vocab.size, cfg.train, ks, ms, cfg.options.bench_repeats
    )
    csv_path = evalsuite.write_text(out_dir / "scaling.csv", table.to_csv(header))
    summary = {"slope_k": table.slope_k, "slope_m": table.slope_m, "rows": len(table.rows)}
    return summary, [("csv", csv_path)]


# --- Commands ---


def _command(name: str, body: Body, help_text: str):
    @app.command(name, context_settings=EXTRA_ARGS, help=help_text)
    def command(
        ctx: typer.Context,
        config: Optional[Path] = typer.Option(None, "--config", "-c", help="key=value config file"),
        seed: Optional[int] = typer.Option(None, "--seed", help="overrides every rng stream"),
    ):
        _execute(name, ctx, config, seed, body)

    return command


_command("train", run_train, "Train on a dataset and keep the best validation checkpoint.")
_command("evaluate", run_evaluate, "Rank the test split with a checkpoint.")
_command("ablate", run_ablate, "Train the full model and ablation variants.")
_command("sweep", run_sweep, "Grid over one hyperparameter.")
_command("dump-interactions", run_dump, "Write thresholded incidence grids for test samples.")
_command("synth-gen", run_synth_gen, "Generate a planted-interaction dataset.")
_command("synth-bench", run_synth_bench, "Ablation directions and interaction recovery on synthetic data.")
_command("gradcheck", run_gradcheck, "Finite-difference check of the full objective.")
_command("bench-scaling", run_bench_scaling, "Epoch time over k and m.")


@app.command("runs")
def runs(
    subcommand: Optional[str] = typer.Option(None, "--subcommand"),
    limit: int = typer.Option(20, "--limit"),
):
    """List recorded runs, newest first."""
    create_tables()
    ledger = RunLedgerService(get_session())
    for run in ledger.list_runs(subcommand=subcommand, limit=limit):
        typer.echo(
            f"{run.created_at:%Y-%m-%d %H:%M:%S}  {run.subcommand:<18} {run.status:<10} "
            f"{run.config_hash[:10]}  seed={run.seed}  {run.out_dir}"
        )


def main():
    app()


if __name__ == "__main__":
    sys.exit(main())
