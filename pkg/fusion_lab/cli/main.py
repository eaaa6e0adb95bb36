import functools
import json
import logging
from pathlib import Path
from typing import List, Optional

import typer
from pydantic import ValidationError
from rich.console import Console
from rich.logging import RichHandler
from rich.panel import Panel

from ..dataflows.world import gen_dataset, save_dataset
from ..errors import ConfigError, LabError
from ..frozen.bundle import FrozenConfig, LMKind, build_frozen_bundle, save_bundle
from ..frozen.pretraining import PretrainRecipe
from ..harness.benchmark import bench_epoch_time, bench_generation_time, write_bench_report
from ..harness.experiment_runner import ExperimentRunner, grounding_ablation, zero_shot_eval
from ..harness.records import load_run_record
from ..harness.run_config import ExperimentKind, RunConfig, load_run_config
from ..harness.suites import run_alignment, run_probe_suite
from ..harness.sweep import run_sweep, write_sweep_report
from ..lab_configs import get_config, set_config
from ..tensor.rng import MAX_SEED
from .report_generator import write_trend_report
from .utils import bench_table, heatmap_table, metrics_table, probe_table, summary_table

console = Console()

app = typer.Typer(
    name="fusion_lab",
    help="fusion_lab CLI: grounded QFormer fusion experiments on frozen toy models",
    add_completion=True,
)


class CliState:
    config_path: Optional[Path] = None
    seed: Optional[int] = None
    out: Optional[Path] = None


state = CliState()


def guarded(command):
    """Map lab errors to exit codes: 2 config, 3 training, 4 audit, 5 format."""

    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except ValidationError as e:
            console.print(Panel(str(e), title="Config error", border_style="red"))
            raise typer.Exit(code=2)
        except LabError as e:
            console.print(Panel(str(e), title=type(e).__name__, border_style="red"))
            raise typer.Exit(code=e.exit_code)

    return wrapper


def load_config(*kinds: ExperimentKind) -> RunConfig:
    if state.config_path is None:
        raise ConfigError("This command needs --config <path>")
    config = load_run_config(
        state.config_path,
        seed=state.seed,
        output_dir=str(state.out) if state.out else None,
    )
    if kinds and config.kind not in kinds:
        raise ConfigError(f"Config kind '{config.kind.value}' does not fit this command (expected {[k.value for k in kinds]})")
    return config


def _out_dir(default: str) -> Path:
    return state.out or Path(get_config()["results_dir"]) / default


@app.callback()
def main(
    config: Optional[Path] = typer.Option(None, "--config", help="RunConfig JSON file"),
    seed: Optional[int] = typer.Option(None, "--seed", min=0, max=MAX_SEED, help="Override the config seed (u64)"),
    out: Optional[Path] = typer.Option(None, "--out", help="Output directory"),
    single_thread: bool = typer.Option(True, "--single-thread/--multi-thread", help="Pin BLAS thread pools to one thread"),
    verbose: bool = typer.Option(False, "--verbose", "-v"),
):
    """fusion_lab CLI: grounded QFormer fusion experiments on frozen toy models"""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        handlers=[RichHandler(console=console, show_path=False, rich_tracebacks=True)],
        force=True,
    )
    state.config_path, state.seed, state.out = config, seed, out
    set_config({"single_thread": single_thread})


@app.command("make-frozen")
@guarded
def make_frozen(
    lm_kind: LMKind = typer.Option(LMKind.ENCODER_DECODER, "--lm-kind", help="encoder-decoder or decoder-only"),
):
    """Pretrain, freeze and save a toy vision encoder + language model bundle."""
    seed = state.seed or 0
    bundle = build_frozen_bundle(seed, FrozenConfig.from_lab_config(lm_kind=lm_kind), PretrainRecipe.from_lab_config())
    directory = save_bundle(bundle, _out_dir(f"bundle-{lm_kind.value}-{seed}"))
    console.print(Panel(f"fingerprint {bundle.fingerprint}\nheld-out losses {bundle.heldout_losses}", title=f"Bundle saved to {directory}"))


@app.command("gen-data")
@guarded
def gen_data(n_scenes: int = typer.Option(None, "--n-scenes", help="Number of scenes")):
    """Generate and save the synthetic scene dataset."""
    seed = state.seed or 0
    config = get_config()
    dataset = gen_dataset(seed, n_scenes or config["n_scenes"], config["holdout"], config["split_fractions"])
    directory = save_dataset(dataset, _out_dir(f"dataset-{seed}"))
    spec = dataset.split_spec
    console.print(Panel(f"train {len(spec.train)}, val {len(spec.val)}, test {len(spec.test)}", title=f"Dataset saved to {directory}"))


@app.command()
@guarded
def train():
    """Run a single-task or multitask training config."""
    config = load_config(ExperimentKind.SINGLE_TASK_CAPTION, ExperimentKind.SINGLE_TASK_VQA, ExperimentKind.MULTITASK)
    with console.status(f"Training {config.kind.value} ({config.pipeline.value})") as status:

        def on_epoch(row):
            status.update(f"Epoch {row['epoch']} {row['phase']}: loss {row['loss']:.4f}")

        record, _ = ExperimentRunner(config).run_training(on_epoch=on_epoch)
    console.print(metrics_table(record))
    console.print(summary_table(record.summary))
    console.print(f"Run written to [bold]{record.run_dir}[/bold]")


@app.command("eval-zero-shot")
@guarded
def eval_zero_shot(
    run_dir: Optional[Path] = typer.Option(None, "--run-dir", help="Finished multitask run to evaluate; trains one when omitted"),
):
    """Accuracy on held-out attribute combinations, with the random-guess baseline."""
    config = load_config(ExperimentKind.ZERO_SHOT)
    runner = ExperimentRunner(config)
    if run_dir is not None:
        record, qformer = load_run_record(run_dir), None
    else:
        record, qformer = runner.run_training()
    result = zero_shot_eval(config, record, qformer, runner.bundle, runner.dataset)
    target = Path(record.run_dir or runner.run_dir()) / "zero_shot.json"
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(json.dumps(result, indent=2))
    console.print(summary_table(result, "Zero-shot"))


@app.command()
@guarded
def probe():
    """Linear-probe QFormer outputs onto LM layer representations."""
    config = load_config(ExperimentKind.PROBE, ExperimentKind.LAYER_SWEEP)
    for name, report in run_probe_suite(config).items():
        console.print(probe_table(name, report))


@app.command()
@guarded
def align():
    """Mutual-KNN alignment heatmap between LM and vision layers."""
    config = load_config(ExperimentKind.ALIGN)
    console.print(heatmap_table(run_alignment(config)))


@app.command("bench-time")
@guarded
def bench_time():
    """Per-epoch training and per-pass generation time, standard vs grounded."""
    config = load_config(ExperimentKind.BENCH_TIME)
    runner = ExperimentRunner(config)
    report = {
        "epoch": bench_epoch_time(config, runner.bundle),
        "generation": bench_generation_time(config, runner.bundle, runner.dataset),
    }
    path = write_bench_report(report, runner.run_dir() / "bench_time.json")
    console.print(bench_table(report["epoch"], "median_epoch_seconds", "Training epoch"))
    console.print(bench_table(report["generation"], "median_pass_seconds", "Generation pass"))
    console.print(f"Report written to [bold]{path}[/bold]")


@app.command("ablate-grounding")
@guarded
def ablate_grounding():
    """Grounded pipeline with and without grounding states, matched seeds."""
    config = load_config(ExperimentKind.GROUNDING_ABLATION)
    grounded, empty, curves = grounding_ablation(config)
    console.print(metrics_table(grounded, "with grounding"))
    console.print(metrics_table(empty, "without grounding"))
    console.print(f"Curves written to [bold]{curves}[/bold]")


@app.command()
@guarded
def sweep(lr: Optional[List[float]] = typer.Option(None, "--lr", help="Learning rate (repeatable)")):
    """Learning-rate sweep of both pipelines with a fixed epoch budget."""
    config = load_config(ExperimentKind.SINGLE_TASK_CAPTION)
    report = run_sweep(config, lr)
    directory = write_sweep_report(report, _out_dir("sweep"))
    console.print(summary_table({p: report.best(p) for p in report.max_over_configs}, "Best BLEU-4 per pipeline"))
    console.print(f"Sweep written to [bold]{directory}[/bold]")


@app.command()
@guarded
def report(run_dirs: List[Path] = typer.Argument(..., help="Finished run directories")):
    """Markdown + PDF trend report over finished runs."""
    md_path, pdf_path = write_trend_report(run_dirs, _out_dir("reports"))
    console.print(f"Report written to [bold]{md_path}[/bold] and [bold]{pdf_path}[/bold]")


if __name__ == "__main__":
    app()
