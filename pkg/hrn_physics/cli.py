"""
Command-line pipelines for hierarchical relation network physics models.

Subcommands:
- gen:     simulate scenario trajectories into .hrnt files
- train:   fit a model (or an ablation variant) on a directory of trajectories
- rollout: predict a trajectory recursively from a checkpoint
- eval:    score checkpoints and baselines with cumulative error metrics
- config:  print or write the reference configuration

Every command reads the same JSON5 run config (`--config`), overridden by
HRN_<SECTION>__<KEY> environment variables and then by command-line flags.
"""

import functools
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import click
import numpy as np
from click_help_colors import HelpColorsGroup

from hrn_physics import training
from hrn_physics.config import (
    VARIANTS,
    RunConfig,
    apply_variant,
    config_to_dict,
    load_config,
    reference_config_text,
    write_reference_config,
)
from hrn_physics.errors import HrnError, InvalidArgumentError
from hrn_physics.evaluation import (
    METRICS,
    IdentityPredictor,
    ModelPredictor,
    OraclePredictor,
    evaluate,
    rollout,
    window_errors,
)
from hrn_physics.files import (
    list_trajectories,
    load_checkpoint,
    read_trajectory,
    save_checkpoint,
    write_curve_csv,
    write_metric_csv,
    write_report_json,
    write_rollout_csv,
    write_trajectory,
)
from hrn_physics.render import render_curve, render_metric_table, render_trajectory_summary
from hrn_physics.scenarios import SCENARIOS, Trajectory, gen_scenario
from hrn_physics.utils import derive_seeds

CONTEXT_SETTINGS = {"help_option_names": ["-h", "--help"]}


def reports_errors(command):
    """Turn library errors into `Error: ...` on stderr and exit status 1."""

    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except (HrnError, OSError) as e:
            click.echo(f"Error: {e}", err=True)
            raise SystemExit(1)

    return wrapper


def config_option(command):
    return click.option(
        "--config",
        "config_path",
        metavar="PATH",
        type=click.Path(dir_okay=False),
        default=None,
        help="JSON5 run config (defaults apply to missing keys)",
    )(command)


def seed_option(command):
    return click.option(
        "--seed",
        type=int,
        default=None,
        help="Override the config seed",
    )(command)


SINGLE_PROCESS_HELP = "Accepted for symmetry with gen; this command always runs in one process"


def deterministic_option(help_text: str = "Single process, bit-reproducible mode"):
    return click.option("--deterministic", is_flag=True, help=help_text)


def _effective_config(config_path: str | None, seed: int | None) -> RunConfig:
    cfg = load_config(config_path)
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    return cfg


@click.group(
    context_settings=CONTEXT_SETTINGS,
    cls=HelpColorsGroup,
    help_headers_color="yellow",
    help_options_color="green",
)
@click.version_option(package_name="hrn-physics")
def main():
    """
    Learn particle physics with hierarchical relation networks.

    \b
    EXAMPLES:

    # Write the reference config, then edit it
    hrn-physics config --out run.json5

    # Simulate 20 throw-one trajectories into data/train
    hrn-physics gen --config run.json5 --out data/train

    # Train the full model and a flat-graph control
    hrn-physics train --config run.json5 --out runs/hrn
    hrn-physics train --config run.json5 --variant flat-graph --out runs/flat

    # Roll a trajectory forward 50 steps
    hrn-physics rollout runs/hrn data/test/throw-one-0000.hrnt --steps 50

    # Compare checkpoints against the identity baseline
    hrn-physics eval runs/hrn runs/flat identity --test data/test
    """


def _generate(cfg: RunConfig, seed: int) -> Trajectory:
    scenario = cfg.scenario
    traj = gen_scenario(
        scenario.name,
        scenario.overrides,
        seed=seed,
        n_frames=scenario.n_frames,
        sim_cfg=cfg.sim,
        hierarchy_cfg=cfg.hierarchy,
    )
    header = replace(traj.header, config={**traj.header.config, "run": config_to_dict(cfg)})
    return Trajectory(header, traj.positions, traj.velocities, traj.forces)


@main.command(context_settings=CONTEXT_SETTINGS)
@config_option
@seed_option
@click.option("--out", "out_dir", metavar="DIR", type=click.Path(file_okay=False),
              default=None, help="Output directory [default: paths.data_dir]")
@click.option("--scenario", type=click.Choice(SCENARIOS), default=None,
              help="Override scenario.name")
@click.option("-n", "--count", type=click.IntRange(min=0), default=None,
              help="Override scenario.n_trajectories")
@click.option("--workers", type=click.IntRange(min=1), default=None,
              help="Worker processes (ignored with --deterministic)")
@deterministic_option()
@reports_errors
def gen(config_path, seed, out_dir, scenario, count, workers, deterministic):
    """Simulate trajectories with seeds seed, seed+1, ... into .hrnt files."""
    cfg = _effective_config(config_path, seed)
    if scenario is not None:
        cfg = replace(cfg, scenario=replace(cfg.scenario, name=scenario))
    if count is not None:
        cfg = replace(cfg, scenario=replace(cfg.scenario, n_trajectories=count))
    out = Path(out_dir or cfg.paths.data_dir).expanduser()
    seeds = derive_seeds(cfg.seed, cfg.scenario.n_trajectories)
    paths = [out / f"{cfg.scenario.name}-{i:04d}.hrnt" for i in range(len(seeds))]

    if deterministic or len(seeds) <= 1 or workers == 1:
        trajectories = [_generate(cfg, s) for s in seeds]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            trajectories = list(pool.map(_generate, [cfg] * len(seeds), seeds))

    for path, traj in zip(paths, trajectories):
        write_trajectory(path, traj)
    render_trajectory_summary(list(zip(paths, trajectories)))


def _load_dir(directory: Path) -> list[Trajectory]:
    paths = list_trajectories(directory)
    if not paths:
        raise InvalidArgumentError(f"no .hrnt trajectories in {directory}")
    return [read_trajectory(p) for p in paths]


@main.command("train", context_settings=CONTEXT_SETTINGS)
@config_option
@seed_option
@click.option("--data", "data_dir", metavar="DIR", type=click.Path(file_okay=False),
              default=None, help="Training trajectories [default: paths.data_dir]")
@click.option("--out", "out_path", metavar="STEM", type=click.Path(), default=None,
              help="Checkpoint stem, writes STEM.json and STEM.bin [default: paths.checkpoint]")
@click.option("--variant", type=click.Choice(list(VARIANTS)), default=None,
              help="Ablation or loss variant applied on top of the config")
@click.option("--epochs", type=click.IntRange(min=0), default=None,
              help="Override optim.epochs (total, including resumed epochs)")
@click.option("--resume", "resume_path", metavar="STEM", type=click.Path(), default=None,
              help="Continue from a checkpoint's parameters, Adam moments and step")
@deterministic_option(SINGLE_PROCESS_HELP)
@reports_errors
def train_command(
    config_path, seed, data_dir, out_path, variant, epochs, resume_path, deterministic
):
    """Train a model on one-step transitions and write a checkpoint."""
    cfg = _effective_config(config_path, seed)
    if variant is not None:
        cfg = apply_variant(cfg, variant)
    if epochs is not None:
        cfg = replace(cfg, optim=replace(cfg.optim, epochs=epochs))
    directory = Path(data_dir or cfg.paths.data_dir).expanduser()
    if not directory.is_dir():
        raise InvalidArgumentError(f"data directory not found: {directory}")
    trajectories = _load_dir(directory)

    resume = None
    label = variant or "hrn"
    if resume_path is not None:
        resume, manifest = load_checkpoint(resume_path)
        label = variant or manifest.get("label", label)
        click.echo(f"Resuming {label} at epoch {resume.epochs_done}, step {resume.optimizer.step}")

    result = training.train(
        trajectories,
        cfg.model,
        cfg.loss,
        cfg.optim,
        seed=cfg.seed,
        resume=resume,
        print_fn=click.echo,
    )
    stem = Path(out_path or cfg.paths.checkpoint).expanduser()
    manifest_path = save_checkpoint(stem, result, label=label, config=config_to_dict(cfg))
    curve_path = write_curve_csv(stem.with_name(stem.name + ".curve.csv"), result.curve)
    render_curve(result.curve)
    click.echo(f"Wrote checkpoint: {manifest_path}")
    click.echo(f"Wrote curve: {curve_path}")


@main.command("rollout", context_settings=CONTEXT_SETTINGS)
@click.argument("checkpoint", type=click.Path())
@click.argument("trajectory", type=click.Path(dir_okay=False))
@config_option
@click.option("--steps", "n_steps", type=click.IntRange(min=0), default=None,
              help="Predicted steps [default: eval.rollout_steps]")
@click.option("--start", type=click.IntRange(min=0), default=None,
              help="Last seed frame [default: history - 1]")
@click.option("--out", "out_path", metavar="PATH", type=click.Path(dir_okay=False),
              default=None, help="Predicted .hrnt file [default: paths.reports]")
@click.option("--csv", "csv_path", metavar="PATH", type=click.Path(dir_okay=False),
              default=None, help="Also write per-frame errors against the source trajectory")
@deterministic_option(SINGLE_PROCESS_HELP)
@reports_errors
def rollout_command(checkpoint, trajectory, config_path, n_steps, start, out_path, csv_path,
                    deterministic):
    """Recursively predict TRAJECTORY from its seed frames."""
    cfg = _effective_config(config_path, None)
    result, _ = load_checkpoint(checkpoint)
    model = result.model
    source = read_trajectory(trajectory)
    n_steps = cfg.eval.rollout_steps if n_steps is None else n_steps
    start = model.history - 1 if start is None else start

    predicted = rollout(model, source, n_steps, start)
    predicted = Trajectory(
        replace(
            predicted.header,
            config={**predicted.header.config, "run": config_to_dict(cfg)},
        ),
        predicted.positions,
        predicted.velocities,
        predicted.forces,
    )
    out = Path(out_path) if out_path else Path(cfg.paths.reports) / (
        Path(trajectory).stem + "-rollout.hrnt"
    )
    write_trajectory(out.expanduser(), predicted)
    click.echo(f"Wrote rollout: {out} ({predicted.n_frames} frames)")

    scored = min(n_steps, source.n_frames - 1 - start)
    if scored < 1:
        click.echo("No ground-truth frames to score against.")
        return
    errors = window_errors(predicted.positions[model.history : model.history + scored],
                           source, start)
    totals = ", ".join(f"{m} {float(np.sum(errors[m])):.4g}" for m in METRICS)
    click.echo(f"Cumulative MSE over {scored} steps: {totals}")
    if csv_path:
        write_rollout_csv(csv_path, errors, start)
        click.echo(f"Wrote per-frame errors: {csv_path}")


def _predictors(sources: tuple[str, ...], baselines: tuple[str, ...]) -> list:
    predictors = []
    labels: set[str] = set()
    for source in list(sources) + [b for b in baselines if b not in sources]:
        if source == "oracle":
            predictor = OraclePredictor()
        elif source == "identity":
            predictor = IdentityPredictor()
        else:
            result, manifest = load_checkpoint(source)
            label = manifest.get("label", "hrn")
            if label in labels:
                label = f"{label}:{Path(source).name}"
            predictor = ModelPredictor(result.model, label)
        labels.add(predictor.label)
        predictors.append(predictor)
    return predictors


@main.command("eval", context_settings=CONTEXT_SETTINGS)
@click.argument("models", nargs=-1, required=True)
@config_option
@click.option("--test", "test_dir", metavar="DIR", type=click.Path(file_okay=False),
              default=None, help="Test trajectories [default: paths.test_dir]")
@click.option("--horizon", type=click.IntRange(min=1), default=None,
              help="Rollout horizon [default: eval.horizon]")
@click.option("--stride", type=click.IntRange(min=1), default=None,
              help="Frames between window starts [default: eval.stride]")
@click.option("--metric", type=click.Choice(METRICS), default="position", show_default=True,
              help="Metric used to rank the models")
@click.option("--out", "out_dir", metavar="DIR", type=click.Path(file_okay=False),
              default=None, help="Report directory [default: paths.reports]")
@deterministic_option(SINGLE_PROCESS_HELP)
@reports_errors
def eval_command(models, config_path, test_dir, horizon, stride, metric, out_dir, deterministic):
    """Score MODELS (checkpoint stems, or one of: oracle, identity)."""
    cfg = _effective_config(config_path, None)
    directory = Path(test_dir or cfg.paths.test_dir).expanduser()
    trajectories = _load_dir(directory)
    predictors = _predictors(models, cfg.eval.baselines)

    reports = evaluate(
        predictors,
        trajectories,
        horizon=horizon or cfg.eval.horizon,
        stride=stride or cfg.eval.stride,
        print_fn=click.echo,
    )
    out = Path(out_dir or cfg.paths.reports).expanduser()
    csv_path = write_metric_csv(out / "metrics.csv", reports)
    json_path = write_report_json(out / "metrics.json", reports, config_to_dict(cfg))
    render_metric_table(reports, metric)
    click.echo(f"Wrote {csv_path} and {json_path}")
    failed = [r.label for r in reports if r.has_nan()]
    if failed:
        click.echo(f"Error: NaN metrics for {', '.join(failed)}", err=True)
        raise SystemExit(1)


@main.command("config", context_settings=CONTEXT_SETTINGS)
@config_option
@click.option("--out", "out_path", metavar="PATH", type=click.Path(dir_okay=False),
              default=None, help="Write to PATH instead of printing")
@click.option("-y", "--yes", is_flag=True, help="Overwrite an existing file without asking")
@reports_errors
def config_command(config_path, out_path, yes):
    """Print the effective config with every default explicit."""
    cfg = _effective_config(config_path, None)
    if out_path is None:
        click.echo(reference_config_text(cfg), nl=False)
        return
    status = write_reference_config(out_path, cfg, input_fn=input, print_fn=print,
                                    assume_yes=yes)
    messages = {
        "created": f"Wrote reference config: {out_path}",
        "apply": f"Updated config: {out_path}",
        "unchanged": f"Config already up to date: {out_path}",
        "cancel": "Cancelled.",
    }
    click.echo(messages[status])


if __name__ == "__main__":
    main()
