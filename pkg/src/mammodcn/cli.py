from __future__ import annotations

import functools
import logging
import shutil
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import click
import matplotlib.pyplot as plt
import pandas as pd
import pydantic
import tomli

import mammodcn

from . import logging_config
from .backbone import doubled_repeats, max_feasible_side, memory_plan, memory_table
from .config import Config, apply_overrides, save_config
from .dataset import PhantomDataset, save_dataset
from .errors import BadConfig, ModelFileError, RejectedInput, TrainingError
from .evaluation import (
    RocCurve,
    bootstrap_auc_interval,
    breastwise_rows,
    load_roc,
    roc_curve,
    save_roc,
    subjectwise_rows,
)
from .gradcheck import run_suite
from .inference import (
    IDENTITY,
    DihedralTransform,
    aggregate_exams,
    build_score_table,
    load_score_table,
    network_detector,
    save_score_table,
    table_transforms,
)
from .network import Network
from .phantom import generate_dataset
from .plot import plot_exam, plot_roc
from .trainer import fit
from .weights import load_model, save_model

logger = logging.getLogger(__name__)

_DEFAULT_CONFIG_PATH = Path("mammodcn.toml")
_DATA_SUBDIR = "data"
_PLOTS_SUBDIR = "plots"
_CONFIG_FILENAME = "config.toml"
_MODEL_FILENAME = "model.weights"
_TRAIN_LOG_FILENAME = "train_log.csv"
_SCORES_FILENAME = "scores.csv"
_SCORES_NOAUG_FILENAME = "scores_noaug.csv"
_AUC_REPORT_FILENAME = "auc.csv"
_MEMPLAN_FILENAME = "memplan.csv"
_TEST_SPLIT = "test"

# (score variant, score table file, suffix of the ROC files)
_SCORE_VARIANTS = (
    ("augmented", _SCORES_FILENAME, ""),
    ("no augmentation", _SCORES_NOAUG_FILENAME, "_noaug"),
)
_LEVELS = {"breast": breastwise_rows, "subject": subjectwise_rows}

_REPORTED_ERRORS = (
    RejectedInput,
    TrainingError,
    ModelFileError,
    BadConfig,
    KeyError,
    tomli.TOMLDecodeError,
)


def _one_line(text: str) -> str:
    return " ".join(str(text).split())


def _describe_validation_error(e: pydantic.ValidationError) -> str:
    return "; ".join(
        f"{'.'.join(str(part) for part in error['loc'])}: {error['msg']}"
        for error in e.errors()
    )


def nicely_repackage_problems(func):
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except pydantic.ValidationError as e:
            raise click.ClickException(
                f"BadConfig: {_one_line(_describe_validation_error(e))}"
            ) from e
        except _REPORTED_ERRORS as e:
            raise click.ClickException(f"{type(e).__name__}: {_one_line(e)}") from e

    return wrapper


def _requires(get_path: Callable[[Config], Path], hint: str):
    def decorator(func):
        @functools.wraps(func)
        def wrapper(ctx, *args, **kwargs):
            conf: Config = ctx.obj["config"]
            path = get_path(conf)
            if not path.exists():
                raise click.ClickException(f"MissingInput: nothing at {path}. {hint}")
            return func(ctx, *args, **kwargs)

        return wrapper

    return decorator


def _get_data_dir(conf: Config) -> Path:
    return conf.general.outdir / _DATA_SUBDIR


def _get_model_path(conf: Config) -> Path:
    return conf.general.outdir / _MODEL_FILENAME


def _get_scores_path(conf: Config) -> Path:
    return conf.general.outdir / _SCORES_FILENAME


require_dataset = _requires(_get_data_dir, "First run the gen-data command.")
require_model = _requires(_get_model_path, "First run the train command.")
require_scores = _requires(_get_scores_path, "First run the infer command.")


@click.group()
@click.pass_context
@click.option(
    "config_path",
    "--config",
    type=click.Path(dir_okay=False, path_type=Path),
    default=_DEFAULT_CONFIG_PATH,
    help="TOML config file; defaults are used if it does not exist.",
)
@click.option(
    "overrides",
    "--set",
    multiple=True,
    metavar="SECTION.KEY=VALUE",
    help="Override a config value (repeatable).",
)
@click.option("-v", "--verbose", is_flag=True, help="Log debug messages to console.")
@click.version_option(mammodcn.__version__)
@nicely_repackage_problems
def main(
    ctx: click.Context, config_path: Path, overrides: Tuple[str, ...], verbose: bool
):
    ctx.ensure_object(dict)
    if config_path.exists():
        conf = Config.from_toml(config_path, overrides)
    else:
        conf = Config.parse_obj(apply_overrides({}, overrides))
    # A relative outdir is relative to the config file.
    if not conf.general.outdir.is_absolute():
        conf.general.outdir = config_path.parent / conf.general.outdir
    ctx.obj["config"] = conf

    logging_config.setup_logging(conf.logging, conf.general.outdir, verbose)


def _save_effective_config(conf: Config):
    path = conf.general.outdir / _CONFIG_FILENAME
    save_config(conf, path)
    logger.debug(f"Saved effective config to '{path}'.")


@main.command(name="gen-data")
@click.pass_context
@nicely_repackage_problems
def gen_data(ctx: click.Context):
    """
    Generate synthetic phantom exams (train and test splits).

    Images, findings and device tables are written to the `data` subdirectory of
    the output directory. A pre-existing dataset there is removed.
    """
    conf: Config = ctx.obj["config"]
    spec = conf.phantom
    data_dir = _get_data_dir(conf)
    if data_dir.exists():
        shutil.rmtree(data_dir)
    splits = {
        "train": generate_dataset(spec, n_exams=spec.train_exams, split="train"),
        _TEST_SPLIT: generate_dataset(spec, n_exams=spec.test_exams, split=_TEST_SPLIT),
    }
    save_dataset(data_dir, splits, spec)
    _save_effective_config(conf)


@main.command()
@click.pass_context
@require_dataset
@nicely_repackage_problems
def train(ctx: click.Context):
    """
    Train the detector on the train split and save the model weights.

    The per-step losses are saved to `train_log.csv`. This command overwrites
    previous weights.
    """
    conf: Config = ctx.obj["config"]
    dataset = PhantomDataset(_get_data_dir(conf))
    samples = dataset.train_samples("train", conf.train.include_normals)
    net = Network.initialize(conf.model)
    net, log = fit(net, samples, conf.train, conf.detection)
    outdir = conf.general.outdir
    save_model(net.params, _get_model_path(conf))
    log.to_csv(outdir / _TRAIN_LOG_FILENAME, index=False, float_format="%.17g")
    logger.info(f"Saved training log to '{outdir / _TRAIN_LOG_FILENAME}'.")
    _save_effective_config(conf)


def _load_network(conf: Config) -> Network:
    return Network.from_params(conf.model, load_model(_get_model_path(conf)))


@main.command()
@click.pass_context
@require_dataset
@require_model
@nicely_repackage_problems
def infer(ctx: click.Context):
    """
    Score every test image and save the score table.

    With `[inference] augment` every image is scored under the 8 dihedral
    transforms (`scores.csv`); the identity rows alone are saved as
    `scores_noaug.csv`.
    """
    conf: Config = ctx.obj["config"]
    dataset = PhantomDataset(_get_data_dir(conf))
    net = _load_network(conf)
    transforms: Tuple[DihedralTransform, ...] = (
        DihedralTransform.ALL if conf.inference.augment else (IDENTITY,)
    )
    table = build_score_table(
        network_detector(net, conf.detection),
        dataset.exams(_TEST_SPLIT),
        dataset.load_image,
        conf.inference,
        transforms,
    )
    save_score_table(table, _get_scores_path(conf))
    identity_rows = (table["rot"] == 0) & ~table["flip"].astype(bool)
    save_score_table(
        table[identity_rows].reset_index(drop=True),
        conf.general.outdir / _SCORES_NOAUG_FILENAME,
    )
    _save_effective_config(conf)


@main.command()
@click.pass_context
@require_dataset
@require_scores
@nicely_repackage_problems
def evaluate(ctx: click.Context):
    """
    Compute breast-wise and subject-wise ROC curves and AUCs.

    ROC curves are saved as `roc_breastwise.csv` and `roc_subjectwise.csv` (and
    `*_noaug.csv` for the identity-only scores). Both AUCs are printed.
    """
    conf: Config = ctx.obj["config"]
    ev = conf.evaluation
    exams = PhantomDataset(_get_data_dir(conf)).exams(_TEST_SPLIT)
    outdir = conf.general.outdir
    rows = []
    for variant, filename, suffix in _SCORE_VARIANTS:
        path = outdir / filename
        if not path.exists():
            logger.warning(f"No score table at '{path}'; skipping {variant} scores.")
            continue
        table = load_score_table(path)
        aggregates = aggregate_exams(
            table, exams, conf.inference.aggregation, table_transforms(table)
        )
        for level, extract in _LEVELS.items():
            scores, labels = extract(exams, aggregates)
            curve = roc_curve(scores, labels)
            interval = None
            if ev.bootstrap > 0:
                interval = bootstrap_auc_interval(
                    scores, labels, ev.bootstrap, ev.confidence, ev.seed
                )
            save_roc(curve, outdir / f"roc_{level}wise{suffix}.csv", interval)
            rows.append(
                {
                    "scores": variant,
                    "level": f"{level}-wise",
                    "n": len(scores),
                    "positives": int(labels.sum()),
                    "auc": curve.auc,
                    "ci_low": interval[0] if interval else float("nan"),
                    "ci_high": interval[1] if interval else float("nan"),
                }
            )
    report = pd.DataFrame.from_records(rows)
    report.to_csv(outdir / _AUC_REPORT_FILENAME, index=False, float_format="%.17g")
    logger.info(f"Evaluation on {len(exams)} test exams:\n\n{report}")
    for row in report.itertuples():
        click.echo(f"{row.level} AUC ({row.scores}): {row.auc:.4f}")


@main.command()
@click.pass_context
@click.option(
    "--seed", default=0, show_default=True, help="Seed of the sampled inputs."
)
@click.option("--no-model", is_flag=True, help="Skip the end-to-end model check.")
@nicely_repackage_problems
def gradcheck(ctx: click.Context, seed: int, no_model: bool):
    """
    Compare every analytic gradient with central finite differences.

    Prints the maximum relative error per check and PASS or FAIL; exits with an
    error if any check fails.
    """
    report = run_suite(seed, include_model=not no_model)
    click.echo(report.to_string(index=False, float_format=lambda v: f"{v:.2e}"))
    failed = list(report.loc[~report["passed"], "check"])
    if failed:
        click.echo("FAIL")
        raise click.ClickException(f"GradientMismatch: {', '.join(failed)}")
    click.echo("PASS")


@main.command()
@click.pass_context
@nicely_repackage_problems
def memplan(ctx: click.Context):
    """
    Print activation and parameter memory of the backbone for each input side.

    Also prints the largest input side that fits in `[memplan] budget_bytes`, for
    the configured blocks and for the same blocks with doubled repeats.
    """
    conf: Config = ctx.obj["config"]
    m = conf.memplan
    model = conf.model
    rows = []
    sizes = (m.bytes_per_element, m.batch, model.deformable_block)
    for side in m.sides:
        rows.append({"side": side, **memory_plan(model.blocks, side, *sizes)})
        logger.debug(
            f"Per-unit memory at side {side}:\n"
            f"{memory_table(model.blocks, side, *sizes)}"
        )
    table = pd.DataFrame.from_records(rows)
    table["activation_MiB"] = table["activation_bytes"] / (1024 * 1024)
    table.to_csv(conf.general.outdir / _MEMPLAN_FILENAME, index=False)
    click.echo(table.to_string(index=False))
    specs = (
        ("configured", model.blocks),
        ("doubled repeats", doubled_repeats(model.blocks)),
    )
    for label, blocks in specs:
        side = max_feasible_side(
            blocks, m.budget_bytes, m.bytes_per_element, m.batch, model.deformable_block
        )
        click.echo(
            f"Largest feasible side ({label}, budget {m.budget_bytes:,} bytes): {side}"
        )


@main.group()
@click.pass_context
def plot(ctx: click.Context):
    """
    Create figures for diagnostics (subcommands available).
    """
    pass


def _fresh_plot_dir(conf: Config, name: str) -> Path:
    plot_dir = conf.general.outdir / _PLOTS_SUBDIR / name
    if plot_dir.exists():
        shutil.rmtree(plot_dir)
    plot_dir.mkdir(parents=True, exist_ok=False)
    return plot_dir


@plot.command()
@click.pass_context
@nicely_repackage_problems
def roc(ctx: click.Context):
    """
    Plot the breast-wise and subject-wise ROC curves saved by `evaluate`.

    Pre-existing ROC figures are automatically removed by this command.
    """
    conf: Config = ctx.obj["config"]
    outdir = conf.general.outdir
    found: Dict[str, Dict[str, RocCurve]] = {}
    intervals: Dict[str, Dict[str, Tuple[float, float]]] = {}
    for level in _LEVELS:
        for variant, _, suffix in _SCORE_VARIANTS:
            path = outdir / f"roc_{level}wise{suffix}.csv"
            if path.exists():
                curve = load_roc(path)
                found.setdefault(level, {})[variant] = curve
                interval = _read_interval(path)
                if interval is not None:
                    intervals.setdefault(level, {})[variant] = interval
    if not found:
        raise click.ClickException(
            f"MissingInput: no ROC files in {outdir}. First run the evaluate command."
        )
    plot_dir = _fresh_plot_dir(conf, "roc")
    for level, curves in found.items():
        fig = plot_roc(
            curves,
            title=f"{level.capitalize()}-wise ROC",
            intervals=intervals.get(level),
        )
        fig.savefig(plot_dir / f"{level}wise.png")
        plt.close(fig)
    logger.info(f"Saved {len(found)} ROC figure(s) to '{plot_dir}'.")


def _read_interval(path: Path) -> Optional[Tuple[float, float]]:
    with open(path) as f:
        for line in f:
            if line.startswith("# auc=") and "ci_low=" in line:
                fields = dict(part.split("=") for part in line[1:].split())
                return float(fields["ci_low"]), float(fields["ci_high"])
    return None


@plot.command()
@click.pass_context
@click.option("--split", default="train", show_default=True)
@click.option("--n-exams", default=4, show_default=True, help="Number of exams.")
@require_dataset
@nicely_repackage_problems
def samples(ctx: click.Context, split: str, n_exams: int):
    """
    Plot the four views of some exams with their ground-truth boxes.

    Exams with malignant findings come first. Pre-existing sample figures are
    automatically removed by this command.
    """
    conf: Config = ctx.obj["config"]
    dataset = PhantomDataset(_get_data_dir(conf))
    exams = sorted(dataset.exams(split), key=lambda e: not e.subject_label)
    chosen = exams[:n_exams]
    plot_dir = _fresh_plot_dir(conf, "samples")
    with click.progressbar(chosen, label="Plotting exams", show_pos=True) as bar:
        for exam in bar:
            views: List = []
            for (laterality, view), image_id in sorted(exam.images.items()):
                views.append(
                    (
                        f"{laterality}-{view}",
                        dataset.load_image(image_id),
                        dataset.boxes_of(image_id),
                    )
                )
            labels = ", ".join(
                f"{lat}: {'malignant' if positive else 'negative'}"
                for lat, positive in sorted(exam.labels.items())
            )
            fig = plot_exam(views, title=f"{exam.subject_id} ({labels})")
            fig.savefig(plot_dir / f"{exam.subject_id}.png")
            plt.close(fig)
