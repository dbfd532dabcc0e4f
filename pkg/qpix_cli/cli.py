#!/usr/bin/env python3
"""
qpix command-line interface.

Every option is mirrored into a ``QPIX_*`` environment variable, so settings can also
come from the environment, a ``.env`` file or the JSON config file (``qpix.json`` or
``QPIX_CONFIG``).
"""

import csv
import dataclasses
import json
import os
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence
from xml.sax.saxutils import escape

import click
import numpy as np

# Load environment variables from a local .env file if present (for local development)
try:
    from dotenv import load_dotenv
    env_path = Path.cwd() / '.env'
    if env_path.exists():
        load_dotenv(dotenv_path=env_path)
except ImportError:
    pass  # python-dotenv is not installed; skip loading .env

sys.path.insert(0, str(Path(__file__).parent.parent))

from common.run_utils import (
    get_optional_env_var,
    get_required_env_var,
    handle_error,
    log_artifact,
    reset_json_config_cache,
    save_run_config,
    setup_logging,
)
from qpix import __version__
from qpix.circuit_map import circuit_to_gate_list, gate_list_json, mps_to_staircase
from qpix.errors import LayoutError
from qpix.frqi import decode_patched, encode_patched, is_power_of_two, qubit_budget
from qpix.imaging import (
    FASHION_MNIST_CLASSES,
    FASHION_MNIST_URL,
    Dataset,
    PatchLayout,
    fetch_fashion_mnist,
    load_fashion_mnist,
    parse_extent_pair,
    prepare_dataset,
    write_pgm,
)
from qpix.learn import (
    PROFILES,
    TrainConfig,
    circuit_inputs,
    compress_image_circuit,
    config_from_profile,
    evaluate,
    exact_state,
    load_model_checkpoint,
    parallel_map,
    prepare_inputs,
    read_metrics_csv,
    train,
)
from qpix.mps import compress_image_mps, decode_image_mps
from qpix.seq_circuit import apply_circuit, zero_state
from qpix.storage import load_circuit_file, load_mps_file, save_circuit_file, save_mps_file

ENV_PREFIX = "QPIX_"
DEFAULT_DENSE_MAX_QUBITS = 12
SERIES_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")


def set_env_from_option(ctx, param, value):
    """Set a QPIX_* environment variable from a click option."""
    if value is not None:
        env_var = ENV_PREFIX + param.name.upper().replace('-', '_')
        os.environ[env_var] = str(value)
    return value


def set_boolean_env_from_flag(ctx, param, value):
    """Set a QPIX_* environment variable from a boolean flag."""
    if value:
        env_var = ENV_PREFIX + param.name.upper().replace('-', '_')
        os.environ[env_var] = 'true'
    return value


def clear_env_from_flag(name: str):
    """Callback for a negative flag: writes false to QPIX_<name> when given."""
    def callback(ctx, param, value):
        if value:
            os.environ[ENV_PREFIX + name] = 'false'
        return value
    return callback


def set_config_file(ctx, param, value):
    """Point the JSON config layer at another file."""
    if value is not None:
        os.environ["QPIX_CONFIG"] = value
        reset_json_config_cache()
    return value


data_options = [
    click.option('--data-dir', callback=set_env_from_option,
                 help='Directory with the Fashion-MNIST IDX files (plain or .gz). Default: ./data'),
    click.option('--split', type=click.Choice(['train', 'test']), callback=set_env_from_option,
                 help='Dataset split to read (default: train)'),
    click.option('--resize', callback=set_env_from_option,
                 help='Target image size WxH, bilinear (e.g. 32x32)'),
    click.option('--patches', callback=set_env_from_option,
                 help='Patch grid RxC (e.g. 1x1, 2x4)'),
    click.option('--classes', callback=set_env_from_option,
                 help='Comma-separated class ids to keep; relabelled 0..k-1'),
    click.option('--subset', type=int, callback=set_env_from_option,
                 help='Number of images to use (seeded draw)'),
]

train_options = [
    click.option('--model', type=click.Choice(['mps', 'circuit']), callback=set_env_from_option,
                 help='Classifier kind'),
    click.option('--learning-rate', type=float, callback=set_env_from_option, help='Adam learning rate'),
    click.option('--batch-size', type=int, callback=set_env_from_option, help='Minibatch size N_b'),
    click.option('--epochs', type=int, callback=set_env_from_option, help='Number of epochs'),
    click.option('--l2', type=float, callback=set_env_from_option, help='L2 regularization strength lambda'),
    click.option('--logit-scale', type=float, callback=set_env_from_option,
                 help='Loss scale C (circuit default: number of pixels)'),
    click.option('--chi-img', type=int, callback=set_env_from_option, help='Image MPS bond dimension'),
    click.option('--chi-class', type=int, callback=set_env_from_option, help='Classifier MPS bond dimension'),
    click.option('--m-img', type=int, callback=set_env_from_option,
                 help='Image circuit layers (0 = exact FRQI states)'),
    click.option('--m-class', type=int, callback=set_env_from_option, help='Classifier circuit layers'),
    click.option('--train-count', type=int, callback=set_env_from_option, help='Training images to use'),
    click.option('--test-count', type=int, callback=set_env_from_option, help='Test images to use'),
    click.option('--iterations', type=int, callback=set_env_from_option,
                 help='Adam iterations per image for circuit compression'),
    click.option('--compress-learning-rate', type=float, callback=set_env_from_option,
                 help='Adam learning rate for circuit compression'),
    click.option('--cold-start', is_flag=True, callback=clear_env_from_flag('WARM_START'),
                 help='Skip the peeled bond-dimension-2 start in circuit compression'),
    click.option('--sweeps', type=int, callback=set_env_from_option,
                 help='Polar sweeps per start before Adam (0 = Adam only)'),
    click.option('--restarts', type=int, callback=set_env_from_option,
                 help='Random starts tried by circuit compression'),
    click.option('--score-log-cap', type=float, callback=set_env_from_option,
                 help='Upper bound on the log scale of MPS classifier scores'),
]


def add_options(options):
    """Decorator to add a list of options to a command."""
    def decorator(func):
        for option in reversed(options):
            func = option(func)
        return func
    return decorator


def _setting(name: str, cast: Callable[[str], Any] = str) -> Any:
    raw = get_optional_env_var(ENV_PREFIX + name, "")
    if raw == "":
        return None
    try:
        return cast(raw)
    except ValueError as exc:
        raise click.UsageError(f"Invalid value for {ENV_PREFIX}{name}: {raw!r} ({exc})")


def _parse_int_list(text: str) -> tuple:
    return tuple(int(item) for item in text.split(",") if item.strip())


def _parse_bool(text: str) -> bool:
    return text.strip().lower() in ("1", "true", "yes", "on")


def _output_dir(default: str) -> str:
    out_dir = _setting("OUT_DIR") or default
    os.makedirs(out_dir, exist_ok=True)
    return out_dir


def build_config(**forced) -> TrainConfig:
    """Effective TrainConfig from profile, QPIX_* settings and ``forced`` values."""
    overrides = {
        "model": _setting("MODEL"),
        "learning_rate": _setting("LEARNING_RATE", float),
        "batch_size": _setting("BATCH_SIZE", int),
        "epochs": _setting("EPOCHS", int),
        "l2": _setting("L2", float),
        "logit_scale": _setting("LOGIT_SCALE", float),
        "chi_img": _setting("CHI_IMG", int),
        "chi_class": _setting("CHI_CLASS", int),
        "m_img": _setting("M_IMG", int),
        "m_class": _setting("M_CLASS", int),
        "layout": _setting("PATCHES"),
        "image_size": _setting("RESIZE", parse_extent_pair),
        "classes": _setting("CLASSES", _parse_int_list),
        "train_count": _setting("TRAIN_COUNT", int),
        "test_count": _setting("TEST_COUNT", int),
        "threads": _setting("THREADS", int) or os.cpu_count() or 1,
        "compress_iterations": _setting("ITERATIONS", int),
        "compress_learning_rate": _setting("COMPRESS_LEARNING_RATE", float),
        "warm_start": _setting("WARM_START", _parse_bool),
        "compress_sweeps": _setting("SWEEPS", int),
        "compress_restarts": _setting("RESTARTS", int),
        "score_log_cap": _setting("SCORE_LOG_CAP", float),
    }
    overrides.update({key: value for key, value in forced.items() if value is not None})
    try:
        return config_from_profile(_setting("PROFILE"), _setting("SEED", int) or 0, **overrides)
    except ValueError as exc:
        raise click.UsageError(str(exc))


def load_split(split: str, config: TrainConfig, count: Optional[int] = None) -> Dataset:
    """Read one Fashion-MNIST split and apply the class filter, subset and resize of ``config``."""
    data_dir = _setting("DATA_DIR") or "data"
    if not os.path.isdir(data_dir):
        raise OSError(f"Data directory not found: {data_dir}")
    dataset = load_fashion_mnist(data_dir, split)
    if count is None:
        count = config.train_count if split == "train" else config.test_count
    return prepare_dataset(dataset, size=config.image_size, classes=config.classes, count=count, seed=config.seed)


def _run(command: str, body: Callable[[], None]) -> None:
    setup_logging(get_optional_env_var("QPIX_LOG_LEVEL", "INFO"))
    try:
        body()
    except (click.ClickException, click.exceptions.Exit):
        raise
    except Exception as e:
        handle_error(e, command)


def _run_config(command: str, config: Optional[TrainConfig] = None, **extra) -> Dict[str, Any]:
    settings = {key: value for key, value in os.environ.items() if key.startswith(ENV_PREFIX)}
    doc = {"command": command, "version": __version__, "settings": settings}
    if config is not None:
        doc["config"] = config.to_dict()
    doc.update(extra)
    return doc


def _write_csv(path: str, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(header)
            writer.writerows(rows)
    except OSError as exc:
        raise OSError(f"Failed to write {path}: {exc}") from exc


def svg_line_chart(x: Sequence[float], series: Dict[str, Sequence[float]], title: str = "",
                   x_label: str = "", width: int = 640, height: int = 400) -> str:
    """Self-contained SVG with one polyline per series."""
    margin_left, margin_right, margin_top, margin_bottom = 60, 150, 40, 50
    plot_w = width - margin_left - margin_right
    plot_h = height - margin_top - margin_bottom
    values = [v for ys in series.values() for v in ys if np.isfinite(v)]
    y_min, y_max = (min(values), max(values)) if values else (0.0, 1.0)
    if y_max == y_min:
        y_min, y_max = y_min - 0.5, y_max + 0.5
    x_min, x_max = (min(x), max(x)) if len(x) else (0.0, 1.0)
    if x_max == x_min:
        x_min, x_max = x_min - 0.5, x_max + 0.5

    def px(value: float) -> float:
        return margin_left + (value - x_min) / (x_max - x_min) * plot_w

    def py(value: float) -> float:
        return margin_top + (y_max - value) / (y_max - y_min) * plot_h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="24" text-anchor="middle" font-family="sans-serif" '
        f'font-size="16">{escape(title)}</text>',
        f'<rect x="{margin_left}" y="{margin_top}" width="{plot_w}" height="{plot_h}" '
        f'fill="none" stroke="#444"/>',
        f'<text x="{margin_left + plot_w / 2:.1f}" y="{height - 12}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="12">{escape(x_label)}</text>',
        f'<text x="{margin_left - 6}" y="{margin_top + 4}" text-anchor="end" font-family="sans-serif" '
        f'font-size="10">{y_max:.4g}</text>',
        f'<text x="{margin_left - 6}" y="{margin_top + plot_h}" text-anchor="end" font-family="sans-serif" '
        f'font-size="10">{y_min:.4g}</text>',
    ]
    for index, (name, ys) in enumerate(series.items()):
        color = SERIES_COLORS[index % len(SERIES_COLORS)]
        points = " ".join(f"{px(xv):.2f},{py(yv):.2f}" for xv, yv in zip(x, ys) if np.isfinite(yv))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{points}"/>')
        legend_y = margin_top + 16 * index + 10
        parts.append(f'<line x1="{width - margin_right + 10}" y1="{legend_y}" x2="{width - margin_right + 30}" '
                     f'y2="{legend_y}" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{width - margin_right + 36}" y="{legend_y + 4}" font-family="sans-serif" '
                     f'font-size="12">{escape(name)}</text>')
    parts.append('</svg>')
    return "\n".join(parts) + "\n"


def _write_text(path: str, text: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    try:
        with open(path, "w", encoding="utf-8") as f:
            f.write(text)
    except OSError as exc:
        raise OSError(f"Failed to write {path}: {exc}") from exc


@click.group()
@click.version_option(version=__version__, prog_name='qpix')
@click.option('--log-level', callback=set_env_from_option,
              help='Logging level (DEBUG, INFO, WARNING, ERROR). GitHub Actions debug mode defaults to DEBUG '
                   'when QPIX_LOG_LEVEL is not set.')
@click.option('--config-file', callback=set_config_file, help='JSON config file (default: ./qpix.json)')
@click.option('--seed', type=int, callback=set_env_from_option, help='Random seed (default: 0)')
@click.option('--threads', type=int, callback=set_env_from_option,
              help='Worker threads for per-image work (default: available cores)')
@click.option('--profile', type=click.Choice(sorted(PROFILES)), callback=set_env_from_option,
              help='Named preset of defaults underneath explicit settings')
@click.option('--retry', callback=set_env_from_option,
              help='Retry policy for downloads: <retries>*immediately, <retries>*delay(<seconds>), '
                   'or <retries>*exp(<seconds>).')
def main(**kwargs):
    """Quantum image encoding, compression and classification.

    FRQI-encode images, compress them as matrix-product states or sequential
    circuits, and train MPS or circuit classifiers on Fashion-MNIST.
    """
    pass


@main.command()
@click.option('--data-dir', callback=set_env_from_option, help='Download directory (default: ./data)')
@click.option('--force', is_flag=True, callback=set_boolean_env_from_flag, help='Download even if files exist')
def fetch(**kwargs):
    """Download the Fashion-MNIST IDX files."""
    def body():
        downloaded, skipped = fetch_fashion_mnist(
            _setting("DATA_DIR") or "data",
            base_url=get_optional_env_var("QPIX_DATA_URL", FASHION_MNIST_URL),
            force=_setting("FORCE", _parse_bool) or False,
        )
        for path in skipped:
            click.echo(f"Already present: {path}")
        for path in downloaded:
            log_artifact("dataset file", str(path))
    _run("fetch", body)


@main.command()
@add_options(data_options)
@click.option('--out', 'out_dir', callback=set_env_from_option, help='Output directory (default: ./encoded)')
@click.option('--dense-max-qubits', type=int, callback=set_env_from_option,
              help=f'Write dense states when a patch has at most this many qubits (default: {DEFAULT_DENSE_MAX_QUBITS})')
def encode(**kwargs):
    """FRQI-encode images and report the qubit budget."""
    def body():
        config = build_config(train_count=_setting("SUBSET", int))
        split = _setting("SPLIT") or "train"
        layout = config.patch_layout
        width, height = config.image_size
        patch_height, patch_width = layout.patch_shape(height, width)
        if not is_power_of_two(patch_height * patch_width):
            raise LayoutError(f"Patches of {patch_width}x{patch_height} pixels are not a power of two; "
                              f"use --resize")
        budget = qubit_budget(width * height, layout.count)
        click.echo(f"Qubit budget: {budget.total} qubits "
                   f"({budget.patches} patch(es) x {budget.qubits_per_patch} qubits)")

        dataset = load_split(split, config, count=config.train_count)
        out_dir = _output_dir("encoded")
        images = []
        states = []
        for index, (img, label) in enumerate(zip(dataset.images, dataset.labels)):
            patch_states = encode_patched(img, layout)
            images.append({"index": index, "label": int(label), "patches": len(patch_states),
                           "qubits_per_patch": budget.qubits_per_patch})
            states.append(np.stack(patch_states))
        summary = {"split": split, "layout": str(layout), "image_size": [width, height],
                   "budget": dataclasses.asdict(budget), "total_qubits": budget.total, "images": images}
        summary_path = os.path.join(out_dir, "encode.json")
        _write_text(summary_path, json.dumps(summary, indent=2))
        log_artifact("encoding summary", summary_path)
        dense_max = _setting("DENSE_MAX_QUBITS", int) or DEFAULT_DENSE_MAX_QUBITS
        if states and budget.qubits_per_patch <= dense_max:
            states_path = os.path.join(out_dir, "states.npz")
            np.savez(states_path, states=np.stack(states), labels=dataset.labels)
            log_artifact("dense states", states_path)
        save_run_config(out_dir, _run_config("encode", config))
    _run("encode", body)


@main.command()
@add_options(data_options)
@click.option('--mode', type=click.Choice(['mps', 'circuit']), callback=set_env_from_option,
              help='Compression kind (default: mps)')
@click.option('--chi', type=int, callback=set_env_from_option, help='Bond dimension for --mode mps')
@click.option('--layers', type=int, callback=set_env_from_option, help='Circuit layers for --mode circuit')
@click.option('--iterations', type=int, callback=set_env_from_option, help='Adam iterations per image')
@click.option('--compress-learning-rate', type=float, callback=set_env_from_option,
              help='Adam learning rate for circuit compression')
@click.option('--cold-start', is_flag=True, callback=clear_env_from_flag('WARM_START'),
              help='Skip the peeled bond-dimension-2 start')
@click.option('--sweeps', type=int, callback=set_env_from_option,
              help='Polar sweeps per start before Adam (0 = Adam only)')
@click.option('--restarts', type=int, callback=set_env_from_option, help='Random starts per image')
@click.option('--out', 'out_dir', callback=set_env_from_option, help='Output directory (default: ./compressed)')
def compress(**kwargs):
    """Compress images to QPIX-MPS files or circuit angle files."""
    def body():
        mode = _setting("MODE") or "mps"
        config = build_config(train_count=_setting("SUBSET", int), chi_img=_setting("CHI", int),
                              m_img=_setting("LAYERS", int))
        split = _setting("SPLIT") or "train"
        layout = config.patch_layout
        dataset = load_split(split, config, count=config.train_count)
        out_dir = _output_dir("compressed")
        width, height = config.image_size

        if mode == "mps":
            def work(index: int):
                mps_list = compress_image_mps(dataset.images[index], layout, config.chi_img)
                fidelity = float(np.prod([1.0 - m.truncation_error for m in mps_list]))
                path = os.path.join(out_dir, f"image-{index:05d}.qpxm")
                save_mps_file(path, mps_list, layout, config.chi_img, (width, height),
                              {"index": index, "label": int(dataset.labels[index]), "split": split})
                return fidelity
        else:
            if layout.count != 1:
                raise LayoutError("Circuit compression works on single-patch layouts")
            if config.m_img < 1:
                raise click.UsageError("--layers must be at least 1 for circuit compression")

            def work(index: int):
                target = exact_state(dataset.images[index], layout)
                circuit, fidelity = compress_image_circuit(
                    target, config.m_img, config.compress_iterations, config.compress_learning_rate,
                    seed=config.seed * 1_000_003 + index, warm_start=config.warm_start,
                    sweeps=config.compress_sweeps, restarts=config.compress_restarts,
                )
                path = os.path.join(out_dir, f"image-{index:05d}.json")
                save_circuit_file(path, circuit, fidelity, index=index, label=int(dataset.labels[index]),
                                  layout=str(layout), image_size=[width, height])
                return fidelity

        fidelities = parallel_map(work, list(range(len(dataset))), config.threads)
        rows = [[index, int(label), repr(float(f)), repr(float(1.0 - f))]
                for index, (label, f) in enumerate(zip(dataset.labels, fidelities))]
        csv_path = os.path.join(out_dir, "fidelity.csv")
        _write_csv(csv_path, ["index", "label", "fidelity", "truncation_error"], rows)
        log_artifact("fidelity table", csv_path)
        if len(fidelities):
            click.echo(f"Compressed {len(fidelities)} images ({mode}): mean fidelity {float(np.mean(fidelities)):.6f}")
        save_run_config(out_dir, _run_config("compress", config, mode=mode))
    _run("compress", body)


@main.command(name='train')
@add_options(data_options)
@add_options(train_options)
@click.option('--out', 'out_dir', callback=set_env_from_option, help='Output directory (default: ./runs/train)')
def train_command(**kwargs):
    """Train an MPS or circuit classifier."""
    def body():
        config = build_config()
        out_dir = _output_dir(os.path.join("runs", "train"))
        save_run_config(out_dir, _run_config("train", config))
        train_set = load_split("train", config)
        test_set = load_split("test", config)
        result = train(config, train_set, test_set, output_dir=out_dir)
        click.echo(f"Best test accuracy {result.best_test_accuracy:.4f} at epoch {result.best_epoch}; "
                   f"best-100 average {result.best100:.4f}")
        log_artifact("checkpoint", os.path.join(out_dir, "final.qpxc"))
    _run("train", body)


@main.command(name='eval')
@click.option('--checkpoint', required=True, type=click.Path(exists=True, dir_okay=False),
              callback=set_env_from_option, help='QPIX-CKPT file to evaluate')
@click.option('--data-dir', callback=set_env_from_option, help='Directory with the Fashion-MNIST IDX files')
@click.option('--out', 'out_dir', callback=set_env_from_option, help='Also write eval.json here')
def eval_command(**kwargs):
    """Evaluate a checkpoint on its test split."""
    def body():
        path = get_required_env_var(ENV_PREFIX + "CHECKPOINT")
        model, manifest, _ = load_model_checkpoint(path)
        config = TrainConfig.from_dict(manifest["config"])
        test_set = load_split("test", config)
        inputs = prepare_inputs(config, test_set.images, cache_dir=os.path.dirname(os.path.abspath(path)))
        result = evaluate(model, inputs, test_set.labels, test_set.num_labels, config.threads)
        click.echo(f"Test accuracy: {result.accuracy:.6f} ({len(test_set)} images)")
        click.echo("Confusion matrix (rows: truth, columns: prediction):")
        for row in result.confusion:
            click.echo(" ".join(f"{int(v):6d}" for v in row))
        out_dir = _setting("OUT_DIR")
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)
            doc = {"checkpoint": path, "accuracy": result.accuracy, "confusion": result.confusion.tolist(),
                   "epoch": manifest.get("epoch")}
            if config.classes is None and test_set.num_labels == len(FASHION_MNIST_CLASSES):
                doc["class_names"] = list(FASHION_MNIST_CLASSES)
            eval_path = os.path.join(out_dir, "eval.json")
            _write_text(eval_path, json.dumps(doc, indent=2))
            log_artifact("evaluation", eval_path)
            save_run_config(out_dir, _run_config("eval", config))
    _run("eval", body)


@main.command()
@click.option('--in', 'input_path', required=True, type=click.Path(exists=True, dir_okay=False),
              callback=set_env_from_option, help='QPIX-MPS file or circuit angle JSON')
@click.option('--out', 'out_path', required=True, callback=set_env_from_option, help='Output .pgm path')
def render(**kwargs):
    """Decode a compressed image to a PGM file."""
    def body():
        input_path = get_required_env_var(ENV_PREFIX + "INPUT_PATH")
        out_path = get_required_env_var(ENV_PREFIX + "OUT_PATH")
        if input_path.endswith(".json"):
            circuit, doc = load_circuit_file(input_path)
            layout = PatchLayout.parse(doc.get("layout", "1x1"))
            if layout.count != 1:
                raise LayoutError("Circuit angle files describe single-patch images")
            width, height = doc["image_size"]
            state = apply_circuit(circuit, zero_state(circuit.n_qubits))
            img = decode_patched([state], layout, width, height)
        else:
            mps_list, header = load_mps_file(input_path)
            width, height = header["image_size"]
            img = decode_image_mps(mps_list, PatchLayout.parse(header["layout"]), width, height)
        out_dir = os.path.dirname(os.path.abspath(out_path))
        os.makedirs(out_dir, exist_ok=True)
        write_pgm(img, out_path)
        log_artifact("image", out_path)
        save_run_config(out_dir, _run_config("render", input=input_path, output=out_path))
    _run("render", body)


@main.command()
@click.option('--metrics-csv', required=True, type=click.Path(exists=True, dir_okay=False),
              callback=set_env_from_option, help='Metrics or sweep CSV')
@click.option('--out', 'out_path', required=True, callback=set_env_from_option, help='Output .svg path')
@click.option('--title', callback=set_env_from_option, help='Chart title')
def report(**kwargs):
    """Plot a metrics CSV as an SVG line chart (first column on the x axis)."""
    def body():
        metrics_path = get_required_env_var(ENV_PREFIX + "METRICS_CSV")
        columns = read_metrics_csv(metrics_path)
        names = list(columns)
        x_name = names[0]
        series = {name: columns[name] for name in names[1:]}
        svg = svg_line_chart(columns[x_name], series, title=_setting("TITLE") or "", x_label=x_name)
        out_path = get_required_env_var(ENV_PREFIX + "OUT_PATH")
        _write_text(out_path, svg)
        log_artifact("chart", out_path)
        save_run_config(os.path.dirname(os.path.abspath(out_path)),
                        _run_config("report", input=metrics_path, output=out_path))
    _run("report", body)


@main.command(name='export-circuit')
@click.option('--in', 'input_path', required=True, type=click.Path(exists=True, dir_okay=False),
              callback=set_env_from_option, help='QPIX-MPS file or circuit angle JSON')
@click.option('--patch', type=int, callback=set_env_from_option, help='Patch index of an MPS file (default: 0)')
@click.option('--out', 'out_path', required=True, callback=set_env_from_option, help='Output gate list .json')
def export_circuit(**kwargs):
    """Write the gate list of an image MPS (as a staircase) or of a circuit angle file."""
    def body():
        input_path = get_required_env_var(ENV_PREFIX + "INPUT_PATH")
        patch = _setting("PATCH", int) or 0
        if input_path.endswith(".json"):
            circuit, _ = load_circuit_file(input_path)
            unitaries = circuit_to_gate_list(circuit)
        else:
            mps_list, _ = load_mps_file(input_path)
            if not 0 <= patch < len(mps_list):
                raise click.UsageError(f"--patch {patch} out of range for {len(mps_list)} patches")
            unitaries = mps_to_staircase(mps_list[patch])
        out_path = get_required_env_var(ENV_PREFIX + "OUT_PATH")
        _write_text(out_path, gate_list_json(unitaries))
        click.echo(f"Exported {len(unitaries)} unitaries on {unitaries[0].span} qubits each")
        log_artifact("gate list", out_path)
        save_run_config(os.path.dirname(os.path.abspath(out_path)),
                        _run_config("export-circuit", input=input_path, output=out_path, patch=patch))
    _run("export-circuit", body)


@main.command()
@add_options(data_options)
@add_options(train_options)
@click.option('--values', 'sweep_values', required=True, callback=set_env_from_option,
              help='Comma-separated chi_img (mps) or m_img (circuit) values')
@click.option('--out', 'out_dir', callback=set_env_from_option, help='Output directory (default: ./runs/sweep)')
def sweep(**kwargs):
    """Train one model per chi_img / m_img value and tabulate best-100 accuracies."""
    def body():
        config = build_config()
        values = _setting("SWEEP_VALUES", _parse_int_list)
        if not values:
            raise click.UsageError("--values needs at least one integer")
        field_name = "chi_img" if config.model == "mps" else "m_img"
        out_dir = _output_dir(os.path.join("runs", "sweep"))
        save_run_config(out_dir, _run_config("sweep", config, values=list(values)))
        train_set = load_split("train", config)
        test_set = load_split("test", config)
        rows: List[List[Any]] = []
        for value in values:
            run_config = dataclasses.replace(config, **{field_name: value}).validate()
            run_dir = os.path.join(out_dir, f"{field_name}-{value}")
            result = train(run_config, train_set, test_set, output_dir=run_dir)
            rows.append([value, repr(result.best100), repr(result.best_test_accuracy),
                         repr(result.history[-1].test_acc if result.history else float("nan"))])
            click.echo(f"{field_name}={value}: best-100 {result.best100:.4f}")
        csv_path = os.path.join(out_dir, "sweep.csv")
        _write_csv(csv_path, [field_name, "best100", "best_test_acc", "final_test_acc"], rows)
        log_artifact("sweep table", csv_path)
        svg = svg_line_chart([float(r[0]) for r in rows], {"best100": [float(r[1]) for r in rows]},
                             title=f"best-100 test accuracy vs {field_name}", x_label=field_name)
        svg_path = os.path.join(out_dir, "sweep.svg")
        _write_text(svg_path, svg)
        log_artifact("chart", svg_path)
    _run("sweep", body)


if __name__ == '__main__':
    main()
