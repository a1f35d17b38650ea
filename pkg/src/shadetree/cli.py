"""Command-line interface.

Subcommands: render, generate, decompose, analogy, eval, edit-export,
serve.  Every run writes a run_manifest.json (command, config snapshot,
seed, version, wall clock, paths) so outputs are replayable.  Exit codes:
0 ok, 2 parse/config error, 3 I/O error, 4 algorithmic failure.
"""

from __future__ import annotations

import json
import sys
import time
from pathlib import Path

import click

from . import __version__
from .config import config_snapshot, load_config
from .dataset import (DatasetSpec, generate_analogy_set, generate_dataset,
                      write_analogy_set)
from .dsl import parse_tree, print_tree
from .envmap import EnvLibrary, default_library
from .errors import (ArityError, DecompositionFailed, DslSyntaxError,
                     ParamRangeError, ShadeTreeError)
from .evaluate import evaluate_suite
from .image import load_png, normal_field, save_png
from .metrics import psnr as psnr_metric
from .metrics import ssim as ssim_metric
from .pipeline import run_analogy
from .render import render_tree
from .report import write_report
from .tree import normalize_path, substitute_subtree, tree_to_json

EXIT_PARSE = 2
EXIT_IO = 3
EXIT_ALGO = 4


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _load_tree(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        _fail(EXIT_IO, f"cannot read tree file {path}: {exc}")
    try:
        return parse_tree(text)
    except (DslSyntaxError, ParamRangeError, ArityError) as exc:
        _fail(EXIT_PARSE, f"{path}: {exc}")


def _env_library(env_dir):
    try:
        return EnvLibrary.from_dir(env_dir) if env_dir else default_library()
    except ShadeTreeError as exc:
        _fail(EXIT_IO, str(exc))


def _pipeline_config(config_path, overrides, seed):
    try:
        return load_config(config_path, overrides, seed)
    except (OSError, ValueError, KeyError) as exc:
        _fail(EXIT_PARSE, f"bad configuration: {exc}")


def _write_manifest(out_dir, command: str, config: dict, seed, inputs, outputs,
                    started: float):
    manifest = {
        "command": command,
        "version": __version__,
        "seed": seed,
        "config": config,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "wall_clock_s": round(time.time() - started, 3),
    }
    path = Path(out_dir)
    path.mkdir(parents=True, exist_ok=True)
    (path / "run_manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


@click.group()
@click.version_option(__version__)
def main():
    """Shade-tree toolkit: render, invert, evaluate, and edit sphere shadings."""


@main.command("render")
@click.argument("tree_file", type=click.Path())
@click.option("-o", "--out", "out_png", required=True, type=click.Path())
@click.option("--size", default=128, show_default=True, help="Output resolution.")
@click.option("--env-dir", default=None, type=click.Path(), help="Environment map directory.")
def cmd_render(tree_file, out_png, size, env_dir):
    """Render a .shadetree file to PNG."""
    started = time.time()
    tree = _load_tree(tree_file)
    envlib = _env_library(env_dir)
    image = render_tree(tree, normal_field(size, size), envlib)
    out = Path(out_png)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        save_png(image, out)
    except OSError as exc:
        _fail(EXIT_IO, f"cannot write {out}: {exc}")
    _write_manifest(out.parent, "render", {"size": size, "env_dir": env_dir},
                    None, [tree_file], [out], started)
    click.echo(f"rendered {tree_file} -> {out} ({size}x{size})")


@main.command("generate")
@click.option("-o", "--out", "out_dir", required=True, type=click.Path())
@click.option("--style", type=click.Choice(["realistic", "toon"]), default="realistic",
              show_default=True)
@click.option("--count", default=10, show_default=True)
@click.option("--split", type=click.Choice(["train", "test"]), default="test",
              show_default=True)
@click.option("--max-depth", default=4, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--size", default=128, show_default=True)
@click.option("--env-dir", default=None, type=click.Path())
def cmd_generate(out_dir, style, count, split, max_depth, seed, size, env_dir):
    """Generate a synthetic (image, tree) dataset."""
    started = time.time()
    envlib = _env_library(env_dir)
    spec = DatasetSpec(style=style, count=count, max_depth=max_depth, seed=seed,
                       split=split, size=size)
    try:
        manifest = generate_dataset(spec, out_dir, envlib)
    except OSError as exc:
        _fail(EXIT_IO, f"cannot write dataset: {exc}")
    _write_manifest(out_dir, "generate",
                    {"style": style, "count": count, "split": split,
                     "max_depth": max_depth, "size": size}, seed,
                    [], [Path(out_dir) / style / split], started)
    click.echo(f"wrote {manifest['count']} samples under {out_dir}/{style}/{split}")


_config_options = [
    click.option("--config", "config_path", default=None, type=click.Path(),
                 help="TOML config file."),
    click.option("--seed", default=None, type=int, help="Override the config seed."),
    click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
                 help="Dotted config override, e.g. propose.tau=0.1."),
    click.option("--env-dir", default=None, type=click.Path()),
]


def _with_config_options(fn):
    for option in reversed(_config_options):
        fn = option(fn)
    return fn


@main.command("decompose")
@click.argument("image_png", type=click.Path())
@click.option("-o", "--out", "out_dir", required=True, type=click.Path())
@click.option("--stage1-only", is_flag=True, help="Disable the substructure search.")
@click.option("--no-overall-opt", is_flag=True, help="Disable the final whole-tree refinement.")
@_with_config_options
def cmd_decompose(image_png, out_dir, stage1_only, no_overall_opt, config_path,
                  seed, overrides, env_dir):
    """Invert a shading PNG into a shade tree; writes a report directory."""
    started = time.time()
    config = _pipeline_config(config_path, overrides, seed)
    if stage1_only:
        config.stage2_enabled = False
    if no_overall_opt:
        config.overall_opt = False
    envlib = _env_library(env_dir)
    try:
        image = load_png(image_png)
    except OSError as exc:
        _fail(EXIT_IO, f"cannot read {image_png}: {exc}")
    failed = False
    try:
        report = decompose_image(image, config, envlib)
    except DecompositionFailed as exc:
        report = exc.report
        failed = True
    out = write_report(report, out_dir)
    _write_manifest(out, "decompose", config_snapshot(config), config.seed,
                    [image_png], [out], started)
    click.echo(f"tree: {print_tree(report.tree)}")
    click.echo(f"psnr: {report.psnr:.2f} dB  ssim: {report.ssim:.4f}  "
               f"({report.seconds:.1f}s)")
    if failed:
        _fail(EXIT_ALGO, "decomposition exhausted its budget on the root node")


def decompose_image(image, config, envlib):
    from .pipeline import decompose

    return decompose(image, config, envlib)


@main.command("eval")
@click.argument("manifest", type=click.Path())
@click.option("-o", "--out", "out_dir", required=True, type=click.Path())
@click.option("--threads", default=1, show_default=True)
@click.option("--limit", default=None, type=int, help="Evaluate only the first N samples.")
@_with_config_options
def cmd_eval(manifest, out_dir, threads, limit, config_path, seed, overrides, env_dir):
    """Decompose every sample of a dataset manifest; write CSV/JSON/figure."""
    started = time.time()
    config = _pipeline_config(config_path, overrides, seed)
    envlib = _env_library(env_dir)
    if not Path(manifest).exists():
        _fail(EXIT_IO, f"manifest not found: {manifest}")
    rows = evaluate_suite(manifest, config, out_dir, envlib, threads=threads,
                          limit=limit)
    _write_manifest(out_dir, "eval", config_snapshot(config), config.seed,
                    [manifest], [out_dir], started)
    from .evaluate import aggregate

    summary = aggregate(rows)
    click.echo(json.dumps(summary, indent=2))


@main.command("analogy")
@click.argument("example_source", type=click.Path())
@click.argument("example_edited", type=click.Path())
@click.argument("test_source", type=click.Path())
@click.option("-o", "--out", "out_dir", required=True, type=click.Path())
@click.option("--truth", default=None, type=click.Path(),
              help="Ground-truth edited image; prints prediction PSNR when given.")
@_with_config_options
def cmd_analogy(example_source, example_edited, test_source, out_dir, truth,
                config_path, seed, overrides, env_dir):
    """Apply the edit shown by (A, A') to B and write the predicted shading."""
    started = time.time()
    config = _pipeline_config(config_path, overrides, seed)
    envlib = _env_library(env_dir)
    try:
        img_a = load_png(example_source)
        img_ae = load_png(example_edited)
        img_b = load_png(test_source)
    except OSError as exc:
        _fail(EXIT_IO, str(exc))
    prediction, info = run_analogy(img_a, img_ae, img_b, config, envlib)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_png(prediction, out / "prediction.png")
    result = {"edit": info.get("edit"), "note": info.get("note")}
    if truth:
        truth_img = load_png(truth)
        result["psnr_vs_truth_db"] = psnr_metric(prediction, truth_img)
        result["ssim_vs_truth"] = ssim_metric(prediction, truth_img)
    (out / "analogy.json").write_text(json.dumps(result, indent=2) + "\n")
    _write_manifest(out, "analogy", config_snapshot(config), config.seed,
                    [example_source, example_edited, test_source],
                    [out / "prediction.png"], started)
    click.echo(json.dumps(result, indent=2))


@main.command("generate-analogy")
@click.option("-o", "--out", "out_dir", required=True, type=click.Path())
@click.option("--style", type=click.Choice(["realistic", "toon"]), default="realistic",
              show_default=True)
@click.option("--count", default=8, show_default=True)
@click.option("--split", type=click.Choice(["train", "test"]), default="test",
              show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--size", default=128, show_default=True)
@click.option("--include-identity", is_flag=True)
@click.option("--env-dir", default=None, type=click.Path())
def cmd_generate_analogy(out_dir, style, count, split, seed, size,
                         include_identity, env_dir):
    """Generate editing-analogy quadruples with rendered ground truth."""
    started = time.time()
    envlib = _env_library(env_dir)
    spec = DatasetSpec(style=style, count=max(count, 1), seed=seed, split=split,
                       size=size)
    quads = generate_analogy_set(spec, count, include_identity=include_identity)
    manifest = write_analogy_set(quads, out_dir, size, envlib)
    _write_manifest(out_dir, "generate-analogy",
                    {"style": style, "count": count, "split": split, "size": size},
                    seed, [], [out_dir], started)
    click.echo(f"wrote {manifest['count']} quadruples under {out_dir}")


@main.command("edit-export")
@click.argument("tree_file", type=click.Path())
@click.option("-o", "--out", "out_dir", required=True, type=click.Path())
@click.option("--path", "tree_path", required=True,
              help="Subtree address like L.R (dot-separated steps).")
@click.option("--replace", "replacement_file", required=True, type=click.Path(),
              help="File with the replacement subtree (DSL).")
@click.option("--size", default=128, show_default=True)
@click.option("--env-dir", default=None, type=click.Path())
def cmd_edit_export(tree_file, out_dir, tree_path, replacement_file, size, env_dir):
    """Substitute a subtree and export the edited tree plus its render."""
    started = time.time()
    tree = _load_tree(tree_file)
    replacement = _load_tree(replacement_file)
    envlib = _env_library(env_dir)
    try:
        steps = normalize_path([] if tree_path in ("", ".") else tree_path.split("."))
        edited = substitute_subtree(tree, steps, replacement)
    except ShadeTreeError as exc:
        _fail(EXIT_PARSE, str(exc))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "edited.shadetree").write_text(print_tree(edited) + "\n")
    (out / "edited.json").write_text(json.dumps(tree_to_json(edited), indent=2) + "\n")
    save_png(render_tree(edited, normal_field(size, size), envlib),
             out / "edited.png")
    _write_manifest(out, "edit-export", {"path": tree_path, "size": size}, None,
                    [tree_file, replacement_file], [out], started)
    click.echo(f"edited tree written to {out}")


@main.command("serve")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8722, show_default=True)
@_with_config_options
def cmd_serve(host, port, config_path, seed, overrides, env_dir):
    """Run the HTTP service for the interactive editor."""
    import uvicorn

    from .service import create_app

    config = _pipeline_config(config_path, overrides, seed)
    app = create_app(config, _env_library(env_dir))
    uvicorn.run(app, host=host, port=port, log_level="warning")


if __name__ == "__main__":
    main()
