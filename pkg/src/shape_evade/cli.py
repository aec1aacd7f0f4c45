"""Batch command line: corpus generation, training, attacks, fits, reports, plots.

Every artifact-producing command writes exactly one manifest.json into its
output directory holding the fully resolved configuration, enough to re-run
the command via `replay`. Exit codes: 0 success, 1 expected domain failure
(JSON payload on stderr), 2 usage error.
"""

import dataclasses
import functools
import json
import os
import sys
import time
from pathlib import Path

import click
import numpy as np

from . import __version__
from . import attacks
from . import bodymodel as bm
from . import detector as det
from . import evaluation as ev
from . import plots
from . import synth
from .errors import InfeasibleConfigError, ShapeEvadeError
from .fitter import FitConfig, fit, fit_report
from .imaging import Image, load_image, save_image

MANIFEST_NAME = "manifest.json"

_KEYPOINT_CHOICE = click.Choice(bm.KEYPOINT_NAMES)


def _timestamp() -> int:
    # SHAPE_EVADE_EPOCH pins manifests for byte-identical replays
    pinned = os.environ.get("SHAPE_EVADE_EPOCH")
    return int(pinned) if pinned else int(time.time())


def _thread_cap():
    cap = os.environ.get("SHAPE_EVADE_THREADS")
    if not cap:
        return
    try:
        import numba

        numba.set_num_threads(max(1, min(int(cap), numba.config.NUMBA_NUM_THREADS)))
    except (ImportError, ValueError):
        pass


def guarded(fn):
    """Map domain failures to exit 1 with machine-readable stderr JSON."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ShapeEvadeError as exc:
            payload = {"error": exc.code, "type": type(exc).__name__,
                       "message": str(exc)}
            click.echo(json.dumps(payload), err=True)
            sys.exit(1)

    return wrapper


def _prepare_out(out_dir, force: bool) -> Path:
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise InfeasibleConfigError(
            f"output directory {out} is not empty; pass --force to overwrite"
        )
    out.mkdir(parents=True, exist_ok=True)
    return out


def _apply_config(ctx, config_path, values: dict) -> dict:
    """Config-file values fill in parameters the user left at their defaults."""
    if not config_path:
        return values
    overrides = json.loads(Path(config_path).read_text())
    unknown = sorted(set(overrides) - set(values))
    if unknown:
        raise click.UsageError(f"unknown config keys: {', '.join(unknown)}")
    merged = dict(values)
    for key, value in overrides.items():
        source = ctx.get_parameter_source(key)
        if source is None or source.name == "DEFAULT":
            merged[key] = value
    return merged


def _write_manifest(out: Path, command_path, args: dict, inputs, outputs):
    payload = {
        "command": list(command_path),
        "args": args,
        "inputs": sorted(str(p) for p in inputs),
        "outputs": sorted(str(Path(p).relative_to(out)) for p in outputs),
        "version": __version__,
        "timestamp": _timestamp(),
    }
    path = out / MANIFEST_NAME
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


# --------------------------------------------------------------------------
# Shared fit options


_FIT_FIELDS = ("sigma_gm", "lambda_shape", "lambda_pose", "max_outer_iters",
               "convergence_tol", "restarts", "robust")


def fit_options(fn):
    opts = [
        click.option("--sigma-gm", type=float, default=None,
                     help="Robust penalty scale in pixels."),
        click.option("--lambda-shape", type=float, default=None,
                     help="Shape prior weight."),
        click.option("--lambda-pose", type=float, default=None,
                     help="Pose prior weight."),
        click.option("--max-outer-iters", type=int, default=None),
        click.option("--convergence-tol", type=float, default=None),
        click.option("--restarts", type=int, default=None),
        click.option("--robust/--no-robust", default=None,
                     help="Robust penalty vs plain squared loss."),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


def _fit_config(values: dict, base: FitConfig) -> FitConfig:
    given = {k: values[k] for k in _FIT_FIELDS if values.get(k) is not None}
    return dataclasses.replace(base, **given)


def _config_args(config: FitConfig) -> dict:
    return {k: getattr(config, k) for k in _FIT_FIELDS}


# --------------------------------------------------------------------------
# Root group


@click.group()
@click.version_option(__version__)
def main():
    """Shape evasion toolkit: synthesize, train, attack, fit, report."""
    _thread_cap()


# --------------------------------------------------------------------------
# gen


@main.command()
@click.option("--seed", type=int, default=ev.DEFAULT_CORPUS_SEED, show_default=True)
@click.option("--count", type=int, default=ev.DEFAULT_SUBJECTS, show_default=True,
              help="Number of subjects.")
@click.option("--poses", type=int, default=ev.DEFAULT_POSES, show_default=True,
              help="Poses per subject.")
@click.option("--size", type=int, default=96, show_default=True,
              help="Square image side in pixels.")
@click.option("--preset", type=click.Choice(sorted(synth.CAMERA_PRESETS)),
              default="standard", show_default=True)
@click.option("--no-images", is_flag=True, help="Write only the manifest.")
@click.option("--out", required=True, type=click.Path())
@click.option("--force", is_flag=True)
@click.option("--config", "config_path", type=click.Path(exists=True),
              help="JSON defaults, overridden by explicit flags.")
@click.pass_context
@guarded
def gen(ctx, seed, count, poses, size, preset, no_images, out, force,
        config_path):
    """Sample a synthetic corpus to disk."""
    values = _apply_config(ctx, config_path, {
        "seed": seed, "count": count, "poses": poses, "size": size,
        "preset": preset, "no_images": no_images,
    })
    out_dir = _prepare_out(out, force)
    records = synth.build_records(values["seed"], values["count"],
                                  values["poses"],
                                  (values["size"], values["size"]),
                                  values["preset"])
    corpus_manifest = synth.write_corpus(out_dir, records,
                                         with_images=not values["no_images"])
    outputs = [corpus_manifest]
    if not values["no_images"]:
        outputs += [out_dir / rec.image_path for rec in records]
    values["out"] = str(out)
    _write_manifest(out_dir, ["gen"], values, [], outputs)
    click.echo(f"wrote {len(records)} records to {out_dir}")


# --------------------------------------------------------------------------
# train


@main.command()
@click.option("--corpus", "corpus_dir", required=True,
              type=click.Path(exists=True))
@click.option("--epochs", type=int, default=det.TrainConfig.epochs,
              show_default=True)
@click.option("--learning-rate", type=float, default=det.TrainConfig.learning_rate,
              show_default=True)
@click.option("--batch-size", type=int, default=det.TrainConfig.batch_size,
              show_default=True)
@click.option("--seed", type=int, default=det.TrainConfig.seed, show_default=True)
@click.option("--sigma-blob", type=float, default=det.TrainConfig.sigma_blob,
              show_default=True)
@click.option("--peak-target", type=float, default=det.TrainConfig.peak_target,
              show_default=True)
@click.option("--out", required=True, type=click.Path())
@click.option("--force", is_flag=True)
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.pass_context
@guarded
def train(ctx, corpus_dir, epochs, learning_rate, batch_size, seed, sigma_blob,
          peak_target, out, force, config_path):
    """Train the heatmap detector on a corpus."""
    values = _apply_config(ctx, config_path, {
        "corpus": str(corpus_dir), "epochs": epochs,
        "learning_rate": learning_rate, "batch_size": batch_size,
        "seed": seed, "sigma_blob": sigma_blob, "peak_target": peak_target,
    })
    out_dir = _prepare_out(out, force)
    records = synth.read_corpus(values["corpus"])
    images = None
    if records and (Path(values["corpus"]) / records[0].image_path).is_file():
        images = [synth.record_image(values["corpus"], rec) for rec in records]
    config = det.TrainConfig(
        seed=values["seed"], epochs=values["epochs"],
        learning_rate=values["learning_rate"],
        batch_size=values["batch_size"], sigma_blob=values["sigma_blob"],
        peak_target=values["peak_target"],
    )
    weights = det.train_detector(
        records, config, images=images,
        log=lambda epoch, loss: click.echo(f"epoch {epoch}: loss {loss:.6f}"),
    )
    ckpt = out_dir / "detector.ckpt"
    det.save_checkpoint(weights, ckpt)
    values["out"] = str(out)
    _write_manifest(out_dir, ["train"], values, [values["corpus"]], [ckpt])
    click.echo(f"checkpoint written to {ckpt}")


# --------------------------------------------------------------------------
# attack


@main.command()
@click.option("--corpus", "corpus_dir", required=True,
              type=click.Path(exists=True))
@click.option("--record", "record_id", required=True,
              help="Record id, e.g. s0003_p1.")
@click.option("--weights", "weights_path", required=True,
              type=click.Path(exists=True))
@click.option("--keypoint", type=_KEYPOINT_CHOICE, required=True)
@click.option("--flip-with", type=_KEYPOINT_CHOICE, default=None,
              help="Second keypoint; turns the attack into a flip.")
@click.option("--mode", type=click.Choice(["local", "global"]),
              default="local", show_default=True)
@click.option("--epsilon", type=float, default=0.035, show_default=True)
@click.option("--alpha", type=float, default=1.0 / 255.0)
@click.option("--radius", type=float, default=12.0, show_default=True)
@click.option("--stop-rmse", type=float, default=None,
              help="Budget stop; defaults per mode.")
@click.option("--max-iters", type=int, default=300, show_default=True)
@click.option("--untargeted-ascent", is_flag=True,
              help="Ascend the clean-map loss instead of targeted descent.")
@click.option("--out", required=True, type=click.Path())
@click.option("--force", is_flag=True)
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.pass_context
@guarded
def attack(ctx, corpus_dir, record_id, weights_path, keypoint, flip_with, mode,
           epsilon, alpha, radius, stop_rmse, max_iters, untargeted_ascent,
           out, force, config_path):
    """Perturb one corpus image to remove or flip a keypoint."""
    values = _apply_config(ctx, config_path, {
        "corpus": str(corpus_dir), "record": record_id,
        "weights": str(weights_path), "keypoint": keypoint,
        "flip_with": flip_with, "mode": mode, "epsilon": epsilon,
        "alpha": alpha, "radius": radius, "stop_rmse": stop_rmse,
        "max_iters": max_iters, "untargeted_ascent": untargeted_ascent,
    })
    out_dir = _prepare_out(out, force)
    rec = _find_record(values["corpus"], values["record"])
    image = _record_raster(values["corpus"], rec)
    weights = det.load_checkpoint(values["weights"])
    index = bm.KEYPOINT_INDEX[values["keypoint"]]
    other = (bm.KEYPOINT_INDEX[values["flip_with"]]
             if values["flip_with"] else None)
    spec = attacks.AttackSpec(
        kind="flip" if other is not None else "remove",
        index=index, other=other, mode=values["mode"],
        epsilon=values["epsilon"], alpha=values["alpha"],
        radius=values["radius"], stop_rmse=values["stop_rmse"],
        max_iters=values["max_iters"], ascent=values["untargeted_ascent"],
    )
    result = attacks.run_attack(image, weights, spec)

    adv_path = out_dir / "adversarial.f32"
    save_image(adv_path, result.adversarial)
    view_path = out_dir / "adversarial.pgm"
    save_image(view_path, result.adversarial)
    trace_path = out_dir / "trace.csv"
    attacks.save_trace_csv(result, trace_path)
    summary_path = out_dir / "summary.json"
    summary_path.write_text(
        json.dumps(attacks.summary_dict(spec, result), indent=2, sort_keys=True)
        + "\n"
    )
    values["out"] = str(out)
    _write_manifest(out_dir, ["attack"], values,
                    [values["corpus"], values["weights"]],
                    [adv_path, view_path, trace_path, summary_path])
    click.echo(
        f"{spec.kind} {values['keypoint']}: success={result.success} "
        f"iters={result.iterations} mse={result.final_stats.mse:.6g}"
    )


def _find_record(corpus_dir, record_id):
    for rec in synth.read_corpus(corpus_dir):
        if rec.record_id == record_id:
            return rec
    raise click.UsageError(f"no record {record_id!r} in {corpus_dir}")


def _record_raster(corpus_dir, rec) -> Image:
    path = Path(corpus_dir) / rec.image_path
    if path.is_file():
        return load_image(path)
    return synth.render(rec.subject)[0]


# --------------------------------------------------------------------------
# fit


@main.command(name="fit")
@click.option("--corpus", "corpus_dir", required=True,
              type=click.Path(exists=True))
@click.option("--record", "record_id", required=True)
@click.option("--weights", "weights_path", type=click.Path(exists=True),
              default=None,
              help="Detect keypoints with this checkpoint instead of using GT.")
@click.option("--image", "image_path", type=click.Path(exists=True),
              default=None,
              help="Raster to detect on (e.g. an adversarial output); "
                   "requires --weights.")
@fit_options
@click.option("--out", required=True, type=click.Path())
@click.option("--force", is_flag=True)
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.pass_context
@guarded
def fit_cmd(ctx, corpus_dir, record_id, weights_path, image_path, out, force,
            config_path, **fit_flags):
    """Fit the body model to one record's keypoints."""
    values = _apply_config(ctx, config_path, {
        "corpus": str(corpus_dir), "record": record_id,
        "weights": str(weights_path) if weights_path else None,
        "image": str(image_path) if image_path else None, **fit_flags,
    })
    if values["image"] and not values["weights"]:
        raise click.UsageError("--image requires --weights")
    out_dir = _prepare_out(out, force)
    rec = _find_record(values["corpus"], values["record"])
    config = _fit_config(values, FitConfig())

    if values["weights"]:
        weights = det.load_checkpoint(values["weights"])
        raster = (load_image(values["image"]) if values["image"]
                  else _record_raster(values["corpus"], rec))
        keypoints = det.nms_keypoints(det.forward(raster, weights))
        source = "detector"
    else:
        keypoints = rec.keypoints
        source = "ground-truth"

    result = fit(keypoints, rec.subject.camera, config)
    report = fit_report(result)
    report["record"] = rec.record_id
    report["keypoint_source"] = source
    report["shape_error_cm"] = ev.shape_error(result.params.shape,
                                              rec.subject.beta_gt)
    fit_path = out_dir / "fit.json"
    fit_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    values.update(_config_args(config))
    values["out"] = str(out)
    inputs = [values["corpus"]]
    if values["weights"]:
        inputs.append(values["weights"])
    if values["image"]:
        inputs.append(values["image"])
    _write_manifest(out_dir, ["fit"], values, inputs, [fit_path])
    click.echo(f"shape error {report['shape_error_cm']:.3f} cm "
               f"(converged={result.converged})")


# --------------------------------------------------------------------------
# eval


@main.group(name="eval")
def eval_group():
    """Experiment drivers emitting CSV and JSON reports."""


def _load_eval_corpus(corpus_dir, limit):
    if corpus_dir:
        records = synth.read_corpus(corpus_dir)
    else:
        records = ev.default_corpus()
    if limit:
        records = records[:limit]
    return records


def _emit_report(report, out_dir: Path):
    csv_path = out_dir / "report.csv"
    csv_path.write_text(report.csv_text())
    json_path = out_dir / "report.json"
    json_path.write_text(report.json_text())
    return [csv_path, json_path]


def _eval_common(fn):
    opts = [
        click.option("--corpus", "corpus_dir", type=click.Path(exists=True),
                     default=None,
                     help="Corpus directory; defaults to the documented "
                          "evaluation corpus."),
        click.option("--limit", type=int, default=None,
                     help="Use only the first N records."),
        click.option("--out", required=True, type=click.Path()),
        click.option("--force", is_flag=True),
        click.option("--config", "config_path", type=click.Path(exists=True)),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fit_options(fn)


@eval_group.command(name="synthetic-removal")
@_eval_common
@click.pass_context
@guarded
def eval_removal(ctx, corpus_dir, limit, out, force, config_path, **fit_flags):
    """Drop each keypoint in turn from clean GT detections and refit."""
    values = _apply_config(ctx, config_path, {
        "corpus": str(corpus_dir) if corpus_dir else None, "limit": limit,
        **fit_flags,
    })
    out_dir = _prepare_out(out, force)
    records = _load_eval_corpus(values["corpus"], values["limit"])
    config = _fit_config(values, ev.EVAL_FIT_CONFIG)
    report = ev.run_synthetic_removal(records, config)
    outputs = _emit_report(report, out_dir)
    values.update(_config_args(config))
    values["out"] = str(out)
    _write_manifest(out_dir, ["eval", "synthetic-removal"], values,
                    [values["corpus"]] if values["corpus"] else [], outputs)
    click.echo(report.csv_text(), nl=False)


def _parse_pairs(text):
    pairs = []
    for chunk in text.split(","):
        names = chunk.strip().split(":")
        if len(names) != 2:
            raise click.UsageError(
                f"pair {chunk!r} must look like head_top:right_hip"
            )
        for name in names:
            if name not in bm.KEYPOINT_INDEX:
                raise click.UsageError(f"unknown keypoint {name!r}")
        pairs.append((names[0], names[1]))
    return pairs


@eval_group.command(name="synthetic-flip")
@_eval_common
@click.option("--pairs", "pairs_text", default=None,
              help="Comma-separated a:b pairs; defaults to the documented set.")
@click.pass_context
@guarded
def eval_flip(ctx, corpus_dir, limit, out, force, config_path, pairs_text,
              **fit_flags):
    """Swap keypoint pairs on clean GT detections and refit."""
    values = _apply_config(ctx, config_path, {
        "corpus": str(corpus_dir) if corpus_dir else None, "limit": limit,
        "pairs": pairs_text, **fit_flags,
    })
    out_dir = _prepare_out(out, force)
    records = _load_eval_corpus(values["corpus"], values["limit"])
    config = _fit_config(values, ev.FLIP_FIT_CONFIG)
    pairs = (_parse_pairs(values["pairs"]) if values["pairs"]
             else ev.DEFAULT_FLIP_PAIRS)
    report = ev.run_synthetic_flip(records, config, pairs)
    outputs = _emit_report(report, out_dir)
    values.update(_config_args(config))
    values["pairs"] = ",".join(f"{a}:{b}" for a, b in pairs)
    values["out"] = str(out)
    _write_manifest(out_dir, ["eval", "synthetic-flip"], values,
                    [values["corpus"]] if values["corpus"] else [], outputs)
    click.echo(report.csv_text(), nl=False)


@eval_group.command(name="adversarial")
@_eval_common
@click.option("--weights", "weights_path", required=True,
              type=click.Path(exists=True))
@click.option("--keypoints", "keypoints_text", default="all",
              help="Comma-separated keypoints to remove, or 'all'.")
@click.option("--flip-pairs", "flip_text", default=None,
              help="Comma-separated a:b pairs to flip adversarially.")
@click.option("--epsilon", type=float, default=0.035, show_default=True)
@click.option("--radius", type=float, default=12.0, show_default=True)
@click.option("--max-iters", type=int, default=300, show_default=True)
@click.pass_context
@guarded
def eval_adversarial(ctx, corpus_dir, limit, out, force, config_path,
                     weights_path, keypoints_text, flip_text, epsilon, radius,
                     max_iters, **fit_flags):
    """Attack rendered images, re-detect, refit, and report.

    The report carries two rows per column: the pixel attack and its oracle
    twin applied directly to the ground-truth keypoints.
    """
    values = _apply_config(ctx, config_path, {
        "corpus": str(corpus_dir) if corpus_dir else None, "limit": limit,
        "weights": str(weights_path), "keypoints": keypoints_text,
        "flip_pairs": flip_text, "epsilon": epsilon, "radius": radius,
        "max_iters": max_iters, **fit_flags,
    })
    out_dir = _prepare_out(out, force)
    records = _load_eval_corpus(values["corpus"], values["limit"])
    config = _fit_config(values, ev.EVAL_FIT_CONFIG)
    weights = det.load_checkpoint(values["weights"])

    if values["keypoints"] == "all":
        names = list(bm.KEYPOINT_NAMES)
    else:
        names = [n.strip() for n in values["keypoints"].split(",") if n.strip()]
        for name in names:
            if name not in bm.KEYPOINT_INDEX:
                raise click.UsageError(f"unknown keypoint {name!r}")
    specs = [
        attacks.AttackSpec.remove(bm.KEYPOINT_INDEX[n],
                                  epsilon=values["epsilon"],
                                  radius=values["radius"],
                                  max_iters=values["max_iters"])
        for n in names
    ]
    if values["flip_pairs"]:
        for a, b in _parse_pairs(values["flip_pairs"]):
            specs.append(attacks.AttackSpec.flip(
                bm.KEYPOINT_INDEX[a], bm.KEYPOINT_INDEX[b],
                epsilon=values["epsilon"], radius=values["radius"],
                max_iters=values["max_iters"],
            ))
    adversarial = ev.run_adversarial(records, weights, specs, config)
    synthetic = ev.run_synthetic_for_specs(records, specs, config)
    report = ev.merge_reports([synthetic, adversarial])
    outputs = _emit_report(report, out_dir)
    values.update(_config_args(config))
    values["out"] = str(out)
    inputs = [values["weights"]]
    if values["corpus"]:
        inputs.append(values["corpus"])
    _write_manifest(out_dir, ["eval", "adversarial"], values, inputs, outputs)
    click.echo(report.csv_text(), nl=False)


# --------------------------------------------------------------------------
# plot


@main.group(name="plot")
def plot_group():
    """Render SVG figures from traces and reports."""


@plot_group.command(name="fig8")
@click.argument("trace_csv", type=click.Path(exists=True))
@click.option("--title", default="attack trace", show_default=True)
@click.option("--out", required=True, type=click.Path())
@click.option("--force", is_flag=True)
@guarded
def plot_fig8(trace_csv, title, out, force):
    """Peak activation against perturbation budget from a trace CSV."""
    out_dir = _prepare_out(out, force)
    svg = plots.trace_figure(Path(trace_csv).read_text(), title)
    fig_path = out_dir / "fig.svg"
    fig_path.write_text(svg)
    _write_manifest(out_dir, ["plot", "fig8"],
                    {"trace_csv": str(trace_csv), "title": title,
                     "out": str(out)},
                    [trace_csv], [fig_path])
    click.echo(str(fig_path))


@plot_group.command(name="fig6")
@click.argument("report_json", type=click.Path(exists=True))
@click.option("--row", "row_label", default=None,
              help="Row label; defaults to the report's only row.")
@click.option("--title", default="shape error increases", show_default=True)
@click.option("--out", required=True, type=click.Path())
@click.option("--force", is_flag=True)
@guarded
def plot_fig6(report_json, row_label, title, out, force):
    """Per-attack error increase bars from a report JSON."""
    out_dir = _prepare_out(out, force)
    payload = json.loads(Path(report_json).read_text())
    rows = {row["label"]: row for row in payload["rows"]}
    if row_label is None:
        if len(rows) != 1:
            raise click.UsageError(
                f"report has rows {sorted(rows)}; pick one with --row"
            )
        row_label = next(iter(rows))
    if row_label not in rows:
        raise click.UsageError(f"no row {row_label!r} in {report_json}")
    svg = plots.bar_chart(payload["columns"],
                          rows[row_label]["percent_increase"], title,
                          "shape error increase (%)")
    fig_path = out_dir / "fig.svg"
    fig_path.write_text(svg)
    _write_manifest(out_dir, ["plot", "fig6"],
                    {"report_json": str(report_json), "row": row_label,
                     "title": title, "out": str(out)},
                    [report_json], [fig_path])
    click.echo(str(fig_path))


# --------------------------------------------------------------------------
# replay


def _argv_from_manifest(manifest: dict, out_override) -> list:
    command = manifest["command"]
    target = main
    for name in command:
        target = target.commands[name]
    args = dict(manifest["args"])
    if out_override:
        args["out"] = str(out_override)
    argv = list(command)
    for param in target.params:
        if param.name in ("config_path", "force"):
            continue  # config is already resolved into args; force is per-run
        # manifests key options by their flag spelling, not the param name
        key = param.name
        if key not in args and param.opts:
            key = param.opts[0].lstrip("-").replace("-", "_")
        if key not in args:
            continue
        value = args[key]
        if isinstance(param, click.Argument):
            argv.append(str(value))
        elif param.is_flag:
            if param.secondary_opts:
                argv.append(param.opts[0] if value else param.secondary_opts[0])
            elif value:
                argv.append(param.opts[0])
        elif value is not None:
            argv.extend([param.opts[0], str(value)])
    return argv


@main.command()
@click.argument("manifest_path", type=click.Path(exists=True))
@click.option("--out", "out_override", type=click.Path(), default=None,
              help="Redirect outputs; defaults to the recorded directory.")
@click.option("--force", is_flag=True)
@guarded
def replay(manifest_path, out_override, force):
    """Re-run the command recorded in a manifest."""
    manifest = json.loads(Path(manifest_path).read_text())
    argv = _argv_from_manifest(manifest, out_override)
    if force:
        argv.append("--force")
    click.echo(f"replaying: {' '.join(argv)}")
    main.main(args=argv, standalone_mode=False)
