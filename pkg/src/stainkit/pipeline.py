"""Batch commands behind the CLI: template selection, tiling, normalization,
training, and evaluation.

Every command writes a ``manifest.json`` whose ``mapping`` section (the
input-to-output record) is a pure function of the inputs and configuration,
so reruns can be compared byte for byte; wall-clock timing lives outside
that section.
"""

from __future__ import annotations

import json
import logging
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__, classical, colorstats, model as model_mod
from .augment import augment_color_preserving, augment_structure_preserving
from .config import RunConfig
from .metrics import MetricReport
from .model import (ModelConfig, RestainModel, TrainingBatch, image_to_tensor,
                    load_checkpoint, save_checkpoint, train_step)
from .optim import AdamWState
from .tiling import TileSpec, tile_image

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_PARTIAL = 2


class PipelineError(RuntimeError):
    """A command cannot proceed at all (as opposed to per-file failures)."""


def read_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def write_image(path: str | Path, img: np.ndarray) -> None:
    Image.fromarray(img, mode="RGB").save(path, format="PNG")


def list_images(directory: str | Path) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise PipelineError(f"not a directory: {d}")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)


def _manifest(command: str, cfg: RunConfig, mapping: list[dict], seconds: float,
              extra: dict | None = None) -> dict:
    doc = {
        "tool": "stainkit",
        "tool_version": __version__,
        "command": command,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "mapping": mapping,
        "timing_seconds": round(seconds, 3),
    }
    if extra:
        doc.update(extra)
    return doc


def write_manifest(doc: dict, output_dir: str | Path) -> Path:
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "manifest.json"
    with open(path, "w") as fp:
        json.dump(doc, fp, indent=2, sort_keys=True)
        fp.write("\n")
    return path


# --- template selection -------------------------------------------------------


def cmd_select_template(cfg: RunConfig) -> tuple[int, dict]:
    started = time.monotonic()
    files = list_images(cfg.input_dir)
    if not files:
        raise PipelineError(f"no images in {cfg.input_dir}; cannot select a template")
    mapping = []
    images = []
    for path in files:
        images.append(read_image(path))
        mapping.append({"input": str(path), "status": "ok"})
    idx = colorstats.select_template(images, bins=cfg.histogram_bins)
    doc = _manifest("select-template", cfg, mapping, time.monotonic() - started,
                    {"selected_template": str(files[idx]), "selected_index": idx})
    write_manifest(doc, cfg.output_dir)
    return EXIT_OK, doc


# --- tiling --------------------------------------------------------------------


def cmd_tile(cfg: RunConfig) -> tuple[int, dict]:
    started = time.monotonic()
    files = list_images(cfg.input_dir)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not files:
        warnings.warn(f"no images in {cfg.input_dir}; nothing to tile")
    spec = TileSpec(cfg.tile_size, cfg.edge_policy)
    mapping = []
    failures = 0
    for path in files:
        try:
            tiles = tile_image(read_image(path), spec)
            outputs = []
            for t in tiles:
                dest = out / f"{path.stem}_x{t.x:05d}_y{t.y:05d}.png"
                write_image(dest, t.image)
                outputs.append(str(dest))
            mapping.append({"input": str(path), "outputs": outputs, "status": "ok"})
        except Exception as exc:
            failures += 1
            logger.error("tiling %s failed: %s", path, exc)
            mapping.append({"input": str(path), "status": "error", "error": str(exc)})
    doc = _manifest("tile", cfg, mapping, time.monotonic() - started)
    write_manifest(doc, cfg.output_dir)
    return (EXIT_PARTIAL if failures else EXIT_OK), doc


# --- normalization ---------------------------------------------------------------


def _resolve_template(cfg: RunConfig, files: list[Path]) -> np.ndarray:
    if cfg.template == "auto":
        images = [read_image(p) for p in files]
        idx = colorstats.select_template(images, bins=cfg.histogram_bins)
        logger.info("auto-selected template %s", files[idx])
        return images[idx]
    path = Path(cfg.template)
    if not path.is_file():
        raise PipelineError(f"template image not found: {path}")
    return read_image(path)


def _build_normalizer(cfg: RunConfig, template: np.ndarray):
    """Returns a callable tile -> normalized tile with per-method template prep."""
    if cfg.method == "reinhard":
        stats = classical.compute_lab_stats(template)
        return lambda img: classical.reinhard_normalize(img, stats)
    if cfg.method in ("macenko", "vahadane"):
        estimate = (classical.macenko_estimate_stains if cfg.method == "macenko"
                    else classical.vahadane_estimate_stains)
        tmpl_od = colorstats.rgb_to_od(template)
        tmpl_stains = estimate(tmpl_od)
        tmpl_conc = classical.compute_concentrations(tmpl_od, tmpl_stains)

        def run(img: np.ndarray) -> np.ndarray:
            od = colorstats.rgb_to_od(img)
            stains = estimate(od)
            conc = classical.compute_concentrations(od, stains)
            scale = classical.concentration_scale(conc, tmpl_conc)
            return classical.recombine(conc, tmpl_stains, scale)

        return run
    # learned model
    if not cfg.checkpoint:
        raise PipelineError("method 'model' needs --checkpoint pointing at a trained model")
    if not Path(cfg.checkpoint).is_file():
        raise PipelineError(f"checkpoint not found: {cfg.checkpoint}")
    net = load_checkpoint(cfg.checkpoint)
    color = net.quantize(net.encode_color(image_to_tensor(template)))

    def run_model(img: np.ndarray) -> np.ndarray:
        structure = net.encode_structure(image_to_tensor(img))
        return model_mod.tensor_to_image(net.decode(net.stain_module(structure, color)))

    return run_model


def cmd_normalize(cfg: RunConfig) -> tuple[int, dict]:
    started = time.monotonic()
    files = list_images(cfg.input_dir)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not files:
        warnings.warn(f"no images in {cfg.input_dir}; nothing to normalize")
        doc = _manifest("normalize", cfg, [], time.monotonic() - started)
        write_manifest(doc, cfg.output_dir)
        return EXIT_OK, doc
    template = _resolve_template(cfg, files)
    normalize = _build_normalizer(cfg, template)

    def task(path: Path):
        return normalize(read_image(path))

    results: list[np.ndarray | Exception] = []
    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            futures = [pool.submit(task, p) for p in files]
            for f in futures:
                try:
                    results.append(f.result())
                except Exception as exc:  # noqa: BLE001 - recorded per file
                    results.append(exc)
    else:
        for p in files:
            try:
                results.append(task(p))
            except Exception as exc:  # noqa: BLE001
                results.append(exc)
    mapping = []
    failures = 0
    for path, result in zip(files, results):  # single writer, input order
        if isinstance(result, Exception):
            failures += 1
            logger.error("normalizing %s failed: %s", path, result)
            mapping.append({"input": str(path), "status": "error", "error": str(result)})
        else:
            dest = out / f"{path.stem}.png"
            write_image(dest, result)
            mapping.append({"input": str(path), "output": str(dest), "status": "ok"})
    doc = _manifest("normalize", cfg, mapping, time.monotonic() - started)
    write_manifest(doc, cfg.output_dir)
    return (EXIT_PARTIAL if failures else EXIT_OK), doc


# --- training ---------------------------------------------------------------------


def _load_domain(directory: str, size: int, label: str) -> list[np.ndarray]:
    files = list_images(directory)
    if not files:
        raise PipelineError(f"domain {label}: no images in {directory!r}")
    images = []
    for path in files:
        img = read_image(path)
        if img.shape[0] != size or img.shape[1] != size:
            raise PipelineError(f"domain {label}: {path} is {img.shape[1]}x{img.shape[0]}, "
                                f"expected {size}x{size}")
        images.append(img)
    return images


def cmd_train(cfg: RunConfig) -> tuple[int, dict]:
    started = time.monotonic()
    size = cfg.model.image_size
    domain_a = _load_domain(cfg.domain_a_dir, size, "A")
    domain_b = _load_domain(cfg.domain_b_dir, size, "B")
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)

    net = RestainModel(ModelConfig.from_dict({**cfg.model.to_dict(), "seed": cfg.seed}))
    opt = AdamWState(learning_rate=cfg.train.learning_rate, beta1=cfg.train.beta1,
                     beta2=cfg.train.beta2, epsilon=cfg.train.epsilon,
                     weight_decay=cfg.train.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    history = train_model(net, opt, domain_a, domain_b, cfg.train.steps, rng,
                          log_every=cfg.train.log_every)

    ckpt_path = out / "checkpoint.stpc"
    save_checkpoint(ckpt_path, net)
    losses_path = out / "losses.csv"
    _write_losses_csv(losses_path, history)
    mapping = [{"domain_a": cfg.domain_a_dir, "domain_b": cfg.domain_b_dir,
                "steps": cfg.train.steps, "checkpoint": str(ckpt_path),
                "losses": str(losses_path), "status": "ok"}]
    doc = _manifest("train", cfg, mapping, time.monotonic() - started,
                    {"final_losses": history[-1] if history else {}})
    write_manifest(doc, cfg.output_dir)
    return EXIT_OK, doc


def train_model(net: RestainModel, opt: AdamWState, domain_a: list[np.ndarray],
                domain_b: list[np.ndarray], steps: int, rng: np.random.Generator,
                log_every: int = 10) -> list[dict]:
    """Run the optimization loop; returns one loss report per step.

    Anchor and other-domain roles alternate between the two palettes each
    step, so both sides shape the codebook and contrastive geometry.
    """
    history: list[dict] = []
    for step in range(steps):
        pool_anchor, pool_other = (domain_a, domain_b) if step % 2 == 0 else (domain_b, domain_a)
        anchor = pool_anchor[rng.integers(0, len(pool_anchor))]
        other = pool_other[rng.integers(0, len(pool_other))]
        batch = TrainingBatch(
            anchor=image_to_tensor(anchor),
            color_view=image_to_tensor(augment_color_preserving(anchor, int(rng.integers(2**31)))),
            structure_view=image_to_tensor(
                augment_structure_preserving(anchor, int(rng.integers(2**31)))),
            other_domain=image_to_tensor(other),
        )
        report = train_step(batch, net, opt)
        report = {"step": step, **report}
        history.append(report)
        if net.config.codebook_restart and step and step % net.config.restart_interval == 0:
            moved = net.restart_dead_entries(net.encode_color(batch.anchor), rng)
            if moved:
                logger.info("step %d: reseeded %d dead codebook entries", step, moved)
        if log_every and step % log_every == 0:
            logger.info("step %d: total=%.5f", step, report.get("total", 0.0))
    return history


def _write_losses_csv(path: Path, history: list[dict]) -> None:
    import csv

    names = sorted({k for row in history for k in row if k != "step"})
    with open(path, "w", newline="") as fp:
        writer = csv.writer(fp)
        writer.writerow(["step", *names])
        for row in history:
            writer.writerow([row["step"], *(repr(row.get(n, "")) for n in names)])


# --- evaluation --------------------------------------------------------------------


def cmd_evaluate(cfg: RunConfig) -> tuple[int, dict]:
    """Compare images in input_dir against same-named files in reference_dir."""
    started = time.monotonic()
    outputs = {p.name: p for p in list_images(cfg.input_dir)}
    references = {p.name: p for p in list_images(cfg.reference_dir)}
    names = sorted(set(outputs) & set(references))
    unmatched = sorted(set(outputs) ^ set(references))
    for name in unmatched:
        logger.warning("no counterpart for %s; skipping", name)
    report = MetricReport()
    mapping = []
    failures = 0
    for name in names:
        try:
            report.add(name, read_image(outputs[name]), read_image(references[name]))
            mapping.append({"output": str(outputs[name]), "reference": str(references[name]),
                            "status": "ok"})
        except Exception as exc:  # noqa: BLE001
            failures += 1
            logger.error("evaluating %s failed: %s", name, exc)
            mapping.append({"output": str(outputs[name]), "reference": str(references[name]),
                            "status": "error", "error": str(exc)})
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    if report.rows:
        report.write_csv(out / "metrics.csv")
    doc = _manifest("evaluate", cfg, mapping, time.monotonic() - started,
                    {"unmatched": unmatched,
                     "means": report.means() if report.rows else {}})
    write_manifest(doc, cfg.output_dir)
    code = EXIT_PARTIAL if (failures or unmatched) else EXIT_OK
    return code, doc
