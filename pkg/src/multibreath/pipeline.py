"""File-level pipeline behind the command line: prepare, synth, train, evaluate, predict.

A work directory produced by ``prepare`` holds::

    manifest.jsonl       one cycle per line, split-tagged
    summary.json         per-split class / patient / recording counts
    normalization.json   mean and std of the training spectrograms
    spectrograms.npy     float32 [cycles, n_mels, frames], manifest order
    prepare_config.json  resolved configuration used for the above
"""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import data
from .config import RunConfig
from .csra import predict_labels
from .errors import DataError
from .frontend import FrontendConfig, Waveform, filterbank_for, waveform_to_logmel
from .metrics import MetricsReport, confusion_from_classes, format_metrics, icbhi_metrics
from .model import MultiBreathModel
from .portable import confusion_heatmap, loss_curve
from .training import (OptimizerState, load_checkpoint, save_checkpoint, steps_per_epoch,
                       train_epoch)

log = logging.getLogger("multibreath")

SPLIT_FILE_NAMES = ("split.txt", "ICBHI_challenge_train_test.txt")


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _find_split_file(data_dir: Path, cfg: RunConfig) -> Path:
    if cfg.split_file:
        p = Path(cfg.split_file)
        if not p.exists():
            raise DataError(f"split file not found: {p}")
        return p
    for name in SPLIT_FILE_NAMES:
        if (data_dir / name).exists():
            return data_dir / name
    raise DataError(f"{data_dir}: no split file ({' or '.join(SPLIT_FILE_NAMES)}); pass --split-file "
                    "or use --split ratio")


def spectrograms_for(entries, fcfg: FrontendConfig) -> np.ndarray:
    """Log-mel spectrograms ``[len(entries), n_mels, frames]`` as float32."""
    fb = filterbank_for(fcfg)
    cache = data.RecordingCache()
    out = np.empty((len(entries),) + fcfg.shape, dtype=np.float32)
    for i, e in enumerate(entries):
        cyc = cache.cycle(e)
        out[i] = waveform_to_logmel(Waveform(cyc.samples, cyc.sample_rate_hz), fcfg, fb).values
    return out


def prepare(data_dir, out_dir, cfg: RunConfig, spectrograms: bool = True) -> data.DatasetManifest:
    data_dir, out = Path(data_dir), Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = data.scan_dataset(data_dir)
    if cfg.split == "official":
        split_path = _find_split_file(data_dir, cfg)
        split_map = data.parse_split_file(split_path.read_text(), str(split_path))
        manifest = data.split_patients(entries, "official", split_map)
    else:
        manifest = data.split_patients(entries, "ratio", ratio=cfg.split_ratio, seed=cfg.seed)
    data.write_manifest(manifest, out)
    log.info("manifest: %s", json.dumps(manifest.summary, sort_keys=True))
    (out / "prepare_config.json").write_text(cfg.dumps())
    if spectrograms:
        specs = spectrograms_for(manifest.entries, cfg.frontend())
        train = specs[[e.split == "train" for e in manifest.entries]]
        if len(train) == 0:
            raise DataError("training split is empty; cannot compute normalization constants")
        norm = {"mean": float(train.mean(dtype=np.float64)), "std": float(train.std(dtype=np.float64)),
                "frontend": asdict(cfg.frontend())}
        np.save(out / "spectrograms.npy", specs)
        _write_json(out / "normalization.json", norm)
    return manifest


def synth(out_dir, cfg: RunConfig) -> data.DatasetManifest:
    """Synthetic ICBHI-style recordings under ``out/audio``, then ``prepare`` into ``out``."""
    out = Path(out_dir)
    data.write_synthetic_dataset(out / "audio", cfg.synth_per_class, cfg.synth_test_per_class, seed=cfg.seed,
                                 sample_rate_hz=cfg.synth_sample_rate,
                                 cycles_per_recording=cfg.synth_cycles_per_recording)
    if cfg.split != "official" or cfg.split_file:
        log.info("synth: the generated split.txt is used; split/split_file overrides are ignored")
    cfg = RunConfig(**{**cfg.__dict__, "split": "official", "split_file": ""})
    return prepare(out / "audio", out, cfg)


class WorkDir:
    """Read access to a prepared work directory."""

    def __init__(self, path):
        self.path = Path(path)
        man_path = self.path / "manifest.jsonl"
        if not man_path.exists():
            raise DataError(f"{self.path}: no manifest.jsonl; run prepare first")
        self.manifest = data.read_manifest(man_path)
        norm_path = self.path / "normalization.json"
        spec_path = self.path / "spectrograms.npy"
        if not norm_path.exists() or not spec_path.exists():
            raise DataError(f"{self.path}: missing normalization.json or spectrograms.npy; rerun prepare")
        self.normalization = json.loads(norm_path.read_text())
        self.spectrograms = np.load(spec_path, mmap_mode="r")
        if len(self.spectrograms) != len(self.manifest.entries):
            raise DataError(f"{spec_path}: {len(self.spectrograms)} spectrograms for "
                            f"{len(self.manifest.entries)} manifest entries")

    def check_frontend(self, fcfg: FrontendConfig):
        if self.normalization["frontend"] != asdict(fcfg):
            raise DataError(f"{self.path}: spectrograms were prepared with a different front end; rerun prepare")

    def indices(self, split: str) -> np.ndarray:
        if split not in data.SPLITS:
            raise DataError(f"unknown split {split!r}")
        return np.array([i for i, e in enumerate(self.manifest.entries) if e.split == split], dtype=np.int64)


def _targets(entries, loss_mode: str) -> np.ndarray:
    if loss_mode == "multilabel_bce":
        return np.stack([e.label for e in entries]).astype(np.int64)
    return np.array([e.class_id for e in entries], dtype=np.int64)


def predict_classes(model: MultiBreathModel, specs, threshold: float = 0.5) -> tuple:
    """4-class ids and per-output probabilities; 2-output heads go through the label codec."""
    z = model.predict_logits(specs)
    if model.head_cfg.num_classes == 2:
        labels, probs = predict_labels(z, threshold)
        return data.classes_from_labels(labels), probs
    shifted = np.exp(z - z.max(axis=1, keepdims=True))
    return z.argmax(axis=1), shifted / shifted.sum(axis=1, keepdims=True)


def evaluate_model(model, specs, entries, threshold: float = 0.5) -> MetricsReport:
    pred, _ = predict_classes(model, specs, threshold)
    truth = np.array([e.class_id for e in entries])
    return icbhi_metrics(confusion_from_classes(truth, pred))


def _carve_validation(entries, indices, fraction: float, seed: int):
    sub = [entries[i] for i in indices]
    carved = data.split_patients(sub, "ratio", ratio=1.0 - fraction, seed=seed)
    keep = np.array([e.split == "train" for e in carved.entries])
    if keep.all() or not keep.any():
        raise DataError(f"val_fraction={fraction} leaves an empty train or validation set")
    return indices[keep], indices[~keep]


def _float(v: float) -> str:
    return repr(float(v))


def train(work_dir, out_dir, cfg: RunConfig) -> dict:
    """Train from a prepared work directory; returns paths of the written artifacts."""
    work = WorkDir(work_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fcfg = cfg.frontend()
    work.check_frontend(fcfg)
    tcfg = cfg.train()
    (out / "config.json").write_text(cfg.dumps())

    entries = work.manifest.entries
    train_idx, val_idx = work.indices("train"), np.zeros(0, dtype=np.int64)
    if len(train_idx) == 0:
        raise DataError(f"{work.path}: training split is empty")
    if cfg.val_fraction > 0:
        train_idx, val_idx = _carve_validation(entries, train_idx, cfg.val_fraction, cfg.seed)
    x_train = np.ascontiguousarray(work.spectrograms[train_idx])
    y_train = _targets([entries[i] for i in train_idx], cfg.loss_mode)
    x_val = np.ascontiguousarray(work.spectrograms[val_idx])
    norm = work.normalization

    model = MultiBreathModel(cfg.backbone(norm["mean"], norm["std"]), cfg.head(), seed=cfg.seed)
    state = OptimizerState.for_params(model.params)
    total = cfg.epochs * steps_per_epoch(len(x_train), cfg.batch_size)
    header = ["epoch", "mean_train_loss", "lr_start", "lr_end"]
    if len(val_idx):
        header += ["val_specificity", "val_sensitivity", "val_score"]
    rows, timing, losses = [], [], []
    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
    try:
        for epoch in range(cfg.epochs):
            ep = train_epoch(model, x_train, y_train, tcfg, epoch, state, total, pool)
            row = [str(epoch), _float(ep.mean_loss), _float(ep.lr_start), _float(ep.lr_end)]
            msg = f"epoch {epoch + 1}/{cfg.epochs} loss {ep.mean_loss:.4f} lr {ep.lr_end:.2e}"
            if len(val_idx):
                rep = evaluate_model(model, x_val, [entries[i] for i in val_idx], cfg.threshold)
                row += [_float(rep.sp), _float(rep.se), _float(rep.score)]
                msg += f" val score {rep.score:.4f}"
            rows.append(row)
            timing.append([str(epoch), f"{ep.wall_seconds:.3f}"])
            losses.extend(ep.batch_losses)
            log.info("%s (%.1f s)", msg, ep.wall_seconds)
    finally:
        if pool is not None:
            pool.shutdown()

    paths = {"checkpoint": out / "model.ckpt", "log": out / "train_log.csv", "timing": out / "train_timing.csv"}
    extra = {"train": asdict(tcfg), "frontend": asdict(fcfg), "threshold": cfg.threshold,
             "normalization": {"mean": norm["mean"], "std": norm["std"]},
             "rng": {"seed": cfg.seed, "epochs_completed": cfg.epochs, "optimizer_steps": state.step},
             "run": cfg.to_dict()}
    save_checkpoint(paths["checkpoint"], model, extra, state)
    _write_csv(paths["log"], header, rows)
    _write_csv(paths["timing"], ["epoch", "wall_seconds"], timing)
    if cfg.plots:
        paths["loss_curve"] = out / "loss_curve.ppm"
        loss_curve(paths["loss_curve"], losses)
    return paths


def _write_csv(path: Path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue())


def load_model(checkpoint_path):
    ckpt = load_checkpoint(checkpoint_path)
    return ckpt, ckpt.build_model()


def _frontend_of(ckpt) -> FrontendConfig:
    return FrontendConfig(**ckpt.config["frontend"])


def evaluate(checkpoint_path, work_dir, out_dir, split: str = "test", plots: bool = False,
             threshold: float | None = None) -> MetricsReport:
    ckpt, model = load_model(checkpoint_path)
    work = WorkDir(work_dir)
    work.check_frontend(_frontend_of(ckpt))
    idx = work.indices(split)
    if len(idx) == 0:
        raise DataError(f"{work.path}: split {split!r} is empty")
    thr = ckpt.config.get("threshold", 0.5) if threshold is None else threshold
    entries = [work.manifest.entries[i] for i in idx]
    report = evaluate_model(model, np.ascontiguousarray(work.spectrograms[idx]), entries, thr)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.txt").write_text(format_metrics(report))
    if plots:
        confusion_heatmap(out / "confusion.pgm", report.counts)
    return report


def predict(checkpoint_path, audio_path, annotation_path=None, threshold: float | None = None) -> list:
    """Per-cycle predictions for one recording; without annotations the whole file is one cycle."""
    ckpt, model = load_model(checkpoint_path)
    fcfg = _frontend_of(ckpt)
    thr = ckpt.config.get("threshold", 0.5) if threshold is None else threshold
    samples, sr = data.read_wav(audio_path)
    if annotation_path:
        anns = data.parse_annotation_file(Path(annotation_path).read_text(), str(annotation_path))
    else:
        anns = [data.CycleAnnotation(0.0, len(samples) / sr, 0, 0)]
    stem = Path(audio_path).stem
    try:
        meta = data.parse_recording_filename(stem)
    except DataError:
        meta = None
    fb = filterbank_for(fcfg)
    specs, spans = [], []
    for a in anns:
        lo = int(round(a.start_s * sr))
        hi = min(int(round(a.end_s * sr)), len(samples))
        if hi - lo <= 0:
            raise DataError(f"{annotation_path}: cycle {a.start_s}-{a.end_s} s lies outside the recording")
        specs.append(waveform_to_logmel(Waveform(samples[lo:hi], sr), fcfg, fb).values)
        spans.append((a.start_s, a.end_s))
    classes, probs = predict_classes(model, np.stack(specs), thr)
    results = []
    for i, ((t0, t1), c, p) in enumerate(zip(spans, classes, probs)):
        crackle, wheeze = data.flags_from_class(int(c))
        rec = {"cycle": i, "start_s": t0, "end_s": t1, "crackle": crackle, "wheeze": wheeze,
               "class": data.CLASS_NAMES[int(c)], "recording": stem}
        if model.head_cfg.num_classes == 2:
            rec.update(p_crackle=float(p[0]), p_wheeze=float(p[1]))
        else:
            rec.update({f"p_{name}": float(v) for name, v in zip(data.CLASS_NAMES, p)})
        if meta is not None:
            rec["patient_id"] = meta.patient_id
        results.append(rec)
    return results


__all__ = ["prepare", "synth", "train", "evaluate", "predict", "WorkDir", "spectrograms_for",
           "predict_classes", "evaluate_model", "load_model"]
