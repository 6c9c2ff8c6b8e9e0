"""Command-line entry point: corpus synthesis, training, evaluation, sweeps.

Every command reads one :class:`~vqse.config.ExperimentConfig`, draws its
randomness from per-component streams of the master seed (see
:mod:`vqse.seeding`) and writes only under ``--out``. Primary outputs (CSV
tables, checkpoints) are byte-identical across re-runs with the same config
and seed; ``run_*.json`` manifests also carry wall-clock timings.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
import tempfile
import time
import traceback
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .config import ExperimentConfig, load_config, parse_assignment
from .datagen import ToyCorpus, draw_paired, load_corpus, toy_corpus, write_corpus
from .dsp import ConfigurationError
from .enhancer import HISTORY_COLUMNS, Enhancer, TrainMode, enhance, load_enhancer, save_enhancer, train_se
from .metrics import eval_report, margin_diagnostic
from .seeding import component_rng
from .vqvae import VqVae, VqVaeLossReport, load_vqvae, save_vqvae, train_vqvae

log = logging.getLogger("vqse")


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------

def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _cell(v: Any) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_cell(v) for v in row])
    _atomic_write(path, buf.getvalue().encode())
    return path


@dataclass
class RunManifest:
    """Everything needed to re-run a command: config, seed, inputs, outputs."""

    command: str
    config: dict
    seed: int
    code_version: str = __version__
    inputs: dict = field(default_factory=dict)
    checkpoints: dict = field(default_factory=dict)
    reports: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    def write(self, out_dir: Path) -> Path:
        path = out_dir / f"run_{self.command}.json"
        _atomic_write(path, (json.dumps(asdict(self), indent=2, sort_keys=True) + "\n").encode())
        return path


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

@dataclass
class Splits:
    train_clean: list
    train_noise: list
    valid_clean: list
    valid_noise: list
    test_clean: list
    test_noise: dict
    unpaired: list | None


def _samples(sources) -> list[np.ndarray]:
    return [s.samples for s in sources]


def load_splits(cfg: ExperimentConfig, need_unpaired: bool = False) -> Splits:
    """Read the manifests and cut the paired training speech to the
    configured fraction (a fixed permutation, so smaller fractions are
    subsets of larger ones)."""
    cfg.validate(require_manifest=True)
    corpus = load_corpus(cfg.data.manifest)
    unpaired = None
    if cfg.data.unpaired_manifest:
        unpaired = _samples(load_corpus(cfg.data.unpaired_manifest).unpaired) or None
    if need_unpaired and not unpaired:
        raise ConfigurationError(f"mode {cfg.semisup.mode.value} needs an unpaired manifest (data.unpaired_manifest)")
    return _splits(cfg, corpus, unpaired)


def _splits(cfg: ExperimentConfig, corpus: ToyCorpus, unpaired) -> Splits:
    seen, unseen = cfg.corpus.seen_classes, cfg.corpus.unseen_classes
    train_clean = _samples(corpus.select("clean", "train"))
    if not train_clean:
        raise ConfigurationError("manifest has no training speech")
    order = component_rng(cfg.seed, "data.fraction").permutation(len(train_clean))
    keep = max(1, math.ceil(cfg.data.paired_fraction * len(train_clean)))
    return Splits(
        train_clean=[train_clean[i] for i in sorted(order[:keep])],
        train_noise=_samples(corpus.select("noise", "train", seen)),
        valid_clean=_samples(corpus.select("clean", "valid")),
        valid_noise=_samples(corpus.select("noise", "valid")),
        test_clean=_samples(corpus.select("clean", "test")),
        test_noise={"seen": _samples(corpus.select("noise", "test", seen)),
                    "unseen": _samples(corpus.select("noise", "test", unseen))},
        unpaired=unpaired,
    )


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth_data(cfg: ExperimentConfig, out: Path) -> dict:
    t0 = time.perf_counter()
    root = out / "corpus"
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigurationError(f"cannot write to {root}: {exc}") from exc
    corpus = toy_corpus(component_rng(cfg.seed, "corpus"), cfg.corpus)
    paired, unpaired = write_corpus(corpus, root)
    manifest = RunManifest("synth-data", cfg.snapshot(), cfg.seed,
                           reports={"manifest": str(paired), "unpaired_manifest": str(unpaired)},
                           timings={"total_s": time.perf_counter() - t0})
    manifest.write(out)
    return manifest.reports


def cmd_train_vqvae(cfg: ExperimentConfig, out: Path, resume: bool = False, splits: Splits | None = None) -> dict:
    t0 = time.perf_counter()
    splits = splits or load_splits(cfg)
    model = VqVae(cfg.vqvae, cfg.stft, component_rng(cfg.seed, "vqvae.init"))
    ckpt_path = out / "vqvae.ckpt"
    # periodic checkpoints (with optimiser and RNG state) go to a separate file
    resume_path = out / "vqvae.resume.ckpt"
    if resume and not resume_path.is_file():
        raise ConfigurationError(f"nothing to resume: {resume_path} does not exist")
    result = train_vqvae(splits.train_clean, splits.train_noise, model, cfg.vqvae_train, cfg.mix,
                         component_rng(cfg.seed, "vqvae.train"), checkpoint_path=resume_path, resume=resume)
    save_vqvae(ckpt_path, model, extra_meta={"step": cfg.vqvae_train.steps})
    loss_csv = write_csv(out / "vqvae_loss.csv", ("step",) + VqVaeLossReport.FIELDS,
                         [[i + 1] + r.as_row() for i, r in enumerate(result.history)])
    usage_csv = write_csv(out / "vqvae_usage.csv", ("step", "speech_fraction", "noise_fraction"),
                          [[u["step"], u["speech_fraction"], u["noise_fraction"]] for u in result.usage])
    manifest = RunManifest("train-vqvae", cfg.snapshot(), cfg.seed, inputs={"manifest": cfg.data.manifest},
                           checkpoints={"vqvae": str(ckpt_path)},
                           reports={"loss": str(loss_csv), "usage": str(usage_csv)},
                           timings={"total_s": time.perf_counter() - t0})
    manifest.write(out)
    return {"vqvae": ckpt_path, "loss": loss_csv, "usage": usage_csv}


def _load_frozen_vqvae(path: Path | str, cfg: ExperimentConfig) -> VqVae:
    if not Path(path).is_file():
        raise ConfigurationError(f"VQ-VAE checkpoint not found: {path}")
    model, _, _ = load_vqvae(path)
    if model.stft_cfg != cfg.stft:
        raise ConfigurationError("VQ-VAE checkpoint was trained with different STFT settings")
    return model.freeze()


def cmd_train_se(cfg: ExperimentConfig, out: Path, vqvae_path: Path | str, splits: Splits | None = None) -> dict:
    t0 = time.perf_counter()
    mode = cfg.semisup.mode
    splits = splits or load_splits(cfg, need_unpaired=mode.uses_unpaired)
    vq = _load_frozen_vqvae(vqvae_path, cfg)
    model = Enhancer(cfg.enhancer, component_rng(cfg.seed, "se.init"))
    val_rng = component_rng(cfg.seed, "se.val")
    val_set = [draw_paired(splits.valid_clean, splits.valid_noise, cfg.mix, val_rng)
               for _ in range(cfg.semisup.val_mixtures)] if splits.valid_clean and splits.valid_noise else []
    ckpt_path = out / f"se_{mode.value}.ckpt"
    result = train_se(splits.train_clean, splits.train_noise, splits.unpaired if mode.uses_unpaired else None,
                      model, vq, cfg.semisup, cfg.mix, component_rng(cfg.seed, "se.paired"),
                      component_rng(cfg.seed, "se.unpaired"), val_set, cfg.stft, cfg.floor_epsilon,
                      checkpoint_path=ckpt_path)
    save_enhancer(ckpt_path, model, extra_meta={"mode": mode.value, "step": cfg.semisup.steps})
    hist_csv = write_csv(out / f"se_{mode.value}_history.csv", HISTORY_COLUMNS,
                         [[row[c] for c in HISTORY_COLUMNS] for row in result.history])
    manifest = RunManifest("train-se", cfg.snapshot(), cfg.seed,
                           inputs={"manifest": cfg.data.manifest, "unpaired_manifest": cfg.data.unpaired_manifest,
                                   "vqvae": str(vqvae_path)},
                           checkpoints={"enhancer": str(ckpt_path)}, reports={"history": str(hist_csv)},
                           timings={"total_s": time.perf_counter() - t0})
    manifest.write(out)
    return {"enhancer": ckpt_path, "history": hist_csv, "result": result}


def cmd_eval(cfg: ExperimentConfig, out: Path, se_path: Path | str, splits: Splits | None = None,
             name: str | None = None) -> dict:
    t0 = time.perf_counter()
    if not Path(se_path).is_file():
        raise ConfigurationError(f"enhancer checkpoint not found: {se_path}")
    splits = splits or load_splits(cfg)
    model, _, _ = load_enhancer(se_path)
    report = eval_report(lambda x: enhance(x, model, cfg.stft, cfg.floor_epsilon), splits.test_clean,
                         splits.test_noise, cfg.data.snr_grid, cfg.data.eval_mixtures, cfg.mix,
                         component_rng(cfg.seed, "eval"))
    name = name or Path(se_path).stem
    csv_path = out / f"eval_{name}.csv"
    txt_path = out / f"eval_{name}.txt"
    _atomic_write(csv_path, report.to_csv().encode())
    _atomic_write(txt_path, report.to_text().encode())
    RunManifest("eval", cfg.snapshot(), cfg.seed, inputs={"enhancer": str(se_path)},
                reports={"csv": str(csv_path), "text": str(txt_path)},
                timings={"total_s": time.perf_counter() - t0}).write(out)
    return {"csv": csv_path, "text": txt_path, "report": report}


def cmd_margin_diag(cfg: ExperimentConfig, out: Path, vqvae_path: Path | str, splits: Splits | None = None) -> dict:
    t0 = time.perf_counter()
    vq = _load_frozen_vqvae(vqvae_path, cfg)
    splits = splits or load_splits(cfg)
    curve = margin_diagnostic(vq, splits.valid_clean, splits.valid_noise, cfg.data.snr_grid,
                              cfg.data.margin_mixtures, cfg.mix, component_rng(cfg.seed, "margin"))
    csv_path = out / "margin.csv"
    _atomic_write(csv_path, curve.to_csv().encode())
    RunManifest("margin-diag", cfg.snapshot(), cfg.seed, inputs={"vqvae": str(vqvae_path)},
                reports={"csv": str(csv_path), "spearman": curve.spearman()},
                timings={"total_s": time.perf_counter() - t0}).write(out)
    return {"csv": csv_path, "curve": curve}


SWEEP_COLUMNS = ("mode", "fraction", "seen_si_sdr_improvement", "unseen_si_sdr_improvement", "status", "error")


def _mean_improvement(report, split: str) -> float | None:
    vals = [r.improvement for r in report.rows if r.split == split and r.improvement is not None]
    return float(np.mean(vals)) if vals else None


def cmd_sweep(cfg: ExperimentConfig, out: Path, fractions: Sequence[float] | None = None,
              modes: Sequence[str] | None = None) -> dict:
    """Cross product of paired fractions and modes, run sequentially.

    Each fraction trains its own VQ-VAE on the reduced paired set; a failure
    in any stage marks the affected cells and the sweep moves on.
    """
    t0 = time.perf_counter()
    fractions = tuple(fractions or cfg.sweep.fractions)
    modes = tuple(TrainMode(m) for m in (modes or cfg.sweep.modes))
    cfg = replace(cfg, sweep=replace(cfg.sweep, fractions=fractions, modes=tuple(m.value for m in modes)))
    cfg.validate(require_manifest=True)
    rows, timings = [], {}
    for frac in fractions:
        fcfg = replace(cfg, data=replace(cfg.data, paired_fraction=frac))
        fdir = out / f"fraction_{frac:g}"
        try:
            vq_path = cmd_train_vqvae(fcfg, fdir)["vqvae"]
            vq_error = None
        except Exception as exc:  # noqa: BLE001 - recorded per cell
            log.error("VQ-VAE training failed at fraction %g: %s", frac, exc)
            vq_error = f"vqvae: {type(exc).__name__}: {exc}"
        for mode in modes:
            cell = time.perf_counter()
            if vq_error is not None:
                rows.append([mode.value, frac, None, None, "failed", vq_error])
                continue
            mcfg = replace(fcfg, semisup=replace(fcfg.semisup, mode=mode))
            try:
                se = cmd_train_se(mcfg, fdir, vq_path)
                report = cmd_eval(mcfg, fdir, se["enhancer"])["report"]
                rows.append([mode.value, frac, _mean_improvement(report, "seen"),
                             _mean_improvement(report, "unseen"), "ok", ""])
            except Exception as exc:  # noqa: BLE001 - recorded per cell
                log.error("sweep cell %s @ %g failed: %s", mode.value, frac, exc)
                log.debug(traceback.format_exc())
                rows.append([mode.value, frac, None, None, "failed", f"{type(exc).__name__}: {exc}"])
            timings[f"{mode.value}@{frac:g}_s"] = time.perf_counter() - cell
    csv_path = write_csv(out / "sweep.csv", SWEEP_COLUMNS, rows)
    timings["total_s"] = time.perf_counter() - t0
    RunManifest("sweep", cfg.snapshot(), cfg.seed, inputs={"manifest": cfg.data.manifest},
                reports={"csv": str(csv_path)}, timings=timings).write(out)
    return {"csv": csv_path, "rows": rows}


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML config file (see configs/default.toml)")
    common.add_argument("--seed", type=int, help="master seed; overrides the config file")
    common.add_argument("--out", type=Path, help="output directory; overrides out_dir")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key, e.g. --set vqvae_train.steps=200 (repeatable)")
    common.add_argument("--manifest", help="paired manifest (data.manifest)")
    common.add_argument("--unpaired-manifest", help="unpaired manifest (data.unpaired_manifest)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="vqse", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth-data", parents=[common], help="generate the toy corpus under OUT/corpus")
    p = sub.add_parser("train-vqvae", parents=[common], help="supervised VQ-VAE training")
    p.add_argument("--resume", action="store_true", help="continue from OUT/vqvae.resume.ckpt")
    p.add_argument("--fraction", type=float, help="paired data fraction (data.paired_fraction)")
    p = sub.add_parser("train-se", parents=[common], help="semi-supervised enhancer training")
    p.add_argument("--vqvae", type=Path, required=True, help="VQ-VAE checkpoint")
    p.add_argument("--mode", choices=[m.value for m in TrainMode], help="training mode (semisup.mode)")
    p.add_argument("--fraction", type=float, help="paired data fraction (data.paired_fraction)")
    p = sub.add_parser("eval", parents=[common], help="SI-SDR report on the test split")
    p.add_argument("--se", type=Path, required=True, help="enhancer checkpoint")
    p = sub.add_parser("margin-diag", parents=[common], help="embedding margin versus SNR")
    p.add_argument("--vqvae", type=Path, required=True, help="VQ-VAE checkpoint")
    p = sub.add_parser("sweep", parents=[common], help="paired fraction x mode grid")
    p.add_argument("--fractions", help="comma-separated fractions, e.g. 0.1,0.2")
    p.add_argument("--modes", help="comma-separated modes")
    return parser


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    overrides: dict[str, Any] = dict(parse_assignment(a) for a in args.set)
    overrides.update({
        "seed": args.seed,
        "out_dir": str(args.out) if args.out else None,
        "data.manifest": str(Path(args.manifest).resolve()) if args.manifest else None,
        "data.unpaired_manifest": str(Path(args.unpaired_manifest).resolve()) if args.unpaired_manifest else None,
        "data.paired_fraction": getattr(args, "fraction", None),
        "semisup.mode": getattr(args, "mode", None),
    })
    return load_config(args.config, overrides).validate()


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = config_from_args(args)
        out = Path(cfg.out_dir)
        if args.command == "synth-data":
            result = cmd_synth_data(cfg, out)
        elif args.command == "train-vqvae":
            result = cmd_train_vqvae(cfg, out, resume=args.resume)
        elif args.command == "train-se":
            result = cmd_train_se(cfg, out, args.vqvae)
        elif args.command == "eval":
            result = cmd_eval(cfg, out, args.se)
        elif args.command == "margin-diag":
            result = cmd_margin_diag(cfg, out, args.vqvae)
        else:
            fractions = [float(f) for f in args.fractions.split(",")] if args.fractions else None
            modes = args.modes.split(",") if args.modes else None
            result = cmd_sweep(cfg, out, fractions, modes)
    except (ConfigurationError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for key, value in result.items():
        if isinstance(value, (str, Path)):
            print(f"{key}: {value}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
