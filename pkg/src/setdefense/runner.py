"""End-to-end experiment execution and report rendering.

``run_experiment`` composes the full pipeline (build corpus, train, attack,
mix, defend, vote) and persists checkpoints, a perturbed-corpus cache, a
results file and a manifest.  Every output byte is a pure function of
(config, master seed); wall time lives only in the manifest.
"""

from __future__ import annotations

import hashlib
import json
import shutil
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import attacks, data
from .config import ExperimentConfig, validate_text
from .data import Corpus, flatten_training_pool
from .model import Model
from .network import Network, default_architecture
from .pipeline import ResultRow, adversarial_train, evaluate_defence, train_model

RESULTS_FORMAT_VERSION = 1
RESULTS_HEADER = "model,attack,adv_train,epsilon,ratio,sv,mv,ewv"


class RunnerError(RuntimeError):
    pass


class ReportError(ValueError):
    pass


def build_corpus(config: ExperimentConfig) -> Corpus:
    spec = config.corpus
    seed = config.master_seed
    if spec.kind == "synthetic":
        corpus = data.synthesize_corpus(
            spec.classes, spec.train_sets_per_gallery, spec.images_per_set,
            (1, spec.image_size, spec.image_size), seed,
            test_sets_per_gallery=spec.test_sets_per_gallery, noise=spec.noise)
    elif spec.kind == "digits":
        base, extra = divmod(spec.test_sets_total, 10)
        counts = [base + (1 if label < extra else 0) for label in range(10)]
        corpus = data.digit_glyph_corpus(
            spec.train_sets_per_gallery, counts, spec.images_per_set, seed,
            size=spec.image_size)
    else:
        corpus = data.load_idx_corpus(spec.images_path, spec.labels_path,
                                      spec.set_size, spec.train_fraction)
    if spec.resize_to:
        corpus = data.resize_corpus(corpus, spec.resize_to)
    return data.normalize_corpus(corpus)


def run_id_for(config: ExperimentConfig) -> str:
    payload = json.dumps(config.resolved, sort_keys=True, default=str)
    return hashlib.sha256(payload.encode()).hexdigest()[:12]


@dataclass
class RunResult:
    run_dir: Path
    results_path: Path
    manifest_path: Path
    rows: list[ResultRow]
    results_sha256: str
    baseline: Model
    defended: Optional[Model]


def _perturbed_test_galleries(config: ExperimentConfig, corpus: Corpus, target: Model,
                              cache_dir: Path):
    corpus_hash = data.content_hash(corpus)
    key = attacks.cache_key(corpus_hash, target.fingerprint(), config.attack)
    cached = attacks.load_perturbed(cache_dir, key)
    if cached is not None:
        return cached
    galleries, _ = attacks.perturb_galleries(target, corpus.test_galleries, config.attack)
    attacks.save_perturbed(cache_dir, key, galleries, corpus_hash=corpus_hash,
                           model_fingerprint=target.fingerprint(), config=config.attack)
    return galleries


def _format_row(row: ResultRow) -> str:
    return ",".join([
        row.model, row.attack, "yes" if row.adv_train else "no",
        f"{row.epsilon:g}", f"{row.ratio:g}",
        f"{row.sv:.2f}", f"{row.mv:.2f}", f"{row.ewv:.2f}",
    ])


def run_experiment(config: ExperimentConfig, *, stop_after: str = "evaluate") -> RunResult:
    """Execute a validated config; ``stop_after`` in {train, attack, evaluate}
    truncates the pipeline for the corresponding CLI verbs."""
    run_dir = config.output_dir / f"run-{run_id_for(config)}"
    started = time.time()
    try:
        run_dir.mkdir(parents=True, exist_ok=True)
        return _run(config, run_dir, started, stop_after)
    except Exception:
        if run_dir.exists():
            quarantine = config.output_dir / f"failed-{time.strftime('%Y%m%d-%H%M%S')}"
            shutil.move(str(run_dir), str(quarantine))
        raise


def _run(config: ExperimentConfig, run_dir: Path, started: float, stop_after: str) -> RunResult:
    corpus = build_corpus(config)
    corpus_hash = data.content_hash(corpus)
    network = Network(default_architecture(corpus.class_count), corpus.image_shape)

    defended = None
    if config.adversarial_training:
        trained = adversarial_train(corpus, config.attack, config.training,
                                    config.master_seed, network,
                                    adv_train_config=config.adv_training_config())
        baseline, defended = trained.baseline, trained.defended
        logs = {"baseline": trained.baseline_log, "defended": trained.defended_log}
    else:
        pool = flatten_training_pool(corpus)
        x = np.stack([img.pixels.data for img, _ in pool.clean])
        y = np.array([label for _, label in pool.clean], dtype=np.int64)
        log: list = []
        baseline = train_model(network, x, y, config.training, config.master_seed,
                               tag="baseline", log=log)
        logs = {"baseline": log}

    baseline.save(run_dir / "baseline.ckpt")
    if defended is not None:
        defended.save(run_dir / "defended.ckpt")
    _write_training_logs(run_dir / "training.log", logs)

    if stop_after == "train":
        manifest_path = _write_manifest(config, run_dir, started, corpus_hash,
                                        baseline, defended, results_sha="")
        return RunResult(run_dir, run_dir / "results.csv", manifest_path, [], "",
                         baseline, defended)

    target = defended if config.attack_target == "defended" else baseline
    if target is None:
        raise RunnerError("attack_target=defended requires adversarial training")
    perturbed_test = _perturbed_test_galleries(config, corpus, target,
                                               config.output_dir / "cache")
    if stop_after == "attack":
        manifest_path = _write_manifest(config, run_dir, started, corpus_hash,
                                        baseline, defended, results_sha="")
        return RunResult(run_dir, run_dir / "results.csv", manifest_path, [], "",
                         baseline, defended)

    audit: list = []
    rows: list[ResultRow] = []
    rows += evaluate_defence(baseline, corpus, perturbed_test, config.ratios,
                             config.mc, config.voting, config.master_seed,
                             attack_tag=config.attack.kind, epsilon=config.attack.epsilon,
                             adv_train=False, audit=audit)
    if defended is not None:
        rows += evaluate_defence(defended, corpus, perturbed_test, config.ratios,
                                 config.mc, config.voting, config.master_seed,
                                 attack_tag=config.attack.kind,
                                 epsilon=config.attack.epsilon,
                                 adv_train=True, audit=audit)

    results_path = run_dir / "results.csv"
    results_sha = _write_results(results_path, run_id_for(config), rows, audit)
    manifest_path = _write_manifest(config, run_dir, started, corpus_hash,
                                    baseline, defended, results_sha)
    return RunResult(run_dir, results_path, manifest_path, rows, results_sha,
                     baseline, defended)


def _write_training_logs(path: Path, logs: dict):
    lines = []
    for tag, entries in logs.items():
        for entry in entries:
            lines.append(f"{tag} epoch={entry.epoch} loss={entry.loss:.6f} "
                         f"accuracy={entry.accuracy:.4f}")
    path.write_text("\n".join(lines) + "\n")


def _write_results(path: Path, run_id: str, rows: list[ResultRow], audit: list) -> str:
    lines = [f"# setdefense-results format_version={RESULTS_FORMAT_VERSION} run={run_id}",
             RESULTS_HEADER]
    lines += [_format_row(row) for row in rows]
    lines.append("# audit")
    for entry in audit:
        lines.append("# " + json.dumps(entry, sort_keys=True))
    content = "\n".join(lines) + "\n"
    path.write_text(content)
    return hashlib.sha256(content.encode()).hexdigest()


def _write_manifest(config: ExperimentConfig, run_dir: Path, started: float,
                    corpus_hash: str, baseline: Model, defended: Optional[Model],
                    results_sha: str) -> Path:
    lines = ["# setdefense-manifest v1", "[config]"]
    section = None
    for key in sorted(config.resolved):
        sec, name = key.split(".", 1)
        if sec != section:
            section = sec
        lines.append(f"{key} = {config.resolved[key]}")
    lines += [
        "[provenance]",
        f"run_id = {run_id_for(config)}",
        f"master_seed = {config.master_seed}",
        f"corpus_hash = {corpus_hash}",
        f"baseline_fingerprint = {baseline.fingerprint()}",
        f"defended_fingerprint = {defended.fingerprint() if defended else '-'}",
        f"results_sha256 = {results_sha or '-'}",
        f"package_version = {_package_version()}",
        f"wall_time_seconds = {time.time() - started:.2f}",
    ]
    path = run_dir / "manifest.txt"
    path.write_text("\n".join(lines) + "\n")
    return path


def _package_version() -> str:
    from importlib.metadata import PackageNotFoundError, version
    try:
        return version("setdefense")
    except PackageNotFoundError:
        return "0.0.0-dev"


# ---------------------------------------------------------------------------
# reproduce


def config_from_manifest(path) -> ExperimentConfig:
    """Rebuild the full experiment config from a manifest's [config] echo."""
    lines = Path(path).read_text().splitlines()
    try:
        start = lines.index("[config]") + 1
    except ValueError:
        raise ReportError(f"{path}: not a manifest (missing [config] section)")
    pairs = []
    for line in lines[start:]:
        if line.startswith("["):
            break
        if "=" in line:
            key, value = line.split("=", 1)
            pairs.append((key.strip(), value.strip()))
    sections: dict[str, list[tuple[str, str]]] = {}
    for key, value in pairs:
        sec, name = key.split(".", 1)
        sections.setdefault(sec, []).append((name, value))
    text_lines = []
    for sec in sections:
        text_lines.append(f"[{sec}]")
        text_lines += [f"{name} = {value}" for name, value in sections[sec]]
    return validate_text("\n".join(text_lines) + "\n")


def reproduce(manifest_path) -> tuple[RunResult, bool]:
    """Re-run a manifest and report whether the results hash matches."""
    recorded = None
    for line in Path(manifest_path).read_text().splitlines():
        if line.startswith("results_sha256 = "):
            recorded = line.split("=", 1)[1].strip()
    config = config_from_manifest(manifest_path)
    result = run_experiment(config)
    return result, recorded in (None, "-", result.results_sha256)


# ---------------------------------------------------------------------------
# reporting


def _parse_results(path) -> tuple[str, list[dict]]:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("# setdefense-results "):
        raise ReportError(f"{path}: not a results file")
    meta = dict(tok.split("=", 1) for tok in lines[0].split()[2:])
    version = meta.get("format_version")
    if version != str(RESULTS_FORMAT_VERSION):
        raise ReportError(f"{path}: unsupported results format version {version}")
    run_id = meta.get("run", "")
    rows = []
    for line in lines[1:]:
        if line.startswith("#") or line == RESULTS_HEADER or not line.strip():
            continue
        fields = line.split(",")
        if len(fields) != 8:
            raise ReportError(f"{path}: malformed row {line!r}")
        rows.append({
            "run": run_id, "model": fields[0], "attack": fields[1],
            "adv_train": fields[2], "epsilon": float(fields[3]),
            "ratio": float(fields[4]), "sv": float(fields[5]),
            "mv": float(fields[6]), "ewv": float(fields[7]),
        })
    return run_id, rows


def render_report(results_paths: list) -> tuple[str, str]:
    """Merge results files into (plain-text table, CSV); duplicate runs are
    collapsed by run id and the best value per column is bolded per group."""
    if not results_paths:
        raise ReportError("at least one results file is required")
    merged: list[dict] = []
    seen_runs = set()
    for path in results_paths:
        run_id, rows = _parse_results(path)
        if run_id in seen_runs:
            continue
        seen_runs.add(run_id)
        merged.extend(rows)
    merged.sort(key=lambda r: (r["model"], r["attack"], r["adv_train"], r["epsilon"], r["ratio"]))

    csv_lines = [RESULTS_HEADER]
    for row in merged:
        csv_lines.append(",".join([
            row["model"], row["attack"], row["adv_train"], f"{row['epsilon']:g}",
            f"{row['ratio']:g}", f"{row['sv']:.2f}", f"{row['mv']:.2f}", f"{row['ewv']:.2f}",
        ]))

    groups: dict[tuple, list[dict]] = {}
    for row in merged:
        groups.setdefault((row["model"], row["attack"], row["adv_train"], row["epsilon"]),
                          []).append(row)
    text_lines = []
    header = (f"{'model':<12} {'attack':<9} {'adv':<4} {'eps':>6} {'ratio':>6} "
              f"{'SV':>10} {'MV':>10} {'EWV':>10}")
    text_lines.append(header)
    text_lines.append("-" * len(header))
    for key in sorted(groups):
        rows = sorted(groups[key], key=lambda r: r["ratio"])
        best = {col: max(r[col] for r in rows) for col in ("sv", "mv", "ewv")}
        for row in rows:
            cells = []
            for col in ("sv", "mv", "ewv"):
                value = f"{row[col]:.2f}"
                cells.append(f"*{value}*" if row[col] == best[col] else value)
            text_lines.append(
                f"{row['model']:<12} {row['attack']:<9} {row['adv_train']:<4} "
                f"{row['epsilon']:>6g} {row['ratio']:>6g} "
                f"{cells[0]:>10} {cells[1]:>10} {cells[2]:>10}")
        text_lines.append("")
    return "\n".join(text_lines).rstrip() + "\n", "\n".join(csv_lines) + "\n"
