"""Single entry point binding the pipeline into reproducible experiments.

Usage: ``ehi <command> [--config FILE-or-preset] [--set section.key=value ...]``

Commands: synth, preprocess, train, eval, verify, cam, report, ablation-suite.
Artifacts land under ``<output_dir>/<command>/<timestamp>/`` together with the
exact resolved config, a checksum manifest of produced files, and a ``latest``
pointer file per command. Exit codes: 0 ok, 2 config error, 3 missing
prerequisite, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import ablate, corpus, evalkit, net, synthgen
from . import train as train_mod

DETERMINISTIC_ENV = train_mod.DETERMINISTIC_ENV

COMMANDS = ("synth", "preprocess", "train", "eval", "verify", "cam", "report", "ablation-suite")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_RUNTIME = 4


class ConfigError(ValueError):
    """Invalid configuration: unknown key, bad value, or unreadable file."""


class MissingPrerequisiteError(RuntimeError):
    """A required input artifact does not exist yet."""


# (type, default) per section.key; unknown keys are rejected.
SCHEMA: dict[str, dict[str, tuple[type, object]]] = {
    "experiment": {
        "seed": (int, 0),
        "output_dir": (str, "runs"),
        "deterministic": (bool, False),
    },
    "data": {
        "preset": (str, "clean"),
        "subjects": (int, 4),
        "gestures": (int, 4),
        "repeats": (int, 2),
        "base_length": (int, 14),
        "length_jitter": (int, 3),
        "frame_height": (int, 128),
        "frame_width": (int, 176),
        "corpus_dir": (str, ""),
        "manifest": (str, ""),
        "split": (str, "place"),
    },
    "variant": {
        "name": (str, "ColorHand"),
    },
    "model": {
        "arch": (str, "tiny3d"),
        "width_multiplier": (float, 1.0),
        "pretrained": (str, ""),
    },
    "train": {
        "objective": (str, "single_subject"),
        "batch_size": (int, 32),
        "lr": (float, 1e-4),
        "epochs": (int, 20),
        "lr_decay_epoch": (int, 10),
        "lr_decay_factor": (float, 0.1),
        "adv_lambda": (float, 0.1),
        "adv_lambda_warmup": (bool, True),
        "literal_alternation": (bool, False),
    },
    "eval": {
        "head": (str, "subject"),
        "groupings": (str, "gesture,length"),
        "seen_gestures": (str, ""),
        "checkpoint": (str, ""),
        "cam_clips": (int, 32),
        "true_class": (bool, False),
        "drop_tail": (bool, False),
    },
}

_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


@dataclass
class ExperimentConfig:
    values: dict[str, dict[str, object]] = field(default_factory=dict)
    source: str = "<defaults>"

    def get(self, section: str, key: str):
        return self.values[section][key]

    def set(self, section: str, key: str, raw: str) -> None:
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"unknown config key {section}.{key}")
        self.values[section][key] = _coerce(section, key, raw)


def _coerce(section: str, key: str, raw):
    typ, _ = SCHEMA[section][key]
    if isinstance(raw, typ) and not (typ is bool and isinstance(raw, int) and not isinstance(raw, bool)):
        return raw
    text = str(raw).strip()
    try:
        if typ is bool:
            low = text.lower()
            if low in _BOOL_TRUE:
                return True
            if low in _BOOL_FALSE:
                return False
            raise ValueError(f"not a boolean: {text!r}")
        return typ(text)
    except ValueError as e:
        raise ConfigError(f"bad value for {section}.{key}: {e}") from e


def _preset_path(name: str) -> Path | None:
    base = resources.files("egohandid") / "presets" / f"{name}.ini"
    try:
        if base.is_file():
            return Path(str(base))
    except OSError:
        pass
    return None


def load_config(path_or_preset: str | None = None, overrides: tuple[str, ...] = ()) -> ExperimentConfig:
    """Resolve an INI file (or packaged preset name) plus --set overrides."""
    cfg = ExperimentConfig(values={s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()})
    if path_or_preset:
        p = Path(path_or_preset)
        if not p.exists():
            preset = _preset_path(path_or_preset)
            if preset is None:
                raise ConfigError(f"config file or preset not found: {path_or_preset}")
            p = preset
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(p, "r", encoding="utf-8") as fh:
                parser.read_file(fh)
        except configparser.Error as e:
            raise ConfigError(f"cannot parse {p}: {e}") from e
        for section in parser.sections():
            if section not in SCHEMA:
                raise ConfigError(f"unknown config section [{section}]")
            for key, raw in parser.items(section):
                cfg.set(section, key, raw)
        cfg.source = str(p)
    for ov in overrides:
        if "=" not in ov or "." not in ov.split("=", 1)[0]:
            raise ConfigError(f"--set expects section.key=value, got {ov!r}")
        target, raw = ov.split("=", 1)
        section, key = target.split(".", 1)
        cfg.set(section.strip(), key.strip(), raw.strip())
    if os.environ.get(DETERMINISTIC_ENV, "") == "1":
        cfg.values["experiment"]["deterministic"] = True
    return cfg


def dump_config(cfg: ExperimentConfig, path: Path) -> None:
    parser = configparser.ConfigParser(interpolation=None)
    for section, keys in cfg.values.items():
        parser[section] = {k: str(v) for k, v in keys.items()}
    with open(path, "w", encoding="utf-8") as fh:
        parser.write(fh)


# --- artifact plumbing ---------------------------------------------------------


def _new_run_dir(out_root: Path, command: str) -> Path:
    base = out_root / command
    base.mkdir(parents=True, exist_ok=True)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    candidate = base / stamp
    n = 1
    while candidate.exists():
        n += 1
        candidate = base / f"{stamp}-{n}"
    candidate.mkdir()
    return candidate


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _finalize_run(run_dir: Path, command: str, argv: list[str]) -> None:
    entries = {}
    for p in sorted(run_dir.rglob("*")):
        if p.is_file() and p.name not in ("files.json", "run.json"):
            entries[str(p.relative_to(run_dir))] = _sha256(p)
    (run_dir / "files.json").write_text(json.dumps(entries, indent=2, sort_keys=True) + "\n")
    (run_dir / "run.json").write_text(json.dumps({
        "command": command,
        "argv": argv,
        "completed": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }, indent=2) + "\n")
    (run_dir.parent / "latest").write_text(run_dir.name + "\n")


def _latest_run(out_root: Path, command: str) -> Path | None:
    pointer = out_root / command / "latest"
    if not pointer.exists():
        return None
    name = pointer.read_text().strip()
    run = out_root / command / name
    return run if run.is_dir() else None


def _resolve_manifest_path(cfg: ExperimentConfig) -> Path:
    explicit = cfg.get("data", "manifest")
    if explicit:
        p = Path(explicit)
        if not p.exists():
            raise MissingPrerequisiteError(f"manifest not found: {p}")
        return p
    corpus_dir = cfg.get("data", "corpus_dir")
    if corpus_dir:
        p = Path(corpus_dir) / "manifest.jsonl"
        if not p.exists():
            raise MissingPrerequisiteError(f"no manifest at {p}; run `ehi synth` or point data.manifest at one")
        return p
    out_root = Path(cfg.get("experiment", "output_dir"))
    latest = _latest_run(out_root, "synth")
    if latest is None or not (latest / "corpus" / "manifest.jsonl").exists():
        raise MissingPrerequisiteError(
            "no corpus found; run `ehi synth` first or set data.corpus_dir / data.manifest")
    return latest / "corpus" / "manifest.jsonl"


def _resolve_checkpoint_path(cfg: ExperimentConfig) -> Path:
    explicit = cfg.get("eval", "checkpoint")
    if explicit:
        p = Path(explicit)
        if not p.exists():
            raise MissingPrerequisiteError(f"checkpoint not found: {p}")
        return p
    out_root = Path(cfg.get("experiment", "output_dir"))
    latest = _latest_run(out_root, "train")
    if latest is None or not (latest / "ckpt.pt").exists():
        raise MissingPrerequisiteError("no checkpoint found; run `ehi train` first or set eval.checkpoint")
    return latest / "ckpt.pt"


def _split_manifests(cfg: ExperimentConfig, manifest: corpus.Manifest):
    """Returns (train_part, val_part, eval_part, seen_gestures|None)."""
    mode = cfg.get("data", "split")
    if mode == "none":
        return manifest, None, manifest, None
    if mode == "place":
        train_part, outdoor = corpus.split_by_place(manifest)
        return train_part, outdoor, outdoor, None
    if mode == "place-valtest":
        train_part, outdoor = corpus.split_by_place(manifest)
        val_part, test_part = corpus.split_outdoor_val_test(outdoor)
        return train_part, val_part, test_part, None
    if mode == "verification-subjects":
        tr, va, te = corpus.get_split_preset("egogesture-verification-subjects")(manifest)
        return tr, va, te, None
    if mode == "even-gestures":
        seen, _unseen = corpus.split_gestures_even(manifest)
        train_seen, _ = corpus.split_by_place(seen)
        _, outdoor = corpus.split_by_place(manifest)
        seen_ids = set(r.gesture_id for r in seen.records)
        return train_seen, outdoor, outdoor, seen_ids
    raise ConfigError(f"unknown data.split {mode!r}")


def _variant(cfg: ExperimentConfig) -> ablate.InputVariant:
    try:
        return ablate.InputVariant(cfg.get("variant", "name"))
    except ValueError as e:
        raise ConfigError(str(e)) from e


def _seen_set(cfg: ExperimentConfig) -> set[int] | None:
    raw = cfg.get("eval", "seen_gestures").strip()
    if not raw:
        return None
    try:
        return {int(tok) for tok in raw.replace(";", ",").split(",") if tok.strip()}
    except ValueError as e:
        raise ConfigError(f"bad eval.seen_gestures list: {e}") from e


# --- commands -------------------------------------------------------------------


def cmd_synth(cfg: ExperimentConfig, run_dir: Path, _extra) -> None:
    sc = synthgen.make_config(
        cfg.get("data", "preset"),
        n_subjects=cfg.get("data", "subjects"),
        n_gestures=cfg.get("data", "gestures"),
        repeats=cfg.get("data", "repeats"),
        base_length=cfg.get("data", "base_length"),
        length_jitter=cfg.get("data", "length_jitter"),
        frame_size=(cfg.get("data", "frame_height"), cfg.get("data", "frame_width")),
        seed=cfg.get("experiment", "seed"),
    )
    manifest = synthgen.generate_corpus(sc, run_dir / "corpus")
    print(f"synth: {len(manifest)} clips -> {run_dir / 'corpus'}")


def cmd_preprocess(cfg: ExperimentConfig, run_dir: Path, _extra) -> None:
    variant = _variant(cfg)
    manifest = corpus.load_manifest(_resolve_manifest_path(cfg))
    out = run_dir / variant.value
    out.mkdir(parents=True)
    clips = ablate.VariantClips(manifest, variant, cache=False)
    index = []
    for i, rec in enumerate(clips.records):
        processed = clips.processed(i, mode="test")
        ablate.write_packed_clip(out / f"{rec.clip_id}.pclip", processed.data)
        index.append({"clip_id": rec.clip_id, "file": f"{variant.value}/{rec.clip_id}.pclip",
                      "frames": processed.data.shape[0]})
    (run_dir / "index.json").write_text(json.dumps(
        {"variant": variant.value, "clips": index}, indent=2) + "\n")
    print(f"preprocess: {len(index)} clips ({variant.value}) -> {out}")


def _build_model_for(cfg: ExperimentConfig, variant, objective, label_maps) -> net.VideoClassifier:
    heads = {"single_subject": ("subject",), "single_gesture": ("gesture",)}.get(
        objective, ("subject", "gesture"))
    mc = net.ModelConfig(
        arch=cfg.get("model", "arch"),
        in_channels=variant.channels,
        width_multiplier=cfg.get("model", "width_multiplier"),
        num_subject_classes=len(label_maps["subject"]),
        num_gesture_classes=len(label_maps["gesture"]),
        heads=heads,
        grl_lambda=cfg.get("train", "adv_lambda"),
    )
    model = net.build_model(mc, seed=cfg.get("experiment", "seed"))
    pretrained = cfg.get("model", "pretrained")
    if pretrained:
        if not Path(pretrained).exists():
            raise MissingPrerequisiteError(f"pretrained weights not found: {pretrained}")
        net.load_pretrained_backbone(model, pretrained)
    return model


def _train_config(cfg: ExperimentConfig, objective: str | None = None) -> train_mod.TrainConfig:
    return train_mod.TrainConfig(
        objective=objective or cfg.get("train", "objective"),
        batch_size=cfg.get("train", "batch_size"),
        lr=cfg.get("train", "lr"),
        epochs=cfg.get("train", "epochs"),
        lr_decay_epoch=cfg.get("train", "lr_decay_epoch"),
        lr_decay_factor=cfg.get("train", "lr_decay_factor"),
        adv_lambda=cfg.get("train", "adv_lambda"),
        adv_lambda_warmup=cfg.get("train", "adv_lambda_warmup"),
        literal_alternation=cfg.get("train", "literal_alternation"),
        seed=cfg.get("experiment", "seed"),
        variant=cfg.get("variant", "name"),
        deterministic=cfg.get("experiment", "deterministic"),
    )


def cmd_train(cfg: ExperimentConfig, run_dir: Path, _extra) -> None:
    variant = _variant(cfg)
    manifest = corpus.load_manifest(_resolve_manifest_path(cfg))
    train_part, val_part, _eval_part, _seen = _split_manifests(cfg, manifest)
    if len(train_part) == 0:
        raise MissingPrerequisiteError("training split is empty")
    tc = _train_config(cfg)
    label_maps = train_mod.make_label_maps(train_part)
    model = _build_model_for(cfg, variant, tc.objective, label_maps)
    result = train_mod.train(model, train_part, tc, val_manifest=val_part,
                             log=lambda msg: print(f"train: {msg}"))
    paths = train_mod.save_train_checkpoints(
        model, result, tc, run_dir, provenance=f"config={cfg.source}")
    print(f"train: objective={tc.objective} variant={variant.value} -> {paths['final']}")


def _load_model(cfg: ExperimentConfig) -> tuple[net.VideoClassifier, dict]:
    model, payload = net.load_checkpoint(_resolve_checkpoint_path(cfg))
    return model, payload


def _write_eval_artifacts(report: evalkit.EvalReport, run_dir: Path) -> None:
    (run_dir / "eval_report.json").write_text(json.dumps(report.as_dict(), indent=2) + "\n")
    with open(run_dir / "per_gesture.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["gesture_id", "correct", "count", "accuracy"])
        for gid, cell in sorted(report.per_gesture.items()):
            w.writerow([gid, cell["correct"], cell["count"], cell["accuracy"]])
    with open(run_dir / "strata.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stratum", "correct", "count", "accuracy"])
        for name in ("short", "medium", "long"):
            if name in report.strata:
                cell = report.strata[name]
                w.writerow([name, cell["correct"], cell["count"], cell["accuracy"]])
    with open(run_dir / "predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["clip_id", "true", "pred", "gesture_id", "num_frames", "correct"])
        for r in report.predictions:
            w.writerow([r["clip_id"], r["true"], r["pred"], r["gesture_id"],
                        r["num_frames"], int(r["correct"])])


def cmd_eval(cfg: ExperimentConfig, run_dir: Path, _extra) -> None:
    variant = _variant(cfg)
    model, _payload = _load_model(cfg)
    if model.cfg.in_channels != variant.channels:
        raise ConfigError(
            f"checkpoint expects {model.cfg.in_channels} channels; variant "
            f"{variant.value} provides {variant.channels}")
    manifest = corpus.load_manifest(_resolve_manifest_path(cfg))
    _train_part, _val, eval_part, seen = _split_manifests(cfg, manifest)
    seen = _seen_set(cfg) or seen
    groupings = tuple(g.strip() for g in cfg.get("eval", "groupings").split(",") if g.strip())
    report = evalkit.evaluate(
        model, eval_part, variant, head=cfg.get("eval", "head"),
        groupings=groupings, seen_gestures=seen,
        drop_tail=cfg.get("eval", "drop_tail"))
    _write_eval_artifacts(report, run_dir)
    lengths = [r["num_frames"] for r in report.predictions]
    evalkit.render_length_histogram(lengths, run_dir / "length_hist.png")
    if report.per_gesture:
        evalkit.render_per_gesture_bar(report, run_dir / "per_gesture.png")
    print(f"eval: head={report.head} overall={report.overall_accuracy:.4f} over {report.num_clips} clips")


def cmd_verify(cfg: ExperimentConfig, run_dir: Path, _extra) -> None:
    variant = _variant(cfg)
    model, _payload = _load_model(cfg)
    manifest = corpus.load_manifest(_resolve_manifest_path(cfg))
    mode = cfg.get("data", "split")
    scope = manifest
    if mode == "verification-subjects":
        _tr, _va, scope, _ = _split_manifests(cfg, manifest)
    indoor, outdoor = corpus.split_by_place(scope)
    if len(indoor) == 0 or len(outdoor) == 0:
        raise MissingPrerequisiteError("verification needs both indoor and outdoor clips in scope")
    pairs = corpus.enumerate_verification_pairs(indoor, outdoor)
    report = evalkit.verify(model, pairs, scope, variant, drop_tail=cfg.get("eval", "drop_tail"))
    (run_dir / "verification.json").write_text(json.dumps(report.as_dict(), indent=2) + "\n")
    with open(run_dir / "pair_scores.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["clip_id_a", "clip_id_b", "label", "score"])
        for row in report.pair_scores:
            w.writerow([row["a"], row["b"], row["label"], row["score"]])
    with open(run_dir / "roc.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "fpr", "tpr"])
        for row in report.roc:
            w.writerow([row["threshold"], row["fpr"], row["tpr"]])
    evalkit.render_roc(report, run_dir / "roc.png")
    evalkit.render_fpr_fnr(report, run_dir / "fpr_fnr.png")
    print(f"verify: EER={report.eer:.4f} over {report.num_pairs} pairs ({report.num_positive} positive)")


def cmd_cam(cfg: ExperimentConfig, run_dir: Path, _extra) -> None:
    variant = _variant(cfg)
    model, _payload = _load_model(cfg)
    manifest = corpus.load_manifest(_resolve_manifest_path(cfg))
    _train_part, _val, eval_part, _seen = _split_manifests(cfg, manifest)
    cap = cfg.get("eval", "cam_clips")
    records = eval_part.records[:cap]
    scope = corpus.Manifest(records, eval_part.provenance)
    head = cfg.get("eval", "head")
    clips = ablate.VariantClips(scope, variant)
    datas = [clips.processed(i).data for i in range(len(clips))]
    class_indices = None
    if cfg.get("eval", "true_class"):
        label_map = model.label_maps[head]
        index = {v: i for i, v in enumerate(label_map)}
        class_indices = [
            index[r.subject_id if head == "subject" else r.gesture_id] for r in records
        ]
    cam, peak = evalkit.average_cam(model, datas, head, class_indices)
    mask_clips = ablate.VariantClips(scope, ablate.InputVariant.BinaryHand)
    mask_map = evalkit.mean_mask([mask_clips.processed(i).data for i in range(len(mask_clips))])
    dist = evalkit.peak_distance(cam, mask_map)
    np.save(run_dir / "mean_cam.npy", cam)
    np.save(run_dir / "mean_mask.npy", mask_map)
    (run_dir / "cam.json").write_text(json.dumps({
        "head": head,
        "num_clips": len(datas),
        "cam_peak": list(peak),
        "mask_peak": [int(v) for v in np.unravel_index(int(np.argmax(mask_map)), mask_map.shape)],
        "peak_distance_px": dist,
        "class_selector": "true" if class_indices is not None else "predicted",
    }, indent=2) + "\n")
    evalkit.render_cam(cam, run_dir / "cam.png", peak)
    evalkit.render_cam(mask_map, run_dir / "mask.png")
    print(f"cam: peak distance {dist:.1f}px over {len(datas)} clips")


def cmd_report(cfg: ExperimentConfig, run_dir: Path, extra) -> None:
    source = (extra or {}).get("source")
    if not source:
        raise ConfigError("report needs --from <run_dir> of a previous eval/verify run")
    source = Path(source)
    if not source.is_dir():
        raise MissingPrerequisiteError(f"source run directory not found: {source}")
    rendered = []
    eval_json = source / "eval_report.json"
    if eval_json.exists():
        data = json.loads(eval_json.read_text())
        report = evalkit.EvalReport(
            head=data["head"], overall_accuracy=data["overall_accuracy"],
            num_clips=data["num_clips"],
            per_gesture={int(k): v for k, v in data["per_gesture"].items()},
            strata=data["strata"],
        )
        if report.per_gesture:
            evalkit.render_per_gesture_bar(report, run_dir / "per_gesture.png")
            rendered.append("per_gesture.png")
        preds = source / "predictions.csv"
        if preds.exists():
            with open(preds) as fh:
                lengths = [int(row["num_frames"]) for row in csv.DictReader(fh)]
            evalkit.render_length_histogram(lengths, run_dir / "length_hist.png")
            rendered.append("length_hist.png")
    verify_json = source / "verification.json"
    if verify_json.exists():
        data = json.loads(verify_json.read_text())
        report = evalkit.VerificationReport(
            eer=data["eer"], eer_threshold=data["eer_threshold"],
            num_pairs=data["num_pairs"], num_positive=data["num_positive"],
            roc=data["roc"], fpr_fnr=data["fpr_fnr"])
        evalkit.render_roc(report, run_dir / "roc.png")
        evalkit.render_fpr_fnr(report, run_dir / "fpr_fnr.png")
        rendered.extend(["roc.png", "fpr_fnr.png"])
    if not rendered:
        raise MissingPrerequisiteError(f"nothing to render in {source} (no eval/verification artifacts)")
    print(f"report: rendered {', '.join(rendered)}")


def cmd_ablation_suite(cfg: ExperimentConfig, run_dir: Path, _extra) -> None:
    """Train + evaluate the subject classifier once per input variant."""
    manifest = corpus.load_manifest(_resolve_manifest_path(cfg))
    train_part, val_part, eval_part, _seen = _split_manifests(cfg, manifest)
    if len(train_part) == 0 or len(eval_part) == 0:
        raise MissingPrerequisiteError("ablation suite needs nonempty train and eval splits")
    rows = []
    for variant in ablate.ALL_VARIANTS:
        tc = _train_config(cfg, objective="single_subject")
        tc.variant = variant.value
        label_maps = train_mod.make_label_maps(train_part)
        model = _build_model_for(cfg, variant, "single_subject", label_maps)
        result = train_mod.train(model, train_part, tc, val_manifest=None)
        report = evalkit.evaluate(model, eval_part, variant, head="subject", groupings=())
        rows.append({
            "variant": variant.value,
            "accuracy": report.overall_accuracy,
            "num_eval_clips": report.num_clips,
            "final_loss": result.report.steps[-1]["total"],
        })
        print(f"ablation-suite: {variant.value}: accuracy {report.overall_accuracy:.4f}")
    with open(run_dir / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "accuracy", "num_eval_clips"])
        for row in rows:
            w.writerow([row["variant"], row["accuracy"], row["num_eval_clips"]])
    (run_dir / "ablation.json").write_text(json.dumps(rows, indent=2) + "\n")


_DISPATCH = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "eval": cmd_eval,
    "verify": cmd_verify,
    "cam": cmd_cam,
    "report": cmd_report,
    "ablation-suite": cmd_ablation_suite,
}


def run(command: str, cfg: ExperimentConfig, extra: dict | None = None,
        argv: list[str] | None = None) -> Path:
    """Execute one command; returns the run directory holding its artifacts."""
    if command not in _DISPATCH:
        raise ConfigError(f"unknown command {command!r}; known: {COMMANDS}")
    out_root = Path(cfg.get("experiment", "output_dir"))
    run_dir = _new_run_dir(out_root, command)
    dump_config(cfg, run_dir / "config.resolved.ini")
    _DISPATCH[command](cfg, run_dir, extra)
    _finalize_run(run_dir, command, argv or [])
    return run_dir


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = argparse.ArgumentParser(prog="ehi", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd in COMMANDS:
        sp = sub.add_parser(cmd)
        sp.add_argument("--config", default=None, help="INI config file or packaged preset name")
        sp.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="SECTION.KEY=VALUE", help="override a config value")
        if cmd == "report":
            sp.add_argument("--from", dest="source", required=True,
                            help="run directory of a previous eval/verify command")
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, tuple(args.overrides))
        extra = {"source": getattr(args, "source", None)}
        run_dir = run(args.command, cfg, extra, argv=argv)
        print(f"{args.command}: artifacts in {run_dir}")
        return EXIT_OK
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingPrerequisiteError as e:
        print(f"missing prerequisite: {e}", file=sys.stderr)
        return EXIT_MISSING
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
