"""Experiment orchestration over a single output directory.

Every command writes a manifest keyed by a signature over (command, args,
canonical config, input checkpoint hashes). Re-running a command whose
manifest signature matches and whose output hashes verify is a no-op, so a
finished experiment can be replayed safely. ``state.json`` tracks the
checkpoint lineage closed -> open -> IL stages.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .config import ExperimentConfig
from .core import (
    ClassRegistry,
    ConfigError,
    DomainError,
    LabelDomain,
    LabelSet,
    derive_seed,
    registry_advance,
)
from .data import (
    DatasetSample,
    load_dataset,
    read_labels,
    read_scan,
    save_dataset,
    split_seeds,
    write_labels,
)
from .evaluation import (
    EvalReport,
    auroc,
    aupr,
    export_histogram,
    histogram_to_csv,
    miou_report,
)
from .incremental import (
    extract_novel_gt,
    make_pseudo_labels,
    predict_post_il,
    run_il_stage,
)
from .network import (
    Stage,
    add_redundancy_heads,
    checkpoint_bytes,
    init_model,
    load_checkpoint,
    reassign_rc,
)
from .openset import (
    InferenceConfig,
    calibrate_threshold,
    encode_scores_binary,
    encode_scores_csv,
    predict_open,
)
from .training import (
    pool_labelsets,
    pooled_full_labels,
    predict_pooled,
    score_pooled,
    train_closed_model,
    train_oseg_model,
    unknown_mask,
)

ENV_ROOT = "OWLSEG_ROOT"
STATE_NAME = "state.json"
LOCK_NAME = ".lock"


def set_deterministic() -> None:
    """Single-threaded torch keeps reductions bit-stable across runs."""
    torch.set_num_threads(1)


def resolve_root(cfg: ExperimentConfig, out_flag: Optional[str] = None) -> Path:
    if out_flag:
        return Path(out_flag)
    env = os.environ.get(ENV_ROOT)
    if env:
        return Path(env)
    if cfg.output_dir:
        return Path(cfg.output_dir)
    return Path("owlseg-run")


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _hash_file(path: Path) -> str:
    return _sha256(path.read_bytes())


def _dump_json(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


class ExperimentLock:
    """Single-writer guard: one command at a time per experiment directory."""

    def __init__(self, root: Path):
        self.path = Path(root) / LOCK_NAME
        self._fd: Optional[int] = None

    def __enter__(self) -> "ExperimentLock":
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            self._fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigError(
                f"experiment directory is locked by {self.path}; "
                "remove the file if no other command is running"
            ) from None
        os.write(self._fd, str(os.getpid()).encode())
        return self

    def __exit__(self, *exc) -> None:
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None
            self.path.unlink(missing_ok=True)


class Experiment:
    def __init__(self, cfg: ExperimentConfig, root: Path):
        self.cfg = cfg
        self.root = Path(root)
        self.registry = cfg.build_registry()

    # --- layout ---------------------------------------------------------

    @property
    def dataset_dir(self) -> Path:
        return self.root / "dataset"

    def _dir(self, name: str) -> Path:
        d = self.root / name
        d.mkdir(parents=True, exist_ok=True)
        return d

    def _rel(self, path: Path) -> str:
        return str(path.relative_to(self.root))

    # --- manifests and state ---------------------------------------------

    def _signature(self, command: str, args: dict, inputs: dict[str, str]) -> str:
        doc = {
            "command": command,
            "args": args,
            "config": self.cfg.canonical_json(),
            "inputs": dict(sorted(inputs.items())),
        }
        return _sha256(json.dumps(doc, sort_keys=True, separators=(",", ":")).encode())

    def _manifest_path(self, name: str) -> Path:
        return self._dir("manifests") / f"{name}.json"

    def _completed(self, name: str, signature: str) -> Optional[dict]:
        """The prior manifest, if it matches the signature and its outputs
        still hash correctly."""
        path = self._manifest_path(name)
        if not path.exists():
            return None
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError:
            return None
        if doc.get("input_signature") != signature:
            return None
        for rel, digest in doc.get("outputs", {}).items():
            target = self.root / rel
            if not target.exists() or _hash_file(target) != digest:
                return None
        return doc

    def _write_manifest(
        self, name: str, signature: str, outputs: Sequence[Path], details: dict
    ) -> dict:
        doc = {
            "command": name,
            "input_signature": signature,
            "outputs": {self._rel(p): _hash_file(p) for p in outputs},
            "details": details,
        }
        self._manifest_path(name).write_text(_dump_json(doc))
        return doc

    def _state(self) -> dict:
        path = self.root / STATE_NAME
        if not path.exists():
            return {"il": []}
        return json.loads(path.read_text())

    def _save_state(self, state: dict) -> None:
        (self.root / STATE_NAME).write_text(_dump_json(state))

    def _save_checkpoint(self, model, kind: str) -> Path:
        blob = checkpoint_bytes(model)
        name = f"{kind}-{_sha256(blob)[:12]}.ckpt.json"
        path = self._dir("checkpoints") / name
        path.write_bytes(blob)
        return path

    def _write_trace(self, name: str, trace: Sequence[float]) -> Path:
        path = self._dir("traces") / f"{name}.jsonl"
        lines = [
            json.dumps({"epoch": i, "loss": v}, sort_keys=True) for i, v in enumerate(trace)
        ]
        path.write_text("\n".join(lines) + ("\n" if lines else ""))
        return path

    # --- dataset ----------------------------------------------------------

    def load_samples(self, split: str) -> list[DatasetSample]:
        ds = self.cfg.dataset
        if ds.kind == "synthetic":
            if not (self.dataset_dir / "manifest.json").exists():
                raise ConfigError("no dataset found; run gen-data first")
            return load_dataset(self.dataset_dir, split)
        return self._load_external(split)

    def _load_external(self, split: str) -> list[DatasetSample]:
        ds = self.cfg.dataset
        names = ds.train_names if split == "train" else ds.val_names
        novel = sorted(self.registry.remaining_novel | set(self.registry.learned_novel))
        samples = []
        for name in names:
            scan_path = Path(ds.scan_dir) / f"{name}.bin"
            label_path = Path(ds.label_dir) / f"{name}.label"
            if not scan_path.exists() or not label_path.exists():
                raise ConfigError(f"missing scan or label file for {name!r}")
            scan = read_scan(scan_path.read_bytes())
            full, instances = read_labels(
                label_path.read_bytes(), scan.num_points,
                domain=LabelDomain.FULL, zero_is_void=True,
            )
            scan = dataclasses.replace(scan, instance_ids=instances)
            void_train = full.void_mask | np.isin(full.labels, novel)
            train = LabelSet(
                labels=np.where(void_train, 0, full.labels),
                domain=LabelDomain.CLOSED_OLD,
                void_mask=void_train,
            )
            samples.append(DatasetSample(name, scan, train, full))
        return samples

    # --- commands ----------------------------------------------------------

    def cmd_gen_data(self) -> dict:
        ds = self.cfg.dataset
        if ds.kind != "synthetic":
            return self._verify_external()
        signature = self._signature("gen-data", {}, {})
        done = self._completed("gen-data", signature)
        if done:
            return done
        train_seeds, val_seeds = split_seeds(
            2 * derive_seed(self.cfg.seed, "scenes"), ds.num_train, ds.num_val
        )
        self.dataset_dir.mkdir(parents=True, exist_ok=True)
        save_dataset(ds.scene, self.registry, self.dataset_dir, train_seeds, val_seeds)
        outputs = sorted(p for p in self.dataset_dir.rglob("*") if p.is_file())
        return self._write_manifest(
            "gen-data", signature, outputs,
            {"num_train": ds.num_train, "num_val": ds.num_val},
        )

    def _verify_external(self) -> dict:
        ds = self.cfg.dataset
        signature = self._signature(
            "gen-data", {"scan_dir": ds.scan_dir, "label_dir": ds.label_dir}, {}
        )
        for split in ("train", "val"):
            self._load_external(split)
        return self._write_manifest(
            "gen-data", signature, [],
            {"kind": ds.kind, "train": len(ds.train_names), "val": len(ds.val_names)},
        )

    def cmd_train_closed(self) -> dict:
        signature = self._signature("train-closed", {}, self._dataset_hash())
        done = self._completed("train-closed", signature)
        if done:
            return done
        samples = self.load_samples("train")
        model = init_model(
            self.registry, self.cfg.arch, derive_seed(self.cfg.seed, "closed-init")
        )
        tr = self.cfg.training
        trace = train_closed_model(model, samples, tr.closed_epochs, tr.closed_lr)
        ckpt = self._save_checkpoint(model, "closed")
        trace_path = self._write_trace("train-closed", trace)
        state = {"il": []}
        state["closed"] = {"checkpoint": self._rel(ckpt)}
        self._save_state(state)
        return self._write_manifest(
            "train-closed", signature, [ckpt, trace_path],
            {"epochs": tr.closed_epochs, "final_loss": trace[-1] if trace else None,
             "checkpoint": self._rel(ckpt)},
        )

    def _dataset_hash(self) -> dict[str, str]:
        if self.cfg.dataset.kind != "synthetic":
            return {}
        manifest = self.dataset_dir / "manifest.json"
        if not manifest.exists():
            raise ConfigError("no dataset found; run gen-data first")
        return {"dataset_manifest": _hash_file(manifest)}

    def _checkpoint_for(self, key: str) -> tuple[Path, dict]:
        state = self._state()
        if key == "il":
            if not state.get("il"):
                raise ConfigError("no IL stage has been run yet")
            entry = state["il"][-1]
        elif key in state:
            entry = state[key]
        else:
            raise ConfigError(f"no {key} checkpoint recorded; run the earlier stages first")
        path = self.root / entry["checkpoint"]
        if not path.exists():
            raise ConfigError(f"checkpoint {path} is missing")
        return path, entry

    def cmd_finetune_oseg(self) -> dict:
        closed_path, _ = self._checkpoint_for("closed")
        inputs = self._dataset_hash()
        inputs["closed_checkpoint"] = _hash_file(closed_path)
        signature = self._signature("finetune-oseg", {}, inputs)
        done = self._completed("finetune-oseg", signature)
        if done:
            return done
        samples = self.load_samples("train")
        closed_model = load_checkpoint(closed_path)
        model = add_redundancy_heads(
            closed_model, derive_seed(self.cfg.seed, "rc-init")
        )
        tr = self.cfg.training
        trace = train_oseg_model(
            model, samples, self.cfg.synthesis, self.cfg.loss,
            tr.oseg_epochs, tr.oseg_lr, derive_seed(self.cfg.seed, "oseg"),
            backbone_lr_scale=tr.oseg_backbone_scale,
        )
        lambda_th = self.cfg.inference.lambda_th
        if lambda_th is None:
            cfg_real = InferenceConfig(scoring_method="real")
            scores = score_pooled(model, samples, cfg_real)
            known = ~pool_labelsets([s.train_labels for s in samples]).void_mask
            lambda_th = calibrate_threshold(scores[known], self.cfg.inference.target_tpr)
        ckpt = self._save_checkpoint(model, "open")
        trace_path = self._write_trace("finetune-oseg", trace)
        state = self._state()
        state["open"] = {"checkpoint": self._rel(ckpt), "lambda_th": lambda_th}
        state["il"] = []
        self._save_state(state)
        return self._write_manifest(
            "finetune-oseg", signature, [ckpt, trace_path],
            {"epochs": tr.oseg_epochs, "final_loss": trace[-1] if trace else None,
             "lambda_th": lambda_th, "checkpoint": self._rel(ckpt)},
        )

    def _inference_config(self, state: dict, method: str = "real") -> InferenceConfig:
        lambda_th = self.cfg.inference.lambda_th
        if lambda_th is None:
            lambda_th = state.get("open", {}).get("lambda_th")
        return InferenceConfig(
            lambda_th=lambda_th,
            mc_passes=self.cfg.inference.mc_passes,
            scoring_method=method,
        )

    def cmd_il(self, class_id: int) -> dict:
        state = self._state()
        if state.get("il"):
            source_key, src_entry = "il", state["il"][-1]
        else:
            source_key = "open"
            _, src_entry = self._checkpoint_for("open")
        source_path = self.root / src_entry["checkpoint"]
        inputs = self._dataset_hash()
        inputs["source_checkpoint"] = _hash_file(source_path)
        name = f"il-{class_id}"
        signature = self._signature("il", {"class": class_id}, inputs)
        done = self._completed(name, signature)
        if done:
            return done

        samples = self.load_samples("train")
        source = load_checkpoint(source_path)
        infer = self._inference_config(state)
        if infer.lambda_th is None:
            raise ConfigError("no unknown-score threshold available; run finetune-oseg")

        new_registry = registry_advance(source.registry, [class_id])
        model = reassign_rc(
            source, new_registry, seed=derive_seed(self.cfg.seed, "reassign", class_id)
        )

        pseudo_dir = self._dir("pseudo") / f"class-{class_id}"
        pseudo_dir.mkdir(parents=True, exist_ok=True)
        pseudo_sets, pseudo_files = [], []
        for sample in samples:
            novel_gt = extract_novel_gt(sample.full_labels, class_id)
            pseudo = make_pseudo_labels(source, sample.scan, novel_gt, infer)
            pseudo_sets.append(pseudo)
            path = pseudo_dir / f"{sample.name}.label"
            path.write_bytes(write_labels(pseudo.labels, sample.scan.instance_ids))
            pseudo_files.append(path)

        tr = self.cfg.training
        trace = run_il_stage(
            model, samples, pseudo_sets, self.cfg.synthesis, self.cfg.loss,
            tr.il_epochs, tr.effective_il_lr, derive_seed(self.cfg.seed, "il", class_id),
        )
        ckpt = self._save_checkpoint(model, f"il{len(state.get('il', [])) + 1}")
        trace_path = self._write_trace(name, trace)
        state = self._state()
        state.setdefault("il", []).append(
            {"class": class_id, "checkpoint": self._rel(ckpt),
             "source": self._rel(source_path)}
        )
        self._save_state(state)
        return self._write_manifest(
            name, signature, [ckpt, trace_path, *pseudo_files],
            {"promoted_class": class_id, "source_stage": source_key,
             "source_checkpoint": self._rel(source_path),
             "pseudo_dir": self._rel(pseudo_dir),
             "final_loss": trace[-1] if trace else None,
             "checkpoint": self._rel(ckpt)},
        )

    # --- evaluation ---------------------------------------------------------

    def _latest_stage(self, state: dict) -> str:
        if state.get("il"):
            return "il"
        if "open" in state:
            return "open"
        if "closed" in state:
            return "closed"
        raise ConfigError("nothing to evaluate; train a model first")

    def _closed_style_prediction(self, model, samples) -> LabelSet:
        if model.stage is Stage.POST_IL:
            return pool_labelsets([predict_post_il(model, s.scan) for s in samples])
        return predict_pooled(model, samples)

    def evaluate_report(
        self,
        model,
        samples: Sequence[DatasetSample],
        method: Optional[str],
        state: Optional[dict] = None,
        seed: int = 0,
    ) -> EvalReport:
        """mIoU from closed-style predictions plus, when a scoring method is
        given, ranking metrics over the unknown scores."""
        state = state if state is not None else self._state()
        pred = self._closed_style_prediction(model, samples)
        gt = pooled_full_labels(samples)
        report = miou_report(pred, gt, model.registry)
        if method is None:
            return report
        cfg = self._inference_config(state, method)
        scores = score_pooled(model, samples, cfg, seed=derive_seed(seed, "score"))
        is_unknown = unknown_mask(gt, model.registry)
        keep = ~gt.void_mask
        scores, is_unknown = scores[keep], is_unknown[keep]
        if is_unknown.all() or not is_unknown.any():
            # every class is known to the model (or none is): the
            # known-vs-unknown ranking problem is undefined, mirror the
            # closed-stage report and omit the score metrics
            return report
        hist = export_histogram(scores, is_unknown, self.cfg.inference.histogram_bins)
        return dataclasses.replace(
            report,
            auroc=auroc(scores, is_unknown),
            aupr=aupr(scores, is_unknown),
            histogram=hist,
            score_stats={
                "mean_known": float(scores[~is_unknown].mean()),
                "mean_unknown": float(scores[is_unknown].mean()),
            },
        )

    def cmd_evaluate(
        self,
        method: Optional[str] = None,
        stage: Optional[str] = None,
        split: str = "val",
    ) -> dict:
        state = self._state()
        stage = stage or self._latest_stage(state)
        if stage not in ("closed", "open", "il"):
            raise ConfigError(f"unknown stage {stage!r}")
        ckpt_path, _ = self._checkpoint_for(stage)
        model = load_checkpoint(ckpt_path)
        if method is None and model.stage is not Stage.CLOSED:
            method = "real"
        if method == "real" and model.stage is Stage.CLOSED:
            raise DomainError("the real scoring method needs redundancy slots")

        inputs = self._dataset_hash()
        inputs["checkpoint"] = _hash_file(ckpt_path)
        tag = f"{stage}-{method or 'none'}-{split}"
        name = f"evaluate-{tag}"
        signature = self._signature(
            "evaluate", {"method": method, "stage": stage, "split": split}, inputs
        )
        done = self._completed(name, signature)
        if done:
            return done

        samples = self.load_samples(split)
        report = self.evaluate_report(model, samples, method, state=state)
        reports_dir = self._dir("reports")
        report_path = reports_dir / f"report-{tag}.json"
        report_path.write_text(_dump_json(report.to_json_dict()))
        outputs = [report_path]

        if method is not None:
            cfg = self._inference_config(state, method)
            scores = score_pooled(model, samples, cfg, seed=derive_seed(0, "score"))
            gt = pooled_full_labels(samples)
            if cfg.lambda_th is not None and model.stage is not Stage.CLOSED:
                pred = pool_labelsets(
                    [predict_open(model, s.scan, cfg) for s in samples]
                )
            else:
                pred = self._closed_style_prediction(model, samples)
            keep = ~gt.void_mask
            csv_path = reports_dir / f"scores-{tag}.csv"
            csv_path.write_text(
                encode_scores_csv(scores[keep], pred.labels[keep], gt.labels[keep])
            )
            hist_path = reports_dir / f"histogram-{tag}.csv"
            hist = export_histogram(
                scores[keep], unknown_mask(gt, model.registry)[keep],
                self.cfg.inference.histogram_bins,
            )
            hist_path.write_text(histogram_to_csv(hist))
            outputs += [csv_path, hist_path]

        return self._write_manifest(
            name, signature, outputs,
            {"stage": stage, "method": method, "split": split,
             "report": self._rel(report_path)},
        )

    def cmd_dump_scores(
        self,
        method: str = "real",
        fmt: str = "csv",
        stage: Optional[str] = None,
        split: str = "val",
    ) -> dict:
        if fmt not in ("csv", "bin"):
            raise ConfigError(f"unknown dump format {fmt!r}")
        state = self._state()
        stage = stage or self._latest_stage(state)
        ckpt_path, _ = self._checkpoint_for(stage)
        model = load_checkpoint(ckpt_path)
        if method == "real" and model.stage is Stage.CLOSED:
            raise DomainError("the real scoring method needs redundancy slots")
        inputs = self._dataset_hash()
        inputs["checkpoint"] = _hash_file(ckpt_path)
        tag = f"{stage}-{method}-{split}"
        name = f"dump-scores-{tag}-{fmt}"
        signature = self._signature(
            "dump-scores", {"method": method, "stage": stage, "split": split, "fmt": fmt},
            inputs,
        )
        done = self._completed(name, signature)
        if done:
            return done
        samples = self.load_samples(split)
        cfg = self._inference_config(state, method)
        scores = score_pooled(model, samples, cfg, seed=derive_seed(0, "score"))
        gt = pooled_full_labels(samples)
        if cfg.lambda_th is not None and model.stage is not Stage.CLOSED:
            pred = pool_labelsets([predict_open(model, s.scan, cfg) for s in samples])
        else:
            pred = self._closed_style_prediction(model, samples)
        dump_dir = self._dir("dumps")
        path = dump_dir / f"scores-{tag}.{fmt}"
        if fmt == "csv":
            path.write_text(encode_scores_csv(scores, pred.labels, gt.labels))
        else:
            path.write_bytes(encode_scores_binary(scores, pred.labels, gt.labels))
        return self._write_manifest(
            name, signature, [path],
            {"stage": stage, "method": method, "split": split, "format": fmt,
             "dump": self._rel(path)},
        )

    def cmd_plot_data(self) -> dict:
        reports_dir = self.root / "reports"
        traces_dir = self.root / "traces"
        report_files = sorted(reports_dir.glob("report-*.json")) if reports_dir.exists() else []
        trace_files = sorted(traces_dir.glob("*.jsonl")) if traces_dir.exists() else []
        if not report_files and not trace_files:
            raise ConfigError("nothing to plot; run evaluate or a training command first")
        inputs = {self._rel(p): _hash_file(p) for p in (*report_files, *trace_files)}
        signature = self._signature("plot-data", {}, inputs)
        done = self._completed("plot-data", signature)
        if done:
            return done

        plots = self._dir("plots")
        summary = plots / "summary.csv"
        rows = ["report,miou,miou_old,miou_novel,auroc,aupr"]
        for path in report_files:
            doc = json.loads(path.read_text())
            rows.append(
                ",".join(
                    [
                        path.stem,
                        repr(doc["miou"]),
                        repr(doc["miou_old"]),
                        repr(doc["miou_novel"]),
                        "" if "auroc" not in doc else repr(doc["auroc"]),
                        "" if "aupr" not in doc else repr(doc["aupr"]),
                    ]
                )
            )
        summary.write_text("\n".join(rows) + "\n")

        curves = plots / "loss_curves.csv"
        rows = ["command,epoch,loss"]
        for path in trace_files:
            for line in path.read_text().splitlines():
                rec = json.loads(line)
                rows.append(f"{path.stem},{rec['epoch']},{rec['loss']!r}")
        curves.write_text("\n".join(rows) + "\n")
        return self._write_manifest(
            "plot-data", signature, [summary, curves],
            {"reports": len(report_files), "traces": len(trace_files)},
        )
