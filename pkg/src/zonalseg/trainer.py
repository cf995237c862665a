"""SGD training, cross-validation, evaluation and prediction."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import NonFiniteError, Tensor, ops
from .checkpoint import load_checkpoint, save_checkpoint
from .data_pipeline import (
    AugmentSpec,
    Volume,
    augment,
    load_volume,
    prepare_case,
    restore_probabilities,
    sample_rng,
    save_volume,
)
from .losses_metrics import ZONES, SegReport, SUBSETS, cross_entropy_loss, stratified_report
from .stats_tests import DegeneratePairingError, wilcoxon_rank_sum, wilcoxon_signed_rank
from .zonal_net import ModelConfig, SegmentationModel, build_model, forward_segment

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 2.5e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 100
    batch_size: int = 48
    model: ModelConfig = field(default_factory=ModelConfig)
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    augment_enabled: bool = True
    dataset: str | None = None
    seed: int = 0
    folds: int = 5
    crop_mm: float = 93.0
    lr_schedule: str = "constant"
    poly_power: float = 0.9
    prostate_slices_only: bool = False

    def validate(self) -> "TrainConfig":
        if self.learning_rate <= 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("learning rate must be positive; momentum and weight decay non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.folds < 2:
            raise ValueError("cross-validation needs at least 2 folds")
        if self.lr_schedule not in ("constant", "poly"):
            raise ValueError("lr_schedule must be 'constant' or 'poly'")
        self.model.validate()
        self.augment.validate()
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["augment"] = self.augment.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        profile = d.pop("profile", None)
        base = PROFILES[profile]().to_dict() if profile else cls().to_dict()
        model = {**base.pop("model"), **d.pop("model", {})}
        aug = {**base.pop("augment"), **d.pop("augment", {})}
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        merged = {**base, **d}
        return cls(model=ModelConfig.from_dict(model), augment=AugmentSpec.from_dict(aug),
                   **{k: v for k, v in merged.items() if k not in ("model", "augment")})

    @classmethod
    def load(cls, path) -> "TrainConfig":
        """Read a JSON config; keys mirror the dataclass fields."""
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path} is not valid JSON: {exc}") from exc
        return cls.from_dict(d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def desk_profile(**overrides) -> TrainConfig:
    """Small configuration that trains on phantoms in minutes on one CPU core."""
    cfg = TrainConfig(epochs=10, batch_size=8,
                      model=ModelConfig(width_multiplier=0.25, input_size=96))
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg


PROFILES = {"full": TrainConfig, "desk": desk_profile}


# ---------------------------------------------------------------------------
# optimizer


def sgd_step(params: list, grads: list, state: list, lr: float, momentum: float,
             weight_decay: float) -> None:
    """Classical momentum SGD with L2 weight decay, updating arrays in place.

    g' = g + wd * p;  v <- momentum * v + g';  p <- p - lr * v
    """
    if not (len(params) == len(grads) == len(state)):
        raise ValueError("params, grads and state must align")
    for p, g, v in zip(params, grads, state):
        if p.shape != g.shape or p.shape != v.shape:
            raise ValueError(f"shape mismatch in sgd_step: {p.shape}, {g.shape}, {v.shape}")
        d = g + weight_decay * p if weight_decay else g
        v *= momentum
        v += d
        p -= lr * v


class SGD:
    def __init__(self, named_params, lr, momentum=0.9, weight_decay=1e-4):
        self.named_params = list(named_params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = {n: np.zeros_like(p.data) for n, p in self.named_params}

    def step(self, lr: float | None = None) -> None:
        params, grads, state = [], [], []
        for name, p in self.named_params:
            params.append(p.data)
            grads.append(p.grad if p.grad is not None else np.zeros_like(p.data))
            state.append(self.buffers[name])
        sgd_step(params, grads, state, self.lr if lr is None else lr,
                 self.momentum, self.weight_decay)

    def zero_grad(self) -> None:
        for _, p in self.named_params:
            p.grad = None

    def load_buffers(self, buffers: dict) -> None:
        for name, arr in buffers.items():
            if name in self.buffers:
                self.buffers[name][...] = arr


def learning_rate_at(config: TrainConfig, iteration: int, total: int) -> float:
    if config.lr_schedule == "poly" and total > 0:
        return config.learning_rate * (1 - iteration / total) ** config.poly_power
    return config.learning_rate


# ---------------------------------------------------------------------------
# training


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class SliceData:
    """Network-ready slices with the patient each one came from."""

    images: np.ndarray  # (n, S, S) float32
    masks: np.ndarray   # (n, S, S) uint8
    patients: list

    def __len__(self):
        return len(self.images)


def slices_from_cases(cases: list, config: TrainConfig) -> SliceData:
    from .losses_metrics import categorize_slice, SliceCategory

    images, masks, patients = [], [], []
    for case in cases:
        if case.mask is None:
            continue
        img, msk = prepare_case(case.image, case.mask, config.model.input_size, config.crop_mm)
        for k in range(len(img)):
            if config.prostate_slices_only and categorize_slice(msk[k]) is SliceCategory.NON_PROSTATE:
                continue
            images.append(img[k])
            masks.append(msk[k])
            patients.append(case.case_id)
    if not images:
        raise ValueError("training data is empty")
    return SliceData(np.stack(images), np.stack(masks), patients)


def train_step(model, optimizer: SGD, images: np.ndarray, masks: np.ndarray,
               lr: float | None = None) -> float:
    """One forward/backward/update on a batch; returns the loss."""
    model.train()
    optimizer.zero_grad()
    x = Tensor(images[:, None].astype(np.float32, copy=False))
    probs = ops.softmax_channel(model(x))
    loss = cross_entropy_loss(probs, masks)
    value = float(loss.data)
    if not np.isfinite(value):
        raise NonFiniteError("loss is not finite")
    loss.backward()
    optimizer.step(lr)
    return value


def _batch(data: SliceData, idx, config: TrainConfig, epoch: int):
    imgs = data.images[idx]
    msks = data.masks[idx]
    if not config.augment_enabled:
        return imgs, msks
    out_i = np.empty_like(imgs)
    out_m = np.empty_like(msks)
    for j, k in enumerate(idx):
        rng = sample_rng(config.seed, epoch, int(k))
        out_i[j], out_m[j] = augment(imgs[j], msks[j], config.augment, rng)
    return out_i, out_m


@dataclass
class TrainResult:
    model: SegmentationModel
    optimizer: SGD
    history: list
    epoch: int
    best_model_path: Path | None = None
    final_model_path: Path | None = None
    best_score: float | None = None
    validation_history: list = field(default_factory=list)


def train(config: TrainConfig, data: SliceData, validation: list | None = None,
          out_dir=None, resume: str | None = None, progress=None) -> TrainResult:
    """Train a model on ``data``.

    Every epoch shuffles with a seed derived from (seed, epoch), so resuming
    from an epoch-boundary checkpoint reproduces the uninterrupted run.
    ``validation`` is a list of cases scored after each epoch; the best
    mean prostate-slice DSC is kept as ``best.json`` in ``out_dir``.
    """
    config.validate()
    if len(data) == 0:
        raise ValueError("training data is empty")
    if resume is not None:
        model, momentum, meta = load_checkpoint(resume)
        history = list(meta.get("history", []))
        start_epoch = int(meta.get("epoch", 0))
    else:
        model = build_model(config.model)
        momentum, history, start_epoch = {}, [], 0
    optimizer = SGD(model.named_parameters(), config.learning_rate, config.momentum,
                    config.weight_decay)
    optimizer.load_buffers(momentum)

    out = Path(out_dir) if out_dir is not None else None
    n = len(data)
    steps_per_epoch = -(-n // config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    result = TrainResult(model, optimizer, history, start_epoch)
    best = -np.inf

    for epoch in range(start_epoch, config.epochs):
        order = np.random.default_rng([config.seed, epoch, 7]).permutation(n)
        losses = []
        for b in range(steps_per_epoch):
            idx = np.sort(order[b * config.batch_size:(b + 1) * config.batch_size])
            images, masks = _batch(data, idx, config, epoch)
            it = epoch * steps_per_epoch + b
            try:
                value = train_step(model, optimizer, images, masks,
                                   learning_rate_at(config, it, total_steps))
            except NonFiniteError as exc:
                raise TrainingDivergedError(
                    f"non-finite values at iteration {it} (epoch {epoch}, batch {b}, "
                    f"slices {idx.tolist()}): {exc}"
                ) from exc
            losses.append(value)
        history.append(float(np.mean(losses)))
        result.epoch = epoch + 1
        if progress is not None:
            progress(epoch, history[-1])
        log.info("epoch %d loss %.5f", epoch, history[-1])
        if validation:
            score = evaluate_model(model, validation, config.crop_mm).report.mean_dsc()
            result.validation_history.append(score)
            if out is not None and score > best:
                best = score
                result.best_score = score
                result.best_model_path = _save(out / "best", result, config)
        if out is not None:
            result.final_model_path = _save(out / "final", result, config)

    if out is not None and result.final_model_path is None:
        result.final_model_path = _save(out / "final", result, config)
    if out is not None and result.best_model_path is None:
        result.best_model_path = result.final_model_path
    return result


def _save(path, result: TrainResult, config: TrainConfig) -> Path:
    meta = {"epoch": result.epoch, "history": result.history,
            "validation_history": result.validation_history,
            "train_config": config.to_dict()}
    return save_checkpoint(path, result.model, result.optimizer.buffers, meta)


# ---------------------------------------------------------------------------
# evaluation


def predict_probabilities(model: SegmentationModel, images: np.ndarray,
                          batch_size: int = 8) -> np.ndarray:
    """Eval-mode class probabilities (n, 3, S, S) for prepared slices."""
    model.eval()
    out = []
    for i in range(0, len(images), batch_size):
        probs, _ = forward_segment(model, images[i:i + batch_size, None])
        out.append(probs)
    return np.concatenate(out)


def predict_labels(model: SegmentationModel, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Eval-mode argmax labels for (n, S, S) prepared slices."""
    model.eval()
    out = []
    for i in range(0, len(images), batch_size):
        _, labels = forward_segment(model, images[i:i + batch_size, None])
        out.append(labels)
    return np.concatenate(out)


def predict_volume(model: SegmentationModel, image: Volume, crop_mm: float = 93.0) -> Volume:
    imgs, _ = prepare_case(image, None, model.config.input_size, crop_mm)
    probs = predict_probabilities(model, imgs)
    return Volume(restore_probabilities(probs, image, crop_mm), image.spacing_mm, "mask")


@dataclass
class EvaluationResult:
    report: SegReport
    inter_reader: SegReport | None = None
    tests: dict = field(default_factory=dict)
    skipped: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = {"model": self.report.to_dict(), "skipped": self.skipped}
        if self.inter_reader is not None:
            d["inter_reader"] = self.inter_reader.to_dict()
            d["signed_rank"] = {f"{z}/{s}": (t.to_dict() if t is not None else None)
                                for (z, s), t in self.tests.items()}
        return d


def evaluate_model(model: SegmentationModel, cases: list, crop_mm: float = 93.0,
                   label: str = "model") -> EvaluationResult:
    """Stratified DSC of ``model`` against each case's mask.

    Cases carrying a second reader's mask also yield inter-reader rows and a
    per-cell signed-rank comparison of model-vs-reader1 with reader1-vs-reader2.
    """
    report = SegReport(label=label)
    inter = SegReport(label="reader1_vs_reader2")
    skipped = []
    for case in cases:
        if case.mask is None:
            log.warning("skipping %s: no mask", case.case_id)
            skipped.append(case.case_id)
            continue
        pred = predict_volume(model, case.image, crop_mm)
        report.add(case.case_id, stratified_report(pred.voxels, case.mask.voxels))
        if case.reader2 is not None:
            inter.add(case.case_id, stratified_report(case.reader2.voxels, case.mask.voxels))
    result = EvaluationResult(report, skipped=skipped)
    if inter.rows:
        result.inter_reader = inter
        result.tests = compare_reports(report, inter, paired=True)
    return result


def compare_reports(a: SegReport, b: SegReport, paired: bool) -> dict:
    """(zone, subset) -> TestResult (None when a cell cannot be tested).

    Paired comparisons use the signed-rank test over patients present in
    both reports; unpaired ones use the rank-sum test.
    """
    tests = {}
    for zone in ZONES:
        for subset in SUBSETS:
            va, vb = a.values(zone, subset), b.values(zone, subset)
            try:
                if paired:
                    common = sorted(set(va) & set(vb))
                    tests[(zone, subset)] = (wilcoxon_signed_rank([va[p] for p in common],
                                                                  [vb[p] for p in common])
                                             if common else None)
                else:
                    tests[(zone, subset)] = (wilcoxon_rank_sum(list(va.values()), list(vb.values()))
                                             if va and vb else None)
            except DegeneratePairingError:
                tests[(zone, subset)] = None
    return tests


# ---------------------------------------------------------------------------
# cross-validation and ablation


def assign_folds(case_ids: list, folds: int, seed: int) -> dict:
    """case id -> fold index; depends only on the sorted ids and the seed."""
    ids = sorted(case_ids)
    if len(ids) < folds:
        raise ValueError(f"{len(ids)} patients cannot fill {folds} folds")
    perm = np.random.default_rng(seed).permutation(len(ids))
    return {ids[k]: pos % folds for pos, k in enumerate(perm)}


@dataclass
class CVResult:
    fold_scores: dict          # candidate index -> list of per-fold mean DSC
    best_candidate: int
    best_config: TrainConfig
    best_fold: int
    best_model: SegmentationModel
    folds: dict                # case id -> fold


def cross_validate(config: TrainConfig, cases: list, candidates: list | None = None,
                   out_dir=None) -> CVResult:
    """Patient-level k-fold CV over one or more candidate configurations.

    ``candidates`` are dicts of TrainConfig overrides (default: just the
    base config). The candidate with the highest mean validation DSC wins;
    its best-scoring fold model is returned.
    """
    config.validate()
    folds = assign_folds([c.case_id for c in cases], config.folds, config.seed)
    candidates = candidates or [{}]
    scores, models = {}, {}
    base = config.to_dict()
    for ci, overrides in enumerate(candidates):
        cfg = TrainConfig.from_dict({**base, **overrides})
        scores[ci] = []
        for f in range(config.folds):
            train_cases = [c for c in cases if folds[c.case_id] != f]
            val_cases = [c for c in cases if folds[c.case_id] == f]
            sub = Path(out_dir) / f"cand{ci}_fold{f}" if out_dir is not None else None
            res = train(cfg, slices_from_cases(train_cases, cfg), out_dir=sub)
            score = evaluate_model(res.model, val_cases, cfg.crop_mm).report.mean_dsc()
            scores[ci].append(score)
            models[(ci, f)] = res.model
            log.info("candidate %d fold %d mean DSC %.4f", ci, f, score)
    best_c = max(scores, key=lambda c: np.nanmean(scores[c]))
    best_f = int(np.nanargmax(scores[best_c]))
    best_cfg = TrainConfig.from_dict({**base, **candidates[best_c]})
    return CVResult(scores, best_c, best_cfg, best_f, models[(best_c, best_f)], folds)


def ablation_study(config: TrainConfig, train_cases: list, test_cases: list) -> dict:
    """Train with and without the stem max-pool; compare per-patient DSCs."""
    reports = {}
    for flag in (False, True):
        cfg = TrainConfig.from_dict(config.to_dict())
        cfg.model.include_initial_maxpool = flag
        res = train(cfg, slices_from_cases(train_cases, cfg))
        reports["with_maxpool" if flag else "without_maxpool"] = evaluate_model(
            res.model, test_cases, cfg.crop_mm, label="maxpool" if flag else "no_maxpool").report
    tests = compare_reports(reports["without_maxpool"], reports["with_maxpool"], paired=True)
    return {"reports": reports, "tests": tests}


def load_model(path) -> SegmentationModel:
    model, _, _ = load_checkpoint(path)
    return model.eval()


def predict_file(ckpt, in_path, out_path, crop_mm: float | None = None) -> Volume:
    model, _, meta = load_checkpoint(ckpt)
    if crop_mm is None:
        crop_mm = meta.get("train_config", {}).get("crop_mm", 93.0)
    mask = predict_volume(model.eval(), load_volume(in_path), crop_mm)
    save_volume(mask, out_path)
    return mask
