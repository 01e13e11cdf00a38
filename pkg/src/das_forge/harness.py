"""Training loop, evaluation, repeated seeded runs and feature embeddings."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import nncore as nn
from .dataset import DatasetManifest, load_images, split
from .model import BRANCHES, ModelConfig, TwoStageClassifier
from .tsne import tsne_2d

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 16
    epochs: int = 25
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    train_fraction: float = 0.7
    n_runs: int = 5
    seed: int = 0
    # exact batch-norm population statistics at the end of every epoch
    recalibrate_bn: bool = True

    def validate(self) -> "TrainConfig":
        if self.batch_size < 2 or self.epochs < 1 or self.n_runs < 1:
            raise ValueError("need batch_size >= 2, epochs >= 1, n_runs >= 1")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie in (0, 1)")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        try:
            return cls(**d).validate()
        except TypeError as exc:
            raise ValueError(f"bad train config: {exc}") from None


FULL_SCALE_TRAIN = TrainConfig(n_runs=50)


@dataclass
class ImageSet:
    amp: np.ndarray
    phase: np.ndarray
    labels: np.ndarray
    ids: list = field(default_factory=list)

    def __len__(self):
        return len(self.labels)

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest) -> "ImageSet":
        amp, phase, labels = load_images(manifest)
        return cls(amp, phase, labels, [s.id for s in manifest.samples])

    def take(self, idx) -> "ImageSet":
        idx = np.asarray(idx)
        return ImageSet(self.amp[idx], self.phase[idx], self.labels[idx], [self.ids[i] for i in idx])


def _as_images(data) -> ImageSet:
    return ImageSet.from_manifest(data) if isinstance(data, DatasetManifest) else data


@dataclass
class RunReport:
    seed: int
    epochs: int
    train_loss: list = field(default_factory=list)
    train_acc: list = field(default_factory=list)
    test_loss: list = field(default_factory=list)
    test_acc: list = field(default_factory=list)
    confusion: Optional[list] = None
    accuracy: Optional[float] = None
    batches_per_epoch: int = 0
    wall_time_s: float = 0.0

    def to_dict(self, include_timing: bool = True) -> dict:
        d = asdict(self)
        if not include_timing:
            d.pop("wall_time_s")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        return cls(**d)


def batch_slices(n: int, batch_size: int) -> list[slice]:
    """Consecutive batches; a trailing batch of one (which batch norm cannot
    normalise) is folded into the previous batch."""
    bounds = list(range(0, n, batch_size)) + [n]
    if len(bounds) > 2 and bounds[-1] - bounds[-2] == 1:
        del bounds[-2]
    return [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]


def confusion_matrix(true, pred, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=int)
    np.add.at(cm, (np.asarray(true), np.asarray(pred)), 1)
    return cm


def evaluate(model: TwoStageClassifier, data, ext_maps=None) -> dict:
    """Accuracy, mean loss and confusion matrix (rows true, columns predicted)."""
    data = _as_images(data)
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty set")
    probs = model.predict_proba(data.amp, data.phase, ext_maps=ext_maps)
    pred = probs.argmax(axis=1)
    n_classes = model.config.n_classes
    loss = -float(np.mean(np.log(np.maximum(probs[np.arange(len(pred)), data.labels], 1e-300))))
    cm = confusion_matrix(data.labels, pred, n_classes)
    return {"accuracy": float(np.trace(cm) / cm.sum()), "loss": loss, "confusion": cm, "pred": pred}


def train(
    model: TwoStageClassifier,
    train_data,
    config: TrainConfig = TrainConfig(),
    test_data=None,
    seed: Optional[int] = None,
) -> RunReport:
    """Mini-batch Adam on mean cross-entropy; updates ``model`` in place."""
    config.validate()
    train_set = _as_images(train_data)
    test_set = _as_images(test_data) if test_data is not None else None
    n = len(train_set)
    if n == 0:
        raise ValueError("empty training set")
    if config.batch_size > n:
        raise ValueError(f"batch size {config.batch_size} exceeds training set size {n}")
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xBA7C4]))
    opt = nn.Adam(config.lr, config.beta1, config.beta2, config.eps)
    names = model.trainable_names()
    frozen = model.config.freeze_extractor
    start = time.perf_counter()

    train_maps = test_maps = None
    frozen_copy = None
    if frozen:
        # extractor outputs cannot change, so compute them once
        train_maps = model.extractor_maps(train_set.amp, train_set.phase)
        if test_set is not None:
            test_maps = model.extractor_maps(test_set.amp, test_set.phase)
        frozen_copy = {k: model.params[k].copy() for k in model.extractor_names()}

    slices = batch_slices(n, config.batch_size)
    report = RunReport(seed=seed, epochs=config.epochs, batches_per_epoch=len(slices))
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        loss_sum, correct = 0.0, 0
        for bi, sl in enumerate(slices, start=1):
            idx = order[sl]
            maps = None if train_maps is None else {br: train_maps[br][idx] for br in BRANCHES}
            loss, grads, probs = model.loss_and_grads(
                train_set.amp[idx], train_set.phase[idx], train_set.labels[idx], ext_maps=maps
            )
            if not np.isfinite(loss):
                bad = next((k for k in names if not np.all(np.isfinite(grads[k]))), "logits")
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {bi}; offending tensor: {bad}")
            opt.step(model.params, grads, names)
            loss_sum += loss * len(idx)
            correct += int(np.sum(probs.argmax(axis=1) == train_set.labels[idx]))
        report.train_loss.append(loss_sum / n)
        report.train_acc.append(correct / n)
        if config.recalibrate_bn and (test_set is not None or epoch == config.epochs):
            model.recalibrate_batchnorm(train_set.amp, train_set.phase, ext_maps=train_maps)
        if frozen_copy is not None:
            for k, v in frozen_copy.items():
                if not np.array_equal(model.params[k], v):
                    raise AssertionError(f"frozen extractor tensor {k} changed during epoch {epoch}")
        if test_set is not None:
            ev = evaluate(model, test_set, ext_maps=test_maps)
            report.test_loss.append(ev["loss"])
            report.test_acc.append(ev["accuracy"])
        log.info(
            "epoch %d/%d loss %.4f acc %.3f%s", epoch, config.epochs, report.train_loss[-1], report.train_acc[-1],
            f" test acc {report.test_acc[-1]:.3f}" if test_set is not None else "",
        )
    if test_set is not None:
        ev = evaluate(model, test_set, ext_maps=test_maps)
        report.confusion = ev["confusion"].tolist()
        report.accuracy = ev["accuracy"]
    report.wall_time_s = time.perf_counter() - start
    return report


def run_seeds(seed: int, n_runs: int) -> list[int]:
    ss = np.random.SeedSequence([seed, 0x4E5])
    return [int(s.generate_state(1)[0]) for s in ss.spawn(n_runs)]


def accuracy_stats(accuracies: Sequence[float]) -> dict:
    """Boxplot summary; quartiles by linear interpolation."""
    a = np.asarray(accuracies, dtype=float)
    if a.size == 0:
        raise ValueError("no accuracies")
    q = np.quantile(a, [0.0, 0.25, 0.5, 0.75, 1.0], method="linear")
    return {
        "min": float(q[0]), "q1": float(q[1]), "median": float(q[2]), "q3": float(q[3]),
        "max": float(q[4]), "mean": float(a.mean()), "n": int(a.size),
    }


def single_run(
    manifest: DatasetManifest,
    images: ImageSet,
    model_config: ModelConfig,
    train_config: TrainConfig,
    run_seed: int,
    pretrained: Optional[str] = None,
):
    """Fresh split, fresh init (optionally importing extractor weights), train, evaluate."""
    train_m, test_m = split(manifest, train_config.train_fraction, run_seed)
    pos = {sid: i for i, sid in enumerate(images.ids)}
    train_set = images.take([pos[s.id] for s in train_m.samples])
    test_set = images.take([pos[s.id] for s in test_m.samples])
    model = TwoStageClassifier(ModelConfig.from_dict(model_config.to_dict()), seed=run_seed)
    if pretrained is not None:
        model.load_weights(pretrained)
    report = train(model, train_set, train_config, test_set, seed=run_seed)
    return model, report, (train_m, test_m)


def repeated_runs(
    manifest: DatasetManifest,
    model_config: ModelConfig,
    train_config: TrainConfig,
    n_runs: Optional[int] = None,
    pretrained: Optional[str] = None,
    images: Optional[ImageSet] = None,
) -> dict:
    """Independent runs, each with its own split, init and shuffling."""
    n_runs = train_config.n_runs if n_runs is None else n_runs
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    images = images or ImageSet.from_manifest(manifest)
    reports = []
    for i, s in enumerate(run_seeds(train_config.seed, n_runs)):
        _, report, _ = single_run(manifest, images, model_config, train_config, s, pretrained)
        log.info("run %d/%d seed %d accuracy %.4f", i + 1, n_runs, s, report.accuracy)
        reports.append(report)
    return {"stats": accuracy_stats([r.accuracy for r in reports]), "reports": reports}


@dataclass
class EmbeddingSet:
    stage: int
    coords: np.ndarray
    labels: np.ndarray
    kl_history: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "coords": self.coords.tolist(),
            "labels": self.labels.tolist(),
            "final_kl": self.kl_history[-1] if self.kl_history else None,
        }


def extract_embeddings(
    model: TwoStageClassifier,
    data,
    stage: int,
    perplexity: float = 30.0,
    n_iter: int = 1000,
    seed: int = 0,
) -> EmbeddingSet:
    data = _as_images(data)
    feats = model.features(data.amp, data.phase, stage)
    coords, history = tsne_2d(feats, perplexity=perplexity, n_iter=n_iter, seed=seed)
    return EmbeddingSet(stage, coords, np.asarray(data.labels), history)


def knn1_agreement(coords: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of points whose nearest other point shares their label."""
    d = ((coords[:, None, :] - coords[None, :, :]) ** 2).sum(-1)
    np.fill_diagonal(d, np.inf)
    return float(np.mean(labels[d.argmin(axis=1)] == labels))
