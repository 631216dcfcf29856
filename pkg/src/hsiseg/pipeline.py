"""Training, ensemble inference, voting fusion, and accuracy metrics."""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ContractError
from .formats import (
    ClassMap,
    LabelMap,
    ProbMap,
    save_class_map,
    save_probmap,
    write_class_ppm,
)
from .trispec import TriSpectralSet


@dataclass
class TrainConfig:
    epochs: int = 30
    batch: int = 4
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0001
    poly_power: float = 0.9
    head_lr_multiplier: float = 10.0
    seed: int = 0
    val_fraction: float = 0.05


@dataclass
class Metrics:
    per_class: list  # recall per class id 1..C, NaN where the class is absent
    oa: float
    aa: float
    kappa: float
    n_labeled: int
    kappa_undefined: bool = False

    def to_dict(self):
        return {
            "oa": self.oa,
            "aa": self.aa,
            "kappa": None if self.kappa_undefined else self.kappa,
            "per_class": [None if math.isnan(v) else v for v in self.per_class],
            "n_labeled": self.n_labeled,
        }


@dataclass
class TrainResult:
    model: object
    train_rows: list  # (iteration, lr, loss)
    val_rows: list  # (epoch, oa_hard, oa_soft)
    holdout: list = field(default_factory=list)  # image indices kept for validation


def iteration_count(num_images, epochs, batch):
    return epochs * math.ceil(num_images / batch)


def train(tri_set: TriSpectralSet, labels: LabelMap, model, cfg: TrainConfig,
          out_dir=None) -> TrainResult:
    """Momentum SGD over whole tri-spectral images with a poly learning rate.

    Every batch samples complete images against the shared label map. With a
    positive ``val_fraction`` a seeded slice of images is held out and scored
    by voting after each epoch. Writes train_log.csv / val_log.csv when
    ``out_dir`` is given.
    """
    m = tri_set.capacity
    if m == 0:
        raise ContractError("empty tri-spectral set")
    if labels.labeled_count == 0:
        raise ContractError("training needs at least one labeled pixel")
    rng = np.random.default_rng(cfg.seed)

    indices = rng.permutation(m)
    n_val = 0
    if cfg.val_fraction > 0 and m > 1:
        n_val = min(m - 1, max(1, round(cfg.val_fraction * m)))
    holdout = sorted(int(i) for i in indices[:n_val])
    train_idx = np.array(sorted(int(i) for i in indices[n_val:]))

    per_epoch = math.ceil(len(train_idx) / cfg.batch)
    max_iter = iteration_count(len(train_idx), cfg.epochs, cfg.batch)
    opt = ad.SGD(model.parameters(), momentum=cfg.momentum,
                 weight_decay=cfg.weight_decay,
                 head_lr_multiplier=cfg.head_lr_multiplier)

    train_rows, val_rows = [], []
    iteration = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(train_idx)
        for b in range(per_epoch):
            chunk = order[b * cfg.batch:(b + 1) * cfg.batch]
            lr = ad.poly_lr(cfg.lr, iteration, max_iter, cfg.poly_power)
            model.zero_grad()
            total = None
            for i in chunk:
                loss = model.loss_on(tri_set.images[int(i)], labels)
                total = loss if total is None else total + loss
            total = total * (1.0 / len(chunk))
            total.backward()
            opt.step(lr)
            train_rows.append((iteration, lr, total.item()))
            iteration += 1
        if holdout:
            probs = [predict_image(model, tri_set.images[i]) for i in holdout]
            hard = hard_vote([classify(p) for p in probs])
            soft = soft_vote(probs)
            val_rows.append((epoch,
                             evaluate(hard, labels).oa,
                             evaluate(soft, labels).oa))

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "train_log.csv"), "w") as fh:
            fh.write("iter,lr,loss\n")
            for it, lr, loss in train_rows:
                fh.write(f"{it},{lr!r},{loss!r}\n")
        with open(os.path.join(out_dir, "val_log.csv"), "w") as fh:
            fh.write("epoch,oa_hard,oa_soft\n")
            for epoch, oa_hard, oa_soft in val_rows:
                fh.write(f"{epoch},{oa_hard!r},{oa_soft!r}\n")
    return TrainResult(model, train_rows, val_rows, holdout)


def predict_image(model, image) -> ProbMap:
    return ProbMap(model.predict_probabilities(image))


def classify(prob: ProbMap) -> ClassMap:
    return prob.argmax_map()


def _check_same_shapes(shapes):
    if len(set(shapes)) != 1:
        raise ContractError(f"maps disagree on shape: {sorted(set(shapes))}")


def hard_vote(maps) -> ClassMap:
    """Per-pixel plurality class; ties resolve to the smallest class id."""
    maps = list(maps)
    if not maps:
        raise ContractError("hard_vote needs at least one map")
    _check_same_shapes([m.labels.shape for m in maps])
    num_classes = max(int(m.labels.max()) for m in maps)
    h, w = maps[0].labels.shape
    counts = np.zeros((num_classes, h, w), dtype=np.int32)
    rows, cols = np.indices((h, w))
    for m in maps:
        np.add.at(counts, (m.labels.astype(np.int64) - 1, rows, cols), 1)
    return ClassMap(counts.argmax(axis=0) + 1)


def soft_vote(maps) -> ClassMap:
    """Argmax of summed probability vectors; ties resolve to the smallest class id."""
    maps = list(maps)
    if not maps:
        raise ContractError("soft_vote needs at least one map")
    _check_same_shapes([m.values.shape for m in maps])
    total = np.zeros(maps[0].values.shape, dtype=np.float64)
    for m in maps:
        total += m.values
    return ClassMap(total.argmax(axis=0) + 1)


def evaluate(pred: ClassMap, truth: LabelMap) -> Metrics:
    """Overall/average accuracy and kappa over the labeled pixels of ``truth``."""
    if pred.labels.shape != truth.labels.shape:
        raise ContractError(
            f"prediction {pred.labels.shape} does not match truth {truth.labels.shape}")
    mask = truth.labels > 0
    n = int(mask.sum())
    if n == 0:
        raise ContractError("evaluation needs at least one labeled pixel")
    t = truth.labels[mask].astype(np.int64)
    p = pred.labels[mask].astype(np.int64)
    k = int(max(t.max(), p.max()))
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (t - 1, p - 1), 1)

    row = confusion.sum(axis=1)
    col = confusion.sum(axis=0)
    diag = np.diag(confusion)
    per_class = [diag[c] / row[c] if row[c] > 0 else float("nan") for c in range(k)]
    present = row > 0
    oa = float(diag.sum() / n)
    aa = float(np.mean([per_class[c] for c in range(k) if present[c]]))
    agree = int(diag.sum())
    chance = int((row * col).sum())
    if n * n == chance:
        return Metrics(per_class, oa, aa, float("nan"), n, kappa_undefined=True)
    kappa = (n * agree - chance) / (n * n - chance)
    return Metrics(per_class, oa, aa, float(kappa), n)


def run_inference_set(model, tri_set: TriSpectralSet, out_dir=None, truth=None,
                      jobs=1):
    """Predict every image, fuse by both voting schemes, optionally score and persist.

    Returns (prob maps, hard-vote map, soft-vote map, report dict). Per-image
    probability maps and class maps plus both fused maps are written under
    ``out_dir`` when given; metrics require ``truth``.
    """
    images = tri_set.images
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            probs = list(pool.map(lambda img: predict_image(model, img), images))
    else:
        probs = [predict_image(model, img) for img in images]
    class_maps = [classify(p) for p in probs]
    hard = hard_vote(class_maps)
    soft = soft_vote(probs)

    report = {"images": len(images)}
    if truth is not None:
        report["hard"] = evaluate(hard, truth).to_dict()
        report["soft"] = evaluate(soft, truth).to_dict()
        report["single"] = [evaluate(cm, truth).oa for cm in class_maps]

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        for i, (p, cm) in enumerate(zip(probs, class_maps)):
            save_probmap(p, os.path.join(out_dir, f"prob_{i}.prb"))
            save_class_map(cm, os.path.join(out_dir, f"cls_{i}.lbl"))
            write_class_ppm(cm, os.path.join(out_dir, f"cls_{i}.ppm"))
        for name, fused in (("hard", hard), ("soft", soft)):
            save_class_map(fused, os.path.join(out_dir, f"vote_{name}.lbl"))
            write_class_ppm(fused, os.path.join(out_dir, f"vote_{name}.ppm"))
        with open(os.path.join(out_dir, "report.json"), "w") as fh:
            json.dump(report, fh, indent=2)
    return probs, hard, soft, report
