"""Glue between datasets, the embedding network, matching and evaluation.

Everything here works from a loaded ``DatasetManifest``; the CLI and the
ablation harness are thin wrappers around these functions.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache, partial
from typing import Mapping, Sequence

import numpy as np

from .datasets import (
    DatasetManifest,
    DetectorSimParams,
    FalsePositive,
    collect_fp_negatives,
    simulate_detector,
)
from .embednet import ItemSet, Network
from .evaluation import (
    Detection,
    EvalReport,
    GroundTruthBox,
    image_based_ap,
    voc_detection_ap,
)
from .matching import LogoIndex, build_index, calibrate_threshold, label_detections, match_top_k
from .preprocess import AugmentConfig, crop_box, read_ppm, test_transform, to_network_input, train_transform
from .sampler import NEGATIVE_ONLY_CLASS


@lru_cache(maxsize=4096)
def _read(path: str) -> np.ndarray:
    img = read_ppm(path)
    img.setflags(write=False)
    return img


def load_image(manifest: DatasetManifest, rel: str) -> np.ndarray:
    return _read(str(manifest.root / rel))


def _train_vector(img, rng, aug: AugmentConfig):
    return to_network_input(train_transform(img, aug, rng))


def test_vectors(images: Sequence[np.ndarray], aug: AugmentConfig) -> np.ndarray:
    return np.stack([to_network_input(test_transform(img, aug)) for img in images])


test_vectors.__test__ = False


def split_items(manifest: DatasetManifest, split: str, canonical: bool = True) -> tuple[list[np.ndarray], list[int]]:
    """GT-box crops (and optionally canonical images) of one split, with class ids."""
    images, labels = [], []
    if canonical:
        wanted = set(manifest.classes_in_split(split))
        for c in manifest.canonicals:
            if c.class_id in wanted:
                for p in c.paths:
                    images.append(load_image(manifest, p))
                    labels.append(c.class_id)
    for rec in manifest.images_in_split(split):
        scene = load_image(manifest, rec.path)
        for b in rec.boxes:
            images.append(crop_box(scene, b.box))
            labels.append(b.class_id)
    return images, labels


def fp_negative_crops(manifest: DatasetManifest, fps: Sequence[FalsePositive]) -> list[np.ndarray]:
    by_id = {r.image_id: r for r in manifest.images}
    return [crop_box(load_image(manifest, by_id[fp.image_id].path), fp.box) for fp in fps]


def training_set(
    manifest: DatasetManifest,
    aug: AugmentConfig,
    split: str = "train",
    fp_negatives: bool = True,
    seed: int = 0,
) -> ItemSet:
    images, labels = split_items(manifest, split)
    if fp_negatives:
        cands = simulate_detector(manifest, DetectorSimParams(), np.random.default_rng([seed, 7]), split)
        crops = fp_negative_crops(manifest, collect_fp_negatives(manifest, cands))
        images += crops
        labels += [NEGATIVE_ONLY_CLASS] * len(crops)
    return ItemSet(images, labels, partial(_train_vector, aug=aug))


def validation_set(manifest: DatasetManifest, aug: AugmentConfig, split: str = "val") -> tuple[np.ndarray, np.ndarray]:
    images, labels = split_items(manifest, split)
    return test_vectors(images, aug), np.asarray(labels)


def logo_index(net: Network, manifest: DatasetManifest, classes: Sequence[int], aug: AugmentConfig) -> LogoIndex:
    entries = []
    names = {}
    wanted = set(classes)
    for c in manifest.canonicals:
        if c.class_id not in wanted:
            continue
        names[c.class_id] = c.class_name
        vecs = test_vectors([load_image(manifest, p) for p in c.paths], aug)
        for image_id, e in zip(c.image_ids(), net.embed(vecs)):
            entries.append((c.class_id, image_id, e))
    return build_index(entries, names)


def gt_candidates(manifest: DatasetManifest, split: str | None) -> dict[str, list[Detection]]:
    return {r.image_id: [Detection(b.box, 1.0) for b in r.boxes] for r in manifest.images_in_split(split)}


def embed_candidates(
    net: Network,
    manifest: DatasetManifest,
    candidates: Mapping[str, Sequence[Detection]],
    aug: AugmentConfig,
) -> dict[str, np.ndarray]:
    by_id = {r.image_id: r for r in manifest.images}
    out = {}
    for image_id, dets in candidates.items():
        if not dets:
            out[image_id] = np.zeros((0, net.config.embedding_dim))
            continue
        scene = load_image(manifest, by_id[image_id].path)
        out[image_id] = net.embed(test_vectors([crop_box(scene, d.box) for d in dets], aug))
    return out


@dataclass
class MatchedCandidates:
    """Top-1 match of every candidate, before thresholding."""

    candidates: dict[str, list[Detection]]
    top1: dict[str, list]  # image -> [MatchResult, ...]

    def detections(self, threshold: float) -> dict[str, list[Detection]]:
        out = {}
        for image_id, dets in self.candidates.items():
            out[image_id] = [
                Detection(d.box, m.similarity, m.class_id)
                for d, m in zip(dets, self.top1[image_id])
                if m.similarity >= threshold
            ]
        return out


def match_candidates(
    net: Network,
    index: LogoIndex,
    manifest: DatasetManifest,
    candidates: Mapping[str, Sequence[Detection]],
    aug: AugmentConfig,
) -> MatchedCandidates:
    emb = embed_candidates(net, manifest, candidates, aug)
    top1 = {i: [match_top_k(index, e, 1)[0] for e in emb[i]] for i in candidates}
    return MatchedCandidates({i: list(d) for i, d in candidates.items()}, top1)


def detect(
    net: Network,
    index: LogoIndex,
    manifest: DatasetManifest,
    candidates: Mapping[str, Sequence[Detection]],
    aug: AugmentConfig,
    threshold: float,
) -> dict[str, list[Detection]]:
    emb = embed_candidates(net, manifest, candidates, aug)
    out = {}
    for image_id, dets in candidates.items():
        labeled = label_detections(index, emb[image_id], threshold)
        out[image_id] = [Detection(dets[l.candidate].box, l.match.similarity, l.match.class_id) for l in labeled]
    return out


def ground_truth(manifest: DatasetManifest, split: str | None) -> dict[str, list[GroundTruthBox]]:
    return {r.image_id: [GroundTruthBox(b.box, b.class_id) for b in r.boxes] for r in manifest.images_in_split(split)}


def evaluate_detections(
    manifest: DatasetManifest,
    split: str | None,
    detections: Mapping[str, Sequence[Detection]],
    iou_threshold: float = 0.5,
) -> dict[str, EvalReport]:
    gt = ground_truth(manifest, split)
    dets = {i: list(detections.get(i, ())) for i in gt}
    labels = {i: [g.class_id for g in boxes] for i, boxes in gt.items()}
    return {
        "bbox": voc_detection_ap(dets, gt, iou_threshold, class_aware=True),
        "image": image_based_ap(dets, labels),
        "generic": voc_detection_ap(dets, gt, iou_threshold, class_aware=False),
    }


def top1_accuracy(matched: MatchedCandidates, manifest: DatasetManifest) -> float:
    """Fraction of GT-box candidates whose top-1 class is correct."""
    by_id = {r.image_id: r for r in manifest.images}
    hits = total = 0
    for image_id, matches in matched.top1.items():
        for g, m in zip(by_id[image_id].boxes, matches):
            total += 1
            hits += int(g.class_id == m.class_id)
    return hits / total if total else 0.0


def calibrate(manifest: DatasetManifest, split: str, matched: MatchedCandidates) -> tuple[float, float]:
    """Threshold on the 101-point grid maximising bbox-based mAP on ``split``."""
    return calibrate_threshold(lambda t: evaluate_detections(manifest, split, matched.detections(t))["bbox"].mean_ap)
