"""Noisy-label detection by inconsistency ranking.

Two per-utterance inconsistency scores over a trained embedder:

* intra-class: one minus the cosine between an utterance's embedding and
  the mean embedding (centroid) of its observed class;
* inter-class: one minus the classifier's confidence in the observed
  label (for GE2E, a classifier is built from the class centroids).

Scores are ranked dataset-wide, the top q% largest are predicted noisy,
and the prediction is compared against ground-truth flags to obtain
precision (and recall as an added diagnostic).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from .embedder import TrainedModel, embed_batch
from .errors import ConfigurationError, InternalError
from .jsonutil import dump_json17
from .losses import GE2EConfig, classify_confidence
from .numerics import softmax
from .synthdata import Dataset

logger = logging.getLogger(__name__)

METHOD_INTRA = "intra"
METHOD_INTER = "inter"

# Raw cosines live in [-1, 1]; softmax at temperature 1 over many classes
# is nearly uniform there, so the centroid classifier sharpens by default.
DEFAULT_CENTROID_TEMPERATURE = 0.1

MAX_INTRA_SCORE = 2.0
MAX_INTER_SCORE = 1.0


@dataclass
class CentroidBank:
    """Mean embedding and member count per observed class."""

    centroids: dict[int, np.ndarray]
    counts: dict[int, int]
    embed_dim: int
    skipped_classes: list[int]


@dataclass(frozen=True)
class InconsistencyScore:
    utt_id: int
    score: float
    method: str


@dataclass
class DetectionResult:
    predicted_noisy: set[int]
    q_used: float
    precision: float | None = None
    recall: float | None = None

    @property
    def selected_count(self) -> int:
        return len(self.predicted_noisy)


def embed_dataset(model: TrainedModel, ds: Dataset) -> np.ndarray:
    """Embeddings for every utterance, in dataset order."""
    feats = np.stack([u.features for u in ds.utterances])
    return embed_batch(model.embedder, feats)


def compute_centroids(model: TrainedModel, ds: Dataset,
                      embeddings: np.ndarray | None = None) -> CentroidBank:
    """Arithmetic mean of embeddings per observed class, noisy ones included.

    Classes with no utterances are excluded and recorded in
    ``skipped_classes``. ``embeddings`` may be passed to reuse a
    previously computed embedding matrix (dataset order).
    """
    emb = embed_dataset(model, ds) if embeddings is None else embeddings
    groups = ds.ids_by_observed_class()
    centroids: dict[int, np.ndarray] = {}
    counts: dict[int, int] = {}
    for c in sorted(groups):
        pos = groups[c]
        centroids[c] = emb[pos].mean(axis=0)
        counts[c] = len(pos)
    skipped = [c for c in range(ds.class_count) if c not in groups]
    if skipped:
        logger.warning("centroid bank: %d empty class(es) excluded: %s", len(skipped), skipped)
    return CentroidBank(
        centroids=centroids,
        counts=counts,
        embed_dim=emb.shape[1],
        skipped_classes=skipped,
    )


def intra_inconsistency(model: TrainedModel, ds: Dataset, bank: CentroidBank,
                        embeddings: np.ndarray | None = None) -> list[InconsistencyScore]:
    """1 - cos(embedding, own observed-class centroid) per utterance.

    A zero-norm embedding or centroid yields the maximal score 2.0 with a
    warning rather than failing the run: a degenerate embedding is itself
    maximally inconsistent evidence.
    """
    emb = embed_dataset(model, ds) if embeddings is None else embeddings
    scores: list[InconsistencyScore] = []
    for i, u in enumerate(ds.utterances):
        x = emb[i]
        c = bank.centroids.get(u.observed_class)
        xn = np.linalg.norm(x)
        cn = 0.0 if c is None else np.linalg.norm(c)
        if c is None or xn == 0.0 or cn == 0.0:
            logger.warning(
                "utterance %d: degenerate embedding/centroid, assigning maximal "
                "intra-class score", u.utt_id,
            )
            s = MAX_INTRA_SCORE
        else:
            cos = float(np.dot(x, c) / (xn * cn))
            s = 1.0 - min(1.0, max(-1.0, cos))
        scores.append(InconsistencyScore(utt_id=u.utt_id, score=s, method=METHOD_INTRA))
    return scores


class ParametricClassifier:
    """Confidence from trained CE/AAM/AAMSC parameters, margin and scale off."""

    def __init__(self, model: TrainedModel):
        if isinstance(model.loss_config, GE2EConfig):
            raise ConfigurationError("GE2E models need the centroid classifier")
        self._params = model.classifier
        self._cfg = model.loss_config
        self.class_ids = list(range(model.loss_config.class_count))

    def confidences(self, x: np.ndarray) -> np.ndarray:
        return classify_confidence(x, self._params, self._cfg)


class CentroidClassifier:
    """Softmax over cosine(x, class centroid) / temperature."""

    def __init__(self, class_ids: list[int], directions: np.ndarray, temperature: float):
        self.class_ids = class_ids
        self._directions = directions  # unit rows
        self._temperature = temperature

    def confidences(self, x: np.ndarray) -> np.ndarray:
        norm = np.linalg.norm(x)
        if norm == 0.0:
            raise ConfigurationError("zero-norm embedding has no confidence")
        cos = np.clip(self._directions @ (x / norm), -1.0, 1.0)
        return softmax(cos / self._temperature)


def build_centroid_classifier(bank: CentroidBank,
                              temperature: float = DEFAULT_CENTROID_TEMPERATURE
                              ) -> CentroidClassifier:
    """Manually constructed classifier from class centroids (GE2E path)."""
    if temperature <= 0:
        raise ConfigurationError(f"temperature must be positive, got {temperature}")
    if not bank.centroids:
        raise ConfigurationError("centroid bank is empty")
    ids, rows = [], []
    for c in sorted(bank.centroids):
        v = bank.centroids[c]
        n = np.linalg.norm(v)
        if n == 0.0:
            logger.warning("centroid classifier: class %d has zero-norm centroid, excluded", c)
            continue
        ids.append(c)
        rows.append(v / n)
    if not ids:
        raise ConfigurationError("all centroids have zero norm")
    return CentroidClassifier(class_ids=ids, directions=np.stack(rows), temperature=temperature)


def make_inter_classifier(model: TrainedModel, ds: Dataset,
                          temperature: float = DEFAULT_CENTROID_TEMPERATURE,
                          embeddings: np.ndarray | None = None):
    """The inter-class confidence source for a model: parametric for
    CE/AAM/AAMSC, centroid-built for GE2E."""
    if isinstance(model.loss_config, GE2EConfig):
        bank = compute_centroids(model, ds, embeddings=embeddings)
        return build_centroid_classifier(bank, temperature)
    return ParametricClassifier(model)


def inter_inconsistency(model: TrainedModel, ds: Dataset, classifier,
                        embeddings: np.ndarray | None = None) -> list[InconsistencyScore]:
    """1 - confidence in the observed label, per utterance.

    Evaluates both the masked-minimum form (min over classes of
    1 - onehot * p) and its scalar reduction and checks they agree; a
    classifier output that does not sum to 1 is an internal error.
    """
    emb = embed_dataset(model, ds) if embeddings is None else embeddings
    index_of = {c: i for i, c in enumerate(classifier.class_ids)}
    scores: list[InconsistencyScore] = []
    for i, u in enumerate(ds.utterances):
        x = emb[i]
        if np.linalg.norm(x) == 0.0 or u.observed_class not in index_of:
            logger.warning(
                "utterance %d: no usable confidence (degenerate embedding or "
                "missing class), assigning maximal inter-class score", u.utt_id,
            )
            scores.append(InconsistencyScore(utt_id=u.utt_id, score=MAX_INTER_SCORE,
                                             method=METHOD_INTER))
            continue
        p = classifier.confidences(x)
        if abs(float(np.sum(p)) - 1.0) > 1e-6:
            raise InternalError(
                f"classifier output sums to {float(np.sum(p))!r}, expected 1"
            )
        onehot = np.zeros_like(p)
        onehot[index_of[u.observed_class]] = 1.0
        masked_min = float(np.min(1.0 - onehot * p))
        reduced = 1.0 - float(p[index_of[u.observed_class]])
        if abs(masked_min - reduced) > 1e-15:
            raise InternalError(
                f"masked-minimum form ({masked_min!r}) disagrees with its "
                f"reduction ({reduced!r})"
            )
        scores.append(InconsistencyScore(utt_id=u.utt_id, score=reduced, method=METHOD_INTER))
    return scores


def rank_and_select(scores: list[InconsistencyScore], q: float, dataset_size: int
                    ) -> DetectionResult:
    """Predict the ceil(q/100 * n) utterances with the largest scores.

    Boundary ties break toward ascending utt_id. ``q = 0`` produces an
    empty (valid) prediction.
    """
    if not 0.0 <= q <= 100.0:
        raise ConfigurationError(f"q must be in [0, 100], got {q}")
    if len(scores) != dataset_size:
        raise ConfigurationError(
            f"expected one score per utterance ({dataset_size}), got {len(scores)}"
        )
    if q == 0.0:
        return DetectionResult(predicted_noisy=set(), q_used=q)
    # tiny slack keeps ceil() immune to float round-up on exact multiples
    k = math.ceil(q * dataset_size / 100.0 - 1e-9)
    ranked = sorted(scores, key=lambda s: (-s.score, s.utt_id))
    return DetectionResult(predicted_noisy={s.utt_id for s in ranked[:k]}, q_used=q)


def detection_precision(result: DetectionResult, ds: Dataset) -> DetectionResult:
    """Fill in precision (and recall) against the dataset's ground truth."""
    noisy = ds.noisy_ids()
    hit = len(result.predicted_noisy & noisy)
    precision = hit / len(result.predicted_noisy) if result.predicted_noisy else None
    recall = hit / len(noisy) if noisy else None
    return replace(result, precision=precision, recall=recall)


def export_score_histogram(scores: list[InconsistencyScore], ds: Dataset, bins: int
                           ) -> list[tuple[float, float, int, int]]:
    """Min-max normalize scores to [0, 1] and count clean/noisy per bin.

    Bins are right-closed ((lo, hi], with 0 falling into the first bin).
    Identical scores degenerate to a single all-containing bin, with a
    warning.
    """
    if bins < 2:
        raise ConfigurationError(f"need at least 2 bins, got {bins}")
    noisy_by_id = {u.utt_id: u.is_noisy for u in ds.utterances}
    values = np.asarray([s.score for s in scores], dtype=np.float64)
    flags = np.asarray([noisy_by_id[s.utt_id] for s in scores], dtype=bool)
    lo, hi = float(values.min()), float(values.max())
    if hi == lo:
        logger.warning("all %d scores identical (%.6g); emitting a single bin", len(scores), lo)
        return [(0.0, 1.0, int(np.sum(~flags)), int(np.sum(flags)))]
    norm = (values - lo) / (hi - lo)
    idx = np.clip(np.ceil(norm * bins).astype(int) - 1, 0, bins - 1)
    rows = []
    for b in range(bins):
        in_bin = idx == b
        rows.append(
            (b / bins, (b + 1) / bins, int(np.sum(in_bin & ~flags)), int(np.sum(in_bin & flags)))
        )
    return rows


def write_scores_csv(scores: list[InconsistencyScore], ds: Dataset, path) -> None:
    """CSV columns: utt_id,method,score,is_noisy_truth (sorted by utt_id)."""
    noisy_by_id = {u.utt_id: u.is_noisy for u in ds.utterances}
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("utt_id,method,score,is_noisy_truth\n")
        for s in sorted(scores, key=lambda s: s.utt_id):
            fh.write(
                "%d,%s,%s,%s\n"
                % (s.utt_id, s.method, format(s.score, ".17g"),
                   "true" if noisy_by_id[s.utt_id] else "false")
            )


def write_detection_json(result: DetectionResult, method: str, seed: int,
                         config_digest: str, path) -> None:
    payload = {
        "method": method,
        "q": result.q_used,
        "selected_count": result.selected_count,
        "precision": result.precision,
        "recall": result.recall,
        "seed": seed,
        "config_digest": config_digest,
        "predicted_noisy": sorted(result.predicted_noisy),
    }
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(dump_json17(payload))
        fh.write("\n")


def write_histogram_csv(rows: list[tuple[float, float, int, int]], path) -> None:
    """CSV columns: bin_lo,bin_hi,clean_count,noisy_count."""
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("bin_lo,bin_hi,clean_count,noisy_count\n")
        for lo, hi, clean, noisy in rows:
            fh.write("%s,%s,%d,%d\n" % (format(lo, ".17g"), format(hi, ".17g"), clean, noisy))
