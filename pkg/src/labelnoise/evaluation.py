"""Verification-style evaluation: trial generation, EER, and retraining.

A trained embedder is scored on a held-out dataset via cosine similarity
over enroll/test utterance pairs. The equal error rate is found by
sweeping every distinct score as a threshold and linearly interpolating
between the two adjacent operating points where FAR - FRR changes sign.

``retrain_after_removal`` closes the loop: drop the utterances a
detection pass flagged, retrain with the same configuration and seed,
and compare held-out EER before and after.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from .embedder import TrainConfig, TrainedModel, embed_batch, train
from .errors import ConfigurationError, DomainError, ParseError
from .jsonutil import dump_json17
from .seeding import named_rng
from .synthdata import Dataset

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Trial:
    enroll_utt_id: int
    test_utt_id: int
    is_target: bool


@dataclass(frozen=True)
class EERResult:
    eer: float
    threshold_at_eer: float
    trial_count: int


@dataclass
class RetrainOutcome:
    before: EERResult
    after: EERResult
    removed_count: int
    dropped_classes: list[int]
    before_model: TrainedModel
    after_model: TrainedModel


def generate_trials(ds: Dataset, pairs_per_kind: int, seed: int) -> list[Trial]:
    """Sample balanced target/nontarget utterance pairs from a clean dataset.

    Targets are drawn without replacement from all same-class pairs;
    nontargets are rejection-sampled cross-class pairs, also distinct.
    Raises ConfigurationError when the dataset cannot supply enough of
    either kind.
    """
    if pairs_per_kind < 1:
        raise ConfigurationError(f"pairs_per_kind must be >= 1, got {pairs_per_kind}")
    if not ds.is_clean:
        raise ConfigurationError("trials must come from a clean dataset")
    rng = named_rng(seed, "trials")

    groups = ds.ids_by_observed_class()
    ids = [u.utt_id for u in ds.utterances]
    target_pool: list[tuple[int, int]] = []
    for c in sorted(groups):
        members = sorted(ds.utterances[p].utt_id for p in groups[c])
        for i in range(len(members)):
            for j in range(i + 1, len(members)):
                target_pool.append((members[i], members[j]))
    if len(target_pool) < pairs_per_kind:
        raise ConfigurationError(
            f"dataset supplies only {len(target_pool)} same-class pairs, "
            f"need {pairs_per_kind}"
        )
    n = len(ids)
    cross_total = n * (n - 1) // 2 - len(target_pool)
    if cross_total < pairs_per_kind:
        raise ConfigurationError(
            f"dataset supplies only {cross_total} cross-class pairs, "
            f"need {pairs_per_kind}"
        )

    pick = rng.choice(len(target_pool), size=pairs_per_kind, replace=False)
    trials = [Trial(*target_pool[int(i)], is_target=True) for i in sorted(pick)]

    class_of = {u.utt_id: u.observed_class for u in ds.utterances}
    seen: set[tuple[int, int]] = set()
    while len(seen) < pairs_per_kind:
        a, b = int(rng.integers(n)), int(rng.integers(n))
        if a == b:
            continue
        pair = (ids[min(a, b)], ids[max(a, b)])
        if class_of[pair[0]] == class_of[pair[1]] or pair in seen:
            continue
        seen.add(pair)
    trials.extend(Trial(e, t, is_target=False) for e, t in sorted(seen))
    return trials


def score_trials(model: TrainedModel, trials: list[Trial], ds: Dataset
                 ) -> tuple[np.ndarray, np.ndarray, int]:
    """Cosine score per trial; returns (scores, is_target, dropped_count).

    Trials whose enroll or test embedding has zero norm are dropped with
    a warning rather than given an arbitrary score.
    """
    feats = np.stack([u.features for u in ds.utterances])
    emb = embed_batch(model.embedder, feats)
    row_of = {u.utt_id: i for i, u in enumerate(ds.utterances)}
    missing = [t for t in trials if t.enroll_utt_id not in row_of or t.test_utt_id not in row_of]
    if missing:
        raise ConfigurationError(
            f"{len(missing)} trial(s) reference utterances absent from the dataset, "
            f"first: {missing[0]}"
        )
    norms = np.linalg.norm(emb, axis=1)
    scores, labels, dropped = [], [], 0
    for t in trials:
        i, j = row_of[t.enroll_utt_id], row_of[t.test_utt_id]
        if norms[i] == 0.0 or norms[j] == 0.0:
            dropped += 1
            continue
        cos = float(np.dot(emb[i], emb[j]) / (norms[i] * norms[j]))
        scores.append(min(1.0, max(-1.0, cos)))
        labels.append(t.is_target)
    if dropped:
        logger.warning("dropped %d trial(s) with zero-norm embeddings", dropped)
    return np.asarray(scores, dtype=np.float64), np.asarray(labels, dtype=bool), dropped


def compute_eer(scores: np.ndarray, is_target: np.ndarray) -> EERResult:
    """Equal error rate by threshold sweep with linear interpolation.

    ``FAR(t)`` is the fraction of nontarget scores >= t and ``FRR(t)``
    the fraction of target scores < t; both are evaluated at every
    distinct score (plus a sentinel above the maximum, where FAR = 0 and
    FRR = 1). Perfect separation yields exactly 0.0; an EER above 0.5
    (inverted scorer) is reported as-is with a warning.
    """
    scores = np.asarray(scores, dtype=np.float64)
    is_target = np.asarray(is_target, dtype=bool)
    if scores.shape != is_target.shape or scores.ndim != 1:
        raise DomainError("scores and is_target must be equal-length 1-D arrays")
    tar = np.sort(scores[is_target])
    non = np.sort(scores[~is_target])
    if tar.size == 0 or non.size == 0:
        raise DomainError("EER needs at least one target and one nontarget trial")
    thresholds = np.unique(scores)
    if thresholds.size < 2:
        raise DomainError("EER is undefined when every trial has the same score")
    thresholds = np.append(thresholds, thresholds[-1] + 1.0)

    far = 1.0 - np.searchsorted(non, thresholds, side="left") / non.size
    frr = np.searchsorted(tar, thresholds, side="left") / tar.size
    diff = far - frr
    # diff starts at 1 (threshold at the global minimum) and ends at -1
    # (sentinel), so a sign change always exists.
    k = int(np.argmax(diff <= 0.0))
    if diff[k] == 0.0:
        eer, thr = float(far[k]), float(thresholds[k])
    else:
        alpha = diff[k - 1] / (diff[k - 1] - diff[k])
        eer = float(far[k - 1] + alpha * (far[k] - far[k - 1]))
        thr = float(thresholds[k - 1] + alpha * (thresholds[k] - thresholds[k - 1]))
    if eer > 0.5:
        logger.warning("EER %.4f exceeds 0.5: the scorer ranks nontargets above targets", eer)
    return EERResult(eer=eer, threshold_at_eer=thr, trial_count=int(scores.size))


def evaluate_model(model: TrainedModel, heldout: Dataset, trials: list[Trial]) -> EERResult:
    scores, labels, _ = score_trials(model, trials, heldout)
    return compute_eer(scores, labels)


def remove_predicted(ds: Dataset, predicted: set[int]) -> Dataset:
    """Dataset minus the predicted-noisy utterances (same metadata)."""
    kept = [u for u in ds.utterances if u.utt_id not in predicted]
    if not kept:
        raise ConfigurationError("removal would leave an empty dataset")
    return Dataset(
        utterances=kept,
        class_count=ds.class_count,
        feature_dim=ds.feature_dim,
        provenance=ds.provenance,
        class_specs=ds.class_specs,
    )


def retrain_after_removal(ds: Dataset, predicted: set[int], cfg: TrainConfig,
                          heldout: Dataset, trials: list[Trial],
                          before_model: TrainedModel | None = None) -> RetrainOutcome:
    """Train (or reuse) a model on ``ds``, retrain on ``ds`` minus the
    predicted-noisy utterances with identical config and seed, and report
    held-out EER for both on the same trials.

    Classes left with fewer than ``utts_per_speaker`` utterances are
    dropped from sampling; if fewer than ``batch_speakers`` classes stay
    eligible, the retrain batch width is clamped down with a warning.
    """
    filtered = remove_predicted(ds, predicted)
    removed = len(ds) - len(filtered)

    sizes: dict[int, int] = {}
    for u in filtered.utterances:
        sizes[u.observed_class] = sizes.get(u.observed_class, 0) + 1
    observed = {u.observed_class for u in ds.utterances}
    eligible_classes = {c for c, k in sizes.items() if k >= cfg.utts_per_speaker}
    dropped = sorted(observed - eligible_classes)
    if dropped:
        logger.warning("removal left %d class(es) below %d utterance(s): %s",
                       len(dropped), cfg.utts_per_speaker, dropped)
    eligible = len(eligible_classes)
    cfg_after = cfg
    if eligible < cfg.batch_speakers:
        logger.warning("clamping batch classes from %d to %d eligible after removal",
                       cfg.batch_speakers, eligible)
        cfg_after = replace(cfg, batch_speakers=eligible)

    if before_model is None:
        before_model, _ = train(ds, cfg)
    after_model, _ = train(filtered, cfg_after)
    return RetrainOutcome(
        before=evaluate_model(before_model, heldout, trials),
        after=evaluate_model(after_model, heldout, trials),
        removed_count=removed,
        dropped_classes=dropped,
        before_model=before_model,
        after_model=after_model,
    )


def write_trials_csv(trials: list[Trial], path) -> None:
    """CSV columns: enroll_id,test_id,is_target."""
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("enroll_id,test_id,is_target\n")
        for t in trials:
            fh.write("%d,%d,%s\n" % (t.enroll_utt_id, t.test_utt_id,
                                     "true" if t.is_target else "false"))


def read_trials_csv(path) -> list[Trial]:
    trials: list[Trial] = []
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().rstrip("\n")
        if header != "enroll_id,test_id,is_target":
            raise ParseError(f"{path}: unexpected trials header {header!r}")
        for lineno, line in enumerate(fh, start=2):
            parts = line.rstrip("\n").split(",")
            if len(parts) != 3 or parts[2] not in ("true", "false"):
                raise ParseError(f"{path}:{lineno}: malformed trial row {line!r}")
            try:
                enroll, test = int(parts[0]), int(parts[1])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: non-integer utterance id") from exc
            trials.append(Trial(enroll, test, is_target=parts[2] == "true"))
    return trials


def write_eer_json(result: EERResult, model_digest: str, path) -> None:
    payload = {
        "eer": result.eer,
        "threshold": result.threshold_at_eer,
        "trial_count": result.trial_count,
        "model_digest": model_digest,
    }
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(dump_json17(payload))
        fh.write("\n")


def write_retrain_json(outcome: RetrainOutcome, method: str, seed: int,
                       config_digest: str, path) -> None:
    payload = {
        "detection_method": method,
        "seed": seed,
        "config_digest": config_digest,
        "removed_count": outcome.removed_count,
        "dropped_classes": outcome.dropped_classes,
        "before": {"eer": outcome.before.eer,
                   "threshold": outcome.before.threshold_at_eer,
                   "trial_count": outcome.before.trial_count},
        "after": {"eer": outcome.after.eer,
                  "threshold": outcome.after.threshold_at_eer,
                  "trial_count": outcome.after.trial_count},
    }
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(dump_json17(payload))
        fh.write("\n")
