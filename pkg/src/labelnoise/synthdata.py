"""Synthetic labeled datasets and label-noise injection.

A dataset is a set of feature vectors with class labels. Each class owns a
unit latent direction on the sphere; an utterance's features are a fixed
random linear mix of (direction + isotropic Gaussian jitter). Two noise
models corrupt a clean dataset:

* permute noise: an utterance keeps its features but its observed label is
  replaced by a uniformly random *different* class;
* open-set noise: an utterance keeps its label but its features are
  replaced by those of an utterance from an auxiliary dataset whose
  classes do not overlap the main dataset's.

Datasets serialize to JSON-Lines with a header line; feature values are
written with 17 significant digits so the round trip is lossless.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigurationError, ParseError, ValidationError
from .seeding import named_rng

FORMAT_VERSION = 1

# Rejection threshold used to keep auxiliary class directions away from
# in-distribution ones ("no class overlap").
MAX_OVERLAP_COS = 0.95

# Default within-class jitter scale: small enough that classes are
# learnable at desk scale, large enough that clean utterances are not
# trivially separable from label noise.
DEFAULT_WITHIN_CLASS_SPREAD = 0.2

PERMUTE = "permute"
OPEN_SET = "open_set"


class Origin(enum.Enum):
    IN_DISTRIBUTION = "in_distribution"
    OUT_OF_DISTRIBUTION = "out_of_distribution"


@dataclass(frozen=True)
class NoiseSpec:
    """How a dataset was (or should be) corrupted."""

    kind: str
    level_q: float
    seed: int

    def __post_init__(self):
        if self.kind not in (PERMUTE, OPEN_SET):
            raise ConfigurationError(f"unknown noise kind {self.kind!r}")
        if not 0.0 <= self.level_q <= 100.0:
            raise ConfigurationError(f"noise level must be in [0, 100], got {self.level_q}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "level_q": self.level_q, "seed": self.seed}

    @staticmethod
    def from_dict(d: dict) -> "NoiseSpec":
        return NoiseSpec(kind=d["kind"], level_q=float(d["level_q"]), seed=int(d["seed"]))


@dataclass(frozen=True)
class ClassSpec:
    """A class identity with its latent unit direction."""

    class_id: int
    latent_direction: np.ndarray


@dataclass
class Utterance:
    """One sample: features plus true/observed labels and noise provenance."""

    utt_id: int
    features: np.ndarray
    true_class: int
    observed_class: int
    is_noisy: bool = False
    origin: Origin = Origin.IN_DISTRIBUTION

    def __eq__(self, other):
        if not isinstance(other, Utterance):
            return NotImplemented
        return (
            self.utt_id == other.utt_id
            and self.true_class == other.true_class
            and self.observed_class == other.observed_class
            and self.is_noisy == other.is_noisy
            and self.origin == other.origin
            and np.array_equal(self.features, other.features)
        )


@dataclass
class Dataset:
    """A sequence of utterances with class count and feature dimension.

    ``class_specs`` carries the latent directions when the dataset was
    generated in-process; it does not survive serialization and is
    excluded from equality.
    """

    utterances: list[Utterance]
    class_count: int
    feature_dim: int
    provenance: NoiseSpec | str = "clean"
    class_specs: list[ClassSpec] | None = field(default=None, compare=False)

    def __len__(self) -> int:
        return len(self.utterances)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.class_count == other.class_count
            and self.feature_dim == other.feature_dim
            and self.provenance == other.provenance
            and self.utterances == other.utterances
        )

    @property
    def is_clean(self) -> bool:
        return self.provenance == "clean" and not any(u.is_noisy for u in self.utterances)

    def noisy_ids(self) -> set[int]:
        return {u.utt_id for u in self.utterances if u.is_noisy}

    def ids_by_observed_class(self) -> dict[int, list[int]]:
        """Observed class -> positions (not utt_ids) of its members, in order."""
        groups: dict[int, list[int]] = {}
        for pos, u in enumerate(self.utterances):
            groups.setdefault(u.observed_class, []).append(pos)
        return groups


def sample_unit_directions(
    count: int,
    dim: int,
    rng: np.random.Generator,
    avoid: np.ndarray | None = None,
    max_abs_cos: float = MAX_OVERLAP_COS,
    max_tries: int = 10000,
) -> np.ndarray:
    """Draw ``count`` unit vectors uniformly on the sphere.

    When ``avoid`` (rows of unit vectors) is given, candidates with
    |cosine| above ``max_abs_cos`` to any avoided direction are redrawn.
    """
    out = np.empty((count, dim), dtype=np.float64)
    for i in range(count):
        for _ in range(max_tries):
            v = rng.standard_normal(dim)
            n = np.linalg.norm(v)
            if n < 1e-12:
                continue
            v /= n
            if avoid is not None and avoid.size and np.max(np.abs(avoid @ v)) > max_abs_cos:
                continue
            out[i] = v
            break
        else:
            raise ConfigurationError(
                f"could not place class direction {i} away from {len(avoid)} "
                f"existing directions after {max_tries} tries"
            )
    return out


def generate_dataset(
    class_count: int,
    per_class: int,
    latent_dim: int,
    feature_dim: int,
    within_class_spread: float,
    seed: int,
    *,
    mix_seed: int | None = None,
    avoid_directions: np.ndarray | None = None,
) -> Dataset:
    """Generate a clean dataset of ``class_count * per_class`` utterances.

    Each class gets a unit latent direction; utterance features are
    ``Mix @ (direction + eps)`` with isotropic Gaussian ``eps`` of standard
    deviation ``within_class_spread`` and one fixed random mixing matrix.
    ``mix_seed`` pins the mixing matrix independently of ``seed`` so that
    related datasets (auxiliary, held-out) can share the same feature
    space; by default it is derived from ``seed``. ``avoid_directions``
    makes the direction sampler reject candidates that nearly coincide
    with the given unit rows.
    """
    if class_count < 2:
        raise ConfigurationError(f"need at least 2 classes, got {class_count}")
    if per_class < 2:
        raise ConfigurationError(f"need at least 2 utterances per class, got {per_class}")
    if feature_dim < latent_dim:
        raise ConfigurationError(
            f"feature_dim ({feature_dim}) must be >= latent_dim ({latent_dim})"
        )
    if latent_dim < 1:
        raise ConfigurationError(f"latent_dim must be positive, got {latent_dim}")
    if within_class_spread < 0:
        raise ConfigurationError(f"within_class_spread must be >= 0, got {within_class_spread}")

    rng_dirs = named_rng(seed, "class-directions")
    rng_mix = named_rng(seed if mix_seed is None else mix_seed, "mixing-matrix")
    rng_feat = named_rng(seed, "feature-jitter")

    directions = sample_unit_directions(class_count, latent_dim, rng_dirs, avoid=avoid_directions)
    mix = rng_mix.standard_normal((feature_dim, latent_dim)) / math.sqrt(latent_dim)

    utterances: list[Utterance] = []
    specs: list[ClassSpec] = []
    utt_id = 0
    for c in range(class_count):
        specs.append(ClassSpec(class_id=c, latent_direction=directions[c]))
        eps = rng_feat.standard_normal((per_class, latent_dim)) * within_class_spread
        feats = (directions[c] + eps) @ mix.T
        for row in feats:
            utterances.append(
                Utterance(utt_id=utt_id, features=row, true_class=c, observed_class=c)
            )
            utt_id += 1
    return Dataset(
        utterances=utterances,
        class_count=class_count,
        feature_dim=feature_dim,
        provenance="clean",
        class_specs=specs,
    )


def _require_clean(ds: Dataset, op: str) -> None:
    if not ds.is_clean:
        raise ConfigurationError(f"{op} requires a clean dataset, got provenance {ds.provenance!r}")


def apply_permute_noise(ds: Dataset, spec: NoiseSpec) -> Dataset:
    """Flag each utterance with probability q/100 and permute its label.

    Flagged utterances get an observed class drawn uniformly from the
    other ``C - 1`` classes; features are untouched. ``q = 0`` returns the
    input unchanged.
    """
    if spec.kind != PERMUTE:
        raise ConfigurationError(f"expected permute noise spec, got {spec.kind!r}")
    _require_clean(ds, "apply_permute_noise")
    if spec.level_q == 0.0:
        return ds
    if ds.class_count < 2:
        raise ConfigurationError("permute noise needs at least 2 classes")

    rng = named_rng(spec.seed, "permute-noise")
    p = spec.level_q / 100.0
    out: list[Utterance] = []
    for u in ds.utterances:
        if rng.random() < p:
            k = int(rng.integers(ds.class_count - 1))
            if k >= u.true_class:
                k += 1
            out.append(replace(u, observed_class=k, is_noisy=True))
        else:
            out.append(u)
    return Dataset(
        utterances=out,
        class_count=ds.class_count,
        feature_dim=ds.feature_dim,
        provenance=spec,
        class_specs=ds.class_specs,
    )


def apply_openset_noise(ds: Dataset, aux: Dataset, spec: NoiseSpec) -> Dataset:
    """Flag each utterance with probability q/100 and swap in auxiliary features.

    Flagged utterances keep their observed label but take the features of
    a uniformly drawn auxiliary utterance; they are marked out of
    distribution. ``q = 0`` returns the input unchanged.
    """
    if spec.kind != OPEN_SET:
        raise ConfigurationError(f"expected open-set noise spec, got {spec.kind!r}")
    _require_clean(ds, "apply_openset_noise")
    if spec.level_q == 0.0:
        return ds
    if len(aux) == 0:
        raise ConfigurationError("open-set noise needs a non-empty auxiliary dataset")
    if aux.feature_dim != ds.feature_dim:
        raise ConfigurationError(
            f"auxiliary feature_dim {aux.feature_dim} != dataset feature_dim {ds.feature_dim}"
        )
    if ds.class_specs is not None and aux.class_specs is not None:
        d_dirs = np.stack([s.latent_direction for s in ds.class_specs])
        a_dirs = np.stack([s.latent_direction for s in aux.class_specs])
        worst = float(np.max(np.abs(a_dirs @ d_dirs.T)))
        if worst > MAX_OVERLAP_COS:
            raise ConfigurationError(
                f"auxiliary classes overlap the dataset's (max |cos| = {worst:.4f})"
            )

    rng = named_rng(spec.seed, "open-set-noise")
    p = spec.level_q / 100.0
    out: list[Utterance] = []
    for u in ds.utterances:
        if rng.random() < p:
            j = int(rng.integers(len(aux)))
            out.append(
                replace(
                    u,
                    features=aux.utterances[j].features,
                    is_noisy=True,
                    origin=Origin.OUT_OF_DISTRIBUTION,
                )
            )
        else:
            out.append(u)
    return Dataset(
        utterances=out,
        class_count=ds.class_count,
        feature_dim=ds.feature_dim,
        provenance=spec,
        class_specs=ds.class_specs,
    )


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _provenance_json(p: NoiseSpec | str) -> str:
    if isinstance(p, str):
        return json.dumps(p)
    return (
        '{"kind": ' + json.dumps(p.kind)
        + ', "level_q": ' + _fmt(p.level_q)
        + ', "seed": ' + str(p.seed) + "}"
    )


def save_dataset(ds: Dataset, path) -> None:
    """Write JSON-Lines: one header line, then one line per utterance."""
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(
            '{"format_version": %d, "C": %d, "d": %d, "provenance": %s}\n'
            % (FORMAT_VERSION, ds.class_count, ds.feature_dim, _provenance_json(ds.provenance))
        )
        for u in ds.utterances:
            feats = ",".join(_fmt(v) for v in u.features)
            fh.write(
                '{"utt_id": %d, "true_class": %d, "observed_class": %d, '
                '"is_noisy": %s, "origin": "%s", "features": [%s]}\n'
                % (
                    u.utt_id,
                    u.true_class,
                    u.observed_class,
                    "true" if u.is_noisy else "false",
                    u.origin.value,
                    feats,
                )
            )


def _parse_line(text: str, lineno: int) -> dict:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"line {lineno}: {exc.msg}") from exc
    if not isinstance(obj, dict):
        raise ParseError(f"line {lineno}: expected a JSON object")
    return obj


def load_dataset(path) -> Dataset:
    """Read a dataset file, validating structure and invariants."""
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError("line 1: empty file, missing header")

    header = _parse_line(lines[0], 1)
    for key in ("format_version", "C", "d", "provenance"):
        if key not in header:
            raise ParseError(f"line 1: header missing field {key!r}")
    if header["format_version"] != FORMAT_VERSION:
        raise ValidationError(f"unsupported format_version {header['format_version']!r}")
    class_count = int(header["C"])
    feature_dim = int(header["d"])
    prov = header["provenance"]
    if isinstance(prov, dict):
        provenance: NoiseSpec | str = NoiseSpec.from_dict(prov)
    elif prov == "clean":
        provenance = "clean"
    else:
        raise ValidationError(f"unknown provenance {prov!r}")

    utterances: list[Utterance] = []
    seen_ids: set[int] = set()
    origins = {o.value: o for o in Origin}
    for i, text in enumerate(lines[1:], start=2):
        if not text.strip():
            continue
        obj = _parse_line(text, i)
        try:
            utt_id = int(obj["utt_id"])
            true_class = int(obj["true_class"])
            observed = int(obj["observed_class"])
            is_noisy = bool(obj["is_noisy"])
            origin_raw = obj["origin"]
            feats = np.asarray(obj["features"], dtype=np.float64)
        except KeyError as exc:
            raise ParseError(f"line {i}: missing field {exc.args[0]!r}") from exc
        if origin_raw not in origins:
            raise ValidationError(f"line {i}: unknown origin {origin_raw!r}")
        origin = origins[origin_raw]
        if utt_id in seen_ids:
            raise ValidationError(f"line {i}: duplicate utt_id {utt_id}")
        seen_ids.add(utt_id)
        if not 0 <= observed < class_count:
            raise ValidationError(f"line {i}: observed_class {observed} out of [0, {class_count})")
        if not 0 <= true_class < class_count:
            raise ValidationError(f"line {i}: true_class {true_class} out of [0, {class_count})")
        if feats.ndim != 1 or feats.shape[0] != feature_dim:
            raise ValidationError(f"line {i}: expected {feature_dim} features, got shape {feats.shape}")
        if not np.all(np.isfinite(feats)):
            raise ValidationError(f"line {i}: non-finite feature value")
        expected_noisy = (observed != true_class) or (origin is Origin.OUT_OF_DISTRIBUTION)
        if is_noisy != expected_noisy:
            raise ValidationError(f"line {i}: is_noisy flag inconsistent with labels/origin")
        utterances.append(
            Utterance(
                utt_id=utt_id,
                features=feats,
                true_class=true_class,
                observed_class=observed,
                is_noisy=is_noisy,
                origin=origin,
            )
        )
    return Dataset(
        utterances=utterances,
        class_count=class_count,
        feature_dim=feature_dim,
        provenance=provenance,
    )
