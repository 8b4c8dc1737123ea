"""Deterministic JSON serialization and content digests.

All persisted artifacts are written through these helpers so that reruns
with identical inputs produce byte-identical files: keys are sorted and
floats carry 17 significant digits (lossless for 64-bit values).
"""

from __future__ import annotations

import hashlib
import json


def _encode(obj, item_sep=", ", kv_sep=": ") -> str:
    if obj is None:
        return "null"
    if isinstance(obj, bool):
        return "true" if obj else "false"
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, float):
        return format(obj, ".17g")
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, (list, tuple)):
        return "[" + item_sep.join(_encode(v, item_sep, kv_sep) for v in obj) + "]"
    if isinstance(obj, dict):
        items = []
        for key in sorted(obj):
            if not isinstance(key, str):
                raise TypeError(f"JSON object keys must be strings, got {type(key).__name__}")
            items.append(json.dumps(key) + kv_sep + _encode(obj[key], item_sep, kv_sep))
        return "{" + item_sep.join(items) + "}"
    if hasattr(obj, "item") and not hasattr(obj, "__len__"):  # numpy scalar
        return _encode(obj.item(), item_sep, kv_sep)
    if hasattr(obj, "tolist"):  # numpy array
        return _encode(obj.tolist(), item_sep, kv_sep)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dump_json17(obj) -> str:
    """Serialize to JSON with sorted keys and 17-significant-digit floats."""
    return _encode(obj)


def write_json17(obj, path) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(dump_json17(obj))
        fh.write("\n")


def canonical_json(obj) -> str:
    """Compact sorted-key JSON used for config digests.

    Floats use the same 17-significant-digit encoding as the artifact
    writers, so digesting a config parsed back from disk (where integral
    floats reload as ints) matches digesting the original object.
    """
    return _encode(obj, item_sep=",", kv_sep=":")


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def digest_config(config_dict: dict) -> str:
    return sha256_text(canonical_json(config_dict))
