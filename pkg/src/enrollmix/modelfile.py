"""JSON persistence for fitted models.

A model file is a single JSON object with keys, in order::

    schema_version, model_kind, vocabulary, metadata, parameters, checksum

Floats are written with 17 significant digits, so every double survives a
save/load cycle bit for bit, and the writer is fully deterministic: loading a
file and saving it again reproduces the same bytes.  ``checksum`` is the
sha256 of the file rendered without that key.  A file that fails to parse,
does not match its checksum, or is not in canonical form is rejected with
:class:`~enrollmix.errors.ModelFileError`.
"""

import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .baselines import NaiveBayesParams, TanParams
from .cmm import CmmParams
from .data_model import CourseVocabulary
from .errors import DataError, ModelFileError

SCHEMA_VERSION = 1
MODEL_KINDS = ("nb", "tan", "cmm")


@dataclass(frozen=True)
class ModelFile:
    """A fitted model together with its vocabulary and training metadata.

    ``metadata`` conventionally holds ``seed``, ``k_states``, ``iterations``
    and ``final_loglik``; any JSON-compatible scalars or lists are allowed.
    """

    kind: str
    params: object
    vocabulary: CourseVocabulary = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise DataError(f"model kind must be one of {MODEL_KINDS}, got {self.kind!r}")
        expected = {"nb": NaiveBayesParams, "tan": TanParams, "cmm": CmmParams}[self.kind]
        if not isinstance(self.params, expected):
            raise DataError(f"{self.kind} model needs {expected.__name__}, got {type(self.params).__name__}")
        fp = self.params.vocab_fingerprint
        if self.vocabulary is not None and fp and fp != self.vocabulary.fingerprint():
            raise DataError("vocabulary does not match the parameters' fingerprint")


def kind_of(params):
    for kind, cls in (("nb", NaiveBayesParams), ("tan", TanParams), ("cmm", CmmParams)):
        if isinstance(params, cls):
            return kind
    raise DataError(f"not a model parameter object: {type(params).__name__}")


# ---------------------------------------------------------------------------
# canonical writer


def _emit(value, indent, depth):
    """Render ``value`` as JSON text; numeric arrays stay on one line."""
    pad = " " * (indent * (depth + 1))
    end = " " * (indent * depth)
    if isinstance(value, dict):
        if not value:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {_emit(v, indent, depth + 1)}" for k, v in value.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(value, np.ndarray):
        value = value.tolist()
    if isinstance(value, (list, tuple)):
        if not value:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple, np.ndarray)) for v in value):
            return "[" + ", ".join(_emit(v, indent, depth + 1) for v in value) + "]"
        items = [pad + _emit(v, indent, depth + 1) for v in value]
        return "[\n" + ",\n".join(items) + "\n" + end + "]"
    if isinstance(value, (bool, np.bool_)) or value is None or isinstance(value, str):
        return json.dumps(value if not isinstance(value, np.bool_) else bool(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        x = float(value)
        if not math.isfinite(x):
            raise DataError("model files cannot store non-finite numbers")
        text = "%.17g" % x
        # keep floats recognisable as floats after a round trip
        if not any(ch in text for ch in ".en"):
            text += ".0"
        return text
    raise DataError(f"cannot serialize {type(value).__name__}")


def _render(doc):
    return _emit(doc, 1, 0) + "\n"


def _parameters(params):
    if isinstance(params, CmmParams):
        return {
            "theta": params.theta,
            "phi": params.phi,
            "means": params.means,
            "covs": params.covs,
            "vocab_fingerprint": params.vocab_fingerprint,
        }
    if isinstance(params, NaiveBayesParams):
        return {
            "n_timesteps": params.n_timesteps,
            "n_courses": params.n_courses,
            "theta": params.theta,
            "phi": params.phi,
            "vocab_fingerprint": params.vocab_fingerprint,
        }
    return {
        "n_timesteps": params.n_timesteps,
        "n_courses": params.n_courses,
        "theta": params.theta,
        "parents": params.parents,
        "cpt": params.cpt,
        "vocab_fingerprint": params.vocab_fingerprint,
    }


def dumps_model(m):
    """Canonical text of a :class:`ModelFile`."""
    vocab = None if m.vocabulary is None else [list(e) for e in m.vocabulary.entries]
    doc = {
        "schema_version": SCHEMA_VERSION,
        "model_kind": m.kind,
        "vocabulary": vocab,
        "metadata": dict(m.metadata),
        "parameters": _parameters(m.params),
    }
    body = _render(doc)
    doc["checksum"] = "sha256:" + hashlib.sha256(body.encode("utf-8")).hexdigest()
    return _render(doc)


def save_model(m, path):
    """Write ``m`` to ``path`` atomically (temp file + rename)."""
    text = dumps_model(m)
    tmp = f"{os.fspath(path)}.tmp{os.getpid()}"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# reader


def _array(params, key, dtype=float):
    try:
        return np.array(params[key], dtype=dtype)
    except KeyError:
        raise ModelFileError(f"parameters missing {key!r}") from None
    except (TypeError, ValueError) as exc:
        raise ModelFileError(f"parameters[{key!r}] is not a numeric array: {exc}") from None


def _build_params(kind, params):
    fp = params.get("vocab_fingerprint", "")
    if kind == "cmm":
        return CmmParams(_array(params, "theta"), _array(params, "phi"), _array(params, "means"),
                         _array(params, "covs"), vocab_fingerprint=fp)
    t_count, m = int(params["n_timesteps"]), int(params["n_courses"])
    if kind == "nb":
        return NaiveBayesParams(_array(params, "theta"), _array(params, "phi"), t_count, m, fp)
    return TanParams(_array(params, "theta"), _array(params, "parents", int), _array(params, "cpt"),
                     t_count, m, fp)


def loads_model(text):
    """Parse and validate canonical model-file text."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFileError(f"model file is not valid JSON (truncated?): {exc}") from None
    if not isinstance(doc, dict):
        raise ModelFileError("model file must contain a JSON object")
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ModelFileError(f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})")
    stored = doc.pop("checksum", None)
    if not isinstance(stored, str):
        raise ModelFileError("model file has no checksum")
    if list(doc) != ["schema_version", "model_kind", "vocabulary", "metadata", "parameters"]:
        raise ModelFileError("model file keys are missing or out of order")
    body = _render(doc)
    actual = "sha256:" + hashlib.sha256(body.encode("utf-8")).hexdigest()
    if actual != stored:
        raise ModelFileError("checksum mismatch: model file is corrupt")
    doc["checksum"] = stored
    if _render(doc) != text:
        raise ModelFileError("model file is not in canonical form (edited or corrupt)")

    kind = doc["model_kind"]
    if kind not in MODEL_KINDS:
        raise ModelFileError(f"unknown model_kind {kind!r}")
    try:
        vocab = None if doc["vocabulary"] is None else CourseVocabulary(tuple(tuple(e) for e in doc["vocabulary"]))
        params = _build_params(kind, doc["parameters"])
        return ModelFile(kind, params, vocab, doc["metadata"])
    except ModelFileError:
        raise
    except (DataError, KeyError, TypeError, ValueError) as exc:
        raise ModelFileError(f"invalid model parameters: {exc}") from None


def load_model(path):
    try:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            text = fh.read()
    except UnicodeDecodeError as exc:
        raise ModelFileError(f"model file is not UTF-8: {exc}") from None
    return loads_model(text)
