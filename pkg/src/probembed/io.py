"""File formats: JSON-lines embedding and dataset dumps, JSON checkpoints, CSV tables.

All writers go through a temp file in the target directory followed by
``os.replace``, so a reader never sees a half-written file.  Floats are written
with ``repr`` precision by the json module, which round-trips exactly.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from pathlib import Path

import numpy as np

from .datagen import CrossModalDataset, DatasetConfig, Item
from .gaussian import GaussianEmbedding, MatchParams, Modality
from .trainer import Head, LossKind, Mode, Model

FORMAT_VERSION = 1
META_KEY = "_meta"


class SchemaError(ValueError):
    """A file is unreadable or a record violates its schema."""

    def __init__(self, message: str, path=None, line: int | None = None):
        super().__init__(message)
        self.path = None if path is None else str(path)
        self.line = line

    def to_dict(self) -> dict:
        d = {"error": "schema", "message": str(self)}
        if self.path is not None:
            d["path"] = self.path
        if self.line is not None:
            d["line"] = self.line
        return d


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    directory = path.parent if str(path.parent) else Path(".")
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=directory)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, allow_nan=False, separators=(",", ":"))


def _floats(arr) -> list:
    return [float(x) for x in np.asarray(arr).reshape(-1)]


def _read_lines(path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise SchemaError(f"file not found: {path}", path) from None
    except OSError as exc:
        raise SchemaError(f"cannot read {path}: {exc.strerror}", path) from None
    meta, records = None, []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"invalid JSON: {exc.msg}", path, lineno) from None
        if not isinstance(obj, dict):
            raise SchemaError("record is not a JSON object", path, lineno)
        if META_KEY in obj:
            meta = obj[META_KEY]
            continue
        records.append((lineno, obj))
    return meta, records


def _number_list(obj, key, path, lineno, integral=False):
    val = obj.get(key)
    if not isinstance(val, list) or not val:
        raise SchemaError(f"field {key!r} must be a non-empty number array", path, lineno)
    for x in val:
        if isinstance(x, bool) or not isinstance(x, (int, float)) or not math.isfinite(x):
            raise SchemaError(f"field {key!r} holds a non-finite or non-numeric entry", path, lineno)
        if integral and x not in (0, 1):
            raise SchemaError(f"field {key!r} must contain only 0/1", path, lineno)
    return val


def _require(obj, key, types, path, lineno):
    if key not in obj:
        raise SchemaError(f"missing field {key!r}", path, lineno)
    val = obj[key]
    if isinstance(val, bool) and bool not in types:
        raise SchemaError(f"field {key!r} has the wrong type", path, lineno)
    if not isinstance(val, types):
        raise SchemaError(f"field {key!r} has the wrong type", path, lineno)
    return val


def _modality(obj, path, lineno):
    m = _require(obj, "modality", (str,), path, lineno)
    if m not in ("a", "b"):
        raise SchemaError(f"modality must be 'a' or 'b', got {m!r}", path, lineno)
    return Modality(m)


# --- embeddings ------------------------------------------------------------


def dumps_embeddings(embeddings, meta: dict | None = None) -> str:
    lines = [] if meta is None else [_dumps({META_KEY: meta})]
    for e in embeddings:
        lines.append(
            _dumps({"id": e.id, "modality": e.modality.value, "mu": _floats(e.mu),
                    "log_var": _floats(e.log_var)})
        )
    return "\n".join(lines) + "\n"


def write_embeddings(path, embeddings, meta: dict | None = None) -> None:
    atomic_write_text(path, dumps_embeddings(embeddings, meta))


def read_embeddings(path):
    """Return ``(embeddings, meta)``; every record must share one dimension."""
    meta, records = _read_lines(path)
    out, dim, seen = [], None, set()
    for lineno, obj in records:
        eid = _require(obj, "id", (str,), path, lineno)
        m = _modality(obj, path, lineno)
        mu = _number_list(obj, "mu", path, lineno)
        lv = _number_list(obj, "log_var", path, lineno)
        if len(mu) != len(lv):
            raise SchemaError("mu and log_var lengths differ", path, lineno)
        if dim is None:
            dim = len(mu)
        elif len(mu) != dim:
            raise SchemaError(f"dimension {len(mu)} differs from {dim} on earlier lines", path, lineno)
        if eid in seen:
            raise SchemaError(f"duplicate id {eid!r}", path, lineno)
        seen.add(eid)
        out.append(GaussianEmbedding(eid, m, mu, lv))
    if not out:
        raise SchemaError("no embedding records", path)
    return out, meta


# --- datasets --------------------------------------------------------------


def dumps_dataset(dataset: CrossModalDataset, meta: dict | None = None) -> str:
    lines = [] if meta is None else [_dumps({META_KEY: meta})]
    for it in dataset.items:
        lines.append(
            _dumps({
                "id": it.id,
                "modality": it.modality.value,
                "features": _floats(it.features),
                "class_id": int(it.class_id),
                "attributes": [int(x) for x in it.attributes],
                "ambiguous": bool(it.ambiguous),
                "index": int(it.index),
            })
        )
    return "\n".join(lines) + "\n"


def write_dataset(path, dataset: CrossModalDataset, meta: dict | None = None) -> None:
    atomic_write_text(path, dumps_dataset(dataset, meta))


def read_dataset(path):
    """Return ``(dataset, meta)``.

    ``index`` is optional; when absent it defaults to the item's position among
    earlier items of the same (class, modality).
    """
    meta, records = _read_lines(path)
    items, counters, fdim, adim = [], {}, {}, None
    seen = set()
    for lineno, obj in records:
        iid = _require(obj, "id", (str,), path, lineno)
        m = _modality(obj, path, lineno)
        feats = _number_list(obj, "features", path, lineno)
        cls = _require(obj, "class_id", (int,), path, lineno)
        attrs = _number_list(obj, "attributes", path, lineno, integral=True)
        amb = _require(obj, "ambiguous", (bool,), path, lineno)
        key = (cls, m)
        index = obj.get("index", counters.get(key, 0))
        if isinstance(index, bool) or not isinstance(index, int) or index < 0:
            raise SchemaError("field 'index' must be a nonnegative integer", path, lineno)
        counters[key] = counters.get(key, 0) + 1
        if fdim.setdefault(m, len(feats)) != len(feats):
            raise SchemaError(f"feature length {len(feats)} differs within modality {m.value}", path, lineno)
        if adim is None:
            adim = len(attrs)
        elif len(attrs) != adim:
            raise SchemaError("attribute length differs from earlier lines", path, lineno)
        if iid in seen:
            raise SchemaError(f"duplicate id {iid!r}", path, lineno)
        seen.add(iid)
        items.append(
            Item(iid, m, np.asarray(feats, dtype=np.float64), cls,
                 np.asarray(attrs, dtype=np.int64), amb, index)
        )
    if not items:
        raise SchemaError("no item records", path)
    config = None
    if isinstance(meta, dict) and isinstance(meta.get("config"), dict):
        try:
            config = DatasetConfig(**meta["config"])
        except (TypeError, ValueError):
            config = None
    return CrossModalDataset(tuple(items), config), meta


# --- checkpoints -----------------------------------------------------------


def model_to_dict(model: Model, config: dict | None = None, invocation: dict | None = None) -> dict:
    heads = {}
    for m, h in sorted(model.heads.items(), key=lambda kv: kv[0].value):
        heads[m.value] = {
            "mu_weight": np.asarray(h.mu_weight).tolist(),
            "mu_bias": _floats(h.mu_bias),
            "var_weight": np.asarray(h.var_weight).tolist(),
            "var_bias": _floats(h.var_bias),
        }
    return {
        "format_version": FORMAT_VERSION,
        "heads": heads,
        "match_params": {"a": model.match_params.a, "b": model.match_params.b},
        "mode": model.mode.value,
        "alt_mode": model.alt_mode.value,
        "config": config or {},
        "invocation": invocation or {},
    }


def model_from_dict(d: dict, path=None) -> Model:
    try:
        if d.get("format_version") != FORMAT_VERSION:
            raise SchemaError(f"unsupported checkpoint format_version {d.get('format_version')!r}", path)
        heads = {}
        for key, h in d["heads"].items():
            arrays = [np.asarray(h[k], dtype=np.float64)
                      for k in ("mu_weight", "mu_bias", "var_weight", "var_bias")]
            if arrays[0].ndim != 2 or arrays[0].shape != arrays[2].shape:
                raise SchemaError(f"head {key!r} has malformed weight matrices", path)
            if not all(np.all(np.isfinite(a)) for a in arrays):
                raise SchemaError(f"head {key!r} has non-finite parameters", path)
            heads[Modality(key)] = Head(*arrays)
        if set(heads) != {Modality.A, Modality.B}:
            raise SchemaError("checkpoint needs heads for both modalities", path)
        mp = MatchParams(d["match_params"]["a"], d["match_params"]["b"])
        return Model(heads, mp, Mode(d["mode"]), LossKind(d["alt_mode"]))
    except SchemaError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"malformed checkpoint: {exc}", path) from None


def write_model(path, model: Model, config: dict | None = None, invocation: dict | None = None) -> None:
    atomic_write_text(path, json.dumps(model_to_dict(model, config, invocation), sort_keys=True,
                                       allow_nan=False) + "\n")


def read_model(path):
    """Return ``(model, checkpoint_dict)``."""
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise SchemaError(f"file not found: {path}", path) from None
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON: {exc.msg}", path, exc.lineno) from None
    if not isinstance(d, dict):
        raise SchemaError("checkpoint is not a JSON object", path)
    return model_from_dict(d, path), d


# --- CSV -------------------------------------------------------------------


def _cell(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, np.integer):
        return str(int(x))
    return str(x)


def dumps_csv(header, rows, invocation: dict | None = None) -> str:
    buf = io.StringIO()
    if invocation is not None:
        buf.write("# invocation: " + _dumps(invocation) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_cell(x) for x in row])
    return buf.getvalue()


def write_csv(path, header, rows, invocation: dict | None = None) -> None:
    atomic_write_text(path, dumps_csv(header, rows, invocation))


def read_csv(path):
    """Return ``(header, rows, invocation)``; rows are lists of strings."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    invocation = None
    body = []
    for line in lines:
        if line.startswith("# invocation: "):
            invocation = json.loads(line[len("# invocation: "):])
        elif not line.startswith("#"):
            body.append(line)
    parsed = list(csv.reader(body))
    if not parsed:
        raise SchemaError("empty CSV", path)
    return parsed[0], parsed[1:], invocation
