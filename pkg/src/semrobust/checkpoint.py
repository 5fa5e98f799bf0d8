"""Checkpoint container: a zip holding a JSON manifest plus one
little-endian float32 blob per named parameter (row-major).

Zip entries carry a fixed timestamp and no compression, so saving the
same model twice produces byte-identical files, and loading reproduces
forward outputs bit-exactly at single precision.
"""

import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from .errors import KindMismatch, MissingArtifact
from .protodl import PrototypeClassifier, _ProtoNet
from .senn import SennClassifier, _SennNet
from .validation import check_is_fitted

FORMAT_VERSION = 1
_FIXED_DATE = (1980, 1, 1, 0, 0, 0)


def _kind_of(model):
    if isinstance(model, SennClassifier):
        return "senn"
    if isinstance(model, PrototypeClassifier):
        return "proto"
    raise KindMismatch(f"cannot checkpoint a {type(model).__name__}")


def _jsonable(obj):
    if isinstance(obj, (tuple, list)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def save_checkpoint(path, model, config_digest="", metrics=None):
    kind = _kind_of(model)
    check_is_fitted(model, "net_")
    state = model.net_.state_dict()
    names = sorted(state)
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "estimator_params": _jsonable(model.get_params()),
        "classes": model.classes_.tolist(),
        "n_features": int(model.n_features_in_),
        "param_order": names,
        "param_shapes": {k: list(state[k].shape) for k in names},
        "config_digest": config_digest,
        "metrics": _jsonable(metrics or {}),
    }
    if kind == "proto":
        manifest["proto_labels"] = model.proto_labels_.tolist()
        manifest["head_labels"] = model.head_labels_.tolist()
        manifest["recon_stats"] = _jsonable(model.recon_stats_)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        _write_entry(zf, "manifest.json",
                     json.dumps(manifest, indent=1, sort_keys=True).encode())
        for name in names:
            blob = state[name].detach().numpy().astype("<f4", copy=False).tobytes()
            _write_entry(zf, f"params/{name}.bin", blob)
    return path


def _write_entry(zf, name, data):
    info = zipfile.ZipInfo(name, date_time=_FIXED_DATE)
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def load_checkpoint(path):
    """Rebuild the estimator from a checkpoint. Returns (model, manifest)."""
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"checkpoint {path} not found")
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        blobs = {name: zf.read(f"params/{name}.bin")
                 for name in manifest["param_order"]}
    if manifest["format_version"] != FORMAT_VERSION:
        raise KindMismatch(f"unknown checkpoint format {manifest['format_version']}")
    params = dict(manifest["estimator_params"])
    for key in ("conv_channels",):
        if key in params and isinstance(params[key], list):
            params[key] = tuple(params[key])
    kind = manifest["kind"]
    classes = np.asarray(manifest["classes"], dtype=np.int64)
    n_features = int(manifest["n_features"])

    if kind == "senn":
        model = SennClassifier(**params)
        net = _SennNet(n_features, model.n_concepts, classes.size,
                       tuple(model.conv_channels), model.hidden_dim, model.arch)
    elif kind == "proto":
        model = PrototypeClassifier(**params)
        net = _ProtoNet(n_features, model.n_prototypes, classes.size,
                        model.latent_dim, tuple(model.conv_channels),
                        model.hidden_dim, model.arch, model.squared_distances)
    else:
        raise KindMismatch(f"unknown checkpoint kind {kind!r}")

    state = {}
    for name, shape in manifest["param_shapes"].items():
        arr = np.frombuffer(blobs[name], dtype="<f4").reshape(shape)
        state[name] = torch.from_numpy(arr.astype(np.float32, copy=True))
    net.load_state_dict(state)
    model.net_ = net.eval()
    model.classes_ = classes
    model.n_features_in_ = n_features
    if kind == "proto":
        model.proto_labels_ = np.asarray(manifest["proto_labels"], dtype=np.int64)
        model.head_labels_ = np.asarray(manifest["head_labels"], dtype=np.int64)
        model.recon_stats_ = manifest.get("recon_stats", {})
    return model, manifest
