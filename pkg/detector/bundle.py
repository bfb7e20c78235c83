"""
Versioned model bundles.

A bundle is a directory `<category>-v<N>` of canonical files plus a
manifest.json holding each file's SHA256 and a fingerprint over the whole
manifest. Bundles are written to a temporary directory and renamed into
place, so an existing version is never modified.
"""

import hashlib
import io
import json
import logging
import re
import shutil
from pathlib import Path
from typing import Any, Dict, List, Tuple, Union

import numpy as np

from captioner.mfsc import MFSCError, parse_document, serialize
from detector.alignment import EpochLoss, write_trace_csv
from detector.config import RunConfig
from detector.encoder import TokenGrid, feature_bytes, get_encoder, parse_feature_bytes
from detector.exports import score_map_bytes
from detector.pipeline import FittedModel
from detector.prompt_bank import AttrMoEGates, PlaceholderTable, build_prompt_set, encode_all
from detector.query_former import CrossAttentionParams, IntrinsicQuery
from detector.region_aggregation import RegionMap
from detector.scoring import NormalMemory

logger = logging.getLogger(__name__)

BUNDLE_FORMAT = 1
MANIFEST = "manifest.json"
_VERSION_RE = re.compile(r"^(?P<category>.+)-v(?P<version>\d+)$")


class BundleError(Exception):
    """Exception for missing, corrupted or inconsistent bundles."""
    pass


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def _npy_load(data: bytes) -> np.ndarray:
    return np.load(io.BytesIO(data), allow_pickle=False)


def _json_bytes(obj: Any) -> bytes:
    return (json.dumps(obj, sort_keys=True, indent=2) + "\n").encode("utf-8")


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def manifest_fingerprint(files: Dict[str, str]) -> str:
    """SHA256 over the sorted file-hash mapping."""
    return _sha256(json.dumps(files, sort_keys=True).encode("utf-8"))


def bundle_files(model: FittedModel) -> Dict[str, bytes]:
    """Every file of a bundle, keyed by name."""
    pset = model.prompt_set
    slots = pset.parameter_slots()
    gate_slots = pset.gate_slots()
    dim = model.table.embeddings[slots[0]].shape[0] if slots else 0
    files: Dict[str, bytes] = {
        "config.json": model.config.snapshot().encode("utf-8"),
        "mfsc.json": serialize(model.document).encode("utf-8"),
        "prompts.json": _json_bytes(pset.to_dict()),
        "slots.json": _json_bytes({"placeholders": slots, "gates": gate_slots}),
        "placeholders.npy": _npy_bytes(
            np.stack([model.table.embeddings[s] for s in slots]) if slots else np.zeros((0, dim))
        ),
        "gates.npy": _npy_bytes(np.array([model.gates.raw[s] for s in gate_slots], dtype=np.float64)),
        "queries.npy": _npy_bytes(model.queries.queries),
        "intrinsics.npy": _npy_bytes(model.intrinsics),
        "memory.npy": _npy_bytes(model.memory.bank),
    }
    for name, arr in model.qf_params.arrays().items():
        files[f"qf_{name}.npy"] = _npy_bytes(arr)
    if model.region_maps:
        files["region_maps.npy"] = _npy_bytes(np.stack([r.labels for r in model.region_maps]))
    trace = [[e.epoch, e.l_clip, e.l_trip, e.l_mean, e.l_reg] for e in model.trace]
    files["trace.json"] = _json_bytes({"align": trace, "query_former": list(model.qf_trace)})

    # Reference query: the first memory grid, stored at f32 and scored after the round trip.
    d = model.memory.bank.shape[1]
    T = model.memory.size // max(1, len(model.region_maps)) if model.region_maps else model.memory.size
    h = model.region_maps[0].h if model.region_maps else 1
    w = T // h
    ref = TokenGrid(model.memory.bank[:T].reshape(h, w, d), model.memory.bank[:T].mean(axis=0))
    ref_bytes = feature_bytes(ref)
    ref_loaded = parse_feature_bytes(ref_bytes)
    files["reference_query.fgadfeat"] = ref_bytes
    files["reference_scores.fgadsmap"] = score_map_bytes(model.score(ref_loaded).m_pix)
    return files


def list_versions(root: Union[str, Path], category: str) -> List[Tuple[int, Path]]:
    root = Path(root)
    if not root.exists():
        return []
    out = []
    for p in root.iterdir():
        m = _VERSION_RE.match(p.name)
        if p.is_dir() and m and m.group("category") == category.replace("/", "_"):
            out.append((int(m.group("version")), p))
    return sorted(out)


def latest_bundle(root: Union[str, Path], category: str) -> Path:
    versions = list_versions(root, category)
    if not versions:
        raise BundleError(f"no bundle for '{category}' under {root}")
    return versions[-1][1]


def save_bundle(model: FittedModel, root: Union[str, Path]) -> Path:
    """
    Writes the model as the next free version under `root`.

    Returns:
        Path of the new bundle directory
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    category = model.config.category.replace("/", "_")
    versions = list_versions(root, model.config.category)
    version = versions[-1][0] + 1 if versions else 1
    target = root / f"{category}-v{version}"
    tmp = root / f".{category}-v{version}.tmp"
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir()

    files = bundle_files(model)
    hashes = {name: _sha256(data) for name, data in sorted(files.items())}
    for name, data in files.items():
        (tmp / name).write_bytes(data)
    write_trace_csv(model.trace, tmp / "trace.csv")
    hashes["trace.csv"] = _sha256((tmp / "trace.csv").read_bytes())
    manifest = {
        "format": BUNDLE_FORMAT,
        "category": model.config.category,
        "version": version,
        "files": dict(sorted(hashes.items())),
        "fingerprint": manifest_fingerprint(hashes),
    }
    (tmp / MANIFEST).write_bytes(_json_bytes(manifest))
    tmp.rename(target)
    logger.info(f"[BUNDLE] wrote {target} fingerprint={manifest['fingerprint'][:16]}")
    return target


def read_manifest(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    mf = path / MANIFEST
    if not mf.exists():
        raise BundleError(f"{path} has no {MANIFEST}")
    try:
        return json.loads(mf.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise BundleError(f"{mf}: {e.msg}") from e


def verify_bundle(path: Union[str, Path]) -> Dict[str, Any]:
    """
    Recomputes every content hash.

    Returns:
        The manifest

    Raises:
        BundleError: On a missing file or hash mismatch
    """
    path = Path(path)
    manifest = read_manifest(path)
    for name, expected in manifest.get("files", {}).items():
        f = path / name
        if not f.exists():
            raise BundleError(f"{path.name}: missing file {name}")
        actual = _sha256(f.read_bytes())
        if actual != expected:
            raise BundleError(f"{path.name}: hash mismatch for {name}")
    if manifest_fingerprint(manifest["files"]) != manifest.get("fingerprint"):
        raise BundleError(f"{path.name}: manifest fingerprint mismatch")
    return manifest


def load_bundle(path: Union[str, Path]) -> FittedModel:
    """
    Loads and verifies a bundle.

    Raises:
        BundleError: If verification fails or the stored prompts do not match
    """
    path = Path(path)
    verify_bundle(path)
    read = lambda name: (path / name).read_bytes()
    try:
        cfg = RunConfig.model_validate_json(read("config.json"))
        doc = parse_document(read("mfsc.json").decode("utf-8"))
    except MFSCError as e:
        raise BundleError(f"{path.name}: bad mfsc.json: {e}") from e
    except ValueError as e:
        raise BundleError(f"{path.name}: bad config.json: {e}") from e

    enc = get_encoder(cfg.encoder)
    pset = build_prompt_set(doc, cfg.anomaly_words, cfg.train.n_ab, cfg.seed)
    if _json_bytes(pset.to_dict()) != read("prompts.json"):
        raise BundleError(f"{path.name}: prompts.json does not match the rebuilt prompt set")
    slots = json.loads(read("slots.json"))
    placeholders = _npy_load(read("placeholders.npy"))
    gates = _npy_load(read("gates.npy"))
    table = PlaceholderTable({s: placeholders[i].copy() for i, s in enumerate(slots["placeholders"])})
    moe = AttrMoEGates({s: float(gates[i]) for i, s in enumerate(slots["gates"])})

    arrays = {name[3:-4]: _npy_load(read(name)) for name in sorted(p.name for p in path.glob("qf_*.npy"))}
    region_maps = []
    if (path / "region_maps.npy").exists():
        region_maps = [RegionMap(m, pset.num_components) for m in _npy_load(read("region_maps.npy"))]
    traces = json.loads(read("trace.json"))
    return FittedModel(
        config=cfg,
        document=doc,
        prompt_set=encode_all(pset, table, moe, enc),
        table=table,
        gates=moe,
        qf_params=CrossAttentionParams.from_arrays(arrays),
        queries=IntrinsicQuery(_npy_load(read("queries.npy"))),
        intrinsics=_npy_load(read("intrinsics.npy")),
        memory=NormalMemory(_npy_load(read("memory.npy"))),
        region_maps=region_maps,
        trace=[EpochLoss(int(e[0]), *e[1:]) for e in traces["align"]],
        qf_trace=list(traces["query_former"]),
    )


def reference_check(path: Union[str, Path]) -> bool:
    """Re-scores the stored reference query and compares the f32 map bit-for-bit."""
    path = Path(path)
    model = load_bundle(path)
    query = parse_feature_bytes((path / "reference_query.fgadfeat").read_bytes())
    stored = (path / "reference_scores.fgadsmap").read_bytes()
    return score_map_bytes(model.score(query).m_pix) == stored


def inspect_bundle(path: Union[str, Path]) -> Dict[str, Any]:
    """Summary used by `fgad bundle inspect`."""
    path = Path(path)
    manifest = verify_bundle(path)
    slots = json.loads((path / "slots.json").read_text(encoding="utf-8"))
    prompts = json.loads((path / "prompts.json").read_text(encoding="utf-8"))
    return {
        "path": str(path),
        "category": manifest["category"],
        "version": manifest["version"],
        "fingerprint": manifest["fingerprint"],
        "files": len(manifest["files"]),
        "templates": len(prompts["templates"]),
        "placeholders": len(slots["placeholders"]),
        "gates": len(slots["gates"]),
        "memory_size": int(_npy_load((path / "memory.npy").read_bytes()).shape[0]),
        "reference_reproduces": reference_check(path),
    }
