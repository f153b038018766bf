"""On-disk model directories.

Layout::

    manifest.json        schema digest, N, alpha, plan, blocks, order, cor, ranks
    schema.json          attribute dictionaries and bin boundaries
    blocks/block_XX.cpd1 one CP model per design block (indexed by block id)
    fit_reports.json     per-block fit diagnostics

The manifest holds no timestamps or host data, so it is byte-stable for a
fixed configuration.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np

from .catalog import Schema
from .covering import AttributeJoinPlan, Block
from .errors import DataError, ParseError, SchemaError
from .estimator import BlockModel, EstimatorIndex
from .tensor_core import dumps_cpd1, loads_cpd1

FORMAT = "tensorcard-model/1"


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _write(path: Path, data, binary=False):
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb" if binary else "w") as fh:
        fh.write(data)
    os.replace(tmp, path)


def block_filename(block_id: int) -> str:
    return f"block_{block_id:03d}.cpd1"


def save_index(index: EstimatorIndex, path, design=None, reports=None, extra=None) -> Path:
    """Write ``index`` to directory ``path`` (created if needed)."""
    if index.schema is None:
        raise SchemaError("cannot save an index without a schema")
    root = Path(path)
    (root / "blocks").mkdir(parents=True, exist_ok=True)
    by_id = sorted(index.blocks, key=lambda b: b.block_id)
    blobs = {}
    for bm in by_id:
        blob = dumps_cpd1(bm.model)
        _write(root / "blocks" / block_filename(bm.block_id), blob, binary=True)
        blobs[bm.block_id] = hashlib.sha256(blob).hexdigest()
    plan = index.plan or AttributeJoinPlan.identity(index.schema.domain_sizes)
    manifest = {
        "format": FORMAT,
        "schema_digest": index.schema.digest(),
        "total_records": index.total_records,
        "alpha": index.alpha,
        "plan": plan.to_json(),
        "domains": list(index.domains),
        "blocks": [
            {
                "id": bm.block_id,
                "members": list(bm.block.members),
                "domain_size": bm.block.domain_size,
                "rank": bm.rank,
                "file": f"blocks/{block_filename(bm.block_id)}",
                "sha256": blobs[bm.block_id],
            }
            for bm in by_id
        ],
        "importance_order": [bm.block_id for bm in index.blocks],
        "importance_scores": list(index.scores),
        "cor": index.cor.tolist(),
    }
    if design is not None:
        manifest["design"] = {"v": design.v, "k": design.k, "t": design.t, "m_k": design.m_k}
    if extra:
        manifest.update(extra)
    _write(root / "schema.json", _dump(index.schema.to_json()))
    _write(root / "manifest.json", _dump(manifest))
    if reports is not None:
        _write(root / "fit_reports.json", _dump({str(k): r.to_dict() for k, r in sorted(reports.items())}))
    return root


def read_manifest(path) -> dict:
    p = Path(path) / "manifest.json"
    try:
        text = p.read_text()
    except FileNotFoundError:
        raise DataError(f"{path} is not a model directory (no manifest.json)") from None
    try:
        manifest = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"manifest.json: {exc.msg}", position=exc.pos) from None
    if manifest.get("format") != FORMAT:
        raise DataError(f"unsupported model format {manifest.get('format')!r}")
    return manifest


def load_index(path) -> EstimatorIndex:
    """Load a directory written by :func:`save_index`, checking digests."""
    root = Path(path)
    manifest = read_manifest(root)
    schema = Schema.from_json(json.loads((root / "schema.json").read_text()))
    if schema.digest() != manifest["schema_digest"]:
        raise SchemaError("schema.json does not match the manifest digest")
    plan = AttributeJoinPlan.from_json(manifest["plan"])
    domains = manifest["domains"]
    bms = {}
    for entry in manifest["blocks"]:
        blob = (root / entry["file"]).read_bytes()
        if hashlib.sha256(blob).hexdigest() != entry["sha256"]:
            raise DataError(f"{entry['file']} does not match its manifest checksum")
        model = loads_cpd1(blob)
        block = Block(tuple(entry["members"]), entry["domain_size"])
        expect = tuple(domains[a] for a in block.members)
        if model.shape != expect:
            raise SchemaError(f"{entry['file']} has shape {model.shape}, expected {expect}")
        bms[entry["id"]] = BlockModel(block, model, entry["id"])
    order = [bms[i] for i in manifest["importance_order"]]
    return EstimatorIndex(
        blocks=tuple(order),
        cor=np.asarray(manifest["cor"]),
        total_records=manifest["total_records"],
        alpha=manifest["alpha"],
        scores=tuple(manifest["importance_scores"]),
        schema=schema,
        plan=plan,
        domains=tuple(domains),
    )
