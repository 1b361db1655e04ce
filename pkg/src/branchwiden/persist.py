"""Model files: a JSON manifest plus a raw little-endian float64 weight blob.

The manifest records topology, layer specs, task assignment, the active
layer and a config echo. Every parameter array is listed with its byte
offset into the blob, in (level, block, layer, array-name) order. Optimizer
velocity is not persisted.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import nn
from .errors import CorruptionError
from .nn import LayerParams, LayerSpec
from .tree import Block, ModelTree

FORMAT = "branchwiden-model/1"
DTYPE = np.dtype("<f8")


def export_manifest(tree: ModelTree) -> tuple[bytes, bytes]:
    chunks: list[bytes] = []
    offset = 0
    levels = []
    for i, level in enumerate(tree.levels):
        blocks = []
        for b in level:
            arrays = []
            for k, (spec, p) in enumerate(zip(tree.level_specs[i], b.params)):
                for name in nn.ARRAY_NAMES[spec.kind]:
                    arr = np.ascontiguousarray(p.arrays[name], dtype=DTYPE)
                    raw = arr.tobytes()
                    arrays.append({"layer": k, "name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
                    chunks.append(raw)
                    offset += len(raw)
            blocks.append({"id": b.id, "parent": b.parent, "arrays": arrays})
        levels.append({"specs": [s.to_dict() for s in tree.level_specs[i]], "blocks": blocks})
    doc = {
        "format": FORMAT,
        "input_shape": list(tree.input_shape),
        "task_names": list(tree.task_names),
        "active_layer": tree.active_layer,
        "next_id": tree.next_id,
        "leaf_tasks": {str(k): sorted(v) for k, v in sorted(tree.leaf_tasks.items())},
        "levels": levels,
        "blob_bytes": offset,
        "config": tree.config,
    }
    manifest = json.dumps(doc, indent=2, sort_keys=True).encode("utf-8") + b"\n"
    return manifest, b"".join(chunks)


def import_manifest(manifest: bytes, blob: bytes) -> ModelTree:
    try:
        doc = json.loads(manifest.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptionError(f"manifest is not valid JSON: {exc}") from exc
    if doc.get("format") != FORMAT:
        raise CorruptionError(f"unknown manifest format {doc.get('format')!r}")
    declared = int(doc["blob_bytes"])
    if declared != len(blob):
        raise CorruptionError(f"weight blob has {len(blob)} bytes, manifest declares {declared}")

    level_specs = []
    levels = []
    for i, lv in enumerate(doc["levels"]):
        specs = tuple(LayerSpec.from_dict(s) for s in lv["specs"])
        level_specs.append(specs)
        blocks = []
        for bd in lv["blocks"]:
            params = [LayerParams() for _ in specs]
            for a in bd["arrays"]:
                start, nbytes = int(a["offset"]), int(a["nbytes"])
                shape = tuple(a["shape"])
                expected = int(np.prod(shape)) * DTYPE.itemsize
                if nbytes != expected or start < 0 or start + nbytes > len(blob):
                    raise CorruptionError(
                        f"array {a['name']!r} of block {bd['id']} spans bytes [{start}, {start + nbytes}) "
                        f"but needs {expected} bytes within a {len(blob)}-byte blob"
                    )
                arr = np.frombuffer(blob, dtype=DTYPE, count=expected // DTYPE.itemsize, offset=start)
                params[int(a["layer"])].arrays[a["name"]] = arr.reshape(shape).astype(np.float64)
            blocks.append(Block(int(bd["id"]), params, bd["parent"]))
        levels.append(blocks)
    tree = ModelTree(
        input_shape=tuple(doc["input_shape"]),
        level_specs=level_specs,
        levels=levels,
        leaf_tasks={int(k): frozenset(v) for k, v in doc["leaf_tasks"].items()},
        active_layer=doc["active_layer"],
        task_names=list(doc["task_names"]),
        next_id=int(doc["next_id"]),
        config=doc.get("config", {}),
    )
    try:
        tree.validate()
    except ValueError as exc:
        raise CorruptionError(f"manifest describes an invalid model: {exc}") from exc
    return tree


def save_model(tree: ModelTree, stem) -> tuple[Path, Path]:
    """Write ``<stem>.json`` and ``<stem>.bin``."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    manifest, blob = export_manifest(tree)
    mpath, bpath = stem.with_suffix(".json"), stem.with_suffix(".bin")
    mpath.write_bytes(manifest)
    bpath.write_bytes(blob)
    return mpath, bpath


def load_model(path) -> ModelTree:
    """Load from a stem or either of its two files."""
    p = Path(path)
    stem = p.with_suffix("") if p.suffix in (".json", ".bin") else p
    return import_manifest(stem.with_suffix(".json").read_bytes(), stem.with_suffix(".bin").read_bytes())


def _block_label(tree: ModelTree, level: int, b: Block) -> str:
    specs = tree.level_specs[level]
    kinds = "-".join(s.kind for s in specs)
    if level == tree.depth - 1:
        names = ", ".join(tree.task_names[t] for t in sorted(tree.leaf_tasks[b.id]))
        return names
    return f"L{level} {kinds} w={specs[0].out_size}" if specs[0].out_size else f"L{level} {kinds}"


def export_dot(tree: ModelTree, name: str = "model") -> str:
    """Graphviz rendering: one node per block, leaves labelled with task names."""
    lines = [f'digraph "{name}" {{', "  rankdir=BT;", '  input [shape=box, label="input"];']
    for i, level in enumerate(tree.levels):
        lines.append(f"  subgraph level{i} {{ rank=same;")
        for b in level:
            shape = "ellipse" if i == tree.depth - 1 else "box"
            label = _block_label(tree, i, b).replace('"', r"\"")
            lines.append(f'    b{b.id} [shape={shape}, label="{label}"];')
        lines.append("  }")
    for level in tree.levels:
        for b in level:
            src = "input" if b.parent is None else f"b{b.parent}"
            lines.append(f"  {src} -> b{b.id};")
    lines.append("}")
    return "\n".join(lines) + "\n"


def describe(tree: ModelTree) -> str:
    """Per-level architecture and task grouping, as plain text."""
    lines = [f"input {tuple(tree.input_shape)}  tasks={tree.task_count}  params={tree.param_count()}"]
    for i in range(tree.depth):
        specs = tree.level_specs[i]
        kinds = "-".join(s.kind for s in specs)
        groups = ["{" + ",".join(tree.task_names[t] for t in sorted(ts)) + "}" for ts in tree.branch_tasks(i)]
        marker = "  <- active" if i == tree.active_layer else ""
        width = f" w={specs[0].out_size}" if specs[0].out_size else ""
        lines.append(f"L{i:<2} {kinds}{width}  blocks={len(tree.levels[i])}  {' '.join(groups)}{marker}")
    return "\n".join(lines) + "\n"
