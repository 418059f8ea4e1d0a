"""Checkpoint directories: a key-value text manifest plus a float64 blob.

Layout of ``<dir>/``::

    manifest.txt   one ``key = value`` per line
    weights.bin    concatenated little-endian float64 tensors
    vocab.txt      optional, one piece per line

The manifest lists config fields, lineage (producing stage and parent hash),
free-form metadata, every tensor's shape and byte offset, and the blob's
SHA-256.  A checkpoint's identity hash is the SHA-256 of its manifest bytes,
so a child recording that hash as its parent pins the parent exactly.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .transformer import TransformerConfig, TransformerModel, init_params

FORMAT = "tinydistill-checkpoint/1"
MANIFEST = "manifest.txt"
BLOB = "weights.bin"
VOCAB = "vocab.txt"
LE_F64 = np.dtype("<f8")


class CheckpointError(RuntimeError):
    pass


class LineageError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    model: TransformerModel
    hash: str
    vocab: list[str] | None
    manifest: dict[str, str]


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _blob(model: TransformerModel) -> tuple[bytes, list[str]]:
    chunks, lines, offset = [], [], 0
    for name, t in model.params.items():
        raw = np.ascontiguousarray(t.data, dtype=LE_F64).tobytes()
        shape = "x".join(str(n) for n in t.shape) or "scalar"
        lines.append(f"tensor.{name} = shape={shape} offset={offset} nbytes={len(raw)}")
        chunks.append(raw)
        offset += len(raw)
    return b"".join(chunks), lines


def render_manifest(model: TransformerModel, vocab: list[str] | None = None) -> tuple[str, bytes]:
    blob, tensor_lines = _blob(model)
    lines = [f"format = {FORMAT}"]
    for f in dataclasses.fields(model.config):
        lines.append(f"config.{f.name} = {_fmt(getattr(model.config, f.name))}")
    for key in sorted(model.lineage):
        lines.append(f"lineage.{key} = {_fmt(model.lineage[key])}")
    for key in sorted(model.meta):
        lines.append(f"meta.{key} = {_fmt(model.meta[key])}")
    if vocab is not None:
        lines.append(f"vocab.sha256 = {hashlib.sha256(_vocab_bytes(vocab)).hexdigest()}")
    lines.extend(tensor_lines)
    lines.append(f"blob.nbytes = {len(blob)}")
    lines.append(f"blob.sha256 = {hashlib.sha256(blob).hexdigest()}")
    return "\n".join(lines) + "\n", blob


def _vocab_bytes(vocab: list[str]) -> bytes:
    return ("\n".join(vocab) + "\n").encode("utf-8")


def model_hash(model: TransformerModel, vocab: list[str] | None = None) -> str:
    text, _ = render_manifest(model, vocab)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def save_checkpoint(model: TransformerModel, path, vocab: list[str] | None = None) -> str:
    """Write ``model`` to directory ``path``; returns the checkpoint hash."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    text, blob = render_manifest(model, vocab)
    (path / BLOB).write_bytes(blob)
    if vocab is not None:
        (path / VOCAB).write_bytes(_vocab_bytes(vocab))
    raw = text.encode("utf-8")
    (path / MANIFEST).write_bytes(raw)
    return hashlib.sha256(raw).hexdigest()


def parse_manifest(raw: bytes) -> dict[str, str]:
    entries: dict[str, str] = {}
    offset = 0
    for line in raw.split(b"\n"):
        start = offset
        offset += len(line) + 1
        if not line.strip():
            continue
        try:
            text = line.decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"manifest is not UTF-8 at byte offset {start}") from None
        key, sep, value = text.partition(" = ")
        if not sep or not key or " " in key:
            raise CheckpointError(f"malformed manifest line at byte offset {start}: {text[:60]!r}")
        if key in entries:
            raise CheckpointError(f"duplicate manifest key {key!r} at byte offset {start}")
        entries[key] = value
    if entries.get("format") != FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {entries.get('format')!r} at byte offset 0")
    return entries


def _parse_value(raw: str, kind: type):
    if kind is bool:
        if raw not in ("true", "false"):
            raise ValueError(raw)
        return raw == "true"
    return kind(raw)


def _config_from(entries: dict[str, str]) -> TransformerConfig:
    kwargs = {}
    for f in dataclasses.fields(TransformerConfig):
        key = f"config.{f.name}"
        if key not in entries:
            raise CheckpointError(f"manifest lacks {key}")
        kind = {"int": int, "float": float, "bool": bool}[f.type if isinstance(f.type, str) else f.type.__name__]
        try:
            kwargs[f.name] = _parse_value(entries[key], kind)
        except ValueError:
            raise CheckpointError(f"bad value for {key}: {entries[key]!r}") from None
    return TransformerConfig(**kwargs)


def _meta_value(raw: str):
    for kind in (int, float):
        try:
            return kind(raw)
        except ValueError:
            pass
    if raw in ("true", "false"):
        return raw == "true"
    return raw


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    manifest_path = path / MANIFEST
    if not manifest_path.is_file():
        raise CheckpointError(f"no checkpoint manifest at {manifest_path}")
    raw = manifest_path.read_bytes()
    entries = parse_manifest(raw)
    config = _config_from(entries)
    blob = (path / BLOB).read_bytes()
    if len(blob) != int(entries.get("blob.nbytes", -1)):
        raise CheckpointError(f"blob size {len(blob)} != manifest blob.nbytes {entries.get('blob.nbytes')}")
    if hashlib.sha256(blob).hexdigest() != entries.get("blob.sha256"):
        raise CheckpointError("weights blob fails its SHA-256 checksum")

    template = init_params(config.replace(seed=0))
    state = {}
    for name, t in template.items():
        key = f"tensor.{name}"
        if key not in entries:
            raise CheckpointError(f"manifest lacks {key}")
        fields = dict(part.split("=", 1) for part in entries[key].split())
        shape = () if fields["shape"] == "scalar" else tuple(int(n) for n in fields["shape"].split("x"))
        if shape != t.shape:
            raise CheckpointError(f"{key}: shape {shape} does not match config shape {t.shape}")
        off, nbytes = int(fields["offset"]), int(fields["nbytes"])
        if off + nbytes > len(blob):
            raise CheckpointError(f"{key}: bytes [{off}, {off + nbytes}) past end of blob")
        state[name] = np.frombuffer(blob, dtype=LE_F64, count=nbytes // 8, offset=off).reshape(shape).astype(np.float64)
    model = TransformerModel(config, template)
    model.load_state(state)
    model.lineage = {k[len("lineage.") :]: v for k, v in entries.items() if k.startswith("lineage.")}
    model.meta = {k[len("meta.") :]: _meta_value(v) for k, v in entries.items() if k.startswith("meta.")}

    vocab = None
    if (path / VOCAB).is_file():
        vraw = (path / VOCAB).read_bytes()
        if "vocab.sha256" in entries and hashlib.sha256(vraw).hexdigest() != entries["vocab.sha256"]:
            raise CheckpointError("vocab file fails its SHA-256 checksum")
        vocab = vraw.decode("utf-8").split("\n")[:-1]
    return Checkpoint(model, hashlib.sha256(raw).hexdigest(), vocab, entries)


def verify_lineage(chain: list[Checkpoint]) -> None:
    """Check each checkpoint names the previous one's hash as its parent.

    ``chain`` runs from the root ancestor to the final descendant.
    """
    if not chain:
        return
    if chain[0].model.lineage.get("parent") != "root":
        raise LineageError(f"first checkpoint has parent {chain[0].model.lineage.get('parent')!r}, not 'root'")
    for parent, child in zip(chain, chain[1:]):
        if child.model.lineage.get("parent") != parent.hash:
            raise LineageError(
                f"checkpoint at stage {child.model.lineage.get('stage')!r} names parent "
                f"{child.model.lineage.get('parent')!r}, expected {parent.hash}"
            )
