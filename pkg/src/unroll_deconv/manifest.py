"""Run manifests: a JSON record sufficient to re-execute a run."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

FORMAT = "unroll-deconv-manifest/1"


def blob_hash(data: bytes) -> str:
    """Git-style blob hash (sha1 over ``b"blob <len>\\0" + data``)."""
    h = hashlib.sha1()
    h.update(b"blob %d\0" % len(data))
    h.update(data)
    return h.hexdigest()


def _encode(value):
    # JSON has no infinities; metrics such as PSNR of a perfect estimate use them.
    if isinstance(value, float) and not math.isfinite(value):
        return {"float": repr(value)}
    if isinstance(value, dict):
        return {k: _encode(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_encode(v) for v in value]
    return value


def _decode(value):
    if isinstance(value, dict):
        if set(value) == {"float"}:
            return float(value["float"])
        return {k: _decode(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_decode(v) for v in value]
    return value


@dataclass
class RunManifest:
    command: str
    config: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)
    loss_history: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    rows: list = field(default_factory=list)
    outputs: dict = field(default_factory=dict)
    seconds: float = 0.0
    format: str = FORMAT

    def to_json(self) -> str:
        return json.dumps(_encode(asdict(self)), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        data = _decode(json.loads(text))
        if data.get("format") != FORMAT:
            raise ValueError(f"unsupported manifest format {data.get('format')!r}")
        return cls(**data)

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_json() + "\n")
        return path

    @classmethod
    def read(cls, path) -> "RunManifest":
        return cls.from_json(Path(path).read_text())
