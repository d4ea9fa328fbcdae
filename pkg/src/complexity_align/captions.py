"""Client for an external captioning service that fills scene sidecars.

The service receives a JSON body ``{"instruction": ..., "image_b64": ...}``
and answers ``{"caption": ...}``. Caption generation itself happens outside
this package.
"""

from __future__ import annotations

import base64
import json
import logging
import time
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from .datamodel import Manifest, read_sidecar, write_sidecar

log = logging.getLogger(__name__)

# stand-in instructions, recorded in the sidecar header
STYLE_INSTRUCTIONS = {
    "short": "Describe this image in one brief sentence.",
    "medium": "Describe this image in one detailed sentence covering the objects and their relations.",
    "long": "Describe this image in a detailed paragraph.",
}

Transport = Callable[[str, dict], dict]


class CaptionError(RuntimeError):
    pass


@dataclass(frozen=True)
class CaptionRequest:
    image_path: Path
    style: str = "medium"
    endpoint: str | None = None

    def __post_init__(self):
        if self.style not in STYLE_INSTRUCTIONS:
            raise ValueError(f"style must be one of {sorted(STYLE_INSTRUCTIONS)}, got {self.style!r}")

    @property
    def instruction(self) -> str:
        return STYLE_INSTRUCTIONS[self.style]

    def body(self) -> dict:
        data = Path(self.image_path).read_bytes()
        return {"instruction": self.instruction, "image_b64": base64.b64encode(data).decode("ascii")}


def http_transport(endpoint: str, body: dict, timeout: float = 60.0) -> dict:
    req = urllib.request.Request(
        endpoint,
        data=json.dumps(body).encode("utf-8"),
        headers={"Content-Type": "application/json"},
        method="POST",
    )
    with urllib.request.urlopen(req, timeout=timeout) as resp:
        return json.loads(resp.read().decode("utf-8"))


def caption_client(request: CaptionRequest, transport: Transport | None = None, retries: int = 3,
                   backoff: float = 0.5, sleep: Callable[[float], None] = time.sleep) -> tuple[str, int]:
    """Return ``(caption, attempts)``; raises CaptionError once retries are exhausted."""
    if request.endpoint is None and transport is None:
        raise CaptionError("no endpoint configured")
    transport = transport or http_transport
    body = request.body()
    last = None
    for attempt in range(1, retries + 2):
        try:
            reply = transport(request.endpoint, body)
            caption = " ".join(str(reply["caption"]).split())
            if not caption:
                raise CaptionError("empty caption")
            return caption, attempt
        except Exception as exc:  # noqa: BLE001 - any transport failure is retried
            last = exc
            log.info("caption attempt %d for %s failed: %s", attempt, request.image_path, exc)
            if attempt <= retries:
                sleep(backoff * 2 ** (attempt - 1))
    raise CaptionError(f"{request.image_path}: captioning failed after {retries + 1} attempts: {last}")


@dataclass
class CaptionReport:
    written: dict[str, str] = field(default_factory=dict)
    attempts: dict[str, int] = field(default_factory=dict)
    flagged: list[str] = field(default_factory=list)


def caption_manifest(manifest: Manifest, sidecar: str | Path, style: str = "medium", endpoint: str | None = None,
                     offline: bool = False, transport: Transport | None = None, source: str = "external",
                     retries: int = 3, backoff: float = 0.5,
                     sleep: Callable[[float], None] = time.sleep) -> CaptionReport:
    """Caption every manifest image missing from ``sidecar`` and extend the file.

    ``offline=True`` only reads the existing sidecar and never touches the
    network or the file.
    """
    sidecar = Path(sidecar)
    existing = read_sidecar(sidecar) if sidecar.exists() else {}
    report = CaptionReport()
    if offline:
        report.flagged = [r.image_id for r in manifest.records if r.image_id not in existing]
        return report
    texts = dict(existing)
    for rec in manifest.records:
        if rec.image_id in texts:
            continue
        req = CaptionRequest(rec.image_path, style, endpoint)
        try:
            caption, attempts = caption_client(req, transport, retries, backoff, sleep)
        except (CaptionError, OSError) as exc:
            log.warning("%s", exc)
            report.flagged.append(rec.image_id)
            continue
        texts[rec.image_id] = caption
        report.written[rec.image_id] = caption
        report.attempts[rec.image_id] = attempts
        if attempts > 1:
            log.info("%s captioned after %d attempts", rec.image_id, attempts)
    if report.written or not sidecar.exists():
        header = [f"caption_source={source}", f"style={style}", f"instruction={STYLE_INSTRUCTIONS[style]} (stand-in)"]
        write_sidecar(texts, sidecar, header=header)
    return report
