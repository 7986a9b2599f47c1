# visual_qa.py
# Client for an external computer-vision service that locates icons and text on a screenshot.

import base64
import logging
import os
from io import BytesIO
from pathlib import Path
from typing import Optional, Union

import requests
from dotenv import load_dotenv
from PIL import Image

from resolver.screen_model import ResolverError

load_dotenv(override=False)

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.6
DEFAULT_TIMEOUT_S = 10.0


class BackendError(ResolverError):
    """The vision service could not answer (unreachable, timeout, malformed reply)."""


def encode_png(image: Union[bytes, str, Path]) -> str:
    """Re-encode raw image bytes or an image file as base64 PNG."""
    source = BytesIO(image) if isinstance(image, (bytes, bytearray)) else image
    with Image.open(source) as img:
        buffer = BytesIO()
        img.convert("RGBA" if img.mode in ("RGBA", "LA", "P") else "RGB").save(buffer, format="PNG")
    return base64.b64encode(buffer.getvalue()).decode("utf-8")


def image_size(image: bytes):
    with Image.open(BytesIO(image)) as img:
        return img.size


class CvBackendClient:
    """
    Request: {"screenshot": <base64 PNG>, "target": {"kind": "icon"|"text", "data": ...}}
    Response: {"found": bool, "region": [x, y, w, h], "confidence": float}
    """

    def __init__(
        self,
        endpoint: Optional[str] = None,
        threshold: float = DEFAULT_THRESHOLD,
        timeout_s: float = DEFAULT_TIMEOUT_S,
        assets_dir: Optional[Union[str, Path]] = None,
        http: Optional[requests.Session] = None,
    ):
        self.endpoint = endpoint or os.getenv("TDF_CV_BACKEND")
        if not self.endpoint:
            raise BackendError("no vision backend endpoint configured")
        self.threshold = threshold
        self.timeout_s = timeout_s
        self.assets_dir = Path(assets_dir) if assets_dir else None
        self.http = http or requests.Session()

    def _target_payload(self, target: dict) -> dict:
        if "image" in target:
            reference = target["image"]
            path = self.assets_dir / reference if self.assets_dir else Path(reference)
            try:
                data = encode_png(path)
            except (OSError, ValueError) as e:
                raise BackendError(f"cannot load icon template {reference}: {e}") from None
            return {"kind": "icon", "data": data}
        if "text" in target:
            return {"kind": "text", "data": target["text"]}
        raise BackendError(f"target {target!r} cannot be sent to the vision backend")

    def locate(self, screenshot: bytes, target: dict) -> Optional[dict]:
        """Return {"region", "confidence"} or None when not found (or below the threshold)."""
        payload = {"screenshot": encode_png(screenshot), "target": self._target_payload(target)}
        try:
            response = self.http.post(self.endpoint, json=payload, timeout=self.timeout_s)
            response.raise_for_status()
            body = response.json()
        except requests.Timeout:
            raise BackendError(f"vision backend timed out after {self.timeout_s} s") from None
        except requests.RequestException as e:
            raise BackendError(f"vision backend request failed: {e}") from None
        except ValueError:
            raise BackendError("vision backend returned a non-JSON body") from None

        if not isinstance(body, dict) or "found" not in body:
            raise BackendError(f"vision backend response has no 'found': {body!r}")
        if not body["found"]:
            return None
        region, confidence = body.get("region"), body.get("confidence")
        if (
            not isinstance(region, list)
            or len(region) != 4
            or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in region)
            or not isinstance(confidence, (int, float))
        ):
            raise BackendError(f"malformed vision backend response: {body!r}")
        if confidence < self.threshold:
            logger.debug("discarding match with confidence %.2f below %.2f", confidence, self.threshold)
            return None
        return {"region": [int(round(v)) for v in region], "confidence": float(confidence)}
