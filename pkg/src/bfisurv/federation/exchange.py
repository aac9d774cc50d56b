"""Single-round center-to-aggregator exchange over files or HTTP.

Endpoints served by :class:`AggregatorServer`:

``POST /v1/fits``
    A center submits one payload (``Content-Type: application/x-bfi-fit+json``)
    with its id in the ``X-BFI-Center`` header. Each center may submit once.
``POST /v1/aggregate``
    The operator triggers aggregation once all expected centers have
    submitted. An optional JSON body ``{"expected": L}`` overrides the
    expected center count. Aggregation runs exactly once.
``GET /v1/status``
    Collection state and counters (no model parameters).

Nothing is ever sent back to the centers except an acknowledgement.
"""

from __future__ import annotations

import json
import os
import threading
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Dict, List, Optional, Sequence, Tuple

from ..aggregate import BfiEstimate, OrderSelection, PriorLike, combine, max_order_combine
from ..errors import BfiError, ProtocolError
from ..fit import LocalFit
from .payload import MEDIA_TYPE, decode, read_envelope

ADDR_ENV = "BFI_SERVE_ADDR"
DEFAULT_ADDR = "127.0.0.1:8765"


def aggregate_round(
    payloads: Sequence[bytes],
    Gamma_global: PriorLike,
    expected: Optional[int] = None,
    allow_unconverged: bool = False,
    alpha: float = 0.025,
) -> Tuple[BfiEstimate, str]:
    """Decode one payload per center and aggregate them.

    Order bundles (from the exponentiated-polynomial order search) are
    combined at the maximum local order; plain fits with :func:`combine`.
    Returns the estimate and a human-readable summary.
    """
    if expected is not None and len(payloads) != expected:
        raise ProtocolError(
            f"received {len(payloads)} of {expected} expected payloads; refusing to aggregate"
        )
    if not payloads:
        raise ProtocolError("no payloads received")
    versions = {read_envelope(p)["schema_version"] for p in payloads}
    if len(versions) > 1:
        raise ProtocolError(f"mixed payload schema versions: {sorted(versions)}")
    items = [decode(p) for p in payloads]
    kinds = {type(x) for x in items}
    if len(kinds) > 1:
        raise ProtocolError("cannot mix plain fits and order bundles in one round")
    if isinstance(items[0], OrderSelection):
        for i, sel in enumerate(items):
            for q, f in sel.fits.items():
                if not f.converged and not allow_unconverged:
                    raise ProtocolError(f"center {i}: order-{q} fit did not converge")
        est = max_order_combine(items, Gamma_global, alpha)
        orders = [s.q_star for s in items]
        header = f"local orders {orders} -> combined at order {max(orders)}"
    else:
        for i, f in enumerate(items):
            if not f.converged and not allow_unconverged:
                raise ProtocolError(f"center {i}: fit did not converge")
        est = combine(items, Gamma_global, alpha)
        header = f"{len(items)} local fits combined"
    return est, header + "\n" + est.summary()


def read_payload_files(paths) -> List[bytes]:
    out = []
    for p in paths:
        with open(p, "rb") as fh:
            out.append(fh.read())
    return out


@dataclass
class Aggregator:
    """Append-only collection store with states ``collecting -> aggregated``."""

    Gamma_global: PriorLike
    expected: Optional[int] = None
    allow_unconverged: bool = False
    alpha: float = 0.025
    state: str = "collecting"
    submissions: Dict[str, bytes] = field(default_factory=dict)
    submission_count: int = 0
    aggregation_count: int = 0
    result: Optional[BfiEstimate] = None
    summary: str = ""
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def submit(self, center: str, payload: bytes) -> None:
        read_envelope(payload)
        with self._lock:
            if self.state != "collecting":
                raise ProtocolError("aggregation already done; submissions are closed")
            if center in self.submissions:
                raise ProtocolError(f"center {center!r} already submitted")
            self.submissions[center] = payload
            self.submission_count += 1

    def aggregate(self, expected: Optional[int] = None) -> BfiEstimate:
        with self._lock:
            if self.state != "collecting":
                raise ProtocolError("aggregation already done")
            want = expected if expected is not None else self.expected
            centers = sorted(self.submissions)
            payloads = [self.submissions[c] for c in centers]
            if want is not None and len(payloads) < want:
                raise ProtocolError(
                    f"partial set: {len(payloads)} of {want} centers submitted ({centers})"
                )
            est, summary = aggregate_round(
                payloads, self.Gamma_global, want, self.allow_unconverged, self.alpha
            )
            self.result, self.summary = est, summary
            self.state = "aggregated"
            self.aggregation_count += 1
            return est

    def status(self) -> dict:
        return {
            "state": self.state,
            "centers": sorted(self.submissions),
            "submissions": self.submission_count,
            "aggregations": self.aggregation_count,
            "expected": self.expected,
        }


def _make_handler(agg: Aggregator):
    class Handler(BaseHTTPRequestHandler):
        def log_message(self, fmt, *args):  # keep test output quiet
            pass

        def _reply(self, code, obj):
            body = json.dumps(obj, sort_keys=True).encode()
            self.send_response(code)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def _body(self) -> bytes:
            length = int(self.headers.get("Content-Length") or 0)
            return self.rfile.read(length) if length else b""

        def do_GET(self):
            if self.path == "/v1/status":
                self._reply(200, agg.status())
            else:
                self._reply(404, {"error": "not found"})

        def do_POST(self):
            try:
                if self.path == "/v1/fits":
                    center = self.headers.get("X-BFI-Center")
                    if not center:
                        raise ProtocolError("missing X-BFI-Center header")
                    agg.submit(center, self._body())
                    self._reply(202, {"accepted": center})
                elif self.path == "/v1/aggregate":
                    raw = self._body()
                    expected = json.loads(raw).get("expected") if raw.strip() else None
                    est = agg.aggregate(expected)
                    self._reply(200, {"estimate": est.to_dict(), "summary": agg.summary})
                else:
                    self._reply(404, {"error": "not found"})
            except ProtocolError as exc:
                self._reply(409, {"error": str(exc)})
            except (BfiError, ValueError) as exc:
                self._reply(400, {"error": str(exc)})

    return Handler


def parse_addr(addr: Optional[str]) -> Tuple[str, int]:
    addr = addr or os.environ.get(ADDR_ENV) or DEFAULT_ADDR
    host, _, port = addr.rpartition(":")
    return host or "127.0.0.1", int(port)


class AggregatorServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, aggregator: Aggregator, addr: Optional[str] = None):
        self.aggregator = aggregator
        super().__init__(parse_addr(addr), _make_handler(aggregator))

    @property
    def url(self) -> str:
        host, port = self.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> threading.Thread:
        th = threading.Thread(target=self.serve_forever, daemon=True)
        th.start()
        return th


def _post(url: str, data: bytes, headers: dict) -> dict:
    req = urllib.request.Request(url, data=data, headers=headers, method="POST")
    try:
        with urllib.request.urlopen(req, timeout=30) as resp:
            return json.loads(resp.read())
    except urllib.error.HTTPError as exc:
        detail = exc.read().decode(errors="replace")
        try:
            detail = json.loads(detail).get("error", detail)
        except json.JSONDecodeError:
            pass
        raise ProtocolError(f"server answered {exc.code}: {detail}") from None


def submit_payload(url: str, center: str, payload: bytes) -> dict:
    return _post(
        url.rstrip("/") + "/v1/fits",
        payload,
        {"Content-Type": MEDIA_TYPE, "X-BFI-Center": center},
    )


def request_aggregation(url: str, expected: Optional[int] = None) -> dict:
    body = json.dumps({"expected": expected} if expected is not None else {}).encode()
    return _post(url.rstrip("/") + "/v1/aggregate", body, {"Content-Type": "application/json"})
