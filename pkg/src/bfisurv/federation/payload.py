"""Canonical, bit-exact serialisation of local fits.

A payload is UTF-8 JSON with sorted keys and no whitespace. Every float is
written as a C99 hex-float string (``float.hex``) so that decoding restores
the exact binary64 value. Symmetric matrices are stored as their row-major
upper triangle. A SHA-256 digest over the canonical body guards against
tampering and transport corruption.

Payloads carry model summaries only: estimates, precision matrices, prior
matrices, counts and diagnostics. There are no per-record fields.
"""

from __future__ import annotations

import hashlib
import json
from typing import Dict, List, Union

import numpy as np

from ..aggregate import OrderSelection
from ..data import ModelSignature
from ..errors import ProtocolError
from ..fit import LocalFit

SCHEMA_VERSION = 1
MEDIA_TYPE = "application/x-bfi-fit+json"

FIT_FIELDS = frozenset(
    {
        "signature",
        "beta_hat",
        "omega_hat",
        "M_hat",
        "Gamma_local",
        "n",
        "events",
        "log_post_at_mode",
        "converged",
        "iterations",
        "grad_norm",
    }
)
BUNDLE_FIELDS = frozenset({"q_star", "q_max", "fits", "deviances", "p_values"})
ENVELOPE_FIELDS = frozenset({"schema_version", "kind", "body", "digest"})


def _hex(x) -> str:
    return float(x).hex()


def _unhex(s: str) -> float:
    if not isinstance(s, str):
        raise ProtocolError(f"expected a hex-float string, got {s!r}")
    return float.fromhex(s)


def pack_symmetric(M: np.ndarray) -> List[str]:
    M = np.asarray(M, dtype=float)
    if not np.array_equal(M, M.T):
        raise ProtocolError("matrix is not exactly symmetric")
    iu = np.triu_indices(M.shape[0])
    return [_hex(x) for x in M[iu]]


def unpack_symmetric(values: List[str], dim: int) -> np.ndarray:
    if len(values) != dim * (dim + 1) // 2:
        raise ProtocolError(f"expected {dim * (dim + 1) // 2} triangle entries, got {len(values)}")
    M = np.zeros((dim, dim))
    iu = np.triu_indices(dim)
    M[iu] = [_unhex(v) for v in values]
    M[(iu[1], iu[0])] = M[iu]
    return M


def _fit_body(fit: LocalFit) -> dict:
    return {
        "signature": fit.signature.to_dict(),
        "beta_hat": [_hex(x) for x in fit.beta_hat],
        "omega_hat": [_hex(x) for x in fit.omega_hat],
        "M_hat": pack_symmetric(fit.M_hat),
        "Gamma_local": pack_symmetric(fit.Gamma_local),
        "n": int(fit.n),
        "events": int(fit.events),
        "log_post_at_mode": _hex(fit.log_post_at_mode),
        "converged": bool(fit.converged),
        "iterations": int(fit.iterations),
        "grad_norm": _hex(fit.grad_norm),
    }


def _fit_from_body(body: dict) -> LocalFit:
    if set(body) != FIT_FIELDS:
        raise ProtocolError(f"unexpected fit fields: {sorted(set(body) ^ FIT_FIELDS)}")
    sig = ModelSignature.from_dict(body["signature"])
    beta = np.array([_unhex(v) for v in body["beta_hat"]], dtype=float)
    omega = np.array([_unhex(v) for v in body["omega_hat"]], dtype=float)
    dim = beta.shape[0] + omega.shape[0]
    if beta.shape[0] != len(sig.columns) or omega.shape[0] != sig.family.q_params:
        raise ProtocolError("parameter vector lengths disagree with the signature")
    return LocalFit(
        beta_hat=beta,
        omega_hat=omega,
        M_hat=unpack_symmetric(body["M_hat"], dim),
        Gamma_local=unpack_symmetric(body["Gamma_local"], dim),
        n=int(body["n"]),
        events=int(body["events"]),
        signature=sig,
        log_post_at_mode=_unhex(body["log_post_at_mode"]),
        converged=bool(body["converged"]),
        iterations=int(body["iterations"]),
        grad_norm=_unhex(body["grad_norm"]),
    )


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode()


def _wrap(kind: str, body: dict) -> bytes:
    env = {"schema_version": SCHEMA_VERSION, "kind": kind, "body": body}
    env["digest"] = hashlib.sha256(_canonical(env)).hexdigest()
    return _canonical(env)


def encode(fit: LocalFit, allow_unconverged: bool = False) -> bytes:
    """Serialise a local fit; refuses unconverged fits unless allowed."""
    if not fit.converged and not allow_unconverged:
        raise ProtocolError("refusing to encode an unconverged fit")
    return _wrap("fit", _fit_body(fit))


def encode_order_bundle(selection: OrderSelection, allow_unconverged: bool = False) -> bytes:
    """Serialise every fit from ``q_star`` to ``q_max`` of an order search."""
    for q, f in selection.fits.items():
        if not f.converged and not allow_unconverged:
            raise ProtocolError(f"refusing to encode unconverged order-{q} fit")
    body = {
        "q_star": int(selection.q_star),
        "q_max": int(selection.q_max),
        "fits": {str(q): _fit_body(f) for q, f in sorted(selection.fits.items())},
        "deviances": {str(q): _hex(v) for q, v in sorted(selection.deviances.items())},
        "p_values": {str(q): _hex(v) for q, v in sorted(selection.p_values.items())},
    }
    return _wrap("order_bundle", body)


def read_envelope(data: Union[bytes, str]) -> dict:
    if isinstance(data, bytes):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError:
            raise ProtocolError("payload is not UTF-8") from None
    try:
        env = json.loads(data)
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"payload is not valid JSON: {exc}") from None
    if not isinstance(env, dict) or set(env) != ENVELOPE_FIELDS:
        raise ProtocolError("payload envelope has unexpected fields")
    digest = env.pop("digest")
    if hashlib.sha256(_canonical(env)).hexdigest() != digest:
        raise ProtocolError("payload digest mismatch")
    env["digest"] = digest
    return env


def decode(data: Union[bytes, str]) -> Union[LocalFit, OrderSelection]:
    """Inverse of :func:`encode` / :func:`encode_order_bundle`."""
    env = read_envelope(data)
    if env["schema_version"] != SCHEMA_VERSION:
        raise ProtocolError(f"unsupported schema_version {env['schema_version']!r}")
    body = env["body"]
    if env["kind"] == "fit":
        return _fit_from_body(body)
    if env["kind"] == "order_bundle":
        if set(body) != BUNDLE_FIELDS:
            raise ProtocolError("order bundle has unexpected fields")
        fits: Dict[int, LocalFit] = {int(q): _fit_from_body(b) for q, b in body["fits"].items()}
        q_star, q_max = int(body["q_star"]), int(body["q_max"])
        if sorted(fits) != list(range(q_star, q_max + 1)):
            raise ProtocolError("order bundle must contain every order from q_star to q_max")
        return OrderSelection(
            q_star=q_star,
            q_max=q_max,
            fits=fits,
            deviances={int(q): _unhex(v) for q, v in body["deviances"].items()},
            p_values={int(q): _unhex(v) for q, v in body["p_values"].items()},
        )
    raise ProtocolError(f"unknown payload kind {env['kind']!r}")
