import hashlib
import json
import urllib.request

import numpy as np
import pytest

from bfisurv.aggregate import combine, select_poly_order
from bfisurv.errors import ProtocolError
from bfisurv.federation import payload
from bfisurv.federation.exchange import (
    Aggregator,
    AggregatorServer,
    aggregate_round,
    parse_addr,
    request_aggregation,
    submit_payload,
)
from bfisurv.fit import fit_map
from bfisurv.hazard import BaselineFamily
from bfisurv.posterior import GaussianPrior
from bfisurv.simulate import generate, reference_config

from conftest import loglinear_hazard_data, make_fit

GAMMA = 0.01


@pytest.fixture(scope="module")
def center_fits():
    prior = GaussianPrior.isotropic(GAMMA, 6)
    datasets = [generate(reference_config(n, seed=(3, ell))).dataset for ell, n in enumerate((60, 80, 100))]
    return datasets, [fit_map(d, BaselineFamily.weibull(), prior) for d in datasets]


@pytest.fixture
def server():
    agg = Aggregator(GAMMA, expected=3)
    srv = AggregatorServer(agg, "127.0.0.1:0")
    srv.start()
    yield srv
    srv.shutdown()
    srv.server_close()


def _rewrap(env):
    """Re-sign an edited envelope so that only the edit is under test."""
    body = {k: v for k, v in env.items() if k != "digest"}
    canon = json.dumps(body, sort_keys=True, separators=(",", ":"))
    return json.dumps({**body, "digest": hashlib.sha256(canon.encode()).hexdigest()}).encode()


def _numeric_leaves(body):
    return [v for k, v in body.items() if k in ("beta_hat", "omega_hat", "M_hat", "Gamma_local")]


class TestPayload:
    def test_round_trip_bit_exact(self, center_fits):
        fit = center_fits[1][0]
        back = payload.decode(payload.encode(fit))
        for name in ("beta_hat", "omega_hat", "M_hat", "Gamma_local"):
            assert np.array_equal(getattr(back, name), getattr(fit, name))
        assert back.log_post_at_mode == fit.log_post_at_mode
        assert back.signature == fit.signature
        assert payload.encode(back) == payload.encode(fit)

    def test_entry_count(self, center_fits):
        body = json.loads(payload.encode(center_fits[1][0]))["body"]
        counts = [len(v) for v in _numeric_leaves(body)]
        assert sum(counts) == 4 + 2 + 21 + 21

    def test_tampered_digest(self, center_fits):
        env = json.loads(payload.encode(center_fits[1][0]))
        env["body"]["beta_hat"][0] = (1.5).hex()
        with pytest.raises(ProtocolError, match="digest"):
            payload.decode(json.dumps(env, sort_keys=True, separators=(",", ":")))

    def test_unknown_field_rejected(self, center_fits):
        env = json.loads(payload.encode(center_fits[1][0]))
        env["body"]["times"] = [1.0]
        with pytest.raises(ProtocolError, match="unexpected"):
            payload.decode(_rewrap(env))

    def test_unconverged_refused(self):
        fit = make_fit([0.1, 0.2], np.eye(2), np.eye(2), converged=False)
        with pytest.raises(ProtocolError):
            payload.encode(fit)
        assert not payload.decode(payload.encode(fit, allow_unconverged=True)).converged

    def test_deterministic_bytes(self, center_fits):
        fit = center_fits[1][0]
        assert payload.encode(fit) == payload.encode(fit)

    def test_symmetric_packing(self):
        M = np.array([[1.0, 2.0, 3.0], [2.0, 4.0, 5.0], [3.0, 5.0, 6.0]])
        assert np.array_equal(payload.unpack_symmetric(payload.pack_symmetric(M), 3), M)
        with pytest.raises(ProtocolError):
            payload.pack_symmetric(np.array([[1.0, 2.0], [2.0000001, 1.0]]))

    def test_order_bundle_round_trip(self):
        ds = loglinear_hazard_data(np.random.default_rng(1), 200, 0.0)
        sel = select_poly_order(ds, GAMMA, q_max=3)
        back = payload.decode(payload.encode_order_bundle(sel))
        assert back.q_star == sel.q_star and sorted(back.fits) == sorted(sel.fits)
        for q in sel.fits:
            assert np.array_equal(back.fits[q].theta, sel.fits[q].theta)


class TestPrivacy:
    def test_schema_has_no_record_fields(self):
        per_record = {"times", "time", "status", "covariates", "z", "records", "rows"}
        assert not (payload.FIT_FIELDS | payload.BUNDLE_FIELDS | payload.ENVELOPE_FIELDS) & per_record

    def test_no_record_values_in_bytes(self, center_fits):
        datasets, fits = center_fits
        blob = payload.encode(fits[0]).decode()
        ds = datasets[0]
        for x in np.concatenate([ds.times, ds.covariates.ravel()]):
            assert float(x).hex() not in blob
            assert repr(float(x)) not in blob

    def test_size_independent_of_n(self, center_fits):
        _, fits = center_fits
        sizes = {len(payload.encode(f)) for f in fits}
        assert max(sizes) - min(sizes) < 40


class TestRound:
    def test_files_equal_in_process(self, center_fits, tmp_path):
        _, fits = center_fits
        blobs = [payload.encode(f) for f in fits]
        est, summary = aggregate_round(blobs, GAMMA, expected=3)
        ref = combine(fits, GAMMA)
        assert np.array_equal(est.theta_bfi, ref.theta_bfi)
        assert np.array_equal(est.M_bfi, ref.M_bfi)
        assert "3 local fits" in summary

    def test_count_mismatch(self, center_fits):
        blobs = [payload.encode(f) for f in center_fits[1][:2]]
        with pytest.raises(ProtocolError, match="2 of 3"):
            aggregate_round(blobs, GAMMA, expected=3)

    def test_signature_mismatch(self, center_fits):
        other = make_fit(np.zeros(6), np.eye(6), GAMMA * np.eye(6), family=BaselineFamily.gompertz(),
                         columns=("z1", "z2", "z3", "z4"))
        blobs = [payload.encode(center_fits[1][0]), payload.encode(other)]
        with pytest.raises(ProtocolError, match="signature"):
            aggregate_round(blobs, GAMMA)

    def test_mixed_versions(self, center_fits):
        env = json.loads(payload.encode(center_fits[1][0]))
        env["schema_version"] = 2
        blobs = [payload.encode(center_fits[1][1]), _rewrap(env)]
        with pytest.raises(ProtocolError, match="mixed"):
            aggregate_round(blobs, GAMMA)

    def test_unconverged_rejected_at_aggregator(self):
        fit = make_fit([0.1, 0.2], np.eye(2), 0.01 * np.eye(2), converged=False)
        blob = payload.encode(fit, allow_unconverged=True)
        with pytest.raises(ProtocolError, match="converge"):
            aggregate_round([blob], GAMMA)


class TestHttp:
    def test_one_round(self, center_fits, server):
        _, fits = center_fits
        blobs = [payload.encode(f) for f in fits]
        for i, b in enumerate(blobs):
            assert submit_payload(server.url, f"c{i}", b) == {"accepted": f"c{i}"}
        reply = request_aggregation(server.url)
        agg = server.aggregator
        assert agg.submission_count == 3 and agg.aggregation_count == 1
        file_est, _ = aggregate_round(blobs, GAMMA, expected=3)
        assert reply["estimate"]["theta_bfi"] == [float(x) for x in file_est.theta_bfi]
        assert agg.result is not None and np.array_equal(agg.result.theta_bfi, file_est.theta_bfi)
        with pytest.raises(ProtocolError, match="already"):
            request_aggregation(server.url)
        with pytest.raises(ProtocolError, match="closed"):
            submit_payload(server.url, "late", blobs[0])
        assert agg.aggregation_count == 1

    def test_partial_set_refused_then_override(self, center_fits, server):
        _, fits = center_fits
        for i, f in enumerate(fits[:2]):
            submit_payload(server.url, f"c{i}", payload.encode(f))
        with pytest.raises(ProtocolError, match="partial"):
            request_aggregation(server.url)
        assert server.aggregator.state == "collecting"
        reply = request_aggregation(server.url, expected=2)
        assert reply["estimate"]["L"] == 2

    def test_duplicate_center(self, center_fits, server):
        blob = payload.encode(center_fits[1][0])
        submit_payload(server.url, "a", blob)
        with pytest.raises(ProtocolError, match="409"):
            submit_payload(server.url, "a", blob)
        assert server.aggregator.submission_count == 1

    def test_garbage_payload(self, server):
        with pytest.raises(ProtocolError):
            submit_payload(server.url, "x", b"not json")
        assert server.aggregator.submission_count == 0

    def test_status_has_no_parameters(self, server):
        with urllib.request.urlopen(server.url + "/v1/status") as r:
            status = json.loads(r.read())
        assert set(status) == {"state", "centers", "submissions", "aggregations", "expected"}

    def test_parse_addr(self, monkeypatch):
        monkeypatch.setenv("BFI_SERVE_ADDR", "0.0.0.0:9999")
        assert parse_addr(None) == ("0.0.0.0", 9999)
        assert parse_addr("localhost:1") == ("localhost", 1)
        monkeypatch.delenv("BFI_SERVE_ADDR")
        assert parse_addr(None) == ("127.0.0.1", 8765)
