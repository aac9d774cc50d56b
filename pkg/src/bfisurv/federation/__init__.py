"""Payload format and one-round exchange between centers and the aggregator."""

from .exchange import (
    Aggregator,
    AggregatorServer,
    aggregate_round,
    read_payload_files,
    request_aggregation,
    submit_payload,
)
from .payload import MEDIA_TYPE, SCHEMA_VERSION, decode, encode, encode_order_bundle

__all__ = [
    "Aggregator",
    "AggregatorServer",
    "MEDIA_TYPE",
    "SCHEMA_VERSION",
    "aggregate_round",
    "decode",
    "encode",
    "encode_order_bundle",
    "read_payload_files",
    "request_aggregation",
    "submit_payload",
]
