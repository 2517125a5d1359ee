"""Regex extraction of collection metadata, token links and trade events
from raw marketplace response bodies.

The overview endpoint returns minified JSON; fields are pulled out by
pattern scanning rather than full JSON parsing so that layout drift in
unrelated parts of the body does not break discovery.  Matches of the
three patterns are zipped by index, which is only sound when their counts
agree, so a count mismatch is a hard error.
"""

from __future__ import annotations

import json
import re

from .model import CollectionRef, PipelineError, TradeEvent

# Collection names are captured up to the first quote character; names
# containing embedded (even backslash-escaped) quotes are truncated there.
COLLECTION_ID_PATTERN = re.compile(r'"collection_id":"([A-Za-z0-9]*)"')
VOLUME_PATTERN = re.compile(r'"volume":([\.0-9]*),')
COLLECTION_NAME_PATTERN = re.compile(r'"collection_name":\s*"(.*?)"')
TOKEN_LINK_PATTERN = re.compile(r'<a href="/token/([a-zA-Z0-9]*)"')


class ExtractionError(PipelineError):
    """Pattern counts disagree or a matched field cannot be interpreted."""


class ActivityParseError(PipelineError):
    """An activities body is not the expected JSON array of objects."""


def parse_collection_overview(body: str) -> list[CollectionRef]:
    """Scan an overview body for (collection_id, volume, collection_name)
    triples, zipped by match index.

    Duplicate collection_ids keep the first occurrence.  Raises
    ExtractionError when the three pattern counts differ.
    """
    ids = COLLECTION_ID_PATTERN.findall(body)
    volumes = VOLUME_PATTERN.findall(body)
    names = COLLECTION_NAME_PATTERN.findall(body)
    if not (len(ids) == len(volumes) == len(names)):
        raise ExtractionError(
            "overview pattern count mismatch: "
            f"{len(ids)} collection_id, {len(volumes)} volume, {len(names)} collection_name"
        )
    refs: list[CollectionRef] = []
    seen: set[str] = set()
    for cid, vol, name in zip(ids, volumes, names):
        if cid in seen:
            continue
        seen.add(cid)
        try:
            refs.append(CollectionRef(collection_id=cid, collection_name=name, volume=float(vol)))
        except ValueError as exc:
            raise ExtractionError(f"overview field unusable for {cid!r}: {exc}") from exc
    return refs


def parse_token_links(body: str) -> list[str]:
    """Return token addresses from anchor hrefs, first-appearance order,
    duplicates removed."""
    return list(dict.fromkeys(TOKEN_LINK_PATTERN.findall(body)))


def parse_activity_page(body: str) -> list[TradeEvent]:
    """Parse one activities page (JSON array of objects with type,
    blockTime, price) into TradeEvents.

    blockTime is coerced to int (the API serves it both as number and as
    string), price to float.  Errors name the offending element index.
    """
    try:
        raw = json.loads(body)
    except json.JSONDecodeError as exc:
        raise ActivityParseError(f"activities body is not valid JSON ({exc})") from exc
    if not isinstance(raw, list):
        raise ActivityParseError("activities body is not a JSON array")
    events: list[TradeEvent] = []
    for i, item in enumerate(raw):
        if not isinstance(item, dict):
            raise ActivityParseError(f"activities element {i}: not an object")
        missing = {"type", "blockTime", "price"} - item.keys()
        if missing:
            raise ActivityParseError(f"activities element {i}: missing key(s) {sorted(missing)}")
        try:
            events.append(
                TradeEvent(
                    event_type=str(item["type"]),
                    block_time=int(item["blockTime"]),
                    price=float(item["price"]),
                )
            )
        except (TypeError, ValueError) as exc:
            raise ActivityParseError(f"activities element {i}: {exc}") from exc
    return events
