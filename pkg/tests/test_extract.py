"""Pattern extraction from raw response bodies."""

import pytest

from nftfolio.extract import (
    ActivityParseError,
    ExtractionError,
    parse_activity_page,
    parse_collection_overview,
    parse_token_links,
)


OVERVIEW_ONE = (
    '[{"collection_id":"4Q2C5S930M9c9e96b","volume":3000000,'
    '"collection_name":"Frogman","id":"A2MxSTGcBGTRyK97K"}]'
)


class TestCollectionOverview:
    def test_single_collection(self):
        refs = parse_collection_overview(OVERVIEW_ONE)
        assert len(refs) == 1
        assert refs[0].collection_id == "4Q2C5S930M9c9e96b"
        assert refs[0].collection_name == "Frogman"
        assert refs[0].volume == 3000000.0

    def test_fractional_volume(self):
        body = '{"collection_id":"abc","volume":807080.2,"collection_name":"X"}'
        refs = parse_collection_overview(body)
        assert refs[0].volume == 807080.2

    def test_count_mismatch_reports_all_three_counts(self):
        body = '{"collection_id":"abc","collection_name":"X"}'
        with pytest.raises(ExtractionError, match=r"1 collection_id, 0 volume, 1 collection_name"):
            parse_collection_overview(body)

    def test_duplicate_collection_keeps_first(self):
        body = OVERVIEW_ONE + OVERVIEW_ONE
        refs = parse_collection_overview(body)
        assert len(refs) == 1

    def test_idempotent_on_same_body(self):
        assert parse_collection_overview(OVERVIEW_ONE) == parse_collection_overview(OVERVIEW_ONE)

    def test_empty_body_yields_no_refs(self):
        assert parse_collection_overview("") == []

    def test_volume_requires_compact_layout(self):
        # A space after the colon breaks the volume pattern, which is a
        # count mismatch rather than silent misextraction.
        body = '{"collection_id":"abc","volume": 3000000,"collection_name":"X"}'
        with pytest.raises(ExtractionError):
            parse_collection_overview(body)


class TestTokenLinks:
    def test_ordered_dedup(self):
        body = (
            '<a href="/token/AAA1">x</a> <a href="/token/BBB2">y</a> '
            '<a href="/token/AAA1">x</a>'
        )
        assert parse_token_links(body) == ["AAA1", "BBB2"]

    def test_no_links(self):
        assert parse_token_links("<html><body>nothing here</body></html>") == []


class TestActivityPage:
    def test_parses_and_coerces(self):
        body = '[{"type":"buyNow","blockTime":"1711308573","price":"1.5"},{"type":"list","blockTime":1711308600,"price":2}]'
        events = parse_activity_page(body)
        assert [e.event_type for e in events] == ["buyNow", "list"]
        assert events[0].block_time == 1711308573
        assert events[0].price == 1.5
        assert events[1].block_time == 1711308600

    def test_empty_array(self):
        assert parse_activity_page("[]") == []

    def test_missing_key_names_element(self):
        body = '[{"type":"buyNow","price":1.0}]'
        with pytest.raises(ActivityParseError, match=r"element 0"):
            parse_activity_page(body)

    def test_non_array_rejected(self):
        with pytest.raises(ActivityParseError, match="not a JSON array"):
            parse_activity_page('{"type":"buyNow"}')

    def test_invalid_json_rejected(self):
        with pytest.raises(ActivityParseError):
            parse_activity_page("type type type")
