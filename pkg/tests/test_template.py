import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edgeflow.errors import (
    DuplicateKey,
    IndexMismatch,
    InvalidCron,
    InvalidRef,
    MissingKey,
    TemplateSyntaxError,
    UnknownKey,
)
from edgeflow.template import (
    CronSpec,
    NextSpec,
    StorageRef,
    SyncMode,
    parse_duration,
    parse_flat,
    parse_template,
    parse_template_with_lines,
    render_template,
)

from helpers import CORRUPTIONS, corrupt, random_template

PIPELINE = """\
name: motion-detection
tier: iot
handler: video.motion
sync: sync
input: minio://gop
output: minio://frames
next_function: face-detection
next_tier: edge
"""


class TestStorageRef:
    def test_parse(self):
        r = StorageRef.parse("minio://gop")
        assert (r.backend, r.key) == ("minio", "gop")
        assert str(r) == "minio://gop"

    @pytest.mark.parametrize("text", ["gop", "minio:/gop", "Minio://gop", "minio://", "minio://a b"])
    def test_rejects(self, text):
        with pytest.raises(InvalidRef):
            StorageRef.parse(text)


class TestParse:
    def test_pipeline_stage(self):
        t = parse_template(PIPELINE)
        assert t.name == "motion-detection"
        assert t.sync is SyncMode.SYNC
        assert t.input == StorageRef("minio", "gop")
        assert t.nexts == ((0, NextSpec("face-detection", "edge")),)
        assert not t.is_branching and not t.is_terminal

    def test_comments_and_blank_lines(self):
        t = parse_template("# header\n\n" + PIPELINE.replace("sync: sync", "sync: sync  # inline"))
        assert t.sync is SyncMode.SYNC

    def test_line_numbers(self):
        _, lines = parse_template_with_lines("# c\n" + PIPELINE)
        assert lines["name"] == 2 and lines["next_tier"] == 9

    def test_branching(self):
        text = PIPELINE.replace("output: minio://frames\nnext_function: face-detection\nnext_tier: edge\n",
                                "output1: minio://has_face\noutput2: minio://no_face\n"
                                "next_function1: rec\nnext_tier1: cloud\n"
                                "next_function2: drop\nnext_tier2: edge\n")
        t = parse_template(text)
        assert t.is_branching
        assert t.output_for_branch(2).data_name == "no_face"

    def test_branch_output_without_successor(self):
        text = PIPELINE.replace("output: minio://frames\nnext_function: face-detection\nnext_tier: edge\n",
                                "output1: minio://has_face\noutput2: minio://no_face\n"
                                "next_function1: rec\nnext_tier1: cloud\n")
        t = parse_template(text)
        assert [i for i, _ in t.nexts] == [1]
        assert len(t.outputs) == 2

    def test_numbered_nexts_with_single_output_are_one_to_many(self):
        text = PIPELINE.replace("next_function: face-detection\nnext_tier: edge\n",
                                "next_function1: a\nnext_tier1: edge\nnext_function2: b\nnext_tier2: cloud\n")
        t = parse_template(text)
        assert [i for i, _ in t.nexts] == [0, 0]

    def test_cron(self):
        t = parse_template(PIPELINE + "cron: 3s\ncron_burst: 20\n")
        assert t.cron == CronSpec(3000, 20)

    @pytest.mark.parametrize("value", ["500ms", "0s", "25h", "1.5s", "3", "abc"])
    def test_bad_cron(self, value):
        with pytest.raises(InvalidCron):
            parse_template(PIPELINE + f"cron: {value}\n")

    def test_cron_burst_needs_cron(self):
        with pytest.raises(InvalidCron):
            parse_template(PIPELINE + "cron_burst: 2\n")


class TestErrors:
    def test_syntax_error_carries_line(self):
        with pytest.raises(TemplateSyntaxError) as info:
            parse_template("name: a\n  tier: edge\n")
        assert info.value.line == 2

    def test_duplicate(self):
        with pytest.raises(DuplicateKey) as info:
            parse_template(PIPELINE + "tier: cloud\n")
        assert info.value.line == 9

    def test_unknown_key(self):
        with pytest.raises(UnknownKey):
            parse_template(PIPELINE + "retries: 3\n")

    def test_input1_is_not_a_key(self):
        with pytest.raises(UnknownKey):
            parse_template(PIPELINE.replace("input:", "input1:"))

    def test_missing(self):
        with pytest.raises(MissingKey):
            parse_template(PIPELINE.replace("handler: video.motion\n", ""))

    def test_unpaired_next(self):
        with pytest.raises(IndexMismatch):
            parse_template(PIPELINE.replace("next_tier: edge\n", ""))

    def test_branch_without_output(self):
        text = PIPELINE.replace("output: minio://frames\nnext_function: face-detection\nnext_tier: edge\n",
                                "output1: minio://a\nnext_function1: x\nnext_tier1: edge\n"
                                "next_function2: y\nnext_tier2: edge\n")
        with pytest.raises(IndexMismatch):
            parse_template(text)

    def test_input_gap(self):
        with pytest.raises(IndexMismatch):
            parse_template(PIPELINE + "input3: minio://x\n")

    def test_flat_empty_value(self):
        with pytest.raises(TemplateSyntaxError):
            parse_flat("name:\n")


class TestRender:
    def test_canonical_text_is_fixed_point(self):
        assert render_template(parse_template(PIPELINE)) == PIPELINE

    @settings(max_examples=150, deadline=None)
    @given(st.integers(min_value=0, max_value=2**32))
    def test_round_trip(self, seed):
        t = random_template(random.Random(seed))
        text = render_template(t)
        assert parse_template(text) == t
        assert render_template(parse_template(text)) == text

    @settings(max_examples=150, deadline=None)
    @given(st.integers(min_value=0, max_value=2**32), st.sampled_from(CORRUPTIONS))
    def test_corruptions_raise_their_class(self, seed, kind):
        t = random_template(random.Random(seed))
        text, expected = corrupt(render_template(t), t, kind)
        with pytest.raises(expected):
            parse_template(text)


@pytest.mark.parametrize("text,ms", [("5s", 5000), ("250ms", 250), ("30m", 1_800_000), ("1h", 3_600_000)])
def test_parse_duration(text, ms):
    assert parse_duration(text) == ms
