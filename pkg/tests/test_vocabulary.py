import json

import httpx
import pytest
from hypothesis import given
from hypothesis import strategies as st

from neuronexplain.vocabulary import (
    Concept,
    FixtureMissingError,
    LLMClient,
    LLMTimeoutError,
    SchemaVersionError,
    UnparseableReplyError,
    Vocabulary,
    VocabularyError,
    build_prompt,
    build_vocabulary,
    load_vocabulary,
    merge_vocabulary,
    normalize_key,
    parse_reply,
    query_descriptors,
    save_vocabulary,
)

GREENHOUSE_PROMPT = (
    "What are useful features for distinguishing a greenhouse in an image? Please give me a list of short phrases."
)


def fixture_client(tmp_path, replies):
    for name, text in replies.items():
        (tmp_path / f"{name}.txt").write_text(text)
    return LLMClient(mode="fixture", fixture_dir=str(tmp_path))


def test_prompt_exact():
    assert build_prompt("greenhouse") == GREENHOUSE_PROMPT
    assert build_prompt("  greenhouse ") == GREENHOUSE_PROMPT


@pytest.mark.parametrize("name", ["", "   "])
def test_prompt_empty(name):
    with pytest.raises(VocabularyError, match="empty class name"):
        build_prompt(name)


@pytest.mark.parametrize(
    "reply, expected",
    [
        ("- glass walls\n- rows of plants", ["glass walls", "rows of plants"]),
        ("* glass walls\n* rows of plants\n", ["glass walls", "rows of plants"]),
        ("1. glass walls\n2) rows of plants", ["glass walls", "rows of plants"]),
        ("glass walls\nrows of plants", ["glass walls", "rows of plants"]),
        ("Here are features:\n\n- glass walls\n- **rows of plants**", ["glass walls", "rows of plants"]),
        (
            "1. a structure made of glass or transparent material",
            ["a structure made of glass or transparent material"],
        ),
    ],
)
def test_parse_reply(reply, expected):
    assert parse_reply(reply) == expected


def test_query_descriptors_tags_source(tmp_path):
    client = fixture_client(tmp_path, {"greenhouse": "1. a structure made of glass or transparent material\n"})
    concepts = query_descriptors(client, "greenhouse")
    assert [c.text for c in concepts] == ["a structure made of glass or transparent material"]
    assert concepts[0].source_classes == ["greenhouse"]


def test_query_descriptors_caps_and_drops_long(tmp_path):
    lines = [f"- feature {i}" for i in range(30)] + ["- " + "x" * 121]
    client = fixture_client(tmp_path, {"cat": "\n".join(lines)})
    concepts = query_descriptors(client, "cat")
    assert [c.text for c in concepts] == [f"feature {i}" for i in range(20)]


def test_unparseable_reply_carries_raw(tmp_path):
    client = fixture_client(tmp_path, {"cat": "Features:\n\n"})
    with pytest.raises(UnparseableReplyError) as info:
        query_descriptors(client, "cat")
    assert info.value.raw == "Features:\n\n"


def test_fixture_missing_names_class(tmp_path):
    client = LLMClient(mode="fixture", fixture_dir=str(tmp_path))
    with pytest.raises(FixtureMissingError, match="zebra"):
        query_descriptors(client, "zebra")


def test_merge_collision():
    v = merge_vocabulary([[Concept("Glass walls", ["a"])], [Concept("glass walls.", ["b"])]])
    assert len(v) == 1
    assert v.concepts[0].text == "Glass walls"
    assert v.concepts[0].source_classes == ["a", "b"]


def test_merge_disjoint():
    a = [Concept(f"a{i}", ["A"]) for i in range(3)]
    b = [Concept(f"b{i}", ["B"]) for i in range(4)]
    assert len(merge_vocabulary([a, b])) == 7


def test_merge_all_empty():
    with pytest.raises(VocabularyError):
        merge_vocabulary([[], []])


phrase = st.text(alphabet=st.sampled_from("abcAB .,!"), min_size=1, max_size=8).filter(lambda s: normalize_key(s))


@given(st.lists(st.lists(phrase, max_size=6), min_size=1, max_size=5).filter(lambda ls: any(ls)))
def test_merge_matches_set_oracle_and_is_idempotent(lists):
    per_class = [[Concept(t, [f"class{i}"]) for t in texts] for i, texts in enumerate(lists)]
    v = merge_vocabulary(per_class)
    # independent dedup oracle: dict of first-seen normalized keys
    oracle = list(dict.fromkeys(" ".join(t.strip().split()).lower().rstrip(" .,;:!?") for ts in lists for t in ts))
    assert [c.key for c in v] == oracle
    again = merge_vocabulary([v.concepts])
    assert again.to_dict() == v.to_dict()


def test_many_classes_vocab_size(tmp_path):
    replies = {}
    all_items = []
    for i in range(1000):
        items = [f"feature {(i * 7 + j) % 300}" for j in range(5)] + [f"Feature {(i + 1) % 300}."]
        replies[f"class_{i}"] = "\n".join(f"- {t}" for t in items)
        all_items.extend(items)
    client = fixture_client(tmp_path, replies)
    vocab = build_vocabulary(client, [f"class_{i}" for i in range(1000)])
    assert len(vocab) == len({t.lower().rstrip(".") for t in all_items})


def test_round_trip(tmp_path):
    v = merge_vocabulary([[Concept("Glass walls", ["a"]), Concept("plants", ["a"])]], "tag", {"k": 1})
    save_vocabulary(v, tmp_path / "v.json")
    back = load_vocabulary(tmp_path / "v.json")
    assert back == v
    assert back.to_json() == v.to_json()


def test_schema_version_error(tmp_path):
    path = tmp_path / "v.json"
    path.write_text(json.dumps({"schema_version": 99, "concepts": [{"text": "a"}]}))
    with pytest.raises(SchemaVersionError, match="99"):
        load_vocabulary(path)


def test_minimal_file(tmp_path):
    path = tmp_path / "v.json"
    path.write_text(json.dumps({"concepts": [{"text": "striped texture"}]}))
    v = load_vocabulary(path)
    assert v.texts == ["striped texture"]
    assert v.concepts[0].source_classes == []
    assert v.dataset_tag == "" and v.provenance == {}


def test_fixture_build_is_byte_reproducible(tmp_path):
    client = fixture_client(tmp_path, {"cat": "- whiskers\n- fur", "dog": "- fur.\n- tail"})
    a = build_vocabulary(client, ["cat", "dog"], dataset_tag="pets")
    b = build_vocabulary(client, ["cat", "dog"], dataset_tag="pets")
    assert a.to_json() == b.to_json()
    assert a.texts == ["whiskers", "fur", "tail"]
    assert a.provenance["created_at"] is None
    assert a.provenance["prompt_template"].startswith("What are useful features")


def test_class_names_flag(tmp_path):
    client = fixture_client(tmp_path, {"cat": "- whiskers"})
    assert build_vocabulary(client, ["cat"]).texts == ["whiskers"]
    assert build_vocabulary(client, ["cat"], add_class_names=True).texts == ["cat", "whiskers"]


def chat_reply(content):
    return httpx.Response(200, json={"choices": [{"message": {"role": "assistant", "content": content}}]})


def test_record_mode_saves_fixture(tmp_path):
    seen = []

    def handler(request):
        seen.append(json.loads(request.content))
        return chat_reply("- glass walls\n- rows of plants")

    client = LLMClient(
        mode="record",
        endpoint="http://llm.invalid/v1/chat/completions",
        fixture_dir=str(tmp_path),
        transport=httpx.MockTransport(handler),
    )
    concepts = query_descriptors(client, "greenhouse")
    assert len(concepts) == 2
    assert seen[0]["messages"][0]["content"] == GREENHOUSE_PROMPT
    replay = LLMClient(mode="fixture", fixture_dir=str(tmp_path))
    assert [c.text for c in query_descriptors(replay, "greenhouse")] == ["glass walls", "rows of plants"]


def test_live_retries_then_timeout():
    calls = {"n": 0}

    def handler(request):
        calls["n"] += 1
        raise httpx.ConnectError("down", request=request)

    client = LLMClient(
        mode="live",
        endpoint="http://llm.invalid/v1",
        retry_budget=2,
        backoff=0,
        transport=httpx.MockTransport(handler),
    )
    with pytest.raises(LLMTimeoutError):
        query_descriptors(client, "cat")
    assert calls["n"] == 3


def test_live_recovers_after_failure():
    calls = {"n": 0}

    def handler(request):
        calls["n"] += 1
        if calls["n"] == 1:
            return httpx.Response(503)
        return chat_reply("- fur")

    client = LLMClient(mode="live", endpoint="http://llm.invalid/v1", backoff=0, transport=httpx.MockTransport(handler))
    assert [c.text for c in query_descriptors(client, "cat")] == ["fur"]


def test_fixture_mode_never_uses_network(tmp_path):
    def handler(request):  # pragma: no cover - must not be reached
        raise AssertionError("network call in fixture mode")

    client = fixture_client(tmp_path, {"cat": "- fur"})
    client.transport = httpx.MockTransport(handler)
    assert len(query_descriptors(client, "cat")) == 1


def test_live_needs_endpoint(monkeypatch):
    monkeypatch.delenv("NEURONEXPLAIN_LLM_ENDPOINT", raising=False)
    with pytest.raises(VocabularyError, match="endpoint"):
        LLMClient(mode="live")


def test_duplicate_keys_rejected():
    with pytest.raises(VocabularyError):
        Vocabulary([Concept("a"), Concept("A.")])
