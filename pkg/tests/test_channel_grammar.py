import json
import random
from collections import Counter

import pytest

from core.channel_grammar import (
    build_flow_graph, export_sankey, parse_channel_name, reassemble_channel_name, tokenize,
    tokenize_event, tokenize_grammar,
)
from data_models.schemas import ChannelParts
from utils.errors import BadDeviceInstance, EmptyResult, ForbiddenCharacter, NotConvention


def test_event_tokenizer_keeps_alphanumeric_runs():
    assert tokenize_event("SR07U:GDS1E:BC02").tokens == ("SR07U", "GDS1E", "BC02")
    assert tokenize_event("SR01C___BPM1___AM00", "BPM heartbeat").tokens == ("SR01C", "BPM1", "AM00", "BPM",
                                                                                "heartbeat")


def test_grammar_tokenizer_splits_letter_digit_boundaries():
    assert tokenize_grammar("SR07U:GDS1E:BC02").tokens == ("SR", "07", "U", "GDS", "1", "E", "BC", "02")
    assert tokenize_grammar("SR07U:GDS1E:BC02", strip_numbers=True).tokens == ("SR", "U", "GDS", "E", "BC")


def test_tokenizers_raise_on_empty_content():
    with pytest.raises(EmptyResult):
        tokenize_event(":::")
    with pytest.raises(EmptyResult):
        tokenize_grammar("1:2:3", strip_numbers=True)


def test_tokenize_dispatch():
    assert tokenize("event", "SR:DCCT5:Ok").tokens == ("SR", "DCCT5", "Ok")
    assert tokenize("grammar", "SR:DCCT5:Ok").tokens == ("SR", "DCCT", "5", "Ok")
    assert tokenize("grammar_stripped", "SR:DCCT5:Ok").tokens == ("SR", "DCCT", "Ok")
    with pytest.raises(ValueError):
        tokenize("bpe", "SR:DCCT5:Ok")


def test_parse_channel_name_examples():
    parts = parse_channel_name("SR01C:BPM12-X:Offset_")
    assert parts == ChannelParts(sys_subsys="SR01C", device="BPM", signal="Offset", device_instance=12,
                                 sub_device="X", is_private=True)
    plain = parse_channel_name("SR:DCCT:Ok")
    assert plain.device_instance is None and plain.sub_device is None and not plain.is_private


def test_signal_may_contain_colons():
    assert parse_channel_name("FE01BL3:PSS:Is:Open").signal == "Is:Open"


def test_parse_channel_name_rejections():
    with pytest.raises(NotConvention):
        parse_channel_name("SR01C___BPM1___AM00")
    with pytest.raises(NotConvention):
        parse_channel_name("SR01C::Offset")
    with pytest.raises(BadDeviceInstance):
        parse_channel_name("SR01C:BPM07:Offset")
    with pytest.raises(ForbiddenCharacter):
        parse_channel_name("SR01C:BPM1:Off.set")
    with pytest.raises(ForbiddenCharacter):
        parse_channel_name("SR01C:BPM1-X-Y:Offset")


def _random_conforming_names(n, seed):
    rng = random.Random(seed)
    letters = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz"
    word = lambda k: "".join(rng.choice(letters) for _ in range(k))  # noqa: E731
    names = []
    for _ in range(n):
        device = word(rng.randint(1, 6))
        if rng.random() < 0.7:
            device += str(rng.randint(0, 999))
        if rng.random() < 0.3:
            device += "-" + word(rng.randint(1, 3))
        signal = word(rng.randint(1, 8)) + ("_" if rng.random() < 0.2 else "")
        names.append(f"{word(2)}{rng.randint(0, 99):02d}{word(1)}:{device}:{signal}")
    return names


def test_parse_then_reassemble_is_identity_on_conforming_names():
    for name in _random_conforming_names(10_000, seed=7):
        parts = parse_channel_name(name)
        assert reassemble_channel_name(parts) == name
        assert not parts.device[-1].isdigit()


def test_reassemble_channel_name_example():
    parts = ChannelParts(sys_subsys="SR01C", device="BPM", signal="Offset", device_instance=12, sub_device="X",
                         is_private=True)
    assert reassemble_channel_name(parts) == "SR01C:BPM12-X:Offset_"


def test_flow_graph_counts_duplicate_paths():
    graph = build_flow_graph(["SR01C:BPM", "SR01C:BPM", "SR02C:BPM"], strip_numbers=True)
    assert graph.nodes[(0, "SR")] == 3
    assert graph.nodes[(2, "BPM")] == 3
    assert graph.edges[(0, "SR", "C")] == 3
    assert graph.edges[(1, "C", "BPM")] == 3
    assert graph.skipped == 0


def test_flow_graph_tallies_unusable_names():
    graph = build_flow_graph(["123", "SR"], strip_numbers=True)
    assert graph.skipped == 1
    assert graph.nodes == {(0, "SR"): 1}


def test_flow_graph_conserves_counts():
    names = _random_conforming_names(1000, seed=11)
    graph = build_flow_graph(names)
    paths = [tokenize_grammar(n).tokens for n in names]

    brute_nodes = Counter((d, t) for p in paths for d, t in enumerate(p))
    brute_edges = Counter((d, p[d], p[d + 1]) for p in paths for d in range(len(p) - 1))
    assert graph.nodes == dict(brute_nodes)
    assert graph.edges == dict(brute_edges)

    incoming, outgoing = Counter(), Counter()
    for (depth, src, dst), count in graph.edges.items():
        outgoing[(depth, src)] += count
        incoming[(depth + 1, dst)] += count
    ending = Counter((len(p) - 1, p[-1]) for p in paths)

    for (depth, token), count in graph.nodes.items():
        if depth > 0:
            assert incoming[(depth, token)] == count
        assert outgoing[(depth, token)] + ending[(depth, token)] == count


def test_sankey_export_is_stable_and_sorted():
    graph = build_flow_graph(["SR01C:BPM", "FE01:PSS"], strip_numbers=True)
    text = export_sankey(graph)
    assert text == export_sankey(build_flow_graph(["SR01C:BPM", "FE01:PSS"], strip_numbers=True))
    doc = json.loads(text)
    keys = [(n["depth"], n["token"]) for n in doc["nodes"]]
    assert keys == sorted(keys)
    assert [n["id"] for n in doc["nodes"]] == list(range(len(keys)))
    assert doc["links"] == sorted(doc["links"], key=lambda link: (link["source_id"], link["target_id"]))


def test_sankey_export_of_empty_graph():
    assert export_sankey(build_flow_graph([])) == '{"nodes":[],"links":[]}'


def test_stripped_grammar_tokens_never_contain_digits():
    for name in _random_conforming_names(10_000, seed=5):
        try:
            tokens = tokenize_grammar(name, strip_numbers=True).tokens
        except EmptyResult:
            continue
        assert not any(ch.isdigit() for tok in tokens for ch in tok)


def test_grammar_tokens_refine_event_tokens():
    rng = random.Random(21)
    descriptions = ["", "Front end shutter open", "BPM heartbeat", "Beam current lost 2x"]
    for name in _random_conforming_names(2000, seed=13):
        description = rng.choice(descriptions)
        event_tokens = tokenize_event(name, description).tokens
        refined = [piece for tok in event_tokens for piece in tokenize_grammar(tok).tokens]
        assert refined == list(tokenize("grammar", name, description).tokens)
        for tok in event_tokens:
            assert "".join(tokenize_grammar(tok).tokens) == tok


def test_tokenizers_are_idempotent_on_their_own_tokens():
    for name in _random_conforming_names(2000, seed=17):
        for tok in tokenize_event(name).tokens:
            assert tokenize_event(tok).tokens == (tok,)
        for tok in tokenize_grammar(name).tokens:
            assert tokenize_grammar(tok).tokens == (tok,)


def test_non_ascii_description_words_stay_whole():
    assert tokenize_event("SR01C:BPM1:Ok", "été ok").tokens == ("SR01C", "BPM1", "Ok", "été", "ok")
    assert tokenize_grammar("été2").tokens == ("été", "2")
    assert tokenize_grammar("été2", strip_numbers=True).tokens == ("été",)
