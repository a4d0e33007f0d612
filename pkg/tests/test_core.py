"""Key grammar, affinity extraction, and shard-mapping behavior."""

import pytest

from affinitysim.core import (PoolRegistry, PoolSpec, compile_affinity_regex,
                              extract_affinity_key, fnv1a64, resolve_pool,
                              shard_for, shard_index_for, validate_key)
from affinitysim.errors import BadRegex, DuplicatePool, MalformedKey, NoSuchPool
from affinitysim.rng import SplitMix64

CLIENT_RX = "/[a-zA-Z0-9]+_"
NUMBER_RX = "/[a-zA-Z0-9]+_[0-9]+_"

# pool, example key, regex, expected label
TABLE1 = [
    ("/frames", "/frames/little3_42", CLIENT_RX, "/little3_"),
    ("/states", "/states/little3_42", CLIENT_RX, "/little3_"),
    ("/positions", "/positions/little3_7_42", NUMBER_RX, "/little3_7_"),
    ("/predictions", "/predictions/little3_42_7", NUMBER_RX, "/little3_42_"),
    ("/cd", "/cd/little3_42_7_5", None, None),
]


class TestValidateKey:
    def test_accepts_table_keys(self):
        for _, key, _, _ in TABLE1:
            assert validate_key(key) == key

    def test_missing_leading_slash(self):
        with pytest.raises(MalformedKey):
            validate_key("frames/little3")

    def test_bare_slash_is_empty_segment(self):
        with pytest.raises(MalformedKey):
            validate_key("/")

    def test_empty_and_whitespace(self):
        with pytest.raises(MalformedKey):
            validate_key("")
        with pytest.raises(MalformedKey):
            validate_key("/frames/lit tle")
        with pytest.raises(MalformedKey):
            validate_key("/frames//x")

    def test_trailing_slash_rejected(self):
        with pytest.raises(MalformedKey):
            validate_key("/frames/")


class TestRegexDialect:
    def test_table_regexes_compile(self):
        compile_affinity_regex(CLIENT_RX)
        compile_affinity_regex(NUMBER_RX)
        compile_affinity_regex("_[0-9]+")

    @pytest.mark.parametrize("pattern", [
        r"(a)\1",          # backreference
        r"(?P<x>a)(?P=x)",  # named backreference
        r"a(?=b)",         # lookahead
        r"a(?!b)",
        r"(?<=a)b",        # lookbehind
        r"(?<!a)b",
    ])
    def test_nonlinear_constructs_rejected(self, pattern):
        with pytest.raises(BadRegex):
            compile_affinity_regex(pattern)

    def test_syntax_error_rejected(self):
        with pytest.raises(BadRegex):
            compile_affinity_regex("[unclosed")
        with pytest.raises(BadRegex):
            compile_affinity_regex("")


class TestExtraction:
    def test_table1_rows(self):
        for _, key, regex, expected in TABLE1:
            if regex is None:
                continue
            assert extract_affinity_key(regex, key) == expected

    def test_listing_style_suffix_group(self):
        assert extract_affinity_key("_[0-9]+", "/grouping/example_1") == "_1"

    def test_no_match_is_none(self):
        assert extract_affinity_key("/[0-9]+_", "/frames/little3") is None

    def test_leftmost_match_wins(self):
        # both "_7_" and "_42_" could match; leftmost is taken
        assert extract_affinity_key("_[0-9]+_", "/p/a_7_42_1") == "_7_"

    def test_deterministic(self):
        for _ in range(3):
            assert extract_affinity_key(NUMBER_RX, "/positions/little3_7_42") == "/little3_7_"


class TestResolvePool:
    def _registry(self):
        reg = PoolRegistry()
        for path, _, regex, _ in TABLE1:
            reg.register(PoolSpec(path, 3, 1, affinity_regex=regex))
        return reg

    def test_resolves_each_example(self):
        reg = self._registry()
        for path, key, _, _ in TABLE1:
            assert resolve_pool(key, reg).path == path

    def test_segment_boundary_rule(self):
        reg = PoolRegistry()
        reg.register(PoolSpec("/frames", 1, 1))
        with pytest.raises(NoSuchPool):
            reg.resolve("/framesX/a")

    def test_duplicate_and_nested_rejected(self):
        reg = self._registry()
        with pytest.raises(DuplicatePool):
            reg.register(PoolSpec("/frames", 1, 1))
        with pytest.raises(DuplicatePool):
            reg.register(PoolSpec("/frames/sub", 1, 1))


class TestShardMapping:
    def test_fnv_reference_vectors(self):
        assert fnv1a64("") == 0xCBF29CE484222325
        assert fnv1a64("a") == 0xAF63DC4C8601EC8C

    def test_pinned_position_placement(self):
        # frozen from an independent FNV-1a evaluation of the label
        assert fnv1a64("/little3_7_") == 6030406801992300898
        pool = PoolSpec("/positions", 5, 1, affinity_regex=NUMBER_RX)
        index, label = shard_index_for(pool, "/positions/little3_7_42")
        assert label == "/little3_7_"
        assert index == 6030406801992300898 % 5 == 3

    def test_same_label_same_shard(self):
        pool = PoolSpec("/frames", 3, 1, affinity_regex=CLIENT_RX)
        a = shard_for(pool, "/frames/little3_42")
        b = shard_for(pool, "/frames/little3_43")
        assert a == b

    def test_single_shard_always_zero(self):
        pool = PoolSpec("/frames", 1, 1, affinity_regex=CLIENT_RX)
        for k in range(20):
            assert shard_for(pool, f"/frames/gates3_{k}").index == 0

    def test_no_regex_hashes_full_key(self):
        pool = PoolSpec("/frames", 7, 1)
        for k in range(50):
            key = f"/frames/little3_{k}"
            index, label = shard_index_for(pool, key)
            assert label is None
            assert index == fnv1a64(key) % 7

    def test_no_match_falls_back_to_full_key(self):
        pool = PoolSpec("/frames", 7, 1, affinity_regex="/[0-9]+_")
        key = "/frames/little3"
        index, label = shard_index_for(pool, key)
        assert label is None
        assert index == fnv1a64(key) % 7

    def test_coresidency_over_generated_keys(self):
        pool = PoolSpec("/positions", 5, 1, affinity_regex=NUMBER_RX)
        rng = SplitMix64(2024)
        by_label = {}
        for _ in range(2000):
            client = f"c{rng.randint(8)}"
            actor = rng.randint(30)
            frame = rng.randint(500)
            key = f"/positions/{client}_{actor}_{frame}"
            index, label = shard_index_for(pool, key)
            assert label == f"/{client}_{actor}_"
            assert by_label.setdefault(label, index) == index

    def test_balance_within_15_percent(self):
        rng = SplitMix64(99)
        alphabet = "abcdefghijklmnopqrstuvwxyz0123456789"
        labels = []
        seen = set()
        while len(labels) < 10_000:
            name = "".join(alphabet[rng.randint(36)]
                           for _ in range(3 + rng.randint(10)))
            label = f"/{name}_"
            if label not in seen:
                seen.add(label)
                labels.append(label)
        for shards in (3, 5, 8):
            counts = [0] * shards
            for label in labels:
                counts[fnv1a64(label) % shards] += 1
            ideal = len(labels) / shards
            for count in counts:
                assert abs(count - ideal) <= 0.15 * ideal
