import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dllm import textembed as te


def test_embed_is_deterministic():
    a = te.embed("attack the zombie")
    b = te.embed("attack the zombie")
    assert np.array_equal(a.vector, b.vector)
    assert te.cosine(a, b) == 1.0


def test_embed_empty_text_errors():
    with pytest.raises(te.EmptyTextError):
        te.embed("")
    with pytest.raises(te.EmptyTextError):
        te.embed("   \t ...")


def test_shared_tokens_give_intermediate_cosine():
    a = te.embed("attack the zombie")
    b = te.embed("attack the cow")
    c = te.cosine(a, b)
    assert 0.0 < c < 1.0
    # brute-force token-hash oracle
    dim = te.EMBED_DIM

    def bag(text):
        vec = np.zeros(dim)
        for tok in te.tokenize(text):
            idx = te._fnv1a(tok) % dim
            sign = 1.0 if te._fnv1a("#" + tok) % 2 == 0 else -1.0
            vec[idx] += sign
        return vec / np.linalg.norm(vec)

    expected = float(np.dot(bag("attack the zombie"), bag("attack the cow")))
    assert c == pytest.approx(expected, abs=1e-12)


def test_cosine_self_and_negation():
    a = te.embed("collect the wood")
    neg = te.SentenceEmbedding(-a.vector, a.source_text)
    assert te.cosine(a, a) == 1.0
    assert te.cosine(a, neg) == -1.0


def test_cosine_matches_dot_oracle(rng):
    v1 = rng.standard_normal(te.EMBED_DIM)
    v2 = rng.standard_normal(te.EMBED_DIM)
    v1 /= np.linalg.norm(v1)
    v2 /= np.linalg.norm(v2)
    a = te.SentenceEmbedding(v1, "a")
    b = te.SentenceEmbedding(v2, "b")
    expected = sum(float(x) * float(y) for x, y in zip(v1, v2))
    assert te.cosine(a, b) == pytest.approx(expected, abs=1e-12)


def test_cosine_dimension_mismatch():
    a = te.embed("wood", dim=32)
    b = te.embed("wood", dim=64)
    with pytest.raises(te.DimensionMismatchError):
        te.cosine(a, b)


@settings(max_examples=60)
@given(st.text(alphabet=st.characters(min_codepoint=32, max_codepoint=126), min_size=1))
def test_unit_norm_property(text):
    try:
        e = te.embed(text)
    except te.EmptyTextError:
        return
    assert abs(np.linalg.norm(e.vector) - 1.0) <= 1e-9


def test_token_order_is_irrelevant():
    assert np.array_equal(
        te.embed("the zombie attack").vector,
        te.embed("attack the zombie").vector,
    )


DISJOINT_PAIRS = [
    ("alpha bravo", "charlie delta"),
    ("echo foxtrot", "golf hotel"),
    ("india juliet", "kilo lima"),
    ("mike november", "oscar papa"),
    ("quebec romeo", "sierra tango"),
    ("uniform victor", "whiskey xray"),
    ("yankee zulu", "anchor breeze"),
    ("candle drift", "ember frost"),
    ("gale harbor", "isle jungle"),
    ("keel lantern", "mast nettle"),
    ("oak pine", "quartz reef"),
    ("sail tide", "umber vapor"),
    ("wharf yarn", "zephyr apple"),
    ("banana cherry", "date elder"),
    ("fig grape", "honey iris"),
    ("jade kite", "lotus maple"),
    ("nectar olive", "peach quince"),
    ("rose sage", "thyme umbra"),
    ("violet walnut", "yucca zinnia"),
    ("amber bronze", "copper dust"),
    ("emerald flint", "granite hail"),
    ("ivory jasper", "kelp lava"),
    ("marble night", "onyx pearl"),
    ("quill rust", "slate topaz"),
    ("urchin vine", "willow xenon"),
    ("azure bloom", "cedar dawn"),
    ("ebony fern", "glade hollow"),
    ("ice jet", "knoll lake"),
    ("moss nook", "orchid plume"),
    ("quarry ridge", "spruce trail"),
    ("upland vale", "wind xylem"),
    ("yarrow zenith", "aspen birch"),
    ("clover dew", "elm fog"),
    ("grove heath", "inlet juniper"),
    ("krill loam", "mire newt"),
    ("otter pond", "quay river"),
    ("shore turf", "under vault"),
    ("wave xeric", "yield zone"),
    ("arc beam", "cone disk"),
    ("edge frame", "grid hull"),
    ("iron joint", "knob lever"),
    ("mesh node", "orbit pivot"),
    ("quirk rail", "shaft truss"),
    ("unit vent", "wedge yoke"),
    ("axis bolt", "clamp duct"),
    ("expanse field", "gorge hilltop"),
    ("inland jetty", "kiln lodge"),
    ("meadow notch", "outpost prairie"),
    ("quicksand ravine", "summit tundra"),
    ("upstream valley", "waterfall zigzag"),
]


def test_disjoint_pairs_cosine_below_half():
    assert len(DISJOINT_PAIRS) == 50
    for left, right in DISJOINT_PAIRS:
        assert not set(te.tokenize(left)) & set(te.tokenize(right))
        c = te.cosine(te.embed(left), te.embed(right))
        assert abs(c) < 0.5, (left, right, c)


def test_vocabulary_round_trip(tmp_path):
    captions = ["collect the wood", "place the table", "noop"]
    vocab = te.CaptionVocabulary(captions)
    assert len(vocab) == 3
    assert vocab.index_of("noop") == 2
    assert vocab.caption_at(0) == "collect the wood"
    path = tmp_path / "vocab.txt"
    vocab.save(path)
    loaded = te.CaptionVocabulary.load(path)
    assert loaded.captions == captions
    assert np.array_equal(loaded.embeddings, vocab.embeddings)


def test_vocabulary_rejects_duplicates():
    with pytest.raises(ValueError):
        te.CaptionVocabulary(["a", "a"])


def test_vocabulary_nearest():
    vocab = te.CaptionVocabulary(["collect the wood", "place the table"])
    idx, sim = vocab.nearest(te.embed("collect the wood"))
    assert idx == 0
    assert sim == pytest.approx(1.0)
