#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "rediff/grammar.hpp"
#include "rediff/vocab.hpp"

using namespace rediff;

namespace {
const CaptionGrammar& grammar() {
    static CaptionGrammar g = CaptionGrammar::load(default_grammar_path());
    return g;
}
const Vocab& vocab() {
    static Vocab v = Vocab::build(grammar());
    return v;
}
}  // namespace

TEST_CASE("vocabulary is closed over the grammar and small") {
    REQUIRE(vocab().size() < 256);
    for (const auto& t : grammar().terminals()) {
        REQUIRE(vocab().contains(t));
        REQUIRE_FALSE(vocab().token(Vocab::MASK) == t);
    }
    // stable ids: rebuilding from the same grammar gives identical ids
    const Vocab again = Vocab::build(grammar());
    REQUIRE(again.hash() == vocab().hash());
    REQUIRE(again.size() == vocab().size());
    for (int i = 0; i < again.size(); ++i) REQUIRE(again.token(i) == vocab().token(i));
}

TEST_CASE("encode of empty text is all PAD with zero length") {
    const auto seq = encode("", vocab(), 16);
    REQUIRE(seq.length == 0);
    for (int id : seq.ids) REQUIRE(id == Vocab::PAD);
    REQUIRE(decode(seq, vocab()).empty());
}

TEST_CASE("encode/decode round trip on grammar captions") {
    for (uint64_t s = 0; s < 1000; ++s) {
        const auto caption = grammar().render_caption(generate_scene(s), s + 1);
        const auto seq = encode(caption, vocab(), 64);
        REQUIRE(decode(seq, vocab()) == caption);
    }
}

TEST_CASE("unknown surface forms raise UnknownToken") {
    try {
        encode("a small zzz ball", vocab(), 16);
        FAIL("expected UnknownToken");
    } catch (const UnknownToken& ex) {
        REQUIRE(ex.token == "zzz");
    }
}

TEST_CASE("MASK renders visibly, PAD is suppressed") {
    TokenSequence seq;
    seq.ids.assign(8, Vocab::PAD);
    seq.ids[0] = Vocab::MASK;
    seq.ids[1] = Vocab::MASK;
    seq.length = 2;
    REQUIRE(decode(seq, vocab()) == "<mask> <mask>");
}

TEST_CASE("pad tail never appears in decoded text") {
    const auto seq = encode("a small red ball in the center .", vocab(), 64);
    const auto text = decode(seq, vocab());
    REQUIRE(text.find("<pad>") == std::string::npos);
}

TEST_CASE("make_response appends EOS and caption_words cuts at it") {
    const auto seq = make_response("a small red ball in the center .", vocab(), 64);
    REQUIRE(seq.ids[seq.length - 1] == Vocab::EOS);
    const auto words = caption_words(seq, vocab());
    REQUIRE(join_words(words) == "a small red ball in the center .");
}

TEST_CASE("vocab file round trip preserves ids") {
    const auto path = std::filesystem::temp_directory_path() / "rediff_vocab_test.txt";
    vocab().save(path.string());
    const Vocab loaded = Vocab::load(path.string());
    REQUIRE(loaded.hash() == vocab().hash());
    std::filesystem::remove(path);
}

TEST_CASE("scene encoding is within budget and uses only vocab ids") {
    for (uint64_t s = 0; s < 200; ++s) {
        const auto scene = generate_scene(s);
        const auto seq = encode_scene(scene, vocab(), grammar(), 30);
        REQUIRE(seq.length <= 30);
        for (int id : seq.ids) {
            REQUIRE(id >= 0);
            REQUIRE(id < vocab().size());
        }
    }
}
