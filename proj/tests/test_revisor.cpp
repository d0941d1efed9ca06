#include <catch2/catch_amalgamated.hpp>

#include "rediff/eval.hpp"
#include "rediff/revisor.hpp"

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

TokenSequence response_of(const Scene& scene, uint64_t render_seed) {
    return make_response(grammar().render_caption(scene, render_seed), vocab(), 64);
}

int mismatches_vs_scene(const Scene& scene, const TokenSequence& seq) {
    const auto parsed = grammar().parse_caption(caption_words(seq, vocab()));
    REQUIRE(parsed.validity == 1.0);
    REQUIRE(parsed.objects.size() == scene.objects.size());
    int bad = 0;
    for (size_t k = 0; k < scene.objects.size(); ++k)
        if (!(parsed.objects[k].attrs == scene.objects[k])) ++bad;
    return bad;
}
}  // namespace

TEST_CASE("a ground-truth draft is judged right") {
    for (uint64_t s = 0; s < 200; ++s) {
        const Scene scene = generate_scene(s);
        const auto review = oracle_revise(scene, response_of(scene, s + 5), grammar(), vocab());
        REQUIRE(review.status == ReviewStatus::Right);
        REQUIRE(review.pairs.empty());
    }
}

TEST_CASE("one wrong color yields one equal-length pair that restores it") {
    const Scene scene = generate_scene(101);
    auto draft = response_of(scene, 3);
    const auto parsed = grammar().parse_caption(caption_words(draft, vocab()));
    const auto& po = parsed.objects[0];
    const Color actual = scene.objects[0].color;
    const Color wrong = actual == Color::Blue ? Color::Green : Color::Blue;
    draft.ids[po.color_pos] = vocab().id(grammar().color_word(wrong));

    const auto review = oracle_revise(scene, draft, grammar(), vocab());
    REQUIRE(review.status == ReviewStatus::Revised);
    REQUIRE(review.pairs.size() == 1);
    REQUIRE(review.pairs[0].org.size() == review.pairs[0].target.size());

    auto [refined, positions] = apply_revisions(draft, review.pairs);
    REQUIRE(mismatches_vs_scene(scene, refined) == 0);
    REQUIRE_FALSE(positions.empty());
}

TEST_CASE("a duplicated word is repaired by an equal-length aligned pair") {
    const Scene scene = generate_scene(7);
    auto draft = response_of(scene, 0);
    const auto parsed = grammar().parse_caption(caption_words(draft, vocab()));
    const auto& po = parsed.objects[0];
    draft.ids[po.color_pos] = draft.ids[po.cat_pos];  // e.g. "a small ball ball ..."

    const auto review = oracle_revise(scene, draft, grammar(), vocab());
    REQUIRE(review.status == ReviewStatus::Revised);
    for (const auto& p : review.pairs) REQUIRE(p.org.size() == p.target.size());

    auto [refined, positions] = apply_revisions(draft, review.pairs);
    REQUIRE(mismatches_vs_scene(scene, refined) == 0);
}

TEST_CASE("count corrections fix number agreement along the way") {
    Scene scene = generate_scene(55);
    while (scene.objects[0].count != 1) scene = generate_scene(scene.seed + 1);
    auto draft = response_of(scene, 2);
    const auto parsed = grammar().parse_caption(caption_words(draft, vocab()));
    const auto& po = parsed.objects[0];
    // claim there are three of them: breaks agreement with the singular noun
    draft.ids[po.count_pos] = vocab().id(grammar().count_word(3));

    const auto review = oracle_revise(scene, draft, grammar(), vocab());
    REQUIRE(review.status == ReviewStatus::Revised);
    auto [refined, positions] = apply_revisions(draft, review.pairs);
    REQUIRE(mismatches_vs_scene(scene, refined) == 0);
}

TEST_CASE("drafts with the wrong sentence count are unalignable") {
    Scene scene = generate_scene(11);
    while (scene.objects.size() < 2) scene = generate_scene(scene.seed + 1);
    Scene truncated = scene;
    truncated.objects.pop_back();
    const auto short_draft = response_of(truncated, 1);
    const auto review = oracle_revise(scene, short_draft, grammar(), vocab());
    REQUIRE(review.status == ReviewStatus::Unalignable);
}

TEST_CASE("drafts containing MASK are unalignable") {
    const Scene scene = generate_scene(13);
    auto draft = response_of(scene, 1);
    draft.ids[2] = Vocab::MASK;
    REQUIRE(oracle_revise(scene, draft, grammar(), vocab()).status ==
            ReviewStatus::Unalignable);
}

TEST_CASE("apply_revisions: empty list returns the draft and no spans") {
    const Scene scene = generate_scene(17);
    const auto draft = response_of(scene, 1);
    auto [refined, positions] = apply_revisions(draft, {});
    REQUIRE(refined.ids == draft.ids);
    REQUIRE(positions.empty());
}

TEST_CASE("apply_revisions error paths") {
    const Scene scene = generate_scene(19);
    const auto draft = response_of(scene, 1);

    RevisionPair missing;
    missing.org = {vocab().id("red"), vocab().id("red"), vocab().id("red")};
    missing.target = {vocab().id("blue"), vocab().id("blue"), vocab().id("blue")};
    REQUIRE_THROWS_AS(apply_revisions(draft, {missing}), SpanNotFound);

    RevisionPair dup;
    dup.org = {vocab().id("the")};  // "the" appears in every position phrase
    dup.target = {vocab().id("a")};
    const int occ = count_occurrences(draft.ids, caption_token_count(draft), dup.org);
    if (occ > 1) REQUIRE_THROWS_AS(apply_revisions(draft, {dup}), SpanNotUnique);

    // overlapping spans: split one unique long span into two overlapping ones
    const int cap = caption_token_count(draft);
    RevisionPair a, b;
    a.org.assign(draft.ids.begin(), draft.ids.begin() + std::min(4, cap));
    a.target = a.org;
    a.target[0] = a.target[0] == vocab().id("a") ? vocab().id("two") : vocab().id("a");
    b.org.assign(draft.ids.begin() + 2, draft.ids.begin() + std::min(6, cap));
    b.target = b.org;
    b.target[0] = b.target[0] == vocab().id("a") ? vocab().id("two") : vocab().id("a");
    if (count_occurrences(draft.ids, cap, a.org) == 1 &&
        count_occurrences(draft.ids, cap, b.org) == 1)
        REQUIRE_THROWS_AS(apply_revisions(draft, {a, b}), OverlappingSpans);
}

TEST_CASE("apply then diff recovers exactly the span set on random cases") {
    Rng rng(71);
    int done = 0;
    for (uint64_t s = 0; done < 1000 && s < 4000; ++s) {
        const Scene scene = generate_scene(s);
        const auto draft = response_of(scene, s);
        const int cap = caption_token_count(draft);

        // synthesize one random pair with a unique org span
        const int len = 1 + static_cast<int>(rng.uniform_int(3));
        if (cap < len) continue;
        const int start = static_cast<int>(rng.uniform_int(cap - len + 1));
        RevisionPair pair;
        pair.org.assign(draft.ids.begin() + start, draft.ids.begin() + start + len);
        if (count_occurrences(draft.ids, cap, pair.org) != 1) continue;
        pair.target = pair.org;
        const int flip = static_cast<int>(rng.uniform_int(len));
        pair.target[flip] = 5 + static_cast<int>(rng.uniform_int(vocab().size() - 5));
        if (pair.target == pair.org) continue;

        auto [refined, positions] = apply_revisions(draft, {pair});
        std::vector<int> expected;
        for (int i = start; i < start + len; ++i) expected.push_back(i);
        REQUIRE(positions == expected);
        for (int i = 0; i < draft.window(); ++i) {
            if (i >= start && i < start + len) REQUIRE(refined.ids[i] == pair.target[i - start]);
            else REQUIRE(refined.ids[i] == draft.ids[i]);
        }
        ++done;
    }
    REQUIRE(done == 1000);
}

TEST_CASE("validate_pair enforces the wire contract") {
    const Scene scene = generate_scene(23);
    const auto draft = response_of(scene, 1);

    RevisionPair unequal;
    unequal.org = {draft.ids[0]};
    unequal.target = {draft.ids[0], draft.ids[1]};
    REQUIRE(validate_pair(draft, unequal).value() == "token count mismatch");

    RevisionPair same;
    same.org = {draft.ids[0]};
    same.target = {draft.ids[0]};
    REQUIRE(validate_pair(draft, same).has_value());  // target equals org

    RevisionPair ok;
    ok.org.assign(draft.ids.begin(), draft.ids.begin() + 3);
    ok.target = ok.org;
    ok.target[1] = ok.target[1] == vocab().id("red") ? vocab().id("blue") : vocab().id("red");
    const auto reason = validate_pair(draft, ok);
    if (count_occurrences(draft.ids, caption_token_count(draft), ok.org) == 1) {
        REQUIRE_FALSE(reason.has_value());
        REQUIRE(ok.start == 0);
    }
}

TEST_CASE("revise then apply always lands on the scene for corrupted drafts") {
    // mirrors the oracle-exactness acceptance criterion at unit scale
    Rng rng(5);
    for (uint64_t s = 0; s < 200; ++s) {
        const Scene scene = generate_scene(s);
        auto draft = response_of(scene, s + 9);
        const auto parsed = grammar().parse_caption(caption_words(draft, vocab()));
        // corrupt one random attribute mention
        const auto mentions = attribute_mentions(parsed, grammar());
        const auto& m = mentions[rng.uniform_int(mentions.size())];
        draft.ids[m.pos] = vocab().id(m.alternatives[rng.uniform_int(m.alternatives.size())]);

        const auto review = oracle_revise(scene, draft, grammar(), vocab());
        REQUIRE(review.status == ReviewStatus::Revised);
        auto [refined, positions] = apply_revisions(draft, review.pairs);
        REQUIRE(mismatches_vs_scene(scene, refined) == 0);
        const auto metrics = compute_caption_metrics(scene, refined, grammar(), vocab());
        REQUIRE(metrics.grammar_validity == 1.0);
        REQUIRE(metrics.attribute_mismatch == 0.0);
    }
}

TEST_CASE("draft pair json round trip") {
    const Scene scene = generate_scene(31);
    DraftPair pair;
    pair.scene = scene;
    pair.prompt = encode_prompt(vocab(), grammar(), 4);
    pair.draft = response_of(scene, 2);
    pair.refined = pair.draft;
    pair.refined.ids[1] = vocab().id("blue");
    pair.mistake_positions = {1};
    pair.source = DraftSource::External;
    pair.decode_steps = 16;
    const auto back = draft_pair_from_json(to_json(pair));
    REQUIRE(back.scene == pair.scene);
    REQUIRE(back.draft.ids == pair.draft.ids);
    REQUIRE(back.refined.ids == pair.refined.ids);
    REQUIRE(back.mistake_positions == pair.mistake_positions);
    REQUIRE(back.source == DraftSource::External);
    REQUIRE(back.decode_steps == 16);
}
