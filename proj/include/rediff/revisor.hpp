#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "rediff/grammar.hpp"
#include "rediff/scene.hpp"
#include "rediff/vocab.hpp"

#include <json.hpp>

namespace rediff {

struct SpanNotFound : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct SpanNotUnique : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct OverlappingSpans : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// One correction: an erroneous token span and its equal-length replacement.
// The org span must occur exactly once in the draft's caption region.
struct RevisionPair {
    std::vector<int> org;
    std::vector<int> target;
    int start = -1;  // located start index; -1 until located
};

enum class ReviewStatus { Right, Revised, Unalignable };

struct Review {
    ReviewStatus status = ReviewStatus::Right;
    std::vector<RevisionPair> pairs;
    std::vector<std::string> dropped;  // validation failures (external path)
};

enum class DraftSource { Oracle, External };

// A Stage-II training instance: the model's own draft plus its span-corrected
// version.
struct DraftPair {
    Scene scene;
    TokenSequence prompt;
    TokenSequence draft;
    TokenSequence refined;
    std::vector<int> mistake_positions;
    DraftSource source = DraftSource::Oracle;
    int decode_steps = 0;
};

// caption region of a decoded response: ids before the first EOS/PAD
inline int caption_token_count(const TokenSequence& seq) {
    for (int i = 0; i < seq.window(); ++i)
        if (seq.ids[i] == Vocab::EOS || seq.ids[i] == Vocab::PAD) return i;
    return seq.window();
}

inline int count_occurrences(const std::vector<int>& hay, int hay_len,
                             const std::vector<int>& needle) {
    if (needle.empty() || hay_len < static_cast<int>(needle.size())) return 0;
    int n = 0;
    for (int i = 0; i + static_cast<int>(needle.size()) <= hay_len; ++i) {
        if (std::equal(needle.begin(), needle.end(), hay.begin() + i)) ++n;
    }
    return n;
}

// Checks the wire-contract invariants of a pair against a draft; returns a
// reason string when the pair must be dropped, and fills pair.start on
// success.
inline std::optional<std::string> validate_pair(const TokenSequence& draft, RevisionPair& pair) {
    if (pair.org.empty()) return "empty org span";
    if (pair.org.size() != pair.target.size()) return "token count mismatch";
    if (pair.org == pair.target) return "target equals org";
    const int cap = caption_token_count(draft);
    const int occ = count_occurrences(draft.ids, cap, pair.org);
    if (occ == 0) return "org span not found in draft";
    if (occ > 1) return "org span not unique in draft";
    for (int i = 0; i + static_cast<int>(pair.org.size()) <= cap; ++i) {
        if (std::equal(pair.org.begin(), pair.org.end(), draft.ids.begin() + i)) {
            pair.start = i;
            break;
        }
    }
    return std::nullopt;
}

// Applies validated pairs to a draft. Spans are located by unique exact
// match; the returned index set is the union of the replaced positions,
// which is exactly where the refine loss applies.
inline std::pair<TokenSequence, std::vector<int>> apply_revisions(
    const TokenSequence& draft, const std::vector<RevisionPair>& pairs) {
    TokenSequence refined = draft;
    std::vector<int> positions;
    std::vector<std::pair<int, int>> spans;
    const int cap = caption_token_count(draft);
    for (const auto& p : pairs) {
        RevisionPair located = p;
        located.start = -1;
        const int occ = count_occurrences(draft.ids, cap, located.org);
        if (occ == 0) throw SpanNotFound("org span not found in draft");
        if (occ > 1) throw SpanNotUnique("org span not unique in draft");
        if (located.org.size() != located.target.size())
            throw std::invalid_argument("pair spans must have equal token counts");
        for (int i = 0; i + static_cast<int>(located.org.size()) <= cap; ++i) {
            if (std::equal(located.org.begin(), located.org.end(), draft.ids.begin() + i)) {
                located.start = i;
                break;
            }
        }
        spans.emplace_back(located.start, located.start + static_cast<int>(located.org.size()));
        for (size_t k = 0; k < located.target.size(); ++k) {
            refined.ids[located.start + k] = located.target[k];
            positions.push_back(located.start + static_cast<int>(k));
        }
    }
    std::sort(spans.begin(), spans.end());
    for (size_t i = 1; i < spans.size(); ++i) {
        if (spans[i].first < spans[i - 1].second)
            throw OverlappingSpans("revision spans overlap");
    }
    std::sort(positions.begin(), positions.end());
    return {std::move(refined), std::move(positions)};
}

namespace detail {

struct Edit {
    int pos;
    int new_id;
};

// Merge single-token edits into contiguous runs, then widen each run with
// untouched context until its org pattern is unique in the caption; widening
// can force runs to merge.
inline std::vector<RevisionPair> edits_to_pairs(const TokenSequence& draft,
                                                std::vector<Edit> edits) {
    const int cap = caption_token_count(draft);
    std::sort(edits.begin(), edits.end(), [](const Edit& a, const Edit& b) { return a.pos < b.pos; });

    std::vector<int> refined_ids(draft.ids.begin(), draft.ids.begin() + cap);
    for (const auto& e : edits) refined_ids[e.pos] = e.new_id;

    // contiguous runs of edited positions
    std::vector<std::pair<int, int>> runs;  // [begin, end)
    for (size_t i = 0; i < edits.size();) {
        int begin = edits[i].pos, end = begin + 1;
        size_t j = i + 1;
        while (j < edits.size() && edits[j].pos == end) {
            ++end;
            ++j;
        }
        runs.emplace_back(begin, end);
        i = j;
    }

    // widen for uniqueness, merging runs that come to overlap or touch
    bool changed = true;
    while (changed) {
        changed = false;
        for (size_t r = 0; r < runs.size(); ++r) {
            auto& [b, e] = runs[r];
            std::vector<int> pat(draft.ids.begin() + b, draft.ids.begin() + e);
            while (count_occurrences(draft.ids, cap, pat) > 1) {
                if (b > 0) --b;
                else if (e < cap) ++e;
                else break;
                pat.assign(draft.ids.begin() + b, draft.ids.begin() + e);
                changed = true;
            }
        }
        std::sort(runs.begin(), runs.end());
        for (size_t r = 1; r < runs.size();) {
            if (runs[r].first <= runs[r - 1].second) {
                runs[r - 1].second = std::max(runs[r - 1].second, runs[r].second);
                runs.erase(runs.begin() + r);
                changed = true;
            } else {
                ++r;
            }
        }
    }

    std::vector<RevisionPair> pairs;
    for (const auto& [b, e] : runs) {
        RevisionPair p;
        p.org.assign(draft.ids.begin() + b, draft.ids.begin() + e);
        p.target.assign(refined_ids.begin() + b, refined_ids.begin() + e);
        p.start = b;
        pairs.push_back(std::move(p));
    }
    return pairs;
}

}  // namespace detail

// Exact revisor grounded in the scene. Parses the draft; emits equal-length
// correction pairs for attribute mismatches (via the parse) and for
// unparseable sentences (via alignment against the - equally long - template
// rendering of the expected object). Returns Right only for a fully
// grammatical, fully factual draft. Drafts whose sentence structure cannot
// be repaired by span replacement come back Unalignable and are skipped.
inline Review oracle_revise(const Scene& scene, const TokenSequence& r_draft,
                            const CaptionGrammar& grammar, const Vocab& vocab) {
    Review review;
    const int cap = caption_token_count(r_draft);
    std::vector<std::string> words;
    words.reserve(cap);
    for (int i = 0; i < cap; ++i) {
        if (r_draft.ids[i] == Vocab::MASK) {
            review.status = ReviewStatus::Unalignable;  // drafts must be fully unmasked
            return review;
        }
        words.push_back(vocab.token(r_draft.ids[i]));
    }

    const auto parsed = grammar.parse_caption(words);
    if (parsed.n_sentences != static_cast<int>(scene.objects.size())) {
        review.status = ReviewStatus::Unalignable;
        return review;
    }

    std::vector<detail::Edit> edits;
    auto add_edit = [&](int pos, const std::string& word) {
        const int id = vocab.id(word);
        if (r_draft.ids[pos] != id) edits.push_back({pos, id});
    };

    size_t next_parsed = 0;
    for (int k = 0; k < parsed.n_sentences; ++k) {
        const auto [sb, se] = parsed.sentence_spans[k];
        const SceneObject& obj = scene.objects[k];
        const bool plural = obj.count != 1;

        const ParsedObject* po = nullptr;
        if (next_parsed < parsed.objects.size() && parsed.objects[next_parsed].sent_begin == sb)
            po = &parsed.objects[next_parsed++];

        if (po) {
            // grammatical sentence: fix attribute words in place
            add_edit(po->count_pos, grammar.count_word(obj.count));
            add_edit(po->size_pos, grammar.size_word(obj.size));
            add_edit(po->color_pos, grammar.color_word(obj.color));
            add_edit(po->cat_pos, grammar.category_word(obj.category, plural));
            if (po->be_pos >= 0) add_edit(po->be_pos, grammar.be_word(plural));
            const auto& phrase = grammar.position_phrase(obj.position);
            const auto& drafted = grammar.position_phrase(po->attrs.position);
            if (phrase.size() != drafted.size()) {
                review.status = ReviewStatus::Unalignable;
                return review;
            }
            const int phrase_begin = po->pos_word_pos - static_cast<int>(phrase.size()) + 1;
            for (size_t i = 0; i < phrase.size(); ++i)
                add_edit(phrase_begin + static_cast<int>(i), phrase[i]);
        } else {
            // unparseable sentence: align against the same-length template
            // rendering of the expected object, preferring maximal overlap
            const int body_len = se - sb - 1;  // excluding the end token slot
            int best_tpl = -1, best_overlap = -1;
            for (int tpl = 0; tpl < grammar.num_templates(); ++tpl) {
                const auto render = grammar.render_object(obj, tpl);
                if (static_cast<int>(render.size()) != body_len) continue;
                int overlap = 0;
                for (int i = 0; i < body_len; ++i)
                    if (words[sb + i] == render[i]) ++overlap;
                if (overlap > best_overlap) {
                    best_overlap = overlap;
                    best_tpl = tpl;
                }
            }
            if (best_tpl < 0) {
                review.status = ReviewStatus::Unalignable;
                return review;
            }
            const auto render = grammar.render_object(obj, best_tpl);
            for (int i = 0; i < body_len; ++i) add_edit(sb + i, render[i]);
            add_edit(se - 1, grammar.end_token());
        }
    }

    if (edits.empty()) {
        review.status = ReviewStatus::Right;
        return review;
    }
    review.status = ReviewStatus::Revised;
    review.pairs = detail::edits_to_pairs(r_draft, std::move(edits));
    return review;
}

inline const char* to_string(DraftSource s) {
    return s == DraftSource::Oracle ? "oracle" : "external";
}

inline nlohmann::json to_json(const DraftPair& d) {
    return {{"scene", to_json(d.scene)},
            {"prompt", d.prompt.ids},
            {"draft", d.draft.ids},
            {"refined", d.refined.ids},
            {"mistakes", d.mistake_positions},
            {"source", to_string(d.source)},
            {"decode_steps", d.decode_steps}};
}

inline DraftPair draft_pair_from_json(const nlohmann::json& j) {
    DraftPair d;
    d.scene = scene_from_json(j.at("scene"));
    d.prompt.ids = j.at("prompt").get<std::vector<int>>();
    d.prompt.length = d.prompt.window();
    d.draft.ids = j.at("draft").get<std::vector<int>>();
    d.draft.length = d.draft.window();
    d.refined.ids = j.at("refined").get<std::vector<int>>();
    d.refined.length = d.refined.window();
    d.mistake_positions = j.at("mistakes").get<std::vector<int>>();
    d.source = j.at("source") == "external" ? DraftSource::External : DraftSource::Oracle;
    d.decode_steps = j.at("decode_steps").get<int>();
    return d;
}

}  // namespace rediff
