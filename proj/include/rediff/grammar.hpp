#pragma once

#include <algorithm>
#include <array>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "rediff/rng.hpp"
#include "rediff/scene.hpp"

namespace rediff {

struct GrammarOverflow : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream in(text);
    std::string w;
    while (in >> w) out.push_back(w);
    return out;
}

inline std::string join_words(const std::vector<std::string>& words) {
    std::string out;
    for (size_t i = 0; i < words.size(); ++i) {
        if (i) out += ' ';
        out += words[i];
    }
    return out;
}

// One object mention recovered from a caption: the attribute tuple plus the
// caption-token index of each attribute's surface word.
struct ParsedObject {
    SceneObject attrs;
    int count_pos = -1;
    int size_pos = -1;
    int color_pos = -1;
    int cat_pos = -1;
    int pos_word_pos = -1;  // the final word of the position phrase
    int be_pos = -1;        // copula index when the template has one
    int sent_begin = 0;     // token span of the sentence, '.' included
    int sent_end = 0;
};

struct Violation {
    int begin = 0;  // token span [begin, end) in the caption
    int end = 0;
    std::string reason;
};

// Parse failures are data, not errors: a caption either yields full
// attribute tuples or a list of violating spans.
struct ParseResult {
    std::vector<ParsedObject> objects;   // from sentences that parsed
    std::vector<Violation> violations;   // from sentences that did not
    int n_sentences = 0;
    double validity = 0.0;  // parsed sentences / total sentences; 0 if empty
    std::vector<std::pair<int, int>> sentence_spans;

    bool grammatical() const { return validity == 1.0 && n_sentences > 0; }
};

// Fixed template grammar loaded from a key-value data file. Rendering and
// parsing are exact inverses on the attribute tuples, which is what makes
// factuality decidable for the oracle revisor and the metrics.
class CaptionGrammar {
public:
    std::string version;

    static CaptionGrammar load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw std::runtime_error("cannot open grammar file: " + path);
        CaptionGrammar g;
        std::string line;
        int categories_seen = 0, colors_seen = 0, sizes_seen = 0, counts_seen = 0,
            positions_seen = 0;
        while (std::getline(in, line)) {
            const auto hash = line.find('#');
            if (hash != std::string::npos) line = line.substr(0, hash);
            const auto eq = line.find('=');
            if (eq == std::string::npos) continue;
            const std::string key = trim(line.substr(0, eq));
            const std::string value = trim(line.substr(eq + 1));
            if (key.empty()) continue;

            if (key == "version") {
                g.version = value;
            } else if (key == "template") {
                g.templates_.push_back(split_words(value));
            } else if (key == "category") {
                auto [name, forms] = split_production(value);
                const auto cat = enum_from_string<Category>(name, kNumCategories, "category");
                if (forms.size() != 2) throw std::runtime_error("category needs singular and plural: " + value);
                g.cat_sg_[static_cast<int>(cat)] = forms[0];
                g.cat_pl_[static_cast<int>(cat)] = forms[1];
                ++categories_seen;
            } else if (key == "color") {
                const auto col = enum_from_string<Color>(value, kNumColors, "color");
                g.color_w_[static_cast<int>(col)] = value;
                ++colors_seen;
            } else if (key == "size") {
                const auto sz = enum_from_string<Size>(value, kNumSizes, "size");
                g.size_w_[static_cast<int>(sz)] = value;
                ++sizes_seen;
            } else if (key == "count") {
                auto [name, forms] = split_production(value);
                const int n = std::stoi(name);
                if (n < kMinCount || n > kMaxCount || forms.size() != 1)
                    throw std::runtime_error("bad count production: " + value);
                g.count_w_[n - kMinCount] = forms[0];
                ++counts_seen;
            } else if (key == "be") {
                auto [sg, pl] = split_production(value);
                if (pl.size() != 1) throw std::runtime_error("bad be production: " + value);
                g.be_sg_ = sg;
                g.be_pl_ = pl[0];
            } else if (key == "position") {
                auto [name, phrase] = split_production(value);
                const auto pos = enum_from_string<Position>(name, kNumPositions, "position");
                if (phrase.empty()) throw std::runtime_error("empty position phrase: " + value);
                g.pos_phrase_[static_cast<int>(pos)] = phrase;
                ++positions_seen;
            } else if (key == "end_sentence") {
                g.end_token_ = value;
            } else if (key == "prompt") {
                g.prompt_tokens_ = split_words(value);
            } else {
                throw std::runtime_error("unknown grammar key: " + key);
            }
        }
        if (g.templates_.empty()) throw std::runtime_error("grammar has no templates");
        if (categories_seen != kNumCategories || colors_seen != kNumColors ||
            sizes_seen != kNumSizes || counts_seen != kMaxCount - kMinCount + 1 ||
            positions_seen != kNumPositions)
            throw std::runtime_error("grammar does not cover the attribute space");
        if (g.end_token_.empty() || g.be_sg_.empty() || g.prompt_tokens_.empty())
            throw std::runtime_error("grammar missing end_sentence/be/prompt");
        return g;
    }

    int num_templates() const { return static_cast<int>(templates_.size()); }
    const std::string& end_token() const { return end_token_; }
    const std::vector<std::string>& prompt_tokens() const { return prompt_tokens_; }

    const std::string& category_word(Category c, bool plural) const {
        return plural ? cat_pl_[static_cast<int>(c)] : cat_sg_[static_cast<int>(c)];
    }
    const std::string& color_word(Color c) const { return color_w_[static_cast<int>(c)]; }
    const std::string& size_word(Size s) const { return size_w_[static_cast<int>(s)]; }
    const std::string& count_word(int n) const { return count_w_.at(n - kMinCount); }
    const std::string& be_word(bool plural) const { return plural ? be_pl_ : be_sg_; }
    const std::vector<std::string>& position_phrase(Position p) const {
        return pos_phrase_[static_cast<int>(p)];
    }

    // Every surface token the grammar can emit (captions and prompt).
    std::vector<std::string> terminals() const {
        std::set<std::string> t;
        for (const auto& tpl : templates_)
            for (const auto& w : tpl)
                if (!is_slot(w)) t.insert(w);
        for (const auto& w : cat_sg_) t.insert(w);
        for (const auto& w : cat_pl_) t.insert(w);
        for (const auto& w : color_w_) t.insert(w);
        for (const auto& w : size_w_) t.insert(w);
        for (const auto& w : count_w_) t.insert(w);
        t.insert(be_sg_);
        t.insert(be_pl_);
        for (const auto& ph : pos_phrase_)
            for (const auto& w : ph) t.insert(w);
        t.insert(end_token_);
        for (const auto& w : prompt_tokens_) t.insert(w);
        return {t.begin(), t.end()};
    }

    // One sentence for one object, without the end token.
    std::vector<std::string> render_object(const SceneObject& o, int template_idx) const {
        const auto& tpl = templates_.at(template_idx);
        const bool plural = o.count != 1;
        std::vector<std::string> out;
        for (const auto& w : tpl) {
            if (w == "COUNT") out.push_back(count_word(o.count));
            else if (w == "SIZE") out.push_back(size_word(o.size));
            else if (w == "COLOR") out.push_back(color_word(o.color));
            else if (w == "CAT") out.push_back(category_word(o.category, plural));
            else if (w == "BE") out.push_back(plural ? be_pl_ : be_sg_);
            else if (w == "POS") {
                const auto& ph = position_phrase(o.position);
                out.insert(out.end(), ph.begin(), ph.end());
            } else {
                out.push_back(w);
            }
        }
        return out;
    }

    // Full caption: one sentence per object in scene order; template choice
    // is the only seed-dependent part. max_tokens 0 disables the length check.
    std::string render_caption(const Scene& scene, uint64_t seed, int max_tokens = 0) const {
        validate(scene);
        Rng rng = Rng(seed).substream("caption-template");
        std::vector<std::string> words;
        for (const auto& o : scene.objects) {
            const int tpl = static_cast<int>(rng.uniform_int(templates_.size()));
            const auto sent = render_object(o, tpl);
            words.insert(words.end(), sent.begin(), sent.end());
            words.push_back(end_token_);
        }
        if (max_tokens > 0 && static_cast<int>(words.size()) > max_tokens)
            throw GrammarOverflow("caption of " + std::to_string(words.size()) +
                                  " tokens exceeds limit " + std::to_string(max_tokens));
        return join_words(words);
    }

    ParseResult parse_caption(const std::vector<std::string>& tokens) const {
        ParseResult res;
        // split into sentences on the end token
        size_t begin = 0;
        for (size_t i = 0; i < tokens.size(); ++i) {
            if (tokens[i] == end_token_) {
                res.sentence_spans.emplace_back(begin, i + 1);
                begin = i + 1;
            }
        }
        if (begin < tokens.size()) {
            // trailing tokens with no end marker form a violating pseudo-sentence
            res.sentence_spans.emplace_back(begin, tokens.size());
        }
        res.n_sentences = static_cast<int>(res.sentence_spans.size());
        if (res.n_sentences == 0) {
            res.violations.push_back({0, 0, "empty caption"});
            res.validity = 0.0;
            return res;
        }
        int ok = 0;
        for (const auto& [s, e] : res.sentence_spans) {
            std::string why;
            auto parsed = parse_sentence(tokens, s, e, &why);
            if (parsed) {
                res.objects.push_back(*parsed);
                ++ok;
            } else {
                res.violations.push_back({static_cast<int>(s), static_cast<int>(e), why});
            }
        }
        res.validity = static_cast<double>(ok) / res.n_sentences;
        return res;
    }

    ParseResult parse_caption(const std::string& text) const {
        return parse_caption(split_words(text));
    }

    std::optional<int> count_from_word(const std::string& w) const {
        for (int n = kMinCount; n <= kMaxCount; ++n)
            if (count_w_[n - kMinCount] == w) return n;
        return std::nullopt;
    }
    std::optional<Color> color_from_word(const std::string& w) const {
        for (int i = 0; i < kNumColors; ++i)
            if (color_w_[i] == w) return static_cast<Color>(i);
        return std::nullopt;
    }
    std::optional<Size> size_from_word(const std::string& w) const {
        for (int i = 0; i < kNumSizes; ++i)
            if (size_w_[i] == w) return static_cast<Size>(i);
        return std::nullopt;
    }
    // returns (category, plural?)
    std::optional<std::pair<Category, bool>> category_from_word(const std::string& w) const {
        for (int i = 0; i < kNumCategories; ++i) {
            if (cat_sg_[i] == w) return std::make_pair(static_cast<Category>(i), false);
            if (cat_pl_[i] == w) return std::make_pair(static_cast<Category>(i), true);
        }
        return std::nullopt;
    }
    std::optional<Position> position_from_final_word(const std::string& w) const {
        for (int i = 0; i < kNumPositions; ++i)
            if (pos_phrase_[i].back() == w) return static_cast<Position>(i);
        return std::nullopt;
    }

private:
    static std::string trim(const std::string& s) {
        const auto b = s.find_first_not_of(" \t\r\n");
        if (b == std::string::npos) return "";
        const auto e = s.find_last_not_of(" \t\r\n");
        return s.substr(b, e - b + 1);
    }

    // "name : w1 w2 ..." -> (name, [w1, w2, ...])
    static std::pair<std::string, std::vector<std::string>> split_production(const std::string& v) {
        const auto colon = v.find(':');
        if (colon == std::string::npos) throw std::runtime_error("production needs ':' in: " + v);
        return {trim(v.substr(0, colon)), split_words(v.substr(colon + 1))};
    }

    static bool is_slot(const std::string& w) {
        return w == "COUNT" || w == "SIZE" || w == "COLOR" || w == "CAT" || w == "POS" ||
               w == "BE";
    }

    // matches a position phrase starting at i; returns its Position
    std::optional<Position> match_pos_phrase(const std::vector<std::string>& tokens, size_t i,
                                             size_t limit) const {
        for (int p = 0; p < kNumPositions; ++p) {
            const auto& ph = pos_phrase_[p];
            if (i + ph.size() <= limit && std::equal(ph.begin(), ph.end(), tokens.begin() + i))
                return static_cast<Position>(p);
        }
        return std::nullopt;
    }

    // Two sentence shapes: "COUNT ADJ ADJ CAT BE POS ." and the fronted
    // "POS BE COUNT ADJ ADJ CAT .". Adjectives are one color and one size
    // word in either order.
    std::optional<ParsedObject> parse_sentence(const std::vector<std::string>& tokens,
                                               size_t begin, size_t end,
                                               std::string* error) const {
        auto fail = [error](const std::string& why) -> std::optional<ParsedObject> {
            *error = why;
            return std::nullopt;
        };
        if (end <= begin) return fail("empty sentence");
        if (tokens[end - 1] != end_token_) return fail("missing sentence end");

        ParsedObject obj;
        obj.sent_begin = static_cast<int>(begin);
        obj.sent_end = static_cast<int>(end);
        size_t i = begin;
        const size_t body_end = end - 1;
        std::optional<bool> be_plural;
        bool fronted = false;

        if (auto pos = match_pos_phrase(tokens, i, body_end)) {
            fronted = true;
            obj.attrs.position = *pos;
            const auto& ph = pos_phrase_[static_cast<int>(*pos)];
            obj.pos_word_pos = static_cast<int>(i + ph.size() - 1);
            i += ph.size();
            if (i >= body_end) return fail("missing copula after position");
            if (tokens[i] == be_sg_) be_plural = false;
            else if (tokens[i] == be_pl_) be_plural = true;
            else return fail("expected copula after position");
            obj.be_pos = static_cast<int>(i);
            ++i;
        }

        if (i >= body_end) return fail("missing count");
        const auto count = count_from_word(tokens[i]);
        if (!count) return fail("expected count word");
        obj.attrs.count = *count;
        obj.count_pos = static_cast<int>(i);
        ++i;

        bool have_color = false, have_size = false;
        for (int k = 0; k < 2; ++k) {
            if (i >= body_end) return fail("missing adjective");
            if (auto col = color_from_word(tokens[i]); col && !have_color) {
                obj.attrs.color = *col;
                obj.color_pos = static_cast<int>(i);
                have_color = true;
            } else if (auto sz = size_from_word(tokens[i]); sz && !have_size) {
                obj.attrs.size = *sz;
                obj.size_pos = static_cast<int>(i);
                have_size = true;
            } else {
                return fail("expected size/color adjectives");
            }
            ++i;
        }

        if (i >= body_end) return fail("missing category");
        const auto cat = category_from_word(tokens[i]);
        if (!cat) return fail("expected category noun");
        const bool plural = obj.attrs.count != 1;
        if (cat->second != plural) return fail("number agreement");
        obj.attrs.category = cat->first;
        obj.cat_pos = static_cast<int>(i);
        ++i;

        if (fronted) {
            if (i != body_end) return fail("trailing words after category");
        } else {
            if (i >= body_end) return fail("missing copula");
            if (tokens[i] == be_sg_) be_plural = false;
            else if (tokens[i] == be_pl_) be_plural = true;
            else return fail("expected copula");
            obj.be_pos = static_cast<int>(i);
            ++i;
            const auto pos = match_pos_phrase(tokens, i, body_end);
            if (!pos || i + pos_phrase_[static_cast<int>(*pos)].size() != body_end)
                return fail("bad position phrase");
            obj.attrs.position = *pos;
            obj.pos_word_pos = static_cast<int>(body_end - 1);
        }
        if (be_plural && *be_plural != plural) return fail("copula agreement");
        return obj;
    }

    std::vector<std::vector<std::string>> templates_;
    std::array<std::string, kNumCategories> cat_sg_{}, cat_pl_{};
    std::array<std::string, kNumColors> color_w_{};
    std::array<std::string, kNumSizes> size_w_{};
    std::array<std::string, kMaxCount - kMinCount + 1> count_w_{};
    std::array<std::vector<std::string>, kNumPositions> pos_phrase_{};
    std::string be_sg_, be_pl_;
    std::string end_token_;
    std::vector<std::string> prompt_tokens_;
};

inline std::string default_grammar_path() {
#ifdef REDIFF_DATA_DIR
    return std::string(REDIFF_DATA_DIR) + "/grammar.txt";
#else
    return "data/grammar.txt";
#endif
}

}  // namespace rediff
