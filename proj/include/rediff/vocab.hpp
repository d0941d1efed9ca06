#pragma once

#include <algorithm>
#include <fstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "rediff/grammar.hpp"
#include "rediff/rng.hpp"

namespace rediff {

struct UnknownToken : std::runtime_error {
    explicit UnknownToken(const std::string& tok)
        : std::runtime_error("unknown token: " + tok), token(tok) {}
    std::string token;
};

// Word-level vocabulary: five special tokens followed by the grammar's
// terminals in sorted order, so ids are stable across runs for a fixed
// grammar file.
class Vocab {
public:
    static constexpr int PAD = 0;
    static constexpr int MASK = 1;
    static constexpr int BOS = 2;
    static constexpr int EOS = 3;
    static constexpr int SEP = 4;

    static Vocab build(const CaptionGrammar& grammar) {
        Vocab v;
        v.id_to_token_ = {"<pad>", "<mask>", "<bos>", "<eos>", "<sep>"};
        auto terms = grammar.terminals();
        std::sort(terms.begin(), terms.end());
        for (const auto& t : terms) v.id_to_token_.push_back(t);
        v.finish();
        return v;
    }

    static Vocab load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw std::runtime_error("cannot open vocab file: " + path);
        Vocab v;
        std::string line;
        while (std::getline(in, line)) {
            if (!line.empty()) v.id_to_token_.push_back(line);
        }
        v.finish();
        return v;
    }

    void save(const std::string& path) const {
        std::ofstream out(path);
        if (!out) throw std::runtime_error("cannot write vocab file: " + path);
        for (const auto& t : id_to_token_) out << t << '\n';
    }

    int size() const { return static_cast<int>(id_to_token_.size()); }

    int id(const std::string& token) const {
        auto it = token_to_id_.find(token);
        if (it == token_to_id_.end()) throw UnknownToken(token);
        return it->second;
    }
    bool contains(const std::string& token) const { return token_to_id_.count(token) > 0; }
    const std::string& token(int id) const { return id_to_token_.at(id); }
    bool is_special(int id) const { return id < 5; }

    uint64_t hash() const {
        uint64_t h = 0xcbf29ce484222325ull;
        for (const auto& t : id_to_token_) {
            h = fnv1a(t, h);
            h = fnv1a("\n", h);
        }
        return h;
    }

private:
    void finish() {
        if (size() >= 256) throw std::runtime_error("vocabulary too large");
        if (size() < 6 || id_to_token_[PAD] != "<pad>" || id_to_token_[MASK] != "<mask>")
            throw std::runtime_error("vocab missing special tokens");
        for (int i = 0; i < size(); ++i) {
            if (!token_to_id_.emplace(id_to_token_[i], i).second)
                throw std::runtime_error("duplicate vocab token: " + id_to_token_[i]);
        }
    }

    std::vector<std::string> id_to_token_;
    std::unordered_map<std::string, int> token_to_id_;
};

// Fixed-length id sequence; `length` is the meaningful prefix, everything
// at or beyond it is PAD.
struct TokenSequence {
    std::vector<int> ids;
    int length = 0;

    int window() const { return static_cast<int>(ids.size()); }
    bool operator==(const TokenSequence&) const = default;
};

inline TokenSequence encode(const std::string& text, const Vocab& vocab, int window) {
    const auto words = split_words(text);
    if (static_cast<int>(words.size()) > window)
        throw std::length_error("text of " + std::to_string(words.size()) +
                                " tokens exceeds window " + std::to_string(window));
    TokenSequence seq;
    seq.ids.assign(window, Vocab::PAD);
    for (size_t i = 0; i < words.size(); ++i) seq.ids[i] = vocab.id(words[i]);
    seq.length = static_cast<int>(words.size());
    return seq;
}

inline std::string decode(const TokenSequence& seq, const Vocab& vocab) {
    std::vector<std::string> words;
    for (int id : seq.ids) {
        if (id == Vocab::PAD) continue;
        words.push_back(vocab.token(id));
    }
    return join_words(words);
}

// Caption text of a decoded response: tokens before the first EOS/PAD.
inline std::vector<std::string> caption_words(const TokenSequence& seq, const Vocab& vocab) {
    std::vector<std::string> words;
    for (int id : seq.ids) {
        if (id == Vocab::EOS || id == Vocab::PAD) break;
        words.push_back(vocab.token(id));
    }
    return words;
}

// Training target for a caption: words, then EOS; PAD to the window.
inline TokenSequence make_response(const std::string& caption, const Vocab& vocab, int window) {
    auto seq = encode(caption, vocab, window);
    if (seq.length >= window) throw std::length_error("caption leaves no room for EOS");
    seq.ids[seq.length] = Vocab::EOS;
    seq.length += 1;
    return seq;
}

// The model's "image": BOS, then per object its canonical attribute words,
// objects separated by SEP, padded to the scene window.
inline TokenSequence encode_scene(const Scene& scene, const Vocab& vocab,
                                  const CaptionGrammar& grammar, int scene_window) {
    std::vector<std::string> words{"<bos>"};
    for (size_t i = 0; i < scene.objects.size(); ++i) {
        const auto& o = scene.objects[i];
        if (i) words.push_back("<sep>");
        words.push_back(grammar.category_word(o.category, false));
        words.push_back(grammar.color_word(o.color));
        words.push_back(grammar.size_word(o.size));
        words.push_back(grammar.count_word(o.count));
        words.push_back(grammar.position_phrase(o.position).back());
    }
    if (static_cast<int>(words.size()) > scene_window)
        throw std::length_error("scene encoding exceeds scene window");
    TokenSequence seq;
    seq.ids.assign(scene_window, Vocab::PAD);
    for (size_t i = 0; i < words.size(); ++i) seq.ids[i] = vocab.id(words[i]);
    seq.length = static_cast<int>(words.size());
    return seq;
}

inline TokenSequence encode_prompt(const Vocab& vocab, const CaptionGrammar& grammar,
                                   int prompt_window) {
    return encode(join_words(grammar.prompt_tokens()), vocab, prompt_window);
}

}  // namespace rediff
