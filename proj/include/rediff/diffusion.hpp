#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "rediff/grammar.hpp"
#include "rediff/rng.hpp"
#include "rediff/scene.hpp"
#include "rediff/vocab.hpp"

#include <json.hpp>

namespace rediff {

// Per-position role of a corrupted response. Mask/Syntax/Hallucination/Clean
// are the loss-carrying types; Pad marks still-visible padding which never
// carries loss.
enum class Role : uint8_t { Mask = 0, Syntax = 1, Hallucination = 2, Clean = 3, Prompt = 4, Pad = 5 };

using RoleMask = std::vector<Role>;

inline bool is_loss_role(Role r) {
    return r == Role::Mask || r == Role::Syntax || r == Role::Hallucination || r == Role::Clean;
}

enum class ScheduleKind { Linear };

// gamma(t): probability that a position is masked at noise level t.
struct NoiseSchedule {
    ScheduleKind kind = ScheduleKind::Linear;
    double gamma(double t) const { return t; }  // linear: gamma(0)=0, gamma(1)=1
};

enum class RateMode { Fixed, Dynamic };

struct CorruptionConfig {
    bool syntax_enabled = true;
    bool hallucination_enabled = true;
    double syntax_rate = 0.1;
    RateMode rate_mode = RateMode::Fixed;
    int hallucination_per_sample = 1;

    // dynamic mode ties the replacement rate to the noise level: t when
    // t < 0.1, otherwise no replacement
    double effective_syntax_rate(double t) const {
        if (rate_mode == RateMode::Fixed) return syntax_rate;
        return t < 0.1 ? t : 0.0;
    }
};

struct SeqDims {
    int scene_len = 30;
    int prompt_len = 4;
    int response_len = 64;
    int context() const { return scene_len + prompt_len + response_len; }
    bool operator==(const SeqDims&) const = default;
};

// Shared task context: grammar, vocabulary, windows, and the seeded scene
// pools that all pipeline stages draw from.
struct TaskContext {
    const CaptionGrammar* grammar = nullptr;
    const Vocab* vocab = nullptr;
    SeqDims dims;

    Scene scene_for(uint64_t run_seed, const char* pool, int index) const {
        return generate_scene(hash_combine(hash_combine(run_seed, fnv1a(pool)), index));
    }
};

// One Stage-I training instance: the noised-and-corrupted response plus the
// role of every response position.
struct CorruptedSample {
    Scene scene;
    TokenSequence prompt;
    TokenSequence r0;
    TokenSequence rt;
    RoleMask roles;
    double t = 0.0;
};

// Absorbing-mask forward process. Caption positions (including the EOS
// terminator) flip to MASK independently with probability gamma(t) and get
// role Mask, else stay and get role Clean. Pad-tail positions flip the same
// way (their reconstruction target is PAD); visible pads keep role Pad.
inline std::pair<TokenSequence, RoleMask> forward_mask(const TokenSequence& r0, double t,
                                                       const NoiseSchedule& schedule, Rng& rng) {
    if (!(t > 0.0) || t > 1.0) throw std::invalid_argument("noise level must be in (0, 1]");
    const double g = schedule.gamma(t);
    TokenSequence rt = r0;
    RoleMask roles(r0.window(), Role::Pad);
    for (int i = 0; i < r0.window(); ++i) {
        const bool caption = i < r0.length;
        if (rng.bernoulli(g)) {
            rt.ids[i] = Vocab::MASK;
            roles[i] = Role::Mask;
        } else {
            roles[i] = caption ? Role::Clean : Role::Pad;
        }
    }
    rt.length = r0.length;
    return {std::move(rt), std::move(roles)};
}

// Random token replacement on still-clean caption positions: each becomes a
// uniformly drawn non-special token different from the original, with role
// Syntax.
inline void inject_syntax_errors(TokenSequence& rt, RoleMask& roles, const CorruptionConfig& cfg,
                                 const Vocab& vocab, double t, Rng& rng) {
    const double rate = cfg.effective_syntax_rate(t);
    if (rate <= 0.0) return;
    const int n_regular = vocab.size() - 5;  // non-special tokens
    if (n_regular < 2) throw std::runtime_error("vocabulary too small for replacement");
    for (int i = 0; i < rt.window(); ++i) {
        if (roles[i] != Role::Clean) continue;
        if (!rng.bernoulli(rate)) continue;
        int replacement = rt.ids[i];
        while (replacement == rt.ids[i])
            replacement = 5 + static_cast<int>(rng.uniform_int(n_regular));
        rt.ids[i] = replacement;
        roles[i] = Role::Syntax;
    }
}

// A caption position holding an attribute word, together with the in-vocab
// single-token swaps that keep the sentence grammatical.
struct AttributeMention {
    int pos = 0;
    std::vector<std::string> alternatives;
};

// All attribute mentions of a parsed caption with their validity-preserving
// swap sets. Count 1 has no single-token swap (number agreement), positions
// swap only within the same preposition.
inline std::vector<AttributeMention> attribute_mentions(const ParseResult& parsed,
                                                        const CaptionGrammar& grammar) {
    std::vector<AttributeMention> mentions;
    for (const auto& obj : parsed.objects) {
        {
            AttributeMention m{obj.color_pos, {}};
            for (int c = 0; c < kNumColors; ++c)
                if (static_cast<Color>(c) != obj.attrs.color)
                    m.alternatives.push_back(grammar.color_word(static_cast<Color>(c)));
            mentions.push_back(std::move(m));
        }
        {
            AttributeMention m{obj.size_pos, {}};
            const Size other = obj.attrs.size == Size::Small ? Size::Large : Size::Small;
            m.alternatives.push_back(grammar.size_word(other));
            mentions.push_back(std::move(m));
        }
        {
            AttributeMention m{obj.cat_pos, {}};
            const bool plural = obj.attrs.count != 1;
            for (int c = 0; c < kNumCategories; ++c)
                if (static_cast<Category>(c) != obj.attrs.category)
                    m.alternatives.push_back(grammar.category_word(static_cast<Category>(c), plural));
            mentions.push_back(std::move(m));
        }
        if (obj.attrs.count != 1) {
            AttributeMention m{obj.count_pos, {}};
            for (int n = 2; n <= kMaxCount; ++n)
                if (n != obj.attrs.count) m.alternatives.push_back(grammar.count_word(n));
            mentions.push_back(std::move(m));
        }
        {
            AttributeMention m{obj.pos_word_pos, {}};
            const auto& own = grammar.position_phrase(obj.attrs.position);
            for (int p = 0; p < kNumPositions; ++p) {
                const auto pos = static_cast<Position>(p);
                if (pos == obj.attrs.position) continue;
                const auto& ph = grammar.position_phrase(pos);
                if (ph.size() == own.size() &&
                    std::equal(ph.begin(), ph.end() - 1, own.begin()))
                    m.alternatives.push_back(ph.back());
            }
            if (!m.alternatives.empty()) mentions.push_back(std::move(m));
        }
    }
    return mentions;
}

// Swaps up to cfg.hallucination_per_sample still-clean attribute mentions to
// a different value of the same attribute. The result still parses but
// contradicts the scene. Returns false when no eligible mention exists
// (NoEligibleSpan): the caller resamples or skips.
inline bool inject_hallucination(const Scene& scene, const TokenSequence& r0, TokenSequence& rt,
                                 RoleMask& roles, const CaptionGrammar& grammar,
                                 const Vocab& vocab, int per_sample, Rng& rng) {
    (void)scene;
    if (per_sample <= 0) return true;
    const auto parsed = grammar.parse_caption(caption_words(r0, vocab));
    if (!parsed.grammatical())
        throw std::invalid_argument("hallucination injection requires a grammatical r0");

    auto mentions = attribute_mentions(parsed, grammar);
    std::vector<AttributeMention> eligible;
    for (auto& m : mentions)
        if (roles[m.pos] == Role::Clean) eligible.push_back(std::move(m));
    if (eligible.empty()) return false;

    const int n = std::min<int>(per_sample, static_cast<int>(eligible.size()));
    for (int k = 0; k < n; ++k) {
        const int pick = k + static_cast<int>(rng.uniform_int(eligible.size() - k));
        std::swap(eligible[k], eligible[pick]);
        const auto& m = eligible[k];
        const auto& alt = m.alternatives[rng.uniform_int(m.alternatives.size())];
        rt.ids[m.pos] = vocab.id(alt);
        roles[m.pos] = Role::Hallucination;
    }
    return true;
}

// Full Stage-I pipeline: render, encode, mask, then corrupt the survivors.
// nullopt signals NoEligibleSpan (all attribute mentions masked).
inline std::optional<CorruptedSample> build_stage1_sample(const Scene& scene,
                                                          const CaptionGrammar& grammar,
                                                          const Vocab& vocab,
                                                          const CorruptionConfig& cfg,
                                                          const NoiseSchedule& schedule,
                                                          const SeqDims& dims, Rng rng) {
    CorruptedSample s;
    s.scene = scene;
    s.prompt = encode_prompt(vocab, grammar, dims.prompt_len);
    const auto caption = grammar.render_caption(scene, rng.substream("template").next_u64(),
                                                dims.response_len - 1);
    s.r0 = make_response(caption, vocab, dims.response_len);

    Rng trng = rng.substream("t");
    s.t = trng.uniform_open0();

    Rng mrng = rng.substream("mask");
    auto [rt, roles] = forward_mask(s.r0, s.t, schedule, mrng);

    if (cfg.syntax_enabled) {
        Rng srng = rng.substream("syntax");
        inject_syntax_errors(rt, roles, cfg, vocab, s.t, srng);
    }
    if (cfg.hallucination_enabled) {
        Rng hrng = rng.substream("hallucination");
        if (!inject_hallucination(scene, s.r0, rt, roles, grammar, vocab,
                                  cfg.hallucination_per_sample, hrng))
            return std::nullopt;
    }
    s.rt = std::move(rt);
    s.roles = std::move(roles);
    return s;
}

inline nlohmann::json to_json(const CorruptedSample& s) {
    std::vector<int> roles;
    roles.reserve(s.roles.size());
    for (Role r : s.roles) roles.push_back(static_cast<int>(r));
    return {{"scene", to_json(s.scene)}, {"t", s.t},       {"prompt", s.prompt.ids},
            {"r0", s.r0.ids},            {"r0_len", s.r0.length},
            {"rt", s.rt.ids},            {"roles", roles}};
}

inline CorruptedSample corrupted_sample_from_json(const nlohmann::json& j) {
    CorruptedSample s;
    s.scene = scene_from_json(j.at("scene"));
    s.t = j.at("t").get<double>();
    s.prompt.ids = j.at("prompt").get<std::vector<int>>();
    s.prompt.length = s.prompt.window();
    s.r0.ids = j.at("r0").get<std::vector<int>>();
    s.r0.length = j.at("r0_len").get<int>();
    s.rt.ids = j.at("rt").get<std::vector<int>>();
    s.rt.length = s.r0.length;
    for (int r : j.at("roles").get<std::vector<int>>()) s.roles.push_back(static_cast<Role>(r));
    return s;
}

}  // namespace rediff
