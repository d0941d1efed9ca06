#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "rediff/model.hpp"
#include "rediff/rng.hpp"
#include "rediff/vocab.hpp"

#include <json.hpp>

namespace rediff {

struct DecodeConfig {
    int steps = 16;
    int tokens_per_step = 4;
    bool refine = true;
    uint64_t seed = 0;
    double temperature = 0.0;  // 0 = argmax
    bool record_trace = false;
    // optional acceptance threshold for refinement replacements; 0 replaces
    // unconditionally as in the base scheme
    double refine_threshold = 0.0;

    void validate(int response_len) const {
        if (tokens_per_step < 1) throw std::invalid_argument("tokens_per_step must be >= 1");
        if (steps < 1) throw std::invalid_argument("steps must be >= 1");
        if (static_cast<long long>(steps) * tokens_per_step < response_len)
            throw std::invalid_argument("steps * tokens_per_step must cover the response");
        if (temperature < 0.0) throw std::invalid_argument("temperature must be >= 0");
    }
};

struct DecodeStepRecord {
    std::vector<int> tokens;          // response snapshot after the step
    std::vector<double> confidence;   // per-position argmax probability
    std::vector<int> committed;       // positions unmasked this step
    std::vector<int> refined;         // previously-unmasked positions changed this step
};

struct DecodeTrace {
    std::vector<DecodeStepRecord> steps;
};

struct DecodeResult {
    TokenSequence response;
    DecodeTrace trace;
};

// probability of the argmax token under softmax(row)
inline double confidence(const double* row, int vocab) {
    double mx = row[0];
    for (int j = 1; j < vocab; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (int j = 0; j < vocab; ++j) sum += std::exp(row[j] - mx);
    return 1.0 / sum;
}

inline double confidence(const std::vector<double>& logits, int vocab, int position) {
    return confidence(logits.data() + static_cast<size_t>(position) * vocab, vocab);
}

// Predictor abstraction so stub models can drive the sampler in tests: maps
// the current response tokens to [response_len, vocab] logits.
using Predictor = std::function<std::vector<double>(const TokenSequence&)>;

inline Predictor make_predictor(const ModelParams& params, const TokenSequence& scene_ids,
                                const TokenSequence& prompt_ids) {
    auto acts = std::make_shared<Activations>(params.config);
    return [&params, scene_ids, prompt_ids, acts](const TokenSequence& response) {
        forward(params, scene_ids, prompt_ids, response, *acts);
        return acts->logits;
    };
}

namespace detail {

struct TokenChoice {
    int token = 0;
    double conf = 0.0;  // probability of the argmax token
};

// The absorbing MASK state is never a valid emission: it is excluded from
// both the argmax and the sampling distribution. Confidence stays the plain
// softmax probability of the chosen token.
inline TokenChoice choose_token(const double* row, int vocab, double temperature, Rng& rng) {
    int argmax = -1;
    double mx_all = row[0];
    for (int j = 0; j < vocab; ++j) {
        mx_all = std::max(mx_all, row[j]);
        if (j == Vocab::MASK) continue;
        if (argmax < 0 || row[j] > row[argmax]) argmax = j;
    }
    double sum_all = 0.0;
    for (int j = 0; j < vocab; ++j) sum_all += std::exp(row[j] - mx_all);
    TokenChoice out{argmax, std::exp(row[argmax] - mx_all) / sum_all};
    const double mx = row[argmax];
    if (temperature > 0.0) {
        double zsum = 0.0;
        std::vector<double> z(vocab, 0.0);
        for (int j = 0; j < vocab; ++j) {
            if (j == Vocab::MASK) continue;
            z[j] = std::exp((row[j] - mx) / temperature);
            zsum += z[j];
        }
        double u = rng.uniform() * zsum;
        for (int j = 0; j < vocab; ++j) {
            u -= z[j];
            if (z[j] > 0.0 && u <= 0.0) {
                out.token = j;
                break;
            }
        }
    }
    return out;
}

}  // namespace detail

// Reverse-process decoding. Starts from an all-MASK response; each step runs
// one forward pass, commits the tokens_per_step most confident masked
// positions (ties broken toward the lowest index), and, when refine is on,
// overwrites every previously-unmasked response position with the newly
// predicted token from the same pass. Committed tokens are frozen when
// refine is off.
inline DecodeResult decode(const Predictor& predict, int response_len, int vocab_size,
                           const DecodeConfig& config) {
    config.validate(response_len);
    Rng rng = Rng(config.seed).substream("decode");

    DecodeResult result;
    result.response.ids.assign(response_len, Vocab::MASK);
    result.response.length = response_len;
    std::vector<bool> unmasked(response_len, false);

    std::vector<detail::TokenChoice> choice(response_len);
    std::vector<int> masked_positions;

    for (int step = 0; step < config.steps; ++step) {
        const auto logits = predict(result.response);
        if (logits.size() != static_cast<size_t>(response_len) * vocab_size)
            throw ShapeMismatch("predictor returned wrong logits shape");

        for (int i = 0; i < response_len; ++i)
            choice[i] = detail::choose_token(logits.data() + static_cast<size_t>(i) * vocab_size,
                                             vocab_size, config.temperature, rng);

        DecodeStepRecord rec;

        // unmask the top-n most confident masked positions
        masked_positions.clear();
        for (int i = 0; i < response_len; ++i)
            if (!unmasked[i]) masked_positions.push_back(i);
        const int n_commit = std::min<int>(config.tokens_per_step,
                                           static_cast<int>(masked_positions.size()));
        std::partial_sort(masked_positions.begin(), masked_positions.begin() + n_commit,
                          masked_positions.end(), [&](int a, int b) {
                              if (choice[a].conf != choice[b].conf)
                                  return choice[a].conf > choice[b].conf;
                              return a < b;
                          });
        for (int k = 0; k < n_commit; ++k) {
            const int pos = masked_positions[k];
            result.response.ids[pos] = choice[pos].token;
            rec.committed.push_back(pos);
        }

        // refinement: replace previously-unmasked positions with the fresh
        // prediction from the same forward pass
        if (config.refine) {
            for (int i = 0; i < response_len; ++i) {
                if (!unmasked[i]) continue;
                if (config.refine_threshold > 0.0 && choice[i].conf < config.refine_threshold)
                    continue;
                if (result.response.ids[i] != choice[i].token) {
                    result.response.ids[i] = choice[i].token;
                    rec.refined.push_back(i);
                }
            }
        }

        for (int k = 0; k < n_commit; ++k) unmasked[masked_positions[k]] = true;

        if (config.record_trace) {
            rec.tokens = result.response.ids;
            rec.confidence.resize(response_len);
            for (int i = 0; i < response_len; ++i) rec.confidence[i] = choice[i].conf;
            std::sort(rec.committed.begin(), rec.committed.end());
            result.trace.steps.push_back(std::move(rec));
        }
    }
    return result;
}

inline DecodeResult decode_baseline(const Predictor& predict, int response_len, int vocab_size,
                                    DecodeConfig config) {
    config.refine = false;
    return decode(predict, response_len, vocab_size, config);
}

inline DecodeResult decode_rediff(const Predictor& predict, int response_len, int vocab_size,
                                  DecodeConfig config) {
    config.refine = true;
    return decode(predict, response_len, vocab_size, config);
}

inline DecodeResult decode(const ModelParams& params, const TokenSequence& scene_ids,
                           const TokenSequence& prompt_ids, const DecodeConfig& config) {
    return decode(make_predictor(params, scene_ids, prompt_ids), params.config.dims.response_len,
                  params.config.vocab_size, config);
}

inline nlohmann::json to_json(const DecodeTrace& trace) {
    nlohmann::json steps = nlohmann::json::array();
    for (const auto& s : trace.steps) {
        steps.push_back({{"tokens", s.tokens},
                         {"confidence", s.confidence},
                         {"committed", s.committed},
                         {"refined", s.refined}});
    }
    return {{"steps", steps}};
}

inline DecodeTrace trace_from_json(const nlohmann::json& j) {
    DecodeTrace t;
    for (const auto& sj : j.at("steps")) {
        DecodeStepRecord r;
        r.tokens = sj.at("tokens").get<std::vector<int>>();
        r.confidence = sj.at("confidence").get<std::vector<double>>();
        r.committed = sj.at("committed").get<std::vector<int>>();
        r.refined = sj.at("refined").get<std::vector<int>>();
        t.steps.push_back(std::move(r));
    }
    return t;
}

// Aligned text view of a trace: one line per step, newly committed tokens
// marked with +, refined ones with *.
inline std::string render_trace_text(const DecodeTrace& trace, const Vocab& vocab) {
    std::ostringstream out;
    for (size_t s = 0; s < trace.steps.size(); ++s) {
        const auto& rec = trace.steps[s];
        out << "step " << s + 1 << ": ";
        for (size_t i = 0; i < rec.tokens.size(); ++i) {
            const bool committed =
                std::find(rec.committed.begin(), rec.committed.end(), static_cast<int>(i)) !=
                rec.committed.end();
            const bool refined =
                std::find(rec.refined.begin(), rec.refined.end(), static_cast<int>(i)) !=
                rec.refined.end();
            if (i) out << ' ';
            if (committed) out << '+';
            if (refined) out << '*';
            out << vocab.token(rec.tokens[i]);
        }
        out << '\n';
    }
    return out.str();
}

// Minimal SVG diff view: one row per step, committed tokens green, refined
// tokens red-boxed.
inline std::string render_trace_svg(const DecodeTrace& trace, const Vocab& vocab) {
    const int cell_w = 46, cell_h = 18;
    const int rows = static_cast<int>(trace.steps.size());
    const int cols = trace.steps.empty() ? 0 : static_cast<int>(trace.steps[0].tokens.size());
    std::ostringstream out;
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << (cols + 2) * cell_w
        << "\" height=\"" << (rows + 1) * cell_h << "\" font-family=\"monospace\" font-size=\"10\">\n";
    for (int s = 0; s < rows; ++s) {
        const auto& rec = trace.steps[s];
        const int y = (s + 1) * cell_h;
        out << "<text x=\"2\" y=\"" << y << "\">" << s + 1 << "</text>\n";
        for (int i = 0; i < cols; ++i) {
            const bool committed =
                std::find(rec.committed.begin(), rec.committed.end(), i) != rec.committed.end();
            const bool refined =
                std::find(rec.refined.begin(), rec.refined.end(), i) != rec.refined.end();
            const char* fill = refined ? "#c62828" : committed ? "#2e7d32" : "#444444";
            out << "<text x=\"" << (i + 1) * cell_w << "\" y=\"" << y << "\" fill=\"" << fill
                << "\">" << vocab.token(rec.tokens[i]) << "</text>\n";
        }
    }
    out << "</svg>\n";
    return out.str();
}

}  // namespace rediff
