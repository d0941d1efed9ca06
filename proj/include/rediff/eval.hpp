#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "rediff/diffusion.hpp"
#include "rediff/grammar.hpp"
#include "rediff/model.hpp"
#include "rediff/parallel.hpp"
#include "rediff/sampler.hpp"
#include "rediff/vocab.hpp"

namespace rediff {

struct MissingGridCell : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Oracle metrics for one decoded caption against its scene. Every mentioned
// attribute slot is counted exactly once as correct or wrong; every scene
// attribute slot exactly once as correct, wrong or absent.
struct CaptionMetrics {
    double attribute_mismatch = 0.0;  // wrong mentioned slots / mentioned slots
    double grammar_validity = 0.0;    // parsed sentences / sentences
    double coverage = 0.0;            // correct scene slots / scene slots
    double token_accuracy = 0.0;      // positional match vs reference response
};

inline constexpr int kSlotsPerObject = 5;  // category, color, size, count, position

inline CaptionMetrics compute_caption_metrics(const Scene& scene, const TokenSequence& response,
                                              const CaptionGrammar& grammar, const Vocab& vocab,
                                              const TokenSequence* reference = nullptr) {
    CaptionMetrics m;
    const auto words = caption_words(response, vocab);
    const auto parsed = grammar.parse_caption(words);
    m.grammar_validity = parsed.validity;

    int mentioned = 0, wrong = 0, covered = 0;
    std::vector<bool> claimed(scene.objects.size(), false);
    for (const auto& po : parsed.objects) {
        mentioned += kSlotsPerObject;
        int match = -1;
        for (size_t k = 0; k < scene.objects.size(); ++k) {
            if (!claimed[k] && scene.objects[k].category == po.attrs.category) {
                match = static_cast<int>(k);
                break;
            }
        }
        if (match < 0) {
            wrong += kSlotsPerObject;  // hallucinated or duplicated object
            continue;
        }
        claimed[match] = true;
        const auto& obj = scene.objects[match];
        ++covered;  // category itself
        const bool color_ok = obj.color == po.attrs.color;
        const bool size_ok = obj.size == po.attrs.size;
        const bool count_ok = obj.count == po.attrs.count;
        const bool pos_ok = obj.position == po.attrs.position;
        covered += color_ok + size_ok + count_ok + pos_ok;
        wrong += !color_ok + !size_ok + !count_ok + !pos_ok;
    }
    m.attribute_mismatch = mentioned > 0 ? static_cast<double>(wrong) / mentioned : 0.0;
    m.coverage = static_cast<double>(covered) /
                 (kSlotsPerObject * static_cast<double>(scene.objects.size()));

    if (reference) {
        int same = 0;
        for (int i = 0; i < response.window(); ++i)
            if (response.ids[i] == reference->ids[i]) ++same;
        m.token_accuracy = static_cast<double>(same) / response.window();
    }
    return m;
}

struct MetricStats {
    double mean = 0.0;
    double ci_lo = 0.0;
    double ci_hi = 0.0;
};

// Percentile bootstrap over per-scene values (1000 resamples).
inline MetricStats bootstrap_mean(const std::vector<double>& values, uint64_t seed,
                                  int resamples = 1000) {
    MetricStats st;
    if (values.empty()) return st;
    double sum = 0.0;
    for (double v : values) sum += v;
    st.mean = sum / values.size();

    Rng rng = Rng(seed).substream("bootstrap");
    std::vector<double> means(resamples);
    for (int b = 0; b < resamples; ++b) {
        double s = 0.0;
        for (size_t i = 0; i < values.size(); ++i) s += values[rng.uniform_int(values.size())];
        means[b] = s / values.size();
    }
    std::sort(means.begin(), means.end());
    st.ci_lo = means[static_cast<size_t>(0.025 * (resamples - 1))];
    st.ci_hi = means[static_cast<size_t>(0.975 * (resamples - 1))];
    return st;
}

inline bool ci_separated(const MetricStats& a, const MetricStats& b) {
    return a.ci_hi < b.ci_lo || b.ci_hi < a.ci_lo;
}

struct EvalCell {
    int tokens_per_step = 1;
    int steps = 0;  // 0: derived as ceil(response_len / n)
    bool refine = true;
};

struct EvalRow {
    std::string model_id;
    EvalCell cell;
    int sample_count = 0;
    std::vector<uint64_t> seeds;
    std::vector<CaptionMetrics> values;  // one per (scene, seed)

    MetricStats mismatch_stats, validity_stats, coverage_stats, accuracy_stats;

    void finalize(uint64_t boot_seed) {
        auto collect = [&](auto member) {
            std::vector<double> v;
            v.reserve(values.size());
            for (const auto& x : values) v.push_back(x.*member);
            return v;
        };
        sample_count = static_cast<int>(values.size());
        mismatch_stats = bootstrap_mean(collect(&CaptionMetrics::attribute_mismatch), boot_seed);
        validity_stats = bootstrap_mean(collect(&CaptionMetrics::grammar_validity), boot_seed + 1);
        coverage_stats = bootstrap_mean(collect(&CaptionMetrics::coverage), boot_seed + 2);
        accuracy_stats = bootstrap_mean(collect(&CaptionMetrics::token_accuracy), boot_seed + 3);
    }
};

struct EvalReport {
    std::vector<EvalRow> rows;

    EvalRow* find(const std::string& model_id, int n, bool refine) {
        for (auto& r : rows)
            if (r.model_id == model_id && r.cell.tokens_per_step == n && r.cell.refine == refine)
                return &r;
        return nullptr;
    }
    const EvalRow* find(const std::string& model_id, int n, bool refine) const {
        return const_cast<EvalReport*>(this)->find(model_id, n, refine);
    }
};

// Decodes every scene under one grid cell and scores it against the oracle.
// Deterministic given (params, scenes, seed); scenes decode in parallel into
// per-index slots.
inline EvalRow evaluate_cell(const std::string& model_id, const ModelParams& params,
                             const TaskContext& task, const std::vector<Scene>& scenes,
                             EvalCell cell, uint64_t seed) {
    const int R = params.config.dims.response_len;
    if (cell.steps == 0) cell.steps = (R + cell.tokens_per_step - 1) / cell.tokens_per_step;
    EvalRow row;
    row.model_id = model_id;
    row.cell = cell;
    row.seeds = {seed};
    row.values.resize(scenes.size());

    const auto prompt = encode_prompt(*task.vocab, *task.grammar, params.config.dims.prompt_len);
    parallel_for(static_cast<int>(scenes.size()), [&](int, int i) {
        const auto scene_ids =
            encode_scene(scenes[i], *task.vocab, *task.grammar, params.config.dims.scene_len);
        DecodeConfig dc;
        dc.steps = cell.steps;
        dc.tokens_per_step = cell.tokens_per_step;
        dc.refine = cell.refine;
        dc.seed = hash_combine(seed, i);
        const auto result = decode(params, scene_ids, prompt, dc);
        const auto reference = make_response(
            task.grammar->render_caption(scenes[i], 0, R - 1), *task.vocab, R);
        row.values[i] = compute_caption_metrics(scenes[i], result.response, *task.grammar,
                                                *task.vocab, &reference);
    });
    row.finalize(hash_combine(seed, 0xb007u));
    return row;
}

// Pools rows of the same (model, cell) across training seeds and
// re-finalizes the statistics over the union of per-scene values.
inline EvalRow merge_rows(const std::vector<EvalRow>& rows) {
    if (rows.empty()) throw std::invalid_argument("no rows to merge");
    EvalRow out = rows[0];
    for (size_t i = 1; i < rows.size(); ++i) {
        out.values.insert(out.values.end(), rows[i].values.begin(), rows[i].values.end());
        out.seeds.insert(out.seeds.end(), rows[i].seeds.begin(), rows[i].seeds.end());
    }
    out.finalize(hash_combine(out.seeds.front(), 0xb007u));
    return out;
}

struct DegradationSeries {
    std::string model_id;
    std::string metric;
    std::vector<std::pair<int, double>> series;  // (tokens_per_step, mean)
    double delta = 0.0;                          // metric(n_min) - metric(n_max)
};

// Per-model metric(n) series over the n-grid plus the first-to-last delta.
inline std::vector<DegradationSeries> degradation_curve(const EvalReport& report,
                                                        const std::vector<int>& n_grid,
                                                        bool refine) {
    std::vector<std::string> models;
    for (const auto& r : report.rows)
        if (std::find(models.begin(), models.end(), r.model_id) == models.end())
            models.push_back(r.model_id);

    std::vector<DegradationSeries> out;
    const std::vector<std::pair<std::string, double CaptionMetrics::*>> metrics = {
        {"attribute_mismatch", &CaptionMetrics::attribute_mismatch},
        {"grammar_validity", &CaptionMetrics::grammar_validity},
        {"coverage", &CaptionMetrics::coverage},
        {"token_accuracy", &CaptionMetrics::token_accuracy}};
    for (const auto& model : models) {
        for (const auto& [name, member] : metrics) {
            DegradationSeries ds;
            ds.model_id = model;
            ds.metric = name;
            for (int n : n_grid) {
                const EvalRow* row = report.find(model, n, refine);
                if (!row)
                    throw MissingGridCell("no eval row for model " + model + " at n=" +
                                          std::to_string(n));
                double mean = 0.0;
                for (const auto& v : row->values) mean += v.*member;
                mean /= std::max<size_t>(1, row->values.size());
                ds.series.emplace_back(n, mean);
            }
            ds.delta = ds.series.front().second - ds.series.back().second;
            out.push_back(std::move(ds));
        }
    }
    return out;
}

inline void write_eval_csv(std::ostream& out, const EvalReport& report) {
    out << "model,tokens_per_step,steps,refine,samples,"
           "mismatch,mismatch_lo,mismatch_hi,validity,validity_lo,validity_hi,"
           "coverage,coverage_lo,coverage_hi,token_accuracy,token_accuracy_lo,token_accuracy_hi\n";
    for (const auto& r : report.rows) {
        out << r.model_id << ',' << r.cell.tokens_per_step << ',' << r.cell.steps << ','
            << (r.cell.refine ? 1 : 0) << ',' << r.sample_count << ',' << r.mismatch_stats.mean
            << ',' << r.mismatch_stats.ci_lo << ',' << r.mismatch_stats.ci_hi << ','
            << r.validity_stats.mean << ',' << r.validity_stats.ci_lo << ','
            << r.validity_stats.ci_hi << ',' << r.coverage_stats.mean << ','
            << r.coverage_stats.ci_lo << ',' << r.coverage_stats.ci_hi << ','
            << r.accuracy_stats.mean << ',' << r.accuracy_stats.ci_lo << ','
            << r.accuracy_stats.ci_hi << '\n';
    }
}

// Simple SVG polyline chart of metric(n) per model.
inline std::string render_curves_svg(const std::vector<DegradationSeries>& series,
                                     const std::string& metric) {
    const int w = 480, h = 320, margin = 40;
    std::ostringstream out;
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
        << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
    out << "<text x=\"" << margin << "\" y=\"16\">" << metric << " vs tokens/step</text>\n";
    const char* colors[] = {"#1565c0", "#c62828", "#2e7d32", "#f9a825", "#6a1b9a"};
    int ci = 0;
    double max_n = 1;
    for (const auto& s : series)
        if (s.metric == metric)
            for (auto [n, v] : s.series) max_n = std::max(max_n, static_cast<double>(n));
    for (const auto& s : series) {
        if (s.metric != metric) continue;
        const char* color = colors[ci % 5];
        out << "<polyline fill=\"none\" stroke=\"" << color << "\" points=\"";
        for (auto [n, v] : s.series) {
            const double x = margin + (w - 2 * margin) * (n - 1) / std::max(1.0, max_n - 1);
            const double y = h - margin - (h - 2 * margin) * std::clamp(v, 0.0, 1.0);
            out << x << ',' << y << ' ';
        }
        out << "\"/>\n";
        out << "<text x=\"" << margin << "\" y=\"" << 32 + 14 * ci << "\" fill=\"" << color
            << "\">" << s.model_id << "</text>\n";
        ++ci;
    }
    out << "</svg>\n";
    return out.str();
}

// Fraction of masked positions whose argmax prediction recovers the original
// token, at a fixed noise level. Sanity metric for denoise training.
inline double masked_token_accuracy(const ModelParams& params, const TaskContext& task,
                                    const std::vector<Scene>& scenes, double t, uint64_t seed) {
    const NoiseSchedule schedule;
    const int R = params.config.dims.response_len;
    const int V = params.config.vocab_size;
    std::vector<std::pair<int, int>> hits(scenes.size(), {0, 0});
    const auto prompt = encode_prompt(*task.vocab, *task.grammar, params.config.dims.prompt_len);
    parallel_for(static_cast<int>(scenes.size()), [&](int, int i) {
        Rng rng = Rng(hash_combine(seed, i)).substream("heldout");
        const auto caption = task.grammar->render_caption(scenes[i], rng.next_u64(), R - 1);
        const auto r0 = make_response(caption, *task.vocab, R);
        auto [rt, roles] = forward_mask(r0, t, schedule, rng);
        Activations acts(params.config);
        const auto scene_ids =
            encode_scene(scenes[i], *task.vocab, *task.grammar, params.config.dims.scene_len);
        forward(params, scene_ids, prompt, rt, acts);
        int correct = 0, total = 0;
        for (int p = 0; p < R; ++p) {
            if (roles[p] != Role::Mask) continue;
            const double* row = acts.logits.data() + static_cast<size_t>(p) * V;
            int argmax = 0;
            for (int j = 1; j < V; ++j)
                if (row[j] > row[argmax]) argmax = j;
            correct += argmax == r0.ids[p];
            ++total;
        }
        hits[i] = {correct, total};
    });
    long long c = 0, n = 0;
    for (auto [a, b] : hits) {
        c += a;
        n += b;
    }
    return n == 0 ? 0.0 : static_cast<double>(c) / n;
}

}  // namespace rediff
