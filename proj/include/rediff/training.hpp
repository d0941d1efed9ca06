#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "rediff/diffusion.hpp"
#include "rediff/losses.hpp"
#include "rediff/model.hpp"
#include "rediff/parallel.hpp"
#include "rediff/revisor.hpp"
#include "rediff/sampler.hpp"

#include <json.hpp>

namespace rediff {

struct DivergedLoss : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct EmptyDraftCorpus : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class Stage { PretrainMaskOnly, Stage1, Stage2 };

inline const char* to_string(Stage s) {
    switch (s) {
        case Stage::PretrainMaskOnly: return "pretrain_mask_only";
        case Stage::Stage1: return "stage1";
        default: return "stage2";
    }
}

inline Stage stage_from_string(const std::string& s) {
    if (s == "pretrain_mask_only") return Stage::PretrainMaskOnly;
    if (s == "stage1") return Stage::Stage1;
    if (s == "stage2") return Stage::Stage2;
    throw std::invalid_argument("unknown stage: " + s);
}

struct StageConfig {
    Stage stage = Stage::Stage1;
    int dataset_size = 2000;  // seeded scene pool
    int batch_size = 16;
    int steps = 1000;
    AdamConfig adam;
    std::string lr_schedule = "constant";  // constant | cosine
    CorruptionConfig corruption;

    // stage 2
    std::vector<int> draft_step_counts = {64, 16, 8};
    int draft_scene_count = 150;  // scenes decoded per round
    double stage1_mix_fraction = 0.2;
    int rounds = 1;
    bool refine_time_weight = false;  // adds an inverse-rate weight to refine samples

    double lr_at(int step) const {
        if (lr_schedule == "cosine")
            return adam.lr * 0.5 * (1.0 + std::cos(3.141592653589793 * step / std::max(1, steps)));
        return adam.lr;
    }
};

inline nlohmann::json to_json(const StageConfig& c) {
    return {{"stage", to_string(c.stage)},
            {"dataset_size", c.dataset_size},
            {"batch_size", c.batch_size},
            {"steps", c.steps},
            {"lr", c.adam.lr},
            {"beta1", c.adam.beta1},
            {"beta2", c.adam.beta2},
            {"eps", c.adam.eps},
            {"lr_schedule", c.lr_schedule},
            {"syntax_enabled", c.corruption.syntax_enabled},
            {"hallucination_enabled", c.corruption.hallucination_enabled},
            {"syntax_rate", c.corruption.syntax_rate},
            {"rate_mode", c.corruption.rate_mode == RateMode::Fixed ? "fixed" : "dynamic"},
            {"hallucination_per_sample", c.corruption.hallucination_per_sample},
            {"draft_step_counts", c.draft_step_counts},
            {"draft_scene_count", c.draft_scene_count},
            {"stage1_mix_fraction", c.stage1_mix_fraction},
            {"rounds", c.rounds},
            {"refine_time_weight", c.refine_time_weight}};
}

inline StageConfig stage_config_from_json(const nlohmann::json& j) {
    StageConfig c;
    c.stage = stage_from_string(j.value("stage", "stage1"));
    c.dataset_size = j.value("dataset_size", c.dataset_size);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.steps = j.value("steps", c.steps);
    c.adam.lr = j.value("lr", c.adam.lr);
    c.adam.beta1 = j.value("beta1", c.adam.beta1);
    c.adam.beta2 = j.value("beta2", c.adam.beta2);
    c.adam.eps = j.value("eps", c.adam.eps);
    c.lr_schedule = j.value("lr_schedule", c.lr_schedule);
    c.corruption.syntax_enabled = j.value("syntax_enabled", true);
    c.corruption.hallucination_enabled = j.value("hallucination_enabled", true);
    c.corruption.syntax_rate = j.value("syntax_rate", 0.1);
    c.corruption.rate_mode =
        j.value("rate_mode", "fixed") == std::string("dynamic") ? RateMode::Dynamic : RateMode::Fixed;
    c.corruption.hallucination_per_sample = j.value("hallucination_per_sample", 1);
    if (j.contains("draft_step_counts"))
        c.draft_step_counts = j.at("draft_step_counts").get<std::vector<int>>();
    c.draft_scene_count = j.value("draft_scene_count", c.draft_scene_count);
    c.stage1_mix_fraction = j.value("stage1_mix_fraction", c.stage1_mix_fraction);
    c.rounds = j.value("rounds", c.rounds);
    c.refine_time_weight = j.value("refine_time_weight", false);
    return c;
}

// Everything needed to bit-reproduce a run.
struct RunManifest {
    std::string run_id;
    std::string subcommand;
    uint64_t seed = 0;
    nlohmann::json stage_config;
    nlohmann::json model_config;
    uint64_t grammar_hash = 0;
    uint64_t vocab_hash = 0;
    std::string parent_checkpoint;  // empty for fresh runs
    std::string code_version = "0.1.0";
    nlohmann::json notes;  // counters such as skipped drafts

    nlohmann::json to_json() const {
        return {{"run_id", run_id},
                {"subcommand", subcommand},
                {"seed", seed},
                {"stage_config", stage_config},
                {"model_config", model_config},
                {"grammar_hash", grammar_hash},
                {"vocab_hash", vocab_hash},
                {"parent_checkpoint", parent_checkpoint},
                {"code_version", code_version},
                {"notes", notes}};
    }
    void save(const std::string& path) const {
        std::ofstream out(path);
        if (!out) throw std::runtime_error("cannot write manifest: " + path);
        out << to_json().dump(2) << '\n';
    }
};

inline nlohmann::json to_json(const ModelConfig& c) {
    return {{"vocab_size", c.vocab_size}, {"d_model", c.d_model},   {"n_layers", c.n_layers},
            {"n_heads", c.n_heads},       {"d_ff", c.d_ff},         {"scene_len", c.dims.scene_len},
            {"prompt_len", c.dims.prompt_len}, {"response_len", c.dims.response_len}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.vocab_size = j.value("vocab_size", 0);
    c.d_model = j.value("d_model", c.d_model);
    c.n_layers = j.value("n_layers", c.n_layers);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.d_ff = j.value("d_ff", c.d_ff);
    c.dims.scene_len = j.value("scene_len", c.dims.scene_len);
    c.dims.prompt_len = j.value("prompt_len", c.dims.prompt_len);
    c.dims.response_len = j.value("response_len", c.dims.response_len);
    return c;
}

// Draws one Stage-I sample (retrying NoEligibleSpan skips with fresh
// sub-seeds; at most 16 tries before moving to the next scene index).
inline CorruptedSample draw_stage1_sample(const TaskContext& task, const StageConfig& cfg,
                                          const NoiseSchedule& schedule, uint64_t run_seed,
                                          uint64_t step, int slot) {
    Rng rng = Rng(run_seed).substream("data", step * 4096 + slot);
    for (int attempt = 0;; ++attempt) {
        const int idx = static_cast<int>(rng.uniform_int(cfg.dataset_size));
        const Scene scene = task.scene_for(run_seed, "trainset", idx);
        auto sample = build_stage1_sample(scene, *task.grammar, *task.vocab, cfg.corruption,
                                          schedule, task.dims, rng.substream("sample", attempt));
        if (sample) return std::move(*sample);
        if (attempt >= 16)
            throw std::runtime_error("could not build a stage-1 sample in 16 attempts");
    }
}

struct TrainLogEntry {
    int64_t step;
    TypedLossReport report;
};

struct TrainResult {
    ModelParams params;
    AdamState adam;
    int64_t steps_done = 0;
    std::vector<TrainLogEntry> history;
};

namespace detail {

// One worker slot: reusable activations plus a gradient buffer.
struct WorkerSlot {
    std::unique_ptr<Activations> acts;
    std::vector<double> dlogits;
};

}  // namespace detail

// Optimizes the masked-token objective (pretrain) or the four-term revision
// objective (Stage I)
// over freshly built corrupted batches. Gradients are reduced in batch-item
// order, so results are bit-identical regardless of thread count.
inline TrainResult train_denoise(ModelParams params, AdamState adam, const TaskContext& task,
                                 const StageConfig& cfg, uint64_t run_seed,
                                 std::ostream* log = nullptr) {
    const ModelConfig& mc = params.config;
    const NoiseSchedule schedule;
    const int B = cfg.batch_size;
    const size_t logit_size = static_cast<size_t>(mc.dims.response_len) * mc.vocab_size;

    const int n_threads = worker_count();
    std::vector<detail::WorkerSlot> slots(n_threads);
    for (auto& s : slots) {
        s.acts = std::make_unique<Activations>(mc);
        s.dlogits.assign(logit_size, 0.0);
    }
    std::vector<std::vector<double>> item_grads(B);
    for (auto& g : item_grads) g.assign(params.theta.size(), 0.0);
    std::vector<TypedLossReport> item_reports(B);
    std::vector<CorruptedSample> batch(B);

    std::vector<double> grad(params.theta.size());
    if (log) write_loss_csv_header(*log);

    TrainResult result;
    for (int step = 0; step < cfg.steps; ++step) {
        try {
        parallel_for(B, [&](int t, int i) {
            auto& slot = slots[t];
            batch[i] = draw_stage1_sample(task, cfg, schedule, run_seed, step, i);
            const auto& s = batch[i];
            const auto scene_ids = encode_scene(s.scene, *task.vocab, *task.grammar,
                                                mc.dims.scene_len);
            forward(params, scene_ids, s.prompt, s.rt, *slot.acts);
            std::fill(slot.dlogits.begin(), slot.dlogits.end(), 0.0);
            std::fill(item_grads[i].begin(), item_grads[i].end(), 0.0);
            LossSample ls{&slot.acts->logits, &s.r0, &s.roles, s.t};
            std::vector<LossSample> one{ls};
            std::vector<std::vector<double>> dl{std::move(slot.dlogits)};
            TypedLossReport rep;
            if (cfg.stage == Stage::PretrainMaskOnly) {
                const auto ml = loss_masked(one, &dl, 1.0 / B);
                rep.mask = ml.value;
                rep.n_mask = ml.n_masked;
                rep.total = ml.value;
            } else {
                rep = loss_revision(one, &dl, 1.0 / B);
            }
            item_reports[i] = rep;
            backward(params, *slot.acts, dl[0], item_grads[i]);
            slot.dlogits = std::move(dl[0]);
        }, n_threads);
        } catch (const NonFiniteLoss& ex) {
            throw DivergedLoss(std::string(ex.what()) + " at step " + std::to_string(step));
        }

        std::fill(grad.begin(), grad.end(), 0.0);
        TypedLossReport report;
        for (int i = 0; i < B; ++i) {
            const auto& g = item_grads[i];
            for (size_t k = 0; k < grad.size(); ++k) grad[k] += g[k];
            const auto& r = item_reports[i];
            report.mask += r.mask;
            report.syntax += r.syntax;
            report.hallucination += r.hallucination;
            report.clean += r.clean;
            report.n_mask += r.n_mask;
            report.n_syntax += r.n_syntax;
            report.n_hallucination += r.n_hallucination;
            report.n_clean += r.n_clean;
        }
        report.total = report.mask + report.syntax + report.hallucination + report.clean;
        if (!std::isfinite(report.total))
            throw DivergedLoss("non-finite loss at step " + std::to_string(step));

        AdamConfig ac = cfg.adam;
        ac.lr = cfg.lr_at(step);
        adam_step(params, grad, adam, ac);

        if (log) append_loss_csv(*log, step, report);
        result.history.push_back({step, report});
    }
    result.params = std::move(params);
    result.adam = std::move(adam);
    result.steps_done = cfg.steps;
    return result;
}

inline TrainResult train_pretrain(ModelParams params, const TaskContext& task, StageConfig cfg,
                                  uint64_t run_seed, std::ostream* log = nullptr) {
    cfg.stage = Stage::PretrainMaskOnly;
    cfg.corruption.syntax_enabled = false;
    cfg.corruption.hallucination_enabled = false;
    return train_denoise(std::move(params), AdamState{}, task, cfg, run_seed, log);
}

inline TrainResult train_stage1(ModelParams params, AdamState adam, const TaskContext& task,
                                StageConfig cfg, uint64_t run_seed, std::ostream* log = nullptr) {
    cfg.stage = Stage::Stage1;
    return train_denoise(std::move(params), std::move(adam), task, cfg, run_seed, log);
}

// Decodes every scene at every configured step count with refinement on;
// drafts remember the step count that produced them.
inline std::vector<std::pair<TokenSequence, int>> generate_drafts(
    const ModelParams& params, const TaskContext& task, const std::vector<Scene>& scenes,
    const std::vector<int>& step_counts, uint64_t seed) {
    const int R = params.config.dims.response_len;
    const int n_jobs = static_cast<int>(scenes.size() * step_counts.size());
    std::vector<std::pair<TokenSequence, int>> drafts(n_jobs);
    parallel_for(n_jobs, [&](int, int job) {
        const int si = job / static_cast<int>(step_counts.size());
        const int ci = job % static_cast<int>(step_counts.size());
        const int steps = step_counts[ci];
        DecodeConfig dc;
        dc.steps = steps;
        dc.tokens_per_step = (R + steps - 1) / steps;
        dc.refine = true;
        dc.seed = hash_combine(seed, job);
        const auto scene_ids =
            encode_scene(scenes[si], *task.vocab, *task.grammar, params.config.dims.scene_len);
        const auto prompt = encode_prompt(*task.vocab, *task.grammar, params.config.dims.prompt_len);
        drafts[job] = {decode(params, scene_ids, prompt, dc).response, steps};
    });
    return drafts;
}

struct DraftCorpusStats {
    int right = 0;
    int unalignable = 0;
    int revised = 0;
};

// Runs the oracle revisor over freshly generated drafts and keeps the
// revisable ones as Stage-II training pairs.
inline std::vector<DraftPair> build_oracle_corpus(const ModelParams& params,
                                                  const TaskContext& task,
                                                  const StageConfig& cfg, uint64_t run_seed,
                                                  int round, DraftCorpusStats* stats = nullptr) {
    std::vector<Scene> scenes;
    scenes.reserve(cfg.draft_scene_count);
    for (int i = 0; i < cfg.draft_scene_count; ++i)
        scenes.push_back(task.scene_for(run_seed, "draftset", round * 1000003 + i));

    const auto drafts = generate_drafts(params, task, scenes, cfg.draft_step_counts,
                                        hash_combine(run_seed, 0x5742u + round));
    const auto prompt = encode_prompt(*task.vocab, *task.grammar, params.config.dims.prompt_len);

    std::vector<DraftPair> corpus;
    DraftCorpusStats st;
    for (size_t job = 0; job < drafts.size(); ++job) {
        const auto& [draft, steps] = drafts[job];
        const Scene& scene = scenes[job / cfg.draft_step_counts.size()];
        const auto review = oracle_revise(scene, draft, *task.grammar, *task.vocab);
        if (review.status == ReviewStatus::Right) {
            ++st.right;
            continue;
        }
        if (review.status == ReviewStatus::Unalignable) {
            ++st.unalignable;
            continue;
        }
        auto [refined, positions] = apply_revisions(draft, review.pairs);
        DraftPair pair;
        pair.scene = scene;
        pair.prompt = prompt;
        pair.draft = draft;
        pair.refined = std::move(refined);
        pair.mistake_positions = std::move(positions);
        pair.source = DraftSource::Oracle;
        pair.decode_steps = steps;
        corpus.push_back(std::move(pair));
        ++st.revised;
    }
    if (stats) *stats = st;
    return corpus;
}

// Stage II: batches mix refine samples (loss on corrected spans of the
// model's own drafts) with Stage-I samples. With `rounds` > 1 each round's
// model generates the next round's drafts.
inline TrainResult train_stage2(ModelParams params, AdamState adam, const TaskContext& task,
                                StageConfig cfg, uint64_t run_seed, std::ostream* log = nullptr,
                                const std::vector<DraftPair>* fixed_corpus = nullptr,
                                DraftCorpusStats* stats_out = nullptr) {
    cfg.stage = Stage::Stage2;
    const ModelConfig& mc = params.config;
    const NoiseSchedule schedule;
    const int B = cfg.batch_size;
    const int n_mix = static_cast<int>(std::lround(cfg.stage1_mix_fraction * B));
    const size_t logit_size = static_cast<size_t>(mc.dims.response_len) * mc.vocab_size;

    const int n_threads = worker_count();
    std::vector<detail::WorkerSlot> slots(n_threads);
    for (auto& s : slots) {
        s.acts = std::make_unique<Activations>(mc);
        s.dlogits.assign(logit_size, 0.0);
    }
    std::vector<std::vector<double>> item_grads(B);
    for (auto& g : item_grads) g.assign(params.theta.size(), 0.0);
    std::vector<TypedLossReport> item_reports(B);
    std::vector<double> grad(params.theta.size());
    if (log) write_loss_csv_header(*log);

    TrainResult result;
    int64_t global_step = 0;
    for (int round = 0; round < cfg.rounds; ++round) {
        std::vector<DraftPair> corpus;
        const std::vector<DraftPair>* active = fixed_corpus;
        if (!active || round > 0) {
            corpus = build_oracle_corpus(params, task, cfg, run_seed, round, stats_out);
            active = &corpus;
        }
        if (active->empty() && cfg.stage1_mix_fraction < 1.0)
            throw EmptyDraftCorpus("no revisable drafts in round " + std::to_string(round));

        std::vector<CorruptedSample> mix_batch(B);
        std::vector<const DraftPair*> refine_batch(B, nullptr);

        for (int step = 0; step < cfg.steps; ++step, ++global_step) {
            Rng pick = Rng(run_seed).substream("stage2-pick", global_step);
            for (int i = 0; i < B; ++i) {
                if (i < n_mix || active->empty()) {
                    refine_batch[i] = nullptr;
                } else {
                    refine_batch[i] = &(*active)[pick.uniform_int(active->size())];
                }
            }

            const int64_t step_for_data = global_step;
            try {
            parallel_for(B, [&](int t, int i) {
                auto& slot = slots[t];
                if (!refine_batch[i])
                    mix_batch[i] =
                        draw_stage1_sample(task, cfg, schedule, run_seed, step_for_data, i);
                std::fill(slot.dlogits.begin(), slot.dlogits.end(), 0.0);
                std::fill(item_grads[i].begin(), item_grads[i].end(), 0.0);
                std::vector<std::vector<double>> dl{std::move(slot.dlogits)};
                TypedLossReport rep;
                if (refine_batch[i]) {
                    const DraftPair& d = *refine_batch[i];
                    const auto scene_ids =
                        encode_scene(d.scene, *task.vocab, *task.grammar, mc.dims.scene_len);
                    forward(params, scene_ids, d.prompt, d.draft, *slot.acts);
                    double tw = 1.0;
                    if (cfg.refine_time_weight) {
                        const int cap = caption_token_count(d.draft);
                        tw = cap > 0 ? static_cast<double>(cap) /
                                           std::max<size_t>(1, d.mistake_positions.size())
                                     : 1.0;
                    }
                    RefineSample rs{&slot.acts->logits, &d.refined, &d.mistake_positions, tw};
                    std::vector<RefineSample> one{rs};
                    const auto rl = loss_refine(one, &dl, 1.0 / B);
                    rep.refine = rl.value;
                    rep.n_mistake = rl.n_mistake;
                    rep.total = rl.value;
                } else {
                    const auto& s = mix_batch[i];
                    const auto scene_ids =
                        encode_scene(s.scene, *task.vocab, *task.grammar, mc.dims.scene_len);
                    forward(params, scene_ids, s.prompt, s.rt, *slot.acts);
                    LossSample ls{&slot.acts->logits, &s.r0, &s.roles, s.t};
                    std::vector<LossSample> one{ls};
                    rep = loss_revision(one, &dl, 1.0 / B);
                }
                item_reports[i] = rep;
                backward(params, *slot.acts, dl[0], item_grads[i]);
                slot.dlogits = std::move(dl[0]);
            }, n_threads);
            } catch (const NonFiniteLoss& ex) {
                throw DivergedLoss(std::string(ex.what()) + " at step " +
                                   std::to_string(global_step));
            }

            std::fill(grad.begin(), grad.end(), 0.0);
            TypedLossReport report;
            double refine_sum = 0.0;
            for (int i = 0; i < B; ++i) {
                const auto& g = item_grads[i];
                for (size_t k = 0; k < grad.size(); ++k) grad[k] += g[k];
                const auto& r = item_reports[i];
                report.mask += r.mask;
                report.syntax += r.syntax;
                report.hallucination += r.hallucination;
                report.clean += r.clean;
                report.n_mask += r.n_mask;
                report.n_syntax += r.n_syntax;
                report.n_hallucination += r.n_hallucination;
                report.n_clean += r.n_clean;
                report.n_mistake += r.n_mistake;
                if (r.refine) refine_sum += *r.refine;
            }
            report.refine = refine_sum;
            report.total =
                report.mask + report.syntax + report.hallucination + report.clean + refine_sum;
            if (!std::isfinite(report.total))
                throw DivergedLoss("non-finite loss at step " + std::to_string(global_step));

            AdamConfig ac = cfg.adam;
            ac.lr = cfg.lr_at(step);
            adam_step(params, grad, adam, ac);

            if (log) append_loss_csv(*log, global_step, report);
            result.history.push_back({global_step, report});
        }
    }
    result.params = std::move(params);
    result.adam = std::move(adam);
    result.steps_done = global_step;
    return result;
}

}  // namespace rediff
