#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "rediff/eval.hpp"
#include "rediff/expert_client.hpp"
#include "rediff/training.hpp"

#include <CLI11.hpp>
#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace rediff;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;
constexpr int kExitValidation = 4;

struct BadConfig : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct MissingCheckpoint : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ValidationFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

[[noreturn]] void fail(int code, const std::string& kind, const std::string& message) {
    json err{{"error", kind}, {"message", message}};
    std::cerr << err.dump() << "\n";
    std::exit(code);
}

struct CommonOpts {
    std::string grammar_path = default_grammar_path();
    std::string config_path;
    std::string out_dir;
    uint64_t seed = 0;
    bool resume = false;
};

void add_common(CLI::App* cmd, CommonOpts& o, bool needs_out = true) {
    cmd->add_option("--grammar", o.grammar_path, "grammar file")->capture_default_str();
    cmd->add_option("--config", o.config_path, "JSON config file; flags override its fields");
    cmd->add_option("--seed", o.seed, "run seed; all randomness derives from it")
        ->capture_default_str();
    if (needs_out) {
        cmd->add_option("--out", o.out_dir, "output directory")->required();
        cmd->add_flag("--resume", o.resume, "allow writing into a non-empty output directory");
    }
}

void prepare_out_dir(const CommonOpts& o) {
    if (o.out_dir.empty()) return;
    if (fs::exists(o.out_dir)) {
        if (!fs::is_directory(o.out_dir)) throw BadConfig(o.out_dir + " is not a directory");
        if (!fs::is_empty(o.out_dir) && !o.resume)
            throw BadConfig("output directory " + o.out_dir +
                            " is not empty; pass --resume to reuse it");
    } else {
        fs::create_directories(o.out_dir);
    }
}

struct LoadedTask {
    CaptionGrammar grammar;
    Vocab vocab;
    TaskContext task;
    uint64_t grammar_hash = 0;
};

LoadedTask load_task(const CommonOpts& o, const SeqDims& dims) {
    LoadedTask t{CaptionGrammar::load(o.grammar_path), Vocab{}, TaskContext{}, 0};
    t.vocab = Vocab::build(t.grammar);
    t.task = TaskContext{&t.grammar, &t.vocab, dims};
    t.grammar_hash = fnv1a(read_text_file(o.grammar_path));
    return t;
}

json load_config_json(const std::string& path) {
    if (path.empty()) return json::object();
    std::ifstream in(path);
    if (!in) throw BadConfig("cannot open config file: " + path);
    try {
        return json::parse(in);
    } catch (const json::exception& ex) {
        throw BadConfig(std::string("config is not valid JSON: ") + ex.what());
    }
}

Checkpoint load_ckpt(const std::string& path, const Vocab& vocab) {
    if (path.empty()) throw MissingCheckpoint("no checkpoint given; pass --ckpt/--init");
    if (!fs::exists(path)) throw MissingCheckpoint("checkpoint not found: " + path);
    auto ck = load_checkpoint(path);
    if (ck.vocab_hash != vocab.hash())
        throw ValidationFailure("checkpoint " + path + " was trained with a different vocabulary");
    return ck;
}

RunManifest make_manifest(const std::string& sub, const CommonOpts& o, const LoadedTask& t,
                          const StageConfig& cfg, const ModelConfig& mc,
                          const std::string& parent) {
    RunManifest m;
    m.run_id = sub + "-" + std::to_string(o.seed);
    m.subcommand = sub;
    m.seed = o.seed;
    m.stage_config = to_json(cfg);
    m.model_config = to_json(mc);
    m.grammar_hash = t.grammar_hash;
    m.vocab_hash = t.vocab.hash();
    m.parent_checkpoint = parent;
    return m;
}

void write_history_csv(const std::string& path, const std::vector<TrainLogEntry>& hist) {
    std::ofstream log(path);
    write_loss_csv_header(log);
    for (const auto& e : hist) append_loss_csv(log, e.step, e.report);
}

std::vector<Scene> scenes_from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw BadConfig("cannot open scenes file: " + path);
    std::vector<Scene> scenes;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        scenes.push_back(scene_from_json(json::parse(line)));
    }
    if (scenes.empty()) throw BadConfig("scenes file is empty: " + path);
    return scenes;
}

std::vector<Scene> eval_scene_pool(const TaskContext& task, uint64_t seed, int count) {
    std::vector<Scene> scenes;
    scenes.reserve(count);
    for (int i = 0; i < count; ++i) scenes.push_back(task.scene_for(seed, "evalset", i));
    return scenes;
}

// shared flag block for the training subcommands
struct TrainOpts {
    CommonOpts common;
    StageConfig cfg;
    std::string init_ckpt;
    std::string rate_mode = "fixed";
    bool no_syntax = false;
    bool no_hallucination = false;
    CLI::App* cmd = nullptr;
};

void add_train_flags(CLI::App* cmd, TrainOpts& t) {
    t.cmd = cmd;
    add_common(cmd, t.common);
    cmd->add_option("--init", t.init_ckpt, "checkpoint to continue from (fresh init if omitted)");
    cmd->add_option("--steps", t.cfg.steps, "optimizer steps")->capture_default_str();
    cmd->add_option("--batch-size", t.cfg.batch_size, "samples per step")->capture_default_str();
    cmd->add_option("--dataset-size", t.cfg.dataset_size, "scenes in the training pool")
        ->capture_default_str();
    cmd->add_option("--lr", t.cfg.adam.lr, "adam learning rate")->capture_default_str();
    cmd->add_option("--lr-schedule", t.cfg.lr_schedule, "constant | cosine")
        ->capture_default_str();
    cmd->add_option("--syntax-rate", t.cfg.corruption.syntax_rate,
                    "random token replacement probability")
        ->capture_default_str();
    cmd->add_option("--rate-mode", t.rate_mode, "fixed | dynamic (rate = t when t < 0.1)")
        ->capture_default_str();
    cmd->add_option("--hallucination-per-sample", t.cfg.corruption.hallucination_per_sample,
                    "attribute swaps injected per sample")
        ->capture_default_str();
    cmd->add_flag("--no-syntax", t.no_syntax, "disable syntax error injection");
    cmd->add_flag("--no-hallucination", t.no_hallucination, "disable hallucination injection");
}

// config file supplies StageConfig fields; explicitly passed flags win
void apply_train_flags(TrainOpts& t) {
    if (!t.common.config_path.empty()) {
        const json j = load_config_json(t.common.config_path);
        StageConfig file_cfg = stage_config_from_json(j);
        auto keep = [&](const char* flag) { return t.cmd->count(flag) > 0; };
        if (!keep("--steps")) t.cfg.steps = file_cfg.steps;
        if (!keep("--batch-size")) t.cfg.batch_size = file_cfg.batch_size;
        if (!keep("--dataset-size")) t.cfg.dataset_size = file_cfg.dataset_size;
        if (!keep("--lr")) t.cfg.adam.lr = file_cfg.adam.lr;
        if (!keep("--lr-schedule")) t.cfg.lr_schedule = file_cfg.lr_schedule;
        if (!keep("--syntax-rate")) t.cfg.corruption.syntax_rate = file_cfg.corruption.syntax_rate;
        if (!keep("--rate-mode"))
            t.rate_mode = file_cfg.corruption.rate_mode == RateMode::Dynamic ? "dynamic" : "fixed";
        if (!keep("--hallucination-per-sample"))
            t.cfg.corruption.hallucination_per_sample =
                file_cfg.corruption.hallucination_per_sample;
        if (!keep("--no-syntax")) t.cfg.corruption.syntax_enabled = file_cfg.corruption.syntax_enabled;
        if (!keep("--no-hallucination"))
            t.cfg.corruption.hallucination_enabled = file_cfg.corruption.hallucination_enabled;
        if (t.cmd->get_option_no_throw("--rounds") && !keep("--rounds"))
            t.cfg.rounds = file_cfg.rounds;
        if (t.cmd->get_option_no_throw("--mix") && !keep("--mix"))
            t.cfg.stage1_mix_fraction = file_cfg.stage1_mix_fraction;
        if (t.cmd->get_option_no_throw("--draft-steps") && !keep("--draft-steps"))
            t.cfg.draft_step_counts = file_cfg.draft_step_counts;
        if (t.cmd->get_option_no_throw("--draft-scenes") && !keep("--draft-scenes"))
            t.cfg.draft_scene_count = file_cfg.draft_scene_count;
    }
    if (t.rate_mode == "dynamic") t.cfg.corruption.rate_mode = RateMode::Dynamic;
    else if (t.rate_mode == "fixed") t.cfg.corruption.rate_mode = RateMode::Fixed;
    else throw BadConfig("rate-mode must be fixed or dynamic");
    if (t.no_syntax) t.cfg.corruption.syntax_enabled = false;
    if (t.no_hallucination) t.cfg.corruption.hallucination_enabled = false;
}

ModelConfig default_model_config(const Vocab& vocab, const SeqDims& dims) {
    ModelConfig mc;
    mc.vocab_size = vocab.size();
    mc.dims = dims;
    return mc;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"rediff: refining-enhanced discrete diffusion captioning lab"};
    app.require_subcommand(1);

    // ---- datagen ----
    struct {
        CommonOpts common;
        int count = 1000;
        int samples = 0;
        double syntax_rate = 0.1;
    } datagen;
    auto* cmd_datagen = app.add_subcommand("datagen", "generate scenes, vocab and sample snapshots");
    add_common(cmd_datagen, datagen.common);
    cmd_datagen->add_option("--count", datagen.count, "number of scenes")->capture_default_str();
    cmd_datagen->add_option("--samples", datagen.samples,
                            "also write this many corrupted stage-1 samples");

    // ---- training ----
    TrainOpts pretrain, stage1, stage2;
    auto* cmd_pretrain = app.add_subcommand("pretrain", "mask-prediction pretraining (masked-token objective)");
    add_train_flags(cmd_pretrain, pretrain);
    auto* cmd_stage1 = app.add_subcommand("stage1", "foundational revision training");
    add_train_flags(cmd_stage1, stage1);
    auto* cmd_stage2 = app.add_subcommand("stage2", "online self-correction training");
    add_train_flags(cmd_stage2, stage2);
    std::string stage2_pairs;
    cmd_stage2->add_option("--pairs", stage2_pairs,
                           "draft-pair corpus (JSONL); generated inline if omitted");
    cmd_stage2->add_option("--rounds", stage2.cfg.rounds, "online rounds")->capture_default_str();
    cmd_stage2->add_option("--mix", stage2.cfg.stage1_mix_fraction,
                           "fraction of stage-1 samples per batch")
        ->capture_default_str();
    cmd_stage2
        ->add_option("--draft-steps", stage2.cfg.draft_step_counts,
                     "decode step counts for inline draft generation")
        ->capture_default_str();
    cmd_stage2
        ->add_option("--draft-scenes", stage2.cfg.draft_scene_count,
                     "scenes decoded per round for inline drafts")
        ->capture_default_str();
    bool stage2_time_weight = false;
    cmd_stage2->add_flag("--refine-time-weight", stage2_time_weight,
                         "weight refine samples by inverse mistake fraction");

    // ---- draft ----
    struct {
        CommonOpts common;
        std::string ckpt;
        std::string scenes_file;
        int count = 100;
        std::vector<int> steps = {64, 16, 8};
    } draft;
    auto* cmd_draft = app.add_subcommand("draft", "decode drafts at several step counts");
    add_common(cmd_draft, draft.common);
    cmd_draft->add_option("--ckpt", draft.ckpt, "model checkpoint")->required();
    cmd_draft->add_option("--scenes", draft.scenes_file, "scenes JSONL (generated if omitted)");
    cmd_draft->add_option("--count", draft.count, "scenes to generate when no file is given")
        ->capture_default_str();
    cmd_draft->add_option("--steps", draft.steps, "decode step counts")->capture_default_str();

    // ---- revise ----
    struct {
        CommonOpts common;
        std::string drafts_file;
        std::string revisor = "oracle";
        std::string template_path = std::string(REDIFF_DATA_DIR) + "/expert_prompt.txt";
    } revise;
    auto* cmd_revise = app.add_subcommand("revise", "turn drafts into draft-refined training pairs");
    add_common(cmd_revise, revise.common);
    cmd_revise->add_option("--drafts", revise.drafts_file, "drafts JSONL from the draft subcommand")
        ->required();
    cmd_revise->add_option("--revisor", revise.revisor, "oracle | external")->capture_default_str();
    cmd_revise->add_option("--template", revise.template_path, "expert prompt template file")
        ->capture_default_str();

    // ---- decode ----
    struct {
        CommonOpts common;
        std::string ckpt;
        uint64_t scene_seed = 0;
        int steps = 16;
        int n = 4;
        bool refine = false;
        bool no_refine = false;
        double temperature = 0.0;
        bool trace = false;
    } dec;
    auto* cmd_decode = app.add_subcommand("decode", "decode one scene and print the caption");
    add_common(cmd_decode, dec.common, false);
    cmd_decode->add_option("--out", dec.common.out_dir, "directory for the trace JSON (optional)");
    cmd_decode->add_flag("--resume", dec.common.resume, "allow a non-empty output directory");
    cmd_decode->add_option("--ckpt", dec.ckpt, "model checkpoint")->required();
    cmd_decode->add_option("--scene-seed", dec.scene_seed, "scene generator seed")
        ->capture_default_str();
    cmd_decode->add_option("--steps", dec.steps, "decode steps")->capture_default_str();
    cmd_decode->add_option("--n", dec.n, "tokens unmasked per step")->capture_default_str();
    cmd_decode->add_flag("--refine", dec.refine, "overwrite committed tokens each step (default)");
    cmd_decode->add_flag("--no-refine", dec.no_refine, "freeze committed tokens");
    cmd_decode->add_option("--temperature", dec.temperature, "0 = argmax")->capture_default_str();
    cmd_decode->add_flag("--trace", dec.trace, "print the per-step refinement diff");

    // ---- eval ----
    struct {
        CommonOpts common;
        std::vector<std::string> models;  // id=path
        int scenes = 200;
        std::vector<int> n_grid = {1, 2, 4, 8};
        std::string refine = "on";
    } eval_opt;
    auto* cmd_eval = app.add_subcommand("eval", "decode a scene set over the n grid and score it");
    add_common(cmd_eval, eval_opt.common);
    cmd_eval->add_option("--model", eval_opt.models, "model as id=path (repeatable)")->required();
    cmd_eval->add_option("--scenes", eval_opt.scenes, "evaluation scene count")
        ->capture_default_str();
    cmd_eval->add_option("--n-grid", eval_opt.n_grid, "tokens-per-step grid")
        ->capture_default_str();
    cmd_eval->add_option("--refine", eval_opt.refine, "on | off | both")->capture_default_str();

    // ---- trace ----
    struct {
        std::string in;
        std::string format = "text";
        std::string grammar_path = default_grammar_path();
        std::string out;
    } trace_opt;
    auto* cmd_trace = app.add_subcommand("trace", "render a saved decode trace");
    cmd_trace->add_option("--in", trace_opt.in, "trace JSON file")->required();
    cmd_trace->add_option("--format", trace_opt.format, "text | svg")->capture_default_str();
    cmd_trace->add_option("--grammar", trace_opt.grammar_path, "grammar file")
        ->capture_default_str();
    cmd_trace->add_option("--out", trace_opt.out, "output file (stdout if omitted)");

    // ---- report ----
    struct {
        std::vector<std::string> inputs;
        std::string out_dir;
        std::vector<int> n_grid = {1, 2, 4, 8};
        bool refine = true;
    } report_opt;
    auto* cmd_report = app.add_subcommand("report", "assemble eval rows into degradation tables");
    cmd_report->add_option("--in", report_opt.inputs, "eval rows JSON files")->required();
    cmd_report->add_option("--out", report_opt.out_dir, "output directory")->required();
    cmd_report->add_option("--n-grid", report_opt.n_grid, "tokens-per-step grid")
        ->capture_default_str();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*cmd_datagen) {
            prepare_out_dir(datagen.common);
            auto t = load_task(datagen.common, SeqDims{});
            StageConfig cfg;
            cfg.dataset_size = datagen.count;
            std::ofstream scenes(fs::path(datagen.common.out_dir) / "scenes.jsonl");
            for (int i = 0; i < datagen.count; ++i)
                scenes << to_json(t.task.scene_for(datagen.common.seed, "trainset", i)).dump()
                       << '\n';
            t.vocab.save((fs::path(datagen.common.out_dir) / "vocab.txt").string());
            if (datagen.samples > 0) {
                const NoiseSchedule schedule;
                std::ofstream samples(fs::path(datagen.common.out_dir) / "samples.jsonl");
                for (int i = 0; i < datagen.samples; ++i) {
                    auto s = draw_stage1_sample(t.task, cfg, schedule, datagen.common.seed, 0, i);
                    samples << to_json(s).dump() << '\n';
                }
            }
            auto mc = default_model_config(t.vocab, t.task.dims);
            auto manifest = make_manifest("datagen", datagen.common, t, cfg, mc, "");
            manifest.notes = {{"scenes", datagen.count},
                              {"samples", datagen.samples},
                              {"artifacts", {"scenes.jsonl", "vocab.txt", "samples.jsonl"}}};
            manifest.save((fs::path(datagen.common.out_dir) / "manifest.json").string());
            return kExitOk;
        }

        auto run_training = [&](const char* name, TrainOpts& t, Stage stage) {
            apply_train_flags(t);
            prepare_out_dir(t.common);
            auto lt = load_task(t.common, SeqDims{});
            t.cfg.stage = stage;
            ModelConfig mc = default_model_config(lt.vocab, lt.task.dims);

            ModelParams params;
            AdamState adam;
            if (!t.init_ckpt.empty()) {
                auto ck = load_ckpt(t.init_ckpt, lt.vocab);
                params = std::move(ck.params);
                if (ck.has_adam) adam = std::move(ck.adam);
                mc = params.config;
            } else if (stage == Stage::Stage2) {
                throw MissingCheckpoint("stage2 requires --init with a stage-1 checkpoint");
            } else {
                params = init_params(mc, hash_combine(t.common.seed, fnv1a("init")));
            }

            auto manifest = make_manifest(name, t.common, lt, t.cfg, mc, t.init_ckpt);
            manifest.notes["reduces_to_mask_pred_baseline"] =
                stage != Stage::Stage2 && !t.cfg.corruption.syntax_enabled &&
                !t.cfg.corruption.hallucination_enabled;
            manifest.save((fs::path(t.common.out_dir) / "manifest.json").string());

            const uint64_t run_seed = hash_combine(t.common.seed, fnv1a(name));
            TrainResult res;
            DraftCorpusStats draft_stats;
            if (stage == Stage::Stage2) {
                std::optional<std::vector<DraftPair>> corpus;
                if (!stage2_pairs.empty()) {
                    corpus.emplace();
                    std::ifstream in(stage2_pairs);
                    if (!in) throw BadConfig("cannot open pairs file: " + stage2_pairs);
                    std::string line;
                    while (std::getline(in, line))
                        if (!line.empty()) corpus->push_back(draft_pair_from_json(json::parse(line)));
                }
                res = train_stage2(std::move(params), std::move(adam), lt.task, t.cfg, run_seed,
                                   nullptr, corpus ? &*corpus : nullptr, &draft_stats);
            } else if (stage == Stage::Stage1) {
                res = train_stage1(std::move(params), std::move(adam), lt.task, t.cfg, run_seed);
            } else {
                res = train_pretrain(std::move(params), lt.task, t.cfg, run_seed);
            }

            const auto ckpt_path = fs::path(t.common.out_dir) / "model.ckpt";
            save_checkpoint(ckpt_path.string(), res.params, lt.vocab.hash(), res.steps_done,
                            &res.adam);
            write_history_csv((fs::path(t.common.out_dir) / "train_log.csv").string(),
                              res.history);
            manifest.notes["final_loss"] = res.history.back().report.total;
            manifest.notes["draft_stats"] = {{"right", draft_stats.right},
                                             {"unalignable", draft_stats.unalignable},
                                             {"revised", draft_stats.revised}};
            manifest.notes["artifacts"] = {"model.ckpt", "train_log.csv"};
            manifest.save((fs::path(t.common.out_dir) / "manifest.json").string());
            std::cout << "checkpoint written to " << ckpt_path.string() << "\n";
            return kExitOk;
        };

        if (*cmd_pretrain) return run_training("pretrain", pretrain, Stage::PretrainMaskOnly);
        if (*cmd_stage1) return run_training("stage1", stage1, Stage::Stage1);
        if (*cmd_stage2) {
            stage2.cfg.refine_time_weight = stage2_time_weight;
            return run_training("stage2", stage2, Stage::Stage2);
        }

        if (*cmd_draft) {
            prepare_out_dir(draft.common);
            auto lt = load_task(draft.common, SeqDims{});
            auto ck = load_ckpt(draft.ckpt, lt.vocab);
            std::vector<Scene> scenes;
            if (!draft.scenes_file.empty()) scenes = scenes_from_file(draft.scenes_file);
            else
                for (int i = 0; i < draft.count; ++i)
                    scenes.push_back(lt.task.scene_for(draft.common.seed, "draftset", i));
            const auto drafts = generate_drafts(ck.params, lt.task, scenes, draft.steps,
                                                hash_combine(draft.common.seed, fnv1a("draft")));
            std::ofstream out(fs::path(draft.common.out_dir) / "drafts.jsonl");
            for (size_t j = 0; j < drafts.size(); ++j) {
                const auto& scene = scenes[j / draft.steps.size()];
                out << json{{"scene", to_json(scene)},
                            {"draft", drafts[j].first.ids},
                            {"decode_steps", drafts[j].second}}
                           .dump()
                    << '\n';
            }
            StageConfig cfg;
            cfg.draft_step_counts = draft.steps;
            auto manifest = make_manifest("draft", draft.common, lt, cfg, ck.params.config,
                                          draft.ckpt);
            manifest.notes = {{"drafts", drafts.size()}, {"artifacts", {"drafts.jsonl"}}};
            manifest.save((fs::path(draft.common.out_dir) / "manifest.json").string());
            std::cout << drafts.size() << " drafts written\n";
            return kExitOk;
        }

        if (*cmd_revise) {
            prepare_out_dir(revise.common);
            auto lt = load_task(revise.common, SeqDims{});
            std::ifstream in(revise.drafts_file);
            if (!in) throw BadConfig("cannot open drafts file: " + revise.drafts_file);
            const auto prompt = encode_prompt(lt.vocab, lt.grammar, lt.task.dims.prompt_len);
            ExpertClientConfig expert;
            if (revise.revisor == "external") {
                const char* ep = std::getenv("REDIFF_EXPERT_ENDPOINT");
                if (!ep || !*ep)
                    throw BadConfig("external revisor needs REDIFF_EXPERT_ENDPOINT to be set");
                expert.endpoint = ep;
                expert.template_path = revise.template_path;
            } else if (revise.revisor != "oracle") {
                throw BadConfig("revisor must be oracle or external");
            }

            std::ofstream out(fs::path(revise.common.out_dir) / "pairs.jsonl");
            int right = 0, unalignable = 0, revised = 0, skipped = 0;
            std::string line;
            while (std::getline(in, line)) {
                if (line.empty()) continue;
                const auto rec = json::parse(line);
                const Scene scene = scene_from_json(rec.at("scene"));
                TokenSequence draft_seq;
                draft_seq.ids = rec.at("draft").get<std::vector<int>>();
                draft_seq.length = draft_seq.window();
                Review review;
                if (revise.revisor == "oracle") {
                    review = oracle_revise(scene, draft_seq, lt.grammar, lt.vocab);
                } else {
                    try {
                        const std::string question = join_words(lt.grammar.prompt_tokens());
                        const std::string answer = lt.grammar.render_caption(scene, 0);
                        review = external_revise(expert, to_json(scene).dump(), question, answer,
                                                 draft_seq, lt.vocab);
                    } catch (const MalformedReply&) {
                        ++skipped;
                        continue;
                    }
                }
                if (review.status == ReviewStatus::Right) {
                    ++right;
                    continue;
                }
                if (review.status == ReviewStatus::Unalignable || review.pairs.empty()) {
                    ++unalignable;
                    continue;
                }
                auto [refined, positions] = apply_revisions(draft_seq, review.pairs);
                DraftPair pair;
                pair.scene = scene;
                pair.prompt = prompt;
                pair.draft = draft_seq;
                pair.refined = std::move(refined);
                pair.mistake_positions = std::move(positions);
                pair.source =
                    revise.revisor == "oracle" ? DraftSource::Oracle : DraftSource::External;
                pair.decode_steps = rec.value("decode_steps", 0);
                out << to_json(pair).dump() << '\n';
                ++revised;
            }
            StageConfig cfg;
            ModelConfig mc = default_model_config(lt.vocab, lt.task.dims);
            auto manifest = make_manifest("revise", revise.common, lt, cfg, mc, "");
            manifest.notes = {{"right", right},
                              {"unalignable", unalignable},
                              {"revised", revised},
                              {"skipped_malformed", skipped},
                              {"revisor", revise.revisor},
                              {"artifacts", {"pairs.jsonl"}}};
            manifest.save((fs::path(revise.common.out_dir) / "manifest.json").string());
            std::cout << revised << " pairs written (" << right << " right, " << unalignable
                      << " unalignable)\n";
            return kExitOk;
        }

        if (*cmd_decode) {
            auto lt = load_task(dec.common, SeqDims{});
            auto ck = load_ckpt(dec.ckpt, lt.vocab);
            const Scene scene = generate_scene(dec.scene_seed);
            const auto scene_ids =
                encode_scene(scene, lt.vocab, lt.grammar, ck.params.config.dims.scene_len);
            const auto prompt = encode_prompt(lt.vocab, lt.grammar,
                                              ck.params.config.dims.prompt_len);
            DecodeConfig dc;
            dc.steps = dec.steps;
            dc.tokens_per_step = dec.n;
            dc.refine = !dec.no_refine;
            dc.temperature = dec.temperature;
            dc.seed = dec.common.seed;
            dc.record_trace = dec.trace;
            const auto result = decode(ck.params, scene_ids, prompt, dc);
            std::cout << join_words(caption_words(result.response, lt.vocab)) << "\n";
            if (dec.trace) std::cout << render_trace_text(result.trace, lt.vocab);
            if (!dec.common.out_dir.empty()) {
                prepare_out_dir(dec.common);
                std::ofstream tr(fs::path(dec.common.out_dir) / "trace.json");
                tr << to_json(result.trace).dump() << '\n';
            }
            return kExitOk;
        }

        if (*cmd_eval) {
            prepare_out_dir(eval_opt.common);
            auto lt = load_task(eval_opt.common, SeqDims{});
            const auto scenes = eval_scene_pool(lt.task, eval_opt.common.seed, eval_opt.scenes);
            EvalReport report;
            for (const auto& spec : eval_opt.models) {
                const auto eq = spec.find('=');
                if (eq == std::string::npos) throw BadConfig("--model needs id=path: " + spec);
                const std::string id = spec.substr(0, eq);
                auto ck = load_ckpt(spec.substr(eq + 1), lt.vocab);
                std::vector<bool> refine_modes;
                if (eval_opt.refine == "on") refine_modes = {true};
                else if (eval_opt.refine == "off") refine_modes = {false};
                else if (eval_opt.refine == "both") refine_modes = {true, false};
                else throw BadConfig("--refine must be on, off or both");
                for (bool refine : refine_modes)
                    for (int n : eval_opt.n_grid)
                        report.rows.push_back(evaluate_cell(id, ck.params, lt.task, scenes,
                                                            {n, 0, refine},
                                                            eval_opt.common.seed));
            }
            std::ofstream csv(fs::path(eval_opt.common.out_dir) / "eval.csv");
            write_eval_csv(csv, report);
            json rows = json::array();
            for (const auto& r : report.rows) {
                json values = json::array();
                for (const auto& v : r.values)
                    values.push_back({{"mismatch", v.attribute_mismatch},
                                      {"validity", v.grammar_validity},
                                      {"coverage", v.coverage},
                                      {"accuracy", v.token_accuracy}});
                rows.push_back({{"model", r.model_id},
                                {"n", r.cell.tokens_per_step},
                                {"steps", r.cell.steps},
                                {"refine", r.cell.refine},
                                {"seeds", r.seeds},
                                {"values", values}});
            }
            {
                std::ofstream jf(fs::path(eval_opt.common.out_dir) / "rows.json");
                jf << rows.dump(2) << '\n';
            }
            StageConfig cfg;
            ModelConfig mc = default_model_config(lt.vocab, lt.task.dims);
            auto manifest = make_manifest("eval", eval_opt.common, lt, cfg, mc, "");
            manifest.notes = {{"scenes", eval_opt.scenes},
                              {"models", eval_opt.models},
                              {"artifacts", {"eval.csv", "rows.json"}}};
            manifest.save((fs::path(eval_opt.common.out_dir) / "manifest.json").string());
            std::cout << "eval written to " << eval_opt.common.out_dir << "\n";
            return kExitOk;
        }

        if (*cmd_trace) {
            auto grammar = CaptionGrammar::load(trace_opt.grammar_path);
            auto vocab = Vocab::build(grammar);
            std::ifstream in(trace_opt.in);
            if (!in) throw BadConfig("cannot open trace file: " + trace_opt.in);
            const auto trace = trace_from_json(json::parse(in));
            std::string rendered;
            if (trace_opt.format == "text") rendered = render_trace_text(trace, vocab);
            else if (trace_opt.format == "svg") rendered = render_trace_svg(trace, vocab);
            else throw BadConfig("--format must be text or svg");
            if (trace_opt.out.empty()) {
                std::cout << rendered;
            } else {
                std::ofstream out(trace_opt.out);
                out << rendered;
            }
            return kExitOk;
        }

        if (*cmd_report) {
            if (!fs::exists(report_opt.out_dir)) fs::create_directories(report_opt.out_dir);
            EvalReport merged;
            std::map<std::pair<std::string, std::pair<int, bool>>, std::vector<EvalRow>> groups;
            for (const auto& path : report_opt.inputs) {
                std::ifstream in(path);
                if (!in) throw BadConfig("cannot open rows file: " + path);
                for (const auto& rj : json::parse(in)) {
                    EvalRow row;
                    row.model_id = rj.at("model");
                    row.cell.tokens_per_step = rj.at("n");
                    row.cell.steps = rj.at("steps");
                    row.cell.refine = rj.at("refine");
                    row.seeds = rj.at("seeds").get<std::vector<uint64_t>>();
                    for (const auto& vj : rj.at("values")) {
                        CaptionMetrics m;
                        m.attribute_mismatch = vj.at("mismatch");
                        m.grammar_validity = vj.at("validity");
                        m.coverage = vj.at("coverage");
                        m.token_accuracy = vj.at("accuracy");
                        row.values.push_back(m);
                    }
                    groups[{row.model_id, {row.cell.tokens_per_step, row.cell.refine}}].push_back(
                        row);
                }
            }
            for (auto& [key, rows] : groups) merged.rows.push_back(merge_rows(rows));
            std::ofstream csv(fs::path(report_opt.out_dir) / "report.csv");
            write_eval_csv(csv, merged);
            const auto curves = degradation_curve(merged, report_opt.n_grid, report_opt.refine);
            std::ofstream dcsv(fs::path(report_opt.out_dir) / "degradation.csv");
            dcsv << "model,metric,";
            for (int n : report_opt.n_grid) dcsv << "n" << n << ',';
            dcsv << "delta\n";
            for (const auto& c : curves) {
                dcsv << c.model_id << ',' << c.metric << ',';
                for (const auto& [n, v] : c.series) dcsv << v << ',';
                dcsv << c.delta << '\n';
            }
            for (const char* metric :
                 {"attribute_mismatch", "grammar_validity", "coverage", "token_accuracy"}) {
                std::ofstream svg(fs::path(report_opt.out_dir) / (std::string(metric) + ".svg"));
                svg << render_curves_svg(curves, metric);
            }
            std::cout << "report written to " << report_opt.out_dir << "\n";
            return kExitOk;
        }
    } catch (const BadConfig& ex) {
        fail(kExitConfig, "BadConfig", ex.what());
    } catch (const MissingCheckpoint& ex) {
        fail(kExitConfig, "MissingCheckpoint", ex.what());
    } catch (const ValidationFailure& ex) {
        fail(kExitValidation, "ValidationFailure", ex.what());
    } catch (const UnknownToken& ex) {
        fail(kExitValidation, "UnknownToken", ex.what());
    } catch (const TransportError& ex) {
        fail(kExitRuntime, "TransportError", ex.what());
    } catch (const DivergedLoss& ex) {
        fail(kExitRuntime, "DivergedLoss", ex.what());
    } catch (const EmptyDraftCorpus& ex) {
        fail(kExitRuntime, "EmptyDraftCorpus", ex.what());
    } catch (const std::exception& ex) {
        fail(kExitRuntime, "RuntimeError", ex.what());
    }
    return kExitOk;
}
