#include <catch2/catch_amalgamated.hpp>

#include <sstream>

#include "rediff/eval.hpp"
#include "rediff/sampler.hpp"

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

Scene two_object_scene() {
    Scene s;
    s.objects.push_back({Category::Ball, Color::Red, Size::Small, 1, Position::Center});
    s.objects.push_back({Category::Dog, Color::Blue, Size::Large, 2, Position::Left});
    s.seed = 0;
    return s;
}

TokenSequence response_from(const std::string& caption) {
    return make_response(caption, vocab(), 64);
}
}  // namespace

TEST_CASE("a perfect caption scores mismatch 0, validity 1, coverage 1") {
    const Scene scene = two_object_scene();
    const auto ref = response_from(grammar().render_caption(scene, 0));
    const auto m = compute_caption_metrics(scene, ref, grammar(), vocab(), &ref);
    REQUIRE(m.attribute_mismatch == 0.0);
    REQUIRE(m.grammar_validity == 1.0);
    REQUIRE(m.coverage == 1.0);
    REQUIRE(m.token_accuracy == 1.0);
}

TEST_CASE("an empty caption has zero coverage") {
    const Scene scene = two_object_scene();
    TokenSequence empty;
    empty.ids.assign(64, Vocab::PAD);
    empty.ids[0] = Vocab::EOS;
    empty.length = 1;
    const auto m = compute_caption_metrics(scene, empty, grammar(), vocab());
    REQUIRE(m.coverage == 0.0);
    REQUIRE(m.attribute_mismatch == 0.0);  // nothing mentioned
    REQUIRE(m.grammar_validity == 0.0);
}

TEST_CASE("hand-computed five-draft fixture") {
    const Scene scene = two_object_scene();

    SECTION("one wrong color") {
        const auto m = compute_caption_metrics(
            scene,
            response_from("a small green ball is in the center . "
                          "two large blue dogs are on the left ."),
            grammar(), vocab());
        REQUIRE(m.grammar_validity == 1.0);
        REQUIRE(m.attribute_mismatch == Catch::Approx(1.0 / 10));
        REQUIRE(m.coverage == Catch::Approx(9.0 / 10));
    }
    SECTION("second object omitted") {
        const auto m = compute_caption_metrics(
            scene, response_from("a small red ball is in the center ."), grammar(), vocab());
        REQUIRE(m.grammar_validity == 1.0);
        REQUIRE(m.attribute_mismatch == 0.0);
        REQUIRE(m.coverage == Catch::Approx(5.0 / 10));
    }
    SECTION("one of two sentences is broken") {
        const auto m = compute_caption_metrics(
            scene,
            response_from("a small red ball is in the center . two two blue dogs are on the left ."),
            grammar(), vocab());
        REQUIRE(m.grammar_validity == Catch::Approx(0.5));
        REQUIRE(m.attribute_mismatch == 0.0);       // the parsed sentence is right
        REQUIRE(m.coverage == Catch::Approx(0.5));  // only one object grounded
    }
    SECTION("hallucinated object category") {
        const auto m = compute_caption_metrics(
            scene,
            response_from("a small red ball is in the center . two large blue cars are on the left ."),
            grammar(), vocab());
        REQUIRE(m.grammar_validity == 1.0);
        // the car sentence matches no scene object: all five slots wrong
        REQUIRE(m.attribute_mismatch == Catch::Approx(5.0 / 10));
        REQUIRE(m.coverage == Catch::Approx(5.0 / 10));
    }
    SECTION("duplicate mention of the same object") {
        const auto m = compute_caption_metrics(
            scene,
            response_from("a small red ball is in the center . a small red ball is in the center . "
                          "two large blue dogs are on the left ."),
            grammar(), vocab());
        // the second ball tuple has no unclaimed object to ground against
        REQUIRE(m.attribute_mismatch == Catch::Approx(5.0 / 15));
        REQUIRE(m.coverage == 1.0);
    }
}

TEST_CASE("token accuracy counts positional matches over the window") {
    const Scene scene = two_object_scene();
    const auto ref = response_from(grammar().render_caption(scene, 0));
    auto noisy = ref;
    noisy.ids[0] = noisy.ids[0] == vocab().id("a") ? vocab().id("two") : vocab().id("a");
    noisy.ids[3] = vocab().id("red");
    const auto m = compute_caption_metrics(scene, noisy, grammar(), vocab(), &ref);
    int same = 0;
    for (int i = 0; i < 64; ++i) same += noisy.ids[i] == ref.ids[i];
    REQUIRE(m.token_accuracy == Catch::Approx(same / 64.0));
}

TEST_CASE("a ground-truth predictor is perfect at every speed") {
    const Scene scene = two_object_scene();
    const auto ref = response_from(grammar().render_caption(scene, 0));
    const int V = vocab().size();
    Predictor stub = [&](const TokenSequence&) {
        std::vector<double> logits(static_cast<size_t>(64) * V, -40.0);
        for (int i = 0; i < 64; ++i) logits[i * V + ref.ids[i]] = 40.0;
        return logits;
    };
    for (int n : {1, 2, 4, 8}) {
        DecodeConfig dc;
        dc.tokens_per_step = n;
        dc.steps = (64 + n - 1) / n;
        for (bool refine : {false, true}) {
            dc.refine = refine;
            const auto out = decode(stub, 64, V, dc);
            const auto m = compute_caption_metrics(scene, out.response, grammar(), vocab(), &ref);
            REQUIRE(m.attribute_mismatch == 0.0);
            REQUIRE(m.grammar_validity == 1.0);
            REQUIRE(m.coverage == 1.0);
            REQUIRE(m.token_accuracy == 1.0);
        }
    }
}

TEST_CASE("bootstrap of a constant sample collapses to the value") {
    const std::vector<double> values(50, 0.25);
    const auto st = bootstrap_mean(values, 7);
    REQUIRE(st.mean == Catch::Approx(0.25));
    REQUIRE(st.ci_lo == Catch::Approx(0.25));
    REQUIRE(st.ci_hi == Catch::Approx(0.25));
}

TEST_CASE("bootstrap CI brackets the mean and is deterministic in the seed") {
    Rng rng(3);
    std::vector<double> values;
    for (int i = 0; i < 200; ++i) values.push_back(rng.uniform());
    const auto a = bootstrap_mean(values, 11);
    const auto b = bootstrap_mean(values, 11);
    REQUIRE(a.mean == b.mean);
    REQUIRE(a.ci_lo == b.ci_lo);
    REQUIRE(a.ci_hi == b.ci_hi);
    REQUIRE(a.ci_lo <= a.mean);
    REQUIRE(a.mean <= a.ci_hi);
    REQUIRE(a.ci_hi - a.ci_lo < 0.2);
}

TEST_CASE("ci separation detects disjoint intervals") {
    MetricStats lo{0.1, 0.05, 0.15}, hi{0.5, 0.45, 0.55}, mid{0.13, 0.08, 0.2};
    REQUIRE(ci_separated(lo, hi));
    REQUIRE_FALSE(ci_separated(lo, mid));
}

namespace {
EvalRow constant_row(const std::string& id, int n, double value, int count = 20) {
    EvalRow row;
    row.model_id = id;
    row.cell = {n, 64 / n, true};
    row.seeds = {1};
    CaptionMetrics m;
    m.attribute_mismatch = value;
    m.grammar_validity = value;
    m.coverage = value;
    m.token_accuracy = value;
    row.values.assign(count, m);
    row.finalize(5);
    return row;
}
}  // namespace

TEST_CASE("degradation curves have grid-sized series and honest deltas") {
    EvalReport report;
    for (int n : {1, 2, 4, 8}) report.rows.push_back(constant_row("flat", n, 0.4));
    const auto curves = degradation_curve(report, {1, 2, 4, 8}, true);
    REQUIRE(curves.size() == 4);  // one per metric
    for (const auto& c : curves) {
        REQUIRE(c.series.size() == 4);
        REQUIRE(c.delta == Catch::Approx(0.0));
    }
}

TEST_CASE("missing grid cells are reported") {
    EvalReport report;
    report.rows.push_back(constant_row("m", 1, 0.4));
    REQUIRE_THROWS_AS(degradation_curve(report, {1, 8}, true), MissingGridCell);
}

TEST_CASE("merge_rows pools values across seeds") {
    auto a = constant_row("m", 4, 0.2, 10);
    auto b = constant_row("m", 4, 0.4, 10);
    b.seeds = {2};
    const auto merged = merge_rows({a, b});
    REQUIRE(merged.sample_count == 20);
    REQUIRE(merged.seeds == std::vector<uint64_t>{1, 2});
    REQUIRE(merged.mismatch_stats.mean == Catch::Approx(0.3));
}

TEST_CASE("csv and svg outputs render") {
    EvalReport report;
    for (int n : {1, 8}) report.rows.push_back(constant_row("m", n, 0.3));
    std::ostringstream csv;
    write_eval_csv(csv, report);
    REQUIRE(csv.str().find("model,tokens_per_step") == 0);
    REQUIRE(csv.str().find("\nm,1,64,1,20,0.3") != std::string::npos);

    const auto curves = degradation_curve(report, {1, 8}, true);
    const auto svg = render_curves_svg(curves, "grammar_validity");
    REQUIRE(svg.find("<svg") == 0);
    REQUIRE(svg.find("polyline") != std::string::npos);
}
