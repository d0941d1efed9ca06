#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>

#include "rediff/losses.hpp"
#include "rediff/model.hpp"

using namespace rediff;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.vocab_size = 12;
    c.d_model = 8;
    c.n_layers = 1;
    c.n_heads = 2;
    c.d_ff = 16;
    c.dims = {3, 2, 6};
    return c;
}

TokenSequence random_seq(int window, int vocab, Rng& rng) {
    TokenSequence s;
    s.ids.resize(window);
    s.length = window;
    for (auto& id : s.ids) id = static_cast<int>(rng.uniform_int(vocab));
    return s;
}

// Straight-line reimplementation of one forward pass, written independently
// of the production code path: plain nested loops, no shared helpers.
std::vector<double> naive_forward(const ModelParams& params, const std::vector<int>& input_ids,
                                  const std::vector<int>& segments) {
    const ModelConfig& c = params.config;
    const int T = c.context(), d = c.d_model, H = c.n_heads, dh = d / H;
    const ParamLayout layout(c);
    auto W = [&](const std::string& n) { return params.tensor(layout.find(n).offset); };

    std::vector<std::vector<double>> x(T, std::vector<double>(d));
    for (int i = 0; i < T; ++i)
        for (int j = 0; j < d; ++j)
            x[i][j] = W("tok_emb")[input_ids[i] * d + j] + W("pos_emb")[i * d + j] +
                      W("seg_emb")[segments[i] * d + j];

    auto layer_norm = [&](const std::vector<double>& v, const double* g, const double* b) {
        double mu = 0;
        for (double e : v) mu += e;
        mu /= v.size();
        double var = 0;
        for (double e : v) var += (e - mu) * (e - mu);
        var /= v.size();
        std::vector<double> out(v.size());
        for (size_t j = 0; j < v.size(); ++j)
            out[j] = (v[j] - mu) / std::sqrt(var + 1e-5) * g[j] + b[j];
        return out;
    };
    auto matvec = [&](const std::vector<double>& v, const double* w, const double* b, int in,
                      int out_dim) {
        std::vector<double> out(out_dim);
        for (int j = 0; j < out_dim; ++j) {
            double acc = b ? b[j] : 0.0;
            for (int k = 0; k < in; ++k) acc += v[k] * w[k * out_dim + j];
            out[j] = acc;
        }
        return out;
    };

    for (int l = 0; l < c.n_layers; ++l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        std::vector<std::vector<double>> ln(T), q(T), k(T), v(T);
        for (int i = 0; i < T; ++i) {
            ln[i] = layer_norm(x[i], W(p + "ln1_g"), W(p + "ln1_b"));
            q[i] = matvec(ln[i], W(p + "wq"), W(p + "bq"), d, d);
            k[i] = matvec(ln[i], W(p + "wk"), W(p + "bk"), d, d);
            v[i] = matvec(ln[i], W(p + "wv"), W(p + "bv"), d, d);
        }
        std::vector<std::vector<double>> ctx(T, std::vector<double>(d, 0.0));
        for (int h = 0; h < H; ++h) {
            for (int i = 0; i < T; ++i) {
                std::vector<double> scores(T);
                for (int j = 0; j < T; ++j) {
                    double acc = 0;
                    for (int e = 0; e < dh; ++e) acc += q[i][h * dh + e] * k[j][h * dh + e];
                    scores[j] = acc / std::sqrt(static_cast<double>(dh));
                }
                double mx = scores[0];
                for (double sc : scores) mx = std::max(mx, sc);
                double z = 0;
                for (double& sc : scores) {
                    sc = std::exp(sc - mx);
                    z += sc;
                }
                for (int j = 0; j < T; ++j)
                    for (int e = 0; e < dh; ++e) ctx[i][h * dh + e] += scores[j] / z * v[j][h * dh + e];
            }
        }
        for (int i = 0; i < T; ++i) {
            const auto o = matvec(ctx[i], W(p + "wo"), W(p + "bo"), d, d);
            for (int j = 0; j < d; ++j) x[i][j] += o[j];
            const auto l2 = layer_norm(x[i], W(p + "ln2_g"), W(p + "ln2_b"));
            auto h1 = matvec(l2, W(p + "w1"), W(p + "b1"), d, c.d_ff);
            for (double& e : h1) e = 0.5 * e * (1.0 + std::erf(e / std::sqrt(2.0)));
            const auto h2 = matvec(h1, W(p + "w2"), W(p + "b2"), c.d_ff, d);
            for (int j = 0; j < d; ++j) x[i][j] += h2[j];
        }
    }

    const int resp_base = c.dims.scene_len + c.dims.prompt_len;
    std::vector<double> logits;
    for (int r = 0; r < c.dims.response_len; ++r) {
        const auto y = layer_norm(x[resp_base + r], W("lnf_g"), W("lnf_b"));
        const auto row = matvec(y, W("w_out"), W("b_out"), d, c.vocab_size);
        logits.insert(logits.end(), row.begin(), row.end());
    }
    return logits;
}

}  // namespace

TEST_CASE("zero parameters give a uniform distribution at every position") {
    ModelConfig c = tiny_config();
    ModelParams params(c);  // all zeros
    Rng rng(1);
    const auto scene = random_seq(c.dims.scene_len, c.vocab_size, rng);
    const auto prompt = random_seq(c.dims.prompt_len, c.vocab_size, rng);
    const auto resp = random_seq(c.dims.response_len, c.vocab_size, rng);
    Activations acts(c);
    forward(params, scene, prompt, resp, acts);
    for (double v : acts.logits) REQUIRE(v == 0.0);
}

TEST_CASE("softmax of every logits row sums to one") {
    ModelConfig c = tiny_config();
    ModelParams params = init_params(c, 3);
    Rng rng(2);
    Activations acts(c);
    forward(params, random_seq(c.dims.scene_len, c.vocab_size, rng),
            random_seq(c.dims.prompt_len, c.vocab_size, rng),
            random_seq(c.dims.response_len, c.vocab_size, rng), acts);
    for (int i = 0; i < c.dims.response_len; ++i) {
        const double* row = acts.logits.data() + static_cast<size_t>(i) * c.vocab_size;
        double mx = row[0];
        for (int j = 0; j < c.vocab_size; ++j) {
            REQUIRE(std::isfinite(row[j]));
            mx = std::max(mx, row[j]);
        }
        double z = 0;
        for (int j = 0; j < c.vocab_size; ++j) z += std::exp(row[j] - mx);
        double total = 0;
        for (int j = 0; j < c.vocab_size; ++j) total += std::exp(row[j] - mx) / z;
        REQUIRE(total == Catch::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("swapping two response tokens and their positional rows swaps outputs") {
    ModelConfig c = tiny_config();
    ModelParams params = init_params(c, 5);
    Rng rng(4);
    const auto scene = random_seq(c.dims.scene_len, c.vocab_size, rng);
    const auto prompt = random_seq(c.dims.prompt_len, c.vocab_size, rng);
    auto resp = random_seq(c.dims.response_len, c.vocab_size, rng);
    const int a = 1, b = 4;  // response positions to swap

    Activations acts(c);
    forward(params, scene, prompt, resp, acts);
    const auto base = acts.logits;

    std::swap(resp.ids[a], resp.ids[b]);
    ModelParams swapped = params;
    const ParamLayout layout(c);
    const auto& pos = layout.find("pos_emb");
    const int base_idx = c.dims.scene_len + c.dims.prompt_len;
    double* pe = swapped.tensor(pos.offset);
    for (int j = 0; j < c.d_model; ++j)
        std::swap(pe[(base_idx + a) * c.d_model + j], pe[(base_idx + b) * c.d_model + j]);

    forward(swapped, scene, prompt, resp, acts);
    for (int j = 0; j < c.vocab_size; ++j) {
        REQUIRE(acts.logits[a * c.vocab_size + j] ==
                Catch::Approx(base[b * c.vocab_size + j]).margin(1e-9));
        REQUIRE(acts.logits[b * c.vocab_size + j] ==
                Catch::Approx(base[a * c.vocab_size + j]).margin(1e-9));
    }
}

TEST_CASE("logits match an independent straight-line reimplementation") {
    ModelConfig c = tiny_config();
    c.n_layers = 2;
    ModelParams params = init_params(c, 7);
    Rng rng(8);
    const auto scene = random_seq(c.dims.scene_len, c.vocab_size, rng);
    const auto prompt = random_seq(c.dims.prompt_len, c.vocab_size, rng);
    const auto resp = random_seq(c.dims.response_len, c.vocab_size, rng);

    Activations acts(c);
    forward(params, scene, prompt, resp, acts);
    const auto naive = naive_forward(params, acts.input_ids, acts.segments);
    REQUIRE(naive.size() == acts.logits.size());
    for (size_t i = 0; i < naive.size(); ++i)
        REQUIRE(acts.logits[i] == Catch::Approx(naive[i]).margin(1e-6));
}

TEST_CASE("forward rejects mismatched windows") {
    ModelConfig c = tiny_config();
    ModelParams params = init_params(c, 1);
    Rng rng(1);
    Activations acts(c);
    auto scene = random_seq(c.dims.scene_len + 1, c.vocab_size, rng);
    REQUIRE_THROWS_AS(forward(params, scene, random_seq(c.dims.prompt_len, c.vocab_size, rng),
                              random_seq(c.dims.response_len, c.vocab_size, rng), acts),
                      ShapeMismatch);
}

TEST_CASE("constant loss means zero gradient") {
    ModelConfig c = tiny_config();
    ModelParams params = init_params(c, 2);
    Rng rng(3);
    Activations acts(c);
    forward(params, random_seq(c.dims.scene_len, c.vocab_size, rng),
            random_seq(c.dims.prompt_len, c.vocab_size, rng),
            random_seq(c.dims.response_len, c.vocab_size, rng), acts);
    std::vector<double> dlogits(acts.logits.size(), 0.0);
    std::vector<double> grad(params.theta.size(), 0.0);
    backward(params, acts, dlogits, grad);
    for (double g : grad) REQUIRE(g == 0.0);
}

TEST_CASE("analytic gradients match central finite differences") {
    ModelConfig c = tiny_config();
    ModelParams base = init_params(c, 11);
    Rng rng(12);
    const auto scene = random_seq(c.dims.scene_len, c.vocab_size, rng);
    const auto prompt = random_seq(c.dims.prompt_len, c.vocab_size, rng);
    auto rt = random_seq(c.dims.response_len, c.vocab_size, rng);
    auto r0 = random_seq(c.dims.response_len, c.vocab_size, rng);
    RoleMask roles = {Role::Mask, Role::Syntax, Role::Hallucination,
                      Role::Clean, Role::Mask, Role::Pad};
    const double t = 0.41;

    auto loss_of = [&](const ModelParams& p, std::vector<std::vector<double>>* dl) {
        Activations acts(c);
        forward(p, scene, prompt, rt, acts);
        LossSample s{&acts.logits, &r0, &roles, t};
        std::vector<LossSample> one{s};
        if (dl) {
            const double value = loss_revision(one, dl).total;
            std::vector<double> grad(p.theta.size(), 0.0);
            backward(p, acts, (*dl)[0], grad);
            (*dl)[0] = std::move(grad);  // reuse slot to hand the gradient back
            return value;
        }
        return loss_revision(one).total;
    };

    std::vector<std::vector<double>> dl(1);
    dl[0].assign(static_cast<size_t>(c.dims.response_len) * c.vocab_size, 0.0);
    loss_of(base, &dl);
    const std::vector<double> grad = dl[0];

    const double h = 1e-4;
    Rng coord_rng(99);
    double max_rel = 0.0;
    for (int k = 0; k < 100; ++k) {
        const size_t i = coord_rng.uniform_int(base.theta.size());
        ModelParams p = base;
        p.theta[i] += h;
        const double lp = loss_of(p, nullptr);
        p.theta[i] -= 2 * h;
        const double lm = loss_of(p, nullptr);
        const double fd = (lp - lm) / (2 * h);
        const double denom = std::max({std::abs(fd), std::abs(grad[i]), 1e-8});
        max_rel = std::max(max_rel, std::abs(fd - grad[i]) / denom);
    }
    INFO("max relative error " << max_rel);
    REQUIRE(max_rel < 1e-4);
}

TEST_CASE("embedding rows of tokens absent from the batch get zero gradient") {
    ModelConfig c = tiny_config();
    ModelParams params = init_params(c, 21);
    Rng rng(22);
    // use only ids < 6 in the input
    auto clamp6 = [&](TokenSequence s) {
        for (auto& id : s.ids) id = id % 6;
        return s;
    };
    const auto scene = clamp6(random_seq(c.dims.scene_len, c.vocab_size, rng));
    const auto prompt = clamp6(random_seq(c.dims.prompt_len, c.vocab_size, rng));
    const auto rt = clamp6(random_seq(c.dims.response_len, c.vocab_size, rng));
    auto r0 = clamp6(random_seq(c.dims.response_len, c.vocab_size, rng));
    RoleMask roles(c.dims.response_len, Role::Clean);

    Activations acts(c);
    forward(params, scene, prompt, rt, acts);
    std::vector<std::vector<double>> dl(1);
    dl[0].assign(acts.logits.size(), 0.0);
    LossSample s{&acts.logits, &r0, &roles, 0.5};
    loss_revision({s}, &dl);
    std::vector<double> grad(params.theta.size(), 0.0);
    backward(params, acts, dl[0], grad);

    const ParamLayout layout(c);
    const auto& tok = layout.find("tok_emb");
    for (int id = 6; id < c.vocab_size; ++id)
        for (int j = 0; j < c.d_model; ++j)
            REQUIRE(grad[tok.offset + static_cast<size_t>(id) * c.d_model + j] == 0.0);
}

TEST_CASE("one adam step matches the hand-computed update") {
    ModelConfig c = tiny_config();
    ModelParams params(c);
    params.theta.assign(params.theta.size(), 0.0);
    params.theta[0] = 1.0;
    std::vector<double> grad(params.theta.size(), 0.0);
    grad[0] = 0.3;
    AdamState state;
    AdamConfig cfg;  // lr 3e-4, beta 0.9/0.999, eps 1e-8
    adam_step(params, grad, state, cfg);
    // at t=1 the bias corrections cancel: update = lr * g / (|g| + eps)
    const double expected = 1.0 - cfg.lr * 0.3 / (0.3 + cfg.eps);
    REQUIRE(params.theta[0] == Catch::Approx(expected).margin(1e-15));
    for (size_t i = 1; i < params.theta.size(); ++i) REQUIRE(params.theta[i] == 0.0);
}

TEST_CASE("sgd with zero learning rate is the identity") {
    ModelConfig c = tiny_config();
    ModelParams params = init_params(c, 31);
    const auto before = params.theta;
    std::vector<double> grad(params.theta.size(), 1.0);
    sgd_step(params, grad, 0.0);
    REQUIRE(params.theta == before);
}

TEST_CASE("two half batches with accumulation equal one full batch for sgd") {
    ModelConfig c = tiny_config();
    ModelParams params = init_params(c, 41);
    Rng rng(42);
    const auto scene = random_seq(c.dims.scene_len, c.vocab_size, rng);
    const auto prompt = random_seq(c.dims.prompt_len, c.vocab_size, rng);

    std::vector<TokenSequence> rts, r0s;
    for (int i = 0; i < 4; ++i) {
        rts.push_back(random_seq(c.dims.response_len, c.vocab_size, rng));
        r0s.push_back(random_seq(c.dims.response_len, c.vocab_size, rng));
    }
    RoleMask roles(c.dims.response_len, Role::Mask);

    auto grad_of = [&](int begin, int end, double scale) {
        std::vector<double> grad(params.theta.size(), 0.0);
        for (int i = begin; i < end; ++i) {
            Activations acts(c);
            forward(params, scene, prompt, rts[i], acts);
            std::vector<std::vector<double>> dl(1);
            dl[0].assign(acts.logits.size(), 0.0);
            LossSample s{&acts.logits, &r0s[i], &roles, 0.7};
            loss_masked({s}, &dl, scale);
            backward(params, acts, dl[0], grad);
        }
        return grad;
    };

    const auto full = grad_of(0, 4, 1.0 / 4);        // mean over 4 samples
    auto acc = grad_of(0, 2, 1.0 / 4);               // two half batches, same scaling
    const auto second = grad_of(2, 4, 1.0 / 4);
    for (size_t i = 0; i < acc.size(); ++i) acc[i] += second[i];

    ModelParams a = params, b = params;
    sgd_step(a, full, 0.1);
    sgd_step(b, acc, 0.1);
    for (size_t i = 0; i < a.theta.size(); ++i)
        REQUIRE(a.theta[i] == Catch::Approx(b.theta[i]).margin(1e-12));
}

TEST_CASE("checkpoints round trip bit-exactly with optimizer state") {
    ModelConfig c = tiny_config();
    ModelParams params = init_params(c, 51);
    AdamState adam;
    adam.reset(params.theta.size());
    Rng rng(52);
    for (auto& m : adam.m) m = rng.uniform() - 0.5;
    for (auto& v : adam.v) v = rng.uniform();
    adam.t = 17;

    const auto path = std::filesystem::temp_directory_path() / "rediff_ckpt_test.ckpt";
    save_checkpoint(path.string(), params, 0xdeadbeefcafe1234ull, 99, &adam);
    const auto loaded = load_checkpoint(path.string());
    std::filesystem::remove(path);

    REQUIRE(loaded.params.config == c);
    REQUIRE(loaded.params.theta == params.theta);
    REQUIRE(loaded.vocab_hash == 0xdeadbeefcafe1234ull);
    REQUIRE(loaded.step == 99);
    REQUIRE(loaded.has_adam);
    REQUIRE(loaded.adam.t == 17);
    REQUIRE(loaded.adam.m == adam.m);
    REQUIRE(loaded.adam.v == adam.v);
}
