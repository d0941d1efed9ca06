#pragma once

#include <cmath>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <vector>

#include "rediff/diffusion.hpp"
#include "rediff/vocab.hpp"

namespace rediff {

struct NonFiniteLoss : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// View of one corrupted sample's forward result for loss computation.
struct LossSample {
    const std::vector<double>* logits = nullptr;  // [response_len, vocab]
    const TokenSequence* r0 = nullptr;
    const RoleMask* roles = nullptr;
    double t = 0.0;
};

// View of one refine (Stage II) sample: a complete draft as input, the
// refined sequence as target, loss restricted to the corrected spans.
struct RefineSample {
    const std::vector<double>* logits = nullptr;   // [response_len, vocab]
    const TokenSequence* refined = nullptr;        // targets
    const std::vector<int>* mistake_positions = nullptr;
    double time_weight = 1.0;  // 1 unless the 1/t ablation flag is on
};

// Per-type losses and counts over a batch. A type with zero tokens in the
// whole batch contributes exactly 0 and is reported absent.
struct TypedLossReport {
    double mask = 0.0, syntax = 0.0, hallucination = 0.0, clean = 0.0;
    int n_mask = 0, n_syntax = 0, n_hallucination = 0, n_clean = 0;
    double total = 0.0;
    std::optional<double> refine;
    int n_mistake = 0;

    bool present(Role r) const { return count(r) > 0; }
    int count(Role r) const {
        switch (r) {
            case Role::Mask: return n_mask;
            case Role::Syntax: return n_syntax;
            case Role::Hallucination: return n_hallucination;
            case Role::Clean: return n_clean;
            default: return 0;
        }
    }
    double value(Role r) const {
        switch (r) {
            case Role::Mask: return mask;
            case Role::Syntax: return syntax;
            case Role::Hallucination: return hallucination;
            case Role::Clean: return clean;
            default: return 0.0;
        }
    }
};

namespace detail {

// -log softmax(logits_row)[target]; optionally accumulates
// w * (softmax - onehot(target)) into drow.
inline double row_nll(const double* row, int vocab, int target, double w, double* drow) {
    double mx = row[0];
    for (int j = 1; j < vocab; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (int j = 0; j < vocab; ++j) sum += std::exp(row[j] - mx);
    const double lse = mx + std::log(sum);
    if (drow) {
        const double inv = 1.0 / sum;
        for (int j = 0; j < vocab; ++j) drow[j] += w * std::exp(row[j] - mx) * inv;
        drow[target] -= w;
    }
    return lse - row[target];
}

}  // namespace detail

struct MaskedLoss {
    double value = 0.0;
    int n_masked = 0;  // batch total; 0 means no masked tokens anywhere
};

// Standard masked-diffusion objective: per sample, (1/t) times the summed
// NLL of the original tokens at masked positions; mean over the batch.
// dlogits, when given, must hold one zeroed or accumulating [R,V] buffer per
// sample.
inline MaskedLoss loss_masked(const std::vector<LossSample>& batch,
                        std::vector<std::vector<double>>* dlogits = nullptr,
                        double scale = 1.0) {
    if (batch.empty()) return {};
    MaskedLoss out;
    const double inv_b = scale / batch.size();
    for (size_t s = 0; s < batch.size(); ++s) {
        const auto& sample = batch[s];
        if (!(sample.t > 0.0)) throw std::invalid_argument("noise level must be positive");
        const int R = sample.r0->window();
        const int V = static_cast<int>(sample.logits->size()) / R;
        const double w = inv_b / sample.t;
        double* dbuf = dlogits ? (*dlogits)[s].data() : nullptr;
        for (int i = 0; i < R; ++i) {
            if ((*sample.roles)[i] != Role::Mask) continue;
            const double* row = sample.logits->data() + static_cast<size_t>(i) * V;
            out.value += w * detail::row_nll(row, V, sample.r0->ids[i], w,
                                             dbuf ? dbuf + static_cast<size_t>(i) * V : nullptr);
            ++out.n_masked;
        }
    }
    if (!std::isfinite(out.value)) throw NonFiniteLoss("loss_masked is not finite");
    return out;
}

// Stage-I objective: per type, (1/t)(1/N_type) times the summed NLL over
// positions of that type; each typed term is averaged over the batch and the
// total is their sum.
inline TypedLossReport loss_revision(const std::vector<LossSample>& batch,
                                     std::vector<std::vector<double>>* dlogits = nullptr,
                                     double scale = 1.0) {
    TypedLossReport rep;
    if (batch.empty()) return rep;
    const double inv_b = scale / batch.size();
    constexpr Role kTypes[4] = {Role::Mask, Role::Syntax, Role::Hallucination, Role::Clean};

    for (size_t s = 0; s < batch.size(); ++s) {
        const auto& sample = batch[s];
        if (!(sample.t > 0.0)) throw std::invalid_argument("noise level must be positive");
        const int R = sample.r0->window();
        const int V = static_cast<int>(sample.logits->size()) / R;
        double* dbuf = dlogits ? (*dlogits)[s].data() : nullptr;

        int counts[4] = {0, 0, 0, 0};
        for (int i = 0; i < R; ++i) {
            for (int k = 0; k < 4; ++k)
                if ((*sample.roles)[i] == kTypes[k]) ++counts[k];
        }
        for (int k = 0; k < 4; ++k) {
            if (counts[k] == 0) continue;
            const double w = inv_b / (sample.t * counts[k]);
            double term = 0.0;
            for (int i = 0; i < R; ++i) {
                if ((*sample.roles)[i] != kTypes[k]) continue;
                const double* row = sample.logits->data() + static_cast<size_t>(i) * V;
                term += w * detail::row_nll(row, V, sample.r0->ids[i], w,
                                            dbuf ? dbuf + static_cast<size_t>(i) * V : nullptr);
            }
            switch (kTypes[k]) {
                case Role::Mask: rep.mask += term; rep.n_mask += counts[k]; break;
                case Role::Syntax: rep.syntax += term; rep.n_syntax += counts[k]; break;
                case Role::Hallucination:
                    rep.hallucination += term;
                    rep.n_hallucination += counts[k];
                    break;
                default: rep.clean += term; rep.n_clean += counts[k]; break;
            }
        }
    }
    rep.total = rep.mask + rep.syntax + rep.hallucination + rep.clean;
    if (!std::isfinite(rep.total)) throw NonFiniteLoss("loss_revision is not finite");
    return rep;
}

struct RefineLoss {
    double value = 0.0;
    int n_mistake = 0;   // batch total
    bool all_empty = true;
};

// Stage-II objective: NLL of the refined tokens at the corrected positions
// only, normalized by the number of corrected tokens. No 1/t factor: the
// input is a complete draft, not a noised sample.
inline RefineLoss loss_refine(const std::vector<RefineSample>& batch,
                              std::vector<std::vector<double>>* dlogits = nullptr,
                              double scale = 1.0) {
    RefineLoss out;
    if (batch.empty()) return out;
    const double inv_b = scale / batch.size();
    for (size_t s = 0; s < batch.size(); ++s) {
        const auto& sample = batch[s];
        const int R = sample.refined->window();
        const int V = static_cast<int>(sample.logits->size()) / R;
        const int n = static_cast<int>(sample.mistake_positions->size());
        if (n == 0) continue;  // EmptyMistakeSet: contributes exactly 0
        out.all_empty = false;
        out.n_mistake += n;
        const double w = inv_b * sample.time_weight / n;
        double* dbuf = dlogits ? (*dlogits)[s].data() : nullptr;
        for (int i : *sample.mistake_positions) {
            if (i < 0 || i >= R) throw std::out_of_range("mistake position out of bounds");
            const double* row = sample.logits->data() + static_cast<size_t>(i) * V;
            out.value += w * detail::row_nll(row, V, sample.refined->ids[i], w,
                                             dbuf ? dbuf + static_cast<size_t>(i) * V : nullptr);
        }
    }
    if (!std::isfinite(out.value)) throw NonFiniteLoss("loss_refine is not finite");
    return out;
}

inline void write_loss_csv_header(std::ostream& out) {
    out << "step,total,mask,syntax,hallucination,clean,refine,"
           "n_mask,n_syntax,n_hallucination,n_clean,n_mistake\n";
}

inline void append_loss_csv(std::ostream& out, int64_t step, const TypedLossReport& rep) {
    out << step << ',' << rep.total << ',' << rep.mask << ',' << rep.syntax << ','
        << rep.hallucination << ',' << rep.clean << ','
        << (rep.refine ? *rep.refine : 0.0) << ',' << rep.n_mask << ',' << rep.n_syntax << ','
        << rep.n_hallucination << ',' << rep.n_clean << ',' << rep.n_mistake << '\n';
}

}  // namespace rediff
