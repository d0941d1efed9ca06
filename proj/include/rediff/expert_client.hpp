#pragma once

#include <chrono>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "rediff/revisor.hpp"
#include "rediff/vocab.hpp"

#include <httplib.h>
#include <json.hpp>

namespace rediff {

struct TransportError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct MalformedReply : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ExpertClientConfig {
    std::string endpoint;  // e.g. http://127.0.0.1:8080
    std::string path = "/revise";
    std::string template_path;
    std::string template_id = "caption-revision-v1";
    int max_retries = 3;
    int backoff_ms = 200;
    int timeout_s = 30;
};

inline std::string read_text_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open file: " + path);
    std::ostringstream out;
    out << in.rdbuf();
    return out.str();
}

// Parses the expert's reply against the draft it comments on: the literal
// "right", or a JSON array of {org, target} string pairs. Pairs violating
// the contract (unequal token counts, unknown words, non-unique or missing
// org) are dropped with a reason; a structurally unreadable reply throws
// MalformedReply and the caller skips the sample.
inline Review parse_expert_reply(const std::string& body, const TokenSequence& draft,
                                 const Vocab& vocab) {
    Review review;
    std::string trimmed = body;
    const auto b = trimmed.find_first_not_of(" \t\r\n");
    const auto e = trimmed.find_last_not_of(" \t\r\n");
    trimmed = b == std::string::npos ? "" : trimmed.substr(b, e - b + 1);

    if (trimmed == "right") {
        review.status = ReviewStatus::Right;
        return review;
    }

    nlohmann::json j;
    try {
        j = nlohmann::json::parse(trimmed);
    } catch (const nlohmann::json::exception& ex) {
        throw MalformedReply(std::string("reply is neither 'right' nor JSON: ") + ex.what());
    }
    if (!j.is_array()) throw MalformedReply("reply JSON is not an array");

    for (const auto& item : j) {
        if (!item.is_object() || !item.contains("org") || !item.contains("target") ||
            !item.at("org").is_string() || !item.at("target").is_string())
            throw MalformedReply("reply pair is not an {org, target} object");
        const auto org_words = split_words(item.at("org").get<std::string>());
        const auto target_words = split_words(item.at("target").get<std::string>());

        RevisionPair pair;
        bool known = true;
        for (const auto& w : org_words) {
            if (!vocab.contains(w)) {
                review.dropped.push_back("unknown token in org: " + w);
                known = false;
                break;
            }
            pair.org.push_back(vocab.id(w));
        }
        if (!known) continue;
        for (const auto& w : target_words) {
            if (!vocab.contains(w)) {
                review.dropped.push_back("unknown token in target: " + w);
                known = false;
                break;
            }
            pair.target.push_back(vocab.id(w));
        }
        if (!known) continue;

        if (auto reason = validate_pair(draft, pair)) {
            review.dropped.push_back(*reason + ": '" + item.at("org").get<std::string>() + "'");
            continue;
        }
        review.pairs.push_back(std::move(pair));
    }
    review.status = ReviewStatus::Revised;
    return review;
}

// Wire request for one draft. The full prompt template text travels with the
// request so the expert side needs no shared files.
inline nlohmann::json make_expert_request(const ExpertClientConfig& cfg,
                                          const std::string& image_description,
                                          const std::string& question, const std::string& answer,
                                          const std::string& prediction) {
    return {{"prompt_template_id", cfg.template_id},
            {"prompt", read_text_file(cfg.template_path)},
            {"image_description", image_description},
            {"question", question},
            {"answer", answer},
            {"prediction", prediction}};
}

// POSTs one revision request with bounded retries and backoff; validates the
// reply against the draft.
inline Review external_revise(const ExpertClientConfig& cfg, const std::string& image_description,
                              const std::string& question, const std::string& answer,
                              const TokenSequence& draft, const Vocab& vocab) {
    if (cfg.endpoint.empty()) throw TransportError("expert endpoint not configured");

    std::vector<std::string> draft_words;
    for (int i = 0; i < caption_token_count(draft); ++i)
        draft_words.push_back(vocab.token(draft.ids[i]));
    const auto request =
        make_expert_request(cfg, image_description, question, answer, join_words(draft_words));

    std::string last_error;
    for (int attempt = 0; attempt < cfg.max_retries; ++attempt) {
        if (attempt > 0)
            std::this_thread::sleep_for(std::chrono::milliseconds(cfg.backoff_ms * (1 << (attempt - 1))));
        httplib::Client client(cfg.endpoint);
        client.set_read_timeout(cfg.timeout_s, 0);
        client.set_connection_timeout(cfg.timeout_s, 0);
        auto res = client.Post(cfg.path, request.dump(), "application/json");
        if (!res) {
            last_error = "connection failed: " + httplib::to_string(res.error());
            continue;
        }
        if (res->status >= 500) {
            last_error = "server error " + std::to_string(res->status);
            continue;
        }
        if (res->status != 200)
            throw TransportError("expert replied with status " + std::to_string(res->status));
        return parse_expert_reply(res->body, draft, vocab);
    }
    throw TransportError("expert unreachable after " + std::to_string(cfg.max_retries) +
                         " attempts: " + last_error);
}

}  // namespace rediff
