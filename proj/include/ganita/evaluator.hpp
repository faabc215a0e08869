#pragma once

// GSM8k-style chain-of-thought evaluation: prompt construction, numeric
// answer extraction and normalization, exact-match grading, Pass@1
// aggregation over an abstract completion backend.

#include <cctype>
#include <cstdint>
#include <functional>
#include <istream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ganita/common.hpp"
#include "ganita/corpus.hpp"

namespace ganita {

struct EvalItem {
    std::string id;
    std::string question;
    std::string gold_answer_text;  // reasoning + "#### <answer>" marker
};

struct EvalRecord {
    std::string id;
    std::string prompt;
    std::string completion;
    std::optional<std::string> extracted_pred;
    std::string gold;
    bool correct = false;
    std::string error;  // backend failure note, if any

    nlohmann::json to_json() const {
        nlohmann::json j{{"id", id},
                         {"prompt", prompt},
                         {"completion", completion},
                         {"gold", gold},
                         {"correct", correct}};
        j["extracted_pred"] = extracted_pred ? nlohmann::json(*extracted_pred) : nlohmann::json();
        if (!error.empty()) j["error"] = error;
        return j;
    }
};

struct EvalReport {
    size_t n_items = 0;
    size_t n_correct = 0;
    double pass_at_1 = 0.0;
    bool degraded = false;  // every item's backend call failed
    std::vector<EvalRecord> records;

    nlohmann::json to_json() const {
        nlohmann::json recs = nlohmann::json::array();
        for (const auto& r : records) recs.push_back(r.to_json());
        return {{"n_items", n_items},
                {"n_correct", n_correct},
                {"pass_at_1", pass_at_1},
                {"degraded", degraded},
                {"records", recs}};
    }
};

// Canonicalize a numeric token: strip commas, currency symbols and a
// trailing period; render integer-valued decimals without the fraction.
// Returns nullopt when the token does not parse as a number.
inline std::optional<std::string> normalize_number(const std::string& raw) {
    std::string s;
    for (size_t i = 0; i < raw.size(); ++i) {
        unsigned char c = static_cast<unsigned char>(raw[i]);
        if (c == ',' || c == '$') continue;
        s.push_back(static_cast<char>(c));
    }
    while (!s.empty() && (s.back() == '.' || s.back() == '%')) s.pop_back();
    if (s.empty()) return std::nullopt;
    size_t i = 0;
    if (s[i] == '-' || s[i] == '+') ++i;
    bool digits = false, dot = false;
    for (size_t j = i; j < s.size(); ++j) {
        if (s[j] >= '0' && s[j] <= '9') {
            digits = true;
        } else if (s[j] == '.' && !dot) {
            dot = true;
        } else {
            return std::nullopt;
        }
    }
    if (!digits) return std::nullopt;
    // drop trailing fractional zeros, then a bare trailing dot
    if (dot) {
        while (!s.empty() && s.back() == '0') s.pop_back();
        if (!s.empty() && s.back() == '.') s.pop_back();
    }
    if (s == "-0" || s == "+0" || s.empty()) s = "0";
    if (s[0] == '+') s.erase(0, 1);
    return s;
}

// The token following the last "#### " marker, normalized.
inline std::string extract_gold_answer(const std::string& answer_text) {
    const std::string marker = "#### ";
    size_t at = answer_text.rfind(marker);
    if (at == std::string::npos) throw DataError("gold answer: missing '#### ' marker");
    size_t start = at + marker.size();
    size_t end = start;
    while (end < answer_text.size() && !std::isspace(static_cast<unsigned char>(answer_text[end])))
        ++end;
    auto norm = normalize_number(answer_text.substr(start, end - start));
    if (!norm) throw DataError("gold answer: token after marker is not a number");
    return *norm;
}

enum class Extractor { last_number, answer_is };

// Last number in the completion (truncated at a new "### Q:" if the
// model starts another question). Total: never throws.
inline std::optional<std::string> extract_predicted_answer(const std::string& completion,
                                                           Extractor extractor = Extractor::last_number) {
    std::string text = completion;
    if (size_t q = text.find("### Q:"); q != std::string::npos) text = text.substr(0, q);
    if (extractor == Extractor::answer_is) {
        size_t at = text.rfind("answer is");
        if (at == std::string::npos) return std::nullopt;
        text = text.substr(at);
    }
    std::optional<std::string> last;
    size_t i = 0;
    while (i < text.size()) {
        unsigned char c = static_cast<unsigned char>(text[i]);
        bool starts = (c >= '0' && c <= '9') ||
                      ((c == '-' || c == '$') && i + 1 < text.size() &&
                       std::isdigit(static_cast<unsigned char>(text[i + 1])));
        if (!starts) {
            ++i;
            continue;
        }
        size_t j = i;
        if (text[j] == '-' || text[j] == '$') ++j;
        while (j < text.size() &&
               (std::isdigit(static_cast<unsigned char>(text[j])) || text[j] == ',' ||
                text[j] == '.'))
            ++j;
        if (auto norm = normalize_number(text.substr(i, j - i))) last = norm;
        i = j;
    }
    return last;
}

// Exact numeric match on normalized forms ("72" == "72.0" == "72.").
inline bool grade(const std::optional<std::string>& pred, const std::string& gold) {
    if (!pred) return false;
    auto p = normalize_number(*pred);
    auto g = normalize_number(gold);
    if (!p || !g) return false;
    return *p == *g;
}

using CompletionBackend = std::function<std::string(const std::string& prompt)>;

struct EvalOptions {
    Extractor extractor = Extractor::last_number;
};

// Pass@1 over one deterministic completion per item. Backend failures
// are recorded as incorrect with an error note; if every call failed the
// report is flagged degraded.
inline EvalReport evaluate_pass1(const CompletionBackend& backend,
                                 const std::vector<EvalItem>& items,
                                 const EvalOptions& opts = {}) {
    if (items.empty()) throw DataError("evaluate_pass1: no items");
    EvalReport report;
    report.n_items = items.size();
    size_t n_failed = 0;
    for (const auto& item : items) {
        EvalRecord rec;
        rec.id = item.id;
        rec.prompt = build_eval_prompt(item.question);
        rec.gold = extract_gold_answer(item.gold_answer_text);
        try {
            rec.completion = backend(rec.prompt);
            rec.extracted_pred = extract_predicted_answer(rec.completion, opts.extractor);
            rec.correct = grade(rec.extracted_pred, rec.gold);
        } catch (const std::exception& e) {
            rec.error = e.what();
            rec.correct = false;
            ++n_failed;
        }
        if (rec.correct) ++report.n_correct;
        report.records.push_back(std::move(rec));
    }
    report.pass_at_1 = static_cast<double>(report.n_correct) / static_cast<double>(report.n_items);
    report.degraded = (n_failed == items.size());
    return report;
}

// GSM8k release schema: JSONL with fields question, answer.
inline std::vector<EvalItem> load_eval_items(std::istream& in) {
    std::vector<EvalItem> items;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            auto j = nlohmann::json::parse(line);
            EvalItem item;
            item.id = j.value("id", "q" + std::to_string(lineno));
            item.question = j.at("question").get<std::string>();
            item.gold_answer_text = j.at("answer").get<std::string>();
            items.push_back(std::move(item));
        } catch (const std::exception& e) {
            throw DataError("eval data line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return items;
}

}  // namespace ganita
