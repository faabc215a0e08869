#include <catch_amalgamated.hpp>

#include <algorithm>

#include "ganita/evaluator.hpp"

using namespace ganita;

TEST_CASE("gold answer extraction") {
    CHECK(extract_gold_answer("48/2 = 24 clips in May. 48+24 = 72. #### 72") == "72");
    CHECK(extract_gold_answer("#### 1,250") == "1250");
    CHECK(extract_gold_answer("steps... #### 5\nmore #### 8") == "8");  // last marker wins
    CHECK_THROWS_AS(extract_gold_answer("no marker here"), DataError);
}

TEST_CASE("number normalization") {
    CHECK(normalize_number("1,250") == "1250");
    CHECK(normalize_number("$3,000") == "3000");
    CHECK(normalize_number("72.") == "72");
    CHECK(normalize_number("72.0") == "72");
    CHECK(normalize_number("72.50") == "72.5");
    CHECK(normalize_number("-0") == "0");
    CHECK(normalize_number("+5") == "5");
    CHECK_FALSE(normalize_number("banana").has_value());
    CHECK_FALSE(normalize_number("").has_value());
}

TEST_CASE("predicted answer extraction takes the last number") {
    CHECK(extract_predicted_answer("So she has 72 clips. The answer is 72.") == "72");
    CHECK(extract_predicted_answer("There are 3,000 apples, then 1,250 remain.") == "1250");
    CHECK_FALSE(extract_predicted_answer("I cannot solve this.").has_value());
    // truncation at a hallucinated follow-up question
    CHECK(extract_predicted_answer("The answer is 9.\n### Q: what is 5+5? 10") == "9");
    CHECK(extract_predicted_answer("costs $40 total") == "40");
}

TEST_CASE("answer-is extractor variant") {
    CHECK(extract_predicted_answer("6*7=42 so the answer is 41.", Extractor::answer_is) == "41");
    CHECK_FALSE(extract_predicted_answer("it equals 42", Extractor::answer_is).has_value());
}

TEST_CASE("extraction never throws on arbitrary bytes") {
    Rng rng(99);
    for (int i = 0; i < 2000; ++i) {
        std::string s;
        size_t len = rng.below(120);
        for (size_t j = 0; j < len; ++j) s.push_back(static_cast<char>(rng.below(256)));
        CHECK_NOTHROW(extract_predicted_answer(s));
    }
}

TEST_CASE("grading is exact match on normalized forms") {
    CHECK(grade(std::string("72"), "72"));
    CHECK(grade(std::string("72.0"), "72"));
    CHECK(grade(std::string("72."), "72"));
    CHECK_FALSE(grade(std::nullopt, "72"));
    CHECK_FALSE(grade(std::string("71"), "72"));
    // symmetry on normalized forms
    CHECK(grade(std::string("72"), "72.0") == grade(std::string("72.0"), "72"));
}

namespace {

std::vector<EvalItem> fixture_items(size_t n) {
    std::vector<EvalItem> items;
    for (size_t i = 0; i < n; ++i)
        items.push_back({"q" + std::to_string(i), "What is " + std::to_string(i) + "+1?",
                         "add one. #### " + std::to_string(i + 1)});
    return items;
}

}  // namespace

TEST_CASE("harness counts a scripted 3-of-8 pattern as 0.375") {
    auto items = fixture_items(8);
    CompletionBackend backend = [](const std::string& prompt) {
        // correct only for questions 0, 3, 6
        size_t at = prompt.find("What is ");
        int q = std::stoi(prompt.substr(at + 8));
        return q % 3 == 0 ? "The answer is " + std::to_string(q + 1) + "."
                          : std::string("The answer is 999.");
    };
    auto report = evaluate_pass1(backend, items);
    CHECK(report.n_items == 8);
    CHECK(report.n_correct == 3);
    CHECK(report.pass_at_1 == 0.375);
    CHECK_FALSE(report.degraded);
}

TEST_CASE("pass@1 is order independent") {
    auto items = fixture_items(10);
    CompletionBackend backend = [](const std::string& prompt) {
        size_t at = prompt.find("What is ");
        int q = std::stoi(prompt.substr(at + 8));
        return q % 2 == 0 ? "so it's " + std::to_string(q + 1) : std::string("dunno");
    };
    auto r1 = evaluate_pass1(backend, items);
    auto shuffled = items;
    std::reverse(shuffled.begin(), shuffled.end());
    auto r2 = evaluate_pass1(backend, shuffled);
    CHECK(r1.pass_at_1 == r2.pass_at_1);
    // per-id verdicts agree regardless of order
    for (const auto& rec1 : r1.records) {
        auto it = std::find_if(r2.records.begin(), r2.records.end(),
                               [&rec1](const EvalRecord& r) { return r.id == rec1.id; });
        REQUIRE(it != r2.records.end());
        CHECK(it->correct == rec1.correct);
    }
}

TEST_CASE("backend failures are recorded, all-failed flags degraded") {
    auto items = fixture_items(4);
    size_t calls = 0;
    CompletionBackend flaky = [&calls](const std::string&) -> std::string {
        if (++calls == 2) throw std::runtime_error("backend down");
        return "the answer is 1";
    };
    auto report = evaluate_pass1(flaky, items);
    CHECK(report.n_items == 4);
    CHECK_FALSE(report.records[1].error.empty());
    CHECK_FALSE(report.records[1].correct);
    CHECK_FALSE(report.degraded);

    CompletionBackend dead = [](const std::string&) -> std::string {
        throw std::runtime_error("always down");
    };
    CHECK(evaluate_pass1(dead, items).degraded);
    CHECK_THROWS_AS(evaluate_pass1(dead, {}), DataError);
}

TEST_CASE("every emitted prompt ends with the CoT cue") {
    auto items = fixture_items(5);
    CompletionBackend backend = [](const std::string&) { return std::string("1"); };
    auto report = evaluate_pass1(backend, items);
    for (const auto& rec : report.records)
        CHECK(rec.prompt.ends_with("Let's think step by step. "));
}

TEST_CASE("eval items load from the GSM8k release schema") {
    std::istringstream in(
        R"({"question":"How many?","answer":"Count them. #### 7"})" "\n"
        R"({"question":"And now?","answer":"Fewer. #### 3"})" "\n");
    auto items = load_eval_items(in);
    REQUIRE(items.size() == 2);
    CHECK(items[0].question == "How many?");
    CHECK(extract_gold_answer(items[1].gold_answer_text) == "3");

    std::istringstream bad(R"({"question":"x"})" "\n");
    CHECK_THROWS_AS(load_eval_items(bad), DataError);
}
