#include <catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "ganita/corpus.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const fs::path kDir = fs::temp_directory_path() / "ganita_cli_test";

int run(const std::string& args) {
    std::string cmd = std::string(GANITA_CLI) + " " + args + " > " + (kDir / "stdout.txt").string() +
                      " 2> " + (kDir / "stderr.txt").string();
    int status = std::system(cmd.c_str());
    return WEXITSTATUS(status);
}

std::string last_stdout() {
    std::ifstream f(kDir / "stdout.txt");
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

std::string read_file(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

void write_fixtures() {
    fs::remove_all(kDir);
    fs::create_directories(kDir);

    // 200 documents: mostly web_math, a few arxiv carrying the 'Z' sentinel
    std::ofstream corpus(kDir / "corpus.jsonl");
    for (int i = 0; i < 200; ++i) {
        json j;
        j["id"] = "d" + std::to_string(i);
        bool is_arxiv = (i % 40 == 0);  // 5 sentinel docs
        j["source_kind"] = is_arxiv ? "arxiv" : "web_math";
        j["text"] = is_arxiv ? std::string(40, 'Z')
                             : "problem " + std::to_string(i) + ": compute " +
                                   std::to_string(i % 7) + "+" + std::to_string(i % 5) + " = " +
                                   std::to_string(i % 7 + i % 5) + ". ";
        corpus << j.dump() << "\n";
    }
    corpus.close();

    std::ofstream qa(kDir / "qa.jsonl");
    for (int i = 0; i < 12; ++i) {
        json j;
        j["question"] = "What is " + std::to_string(i) + "+1?";
        j["answer"] = "Add one. #### " + std::to_string(i + 1);
        qa << j.dump() << "\n";
    }
    qa.close();

    std::ofstream ev(kDir / "eval.jsonl");
    for (int i = 0; i < 8; ++i) {
        json j;
        j["question"] = "What is " + std::to_string(i) + "+2?";
        j["answer"] = "Add two. #### " + std::to_string(i + 2);
        ev << j.dump() << "\n";
    }
    ev.close();

    // scripted completions: items 0,3,6 answered correctly (3 of 8)
    std::ofstream script(kDir / "completions.jsonl");
    for (int i = 0; i < 8; ++i) {
        json j;
        j["completion"] = (i % 3 == 0) ? "It is " + std::to_string(i + 2) + "."
                                       : std::string("It is 999.");
        script << j.dump() << "\n";
    }
    script.close();

    json cfg;
    cfg["paths"]["corpus"] = json::array(
        {{{"file", (kDir / "corpus.jsonl").string()}, {"source_kind", "web_math"}}});
    cfg["paths"]["qa_train"] = (kDir / "qa.jsonl").string();
    cfg["paths"]["tokenizer"] = (kDir / "out/tokenizer.txt").string();
    cfg["paths"]["shards_dir"] = (kDir / "out/shards").string();
    cfg["paths"]["checkpoint_dir"] = (kDir / "out/ckpt").string();
    cfg["paths"]["metrics"] = (kDir / "out/metrics.jsonl").string();
    cfg["paths"]["eval_data"] = (kDir / "eval.jsonl").string();
    cfg["paths"]["eval_report"] = (kDir / "out/eval_report.json").string();
    cfg["tokenizer"]["vocab_size"] = 300;
    cfg["model"] = {{"vocab_size", 300}, {"context_length", 32}, {"n_layers", 2},
                    {"d_model", 32},    {"n_heads", 2},          {"seed", 1}};
    cfg["train"] = {{"steps", 12},       {"batch_size", 4},   {"warmup_steps", 2},
                    {"lr_peak", 1e-3},   {"eval_interval", 4}, {"checkpoint_interval", 100},
                    {"seed", 1}};
    cfg["finetune"] = {{"epochs", 1}};
    std::ofstream(kDir / "config.json") << cfg.dump(2);
}

std::string base_args() { return "--config " + (kDir / "config.json").string(); }

}  // namespace

TEST_CASE("full pipeline through the CLI") {
    write_fixtures();

    SECTION("the whole pipeline runs end to end") {
        REQUIRE(run(base_args() + " train-tokenizer") == 0);
        REQUIRE(fs::exists(kDir / "out/tokenizer.txt"));

        // rerun is byte-identical
        std::string first = read_file(kDir / "out/tokenizer.txt");
        REQUIRE(run(base_args() + " train-tokenizer") == 0);
        CHECK(read_file(kDir / "out/tokenizer.txt") == first);

        REQUIRE(run(base_args() + " prepare-data") == 0);
        auto manifest = ganita::SplitManifest::from_json(
            json::parse(read_file(kDir / "out/shards/split_manifest.json")));
        // 200 docs + 12 templatized QA docs = 212; 95/5 split
        CHECK(manifest.train_ids.size() == 201);
        CHECK(manifest.val_ids.size() == 11);

        // arxiv is excluded by default: no 'Z' byte token in any shard
        for (const char* shard_name : {"train.gpkd", "val.gpkd"}) {
            auto shard = ganita::read_shard((kDir / "out/shards" / shard_name).string());
            for (const auto& s : shard.sequences)
                for (ganita::TokenId id : s) CHECK(id != static_cast<ganita::TokenId>('Z'));
        }

        REQUIRE(run(base_args() + " pretrain --deterministic") == 0);
        REQUIRE(fs::exists(kDir / "out/ckpt/final.gckp"));
        REQUIRE(fs::exists(kDir / "out/metrics.jsonl"));
        REQUIRE(fs::exists(kDir / "out/ckpt/pretrain.effective_config.json"));
        std::ifstream metrics(kDir / "out/metrics.jsonl");
        std::string line;
        size_t records = 0;
        while (std::getline(metrics, line)) {
            auto j = json::parse(line);
            CHECK(j["val_perplexity"].get<double>() ==
                  Catch::Approx(std::exp(j["val_loss"].get<double>())).epsilon(1e-9));
            ++records;
        }
        CHECK(records == 3);  // steps 4, 8, 12

        REQUIRE(run(base_args() + " perplexity") == 0);
        CHECK(last_stdout().find("val_perplexity") != std::string::npos);

        REQUIRE(run(base_args() + " finetune") == 0);
        REQUIRE(fs::exists(kDir / "out/ckpt/finetuned.gckp"));

        // model-backed eval: exit code reflects harness health, not accuracy
        REQUIRE(run(base_args() + " eval-gsm8k --override eval.max_new_tokens=8") == 0);
        REQUIRE(fs::exists(kDir / "out/eval_report.json"));

        // scripted backend scores exactly 3/8
        REQUIRE(run(base_args() + " eval-gsm8k --override eval.backend=script --override "
                                  "eval.script_completions=" +
                    (kDir / "completions.jsonl").string()) == 0);
        CHECK(last_stdout().find("pass_at_1 0.375") != std::string::npos);
        auto report = json::parse(read_file(kDir / "out/eval_report.json"));
        CHECK(report["n_correct"] == 3);
    }

    SECTION("config errors exit with code 2") {
        CHECK(run(base_args() + " train-tokenizer --override tokenizer.vocab_size=100") == 2);
    }

    SECTION("data errors exit with code 3") {
        std::ofstream(kDir / "empty_config.json")
            << json{{"paths", {{"corpus", json::array()}}}}.dump();
        CHECK(run("--config " + (kDir / "empty_config.json").string() + " prepare-data") == 3);
    }

    SECTION("GANITA_CONFIG supplies the default config path") {
        std::string cmd = "GANITA_CONFIG=" + (kDir / "config.json").string() + " " + GANITA_CLI +
                          " train-tokenizer > /dev/null 2>&1";
        CHECK(WEXITSTATUS(std::system(cmd.c_str())) == 0);
    }
}
