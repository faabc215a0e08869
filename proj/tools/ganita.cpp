// Command-line surface for the pipeline: tokenizer training, data
// preparation, pretraining, fine-tuning, perplexity, and GSM8k Pass@1
// evaluation, driven by one JSON config file with overrides.
//
// Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ganita/checkpoint.hpp"
#include "ganita/corpus.hpp"
#include "ganita/evaluator.hpp"
#include "ganita/model.hpp"
#include "ganita/tokenizer.hpp"
#include "ganita/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json default_config() {
    return json{
        {"paths",
         {{"corpus", json::array()},  // [{file, source_kind}]
          {"qa_train", ""},
          {"tokenizer", "out/tokenizer.txt"},
          {"shards_dir", "out/shards"},
          {"checkpoint_dir", "out/ckpt"},
          {"metrics", "out/metrics.jsonl"},
          {"eval_data", ""},
          {"eval_report", "out/eval_report.json"}}},
        {"tokenizer",
         {{"vocab_size", 32000}, {"special_tokens", json::array({"<|sep|>", "<|pad|>"})}}},
        {"model", ganita::ModelConfig{}.to_json()},
        {"train", ganita::TrainConfig{}.to_json()},
        {"finetune", {{"epochs", 2}}},
        {"data",
         {{"split_ratio", 0.95},
          {"split_seed", 0},
          {"exclude_kinds", json::array({"arxiv"})},
          {"repeat", json::object()},
          {"strict_ingest", false}}},
        {"eval",
         {{"max_new_tokens", 512},
          {"mode", "greedy"},
          {"temperature", 0.8},
          {"seed", 0},
          {"extractor", "last_number"},
          {"backend", "model"},
          {"script_completions", ""},
          {"limit", 0}}},
        {"deterministic", false},
    };
}

void deep_merge(json& base, const json& patch) {
    if (!patch.is_object() || !base.is_object()) {
        base = patch;
        return;
    }
    for (auto it = patch.begin(); it != patch.end(); ++it) {
        if (base.contains(it.key()) && base[it.key()].is_object() && it.value().is_object())
            deep_merge(base[it.key()], it.value());
        else
            base[it.key()] = it.value();
    }
}

void apply_override(json& cfg, const std::string& kv) {
    size_t eq = kv.find('=');
    if (eq == std::string::npos)
        throw ganita::ConfigError("override must be key=value: " + kv);
    std::string key = kv.substr(0, eq);
    std::string val = kv.substr(eq + 1);
    std::string ptr = "/";
    for (char c : key) ptr += (c == '.') ? '/' : c;
    json parsed;
    try {
        parsed = json::parse(val);
    } catch (...) {
        parsed = val;  // plain string
    }
    cfg[json::json_pointer(ptr)] = parsed;
}

struct Cli {
    std::string config_path;
    std::vector<std::string> overrides;
    long long seed = -1;
    bool deterministic = false;

    json load() const {
        json cfg = default_config();
        std::string path = config_path;
        if (path.empty()) {
            if (const char* env = std::getenv("GANITA_CONFIG")) path = env;
        }
        if (!path.empty()) {
            std::ifstream f(path);
            if (!f) throw ganita::ConfigError("cannot read config: " + path);
            json user;
            try {
                user = json::parse(f);
            } catch (const std::exception& e) {
                throw ganita::ConfigError(std::string("config parse error: ") + e.what());
            }
            deep_merge(cfg, user);
        }
        for (const auto& kv : overrides) apply_override(cfg, kv);
        if (seed >= 0) {
            cfg["model"]["seed"] = seed;
            cfg["train"]["seed"] = seed;
            cfg["data"]["split_seed"] = seed;
            cfg["eval"]["seed"] = seed;
        }
        if (deterministic) cfg["deterministic"] = true;
        return cfg;
    }
};

void freeze_config(const json& cfg, const std::string& out_dir, const std::string& command) {
    fs::create_directories(out_dir);
    std::ofstream f(out_dir + "/" + command + ".effective_config.json");
    f << cfg.dump(2) << "\n";
}

std::vector<ganita::Document> load_corpus_docs(const json& cfg) {
    std::vector<ganita::Document> docs;
    bool strict = cfg["data"].value("strict_ingest", false);
    for (const auto& entry : cfg["paths"]["corpus"]) {
        std::string file = entry.at("file").get<std::string>();
        auto kind = ganita::source_kind_from_string(entry.at("source_kind").get<std::string>());
        std::ifstream f(file);
        if (!f) throw ganita::DataError("cannot read corpus file: " + file);
        auto result = ganita::ingest(f, kind, strict);
        for (const auto& e : result.errors)
            std::cerr << file << ":" << e.line << ": skipped malformed record: " << e.message
                      << "\n";
        if (result.dropped_empty > 0)
            std::cerr << file << ": dropped " << result.dropped_empty << " empty records\n";
        for (auto& d : result.documents) docs.push_back(std::move(d));
    }
    // templatized QA pairs join the pretraining mix as gsm8k_train docs
    std::string qa_path = cfg["paths"].value("qa_train", "");
    if (!qa_path.empty()) {
        std::ifstream f(qa_path);
        if (!f) throw ganita::DataError("cannot read qa file: " + qa_path);
        auto pairs = ganita::ingest_qa(f, strict);
        size_t i = 0;
        for (const auto& p : pairs)
            docs.push_back({"gsm8k_train/" + std::to_string(i++), ganita::SourceKind::gsm8k_train,
                            ganita::template_qa(p)});
    }
    return docs;
}

ganita::PackOptions pack_options(const json& cfg) {
    ganita::PackOptions opts;
    std::set<ganita::SourceKind> excluded;
    for (const auto& k : cfg["data"]["exclude_kinds"])
        excluded.insert(ganita::source_kind_from_string(k.get<std::string>()));
    for (ganita::SourceKind k :
         {ganita::SourceKind::textbook, ganita::SourceKind::lecture_notes,
          ganita::SourceKind::web_math, ganita::SourceKind::code, ganita::SourceKind::qa_forum,
          ganita::SourceKind::arxiv, ganita::SourceKind::gsm8k_train})
        if (!excluded.count(k)) opts.include.insert(k);
    for (auto it = cfg["data"]["repeat"].begin(); it != cfg["data"]["repeat"].end(); ++it)
        opts.repeat[ganita::source_kind_from_string(it.key())] = it.value().get<int>();
    return opts;
}

std::vector<std::string> special_names(const json& cfg) {
    std::vector<std::string> names;
    for (const auto& s : cfg["tokenizer"]["special_tokens"]) names.push_back(s.get<std::string>());
    return names;
}

int cmd_train_tokenizer(const json& cfg) {
    auto docs = load_corpus_docs(cfg);
    if (docs.empty()) throw ganita::DataError("train-tokenizer: no input documents");
    std::vector<std::string> texts;
    for (const auto& d : docs) texts.push_back(d.text);
    auto model = ganita::train_tokenizer(texts, cfg["tokenizer"]["vocab_size"].get<int>(),
                                         special_names(cfg));
    std::string path = cfg["paths"]["tokenizer"].get<std::string>();
    fs::create_directories(fs::path(path).parent_path().string().empty()
                               ? "."
                               : fs::path(path).parent_path().string());
    model.save(path);
    freeze_config(cfg, fs::path(path).parent_path().string().empty()
                           ? "."
                           : fs::path(path).parent_path().string(),
                  "train-tokenizer");
    std::cout << "tokenizer: vocab_size=" << model.vocab_size()
              << " merges=" << model.merges().size()
              << " specials=" << model.special_tokens().size() << " -> " << path << "\n";
    return 0;
}

int cmd_prepare_data(const json& cfg) {
    auto tokenizer = ganita::TokenizerModel::load(cfg["paths"]["tokenizer"].get<std::string>());
    auto docs = load_corpus_docs(cfg);
    if (docs.empty()) throw ganita::DataError("prepare-data: no input documents");

    auto manifest = ganita::split_train_val(docs, cfg["data"]["split_ratio"].get<double>(),
                                            cfg["data"]["split_seed"].get<uint64_t>());
    std::set<std::string> val_ids(manifest.val_ids.begin(), manifest.val_ids.end());
    std::vector<ganita::Document> train_docs, val_docs;
    for (auto& d : docs) (val_ids.count(d.id) ? val_docs : train_docs).push_back(d);

    size_t context_length = cfg["model"]["context_length"].get<size_t>();
    auto opts = pack_options(cfg);
    auto train_seqs = ganita::pack_sequences(train_docs, tokenizer, context_length, opts);
    auto val_seqs = ganita::pack_sequences(val_docs, tokenizer, context_length, opts);

    std::string dir = cfg["paths"]["shards_dir"].get<std::string>();
    fs::create_directories(dir);
    uint32_t vocab = static_cast<uint32_t>(tokenizer.vocab_size());
    ganita::write_shard(dir + "/train.gpkd", static_cast<uint32_t>(context_length), vocab,
                        train_seqs);
    ganita::write_shard(dir + "/val.gpkd", static_cast<uint32_t>(context_length), vocab, val_seqs);

    // separate fine-tuning shard from the templatized QA documents only
    std::vector<ganita::Document> qa_docs;
    for (auto& d : docs)
        if (d.source_kind == ganita::SourceKind::gsm8k_train) qa_docs.push_back(d);
    if (!qa_docs.empty()) {
        auto ft_seqs = ganita::pack_sequences(qa_docs, tokenizer, context_length, {});
        ganita::write_shard(dir + "/finetune.gpkd", static_cast<uint32_t>(context_length), vocab,
                            ft_seqs);
    }

    std::ofstream mf(dir + "/split_manifest.json");
    mf << manifest.to_json().dump(2) << "\n";
    freeze_config(cfg, dir, "prepare-data");
    std::cout << "prepare-data: train_docs=" << manifest.train_ids.size()
              << " val_docs=" << manifest.val_ids.size() << " train_seqs=" << train_seqs.size()
              << " val_seqs=" << val_seqs.size() << " -> " << dir << "\n";
    return 0;
}

ganita::TrainOptions train_options(const json& cfg, const std::string& out_dir) {
    ganita::TrainOptions opts;
    opts.out_dir = out_dir;
    opts.deterministic = cfg.value("deterministic", false);
    if (opts.deterministic) ganita::set_blas_threads(1);
    opts.on_metrics = [](const ganita::MetricsRecord& r) {
        std::cout << "step " << r.step << " train_loss " << r.train_loss << " val_loss "
                  << r.val_loss << " val_ppl " << r.val_perplexity << " tok/s " << r.tokens_per_sec
                  << " mfu " << r.mfu_fraction << "\n";
    };
    return opts;
}

int cmd_pretrain(const json& cfg, const std::string& resume_path) {
    std::string dir = cfg["paths"]["shards_dir"].get<std::string>();
    auto train_shard = ganita::read_shard(dir + "/train.gpkd");
    auto val_shard = ganita::read_shard(dir + "/val.gpkd");
    auto mc = ganita::ModelConfig::from_json(cfg["model"]);
    if (train_shard.context_length != static_cast<uint32_t>(mc.context_length))
        throw ganita::DataError("pretrain: shard context_length does not match model config");
    if (train_shard.vocab_size > static_cast<uint32_t>(mc.vocab_size))
        throw ganita::DataError("pretrain: shard vocab exceeds model vocab_size");
    auto tc = ganita::TrainConfig::from_json(cfg["train"]);

    std::string ckpt_dir = cfg["paths"]["checkpoint_dir"].get<std::string>();
    fs::create_directories(ckpt_dir);
    freeze_config(cfg, ckpt_dir, "pretrain");
    auto opts = train_options(cfg, ckpt_dir);

    ganita::Checkpoint ck;
    std::vector<ganita::MetricsRecord> metrics;
    if (!resume_path.empty()) {
        ck = ganita::load_checkpoint(resume_path);
        metrics = ganita::train_run(ck, train_shard.sequences, val_shard.sequences, tc, tc.steps,
                                    opts);
    } else {
        auto [ck2, m] =
            ganita::pretrain(ganita::init_model(mc), train_shard.sequences, val_shard.sequences,
                             tc, opts);
        ck = std::move(ck2);
        metrics = std::move(m);
    }
    ganita::save_checkpoint(ck, ckpt_dir + "/final.gckp");
    ganita::write_metrics_jsonl(metrics, cfg["paths"]["metrics"].get<std::string>());
    std::cout << "pretrain: " << ck.step << " steps, checkpoint -> " << ckpt_dir << "/final.gckp\n";
    return 0;
}

int cmd_finetune(const json& cfg, const std::string& ckpt_path) {
    std::string dir = cfg["paths"]["shards_dir"].get<std::string>();
    auto ft_shard = ganita::read_shard(dir + "/finetune.gpkd");
    std::string ckpt_dir = cfg["paths"]["checkpoint_dir"].get<std::string>();
    std::string in_path = ckpt_path.empty() ? ckpt_dir + "/final.gckp" : ckpt_path;
    auto ck = ganita::load_checkpoint(in_path);
    auto tc = ganita::TrainConfig::from_json(cfg["train"]);
    int epochs = cfg["finetune"].value("epochs", 2);

    fs::create_directories(ckpt_dir);
    freeze_config(cfg, ckpt_dir, "finetune");
    auto opts = train_options(cfg, ckpt_dir);
    auto metrics = ganita::finetune(ck, ft_shard.sequences, epochs, tc, {}, opts);
    ganita::save_checkpoint(ck, ckpt_dir + "/finetuned.gckp");
    std::cout << "finetune: " << epochs << " epochs (" << metrics.size()
              << " metric records), checkpoint -> " << ckpt_dir << "/finetuned.gckp\n";
    return 0;
}

int cmd_perplexity(const json& cfg, const std::string& ckpt_path) {
    std::string dir = cfg["paths"]["shards_dir"].get<std::string>();
    auto val_shard = ganita::read_shard(dir + "/val.gpkd");
    std::string ckpt_dir = cfg["paths"]["checkpoint_dir"].get<std::string>();
    std::string in_path = ckpt_path.empty() ? ckpt_dir + "/final.gckp" : ckpt_path;
    auto ck = ganita::load_checkpoint(in_path);
    double ppl = ganita::perplexity(ck.model, val_shard.sequences);
    std::cout << "val_perplexity " << std::setprecision(10) << ppl << "\n";
    return 0;
}

int cmd_eval_gsm8k(const json& cfg, const std::string& ckpt_path) {
    std::string eval_path = cfg["paths"]["eval_data"].get<std::string>();
    std::ifstream ef(eval_path);
    if (!ef) throw ganita::DataError("cannot read eval data: " + eval_path);
    auto items = ganita::load_eval_items(ef);
    int limit = cfg["eval"].value("limit", 0);
    if (limit > 0 && items.size() > static_cast<size_t>(limit)) items.resize(limit);

    ganita::EvalOptions eopts;
    if (cfg["eval"].value("extractor", "last_number") == std::string("answer_is"))
        eopts.extractor = ganita::Extractor::answer_is;

    ganita::CompletionBackend backend;
    std::string backend_kind = cfg["eval"].value("backend", "model");
    if (backend_kind == "script") {
        // scripted completions keyed by prompt order, for harness testing
        std::ifstream sf(cfg["eval"]["script_completions"].get<std::string>());
        if (!sf) throw ganita::DataError("cannot read script completions");
        auto completions = std::make_shared<std::vector<std::string>>();
        std::string line;
        while (std::getline(sf, line))
            completions->push_back(json::parse(line).at("completion").get<std::string>());
        auto idx = std::make_shared<size_t>(0);
        backend = [completions, idx](const std::string&) {
            if (*idx >= completions->size())
                throw ganita::DataError("script backend exhausted");
            return (*completions)[(*idx)++];
        };
    } else {
        std::string ckpt_dir = cfg["paths"]["checkpoint_dir"].get<std::string>();
        std::string in_path = ckpt_path.empty() ? ckpt_dir + "/finetuned.gckp" : ckpt_path;
        if (ckpt_path.empty() && !fs::exists(in_path)) in_path = ckpt_dir + "/final.gckp";
        auto ck = std::make_shared<ganita::Checkpoint>(ganita::load_checkpoint(in_path));
        auto tokenizer = std::make_shared<ganita::TokenizerModel>(
            ganita::TokenizerModel::load(cfg["paths"]["tokenizer"].get<std::string>()));
        int max_new = cfg["eval"].value("max_new_tokens", 512);
        ganita::GenerateOptions gopts;
        gopts.greedy = cfg["eval"].value("mode", "greedy") == std::string("greedy");
        gopts.temperature = cfg["eval"].value("temperature", 0.8);
        gopts.seed = cfg["eval"].value("seed", 0);
        backend = [ck, tokenizer, max_new, gopts](const std::string& prompt) mutable {
            auto prompt_ids = tokenizer->encode(prompt);
            int budget = std::min<int>(max_new, ck->model.config.context_length -
                                                    static_cast<int>(prompt_ids.size()));
            if (budget <= 0) throw ganita::DataError("prompt exceeds context window");
            auto opts = gopts;
            opts.should_stop = [tokenizer, &prompt_ids](const ganita::TokenIdSeq& seq) {
                ganita::TokenIdSeq tail(seq.begin() + static_cast<long>(prompt_ids.size()),
                                        seq.end());
                return tokenizer->decode(tail).find("### Q:") != std::string::npos;
            };
            auto out = ganita::generate(ck->model, prompt_ids, budget, opts);
            ganita::TokenIdSeq completion_ids(out.begin() + static_cast<long>(prompt_ids.size()),
                                              out.end());
            return tokenizer->decode(completion_ids);
        };
    }

    auto report = ganita::evaluate_pass1(backend, items, eopts);
    std::string report_path = cfg["paths"]["eval_report"].get<std::string>();
    std::string out_dir = fs::path(report_path).parent_path().string();
    if (out_dir.empty()) out_dir = ".";
    fs::create_directories(out_dir);
    std::ofstream rf(report_path);
    rf << report.to_json().dump(2) << "\n";
    freeze_config(cfg, out_dir, "eval-gsm8k");
    std::cout << "pass_at_1 " << report.pass_at_1 << " (" << report.n_correct << "/"
              << report.n_items << ")" << (report.degraded ? " DEGRADED" : "") << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"ganita: small math language model pipeline"};
    app.require_subcommand(1);

    Cli cli;
    app.add_option("--config", cli.config_path, "JSON config file (env GANITA_CONFIG)");
    app.add_option("--override", cli.overrides, "config override key=value (repeatable)");
    app.add_option("--seed", cli.seed, "override all seeds");
    app.add_flag("--deterministic", cli.deterministic, "bit-deterministic mode");

    std::string resume_path, ckpt_path;
    auto* c_tok = app.add_subcommand("train-tokenizer", "train the BPE tokenizer");
    auto* c_prep = app.add_subcommand("prepare-data", "ingest, template, split and pack shards");
    auto* c_pre = app.add_subcommand("pretrain", "pretrain from scratch (or resume)");
    c_pre->add_option("--resume", resume_path, "checkpoint to resume from");
    auto* c_ft = app.add_subcommand("finetune", "fine-tune on the packed QA shard");
    c_ft->add_option("--checkpoint", ckpt_path, "checkpoint to start from");
    auto* c_ppl = app.add_subcommand("perplexity", "validation perplexity of a checkpoint");
    c_ppl->add_option("--checkpoint", ckpt_path, "checkpoint to evaluate");
    auto* c_eval = app.add_subcommand("eval-gsm8k", "GSM8k Pass@1 evaluation");
    c_eval->add_option("--checkpoint", ckpt_path, "checkpoint to evaluate");

    // global options remain valid after the subcommand name
    for (auto* sub : app.get_subcommands({})) sub->fallthrough();

    CLI11_PARSE(app, argc, argv);

    try {
        json cfg = cli.load();
        if (c_tok->parsed()) return cmd_train_tokenizer(cfg);
        if (c_prep->parsed()) return cmd_prepare_data(cfg);
        if (c_pre->parsed()) return cmd_pretrain(cfg, resume_path);
        if (c_ft->parsed()) return cmd_finetune(cfg, ckpt_path);
        if (c_ppl->parsed()) return cmd_perplexity(cfg, ckpt_path);
        if (c_eval->parsed()) return cmd_eval_gsm8k(cfg, ckpt_path);
    } catch (const ganita::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const ganita::NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 4;
    } catch (const ganita::DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 0;
}
