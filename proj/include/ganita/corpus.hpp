#pragma once

// Corpus ingestion (JSONL records), CoT question/answer templating,
// seeded train/validation split, and fixed-context sequence packing
// with binary shard IO.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "ganita/common.hpp"
#include "ganita/tokenizer.hpp"

namespace ganita {

enum class SourceKind {
    textbook,
    lecture_notes,
    web_math,
    code,
    qa_forum,
    arxiv,
    gsm8k_train,
};

inline const char* to_string(SourceKind k) {
    switch (k) {
        case SourceKind::textbook: return "textbook";
        case SourceKind::lecture_notes: return "lecture_notes";
        case SourceKind::web_math: return "web_math";
        case SourceKind::code: return "code";
        case SourceKind::qa_forum: return "qa_forum";
        case SourceKind::arxiv: return "arxiv";
        case SourceKind::gsm8k_train: return "gsm8k_train";
    }
    throw ConfigError("invalid source kind");
}

inline SourceKind source_kind_from_string(const std::string& s) {
    for (SourceKind k : {SourceKind::textbook, SourceKind::lecture_notes, SourceKind::web_math,
                         SourceKind::code, SourceKind::qa_forum, SourceKind::arxiv,
                         SourceKind::gsm8k_train})
        if (s == to_string(k)) return k;
    throw DataError("unknown source_kind: " + s);
}

struct Document {
    std::string id;
    SourceKind source_kind;
    std::string text;  // non-empty
};

struct QAPair {
    std::string question;
    std::string answer;
};

struct IngestError {
    size_t line;
    std::string message;
};

struct IngestResult {
    std::vector<Document> documents;
    size_t dropped_empty = 0;
    std::vector<IngestError> errors;
};

// Newline-delimited records, one JSON object {id, text} (and optionally
// source_kind, which overrides the stamped kind) per line. Lenient mode
// records per-line errors and continues; strict mode throws on the first.
inline IngestResult ingest(std::istream& in, SourceKind kind, bool strict = false) {
    IngestResult result;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            auto j = nlohmann::json::parse(line);
            Document d;
            d.id = j.at("id").get<std::string>();
            d.text = j.at("text").get<std::string>();
            d.source_kind = j.contains("source_kind")
                                ? source_kind_from_string(j.at("source_kind").get<std::string>())
                                : kind;
            if (d.text.empty()) {
                ++result.dropped_empty;
                continue;
            }
            result.documents.push_back(std::move(d));
        } catch (const std::exception& e) {
            if (strict) throw DataError("line " + std::to_string(lineno) + ": " + e.what());
            result.errors.push_back({lineno, e.what()});
        }
    }
    return result;
}

inline std::vector<QAPair> ingest_qa(std::istream& in, bool strict = false,
                                     std::vector<IngestError>* errors = nullptr) {
    std::vector<QAPair> pairs;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            auto j = nlohmann::json::parse(line);
            QAPair p{j.at("question").get<std::string>(), j.at("answer").get<std::string>()};
            if (p.question.empty() || p.answer.empty())
                throw DataError("empty question or answer");
            pairs.push_back(std::move(p));
        } catch (const std::exception& e) {
            if (strict) throw DataError("line " + std::to_string(lineno) + ": " + e.what());
            if (errors) errors->push_back({lineno, e.what()});
        }
    }
    return pairs;
}

// Canonical instruction template. The eval prompt is a strict prefix of
// the full QA template, byte for byte.
inline std::string build_eval_prompt(const std::string& question) {
    return "Below is an instruction that describes a task.\n"
           "Write a response that appropriately completes the request.\n"
           "### Q:" + question + "\n### A: Let's think step by step. ";
}

inline std::string template_qa(const QAPair& pair) {
    return build_eval_prompt(pair.question) + pair.answer;
}

struct SplitManifest {
    uint64_t seed = 0;
    double ratio = 0.0;
    std::vector<std::string> train_ids;
    std::vector<std::string> val_ids;

    nlohmann::json to_json() const {
        return {{"seed", seed}, {"ratio", ratio}, {"train_ids", train_ids}, {"val_ids", val_ids}};
    }
    static SplitManifest from_json(const nlohmann::json& j) {
        SplitManifest m;
        m.seed = j.at("seed").get<uint64_t>();
        m.ratio = j.at("ratio").get<double>();
        m.train_ids = j.at("train_ids").get<std::vector<std::string>>();
        m.val_ids = j.at("val_ids").get<std::vector<std::string>>();
        return m;
    }
};

// Document-level split: seeded permutation, validation gets
// round((1-ratio)*n) documents, the rest train.
inline SplitManifest split_train_val(const std::vector<Document>& docs, double ratio,
                                     uint64_t seed) {
    if (docs.empty()) throw DataError("split_train_val: no documents");
    if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("split_train_val: ratio must be in (0,1)");
    std::vector<size_t> order(docs.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    seeded_shuffle(order, seed);
    size_t n_val = static_cast<size_t>(std::llround((1.0 - ratio) * static_cast<double>(docs.size())));
    size_t n_train = docs.size() - n_val;
    SplitManifest m;
    m.seed = seed;
    m.ratio = ratio;
    for (size_t i = 0; i < order.size(); ++i)
        (i < n_train ? m.train_ids : m.val_ids).push_back(docs[order[i]].id);
    return m;
}

struct PackOptions {
    // Kinds admitted into the token stream; empty set means "all kinds".
    std::set<SourceKind> include;
    // Optional per-kind repetition factor (>=1); defaults to 1.
    std::map<SourceKind, int> repeat;
};

// Encodes surviving documents, appends one separator token after each,
// and cuts the stream into consecutive windows of context_length tokens.
// The final partial window is dropped.
inline std::vector<TokenIdSeq> pack_sequences(const std::vector<Document>& docs,
                                              const TokenizerModel& tokenizer,
                                              size_t context_length,
                                              const PackOptions& opts = {},
                                              const std::string& separator_name = "<|sep|>") {
    if (context_length < 2) throw ConfigError("pack_sequences: context_length must be >= 2");
    TokenId sep = tokenizer.special_id(separator_name);
    std::vector<TokenIdSeq> out;
    TokenIdSeq window;
    window.reserve(context_length);
    for (const auto& doc : docs) {
        if (!opts.include.empty() && !opts.include.count(doc.source_kind)) continue;
        int reps = 1;
        if (auto it = opts.repeat.find(doc.source_kind); it != opts.repeat.end()) reps = it->second;
        TokenIdSeq ids = tokenizer.encode(doc.text);
        ids.push_back(sep);
        for (int r = 0; r < reps; ++r) {
            for (TokenId id : ids) {
                window.push_back(id);
                if (window.size() == context_length) {
                    out.push_back(window);
                    window.clear();
                }
            }
        }
    }
    return out;  // trailing partial window in `window` is dropped
}

// ----- packed shard files: magic "GPKD", version, context_length,
// vocab_size, then raw little-endian 32-bit token ids -----

constexpr uint32_t kShardVersion = 1;

inline void write_shard(const std::string& path, uint32_t context_length, uint32_t vocab_size,
                        const std::vector<TokenIdSeq>& seqs) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write shard: " + path);
    f.write("GPKD", 4);
    auto put_u32 = [&f](uint32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); };
    put_u32(kShardVersion);
    put_u32(context_length);
    put_u32(vocab_size);
    for (const auto& s : seqs) {
        if (s.size() != context_length) throw DataError("shard sequence length mismatch");
        f.write(reinterpret_cast<const char*>(s.data()),
                static_cast<std::streamsize>(s.size() * sizeof(TokenId)));
    }
    if (!f) throw DataError("short write to shard: " + path);
}

struct Shard {
    uint32_t context_length = 0;
    uint32_t vocab_size = 0;
    std::vector<TokenIdSeq> sequences;
};

inline Shard read_shard(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot read shard: " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::string(magic, 4) != "GPKD") throw DataError("shard: bad magic in " + path);
    auto get_u32 = [&f, &path]() {
        uint32_t v;
        f.read(reinterpret_cast<char*>(&v), 4);
        if (!f) throw DataError("shard: truncated header in " + path);
        return v;
    };
    uint32_t version = get_u32();
    if (version != kShardVersion) throw DataError("shard: unsupported version in " + path);
    Shard shard;
    shard.context_length = get_u32();
    shard.vocab_size = get_u32();
    if (shard.context_length < 2) throw DataError("shard: invalid context_length in " + path);
    TokenIdSeq seq(shard.context_length);
    while (f.read(reinterpret_cast<char*>(seq.data()),
                  static_cast<std::streamsize>(seq.size() * sizeof(TokenId)))) {
        for (TokenId id : seq)
            if (id < 0 || static_cast<uint32_t>(id) >= shard.vocab_size)
                throw DataError("shard: token id out of range in " + path);
        shard.sequences.push_back(seq);
    }
    if (f.gcount() != 0) throw DataError("shard: truncated sequence data in " + path);
    return shard;
}

}  // namespace ganita
