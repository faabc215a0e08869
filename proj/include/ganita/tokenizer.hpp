#pragma once

// Byte-level BPE tokenizer: trainer, lossless encode/decode, and a
// versioned text artifact format.
//
// Token id layout: ids 0..255 are the raw bytes, merged tokens follow in
// training order, special tokens sit above all merged ids.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "ganita/common.hpp"

namespace ganita {

using TokenId = int32_t;
using TokenIdSeq = std::vector<TokenId>;

constexpr int kByteVocab = 256;

struct Merge {
    TokenId left;
    TokenId right;
    TokenId result;
};

struct SpecialToken {
    std::string name;  // the literal marker string, e.g. "<|sep|>"
    TokenId id;
};

class TokenizerModel {
  public:
    TokenizerModel() = default;
    TokenizerModel(std::vector<Merge> merges, std::vector<SpecialToken> specials)
        : merges_(std::move(merges)), specials_(std::move(specials)) {
        rebuild_tables();
        validate();
    }

    int vocab_size() const { return kByteVocab + static_cast<int>(merges_.size() + specials_.size()); }
    const std::vector<Merge>& merges() const { return merges_; }
    const std::vector<SpecialToken>& special_tokens() const { return specials_; }

    TokenId special_id(const std::string& name) const {
        for (const auto& s : specials_)
            if (s.name == name) return s.id;
        throw ConfigError("unknown special token: " + name);
    }

    bool is_special(TokenId id) const {
        return id >= kByteVocab + static_cast<TokenId>(merges_.size()) && id < vocab_size();
    }

    // Applies merges exhaustively in training order (lowest merge rank
    // first). parse_specials=true additionally recognizes the literal
    // marker strings of special tokens and emits their ids.
    TokenIdSeq encode(const std::string& text, bool parse_specials = false) const {
        if (!parse_specials || specials_.empty()) return encode_bytes(text);
        TokenIdSeq out;
        size_t pos = 0;
        while (pos < text.size()) {
            size_t best_at = std::string::npos;
            const SpecialToken* best = nullptr;
            for (const auto& s : specials_) {
                size_t at = text.find(s.name, pos);
                if (at != std::string::npos && (best == nullptr || at < best_at)) {
                    best_at = at;
                    best = &s;
                }
            }
            if (best == nullptr) {
                append(out, encode_bytes(text.substr(pos)));
                break;
            }
            append(out, encode_bytes(text.substr(pos, best_at - pos)));
            out.push_back(best->id);
            pos = best_at + best->name.size();
        }
        return out;
    }

    // Concatenates each token's byte expansion. Special tokens expand to
    // their marker strings. The output is a raw byte string, so arbitrary
    // (even invalid UTF-8) input round-trips exactly.
    std::string decode(const TokenIdSeq& ids) const {
        std::string out;
        for (TokenId id : ids) {
            if (id < 0 || id >= vocab_size())
                throw DataError("decode: token id " + std::to_string(id) + " out of range");
            out += expansions_[static_cast<size_t>(id)];
        }
        return out;
    }

    // ----- artifact file (versioned text format) -----

    void save(const std::string& path) const {
        std::ofstream f(path, std::ios::binary);
        if (!f) throw DataError("cannot write tokenizer artifact: " + path);
        f << "ganita-bpe 1 " << vocab_size() << "\n";
        for (const auto& s : specials_) f << "special " << s.id << " " << s.name << "\n";
        for (const auto& m : merges_) f << "merge " << m.left << " " << m.right << " " << m.result << "\n";
    }

    static TokenizerModel load(const std::string& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw DataError("cannot read tokenizer artifact: " + path);
        std::string tag;
        int version = 0, vocab = 0;
        f >> tag >> version >> vocab;
        if (tag != "ganita-bpe") throw DataError("tokenizer artifact: bad header");
        if (version != 1) throw DataError("tokenizer artifact: unsupported version");
        std::vector<Merge> merges;
        std::vector<SpecialToken> specials;
        std::string kind;
        while (f >> kind) {
            if (kind == "special") {
                SpecialToken s;
                f >> s.id >> s.name;
                specials.push_back(s);
            } else if (kind == "merge") {
                Merge m;
                f >> m.left >> m.right >> m.result;
                merges.push_back(m);
            } else {
                throw DataError("tokenizer artifact: unknown record '" + kind + "'");
            }
        }
        TokenizerModel model(std::move(merges), std::move(specials));
        if (model.vocab_size() != vocab)
            throw DataError("tokenizer artifact: vocab_size mismatch with header");
        return model;
    }

  private:
    std::vector<Merge> merges_;
    std::vector<SpecialToken> specials_;
    std::vector<std::string> expansions_;  // id -> byte expansion / marker

    static void append(TokenIdSeq& dst, const TokenIdSeq& src) {
        dst.insert(dst.end(), src.begin(), src.end());
    }

    TokenIdSeq encode_bytes(const std::string& text) const {
        TokenIdSeq ids;
        ids.reserve(text.size());
        for (unsigned char c : text) ids.push_back(static_cast<TokenId>(c));
        // Repeatedly apply the earliest-trained merge present anywhere in
        // the sequence; equivalent to applying merges in training order.
        while (ids.size() >= 2) {
            int best_rank = -1;
            for (size_t i = 0; i + 1 < ids.size(); ++i) {
                auto it = rank_.find(pair_key(ids[i], ids[i + 1]));
                if (it != rank_.end() && (best_rank < 0 || it->second < best_rank))
                    best_rank = it->second;
            }
            if (best_rank < 0) break;
            const Merge& m = merges_[static_cast<size_t>(best_rank)];
            TokenIdSeq next;
            next.reserve(ids.size());
            for (size_t i = 0; i < ids.size();) {
                if (i + 1 < ids.size() && ids[i] == m.left && ids[i + 1] == m.right) {
                    next.push_back(m.result);
                    i += 2;
                } else {
                    next.push_back(ids[i]);
                    ++i;
                }
            }
            ids.swap(next);
        }
        return ids;
    }

    static uint64_t pair_key(TokenId a, TokenId b) {
        return (static_cast<uint64_t>(static_cast<uint32_t>(a)) << 32) | static_cast<uint32_t>(b);
    }

    std::unordered_map<uint64_t, int> rank_;

    void rebuild_tables() {
        expansions_.clear();
        expansions_.reserve(static_cast<size_t>(vocab_size()));
        for (int b = 0; b < kByteVocab; ++b) expansions_.push_back(std::string(1, static_cast<char>(b)));
        rank_.clear();
        for (size_t i = 0; i < merges_.size(); ++i) {
            const Merge& m = merges_[i];
            if (m.left < 0 || m.right < 0 || m.left >= m.result || m.right >= m.result)
                throw DataError("tokenizer: merge operands must precede their result");
            expansions_.push_back(expansions_[static_cast<size_t>(m.left)] +
                                  expansions_[static_cast<size_t>(m.right)]);
            rank_[pair_key(m.left, m.right)] = static_cast<int>(i);
        }
        for (const auto& s : specials_) expansions_.push_back(s.name);
    }

    void validate() const {
        TokenId next = kByteVocab;
        for (const auto& m : merges_) {
            if (m.result != next)
                throw DataError("tokenizer: merge ids must be dense from 256");
            ++next;
        }
        for (const auto& s : specials_) {
            if (s.id != next)
                throw DataError("tokenizer: special ids must follow merges densely");
            if (s.name.empty()) throw DataError("tokenizer: special token name empty");
            ++next;
        }
    }

    friend TokenizerModel train_tokenizer(const std::vector<std::string>&, int,
                                          const std::vector<std::string>&);
};

// Greedy BPE training. Pair counts are per-document (no pair spans a
// document boundary); ties break on smallest (left id, right id).
// Counts are maintained incrementally across merges.
inline TokenizerModel train_tokenizer(const std::vector<std::string>& corpus,
                                      int target_vocab_size,
                                      const std::vector<std::string>& special_names) {
    if (corpus.empty()) throw DataError("train_tokenizer: empty corpus");
    int n_specials = static_cast<int>(special_names.size());
    if (target_vocab_size < kByteVocab + n_specials)
        throw ConfigError("train_tokenizer: target_vocab_size below 256 + specials");

    std::vector<TokenIdSeq> docs;
    docs.reserve(corpus.size());
    for (const auto& text : corpus) {
        TokenIdSeq ids;
        ids.reserve(text.size());
        for (unsigned char c : text) ids.push_back(static_cast<TokenId>(c));
        docs.push_back(std::move(ids));
    }

    std::map<std::pair<TokenId, TokenId>, int64_t> counts;
    for (const auto& d : docs)
        for (size_t i = 0; i + 1 < d.size(); ++i) ++counts[{d[i], d[i + 1]}];

    auto bump = [&counts](TokenId a, TokenId b, int64_t delta) {
        auto key = std::make_pair(a, b);
        auto it = counts.find(key);
        if (it == counts.end()) {
            if (delta > 0) counts[key] = delta;
            return;
        }
        it->second += delta;
        if (it->second <= 0) counts.erase(it);
    };

    std::vector<Merge> merges;
    int n_merges = target_vocab_size - kByteVocab - n_specials;
    for (int k = 0; k < n_merges; ++k) {
        // std::map iteration order gives the lexicographic tie-break.
        std::pair<TokenId, TokenId> best{};
        int64_t best_count = 0;
        for (const auto& [pair, count] : counts) {
            if (count > best_count) {
                best = pair;
                best_count = count;
            }
        }
        if (best_count < 2) break;  // no pair repeats; stop early

        TokenId result = kByteVocab + static_cast<TokenId>(merges.size());
        merges.push_back({best.first, best.second, result});

        for (auto& d : docs) {
            TokenIdSeq next;
            next.reserve(d.size());
            for (size_t i = 0; i < d.size();) {
                if (i + 1 < d.size() && d[i] == best.first && d[i + 1] == best.second) {
                    // local count fixup: pairs (prev,left),(left,right),
                    // (right,after) die; (prev,result),(result,after) appear.
                    // prev is already rewritten, after is not yet; a
                    // following merge site corrects its own left pair.
                    if (!next.empty()) {
                        bump(next.back(), best.first, -1);
                        bump(next.back(), result, +1);
                    }
                    bump(best.first, best.second, -1);
                    if (i + 2 < d.size()) {
                        bump(best.second, d[i + 2], -1);
                        bump(result, d[i + 2], +1);
                    }
                    next.push_back(result);
                    i += 2;
                } else {
                    next.push_back(d[i]);
                    ++i;
                }
            }
            d.swap(next);
        }
    }

    std::vector<SpecialToken> specials;
    TokenId next_id = kByteVocab + static_cast<TokenId>(merges.size());
    for (const auto& name : special_names) specials.push_back({name, next_id++});

    return TokenizerModel(std::move(merges), std::move(specials));
}

}  // namespace ganita
