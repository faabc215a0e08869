#pragma once

// Training loops (pretrain + finetune), AdamW with warmup/cosine decay,
// gradient clipping, perplexity and MFU instrumentation, and
// bit-deterministic checkpoint/resume.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <cstdint>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ganita/checkpoint.hpp"
#include "ganita/common.hpp"
#include "ganita/model.hpp"

namespace ganita {

struct TrainConfig {
    uint64_t steps = 1000;
    size_t batch_size = 8;
    uint64_t warmup_steps = 100;
    double lr_peak = 3e-4;
    double lr_decay_to = 3e-5;
    double grad_clip = 1.0;  // global norm; +inf disables clipping exactly
    uint64_t eval_interval = 100;
    uint64_t checkpoint_interval = 500;
    uint64_t seed = 0;
    double peak_flops_per_sec = 1e12;  // declared hardware peak for MFU
    double weight_decay = 0.1;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double adam_eps = 1e-8;

    void validate() const {
        if (batch_size == 0 || eval_interval == 0 || checkpoint_interval == 0)
            throw ConfigError("train config: intervals and batch_size must be positive");
        if (warmup_steps > steps) throw ConfigError("train config: warmup exceeds steps");
        if (lr_peak <= 0.0 || peak_flops_per_sec <= 0.0)
            throw ConfigError("train config: rates must be positive");
    }

    nlohmann::json to_json() const {
        return {{"steps", steps},
                {"batch_size", batch_size},
                {"warmup_steps", warmup_steps},
                {"lr_peak", lr_peak},
                {"lr_decay_to", lr_decay_to},
                {"grad_clip", std::isinf(grad_clip) ? -1.0 : grad_clip},
                {"eval_interval", eval_interval},
                {"checkpoint_interval", checkpoint_interval},
                {"seed", seed},
                {"peak_flops_per_sec", peak_flops_per_sec},
                {"weight_decay", weight_decay},
                {"beta1", beta1},
                {"beta2", beta2},
                {"adam_eps", adam_eps}};
    }
    static TrainConfig from_json(const nlohmann::json& j) {
        TrainConfig c;
        c.steps = j.value("steps", c.steps);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
        c.lr_peak = j.value("lr_peak", c.lr_peak);
        c.lr_decay_to = j.value("lr_decay_to", c.lr_decay_to);
        double clip = j.value("grad_clip", c.grad_clip);
        c.grad_clip = clip < 0.0 ? std::numeric_limits<double>::infinity() : clip;
        c.eval_interval = j.value("eval_interval", c.eval_interval);
        c.checkpoint_interval = j.value("checkpoint_interval", c.checkpoint_interval);
        c.seed = j.value("seed", c.seed);
        c.peak_flops_per_sec = j.value("peak_flops_per_sec", c.peak_flops_per_sec);
        c.weight_decay = j.value("weight_decay", c.weight_decay);
        c.beta1 = j.value("beta1", c.beta1);
        c.beta2 = j.value("beta2", c.beta2);
        c.adam_eps = j.value("adam_eps", c.adam_eps);
        return c;
    }
};

struct MetricsRecord {
    uint64_t step = 0;
    uint64_t tokens_seen = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double val_perplexity = 0.0;
    double tokens_per_sec = 0.0;
    double mfu_fraction = 0.0;

    nlohmann::json to_json() const {
        return {{"step", step},
                {"tokens_seen", tokens_seen},
                {"train_loss", train_loss},
                {"val_loss", val_loss},
                {"val_perplexity", val_perplexity},
                {"tokens_per_sec", tokens_per_sec},
                {"mfu_fraction", mfu_fraction}};
    }
};

// Training FLOPs per token: 6*N for parameter matmuls (fwd+bwd) plus the
// attention-score term 12*L*d*T.
inline double flops_per_token(const ModelConfig& cfg, int context_length) {
    double n_params = static_cast<double>(count_parameters(cfg));
    return 6.0 * n_params + 12.0 * static_cast<double>(cfg.n_layers) *
                                static_cast<double>(cfg.d_model) *
                                static_cast<double>(context_length);
}

inline double compute_mfu(double tokens_per_sec, double flops_per_tok, double peak_flops_per_sec) {
    if (peak_flops_per_sec <= 0.0) throw ConfigError("compute_mfu: peak must be positive");
    return tokens_per_sec * flops_per_tok / peak_flops_per_sec;
}

// Mean next-token loss over all supervised validation positions.
inline double eval_loss(const ModelState& model, const std::vector<TokenIdSeq>& seqs,
                        size_t batch_size = 8) {
    if (seqs.empty()) throw DataError("eval_loss: empty validation set");
    double total = 0.0;
    size_t rows = 0;
    for (size_t i = 0; i < seqs.size(); i += batch_size) {
        size_t end = std::min(i + batch_size, seqs.size());
        std::vector<TokenIdSeq> batch(seqs.begin() + static_cast<long>(i),
                                      seqs.begin() + static_cast<long>(end));
        Logits lg = forward(model, batch);
        total += cross_entropy_loss(lg, batch) * static_cast<double>(end - i);
        rows += end - i;
    }
    return total / static_cast<double>(rows);
}

inline double perplexity(const ModelState& model, const std::vector<TokenIdSeq>& seqs,
                         size_t batch_size = 8) {
    return std::exp(eval_loss(model, seqs, batch_size));
}

inline double learning_rate_at(const TrainConfig& cfg, uint64_t step, uint64_t total_steps) {
    if (step <= cfg.warmup_steps && cfg.warmup_steps > 0)
        return cfg.lr_peak * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
    if (total_steps <= cfg.warmup_steps) return cfg.lr_peak;
    double progress = static_cast<double>(step - cfg.warmup_steps) /
                      static_cast<double>(total_steps - cfg.warmup_steps);
    return cfg.lr_decay_to +
           0.5 * (cfg.lr_peak - cfg.lr_decay_to) * (1.0 + std::cos(3.14159265358979323846 * progress));
}

namespace detail {

inline double global_grad_norm(const GradMap& grads) {
    double sq = 0.0;
    for (const auto& [name, g] : grads)
        for (double v : g.data) sq += v * v;
    return std::sqrt(sq);
}

inline void clip_gradients(GradMap& grads, double clip) {
    double norm = global_grad_norm(grads);
    if (norm > clip) {
        double scale = clip / norm;
        for (auto& [name, g] : grads)
            for (double& v : g.data) v *= scale;
    }
}

inline void adamw_update(ModelState& model, GradMap& m, GradMap& v, const GradMap& grads,
                         uint64_t t, double lr, const TrainConfig& cfg) {
    double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    for (auto& [name, param] : model.tensors) {
        const Tensor& g = grads.at(name);
        Tensor& mt = m.at(name);
        Tensor& vt = v.at(name);
        for (size_t i = 0; i < param.size(); ++i) {
            mt.data[i] = cfg.beta1 * mt.data[i] + (1.0 - cfg.beta1) * g.data[i];
            vt.data[i] = cfg.beta2 * vt.data[i] + (1.0 - cfg.beta2) * g.data[i] * g.data[i];
            double mhat = mt.data[i] / bc1;
            double vhat = vt.data[i] / bc2;
            param.data[i] -=
                lr * (mhat / (std::sqrt(vhat) + cfg.adam_eps) + cfg.weight_decay * param.data[i]);
        }
    }
}

// Sequence index for a given cursor position: a fresh seeded permutation
// per epoch, derived from (data_seed, epoch) so any cursor value alone
// reconstructs the stream.
inline size_t sequence_at(uint64_t cursor, size_t n, uint64_t data_seed) {
    uint64_t epoch = cursor / n;
    uint64_t pos = cursor % n;
    std::vector<size_t> order(n);
    for (size_t i = 0; i < n; ++i) order[i] = i;
    seeded_shuffle(order, data_seed + 0x9e3779b97f4a7c15ULL * (epoch + 1));
    return order[pos];
}

}  // namespace detail

struct TrainOptions {
    std::string out_dir;        // empty disables checkpoint/metrics files
    bool deterministic = false; // zeroes wall-clock throughput fields
    bool epoch_aligned = false; // batches never span an epoch boundary
    std::function<void(const MetricsRecord&)> on_metrics;
};

// Advances `ck` to `target_steps` optimizer steps. Shared by pretrain,
// finetune and resume; fully deterministic given the checkpoint state.
inline std::vector<MetricsRecord> train_run(Checkpoint& ck, const std::vector<TokenIdSeq>& train,
                                            const std::vector<TokenIdSeq>& val,
                                            const TrainConfig& cfg, uint64_t target_steps,
                                            const TrainOptions& opts = {}) {
    cfg.validate();
    if (train.empty()) throw DataError("train_run: no training sequences");
    const ModelConfig& mc = ck.model.config;
    for (const auto& s : train)
        if (s.size() != static_cast<size_t>(mc.context_length))
            throw DataError("train_run: shard context_length does not match model");

    if (ck.adam_m.empty()) {
        ck.adam_m = zero_gradients(mc);
        ck.adam_v = zero_gradients(mc);
    }

    std::vector<MetricsRecord> metrics;
    GradMap grads = zero_gradients(mc);
    size_t n = train.size();
    double fpt = flops_per_token(mc, mc.context_length);

    auto interval_start = std::chrono::steady_clock::now();
    uint64_t interval_tokens = 0;

    auto emit = [&](uint64_t step, double train_loss) {
        MetricsRecord r;
        r.step = step;
        r.tokens_seen = ck.tokens_seen;
        r.train_loss = train_loss;
        r.val_loss = val.empty() ? 0.0 : eval_loss(ck.model, val, cfg.batch_size);
        r.val_perplexity = val.empty() ? 1.0 : std::exp(r.val_loss);
        if (!opts.deterministic) {
            auto now = std::chrono::steady_clock::now();
            double secs = std::chrono::duration<double>(now - interval_start).count();
            r.tokens_per_sec = secs > 0.0 ? static_cast<double>(interval_tokens) / secs : 0.0;
            r.mfu_fraction =
                std::clamp(compute_mfu(r.tokens_per_sec, fpt, cfg.peak_flops_per_sec), 0.0, 1.0);
        }
        metrics.push_back(r);
        if (opts.on_metrics) opts.on_metrics(r);
        interval_start = std::chrono::steady_clock::now();
        interval_tokens = 0;
    };

    while (ck.step < target_steps) {
        size_t want = cfg.batch_size;
        if (opts.epoch_aligned) {
            size_t left_in_epoch = n - static_cast<size_t>(ck.data_cursor % n);
            want = std::min(want, left_in_epoch);
        }
        std::vector<TokenIdSeq> batch;
        batch.reserve(want);
        for (size_t i = 0; i < want; ++i) {
            batch.push_back(train[detail::sequence_at(ck.data_cursor, n, ck.data_seed)]);
            ++ck.data_cursor;
        }

        for (auto& [name, g] : grads) g.fill(0.0);

        double loss = loss_and_gradients(ck.model, batch, grads);
        ck.tokens_seen += batch.size() * batch[0].size();
        interval_tokens += batch.size() * batch[0].size();

        if (!std::isfinite(loss)) {
            if (!opts.out_dir.empty())
                save_checkpoint(ck, opts.out_dir + "/diagnostic.gckp");
            MetricsRecord r;
            r.step = ck.step + 1;
            r.tokens_seen = ck.tokens_seen;
            r.train_loss = loss;
            if (opts.on_metrics) opts.on_metrics(r);
            throw NumericError("train_run: non-finite loss at step " + std::to_string(ck.step + 1));
        }

        detail::clip_gradients(grads, cfg.grad_clip);
        ++ck.adam_step;
        // schedule horizon is cfg.steps, never the resume target, so a
        // resumed run replays the exact same learning rates
        double lr = learning_rate_at(cfg, ck.step + 1, cfg.steps);
        detail::adamw_update(ck.model, ck.adam_m, ck.adam_v, grads, ck.adam_step, lr, cfg);
        ++ck.step;

        if (ck.step % cfg.eval_interval == 0 || ck.step == target_steps) emit(ck.step, loss);
        if (!opts.out_dir.empty() && ck.step % cfg.checkpoint_interval == 0)
            save_checkpoint(ck, opts.out_dir + "/step_" + std::to_string(ck.step) + ".gckp");
    }
    return metrics;
}

// Pretraining from a fresh model state.
inline std::pair<Checkpoint, std::vector<MetricsRecord>> pretrain(
    ModelState model, const std::vector<TokenIdSeq>& train, const std::vector<TokenIdSeq>& val,
    const TrainConfig& cfg, const TrainOptions& opts = {}) {
    Checkpoint ck;
    ck.model = std::move(model);
    ck.data_seed = cfg.seed;
    ck.rng_state = Rng(cfg.seed).serialize();
    auto metrics = train_run(ck, train, val, cfg, cfg.steps, opts);
    return {std::move(ck), std::move(metrics)};
}

// Continues training for exactly `epochs` full passes over the packed
// fine-tuning sequences: ceil(N / batch) steps per epoch, batches never
// spanning an epoch boundary.
inline std::vector<MetricsRecord> finetune(Checkpoint& ck, const std::vector<TokenIdSeq>& qa_seqs,
                                           int epochs, const TrainConfig& cfg,
                                           const std::vector<TokenIdSeq>& val = {},
                                           TrainOptions opts = {}) {
    if (epochs < 0) throw ConfigError("finetune: negative epoch count");
    if (epochs == 0) return {};
    if (qa_seqs.empty()) throw DataError("finetune: no fine-tuning sequences");
    uint64_t steps_per_epoch =
        (qa_seqs.size() + cfg.batch_size - 1) / cfg.batch_size;
    uint64_t target = ck.step + steps_per_epoch * static_cast<uint64_t>(epochs);
    opts.epoch_aligned = true;
    // fine-tuning owns a fresh data stream over the QA sequences and its
    // own schedule horizon ending at the final fine-tuning step
    ck.data_cursor = 0;
    ck.data_seed = cfg.seed;
    TrainConfig fcfg = cfg;
    fcfg.steps = target;
    fcfg.warmup_steps = std::min(cfg.warmup_steps, ck.step + 1);
    return train_run(ck, qa_seqs, val, fcfg, target, opts);
}

inline void write_metrics_jsonl(const std::vector<MetricsRecord>& metrics,
                                const std::string& path) {
    std::ofstream f(path);
    if (!f) throw DataError("cannot write metrics log: " + path);
    for (const auto& r : metrics) f << r.to_json().dump() << "\n";
}

}  // namespace ganita
