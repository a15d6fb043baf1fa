#pragma once

// Shared optimization machinery: AdamW with decoupled weight decay, the
// cosine learning-rate schedule, a generic early-stopping training loop, and
// the versioned binary checkpoint container (JSON header + float64 blobs).

#include "liger/common.hpp"
#include "liger/data.hpp"
#include "liger/params.hpp"
#include "liger/rng.hpp"
#include "liger/tensor.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace liger {

// ----------------------------- AdamW -----------------------------

struct AdamWConfig {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.035;
};

class AdamW {
public:
    AdamW(ParamSet& params, AdamWConfig cfg) : params_(&params), cfg_(cfg) {
        m_.reserve(params.count());
        v_.reserve(params.count());
        for (const auto& [name, t] : params.entries()) {
            m_.emplace_back(t.size(), 0.0);
            v_.emplace_back(t.size(), 0.0);
        }
    }

    // One update from the gradients accumulated on `tape`. Parameters with no
    // gradient buffer are treated as zero-gradient (decay still applies).
    // `lr_override` < 0 uses the configured learning rate.
    void step(const Tape& tape, double lr_override = -1.0) {
        const double lr = lr_override < 0.0 ? cfg_.lr : lr_override;
        ++step_count_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, step_count_);
        const double bc2 = 1.0 - std::pow(cfg_.beta2, step_count_);
        auto& entries = params_->entries();
        for (std::size_t p = 0; p < entries.size(); ++p) {
            auto& [name, t] = entries[p];
            const std::vector<double>* g = tape.grad_if(t);
            double* w = t.data();
            auto& m = m_[p];
            auto& v = v_[p];
            for (std::size_t i = 0; i < t.size(); ++i) {
                const double gi = g ? (*g)[i] : 0.0;
                if (!std::isfinite(gi)) {
                    throw Error("adamw: non-finite gradient in '" + name + "' at element " + std::to_string(i));
                }
                // Decoupled decay first, then the adaptive update.
                w[i] -= lr * cfg_.weight_decay * w[i];
                m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
                v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
                const double mhat = m[i] / bc1;
                const double vhat = v[i] / bc2;
                w[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
            }
        }
    }

    std::int64_t step_count() const { return step_count_; }
    const AdamWConfig& config() const { return cfg_; }

    // Flat views used by checkpointing.
    const std::vector<std::vector<double>>& first_moments() const { return m_; }
    const std::vector<std::vector<double>>& second_moments() const { return v_; }
    void restore_state(std::int64_t step, std::vector<std::vector<double>> m, std::vector<std::vector<double>> v) {
        if (m.size() != m_.size() || v.size() != v_.size()) {
            throw ContractError("adamw: optimizer state shape mismatch");
        }
        step_count_ = step;
        m_ = std::move(m);
        v_ = std::move(v);
    }

private:
    ParamSet* params_;
    AdamWConfig cfg_;
    std::int64_t step_count_ = 0;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
};

// ----------------------------- LR schedule -----------------------------

inline double cosine_lr(std::int64_t step, std::int64_t total_steps, double lr_max, double lr_min = 0.0) {
    if (total_steps < 1) throw ConfigError("cosine_lr: total_steps must be >= 1");
    if (step < 0 || step > total_steps) throw ConfigError("cosine_lr: step outside [0, total_steps]");
    const double t = static_cast<double>(step) / static_cast<double>(total_steps);
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(3.14159265358979323846 * t));
}

// ----------------------------- checkpoint container -----------------------------
//
// Layout: 8-byte magic, little-endian u64 header length, JSON header, then
// float64 blobs in the order the header declares. save -> load -> save is
// byte-identical.

constexpr char kCheckpointMagic[8] = {'L', 'G', 'R', 'C', 'K', 'P', 'T', '1'};

struct CheckpointContent {
    json meta;  // model config, sid table hash, anything the caller stored
    std::vector<std::pair<std::string, std::vector<double>>> blobs;
    std::vector<std::array<int, 2>> blob_shapes;

    const std::vector<double>* find(const std::string& name) const {
        for (std::size_t i = 0; i < blobs.size(); ++i) {
            if (blobs[i].first == name) return &blobs[i].second;
        }
        return nullptr;
    }
};

inline void save_checkpoint(const std::string& path, const ParamSet& params, const AdamW* opt, const Rng* rng,
                            const json& meta) {
    json header;
    header["format_version"] = 1;
    header["meta"] = meta;
    json plist = json::array();
    for (const auto& [name, t] : params.entries()) {
        plist.push_back({{"name", name}, {"rows", t.rows()}, {"cols", t.cols()}});
    }
    header["params"] = std::move(plist);
    header["has_optimizer"] = opt != nullptr;
    if (opt) header["opt_step"] = opt->step_count();
    if (rng) {
        json st = json::array();
        for (auto w : rng->state()) st.push_back(hex64(w));
        header["rng_state"] = std::move(st);
    }

    const std::string hdr = header.dump();
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("save_checkpoint: cannot open " + path);
    f.write(kCheckpointMagic, 8);
    const std::uint64_t len = hdr.size();
    f.write(reinterpret_cast<const char*>(&len), 8);
    f.write(hdr.data(), static_cast<std::streamsize>(hdr.size()));
    auto write_blob = [&f](const std::vector<double>& v) {
        f.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
    };
    for (const auto& [name, t] : params.entries()) write_blob(t.values());
    if (opt) {
        for (const auto& m : opt->first_moments()) write_blob(m);
        for (const auto& v : opt->second_moments()) write_blob(v);
    }
    if (!f) throw Error("save_checkpoint: write failed for " + path);
}

inline CheckpointContent read_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("read_checkpoint: cannot open " + path);
    char magic[8];
    f.read(magic, 8);
    if (!f || std::memcmp(magic, kCheckpointMagic, 8) != 0) {
        throw Error("read_checkpoint: bad magic in " + path);
    }
    std::uint64_t len = 0;
    f.read(reinterpret_cast<char*>(&len), 8);
    std::string hdr(len, '\0');
    f.read(hdr.data(), static_cast<std::streamsize>(len));
    if (!f) throw Error("read_checkpoint: truncated header in " + path);
    json header = json::parse(hdr, nullptr, false);
    if (header.is_discarded() || header.value("format_version", 0) != 1) {
        throw Error("read_checkpoint: unsupported header in " + path);
    }

    CheckpointContent out;
    out.meta = header["meta"];
    out.meta["__header"] = header;  // keep everything for callers (rng/opt state)
    auto read_blob = [&f, &path](std::size_t n) {
        std::vector<double> v(n);
        f.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)));
        if (!f) throw Error("read_checkpoint: truncated blob in " + path);
        return v;
    };
    std::vector<std::array<int, 2>> shapes;
    for (const auto& p : header["params"]) {
        const int r = p["rows"].get<int>();
        const int c = p["cols"].get<int>();
        shapes.push_back({r, c});
        out.blobs.emplace_back(p["name"].get<std::string>(),
                               read_blob(static_cast<std::size_t>(r) * static_cast<std::size_t>(c)));
    }
    out.blob_shapes = shapes;
    if (header.value("has_optimizer", false)) {
        for (std::size_t i = 0; i < shapes.size(); ++i) {
            out.blobs.emplace_back("opt.m." + out.blobs[i].first,
                                   read_blob(static_cast<std::size_t>(shapes[i][0]) * shapes[i][1]));
        }
        for (std::size_t i = 0; i < shapes.size(); ++i) {
            out.blobs.emplace_back("opt.v." + out.blobs[i].first,
                                   read_blob(static_cast<std::size_t>(shapes[i][0]) * shapes[i][1]));
        }
    }
    return out;
}

// Loads parameter blobs into an already-constructed model. Shapes and names
// must match the registration order exactly.
inline json load_checkpoint_into(const std::string& path, ParamSet& params, AdamW* opt = nullptr,
                                 Rng* rng = nullptr) {
    CheckpointContent ckpt = read_checkpoint(path);
    auto& entries = params.entries();
    const json& header = ckpt.meta["__header"];
    if (header["params"].size() != entries.size()) {
        throw Error("load_checkpoint: parameter count mismatch (" + std::to_string(header["params"].size()) +
                    " stored, " + std::to_string(entries.size()) + " in model)");
    }
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const auto& [name, t] = entries[i];
        if (ckpt.blobs[i].first != name) {
            throw Error("load_checkpoint: parameter order mismatch at '" + name + "'");
        }
        if (ckpt.blobs[i].second.size() != t.size()) {
            throw Error("load_checkpoint: size mismatch for '" + name + "'");
        }
        entries[i].second.values() = ckpt.blobs[i].second;
    }
    if (opt && header.value("has_optimizer", false)) {
        std::vector<std::vector<double>> m, v;
        for (std::size_t i = 0; i < entries.size(); ++i) m.push_back(ckpt.blobs[entries.size() + i].second);
        for (std::size_t i = 0; i < entries.size(); ++i) v.push_back(ckpt.blobs[2 * entries.size() + i].second);
        opt->restore_state(header["opt_step"].get<std::int64_t>(), std::move(m), std::move(v));
    }
    if (rng && header.contains("rng_state")) {
        Rng::State st{};
        for (int i = 0; i < 4; ++i) {
            st[static_cast<std::size_t>(i)] =
                std::stoull(header["rng_state"][static_cast<std::size_t>(i)].get<std::string>(), nullptr, 16);
        }
        rng->set_state(st);
    }
    json meta = ckpt.meta;
    meta.erase("__header");
    return meta;
}

// ----------------------------- training loop -----------------------------

struct TrainConfig {
    double lr = 3e-4;
    double lr_min = 0.0;
    double weight_decay = 0.035;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    int batch_size = 256;
    int max_epochs = 200;
    int patience = 20;
    std::uint64_t seed = 1;
};

struct TrainResult {
    int epochs_run = 0;
    int best_epoch = -1;
    double best_metric = -1.0;
    bool diverged = false;
    std::vector<double> epoch_losses;
    std::vector<double> val_metrics;
};

// Model-agnostic epoch loop. `batch_loss` must build a scalar mean loss for
// the given examples under the active tape; `val_metric` returns the
// early-stopping signal (higher is better), evaluated after each epoch.
// On return the parameters hold the best epoch's values.
inline TrainResult train_loop(ParamSet& params, const std::vector<Example>& train_examples,
                              const std::function<Tensor(std::span<const Example>, Rng&)>& batch_loss,
                              const std::function<double()>& val_metric, const TrainConfig& cfg) {
    if (train_examples.empty()) throw ConfigError("train_loop: no training examples");
    AdamW opt(params, {cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay});
    Rng run_rng(cfg.seed);

    const std::int64_t steps_per_epoch =
        (static_cast<std::int64_t>(train_examples.size()) + cfg.batch_size - 1) / cfg.batch_size;
    const std::int64_t total_steps = steps_per_epoch * cfg.max_epochs;

    TrainResult result;
    std::vector<std::vector<double>> best_snapshot = params.snapshot();
    int since_improve = 0;
    std::int64_t global_step = 0;

    std::vector<std::size_t> order(train_examples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        Rng epoch_rng = run_rng.split(0xE90C000ull + static_cast<std::uint64_t>(epoch));
        epoch_rng.shuffle(order);

        double epoch_loss = 0.0;
        std::int64_t batches = 0;
        std::vector<Example> batch;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            batch.clear();
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            for (std::size_t i = start; i < end; ++i) batch.push_back(train_examples[order[i]]);

            Tape tape;
            Tensor loss;
            {
                TapeScope scope(tape);
                Rng step_rng = epoch_rng.split(0x57E9ull + static_cast<std::uint64_t>(global_step));
                loss = batch_loss(std::span<const Example>(batch.data(), batch.size()), step_rng);
            }
            const double loss_value = loss.item();
            if (!std::isfinite(loss_value)) {
                params.restore(best_snapshot);
                result.diverged = true;
                result.epochs_run = epoch + 1;
                return result;
            }
            tape.backward(loss);
            const double lr = cosine_lr(global_step, total_steps, cfg.lr, cfg.lr_min);
            try {
                opt.step(tape, lr);
            } catch (const Error&) {
                params.restore(best_snapshot);
                result.diverged = true;
                result.epochs_run = epoch + 1;
                return result;
            }
            epoch_loss += loss_value;
            ++batches;
            ++global_step;
        }
        result.epoch_losses.push_back(epoch_loss / static_cast<double>(batches));

        const double metric = val_metric();
        result.val_metrics.push_back(metric);
        result.epochs_run = epoch + 1;
        if (metric > result.best_metric) {
            result.best_metric = metric;
            result.best_epoch = epoch;
            best_snapshot = params.snapshot();
            since_improve = 0;
        } else {
            ++since_improve;
        }
        if (since_improve >= cfg.patience) break;
    }

    params.restore(best_snapshot);
    return result;
}

}  // namespace liger
