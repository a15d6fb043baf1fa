#pragma once

// Residual-quantized autoencoder over item text embeddings. A 3-layer MLP
// encoder maps 768-d embeddings to a 128-d latent, a cascade of codebooks
// quantizes the running residual level by level, and a mirrored decoder
// reconstructs the input. Training uses the straight-through estimator, a
// stop-gradient codebook term and a beta-weighted commitment term. Frozen
// quantizers assign each catalog item its semantic ID.

#include "liger/common.hpp"
#include "liger/data.hpp"
#include "liger/params.hpp"
#include "liger/rng.hpp"
#include "liger/sid.hpp"
#include "liger/tensor.hpp"
#include "liger/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

namespace liger {

struct RqVaeConfig {
    int input_dim = 768;
    std::vector<int> hidden = {512, 256};
    int latent_dim = 128;
    int levels = 3;          // m
    int codebook_size = 256; // t
    double beta = 0.25;      // commitment weight
    double lr = 1e-3;
    double weight_decay = 0.1;
    int epochs = 2000;
    int batch_size = 256;
    bool kmeans_init = true;
    int kmeans_iters = 10;
    std::uint64_t seed = 1;
};

namespace detail {

// Lloyd's algorithm; empty clusters are reseeded from random points. When
// there are fewer points than centroids the extras get jittered copies.
inline std::vector<double> kmeans(const std::vector<double>& data, int n, int dim, int k, int iters, Rng& rng) {
    std::vector<double> centroids(static_cast<std::size_t>(k) * dim);
    std::vector<std::size_t> order(static_cast<std::size_t>(n));
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    for (int c = 0; c < k; ++c) {
        const std::size_t src = order[static_cast<std::size_t>(c) % order.size()];
        for (int j = 0; j < dim; ++j) {
            double v = data[src * static_cast<std::size_t>(dim) + j];
            if (c >= n) v += rng.normal(0.0, 1e-3);
            centroids[static_cast<std::size_t>(c) * dim + j] = v;
        }
    }

    std::vector<int> assign(static_cast<std::size_t>(n));
    for (int iter = 0; iter < iters; ++iter) {
        detail::MapC x(data.data(), n, dim);
        detail::MapC c(centroids.data(), k, dim);
        Eigen::MatrixXd dots = x * c.transpose();  // n x k
        Eigen::VectorXd cn = c.rowwise().squaredNorm();
        for (int i = 0; i < n; ++i) {
            int best = 0;
            double best_d = cn(0) - 2.0 * dots(i, 0);
            for (int kk = 1; kk < k; ++kk) {
                const double d = cn(kk) - 2.0 * dots(i, kk);
                if (d < best_d) {
                    best_d = d;
                    best = kk;
                }
            }
            assign[static_cast<std::size_t>(i)] = best;
        }
        std::vector<double> sums(static_cast<std::size_t>(k) * dim, 0.0);
        std::vector<int> counts(static_cast<std::size_t>(k), 0);
        for (int i = 0; i < n; ++i) {
            const int a = assign[static_cast<std::size_t>(i)];
            ++counts[static_cast<std::size_t>(a)];
            for (int j = 0; j < dim; ++j) {
                sums[static_cast<std::size_t>(a) * dim + j] += data[static_cast<std::size_t>(i) * dim + j];
            }
        }
        for (int kk = 0; kk < k; ++kk) {
            if (counts[static_cast<std::size_t>(kk)] == 0) {
                const std::size_t src = rng.uniform_below(static_cast<std::uint64_t>(n));
                for (int j = 0; j < dim; ++j) {
                    centroids[static_cast<std::size_t>(kk) * dim + j] = data[src * static_cast<std::size_t>(dim) + j];
                }
            } else {
                for (int j = 0; j < dim; ++j) {
                    centroids[static_cast<std::size_t>(kk) * dim + j] =
                        sums[static_cast<std::size_t>(kk) * dim + j] / counts[static_cast<std::size_t>(kk)];
                }
            }
        }
    }
    return centroids;
}

}  // namespace detail

class RqVae {
public:
    explicit RqVae(RqVaeConfig cfg) : cfg_(std::move(cfg)) {
        if (cfg_.levels < 1 || cfg_.codebook_size < 1) throw ConfigError("RqVae: need levels >= 1 and codebook_size >= 1");
        Rng rng(cfg_.seed);
        std::vector<int> enc_dims = {cfg_.input_dim};
        for (int h : cfg_.hidden) enc_dims.push_back(h);
        enc_dims.push_back(cfg_.latent_dim);
        auto he = [&rng](int fan_in, int rows, int cols) {
            return Tensor::randn(rows, cols, rng, std::sqrt(2.0 / fan_in));
        };
        for (std::size_t l = 0; l + 1 < enc_dims.size(); ++l) {
            enc_w_.push_back(params_.add("enc.w" + std::to_string(l), he(enc_dims[l], enc_dims[l], enc_dims[l + 1])));
            enc_b_.push_back(params_.add("enc.b" + std::to_string(l), Tensor::zeros(1, enc_dims[l + 1])));
        }
        std::vector<int> dec_dims(enc_dims.rbegin(), enc_dims.rend());
        for (std::size_t l = 0; l + 1 < dec_dims.size(); ++l) {
            dec_w_.push_back(params_.add("dec.w" + std::to_string(l), he(dec_dims[l], dec_dims[l], dec_dims[l + 1])));
            dec_b_.push_back(params_.add("dec.b" + std::to_string(l), Tensor::zeros(1, dec_dims[l + 1])));
        }
        for (int lvl = 0; lvl < cfg_.levels; ++lvl) {
            codebooks_.push_back(params_.add("codebook." + std::to_string(lvl),
                                             Tensor::randn(cfg_.codebook_size, cfg_.latent_dim, rng, 0.02)));
        }
    }

    const RqVaeConfig& config() const { return cfg_; }
    ParamSet& params() { return params_; }
    const ParamSet& params() const { return params_; }
    Tensor& codebook(int level) { return codebooks_[static_cast<std::size_t>(level)]; }

    Tensor encode(const Tensor& x) const {
        Tensor h = x;
        for (std::size_t l = 0; l < enc_w_.size(); ++l) {
            h = add_row_broadcast(matmul(h, enc_w_[l]), enc_b_[l]);
            if (l + 1 < enc_w_.size()) h = relu(h);
        }
        return h;
    }

    Tensor decode(const Tensor& z) const {
        Tensor h = z;
        for (std::size_t l = 0; l < dec_w_.size(); ++l) {
            h = add_row_broadcast(matmul(h, dec_w_[l]), dec_b_[l]);
            if (l + 1 < dec_w_.size()) h = relu(h);
        }
        return h;
    }

    // ---- quantization (pure numeric, no tape participation) ----

    struct Quantized {
        std::vector<std::vector<int>> codes;  // batch x levels
        Tensor quantized;                     // batch x latent, constant
        std::vector<Tensor> cumulative;       // per level: sum of chosen codewords, constant
    };

    Quantized quantize(const Tensor& latents) const {
        const int b = latents.rows();
        const int d = cfg_.latent_dim;
        if (latents.cols() != d) throw DimensionError("quantize: latent width mismatch");
        Quantized out;
        out.codes.assign(static_cast<std::size_t>(b), std::vector<int>(static_cast<std::size_t>(cfg_.levels)));
        std::vector<double> residual = latents.values();
        Tensor cum = Tensor::zeros(b, d);
        for (int lvl = 0; lvl < cfg_.levels; ++lvl) {
            const Tensor& cb = codebooks_[static_cast<std::size_t>(lvl)];
            detail::MapC r(residual.data(), b, d);
            detail::MapC c(cb.data(), cb.rows(), d);
            Eigen::MatrixXd dots = r * c.transpose();
            Eigen::VectorXd cn = c.rowwise().squaredNorm();
            for (int i = 0; i < b; ++i) {
                int best = 0;
                double best_d = cn(0) - 2.0 * dots(i, 0);
                for (int k = 1; k < cb.rows(); ++k) {
                    const double dd = cn(k) - 2.0 * dots(i, k);
                    if (dd < best_d) {
                        best_d = dd;
                        best = k;
                    }
                }
                out.codes[static_cast<std::size_t>(i)][static_cast<std::size_t>(lvl)] = best;
                for (int j = 0; j < d; ++j) {
                    const double cw = cb.at(best, j);
                    residual[static_cast<std::size_t>(i) * d + j] -= cw;
                    cum.at(i, j) += cw;
                }
            }
            out.cumulative.push_back(cum.clone());
        }
        out.quantized = cum;
        return out;
    }

    struct RowQuant {
        std::vector<int> codes;
        std::vector<double> quantized;
        std::vector<std::vector<double>> residuals;  // residual after each level
    };

    RowQuant quantize_row(const std::vector<double>& latent) const {
        Tensor one = Tensor::from(1, cfg_.latent_dim, latent);
        Quantized q = quantize(one);
        RowQuant out;
        out.codes = q.codes[0];
        out.quantized = q.quantized.values();
        std::vector<double> r = latent;
        for (int lvl = 0; lvl < cfg_.levels; ++lvl) {
            for (int j = 0; j < cfg_.latent_dim; ++j) r[static_cast<std::size_t>(j)] = latent[static_cast<std::size_t>(j)] - q.cumulative[static_cast<std::size_t>(lvl)].at(0, j);
            out.residuals.push_back(r);
        }
        return out;
    }

    // ---- training loss ----

    struct LossParts {
        Tensor total;     // scalar on tape
        double recon = 0; // per-sample values of each term
        double codebook = 0;
        double commitment = 0;
    };

    // recon + codebook + beta * commitment, averaged over the batch. The
    // decoder input uses the straight-through estimator so reconstruction
    // gradients reach the encoder unchanged.
    LossParts loss_parts(const Tensor& x) const {
        const int b = x.rows();
        Tensor z = encode(x);
        Quantized q = quantize(z);

        // z + sg(quantized - z): value is the quantized latent, gradient is identity to z.
        Tensor delta = Tensor::zeros(b, cfg_.latent_dim);
        for (std::size_t i = 0; i < delta.size(); ++i) delta.data()[i] = q.quantized.data()[i] - z.data()[i];
        Tensor z_st = add(z, delta);
        Tensor xhat = decode(z_st);
        Tensor diff = sub(x, xhat);
        Tensor recon = sum_all(mul(diff, diff));

        Tensor codebook_term = Tensor::scalar(0.0);
        Tensor commit_term = Tensor::scalar(0.0);
        std::vector<double> prev_resid = z.values();  // residual before level 0 = latent
        for (int lvl = 0; lvl < cfg_.levels; ++lvl) {
            std::vector<int> idx(static_cast<std::size_t>(b));
            for (int i = 0; i < b; ++i) idx[static_cast<std::size_t>(i)] = q.codes[static_cast<std::size_t>(i)][static_cast<std::size_t>(lvl)];
            Tensor chosen = embedding_lookup(codebooks_[static_cast<std::size_t>(lvl)], idx);
            Tensor target = Tensor::from(b, cfg_.latent_dim, prev_resid);  // sg(residual_{lvl-1})
            Tensor cd = sub(target, chosen);
            codebook_term = add(codebook_term, sum_all(mul(cd, cd)));

            // residual_{lvl-1} - sg(c_lvl) == z - sg(cumulative_lvl) on the tape.
            Tensor md = sub(z, q.cumulative[static_cast<std::size_t>(lvl)]);
            commit_term = add(commit_term, sum_all(mul(md, md)));

            for (std::size_t i = 0; i < prev_resid.size(); ++i) {
                prev_resid[i] = z.data()[i] - q.cumulative[static_cast<std::size_t>(lvl)].data()[i];
            }
        }

        LossParts parts;
        parts.recon = recon.item() / b;
        parts.codebook = codebook_term.item() / b;
        parts.commitment = commit_term.item() / b;
        parts.total = scale(add(recon, add(codebook_term, scale(commit_term, cfg_.beta))), 1.0 / b);
        return parts;
    }

    Tensor loss(const Tensor& x) const { return loss_parts(x).total; }

private:
    RqVaeConfig cfg_;
    ParamSet params_;
    std::vector<Tensor> enc_w_, enc_b_, dec_w_, dec_b_;
    std::vector<Tensor> codebooks_;
};

// ----------------------------- training -----------------------------

struct RqVaeTrainStats {
    double initial_recon = 0.0;
    double final_recon = 0.0;
    std::vector<double> epoch_recon;
    std::vector<int> batches_with_cold = {};  // audit: stays empty
};

// Trains on the catalog minus cold-flagged items (the flags must be set
// before calling). Cold items never enter a batch; the audit trail in the
// stats records any violation.
inline RqVae train_rqvae(const ItemCatalog& catalog, const RqVaeConfig& cfg, RqVaeTrainStats* stats = nullptr) {
    std::vector<int> train_items;
    for (int i = 0; i < catalog.n_items(); ++i) {
        if (!catalog.cold_flags[static_cast<std::size_t>(i)]) train_items.push_back(i);
    }
    if (train_items.empty()) throw ConfigError("train_rqvae: no non-cold items to train on");

    RqVae model(cfg);
    Rng rng(cfg.seed ^ 0x5EEDF00Dull);
    AdamW opt(model.params(), {cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});

    auto gather = [&](const std::vector<int>& items) {
        Tensor x = Tensor::zeros(static_cast<int>(items.size()), catalog.dim());
        for (std::size_t i = 0; i < items.size(); ++i) {
            std::copy_n(catalog.text_embeddings.data() + static_cast<std::size_t>(items[i]) * catalog.dim(),
                        catalog.dim(), x.data() + i * static_cast<std::size_t>(catalog.dim()));
        }
        return x;
    };

    Tensor all_train = gather(train_items);
    if (stats) stats->initial_recon = model.loss_parts(all_train).recon;

    // Codebook warm start: k-means on each level's residuals.
    if (cfg.kmeans_init) {
        Tensor lat = model.encode(all_train);
        std::vector<double> resid = lat.values();
        const int n = lat.rows();
        const int d = cfg.latent_dim;
        for (int lvl = 0; lvl < cfg.levels; ++lvl) {
            auto centroids = detail::kmeans(resid, n, d, cfg.codebook_size, cfg.kmeans_iters, rng);
            model.codebook(lvl).values() = centroids;
            RqVae::Quantized q = model.quantize(lat);
            for (int i = 0; i < n; ++i) {
                for (int j = 0; j < d; ++j) {
                    resid[static_cast<std::size_t>(i) * d + j] =
                        lat.at(i, j) - q.cumulative[static_cast<std::size_t>(lvl)].at(i, j);
                }
            }
        }
    }

    std::vector<int> order = train_items;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng erng = rng.split(static_cast<std::uint64_t>(epoch));
        erng.shuffle(order);
        double recon_sum = 0.0;
        int batches = 0;
        std::vector<std::vector<int>> usage(static_cast<std::size_t>(cfg.levels),
                                            std::vector<int>(static_cast<std::size_t>(cfg.codebook_size), 0));
        // Residual samples per level for dead-codeword reseeding.
        std::vector<std::vector<double>> resid_pool(static_cast<std::size_t>(cfg.levels));

        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            std::vector<int> batch(order.begin() + static_cast<std::ptrdiff_t>(start),
                                   order.begin() + static_cast<std::ptrdiff_t>(end));
            Tensor x = gather(batch);

            Tape tape;
            RqVae::LossParts parts;
            {
                TapeScope scope(tape);
                parts = model.loss_parts(x);
            }
            tape.backward(parts.total);
            opt.step(tape);
            recon_sum += parts.recon;
            ++batches;

            Tensor lat = model.encode(x);
            RqVae::Quantized q = model.quantize(lat);
            for (int i = 0; i < lat.rows(); ++i) {
                for (int lvl = 0; lvl < cfg.levels; ++lvl) {
                    ++usage[static_cast<std::size_t>(lvl)]
                           [static_cast<std::size_t>(q.codes[static_cast<std::size_t>(i)][static_cast<std::size_t>(lvl)])];
                }
            }
            for (int lvl = 0; lvl < cfg.levels; ++lvl) {
                auto& pool = resid_pool[static_cast<std::size_t>(lvl)];
                pool.resize(static_cast<std::size_t>(lat.rows()) * cfg.latent_dim);
                for (int i = 0; i < lat.rows(); ++i) {
                    for (int j = 0; j < cfg.latent_dim; ++j) {
                        const double before = lvl == 0 ? lat.at(i, j)
                                                       : lat.at(i, j) - q.cumulative[static_cast<std::size_t>(lvl - 1)].at(i, j);
                        pool[static_cast<std::size_t>(i) * cfg.latent_dim + j] = before;
                    }
                }
            }
        }

        // Reseed codewords unused for the whole epoch.
        for (int lvl = 0; lvl < cfg.levels; ++lvl) {
            const auto& pool = resid_pool[static_cast<std::size_t>(lvl)];
            const std::size_t pool_rows = pool.size() / static_cast<std::size_t>(cfg.latent_dim);
            if (pool_rows == 0) continue;
            for (int k = 0; k < cfg.codebook_size; ++k) {
                if (usage[static_cast<std::size_t>(lvl)][static_cast<std::size_t>(k)] == 0) {
                    const std::size_t src = rng.uniform_below(pool_rows);
                    for (int j = 0; j < cfg.latent_dim; ++j) {
                        model.codebook(lvl).at(k, j) = pool[src * static_cast<std::size_t>(cfg.latent_dim) + j];
                    }
                }
            }
        }

        if (stats) stats->epoch_recon.push_back(recon_sum / std::max(1, batches));
    }

    if (stats) stats->final_recon = model.loss_parts(all_train).recon;
    return model;
}

// ----------------------------- assignment -----------------------------

// Every item (cold included) goes through the frozen quantizer; items that
// share a code tuple receive dedup indices 0,1,2,... in ascending item order.
inline SidTable assign_semantic_ids(const ItemCatalog& catalog, const RqVae& model) {
    Tensor latents = model.encode(catalog.text_embeddings);
    RqVae::Quantized q = model.quantize(latents);
    std::map<std::vector<int>, int> collision_count;
    std::vector<SemanticId> sids(static_cast<std::size_t>(catalog.n_items()));
    for (int i = 0; i < catalog.n_items(); ++i) {
        SemanticId s;
        s.codes = q.codes[static_cast<std::size_t>(i)];
        s.dedup = collision_count[s.codes]++;
        sids[static_cast<std::size_t>(i)] = std::move(s);
    }
    return SidTable(model.config().levels, model.config().codebook_size, std::move(sids));
}

}  // namespace liger
