#pragma once

// The hybrid retriever: one shared encoder feeds two heads. The decoder SID
// head is trained with next-token prediction over the next item's tuple; the
// embedding head (the encoder output at the last position) is trained with a
// temperature-scaled cosine softmax against projected item text
// representations. Inference generates K beam candidates, unions them with
// the cold-start item set, and re-ranks everything by the embedding head.
//
// detach_sid mode blocks the next-token term's gradients from every shared
// parameter (encoder, tables, projection): the decoder keeps learning, the
// shared trunk sees only the cosine term.

#include "liger/common.hpp"
#include "liger/data.hpp"
#include "liger/dense_retrieval.hpp"
#include "liger/gen_retrieval.hpp"
#include "liger/model_iface.hpp"
#include "liger/params.hpp"
#include "liger/ranking.hpp"
#include "liger/rng.hpp"
#include "liger/sid.hpp"
#include "liger/tensor.hpp"
#include "liger/transformer.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace liger {

struct LigerConfig {
    ModelConfig model;
    double temperature = 0.07;
    double input_dropout = 0.5;
    bool detach_sid = false;   // ablation: stop SID-head gradients at the trunk
    double sid_loss_weight = 1.0;
    std::uint64_t seed = 1;
};

struct InferenceConfig {
    int beam_width = 10;       // K candidates from the SID head
    bool include_cold = true;  // union the cold-start set into the candidates
    int final_k = 10;
};

class LigerModel : public Recommender {
public:
    LigerModel(LigerConfig cfg, const ItemCatalog& catalog, const SidTable& sids, const SidTrie& trie)
        : cfg_(cfg), catalog_(&catalog), sids_(&sids), trie_(&trie), seq_(sids) {
        cfg_.model.validate();
        if (cfg_.temperature <= 0.0) throw ConfigError("LigerModel: temperature must be > 0");
        Rng rng(cfg_.seed);
        const int d = cfg_.model.d_model;
        token_table_ = params_.add("tok", Tensor::randn(seq_.vocab().size(), d, rng, kInitStd));
        bos_ = params_.add("bos", Tensor::randn(1, d, rng, kInitStd));
        pos_ = PositionTables(params_, cfg_.model.max_seq_len, seq_.tokens_per_item(), d, rng);
        text_proj_ = TextProjection(params_, catalog.dim(), d, rng);
        input_ln_ = LayerNorm(params_, "input_ln", d);
        encoder_ = TransformerEncoder(params_, "enc", cfg_.model, rng,
                                      cfg_.model.max_seq_len * seq_.tokens_per_item());
        decoder_ = TransformerDecoder(params_, "dec", cfg_.model, rng);
        out_head_ = Linear(params_, "out_head", d, seq_.vocab().size(), rng);
    }

    ParamSet& params() override { return params_; }
    const ParamSet& params() const override { return params_; }
    const LigerConfig& config() const { return cfg_; }
    InferenceConfig& inference() { return infer_; }
    const InferenceConfig& inference() const { return infer_; }

    // SID-token + projected-text composition with both position tables,
    // LayerNorm'd and dropped out, as in the SID dense variant.
    Tensor compose_input(const std::vector<int>& history, bool train, Rng& rng) const {
        auto flat = seq_.flatten(clip(history));
        Tensor rows = embedding_lookup(token_table_, flat.tokens);
        rows = add(rows, text_proj_.forward(embedding_lookup(catalog_->text_embeddings, flat.owners)));
        rows = add(rows, embedding_lookup(pos_.item_positions, flat.item_slots));
        rows = add(rows, embedding_lookup(pos_.sid_positions, flat.sid_slots));
        rows = input_ln_.forward(rows);
        return dropout(rows, cfg_.input_dropout, rng, train);
    }

    Tensor encode_history(const std::vector<int>& history, bool train, Rng& rng) const {
        return encoder_.forward(compose_input(history, train, rng), train, rng);
    }

    Tensor decoder_logits(const Tensor& enc_out, const std::vector<int>& prefix_tokens, bool train, Rng& rng) const {
        Tensor enc_in = cfg_.detach_sid ? stop_gradient(enc_out) : enc_out;
        std::vector<Tensor> parts = {bos_};
        if (!prefix_tokens.empty()) parts.push_back(embedding_lookup(token_table_, prefix_tokens));
        Tensor x = concat_rows(parts);
        std::vector<int> slots(static_cast<std::size_t>(x.rows()));
        for (int i = 0; i < x.rows(); ++i) slots[static_cast<std::size_t>(i)] = i;
        x = add(x, embedding_lookup(pos_.sid_positions, slots));
        if (cfg_.detach_sid) x = stop_gradient(x);
        Tensor dec = decoder_.forward(x, enc_in, train, rng);
        return out_head_.forward(dec);
    }

    // Embedding-head targets: projected text representations.
    Tensor target_matrix() const { return text_proj_.forward(catalog_->text_embeddings); }

    struct CombinedLoss {
        Tensor total;
        double cosine = 0.0;
        double next_token = 0.0;
    };

    // Cosine softmax term + next-token term, summed (weights default 1).
    CombinedLoss combined_loss(std::span<const Example> batch, Rng& rng) const {
        if (batch.empty()) throw ContractError("combined_loss: empty batch");
        index_fresh_ = false;
        Tensor targets_t = transpose(l2_normalize_rows(target_matrix()));
        Tensor cos_total = Tensor::scalar(0.0);
        Tensor ntp_total = Tensor::scalar(0.0);
        for (std::size_t e = 0; e < batch.size(); ++e) {
            Rng erng = rng.split(e);
            Tensor enc = encode_history(batch[e].history, true, erng);
            Tensor ehat = l2_normalize_rows(slice_rows(enc, enc.rows() - 1, 1));
            Tensor logits = scale(matmul(ehat, targets_t), 1.0 / cfg_.temperature);
            cos_total = add(cos_total, softmax_cross_entropy(logits, {batch[e].label}));

            std::vector<int> targets = seq_.target_tokens(batch[e].label);
            std::vector<int> prefix(targets.begin(), targets.end() - 1);
            Tensor tok_logits = decoder_logits(enc, prefix, true, erng);
            ntp_total = add(ntp_total, softmax_cross_entropy(tok_logits, targets));
        }
        const double inv = 1.0 / static_cast<double>(batch.size());
        CombinedLoss out;
        out.cosine = cos_total.item() * inv;
        out.next_token = ntp_total.item() * inv;
        out.total = scale(add(cos_total, scale(ntp_total, cfg_.sid_loss_weight)), inv);
        return out;
    }

    Tensor batch_loss(std::span<const Example> batch, Rng& rng) override {
        return combined_loss(batch, rng).total;
    }

    BeamResult beam_search(const std::vector<int>& history, int K, bool constrained = true) const {
        NoTapeScope no_tape;
        Rng dummy(0);
        Tensor enc = encode_history(history, false, dummy);
        auto next_fn = [&](const std::vector<int>& prefix_codes) {
            std::vector<int> tokens;
            for (std::size_t j = 0; j < prefix_codes.size(); ++j) {
                tokens.push_back(seq_.vocab().token(static_cast<int>(j), prefix_codes[j]));
            }
            Rng r(0);
            Tensor logits = decoder_logits(enc, tokens, false, r);
            return log_softmax_row(logits, logits.rows() - 1);
        };
        return sid_beam_search(*trie_, seq_.vocab(), K, constrained, next_fn);
    }

    double item_log_prob(const std::vector<int>& history, int item) const {
        NoTapeScope no_tape;
        Rng dummy(0);
        Tensor enc = encode_history(history, false, dummy);
        std::vector<int> targets = seq_.target_tokens(item);
        std::vector<int> prefix(targets.begin(), targets.end() - 1);
        Tensor logits = decoder_logits(enc, prefix, false, dummy);
        double total = 0.0;
        for (std::size_t j = 0; j < targets.size(); ++j) {
            total += log_softmax_row(logits, static_cast<int>(j))[static_cast<std::size_t>(targets[j])];
        }
        return total;
    }

    void refresh_index() const {
        NoTapeScope no_tape;
        index_ = l2_normalize_rows(target_matrix());
        index_fresh_ = true;
    }

    // Algorithm-1 inference: beam top-K, union with the cold-start set, rank
    // everything by cosine against the embedding head. Beam scores are
    // discarded; only the embedding head orders the final list.
    CandidateList infer(const std::vector<int>& history, const InferenceConfig& cfg) const {
        NoTapeScope no_tape;
        if (!index_fresh_) refresh_index();
        BeamResult beam = beam_search(history, cfg.beam_width, true);
        std::vector<char> in_set(static_cast<std::size_t>(catalog_->n_items()), 0);
        for (const auto& e : beam.entries) {
            if (e.item >= 0) in_set[static_cast<std::size_t>(e.item)] = 1;
        }
        if (cfg.include_cold) {
            for (int i = 0; i < catalog_->n_items(); ++i) {
                if (catalog_->cold_flags[static_cast<std::size_t>(i)]) in_set[static_cast<std::size_t>(i)] = 1;
            }
        }
        Rng dummy(0);
        Tensor ehat = l2_normalize_rows(encode_last(history));
        CandidateList pool;
        for (int i = 0; i < catalog_->n_items(); ++i) {
            if (!in_set[static_cast<std::size_t>(i)]) continue;
            double dot = 0.0;
            for (int j = 0; j < index_.cols(); ++j) dot += ehat.at(0, j) * index_.at(i, j);
            pool.push_back({i, dot});
        }
        sort_candidates(pool);
        if (static_cast<int>(pool.size()) > cfg.final_k) pool.resize(static_cast<std::size_t>(cfg.final_k));
        return pool;
    }

    CandidateList recommend(const std::vector<int>& history, int k) override {
        InferenceConfig cfg = infer_;
        cfg.final_k = k;
        return infer(history, cfg);
    }

    // Full embedding-head ranking over the catalog (the K = N degenerate
    // path and the early-stopping monitor).
    CandidateList dense_head_ranking(const std::vector<int>& history, int k) const {
        NoTapeScope no_tape;
        if (!index_fresh_) refresh_index();
        Tensor ehat = l2_normalize_rows(encode_last(history));
        CandidateList all(static_cast<std::size_t>(catalog_->n_items()));
        for (int i = 0; i < catalog_->n_items(); ++i) {
            double dot = 0.0;
            for (int j = 0; j < index_.cols(); ++j) dot += ehat.at(0, j) * index_.at(i, j);
            all[static_cast<std::size_t>(i)] = {i, dot};
        }
        sort_candidates(all);
        if (static_cast<int>(all.size()) > k) all.resize(static_cast<std::size_t>(k));
        return all;
    }

    void after_params_changed() override { index_fresh_ = false; }

    std::int64_t learnable_embedding_rows() const override { return token_table_.rows(); }

    json meta() const override {
        json m;
        m["variant"] = cfg_.detach_sid ? "liger_detach" : "liger";
        m["d_model"] = cfg_.model.d_model;
        m["layers"] = cfg_.model.layers;
        m["temperature"] = cfg_.temperature;
        m["sid_table_hash"] = hex64(sids_->hash());
        return m;
    }

private:
    Tensor encode_last(const std::vector<int>& history) const {
        Rng dummy(0);
        Tensor enc = encode_history(history, false, dummy);
        return slice_rows(enc, enc.rows() - 1, 1);
    }

    std::vector<int> clip(const std::vector<int>& history) const {
        const int limit = cfg_.model.max_seq_len;
        if (static_cast<int>(history.size()) <= limit) return history;
        return {history.end() - limit, history.end()};
    }

    LigerConfig cfg_;
    const ItemCatalog* catalog_;
    const SidTable* sids_;
    const SidTrie* trie_;
    SidSequencer seq_;
    ParamSet params_;
    Tensor token_table_, bos_;
    PositionTables pos_;
    TextProjection text_proj_;
    LayerNorm input_ln_;
    TransformerEncoder encoder_;
    TransformerDecoder decoder_;
    Linear out_head_;
    InferenceConfig infer_;
    mutable Tensor index_;
    mutable bool index_fresh_ = false;
};

// Normalized performance gap: 0 at generative-only performance, 1 at dense.
inline double npg(double r_k, double r_tiger, double r_dense) {
    const double denom = r_dense - r_tiger;
    if (denom == 0.0) throw UndefinedMetricError("npg: r_dense equals r_tiger");
    return (r_k - r_tiger) / denom;
}

}  // namespace liger
