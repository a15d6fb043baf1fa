#pragma once

// Transductive sequential dense retriever. Inputs compose the learnable item
// (or SID-token) embedding with the projected text representation and learned
// positions, pass through LayerNorm and dropout(0.5), then an encoder-only
// transformer. Training maximizes a temperature-scaled softmax over cosine
// similarities against the full catalog; retrieval is an exact top-k scan.
//
// Targets follow the loss equations per variant: the ID variant scores
// against e_i + projected text, the SID variant against projected text only.

#include "liger/common.hpp"
#include "liger/data.hpp"
#include "liger/model_iface.hpp"
#include "liger/params.hpp"
#include "liger/ranking.hpp"
#include "liger/rng.hpp"
#include "liger/sid.hpp"
#include "liger/tensor.hpp"
#include "liger/transformer.hpp"

#include <cmath>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace liger {

enum class DenseVariant { ItemId, Sid };

struct DenseConfig {
    ModelConfig model;
    DenseVariant variant = DenseVariant::ItemId;
    double temperature = 0.07;
    double input_dropout = 0.5;
    std::uint64_t seed = 1;
};

struct TopKResult {
    CandidateList items;
    bool truncated = false;  // k exceeded the catalog size
};

// -log softmax_i exp(cos(ehat, target_i)/tau) at the label. ehat is 1 x d,
// targets are N x d; both sides stay differentiable.
inline Tensor cosine_softmax_loss(const Tensor& ehat, const Tensor& targets, double tau, int label) {
    if (tau <= 0.0) throw ConfigError("cosine_softmax_loss: tau must be > 0");
    Tensor scores = matmul(l2_normalize_rows(ehat), transpose(l2_normalize_rows(targets)));
    return softmax_cross_entropy(scale(scores, 1.0 / tau), {label});
}

class DenseModel : public Recommender {
public:
    DenseModel(DenseConfig cfg, const ItemCatalog& catalog, const SidTable* sids)
        : cfg_(cfg), catalog_(&catalog) {
        cfg_.model.validate();
        if (cfg_.temperature <= 0.0) throw ConfigError("DenseModel: temperature must be > 0");
        Rng rng(cfg_.seed);
        const int d = cfg_.model.d_model;
        int max_rows = cfg_.model.max_seq_len;
        if (cfg_.variant == DenseVariant::Sid) {
            if (!sids) throw ConfigError("DenseModel: SID variant requires a SID table");
            seq_.emplace(*sids);
            token_table_ = params_.add("tok", Tensor::randn(seq_->vocab().size(), d, rng, kInitStd));
            max_rows *= seq_->tokens_per_item();
        } else {
            item_table_ = params_.add("item_emb", Tensor::randn(catalog.n_items(), d, rng, kInitStd));
        }
        pos_ = PositionTables(params_, cfg_.model.max_seq_len,
                              cfg_.variant == DenseVariant::Sid ? seq_->tokens_per_item() : 1, d, rng);
        text_proj_ = TextProjection(params_, catalog.dim(), d, rng);
        input_ln_ = LayerNorm(params_, "input_ln", d);
        encoder_ = TransformerEncoder(params_, "enc", cfg_.model, rng, max_rows);
    }

    ParamSet& params() override { return params_; }
    const ParamSet& params() const override { return params_; }
    const DenseConfig& config() const { return cfg_; }

    // Composed input rows for a history, LayerNorm'd and dropped out.
    Tensor compose_input(const std::vector<int>& history, bool train, Rng& rng) const {
        const std::vector<int> clipped = clip(history);
        Tensor rows;
        if (cfg_.variant == DenseVariant::Sid) {
            auto flat = seq_->flatten(clipped);
            rows = embedding_lookup(token_table_, flat.tokens);
            rows = add(rows, text_proj_.forward(embedding_lookup(catalog_->text_embeddings, flat.owners)));
            rows = add(rows, embedding_lookup(pos_.item_positions, flat.item_slots));
            rows = add(rows, embedding_lookup(pos_.sid_positions, flat.sid_slots));
        } else {
            std::vector<int> slots(clipped.size());
            for (std::size_t i = 0; i < clipped.size(); ++i) slots[i] = static_cast<int>(i);
            rows = embedding_lookup(item_table_, clipped);
            rows = add(rows, text_proj_.forward(embedding_lookup(catalog_->text_embeddings, clipped)));
            rows = add(rows, embedding_lookup(pos_.item_positions, slots));
        }
        rows = input_ln_.forward(rows);
        return dropout(rows, cfg_.input_dropout, rng, train);
    }

    // Encoder output at the last sequence position.
    Tensor predict_embedding(const std::vector<int>& history, bool train, Rng& rng) const {
        Tensor enc = encoder_.forward(compose_input(history, train, rng), train, rng);
        return slice_rows(enc, enc.rows() - 1, 1);
    }

    // Per-item target vectors on the tape: e_i + proj(text_i) for the ID
    // variant, proj(text_i) for the SID variant.
    Tensor target_matrix() const {
        Tensor text = text_proj_.forward(catalog_->text_embeddings);
        if (cfg_.variant == DenseVariant::ItemId) return add(item_table_, text);
        return text;
    }

    // -log softmax over the catalog of cos(E_hat, target_i)/tau at the label.
    Tensor batch_loss(std::span<const Example> batch, Rng& rng) override {
        if (batch.empty()) throw ContractError("batch_loss: empty batch");
        index_fresh_ = false;  // a step will follow; the retrieval index must rebuild
        Tensor targets_t = transpose(l2_normalize_rows(target_matrix()));
        Tensor total = Tensor::scalar(0.0);
        for (std::size_t e = 0; e < batch.size(); ++e) {
            Rng erng = rng.split(e);
            Tensor ehat = l2_normalize_rows(predict_embedding(batch[e].history, true, erng));
            Tensor logits = scale(matmul(ehat, targets_t), 1.0 / cfg_.temperature);
            total = add(total, softmax_cross_entropy(logits, {batch[e].label}));
        }
        return scale(total, 1.0 / static_cast<double>(batch.size()));
    }

    // Frozen, row-normalized copy of the targets for retrieval.
    void refresh_index() const {
        NoTapeScope no_tape;
        index_ = l2_normalize_rows(target_matrix());
        index_fresh_ = true;
    }

    TopKResult retrieve_topk(const std::vector<int>& history, int k) const {
        if (k < 1) throw ConfigError("retrieve_topk: k must be >= 1");
        NoTapeScope no_tape;
        if (!index_fresh_) refresh_index();
        Rng dummy(0);
        Tensor ehat = l2_normalize_rows(predict_embedding(history, false, dummy));
        Tensor scores = matmul(ehat, transpose(index_));
        CandidateList all(static_cast<std::size_t>(catalog_->n_items()));
        for (int i = 0; i < catalog_->n_items(); ++i) all[static_cast<std::size_t>(i)] = {i, scores.at(0, i)};
        sort_candidates(all);
        TopKResult out;
        if (k >= catalog_->n_items()) {
            out.items = std::move(all);
            out.truncated = k > catalog_->n_items();
        } else {
            out.items.assign(all.begin(), all.begin() + k);
        }
        return out;
    }

    CandidateList recommend(const std::vector<int>& history, int k) override {
        return retrieve_topk(history, k).items;
    }

    void after_params_changed() override { index_fresh_ = false; }

    std::int64_t learnable_embedding_rows() const override {
        return cfg_.variant == DenseVariant::ItemId ? item_table_.rows() : token_table_.rows();
    }

    json meta() const override {
        json m;
        m["variant"] = cfg_.variant == DenseVariant::ItemId ? "dense_id" : "dense_sid";
        m["d_model"] = cfg_.model.d_model;
        m["layers"] = cfg_.model.layers;
        m["temperature"] = cfg_.temperature;
        return m;
    }

private:
    std::vector<int> clip(const std::vector<int>& history) const {
        const int limit = cfg_.model.max_seq_len;
        if (static_cast<int>(history.size()) <= limit) return history;
        return {history.end() - limit, history.end()};
    }

    DenseConfig cfg_;
    const ItemCatalog* catalog_;
    std::optional<SidSequencer> seq_;
    ParamSet params_;
    Tensor token_table_, item_table_;
    PositionTables pos_;
    TextProjection text_proj_;
    LayerNorm input_ln_;
    TransformerEncoder encoder_;
    mutable Tensor index_;
    mutable bool index_fresh_ = false;
};

}  // namespace liger
