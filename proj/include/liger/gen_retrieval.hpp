#pragma once

// TIGER-style generative retriever: histories become flattened semantic-ID
// token sequences, an encoder-decoder transformer is trained on next-token
// prediction over the next item's tuple, and retrieval runs a
// trie-constrained beam search.
//
// The beam is implemented as best-first expansion over the prefix trie with
// the cumulative log-probability as priority. Token log-probs are <= 0, so a
// popped leaf can never be beaten by anything left on the frontier: the beam
// returns the exact top-K tuples by sequence log-prob for every K, candidate
// sets nest across K, and the K-th score equals the true K-th generation
// probability. Cost stays O(t K) decoder evaluations per query.

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
#include <functional>
#include <map>
#include <queue>
#include <string>
#include <vector>

namespace liger {

// ----------------------------- beam search -----------------------------

struct BeamEntry {
    int item = -1;  // -1 when an unconstrained tuple maps to no catalog item
    double logp = 0.0;
    std::vector<int> codes;  // levels+1 raw code values
};

struct BeamResult {
    std::vector<BeamEntry> entries;  // sorted: logp descending, codes ascending
    bool truncated = false;          // fewer valid leaves than requested

    CandidateList candidates() const {
        CandidateList out;
        for (const auto& e : entries) {
            if (e.item >= 0) out.push_back({e.item, e.logp});
        }
        return out;
    }
};

// Exact top-K search. `next_logprobs(prefix_codes)` returns the full-vocab
// log-softmax for the slot at depth prefix_codes.size(); it is memoized here
// so each prefix is scored once.
inline BeamResult sid_beam_search(const SidTrie& trie, const SidVocab& vocab, int K, bool constrained,
                                  const std::function<std::vector<double>(const std::vector<int>&)>& next_logprobs) {
    if (K < 1) throw ConfigError("sid_beam_search: K must be >= 1");
    const int depth_total = vocab.levels + 1;

    struct Hyp {
        double logp;
        std::vector<int> codes;
        int trie_node;
    };
    auto worse = [](const Hyp& a, const Hyp& b) {
        if (a.logp != b.logp) return a.logp < b.logp;
        return a.codes > b.codes;  // lexicographically smaller codes first
    };
    std::priority_queue<Hyp, std::vector<Hyp>, decltype(worse)> frontier(worse);
    frontier.push({0.0, {}, trie.root()});

    std::map<std::vector<int>, std::vector<double>> memo;
    auto scores_for = [&](const std::vector<int>& prefix) -> const std::vector<double>& {
        auto it = memo.find(prefix);
        if (it == memo.end()) it = memo.emplace(prefix, next_logprobs(prefix)).first;
        return it->second;
    };

    BeamResult result;
    while (!frontier.empty() && static_cast<int>(result.entries.size()) < K) {
        Hyp h = frontier.top();
        frontier.pop();
        const int depth = static_cast<int>(h.codes.size());
        if (depth == depth_total) {
            const int item = constrained ? trie.node(h.trie_node).item : trie.resolve(h.codes);
            result.entries.push_back({item, h.logp, h.codes});
            continue;
        }
        const std::vector<double>& lp = scores_for(h.codes);
        if (constrained) {
            for (const auto& [code, child] : trie.node(h.trie_node).children) {
                Hyp next{h.logp + lp[static_cast<std::size_t>(vocab.token(depth, code))], h.codes, child};
                next.codes.push_back(code);
                frontier.push(std::move(next));
            }
        } else {
            for (int code = 0; code < vocab.range_at(depth); ++code) {
                Hyp next{h.logp + lp[static_cast<std::size_t>(vocab.token(depth, code))], h.codes, -1};
                next.codes.push_back(code);
                frontier.push(std::move(next));
            }
        }
    }
    result.truncated = static_cast<int>(result.entries.size()) < K;
    return result;
}

inline std::vector<double> log_softmax_row(const Tensor& logits, int row) {
    const int v = logits.cols();
    std::vector<double> out(static_cast<std::size_t>(v));
    double mx = logits.at(row, 0);
    for (int j = 1; j < v; ++j) mx = std::max(mx, logits.at(row, j));
    double z = 0.0;
    for (int j = 0; j < v; ++j) z += std::exp(logits.at(row, j) - mx);
    const double lse = mx + std::log(z);
    for (int j = 0; j < v; ++j) out[static_cast<std::size_t>(j)] = logits.at(row, j) - lse;
    return out;
}

// ----------------------------- TIGER -----------------------------

struct TigerConfig {
    ModelConfig model;
    bool use_text = false;  // TIGER(T): add the projected text representation
    std::uint64_t seed = 1;
};

class TigerModel : public Recommender {
public:
    TigerModel(TigerConfig cfg, const ItemCatalog& catalog, const SidTable& sids, const SidTrie& trie)
        : cfg_(cfg), catalog_(&catalog), sids_(&sids), trie_(&trie), seq_(sids) {
        cfg_.model.validate();
        Rng rng(cfg_.seed);
        const int d = cfg_.model.d_model;
        token_table_ = params_.add("tok", Tensor::randn(seq_.vocab().size(), d, rng, kInitStd));
        bos_ = params_.add("bos", Tensor::randn(1, d, rng, kInitStd));
        pos_ = PositionTables(params_, cfg_.model.max_seq_len, seq_.tokens_per_item(), d, rng);
        if (cfg_.use_text) text_proj_ = TextProjection(params_, catalog.dim(), d, rng);
        encoder_ = TransformerEncoder(params_, "enc", cfg_.model, rng,
                                      cfg_.model.max_seq_len * seq_.tokens_per_item());
        decoder_ = TransformerDecoder(params_, "dec", cfg_.model, rng);
        out_head_ = Linear(params_, "out_head", d, seq_.vocab().size(), rng);
    }

    ParamSet& params() override { return params_; }
    const ParamSet& params() const override { return params_; }
    const SidSequencer& sequencer() const { return seq_; }
    const TigerConfig& config() const { return cfg_; }

    // Token embedding + item position + sid position (+ projected text for
    // the TIGER(T) variant). No input normalization: the composition stays
    // purely additive.
    Tensor build_inputs(const std::vector<int>& history) const {
        auto flat = seq_.flatten(clip(history));
        Tensor rows = embedding_lookup(token_table_, flat.tokens);
        rows = add(rows, embedding_lookup(pos_.item_positions, flat.item_slots));
        rows = add(rows, embedding_lookup(pos_.sid_positions, flat.sid_slots));
        if (cfg_.use_text) {
            rows = add(rows, text_proj_.forward(embedding_lookup(catalog_->text_embeddings, flat.owners)));
        }
        return rows;
    }

    Tensor encode_history(const std::vector<int>& history, bool train, Rng& rng) const {
        return encoder_.forward(build_inputs(history), train, rng);
    }

    // Teacher-forced logits: row j predicts tuple slot j given the BOS plus
    // the first j target tokens.
    Tensor decoder_logits(const Tensor& enc_out, const std::vector<int>& prefix_tokens, bool train, Rng& rng) const {
        std::vector<Tensor> parts = {bos_};
        if (!prefix_tokens.empty()) parts.push_back(embedding_lookup(token_table_, prefix_tokens));
        Tensor x = concat_rows(parts);
        std::vector<int> slots(static_cast<std::size_t>(x.rows()));
        for (int i = 0; i < x.rows(); ++i) slots[static_cast<std::size_t>(i)] = i;
        x = add(x, embedding_lookup(pos_.sid_positions, slots));
        Tensor dec = decoder_.forward(x, enc_out, train, rng);
        return out_head_.forward(dec);
    }

    // Mean next-token loss over the tuple positions, teacher-forced.
    Tensor batch_loss(std::span<const Example> batch, Rng& rng) override {
        if (batch.empty()) throw ContractError("batch_loss: empty batch");
        Tensor total = Tensor::scalar(0.0);
        for (std::size_t e = 0; e < batch.size(); ++e) {
            Rng erng = rng.split(e);
            Tensor enc = encode_history(batch[e].history, true, erng);
            std::vector<int> targets = seq_.target_tokens(batch[e].label);
            std::vector<int> prefix(targets.begin(), targets.end() - 1);
            Tensor logits = decoder_logits(enc, prefix, true, erng);
            total = add(total, softmax_cross_entropy(logits, targets));
        }
        return scale(total, 1.0 / static_cast<double>(batch.size()));
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

    // Sum of teacher-forced token log-probs of the item's tuple.
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

    CandidateList recommend(const std::vector<int>& history, int k) override {
        return beam_search(history, k, true).candidates();
    }

    std::int64_t learnable_embedding_rows() const override { return token_table_.rows(); }

    json meta() const override {
        json m;
        m["variant"] = cfg_.use_text ? "tiger_t" : "tiger";
        m["d_model"] = cfg_.model.d_model;
        m["layers"] = cfg_.model.layers;
        m["vocab"] = seq_.vocab().size();
        m["sid_table_hash"] = hex64(sids_->hash());
        return m;
    }

private:
    std::vector<int> clip(const std::vector<int>& history) const {
        const int limit = cfg_.model.max_seq_len;
        if (static_cast<int>(history.size()) <= limit) return history;
        return {history.end() - limit, history.end()};
    }

    TigerConfig cfg_;
    const ItemCatalog* catalog_;
    const SidTable* sids_;
    const SidTrie* trie_;
    SidSequencer seq_;
    ParamSet params_;
    Tensor token_table_, bos_;
    PositionTables pos_;
    TextProjection text_proj_;
    TransformerEncoder encoder_;
    TransformerDecoder decoder_;
    Linear out_head_;
};

}  // namespace liger
