#pragma once

// Hand-built tiny worlds (catalog + SID table + trie) for model tests. SIDs
// are assigned arithmetically so tuples are unique and predictable without
// training a quantizer.

#include "liger/data.hpp"
#include "liger/sid.hpp"
#include "liger/transformer.hpp"

#include <string>
#include <vector>

namespace ligertest {

struct TinyWorld {
    liger::ItemCatalog catalog;
    liger::SidTable sids;
    liger::SidTrie trie;
};

inline TinyWorld make_world(int n_items, int dim, int levels, int codebook_size, std::uint64_t seed = 1) {
    liger::Rng rng(seed);
    liger::Tensor emb = liger::Tensor::zeros(n_items, dim);
    for (auto& v : emb.values()) v = rng.normal(0.0, 1.0);
    std::vector<std::string> ids;
    for (int i = 0; i < n_items; ++i) ids.push_back("it" + std::to_string(i));

    std::vector<liger::SemanticId> sids;
    std::map<std::vector<int>, int> dedup;
    for (int i = 0; i < n_items; ++i) {
        liger::SemanticId s;
        int rest = i;
        for (int l = 0; l < levels; ++l) {
            s.codes.push_back(rest % codebook_size);
            rest /= codebook_size;
        }
        s.dedup = dedup[s.codes]++;
        sids.push_back(std::move(s));
    }

    TinyWorld world{liger::make_catalog(std::move(ids), emb),
                    liger::SidTable(levels, codebook_size, std::move(sids)),
                    liger::SidTrie()};
    world.trie = liger::SidTrie(world.sids);
    return world;
}

inline liger::ModelConfig tiny_model_cfg(int layers = 1, int d = 16, double dropout = 0.0) {
    liger::ModelConfig cfg;
    cfg.layers = layers;
    cfg.d_model = d;
    cfg.heads = 2;
    cfg.ffn_hidden = 24;
    cfg.dropout = dropout;
    cfg.max_seq_len = 6;
    return cfg;
}

}  // namespace ligertest
