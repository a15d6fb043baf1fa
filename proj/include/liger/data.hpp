#pragma once

// Interaction-log ingestion, preprocessing (5-core filter, truncation,
// leave-one-out split, cold-item identification) and the synthetic
// desk-scale dataset generator.
//
// File formats:
//   interactions  one JSON object per line: {"user": str, "items": [str,...]}
//                 items are chronological; the loader does not re-sort.
//   embeddings    raw little-endian float32, row-major, plus a JSON sidecar
//                 {"n_items", "dim", "item_ids", "checksum"}; values are
//                 widened to float64 on load.
//   attributes    optional JSON lines {"item": str, "title", "price", ...}.

#include "liger/common.hpp"
#include "liger/rng.hpp"
#include "liger/tensor.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace liger {

using json = nlohmann::json;

// ----------------------------- core containers -----------------------------

struct InteractionLog {
    std::vector<std::string> users;           // parallel to sequences
    std::vector<std::vector<int>> sequences;  // item indices, chronological

    std::size_t n_users() const { return sequences.size(); }
    std::size_t n_actions() const {
        std::size_t n = 0;
        for (const auto& s : sequences) n += s.size();
        return n;
    }
};

struct ItemCatalog {
    std::vector<std::string> item_ids;
    Tensor text_embeddings;              // N x dim, never requires grad
    std::vector<char> cold_flags;        // set after the split is built
    std::vector<std::string> attributes; // raw JSON per item, may be empty

    int n_items() const { return static_cast<int>(item_ids.size()); }
    int dim() const { return text_embeddings.defined() ? text_embeddings.cols() : 0; }

    int index_of(const std::string& id) const {
        auto it = id_to_index_.find(id);
        return it == id_to_index_.end() ? -1 : it->second;
    }

    void rebuild_index() {
        id_to_index_.clear();
        for (int i = 0; i < n_items(); ++i) id_to_index_[item_ids[static_cast<std::size_t>(i)]] = i;
        if (cold_flags.size() != item_ids.size()) cold_flags.assign(item_ids.size(), 0);
        if (attributes.size() != item_ids.size()) attributes.assign(item_ids.size(), std::string());
    }

    std::vector<int> cold_items() const {
        std::vector<int> out;
        for (int i = 0; i < n_items(); ++i) {
            if (cold_flags[static_cast<std::size_t>(i)]) out.push_back(i);
        }
        return out;
    }

private:
    std::unordered_map<std::string, int> id_to_index_;
};

inline ItemCatalog make_catalog(std::vector<std::string> item_ids, Tensor embeddings) {
    if (static_cast<int>(item_ids.size()) != embeddings.rows()) {
        throw DimensionError("make_catalog: item id count does not match embedding rows");
    }
    ItemCatalog cat;
    cat.item_ids = std::move(item_ids);
    cat.text_embeddings = std::move(embeddings);
    cat.text_embeddings.set_requires_grad(false);
    cat.rebuild_index();
    return cat;
}

// One next-item prediction query.
struct Example {
    std::vector<int> history;
    int label = -1;
    int user = -1;
};

struct SplitDataset {
    std::vector<Example> train;  // every next-item pair inside the train region
    std::vector<Example> val;    // one per user, label = second-to-last item
    std::vector<Example> test;   // one per user, label = last item
    int skipped_short = 0;       // sequences shorter than 3, dropped with a count
};

// ----------------------------- preprocessing -----------------------------

// Keep every k-th sequence (k <= 1 keeps everything). Applied before
// filtering for large sources.
inline InteractionLog subsample_every(const InteractionLog& log, int k) {
    if (k <= 1) return log;
    InteractionLog out;
    for (std::size_t i = 0; i < log.sequences.size(); i += static_cast<std::size_t>(k)) {
        out.users.push_back(log.users[i]);
        out.sequences.push_back(log.sequences[i]);
    }
    return out;
}

// Iterates to fixpoint: every surviving item occurs in >= min_count distinct
// users' sequences and every surviving user retains >= min_count events.
inline InteractionLog five_core_filter(const InteractionLog& log, int min_count = 5) {
    const std::size_t n_users = log.sequences.size();
    std::vector<char> user_alive(n_users, 1);
    std::unordered_set<int> dead_items;

    bool changed = true;
    while (changed) {
        changed = false;

        std::unordered_map<int, int> item_users;
        for (std::size_t u = 0; u < n_users; ++u) {
            if (!user_alive[u]) continue;
            std::unordered_set<int> seen;
            for (int it : log.sequences[u]) {
                if (dead_items.count(it)) continue;
                if (seen.insert(it).second) ++item_users[it];
            }
        }
        for (const auto& [it, cnt] : item_users) {
            if (cnt < min_count) {
                dead_items.insert(it);
                changed = true;
            }
        }

        for (std::size_t u = 0; u < n_users; ++u) {
            if (!user_alive[u]) continue;
            int len = 0;
            for (int it : log.sequences[u]) {
                if (!dead_items.count(it)) ++len;
            }
            if (len < min_count) {
                user_alive[u] = 0;
                changed = true;
            }
        }
    }

    InteractionLog out;
    for (std::size_t u = 0; u < n_users; ++u) {
        if (!user_alive[u]) continue;
        std::vector<int> seq;
        for (int it : log.sequences[u]) {
            if (!dead_items.count(it)) seq.push_back(it);
        }
        out.users.push_back(log.users[u]);
        out.sequences.push_back(std::move(seq));
    }
    return out;
}

// Keeps the most recent max_len events of each sequence.
inline InteractionLog truncate_sequences(const InteractionLog& log, int max_len = 20) {
    if (max_len < 1) throw ConfigError("truncate_sequences: max_len must be >= 1");
    InteractionLog out = log;
    for (auto& seq : out.sequences) {
        if (static_cast<int>(seq.size()) > max_len) {
            seq.erase(seq.begin(), seq.end() - max_len);
        }
    }
    return out;
}

// Last item is the test label, second-to-last the validation label, and the
// remaining prefix provides every next-item training pair. Histories keep at
// most max_hist most recent items. Sequences shorter than 3 are dropped and
// counted.
inline SplitDataset leave_one_out_split(const InteractionLog& log, int max_hist = 20) {
    SplitDataset split;
    auto clip = [max_hist](std::vector<int> h) {
        if (static_cast<int>(h.size()) > max_hist) h.erase(h.begin(), h.end() - max_hist);
        return h;
    };
    for (std::size_t u = 0; u < log.sequences.size(); ++u) {
        const auto& seq = log.sequences[u];
        const int n = static_cast<int>(seq.size());
        if (n < 3) {
            ++split.skipped_short;
            continue;
        }
        const int uid = static_cast<int>(u);
        split.test.push_back({clip({seq.begin(), seq.end() - 1}), seq[static_cast<std::size_t>(n - 1)], uid});
        split.val.push_back({clip({seq.begin(), seq.end() - 2}), seq[static_cast<std::size_t>(n - 2)], uid});
        // Train region is seq[0 .. n-3]; emit every (prefix, next) pair inside it.
        for (int k = 1; k <= n - 3; ++k) {
            split.train.push_back({clip({seq.begin(), seq.begin() + k}), seq[static_cast<std::size_t>(k)], uid});
        }
    }
    return split;
}

// Items that never occur inside any training pair (history or label).
inline std::vector<int> identify_cold_items(const SplitDataset& split, int n_items) {
    std::vector<char> in_train(static_cast<std::size_t>(n_items), 0);
    for (const auto& ex : split.train) {
        for (int it : ex.history) in_train[static_cast<std::size_t>(it)] = 1;
        in_train[static_cast<std::size_t>(ex.label)] = 1;
    }
    std::vector<char> referenced(static_cast<std::size_t>(n_items), 0);
    auto mark = [&](const std::vector<Example>& exs) {
        for (const auto& ex : exs) {
            for (int it : ex.history) referenced[static_cast<std::size_t>(it)] = 1;
            referenced[static_cast<std::size_t>(ex.label)] = 1;
        }
    };
    mark(split.val);
    mark(split.test);
    std::vector<int> cold;
    for (int i = 0; i < n_items; ++i) {
        if (!in_train[static_cast<std::size_t>(i)] && referenced[static_cast<std::size_t>(i)]) cold.push_back(i);
    }
    return cold;
}

inline void apply_cold_flags(ItemCatalog& catalog, const std::vector<int>& cold) {
    catalog.cold_flags.assign(static_cast<std::size_t>(catalog.n_items()), 0);
    for (int i : cold) catalog.cold_flags[static_cast<std::size_t>(i)] = 1;
}

// ----------------------------- synthetic generator -----------------------------

struct SynthConfig {
    std::uint64_t seed = 1;
    int n_users = 500;
    int n_items = 200;
    int n_clusters = 8;
    int n_cold = 0;       // items planted so they appear only as final events
    int dim = 768;
    int min_len = 6;
    int max_len = 16;
    double cluster_bias = 0.85;  // probability the walk stays in its cluster
    double center_sigma = 1.0;
    double item_sigma = 0.25;
    int users_per_cold = 6;  // > 5 so planted items survive the 5-core filter
};

struct SynthResult {
    InteractionLog log;
    ItemCatalog catalog;
    std::vector<int> planted_cold;  // item indices emitted only as sequence tails
    std::vector<int> item_cluster;
};

// Clustered item embeddings plus cluster-biased Markov interaction walks.
// Pure function of the config (including its seed).
inline SynthResult synth_generate(const SynthConfig& cfg) {
    if (cfg.n_clusters < 1 || cfg.n_items < cfg.n_clusters) {
        throw ConfigError("synth_generate: need n_items >= n_clusters >= 1");
    }
    if (cfg.n_items - cfg.n_cold < cfg.n_clusters) {
        throw ConfigError("synth_generate: too many cold items for the cluster count");
    }
    if (cfg.n_cold > 0 && cfg.n_users < cfg.n_cold * cfg.users_per_cold) {
        throw ConfigError("synth_generate: need n_users >= n_cold * users_per_cold");
    }
    if (cfg.min_len < 5 || cfg.max_len < cfg.min_len) {
        throw ConfigError("synth_generate: need max_len >= min_len >= 5");
    }

    Rng rng(cfg.seed);
    SynthResult out;

    // Item embeddings around Gaussian cluster centers.
    std::vector<double> centers(static_cast<std::size_t>(cfg.n_clusters) * cfg.dim);
    for (auto& v : centers) v = rng.normal(0.0, cfg.center_sigma);
    Tensor emb = Tensor::zeros(cfg.n_items, cfg.dim);
    out.item_cluster.resize(static_cast<std::size_t>(cfg.n_items));
    std::vector<std::string> ids(static_cast<std::size_t>(cfg.n_items));
    for (int i = 0; i < cfg.n_items; ++i) {
        const int c = i % cfg.n_clusters;
        out.item_cluster[static_cast<std::size_t>(i)] = c;
        ids[static_cast<std::size_t>(i)] = "item" + std::to_string(i);
        for (int j = 0; j < cfg.dim; ++j) {
            emb.at(i, j) = centers[static_cast<std::size_t>(c) * cfg.dim + j] + rng.normal(0.0, cfg.item_sigma);
        }
    }
    out.catalog = make_catalog(std::move(ids), std::move(emb));

    // Cold items live at the tail of the index range and never enter a walk.
    for (int i = cfg.n_items - cfg.n_cold; i < cfg.n_items; ++i) out.planted_cold.push_back(i);
    std::vector<char> is_cold(static_cast<std::size_t>(cfg.n_items), 0);
    for (int i : out.planted_cold) is_cold[static_cast<std::size_t>(i)] = 1;

    // Popularity-weighted members per cluster (walkable items only).
    std::vector<std::vector<int>> members(static_cast<std::size_t>(cfg.n_clusters));
    std::vector<std::vector<double>> cum(static_cast<std::size_t>(cfg.n_clusters));
    for (int i = 0; i < cfg.n_items; ++i) {
        if (!is_cold[static_cast<std::size_t>(i)]) members[static_cast<std::size_t>(i % cfg.n_clusters)].push_back(i);
    }
    for (int c = 0; c < cfg.n_clusters; ++c) {
        double acc = 0.0;
        for (std::size_t r = 0; r < members[static_cast<std::size_t>(c)].size(); ++r) {
            acc += 1.0 / static_cast<double>(r + 1);  // Zipf-like popularity
            cum[static_cast<std::size_t>(c)].push_back(acc);
        }
    }
    auto pick_item = [&](int c) {
        const auto& cw = cum[static_cast<std::size_t>(c)];
        const double r = rng.uniform() * cw.back();
        const std::size_t idx = static_cast<std::size_t>(
            std::lower_bound(cw.begin(), cw.end(), r) - cw.begin());
        return members[static_cast<std::size_t>(c)][std::min(idx, cw.size() - 1)];
    };

    // Which users end with a planted cold item (at most one per user).
    std::vector<int> planted_for_user(static_cast<std::size_t>(cfg.n_users), -1);
    for (int ci = 0; ci < cfg.n_cold; ++ci) {
        for (int j = 0; j < cfg.users_per_cold; ++j) {
            planted_for_user[static_cast<std::size_t>(ci * cfg.users_per_cold + j)] =
                out.planted_cold[static_cast<std::size_t>(ci)];
        }
    }

    for (int u = 0; u < cfg.n_users; ++u) {
        const int planted = planted_for_user[static_cast<std::size_t>(u)];
        const int len = cfg.min_len + static_cast<int>(rng.uniform_below(
                            static_cast<std::uint64_t>(cfg.max_len - cfg.min_len + 1)));
        int cluster = planted >= 0 ? planted % cfg.n_clusters
                                   : static_cast<int>(rng.uniform_below(static_cast<std::uint64_t>(cfg.n_clusters)));
        std::vector<int> seq;
        for (int s = 0; s < len; ++s) {
            if (planted < 0 && s > 0 && rng.uniform() > cfg.cluster_bias && cfg.n_clusters > 1) {
                int next = static_cast<int>(rng.uniform_below(static_cast<std::uint64_t>(cfg.n_clusters - 1)));
                if (next >= cluster) ++next;
                cluster = next;
            }
            int item = pick_item(cluster);
            if (!seq.empty() && item == seq.back() && members[static_cast<std::size_t>(cluster)].size() > 1) {
                item = pick_item(cluster);  // one resample to damp immediate repeats
            }
            seq.push_back(item);
        }
        if (planted >= 0) seq.push_back(planted);
        out.log.users.push_back("user" + std::to_string(u));
        out.log.sequences.push_back(std::move(seq));
    }
    return out;
}

// ----------------------------- file I/O -----------------------------

inline void write_interactions(const InteractionLog& log, const ItemCatalog& catalog, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IngestionError("write_interactions: cannot open " + path);
    for (std::size_t u = 0; u < log.sequences.size(); ++u) {
        json rec;
        rec["user"] = log.users[u];
        json items = json::array();
        for (int it : log.sequences[u]) items.push_back(catalog.item_ids[static_cast<std::size_t>(it)]);
        rec["items"] = std::move(items);
        f << rec.dump() << "\n";
    }
}

inline InteractionLog load_interactions(const std::string& path, const ItemCatalog& catalog) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IngestionError("load_interactions: cannot open " + path);
    InteractionLog log;
    std::string line;
    int line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.empty()) continue;
        json rec = json::parse(line, nullptr, false);
        if (rec.is_discarded() || !rec.contains("user") || !rec.contains("items") || !rec["items"].is_array()) {
            throw IngestionError("load_interactions: malformed record at line " + std::to_string(line_no));
        }
        std::vector<int> seq;
        for (const auto& id : rec["items"]) {
            const int idx = catalog.index_of(id.get<std::string>());
            if (idx < 0) {
                throw IngestionError("load_interactions: unknown item '" + id.get<std::string>() + "' at line " +
                                     std::to_string(line_no));
            }
            seq.push_back(idx);
        }
        if (seq.empty()) {
            throw IngestionError("load_interactions: empty sequence at line " + std::to_string(line_no));
        }
        log.users.push_back(rec["user"].get<std::string>());
        log.sequences.push_back(std::move(seq));
    }
    return log;
}

inline void write_embeddings(const ItemCatalog& catalog, const std::string& bin_path,
                             const std::string& sidecar_path) {
    const int n = catalog.n_items();
    const int d = catalog.dim();
    std::vector<float> buf(static_cast<std::size_t>(n) * static_cast<std::size_t>(d));
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(catalog.text_embeddings.data()[i]);

    std::ofstream bf(bin_path, std::ios::binary);
    if (!bf) throw IngestionError("write_embeddings: cannot open " + bin_path);
    bf.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
    bf.close();

    json side;
    side["n_items"] = n;
    side["dim"] = d;
    side["item_ids"] = catalog.item_ids;
    side["checksum"] = hex64(fnv1a64(buf.data(), buf.size() * sizeof(float)));
    std::ofstream sf(sidecar_path, std::ios::binary);
    if (!sf) throw IngestionError("write_embeddings: cannot open " + sidecar_path);
    sf << side.dump(2) << "\n";
}

inline ItemCatalog load_embeddings(const std::string& bin_path, const std::string& sidecar_path) {
    std::ifstream sf(sidecar_path, std::ios::binary);
    if (!sf) throw IngestionError("load_embeddings: cannot open sidecar " + sidecar_path);
    json side = json::parse(sf, nullptr, false);
    if (side.is_discarded() || !side.contains("n_items") || !side.contains("dim") || !side.contains("item_ids") ||
        !side.contains("checksum")) {
        throw IngestionError("load_embeddings: malformed sidecar " + sidecar_path);
    }
    const int n = side["n_items"].get<int>();
    const int d = side["dim"].get<int>();
    auto ids = side["item_ids"].get<std::vector<std::string>>();
    if (static_cast<int>(ids.size()) != n) {
        throw IngestionError("load_embeddings: sidecar item_ids length disagrees with n_items");
    }

    std::ifstream bf(bin_path, std::ios::binary | std::ios::ate);
    if (!bf) throw IngestionError("load_embeddings: cannot open " + bin_path);
    const auto bytes = static_cast<std::size_t>(bf.tellg());
    const std::size_t expected = static_cast<std::size_t>(n) * static_cast<std::size_t>(d) * sizeof(float);
    if (bytes != expected) {
        throw IngestionError("load_embeddings: " + bin_path + " holds " + std::to_string(bytes) +
                             " bytes, sidecar declares " + std::to_string(expected) + " (n_items=" +
                             std::to_string(n) + ", dim=" + std::to_string(d) + ")");
    }
    std::vector<float> buf(static_cast<std::size_t>(n) * static_cast<std::size_t>(d));
    bf.seekg(0);
    bf.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(expected));
    if (!bf) throw IngestionError("load_embeddings: short read from " + bin_path);

    const std::string checksum = hex64(fnv1a64(buf.data(), buf.size() * sizeof(float)));
    if (checksum != side["checksum"].get<std::string>()) {
        throw IngestionError("load_embeddings: checksum mismatch for " + bin_path);
    }

    Tensor emb = Tensor::zeros(n, d);
    for (std::size_t i = 0; i < buf.size(); ++i) {
        if (!std::isfinite(buf[i])) {
            throw IngestionError("load_embeddings: non-finite value in item '" +
                                 ids[i / static_cast<std::size_t>(d)] + "'");
        }
        emb.data()[i] = static_cast<double>(buf[i]);
    }
    return make_catalog(std::move(ids), std::move(emb));
}

inline void load_attributes(const std::string& path, ItemCatalog& catalog) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IngestionError("load_attributes: cannot open " + path);
    std::string line;
    int line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.empty()) continue;
        json rec = json::parse(line, nullptr, false);
        if (rec.is_discarded() || !rec.contains("item")) {
            throw IngestionError("load_attributes: malformed record at line " + std::to_string(line_no));
        }
        const int idx = catalog.index_of(rec["item"].get<std::string>());
        if (idx < 0) {
            throw IngestionError("load_attributes: unknown item '" + rec["item"].get<std::string>() +
                                 "' at line " + std::to_string(line_no));
        }
        catalog.attributes[static_cast<std::size_t>(idx)] = rec.dump();
    }
}

}  // namespace liger
