#pragma once

// Semantic IDs: the m-tuple of codebook indices plus a dedup token that
// addresses an item for generative decoding, the per-catalog assignment
// table, and the prefix trie used by constrained beam search.

#include "liger/common.hpp"
#include "liger/data.hpp"

#include <nlohmann/json.hpp>

#include <fstream>
#include <map>
#include <string>
#include <vector>

namespace liger {

struct SemanticId {
    std::vector<int> codes;  // one entry per quantizer level
    int dedup = 0;

    // codes followed by the dedup token; length levels+1.
    std::vector<int> full() const {
        std::vector<int> out = codes;
        out.push_back(dedup);
        return out;
    }

    bool operator==(const SemanticId& o) const { return codes == o.codes && dedup == o.dedup; }
};

// ----------------------------- assignment table -----------------------------

class SidTable {
public:
    SidTable() = default;
    SidTable(int levels, int codebook_size, std::vector<SemanticId> sids)
        : levels_(levels), codebook_size_(codebook_size), sids_(std::move(sids)) {
        for (const auto& s : sids_) {
            if (static_cast<int>(s.codes.size()) != levels_) {
                throw ContractError("SidTable: tuple length disagrees with level count");
            }
            dedup_range_ = std::max(dedup_range_, s.dedup + 1);
        }
    }

    int levels() const { return levels_; }
    int codebook_size() const { return codebook_size_; }
    int dedup_range() const { return dedup_range_; }
    int n_items() const { return static_cast<int>(sids_.size()); }
    const SemanticId& of(int item) const {
        if (item < 0 || item >= n_items()) throw IndexError("SidTable: item " + std::to_string(item) + " out of range");
        return sids_[static_cast<std::size_t>(item)];
    }
    const std::vector<SemanticId>& all() const { return sids_; }

    // Canonical content hash; checkpoints store it so a model is never paired
    // with a different assignment.
    std::uint64_t hash() const {
        std::uint64_t h = fnv1a64(&levels_, sizeof(levels_));
        h = fnv1a64(&codebook_size_, sizeof(codebook_size_), h);
        for (const auto& s : sids_) {
            for (int c : s.codes) h = fnv1a64(&c, sizeof(c), h);
            h = fnv1a64(&s.dedup, sizeof(s.dedup), h);
        }
        return h;
    }

    void save_jsonl(const std::string& path, const ItemCatalog& catalog) const {
        if (catalog.n_items() != n_items()) throw ContractError("SidTable::save: catalog size mismatch");
        std::ofstream f(path, std::ios::binary);
        if (!f) throw IngestionError("SidTable::save: cannot open " + path);
        for (int i = 0; i < n_items(); ++i) {
            json rec;
            rec["item"] = catalog.item_ids[static_cast<std::size_t>(i)];
            rec["sid"] = sids_[static_cast<std::size_t>(i)].full();
            f << rec.dump() << "\n";
        }
    }

    static SidTable load_jsonl(const std::string& path, const ItemCatalog& catalog, int levels, int codebook_size) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw IngestionError("SidTable::load: cannot open " + path);
        std::vector<SemanticId> sids(static_cast<std::size_t>(catalog.n_items()));
        std::vector<char> seen(static_cast<std::size_t>(catalog.n_items()), 0);
        std::string line;
        int line_no = 0;
        while (std::getline(f, line)) {
            ++line_no;
            if (line.empty()) continue;
            json rec = json::parse(line, nullptr, false);
            if (rec.is_discarded() || !rec.contains("item") || !rec.contains("sid")) {
                throw IngestionError("SidTable::load: malformed record at line " + std::to_string(line_no));
            }
            const int idx = catalog.index_of(rec["item"].get<std::string>());
            if (idx < 0) {
                throw IngestionError("SidTable::load: unknown item at line " + std::to_string(line_no));
            }
            auto tuple = rec["sid"].get<std::vector<int>>();
            if (static_cast<int>(tuple.size()) != levels + 1) {
                throw IngestionError("SidTable::load: tuple length mismatch at line " + std::to_string(line_no));
            }
            SemanticId s;
            s.codes.assign(tuple.begin(), tuple.end() - 1);
            s.dedup = tuple.back();
            sids[static_cast<std::size_t>(idx)] = std::move(s);
            seen[static_cast<std::size_t>(idx)] = 1;
        }
        for (int i = 0; i < catalog.n_items(); ++i) {
            if (!seen[static_cast<std::size_t>(i)]) {
                throw IngestionError("SidTable::load: no SID for item '" + catalog.item_ids[static_cast<std::size_t>(i)] + "'");
            }
        }
        return SidTable(levels, codebook_size, std::move(sids));
    }

private:
    int levels_ = 0;
    int codebook_size_ = 0;
    int dedup_range_ = 1;
    std::vector<SemanticId> sids_;
};

// ----------------------------- vocabulary layout -----------------------------

// Per-level disjoint token ranges: level-j code c maps to token j*t + c, the
// dedup index d to token levels*t + d. No cross-level aliasing.
struct SidVocab {
    int levels = 0;
    int codebook_size = 0;
    int dedup_range = 1;

    int size() const { return levels * codebook_size + dedup_range; }

    int range_at(int depth) const { return depth < levels ? codebook_size : dedup_range; }

    int token(int depth, int code) const {
        if (depth < 0 || depth > levels) throw IndexError("SidVocab: bad depth");
        if (code < 0 || code >= range_at(depth)) {
            throw IndexError("SidVocab: code out of range at depth " + std::to_string(depth));
        }
        return depth < levels ? depth * codebook_size + code : levels * codebook_size + code;
    }
};

// Flattens item histories into token sequences with per-token indices.
class SidSequencer {
public:
    explicit SidSequencer(const SidTable& sids)
        : sids_(&sids), vocab_{sids.levels(), sids.codebook_size(), sids.dedup_range()} {}

    const SidVocab& vocab() const { return vocab_; }
    int tokens_per_item() const { return vocab_.levels + 1; }

    struct Flat {
        std::vector<int> tokens;      // global token ids, length tokens_per_item * n
        std::vector<int> item_slots;  // history position of the owning item
        std::vector<int> sid_slots;   // slot within the tuple, 0..levels
        std::vector<int> owners;      // owning item index
    };

    Flat flatten(const std::vector<int>& history) const {
        if (history.empty()) throw ContractError("SidSequencer: empty history");
        Flat flat;
        const int per = tokens_per_item();
        flat.tokens.reserve(history.size() * static_cast<std::size_t>(per));
        for (std::size_t p = 0; p < history.size(); ++p) {
            const auto tuple = sids_->of(history[p]).full();
            for (int j = 0; j < per; ++j) {
                flat.tokens.push_back(vocab_.token(j, tuple[static_cast<std::size_t>(j)]));
                flat.item_slots.push_back(static_cast<int>(p));
                flat.sid_slots.push_back(j);
                flat.owners.push_back(history[p]);
            }
        }
        return flat;
    }

    std::vector<int> target_tokens(int item) const {
        const auto tuple = sids_->of(item).full();
        std::vector<int> out;
        for (int j = 0; j < tokens_per_item(); ++j) out.push_back(vocab_.token(j, tuple[static_cast<std::size_t>(j)]));
        return out;
    }

private:
    const SidTable* sids_;
    SidVocab vocab_;
};

// ----------------------------- prefix trie -----------------------------

// Trie over the assigned (levels+1)-tuples. Children are ordered maps keyed
// by the raw code value at that depth, which gives deterministic iteration
// for tie-breaking during search.

class SidTrie {
public:
    SidTrie() { nodes_.push_back(Node{}); }

    explicit SidTrie(const SidTable& table) : SidTrie() {
        depth_ = table.levels() + 1;
        for (int item = 0; item < table.n_items(); ++item) {
            insert(table.of(item).full(), item);
        }
    }

    struct Node {
        std::map<int, int> children;  // code value -> node index
        int item = -1;                // >= 0 only at leaves
    };

    int root() const { return 0; }
    const Node& node(int idx) const { return nodes_[static_cast<std::size_t>(idx)]; }
    int depth() const { return depth_; }
    int leaf_count() const { return leaf_count_; }

    // -1 when the path does not exist.
    int child(int idx, int code) const {
        const auto& ch = nodes_[static_cast<std::size_t>(idx)].children;
        auto it = ch.find(code);
        return it == ch.end() ? -1 : it->second;
    }

    // Item for a full tuple, -1 when absent.
    int resolve(const std::vector<int>& tuple) const {
        int cur = 0;
        for (int code : tuple) {
            cur = child(cur, code);
            if (cur < 0) return -1;
        }
        return nodes_[static_cast<std::size_t>(cur)].item;
    }

private:
    void insert(const std::vector<int>& tuple, int item) {
        if (static_cast<int>(tuple.size()) != depth_) throw ContractError("SidTrie: tuple depth mismatch");
        int cur = 0;
        for (std::size_t level = 0; level < tuple.size(); ++level) {
            auto& ch = nodes_[static_cast<std::size_t>(cur)].children;
            auto it = ch.find(tuple[level]);
            if (it == ch.end()) {
                nodes_.push_back(Node{});
                const int fresh = static_cast<int>(nodes_.size()) - 1;
                nodes_[static_cast<std::size_t>(cur)].children.emplace(tuple[level], fresh);
                cur = fresh;
            } else {
                cur = it->second;
            }
        }
        Node& leaf = nodes_[static_cast<std::size_t>(cur)];
        if (leaf.item >= 0 || !leaf.children.empty()) {
            throw ContractError("SidTrie: duplicate or conflicting tuple for item " + std::to_string(item));
        }
        leaf.item = item;
        ++leaf_count_;
    }

    std::vector<Node> nodes_;
    int depth_ = 0;
    int leaf_count_ = 0;
};

}  // namespace liger
