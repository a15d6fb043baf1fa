#pragma once

// Ranked candidate lists: the output of every retrieval path and the input
// to every metric. Ordering is always score descending with item index
// ascending as the tie-break.

#include <algorithm>
#include <vector>

namespace liger {

struct ScoredItem {
    int item = -1;
    double score = 0.0;
};

using CandidateList = std::vector<ScoredItem>;

inline void sort_candidates(CandidateList& list) {
    std::stable_sort(list.begin(), list.end(), [](const ScoredItem& a, const ScoredItem& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.item < b.item;
    });
}

inline bool contains_item(const CandidateList& list, int item, std::size_t top_k) {
    const std::size_t n = std::min(top_k, list.size());
    for (std::size_t i = 0; i < n; ++i) {
        if (list[i].item == item) return true;
    }
    return false;
}

// 1-based rank of the item, 0 when absent.
inline int rank_of(const CandidateList& list, int item) {
    for (std::size_t i = 0; i < list.size(); ++i) {
        if (list[i].item == item) return static_cast<int>(i) + 1;
    }
    return 0;
}

}  // namespace liger
