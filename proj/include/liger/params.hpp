#pragma once

// Ordered, named parameter registry. Registration order is the canonical
// order for optimizer state and checkpoint blobs.

#include "liger/common.hpp"
#include "liger/tensor.hpp"

#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace liger {

class ParamSet {
public:
    Tensor& add(const std::string& name, Tensor t) {
        if (index_.count(name)) throw ContractError("ParamSet: duplicate parameter '" + name + "'");
        t.set_requires_grad(true);
        index_[name] = items_.size();
        items_.emplace_back(name, std::move(t));
        return items_.back().second;
    }

    bool has(const std::string& name) const { return index_.count(name) > 0; }

    Tensor& get(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw ContractError("ParamSet: unknown parameter '" + name + "'");
        return items_[it->second].second;
    }
    const Tensor& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ContractError("ParamSet: unknown parameter '" + name + "'");
        return items_[it->second].second;
    }

    std::vector<std::pair<std::string, Tensor>>& entries() { return items_; }
    const std::vector<std::pair<std::string, Tensor>>& entries() const { return items_; }

    std::size_t count() const { return items_.size(); }

    std::size_t total_values() const {
        std::size_t n = 0;
        for (const auto& [name, t] : items_) n += t.size();
        return n;
    }

    // Deep snapshot of all values in registration order.
    std::vector<std::vector<double>> snapshot() const {
        std::vector<std::vector<double>> out;
        out.reserve(items_.size());
        for (const auto& [name, t] : items_) out.push_back(t.values());
        return out;
    }

    void restore(const std::vector<std::vector<double>>& snap) {
        if (snap.size() != items_.size()) throw ContractError("ParamSet::restore: entry count mismatch");
        for (std::size_t i = 0; i < snap.size(); ++i) {
            if (snap[i].size() != items_[i].second.size()) {
                throw ContractError("ParamSet::restore: size mismatch for '" + items_[i].first + "'");
            }
            items_[i].second.values() = snap[i];
        }
    }

private:
    std::vector<std::pair<std::string, Tensor>> items_;
    std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace liger
