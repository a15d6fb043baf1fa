#pragma once

// Common surface the trainer, evaluator and CLI use to drive any of the
// retrieval models.

#include "liger/data.hpp"
#include "liger/params.hpp"
#include "liger/ranking.hpp"
#include "liger/rng.hpp"
#include "liger/tensor.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <span>
#include <vector>

namespace liger {

class Recommender {
public:
    virtual ~Recommender() = default;

    virtual ParamSet& params() = 0;
    virtual const ParamSet& params() const = 0;

    // Mean training loss for the batch, built under the active tape.
    virtual Tensor batch_loss(std::span<const Example> batch, Rng& rng) = 0;

    // Eval-mode inference: top-k candidates for the history, model-specific
    // retrieval path (beam search, full scan, or hybrid).
    virtual CandidateList recommend(const std::vector<int>& history, int k) = 0;

    // Invalidate derived caches after parameters were mutated externally
    // (checkpoint load).
    virtual void after_params_changed() {}

    // Rows of the learnable item/token embedding table (Table-1 accounting).
    virtual std::int64_t learnable_embedding_rows() const = 0;

    virtual nlohmann::json meta() const = 0;
};

}  // namespace liger
