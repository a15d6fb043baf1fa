#pragma once

// Sequence-model building blocks shared by the three retrieval models:
// pre-norm encoder and decoder stacks, multi-head attention, learned
// position tables and the 768->d text projection.
//
// Head geometry: d_model does not have to divide evenly by the head count.
// Heads project to heads*floor(d_model/heads) concatenated channels and an
// affine output map takes them back to d_model, so the stated head count and
// width are both honored (128 with 6 heads gives 6x21 -> 128).

#include "liger/common.hpp"
#include "liger/params.hpp"
#include "liger/rng.hpp"
#include "liger/tensor.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace liger {

struct ModelConfig {
    int layers = 6;
    int d_model = 128;
    int heads = 6;
    int ffn_hidden = 1024;
    double dropout = 0.2;
    int max_seq_len = 20;  // item positions

    int head_dim() const { return d_model / heads; }

    void validate() const {
        if (layers < 0) throw ConfigError("ModelConfig: layers must be >= 0");
        if (heads < 1 || d_model < heads) throw ConfigError("ModelConfig: need 1 <= heads <= d_model");
        if (ffn_hidden < 1 || max_seq_len < 1) throw ConfigError("ModelConfig: bad ffn_hidden/max_seq_len");
        if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("ModelConfig: dropout must be in [0, 1)");
    }
};

constexpr double kInitStd = 0.02;

// Additive causal mask: 0 at or below the diagonal, -1e30 above.
inline Tensor causal_mask(int n) {
    Tensor m = Tensor::zeros(n, n);
    for (int i = 0; i < n; ++i) {
        for (int j = i + 1; j < n; ++j) m.at(i, j) = -1e30;
    }
    return m;
}

// ----------------------------- layers -----------------------------

class Linear {
public:
    Linear() = default;
    Linear(ParamSet& params, const std::string& name, int in, int out, Rng& rng)
        : w_(params.add(name + ".w", Tensor::randn(in, out, rng, kInitStd))),
          b_(params.add(name + ".b", Tensor::zeros(1, out))) {}

    Tensor forward(const Tensor& x) const { return add_row_broadcast(matmul(x, w_), b_); }

    const Tensor& weight() const { return w_; }
    const Tensor& bias() const { return b_; }

private:
    Tensor w_, b_;
};

class LayerNorm {
public:
    LayerNorm() = default;
    LayerNorm(ParamSet& params, const std::string& name, int d)
        : gain_(params.add(name + ".gain", Tensor::from(1, d, std::vector<double>(static_cast<std::size_t>(d), 1.0)))),
          bias_(params.add(name + ".bias", Tensor::zeros(1, d))) {}

    Tensor forward(const Tensor& x) const { return layer_norm_rows(x, gain_, bias_, 1e-6); }

private:
    Tensor gain_, bias_;
};

class MultiHeadAttention {
public:
    MultiHeadAttention() = default;
    MultiHeadAttention(ParamSet& params, const std::string& name, const ModelConfig& cfg, Rng& rng)
        : heads_(cfg.heads), head_dim_(cfg.head_dim()) {
        const int inner = heads_ * head_dim_;
        q_ = Linear(params, name + ".q", cfg.d_model, inner, rng);
        k_ = Linear(params, name + ".k", cfg.d_model, inner, rng);
        v_ = Linear(params, name + ".v", cfg.d_model, inner, rng);
        out_ = Linear(params, name + ".out", inner, cfg.d_model, rng);
    }

    // queries: n x d, keys/values source: m x d, mask: optional additive n x m.
    Tensor forward(const Tensor& queries, const Tensor& keys_values, const Tensor* mask) const {
        Tensor q = q_.forward(queries);
        Tensor k = k_.forward(keys_values);
        Tensor v = v_.forward(keys_values);
        const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim_));
        std::vector<Tensor> ctx;
        ctx.reserve(static_cast<std::size_t>(heads_));
        for (int h = 0; h < heads_; ++h) {
            Tensor qh = slice_cols(q, h * head_dim_, head_dim_);
            Tensor kh = slice_cols(k, h * head_dim_, head_dim_);
            Tensor vh = slice_cols(v, h * head_dim_, head_dim_);
            Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt);
            if (mask) scores = add(scores, *mask);
            ctx.push_back(matmul(softmax_rows(scores), vh));
        }
        return out_.forward(concat_cols(ctx));
    }

private:
    int heads_ = 1;
    int head_dim_ = 1;
    Linear q_, k_, v_, out_;
};

class FeedForward {
public:
    FeedForward() = default;
    FeedForward(ParamSet& params, const std::string& name, const ModelConfig& cfg, Rng& rng)
        : w1_(params, name + ".w1", cfg.d_model, cfg.ffn_hidden, rng),
          w2_(params, name + ".w2", cfg.ffn_hidden, cfg.d_model, rng) {}

    Tensor forward(const Tensor& x) const { return w2_.forward(relu(w1_.forward(x))); }

private:
    Linear w1_, w2_;
};

// ----------------------------- encoder -----------------------------

class EncoderBlock {
public:
    EncoderBlock(ParamSet& params, const std::string& name, const ModelConfig& cfg, Rng& rng)
        : ln1_(params, name + ".ln1", cfg.d_model),
          ln2_(params, name + ".ln2", cfg.d_model),
          attn_(params, name + ".attn", cfg, rng),
          ffn_(params, name + ".ffn", cfg, rng),
          rate_(cfg.dropout) {}

    Tensor forward(const Tensor& x, bool train, Rng& rng) const {
        Tensor n1 = ln1_.forward(x);
        Tensor h = add(x, dropout(attn_.forward(n1, n1, nullptr), rate_, rng, train));
        Tensor n2 = ln2_.forward(h);
        return add(h, dropout(ffn_.forward(n2), rate_, rng, train));
    }

private:
    LayerNorm ln1_, ln2_;
    MultiHeadAttention attn_;
    FeedForward ffn_;
    double rate_;
};

class TransformerEncoder {
public:
    TransformerEncoder() = default;
    // max_rows is the token-level input limit (items x tokens-per-item).
    TransformerEncoder(ParamSet& params, const std::string& name, const ModelConfig& cfg, Rng& rng, int max_rows,
                       bool final_norm = true)
        : max_rows_(max_rows) {
        for (int l = 0; l < cfg.layers; ++l) {
            blocks_.emplace_back(params, name + "." + std::to_string(l), cfg, rng);
        }
        if (final_norm) ln_ = LayerNorm(params, name + ".final_ln", cfg.d_model);
        has_final_norm_ = final_norm;
    }

    Tensor forward(const Tensor& inputs, bool train, Rng& rng) const {
        if (inputs.rows() > max_rows_) {
            throw DimensionError("encoder: input length " + std::to_string(inputs.rows()) + " exceeds limit " +
                                 std::to_string(max_rows_));
        }
        Tensor h = inputs;
        for (const auto& b : blocks_) h = b.forward(h, train, rng);
        if (has_final_norm_) h = ln_.forward(h);
        return h;
    }

private:
    std::vector<EncoderBlock> blocks_;
    LayerNorm ln_;
    bool has_final_norm_ = false;
    int max_rows_ = 0;
};

// ----------------------------- decoder -----------------------------

class DecoderBlock {
public:
    DecoderBlock(ParamSet& params, const std::string& name, const ModelConfig& cfg, Rng& rng)
        : ln1_(params, name + ".ln1", cfg.d_model),
          ln2_(params, name + ".ln2", cfg.d_model),
          ln3_(params, name + ".ln3", cfg.d_model),
          self_attn_(params, name + ".self", cfg, rng),
          cross_attn_(params, name + ".cross", cfg, rng),
          ffn_(params, name + ".ffn", cfg, rng),
          rate_(cfg.dropout) {}

    // enc_out undefined skips the cross-attention sublayer (pure LM mode).
    Tensor forward(const Tensor& x, const Tensor& enc_out, const Tensor& mask, bool train, Rng& rng) const {
        Tensor n1 = ln1_.forward(x);
        Tensor h = add(x, dropout(self_attn_.forward(n1, n1, &mask), rate_, rng, train));
        if (enc_out.defined() && enc_out.rows() > 0) {
            Tensor n2 = ln2_.forward(h);
            h = add(h, dropout(cross_attn_.forward(n2, enc_out, nullptr), rate_, rng, train));
        }
        Tensor n3 = ln3_.forward(h);
        return add(h, dropout(ffn_.forward(n3), rate_, rng, train));
    }

private:
    LayerNorm ln1_, ln2_, ln3_;
    MultiHeadAttention self_attn_, cross_attn_;
    FeedForward ffn_;
    double rate_;
};

class TransformerDecoder {
public:
    TransformerDecoder() = default;
    TransformerDecoder(ParamSet& params, const std::string& name, const ModelConfig& cfg, Rng& rng,
                       bool final_norm = true) {
        for (int l = 0; l < cfg.layers; ++l) {
            blocks_.emplace_back(params, name + "." + std::to_string(l), cfg, rng);
        }
        if (final_norm) ln_ = LayerNorm(params, name + ".final_ln", cfg.d_model);
        has_final_norm_ = final_norm;
    }

    // Causal self-attention over the target prefix plus optional cross
    // attention into the encoder output.
    Tensor forward(const Tensor& targets, const Tensor& enc_out, bool train, Rng& rng) const {
        Tensor mask = causal_mask(targets.rows());
        Tensor h = targets;
        for (const auto& b : blocks_) h = b.forward(h, enc_out, mask, train, rng);
        if (has_final_norm_) h = ln_.forward(h);
        return h;
    }

private:
    std::vector<DecoderBlock> blocks_;
    LayerNorm ln_;
    bool has_final_norm_ = false;
};

// ----------------------------- shared tables -----------------------------

struct PositionTables {
    Tensor item_positions;  // max_seq_len x d, one row per history slot
    Tensor sid_positions;   // (levels+1) x d, one row per token within an item

    PositionTables() = default;
    PositionTables(ParamSet& params, int max_seq_len, int sid_slots, int d, Rng& rng)
        : item_positions(params.add("pos.item", Tensor::randn(max_seq_len, d, rng, kInitStd))),
          sid_positions(params.add("pos.sid", Tensor::randn(sid_slots, d, rng, kInitStd))) {}
};

// Learnable affine map from the 768-d content space into the model width.
class TextProjection {
public:
    TextProjection() = default;
    TextProjection(ParamSet& params, int text_dim, int d, Rng& rng)
        : lin_(params, "text_proj", text_dim, d, rng) {}

    Tensor forward(const Tensor& text_rows) const { return lin_.forward(text_rows); }

private:
    Linear lin_;
};

}  // namespace liger
