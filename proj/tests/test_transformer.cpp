#include "liger/transformer.hpp"

#include "support/gradcheck.hpp"

#include <catch2/catch_amalgamated.hpp>

using namespace liger;

namespace {

ModelConfig small_cfg(int layers = 1) {
    ModelConfig cfg;
    cfg.layers = layers;
    cfg.d_model = 12;
    cfg.heads = 3;
    cfg.ffn_hidden = 16;
    cfg.dropout = 0.0;
    cfg.max_seq_len = 8;
    return cfg;
}

Tensor random_rows(int n, int d, Rng& rng) {
    Tensor t = Tensor::zeros(n, d);
    for (auto& v : t.values()) v = rng.normal(0.0, 0.7);
    return t;
}

}  // namespace

TEST_CASE("model config honors six heads at width 128 via 6x21 projection") {
    ModelConfig cfg;  // paper defaults
    cfg.validate();
    REQUIRE(cfg.d_model == 128);
    REQUIRE(cfg.heads == 6);
    REQUIRE(cfg.head_dim() == 21);

    ParamSet params;
    Rng rng(1);
    MultiHeadAttention attn(params, "attn", cfg, rng);
    REQUIRE(params.get("attn.q.w").cols() == 126);
    REQUIRE(params.get("attn.out.w").rows() == 126);
    REQUIRE(params.get("attn.out.w").cols() == 128);
}

TEST_CASE("zero-layer encoder without final norm is the identity") {
    ParamSet params;
    Rng rng(2);
    TransformerEncoder enc(params, "enc", small_cfg(0), rng, 64, /*final_norm=*/false);
    Rng fwd(3);
    Tensor x = random_rows(5, 12, fwd);
    Tensor y = enc.forward(x, false, fwd);
    REQUIRE(y.values() == x.values());
}

TEST_CASE("encoder rejects overlong inputs") {
    ParamSet params;
    Rng rng(2);
    TransformerEncoder enc(params, "enc", small_cfg(1), rng, 6);
    Rng fwd(3);
    Tensor x = random_rows(7, 12, fwd);
    REQUIRE_THROWS_AS(enc.forward(x, false, fwd), DimensionError);
}

TEST_CASE("one-layer unmasked encoder is permutation equivariant") {
    ParamSet params;
    Rng rng(5);
    TransformerEncoder enc(params, "enc", small_cfg(1), rng, 64);
    Rng fwd(7);
    Tensor x = random_rows(6, 12, fwd);
    Tensor y = enc.forward(x, false, fwd);

    const std::vector<int> perm = {3, 0, 5, 1, 4, 2};
    Tensor xp = Tensor::zeros(6, 12);
    for (int i = 0; i < 6; ++i) {
        for (int j = 0; j < 12; ++j) xp.at(i, j) = x.at(perm[static_cast<std::size_t>(i)], j);
    }
    Tensor yp = enc.forward(xp, false, fwd);
    for (int i = 0; i < 6; ++i) {
        for (int j = 0; j < 12; ++j) {
            REQUIRE_THAT(yp.at(i, j), Catch::Matchers::WithinAbs(y.at(perm[static_cast<std::size_t>(i)], j), 1e-12));
        }
    }
}

TEST_CASE("gradient check through one encoder layer") {
    ParamSet params;
    Rng rng(11);
    TransformerEncoder enc(params, "enc", small_cfg(1), rng, 64);
    Rng data_rng(13);
    Tensor x = random_rows(4, 12, data_rng);
    x.set_requires_grad(true);
    Tensor w = random_rows(4, 12, data_rng);
    std::vector<Tensor> checked = {x};
    for (auto& [name, t] : params.entries()) checked.push_back(t);
    Rng fwd(0);
    auto loss = [&] { return sum_all(mul(enc.forward(x, false, fwd), w)); };
    REQUIRE(ligertest::gradcheck(loss, checked, 1e-5, 8).max_error < 1e-4);
}

TEST_CASE("decoder causality: future tokens cannot affect earlier outputs") {
    ParamSet params;
    Rng rng(17);
    TransformerDecoder dec(params, "dec", small_cfg(2), rng);
    Rng data_rng(19);
    Tensor enc_out = random_rows(5, 12, data_rng);
    Tensor targets = random_rows(4, 12, data_rng);
    Rng fwd(0);
    Tensor base = dec.forward(targets, enc_out, false, fwd);

    Tensor altered = targets.clone();
    altered.at(3, 0) += 5.0;  // change the last target token
    Tensor out = dec.forward(altered, enc_out, false, fwd);
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 12; ++j) {
            REQUIRE(out.at(i, j) == base.at(i, j));
        }
    }
    // The altered position itself must change.
    bool changed = false;
    for (int j = 0; j < 12; ++j) changed = changed || out.at(3, j) != base.at(3, j);
    REQUIRE(changed);
}

TEST_CASE("decoder with no encoder output ignores the cross-attention weights") {
    ParamSet params;
    Rng rng(23);
    TransformerDecoder dec(params, "dec", small_cfg(2), rng);
    Rng data_rng(29);
    Tensor targets = random_rows(4, 12, data_rng);
    Rng fwd(0);
    Tensor lm = dec.forward(targets, Tensor(), false, fwd);

    // Scrambling every cross-attention parameter must not move the output.
    for (auto& [name, t] : params.entries()) {
        if (name.find(".cross.") != std::string::npos) {
            for (auto& v : t.values()) v = 123.456;
        }
    }
    Tensor lm2 = dec.forward(targets, Tensor(), false, fwd);
    REQUIRE(lm.values() == lm2.values());
}

TEST_CASE("teacher-forced decoder equals per-prefix recomputation") {
    ParamSet params;
    Rng rng(31);
    TransformerDecoder dec(params, "dec", small_cfg(2), rng);
    Rng data_rng(37);
    Tensor enc_out = random_rows(6, 12, data_rng);
    Tensor targets = random_rows(5, 12, data_rng);
    Rng fwd(0);
    Tensor full = dec.forward(targets, enc_out, false, fwd);
    for (int len = 1; len <= 5; ++len) {
        Tensor prefix = slice_rows(targets, 0, len);
        Tensor out = dec.forward(prefix, enc_out, false, fwd);
        for (int j = 0; j < 12; ++j) {
            REQUIRE_THAT(out.at(len - 1, j), Catch::Matchers::WithinAbs(full.at(len - 1, j), 1e-10));
        }
    }
}

TEST_CASE("eval-mode forward is a pure function of parameters and inputs") {
    ParamSet params;
    Rng rng(41);
    ModelConfig cfg = small_cfg(2);
    cfg.dropout = 0.3;  // dropout present but inert at eval
    TransformerEncoder enc(params, "enc", cfg, rng, 64);
    Rng data_rng(43);
    Tensor x = random_rows(5, 12, data_rng);
    Rng fwd_a(7);
    Rng fwd_b(999);
    Tensor a = enc.forward(x, false, fwd_a);
    Tensor b = enc.forward(x, false, fwd_b);
    REQUIRE(a.values() == b.values());
}

TEST_CASE("text projection is affine") {
    ParamSet params;
    Rng rng(47);
    TextProjection proj(params, 24, 12, rng);
    Tensor zero = Tensor::zeros(1, 24);
    Tensor bias = proj.forward(zero);
    REQUIRE(bias.values() == params.get("text_proj.b").values());

    Rng data_rng(53);
    Tensor a = random_rows(1, 24, data_rng);
    Tensor b = random_rows(1, 24, data_rng);
    Tensor lhs = proj.forward(add(a, b));
    Tensor rhs = sub(add(proj.forward(a), proj.forward(b)), proj.forward(zero));
    for (std::size_t i = 0; i < lhs.size(); ++i) {
        REQUIRE_THAT(lhs.data()[i], Catch::Matchers::WithinAbs(rhs.data()[i], 1e-12));
    }

    // Gradient check through the projection.
    Tensor w = random_rows(1, 12, data_rng);
    auto loss = [&] { return sum_all(mul(proj.forward(a), w)); };
    std::vector<Tensor> checked = {params.get("text_proj.w"), params.get("text_proj.b")};
    REQUIRE(ligertest::gradcheck(loss, checked).max_error < 1e-6);
}

TEST_CASE("dropout disturbs training forward but leaves eval untouched") {
    ParamSet params;
    Rng rng(59);
    ModelConfig cfg = small_cfg(1);
    cfg.dropout = 0.5;
    TransformerEncoder enc(params, "enc", cfg, rng, 64);
    Rng data_rng(61);
    Tensor x = random_rows(4, 12, data_rng);
    Rng fwd_a(1);
    Rng fwd_b(2);
    Tensor train_a = enc.forward(x, true, fwd_a);
    Tensor train_b = enc.forward(x, true, fwd_b);
    REQUIRE(train_a.values() != train_b.values());
}
