#include "liger/rqvae.hpp"

#include "support/gradcheck.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <set>

using namespace liger;

namespace {

RqVaeConfig tiny_cfg() {
    RqVaeConfig cfg;
    cfg.input_dim = 2;
    cfg.hidden = {};
    cfg.latent_dim = 2;
    cfg.levels = 1;
    cfg.codebook_size = 2;
    cfg.seed = 5;
    return cfg;
}

// Identity single-layer encoder/decoder so latents equal inputs.
void make_identity(RqVae& model) {
    auto& p = model.params();
    p.get("enc.w0").values() = {1, 0, 0, 1};
    p.get("enc.b0").values() = {0, 0};
    p.get("dec.w0").values() = {1, 0, 0, 1};
    p.get("dec.b0").values() = {0, 0};
}

}  // namespace

TEST_CASE("quantize_row picks the exact-match codeword with zero residual") {
    RqVaeConfig cfg;
    cfg.input_dim = 4;
    cfg.hidden = {};
    cfg.latent_dim = 4;
    cfg.levels = 2;
    cfg.codebook_size = 8;
    RqVae model(cfg);
    // Level 0: codeword 5 equals the latent; level 1 contains the zero codeword at 0.
    for (auto& v : model.codebook(0).values()) v = 3.0;
    std::vector<double> latent = {0.5, -1.0, 2.0, 0.25};
    for (int j = 0; j < 4; ++j) model.codebook(0).at(5, j) = latent[static_cast<std::size_t>(j)];
    for (auto& v : model.codebook(1).values()) v = 7.0;
    for (int j = 0; j < 4; ++j) model.codebook(1).at(0, j) = 0.0;

    auto q = model.quantize_row(latent);
    REQUIRE(q.codes[0] == 5);
    for (double r : q.residuals[0]) REQUIRE(r == 0.0);
    REQUIRE(q.codes[1] == 0);  // zero residual picks the zero codeword
    for (double r : q.residuals[1]) REQUIRE(r == 0.0);
    REQUIRE(q.quantized == latent);
}

TEST_CASE("quantize_row nearest-neighbor hand check") {
    RqVae model(tiny_cfg());
    model.codebook(0).values() = {0, 0, 1, 1};
    auto q = model.quantize_row({0.9, 1.1});
    REQUIRE(q.codes[0] == 1);
    REQUIRE_THAT(q.residuals[0][0], Catch::Matchers::WithinAbs(-0.1, 1e-12));
    REQUIRE_THAT(q.residuals[0][1], Catch::Matchers::WithinAbs(0.1, 1e-12));
}

TEST_CASE("residual norms are non-increasing when every level holds the zero codeword") {
    RqVaeConfig cfg;
    cfg.input_dim = 6;
    cfg.hidden = {};
    cfg.latent_dim = 6;
    cfg.levels = 3;
    cfg.codebook_size = 5;
    cfg.seed = 9;
    RqVae model(cfg);
    for (int lvl = 0; lvl < 3; ++lvl) {
        for (int j = 0; j < 6; ++j) model.codebook(lvl).at(0, j) = 0.0;
    }
    Rng rng(31);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> latent(6);
        for (auto& v : latent) v = rng.uniform() * 2.0 - 1.0;
        auto q = model.quantize_row(latent);
        double prev = 0.0;
        for (double v : latent) prev += v * v;
        for (const auto& r : q.residuals) {
            double cur = 0.0;
            for (double v : r) cur += v * v;
            REQUIRE(cur <= prev + 1e-12);
            prev = cur;
        }
    }
}

TEST_CASE("perfect autoencoder with exact codeword hit has zero loss") {
    RqVae model(tiny_cfg());
    make_identity(model);
    model.codebook(0).values() = {0.7, -0.3, 5, 5};
    Tensor x = Tensor::from(1, 2, {0.7, -0.3});
    auto parts = model.loss_parts(x);
    REQUIRE_THAT(parts.total.item(), Catch::Matchers::WithinAbs(0.0, 1e-20));
    REQUIRE(parts.recon == 0.0);
    REQUIRE(parts.codebook == 0.0);
    REQUIRE(parts.commitment == 0.0);
}

TEST_CASE("beta zero reduces the loss to recon plus codebook terms") {
    RqVaeConfig cfg = tiny_cfg();
    cfg.beta = 0.0;
    RqVae model(cfg);
    make_identity(model);
    model.codebook(0).values() = {0.5, 0.5, -1, -1};
    Tensor x = Tensor::from(2, 2, {0.8, 0.1, -0.9, -1.2});
    auto parts = model.loss_parts(x);
    REQUIRE_THAT(parts.total.item(), Catch::Matchers::WithinAbs(parts.recon + parts.codebook, 1e-12));
    REQUIRE(parts.commitment > 0.0);  // still reported, just unweighted
}

TEST_CASE("commitment term gradient w.r.t. encoder output matches finite differences") {
    // Well-separated codewords keep the assignment stable under perturbation.
    RqVae model(tiny_cfg());
    model.codebook(0).values() = {0, 0, 10, 10};
    Tensor z = Tensor::from(1, 2, {1.0, 2.0}, true);
    auto loss = [&] {
        auto q = model.quantize(z);
        Tensor d = sub(z, q.cumulative[0]);
        return sum_all(mul(d, d));
    };
    REQUIRE(ligertest::gradcheck(loss, {z}).max_error < 1e-4);
}

TEST_CASE("rqvae loss gradients on the finite-difference-checkable paths") {
    // The straight-through estimator is a biased gradient by construction, so
    // the total loss cannot be FD-checked end to end. Each term is checked on
    // the path where autodiff and the true derivative agree.
    RqVaeConfig cfg;
    cfg.input_dim = 3;
    cfg.hidden = {4};
    cfg.latent_dim = 2;
    cfg.levels = 2;
    cfg.codebook_size = 2;
    cfg.seed = 21;
    RqVae model(cfg);
    // Codewords far apart so tiny nudges keep assignments fixed.
    model.codebook(0).values() = {-4, -4, 4, 4};
    model.codebook(1).values() = {-2, 2, 2, -2};
    Tensor x = Tensor::from(2, 3, {0.3, -0.4, 0.8, -0.6, 0.2, 0.1});

    SECTION("recon term w.r.t. decoder parameters") {
        std::vector<Tensor> dec_params;
        for (auto& [name, t] : model.params().entries()) {
            if (name.rfind("dec.", 0) == 0) dec_params.push_back(t);
        }
        auto loss = [&] { return model.loss(x); };
        REQUIRE(ligertest::gradcheck(loss, dec_params).max_error < 1e-4);
    }
    SECTION("codebook term w.r.t. codebook rows") {
        Tensor resid = Tensor::from(2, 2, {-3.5, -4.2, 4.4, 3.9});
        auto loss = [&] {
            Tensor chosen = embedding_lookup(model.codebook(0), {0, 1});
            Tensor d = sub(resid, chosen);
            return sum_all(mul(d, d));
        };
        REQUIRE(ligertest::gradcheck(loss, {model.codebook(0)}).max_error < 1e-6);
    }
    SECTION("commitment term w.r.t. encoder parameters") {
        std::vector<Tensor> enc_params;
        for (auto& [name, t] : model.params().entries()) {
            if (name.rfind("enc.", 0) == 0) enc_params.push_back(t);
        }
        auto loss = [&] {
            Tensor z = model.encode(x);
            auto q = model.quantize(z);
            Tensor d = sub(z, q.cumulative[1]);
            return sum_all(mul(d, d));
        };
        REQUIRE(ligertest::gradcheck(loss, enc_params).max_error < 1e-4);
    }
}

TEST_CASE("training shrinks reconstruction loss five-fold on clustered data") {
    SynthConfig scfg;
    scfg.seed = 77;
    scfg.n_users = 30;
    scfg.n_items = 120;
    scfg.n_clusters = 8;
    scfg.dim = 32;
    SynthResult synth = synth_generate(scfg);

    RqVaeConfig cfg;
    cfg.input_dim = 32;
    cfg.hidden = {24, 16};
    cfg.latent_dim = 8;
    cfg.levels = 2;
    cfg.codebook_size = 16;
    cfg.epochs = 300;
    cfg.batch_size = 64;
    cfg.seed = 3;
    RqVaeTrainStats stats;
    RqVae model = train_rqvae(synth.catalog, cfg, &stats);
    INFO("initial=" << stats.initial_recon << " final=" << stats.final_recon);
    REQUIRE(stats.final_recon < stats.initial_recon / 5.0);
}

TEST_CASE("rqvae training excludes cold items and is seed deterministic") {
    SynthConfig scfg;
    scfg.seed = 13;
    scfg.n_users = 60;
    scfg.n_items = 40;
    scfg.n_clusters = 4;
    scfg.n_cold = 4;
    scfg.dim = 16;
    SynthResult synth = synth_generate(scfg);
    apply_cold_flags(synth.catalog, synth.planted_cold);

    RqVaeConfig cfg;
    cfg.input_dim = 16;
    cfg.hidden = {12};
    cfg.latent_dim = 6;
    cfg.levels = 2;
    cfg.codebook_size = 8;
    cfg.epochs = 5;
    cfg.batch_size = 16;
    cfg.seed = 1;

    RqVae a = train_rqvae(synth.catalog, cfg);
    RqVae b = train_rqvae(synth.catalog, cfg);
    for (int lvl = 0; lvl < 2; ++lvl) {
        REQUIRE(a.codebook(lvl).values() == b.codebook(lvl).values());
    }

    // Exclusion audit: retraining with cold embeddings scrambled must give
    // identical parameters, so cold rows can never have entered a batch.
    ItemCatalog scrambled = synth.catalog;
    Tensor emb = scrambled.text_embeddings.clone();
    for (int i : synth.planted_cold) {
        for (int j = 0; j < emb.cols(); ++j) emb.at(i, j) = 1e6 + i + j;
    }
    scrambled.text_embeddings = emb;
    RqVae c = train_rqvae(scrambled, cfg);
    for (const auto& [name, t] : a.params().entries()) {
        REQUIRE(t.values() == c.params().get(name).values());
    }
}

TEST_CASE("identical embeddings collide and receive ascending dedup indices") {
    RqVae model(tiny_cfg());
    make_identity(model);
    model.codebook(0).values() = {1, 1, -1, -1};
    Tensor emb = Tensor::from(3, 2, {0.9, 0.9, 0.9, 0.9, -1.1, -0.8});
    ItemCatalog cat = make_catalog({"a", "b", "c"}, emb);
    SidTable table = assign_semantic_ids(cat, model);
    REQUIRE(table.of(0).codes == table.of(1).codes);
    REQUIRE(table.of(0).dedup == 0);
    REQUIRE(table.of(1).dedup == 1);
    REQUIRE(table.of(2).dedup == 0);
    REQUIRE(table.dedup_range() == 2);
}

TEST_CASE("assignment is unique across a large catalog") {
    Rng rng(55);
    const int n = 10000;
    const int dim = 12;
    Tensor emb = Tensor::zeros(n, dim);
    for (auto& v : emb.values()) v = rng.normal();
    std::vector<std::string> ids;
    for (int i = 0; i < n; ++i) ids.push_back("i" + std::to_string(i));
    ItemCatalog cat = make_catalog(std::move(ids), emb);

    RqVaeConfig cfg;
    cfg.input_dim = dim;
    cfg.hidden = {8};
    cfg.latent_dim = 4;
    cfg.levels = 2;
    cfg.codebook_size = 8;
    cfg.seed = 2;
    RqVae model(cfg);
    SidTable table = assign_semantic_ids(cat, model);

    std::set<std::vector<int>> seen;
    for (int i = 0; i < n; ++i) {
        REQUIRE(seen.insert(table.of(i).full()).second);
    }

    // Quantizing the same latent twice yields identical codes.
    Tensor row = slice_rows(cat.text_embeddings, 123, 1);
    auto q1 = model.quantize(model.encode(row));
    auto q2 = model.quantize(model.encode(row));
    REQUIRE(q1.codes == q2.codes);
}

TEST_CASE("trained quantizer groups same-cluster items at level one") {
    SynthConfig scfg;
    scfg.seed = 23;
    scfg.n_users = 30;
    scfg.n_items = 96;
    scfg.n_clusters = 6;
    scfg.dim = 24;
    SynthResult synth = synth_generate(scfg);

    RqVaeConfig cfg;
    cfg.input_dim = 24;
    cfg.hidden = {16};
    cfg.latent_dim = 8;
    cfg.levels = 2;
    cfg.codebook_size = 12;
    cfg.epochs = 30;
    cfg.batch_size = 32;
    cfg.seed = 4;
    RqVae model = train_rqvae(synth.catalog, cfg);
    SidTable table = assign_semantic_ids(synth.catalog, model);

    // Same-cluster pairs must share a level-1 code at >= 2x the cross-cluster rate.
    long same_pairs = 0, same_hits = 0, cross_pairs = 0, cross_hits = 0;
    for (int i = 0; i < scfg.n_items; ++i) {
        for (int j = i + 1; j < scfg.n_items; ++j) {
            const bool same_cluster = synth.item_cluster[static_cast<std::size_t>(i)] ==
                                      synth.item_cluster[static_cast<std::size_t>(j)];
            const bool same_code = table.of(i).codes[0] == table.of(j).codes[0];
            if (same_cluster) {
                ++same_pairs;
                same_hits += same_code;
            } else {
                ++cross_pairs;
                cross_hits += same_code;
            }
        }
    }
    const double same_rate = static_cast<double>(same_hits) / same_pairs;
    const double cross_rate = static_cast<double>(cross_hits) / std::max(1L, cross_pairs);
    INFO("same=" << same_rate << " cross=" << cross_rate);
    REQUIRE(same_rate >= 2.0 * std::max(cross_rate, 1e-3));
}

TEST_CASE("sid trie reaches every item exactly once") {
    std::vector<SemanticId> sids = {
        {{0, 1}, 0},
        {{0, 1}, 1},
        {{2, 3}, 0},
        {{2, 0}, 0},
    };
    SidTable table(2, 4, sids);
    SidTrie trie(table);
    REQUIRE(trie.leaf_count() == 4);
    REQUIRE(trie.depth() == 3);
    for (int i = 0; i < 4; ++i) {
        REQUIRE(trie.resolve(table.of(i).full()) == i);
    }
    REQUIRE(trie.resolve({0, 1, 2}) == -1);
    REQUIRE(trie.resolve({9, 9, 9}) == -1);

    // Duplicate tuples are rejected.
    std::vector<SemanticId> dup = {{{1, 1}, 0}, {{1, 1}, 0}};
    REQUIRE_THROWS_AS(SidTrie(SidTable(2, 4, dup)), ContractError);
}

TEST_CASE("sid table persists as JSON lines and hashes stably") {
    Rng rng(61);
    Tensor emb = Tensor::zeros(5, 3);
    for (auto& v : emb.values()) v = rng.normal();
    ItemCatalog cat = make_catalog({"a", "b", "c", "d", "e"}, emb);
    std::vector<SemanticId> sids = {
        {{0, 1, 2}, 0}, {{0, 1, 2}, 1}, {{3, 3, 3}, 0}, {{1, 0, 2}, 0}, {{2, 2, 2}, 0},
    };
    SidTable table(3, 4, sids);

    const auto path = (std::filesystem::temp_directory_path() / "liger_sids.jsonl").string();
    table.save_jsonl(path, cat);
    SidTable loaded = SidTable::load_jsonl(path, cat, 3, 4);
    REQUIRE(loaded.hash() == table.hash());
    for (int i = 0; i < 5; ++i) REQUIRE(loaded.of(i) == table.of(i));
    REQUIRE(loaded.dedup_range() == 2);
}
