#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "fqgan/quantizer.hpp"
#include "oracles.hpp"

using namespace fqgan;

namespace {

SubCodebook codebook_with(const torch::Tensor& rows, int id = 1) {
    SubCodebook cb(id, static_cast<int>(rows.size(0)), static_cast<int>(rows.size(1)));
    torch::NoGradGuard g;
    cb->embeddings.copy_(rows);
    return cb;
}

}  // namespace

TEST(SubCodebook, ShapeAndInitRange) {
    SubCodebook cb(1, 64, 8);
    EXPECT_EQ(cb->size(), 64);
    EXPECT_EQ(cb->dim(), 8);
    EXPECT_TRUE(torch::isfinite(cb->embeddings).all().item<bool>());
    EXPECT_LE(cb->embeddings.abs().max().item<double>(), 1.0 / 64 + 1e-9);
}

TEST(Lookup, TwoRowExample) {
    auto cb = codebook_with(torch::tensor({{1.0f, 0.0f}, {0.0f, 1.0f}}));
    const auto q = lookup(torch::tensor({{0.9f, 0.1f}}), *cb);
    EXPECT_EQ(q.indices[0].item<std::int64_t>(), 0);
    EXPECT_TRUE(torch::equal(q.values[0], torch::tensor({1.0f, 0.0f})));
}

TEST(Lookup, ExactRowHasZeroError) {
    torch::manual_seed(1);
    auto cb = codebook_with(torch::randn({16, 4}));
    const auto q = lookup(cb->embeddings.detach()[7].unsqueeze(0), *cb);
    EXPECT_EQ(q.indices[0].item<std::int64_t>(), 7);
    EXPECT_EQ(q.quant_error, 0.0);
}

TEST(Lookup, MatchesBruteForceOracle) {
    torch::manual_seed(2);
    auto cb = codebook_with(torch::randn({64, 8}));
    const auto h = torch::randn({1000, 8});
    const auto q = lookup(h, *cb);
    const auto expected = oracle::nearest(h, cb->embeddings.detach());
    const auto got = q.indices.contiguous();
    for (std::int64_t i = 0; i < 1000; ++i) ASSERT_EQ(got[i].item<std::int64_t>(), expected[static_cast<std::size_t>(i)]);
}

TEST(Lookup, ValuesAreBitIdenticalRows) {
    torch::manual_seed(3);
    auto cb = codebook_with(torch::randn({32, 5}));
    const auto q = lookup(torch::randn({50, 5}), *cb);
    for (std::int64_t i = 0; i < 50; ++i) {
        ASSERT_TRUE(torch::equal(q.values[i], cb->embeddings.detach()[q.indices[i].item<std::int64_t>()]));
    }
}

TEST(Lookup, TiesGoToLowestIndex) {
    auto cb = codebook_with(torch::tensor({{1.0f, 0.0f}, {-1.0f, 0.0f}, {1.0f, 0.0f}}));
    const auto q = lookup(torch::tensor({{0.0f, 0.0f}, {1.0f, 0.0f}}), *cb);
    EXPECT_EQ(q.indices[0].item<std::int64_t>(), 0);
    EXPECT_EQ(q.indices[1].item<std::int64_t>(), 0);
}

TEST(Lookup, Idempotent) {
    torch::manual_seed(4);
    auto cb = codebook_with(torch::randn({40, 6}));
    const auto q = lookup(torch::randn({200, 6}), *cb);
    const auto again = lookup(q.values.detach(), *cb);
    EXPECT_TRUE(torch::equal(q.indices, again.indices));
    EXPECT_EQ(again.quant_error, 0.0);
}

TEST(Lookup, RejectsBadInput) {
    SubCodebook cb(1, 8, 4);
    EXPECT_THROW(lookup(torch::randn({3, 5}), *cb), QuantizerError);
    auto h = torch::randn({3, 4});
    h[1][2] = std::nan("");
    EXPECT_THROW(lookup(h, *cb), QuantizerError);
}

TEST(Lookup, UsageCountsTrackSelections) {
    auto cb = codebook_with(torch::eye(4));
    lookup(torch::eye(4).index_select(0, torch::tensor({0, 0, 2})), *cb);
    EXPECT_EQ(cb->usage_counts(), (std::vector<std::int64_t>{2, 0, 1, 0}));
    const auto before = usage_stats(*cb).usage_fraction;
    lookup(torch::eye(4).index_select(0, torch::tensor({3})), *cb);
    EXPECT_GE(usage_stats(*cb).usage_fraction, before);
    cb->reset_usage();
    EXPECT_EQ(cb->lookups(), 0);
}

TEST(Lookup, L2NormalizedCodebookUsesUnitRows) {
    SubCodebook cb(1, 16, 4, true);
    const auto codes = cb->codes();
    EXPECT_TRUE(torch::allclose(codes.norm(2, 1), torch::ones({16}), 1e-5, 1e-6));
    const auto q = lookup(torch::randn({10, 4}), *cb);
    EXPECT_TRUE(torch::equal(q.values, codes.index_select(0, q.indices)));
}

TEST(Factorized, SingleBranchEqualsLookup) {
    torch::manual_seed(5);
    auto a = codebook_with(torch::randn({16, 4}));
    auto b = codebook_with(a->embeddings.detach().clone());
    const auto h = torch::randn({2 * 9, 4});
    const auto fq = quantize_factorized({h}, {a.get()}, 3, 3);
    const auto single = lookup(h, *b);
    EXPECT_TRUE(torch::equal(fq.maps[0].indices, single.indices));
    ASSERT_EQ(fq.grids.size(), 2u);
    EXPECT_EQ(fq.grids[0].k, 1);
    EXPECT_EQ(fq.grids[0].tokens.size(), 9u);
}

TEST(Factorized, CopiedRowsReproduceIndices) {
    torch::manual_seed(6);
    auto a = codebook_with(torch::randn({10, 3}), 1);
    auto b = codebook_with(torch::randn({12, 3}), 2);
    const std::vector<std::int64_t> ia = {3, 1, 4, 1}, ib = {5, 9, 2, 6};
    const auto ha = a->embeddings.detach().index_select(0, torch::tensor(ia));
    const auto hb = b->embeddings.detach().index_select(0, torch::tensor(ib));
    const auto fq = quantize_factorized({ha, hb}, {a.get(), b.get()}, 2, 2);
    for (int p = 0; p < 4; ++p) {
        EXPECT_EQ(fq.grids[0].at(p, 0), ia[static_cast<std::size_t>(p)]);
        EXPECT_EQ(fq.grids[0].at(p, 1), ib[static_cast<std::size_t>(p)]);
    }
}

TEST(Factorized, ThreeBranchesMatchOracleAndPermute) {
    torch::manual_seed(7);
    std::vector<SubCodebook> cbs;
    std::vector<torch::Tensor> hs;
    for (int i = 0; i < 3; ++i) {
        cbs.push_back(codebook_with(torch::randn({8 + 4 * i, 5}), i + 1));
        hs.push_back(torch::randn({2 * 16, 5}));
    }
    const auto fq = quantize_factorized(hs, {cbs[0].get(), cbs[1].get(), cbs[2].get()}, 4, 4);
    for (int i = 0; i < 3; ++i) {
        const auto expected = oracle::nearest(hs[static_cast<std::size_t>(i)], cbs[static_cast<std::size_t>(i)]->embeddings.detach());
        for (int img = 0; img < 2; ++img) {
            for (int p = 0; p < 16; ++p) {
                ASSERT_EQ(fq.grids[static_cast<std::size_t>(img)].at(p, i), expected[static_cast<std::size_t>(img * 16 + p)]);
            }
        }
    }
    const auto perm = quantize_factorized({hs[2], hs[0], hs[1]}, {cbs[2].get(), cbs[0].get(), cbs[1].get()}, 4, 4);
    EXPECT_TRUE(torch::equal(perm.maps[0].indices, fq.maps[2].indices));
    EXPECT_TRUE(torch::equal(perm.maps[1].indices, fq.maps[0].indices));
    EXPECT_TRUE(torch::equal(perm.maps[2].indices, fq.maps[1].indices));
}

TEST(Factorized, TokensStayInRange) {
    torch::manual_seed(8);
    auto a = codebook_with(torch::randn({5, 2}), 1);
    auto b = codebook_with(torch::randn({300, 2}), 2);
    const auto fq = quantize_factorized({torch::randn({64, 2}), torch::randn({64, 2})}, {a.get(), b.get()}, 8, 8);
    for (int p = 0; p < 64; ++p) {
        EXPECT_LT(fq.grids[0].at(p, 0), 5u);
        EXPECT_LT(fq.grids[0].at(p, 1), 300u);
    }
}

TEST(StraightThrough, ForwardIsBitExact) {
    torch::manual_seed(9);
    auto cb = codebook_with(torch::randn({16, 4}));
    auto h = torch::randn({10, 4}, torch::requires_grad());
    const auto q = lookup(h, *cb);
    const auto out = straight_through(h, q);
    EXPECT_TRUE(torch::equal(out, q.values));
}

TEST(StraightThrough, SumGivesOnes) {
    torch::manual_seed(10);
    auto cb = codebook_with(torch::randn({16, 4}));
    auto h = torch::randn({10, 4}, torch::requires_grad());
    straight_through(h, lookup(h, *cb)).sum().backward();
    EXPECT_TRUE(torch::equal(h.grad(), torch::ones_like(h)));
}

TEST(StraightThrough, SquaredNormGivesTwiceValues) {
    torch::manual_seed(11);
    auto cb = codebook_with(torch::randn({16, 4}));
    auto h = torch::randn({10, 4}, torch::requires_grad());
    const auto q = lookup(h, *cb);
    straight_through(h, q).pow(2).sum().backward();
    EXPECT_TRUE(torch::allclose(h.grad(), 2 * q.values.detach(), 0, 0));
}

TEST(StraightThrough, GradientMatchesDirectPathBitwise) {
    torch::manual_seed(12);
    const auto base = torch::randn({6, 3});
    const auto w = torch::randn({3, 3});
    auto h1 = base.clone().requires_grad_(true);
    torch::tanh(h1.matmul(w)).pow(3).sum().backward();
    auto h2 = base.clone().requires_grad_(true);
    torch::tanh(straight_through(h2, h2.detach()).matmul(w)).pow(3).sum().backward();
    EXPECT_TRUE(torch::equal(h1.grad(), h2.grad()));
}

TEST(VqCommit, ZeroWhenEqual) {
    const auto h = torch::randn({4, 3});
    EXPECT_EQ(vq_commit_loss(h, h.clone(), 0.25).item<double>(), 0.0);
}

TEST(VqCommit, ConstantOffsetClosedForm) {
    const auto q = torch::randn({5, 3}, torch::kDouble);
    const auto c = torch::tensor({0.3, -0.2, 0.5}, torch::kDouble);
    const double expected = 1.25 * c.pow(2).mean().item<double>();
    EXPECT_NEAR(vq_commit_loss(q + c, q, 0.25).item<double>(), expected, 1e-12);
}

TEST(VqCommit, GradientMatchesFiniteDifferences) {
    torch::manual_seed(13);
    const auto h0 = torch::randn({4, 3}, torch::kDouble);
    const auto q0 = torch::randn({4, 3}, torch::kDouble);
    auto h = h0.clone().requires_grad_(true);
    auto q = q0.clone().requires_grad_(true);
    vq_commit_loss(h, q, 0.25).backward();
    // Value-wise the two terms only differ by the stop-gradient; the h-gradient sees beta and the
    // q-gradient sees weight 1.
    const auto fd_h = oracle::finite_difference(
        [&](const torch::Tensor& x) { return 0.25 * (x - q0).pow(2).mean().item<double>(); }, h0, 1e-3);
    const auto fd_q = oracle::finite_difference(
        [&](const torch::Tensor& x) { return (h0 - x).pow(2).mean().item<double>(); }, q0, 1e-3);
    EXPECT_LT(oracle::max_relative_error(h.grad(), fd_h), 1e-4);
    EXPECT_LT(oracle::max_relative_error(q.grad(), fd_q), 1e-4);
}

TEST(Disentangle, OrthogonalIsZero) {
    const auto q1 = torch::tensor({1.0, 0.0, 0.0}).repeat({6, 1});
    const auto q2 = torch::tensor({0.0, 1.0, 0.0}).repeat({6, 1});
    EXPECT_EQ(disentangle_loss({q1, q2}).item<double>(), 0.0);
}

TEST(Disentangle, IdenticalIsOne) {
    torch::manual_seed(14);
    const auto q = torch::randn({6, 4}, torch::kDouble);
    EXPECT_NEAR(disentangle_loss({q, q}).item<double>(), 1.0, 1e-12);
}

TEST(Disentangle, ThreeBranchesMatchLoopOracle) {
    torch::manual_seed(15);
    std::vector<torch::Tensor> qs = {torch::randn({20, 5}), torch::randn({20, 5}), torch::randn({20, 5})};
    EXPECT_NEAR(disentangle_loss(qs).item<double>(), oracle::disentangle(qs), 1e-6);
}

TEST(Disentangle, BoundsAndScaleInvariance) {
    std::mt19937_64 rng(16);
    torch::manual_seed(16);
    for (int trial = 0; trial < 200; ++trial) {
        const int k = 2 + static_cast<int>(rng() % 3);
        const int rows = 1 + static_cast<int>(rng() % 10);
        const int dim = 1 + static_cast<int>(rng() % 6);
        std::vector<torch::Tensor> qs;
        for (int i = 0; i < k; ++i) qs.push_back(torch::randn({rows, dim}, torch::kDouble));
        const double v = disentangle_loss(qs).item<double>();
        ASSERT_GE(v, 0.0);
        ASSERT_LE(v, 1.0 + 1e-12);
        auto rescaled = qs;
        const auto which = static_cast<std::size_t>(rng() % static_cast<std::uint64_t>(k));
        rescaled[which] = rescaled[which] * (0.01 + static_cast<double>(rng() % 1000));
        ASSERT_NEAR(disentangle_loss(rescaled).item<double>(), v, 1e-9);
    }
}

TEST(Disentangle, GradientMatchesFiniteDifferences) {
    torch::manual_seed(17);
    const auto a0 = torch::randn({5, 3}, torch::kDouble);
    const auto b0 = torch::randn({5, 3}, torch::kDouble);
    auto a = a0.clone().requires_grad_(true);
    auto b = b0.clone().requires_grad_(true);
    disentangle_loss({a, b}).backward();
    const auto fd_a = oracle::finite_difference(
        [&](const torch::Tensor& x) { return oracle::disentangle({x, b0}); }, a0, 1e-3);
    EXPECT_LT(oracle::max_relative_error(a.grad(), fd_a), 1e-4);
}

TEST(Disentangle, Errors) {
    EXPECT_THROW(disentangle_loss({torch::randn({3, 2})}), QuantizerError);
    EXPECT_THROW(disentangle_loss({torch::zeros({3, 2}), torch::randn({3, 2})}), QuantizerError);
    EXPECT_THROW(disentangle_loss({torch::randn({3, 2}), torch::randn({4, 2})}), QuantizerError);
}

TEST(Usage, Examples) {
    const auto all = usage_stats(std::vector<std::int64_t>{1, 2, 3, 4});
    EXPECT_DOUBLE_EQ(all.usage_fraction, 1.0);
    const auto one = usage_stats(std::vector<std::int64_t>{5, 0, 0, 0, 0, 0, 0, 0});
    EXPECT_DOUBLE_EQ(one.usage_fraction, 1.0 / 8);
    EXPECT_DOUBLE_EQ(one.entropy_bits, 0.0);
    const std::vector<std::int64_t> counts = {1, 1, 2, 0};
    const auto s = usage_stats(counts);
    EXPECT_DOUBLE_EQ(s.usage_fraction, 0.75);
    EXPECT_NEAR(s.entropy_bits, 1.5, 1e-12);
    EXPECT_NEAR(s.entropy_bits, oracle::entropy_bits(counts), 1e-12);
    EXPECT_THROW(usage_stats(std::vector<std::int64_t>{0, 0}), QuantizerError);
}

TEST(Capacity, Values) {
    EXPECT_EQ(conceptual_capacity(std::vector<std::uint64_t>{1024, 1024}), 1048576u);
    EXPECT_EQ(conceptual_capacity(std::vector<std::uint64_t>{777}), 777u);
    EXPECT_THROW(conceptual_capacity(std::vector<std::uint64_t>{1ULL << 40, 1ULL << 40}), QuantizerError);
    TokenizerConfig cfg;
    cfg.k = 3;
    cfg.codebook_size = 16;
    cfg.teacher_assignment = {"", "dino", "clip"};
    EXPECT_EQ(conceptual_capacity(cfg), 4096u);
}

TEST(Capacity, EnumerationOracle) {
    for (std::uint64_t a = 1; a <= 4; ++a) {
        for (std::uint64_t b = 1; b <= 4; ++b) {
            std::set<std::pair<std::uint64_t, std::uint64_t>> combos;
            for (std::uint64_t i = 0; i < a; ++i)
                for (std::uint64_t j = 0; j < b; ++j) combos.insert({i, j});
            EXPECT_EQ(conceptual_capacity(std::vector<std::uint64_t>{a, b}), combos.size());
        }
    }
}

TEST(ExportCodebooks, WritesOneCsvPerCodebook) {
    auto a = codebook_with(torch::tensor({{1.0f, 2.0f}, {3.0f, 4.0f}}), 1);
    auto b = codebook_with(torch::tensor({{5.0f, 6.0f}, {7.0f, 8.0f}, {9.0f, 0.5f}}), 2);
    const auto dir = std::filesystem::temp_directory_path() / "fqgan_export_cb";
    std::filesystem::remove_all(dir);
    const auto files = export_codebooks({a.get(), b.get()}, dir);
    ASSERT_EQ(files.size(), 2u);
    EXPECT_EQ(files[1].filename(), "codebook_2.csv");
    std::ifstream in(files[1]);
    std::string line;
    int rows = 0;
    while (std::getline(in, line)) ++rows;
    EXPECT_EQ(rows, 3);
    std::filesystem::remove_all(dir);
}
