#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "fqgan/data_io.hpp"
#include "fqgan/frozen_net.hpp"
#include "fqgan/tokenizer_net.hpp"

namespace fqgan {

/// PSNR in dB with pixels mapped from [-1, 1] to [0, 1]; 99 when MSE < 1e-10.
double psnr(const torch::Tensor& x, const torch::Tensor& x_hat);
double psnr_from_mse(double mse);

/// Streaming mean / co-moment accumulator over d-dimensional feature rows (double precision).
/// Shards built independently combine with `merge` (Chan et al. pairwise update).
class FeatureStats {
public:
    explicit FeatureStats(std::int64_t dim = 0);

    void add(const torch::Tensor& rows);
    void merge(const FeatureStats& other);

    std::int64_t count() const { return count_; }
    std::int64_t dim() const { return dim_; }
    torch::Tensor mean() const { return mean_; }
    /// Unbiased covariance, (d, d).
    torch::Tensor covariance() const;

    static FeatureStats from(const torch::Tensor& mean, const torch::Tensor& covariance, std::int64_t count);

private:
    std::int64_t dim_;
    std::int64_t count_ = 0;
    torch::Tensor mean_;  // (d,)
    torch::Tensor m2_;    // (d, d)
};

/// ||mu1 - mu2||^2 + tr(S1 + S2 - 2 (S1 S2)^{1/2}); both sides need >= dim+1 samples.
double proxy_fid(const FeatureStats& a, const FeatureStats& b, double eps = 1e-6);

/// Global-average-pooled activations of a frozen CNN with a fixed seed.
class ProxyFeatureExtractor {
public:
    ProxyFeatureExtractor();
    torch::Tensor features(const torch::Tensor& images);
    FeatureStats stats(const torch::Tensor& images, int chunk = 64);
    std::int64_t dim() const { return 16; }

private:
    FrozenConvNet net_{nullptr};
};

struct EvalReport {
    std::int64_t step = 0;
    double psnr = 0;
    std::vector<double> usage;
    std::vector<double> entropy;
    double proxy_fid = 0;
    std::int64_t sample_count = 0;
    double mse = 0;
};

std::string eval_csv_header(int k);
std::string eval_csv_row(const EvalReport& r);

struct EvalOptions {
    int batch_size = 32;
    std::int64_t step = 0;
    /// When set, PNG dumps go to `<dump_root>/<step>/branch_<i>/` (and `full/`).
    std::optional<std::filesystem::path> dump_root;
    int dump_count = 8;
};

EvalReport evaluate_tokenizer(FactorizedTokenizerImpl& model, const ImageDataset& data, const EvalOptions& opts = {});

}  // namespace fqgan
