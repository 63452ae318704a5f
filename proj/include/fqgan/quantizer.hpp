#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <vector>

#include <torch/torch.h>

#include "fqgan/config.hpp"

namespace fqgan {

struct QuantizerError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// One learnable K x D code table plus an eval-time usage accumulator.
class SubCodebookImpl : public torch::nn::Module {
public:
    /// With `l2_normalized`, lookups and returned values use unit-length rows of `embeddings`.
    SubCodebookImpl(int id, int size, int dim, bool l2_normalized = false);

    int id() const { return id_; }
    std::int64_t size() const { return embeddings.size(0); }
    std::int64_t dim() const { return embeddings.size(1); }
    bool l2_normalized() const { return l2_; }

    /// The effective code table used for lookup.
    torch::Tensor codes() const;

    const std::vector<std::int64_t>& usage_counts() const { return usage_; }
    std::int64_t lookups() const { return lookups_; }
    void record(const std::vector<std::int64_t>& indices);
    void reset_usage();
    void set_usage(std::vector<std::int64_t> counts);

    torch::Tensor embeddings;

private:
    int id_;
    bool l2_;
    std::vector<std::int64_t> usage_;
    std::int64_t lookups_ = 0;
};
TORCH_MODULE(SubCodebook);

struct QuantizedMap {
    torch::Tensor values;   // (M, D); rows are copies of codebook entries, differentiable w.r.t. the codebook
    torch::Tensor indices;  // (M,) int64
    double quant_error = 0; // mean over rows of ||h - q||^2
};

/// Nearest entry by squared Euclidean distance (double accumulation); ties go to the lowest index.
/// `h` is (M, D). Usage counters of `codebook` are updated.
QuantizedMap lookup(const torch::Tensor& h, SubCodebookImpl& codebook);

/// Same search without touching usage counters; returns indices only.
std::vector<std::int64_t> nearest_indices(const torch::Tensor& h, const torch::Tensor& embeddings);

struct FactorizedTokenGrid {
    int grid_h = 0;
    int grid_w = 0;
    int k = 0;
    // tokens[i * L + p]: sub-token of branch i at patch p (sub-code-major).
    std::vector<std::uint32_t> tokens;
    std::optional<int> class_label;

    int num_patches() const { return grid_h * grid_w; }
    std::uint32_t at(int patch, int branch) const {
        return tokens[static_cast<std::size_t>(branch) * num_patches() + patch];
    }
    std::uint32_t& at(int patch, int branch) {
        return tokens[static_cast<std::size_t>(branch) * num_patches() + patch];
    }
    bool operator==(const FactorizedTokenGrid&) const = default;
};

struct FactorizedQuantization {
    std::vector<QuantizedMap> maps;
    std::vector<FactorizedTokenGrid> grids;  // one per image
};

/// Quantizes branch i against codebook i independently. Each h is (N*L, D_i) with rows ordered
/// image-major then patch row-major; `grid_h * grid_w` must divide the row count.
FactorizedQuantization quantize_factorized(const std::vector<torch::Tensor>& h_list,
                                           const std::vector<SubCodebookImpl*>& codebooks,
                                           int grid_h, int grid_w);

/// Forward value is `q.values` bit-exactly; backward hands the incoming gradient to `h` unchanged.
torch::Tensor straight_through(const torch::Tensor& h, const QuantizedMap& q);
torch::Tensor straight_through(const torch::Tensor& h, const torch::Tensor& q_values);

/// ||sg(h) - q||^2 + beta * ||h - sg(q)||^2, each averaged over rows and dimensions.
torch::Tensor vq_commit_loss(const torch::Tensor& h, const QuantizedMap& q, double beta);
torch::Tensor vq_commit_loss(const torch::Tensor& h, const torch::Tensor& q_values, double beta);

/// Mean over rows and unordered branch pairs of the squared cosine between paired code vectors.
torch::Tensor disentangle_loss(const std::vector<torch::Tensor>& q_list);
torch::Tensor disentangle_loss(const std::vector<QuantizedMap>& q_list);

struct UsageStats {
    double usage_fraction = 0;
    double entropy_bits = 0;
};

UsageStats usage_stats(const std::vector<std::int64_t>& counts);
UsageStats usage_stats(const SubCodebookImpl& codebook);

/// Product of sub-codebook sizes; throws when it does not fit in 64 bits.
std::uint64_t conceptual_capacity(const std::vector<std::uint64_t>& sizes);
std::uint64_t conceptual_capacity(const TokenizerConfig& config);

/// One CSV per sub-codebook: `codebook_{id}.csv`, row j holds entry j's D values.
std::vector<std::filesystem::path> export_codebooks(const std::vector<SubCodebookImpl*>& codebooks,
                                                    const std::filesystem::path& dir);

}  // namespace fqgan
