#pragma once

#include <vector>

#include <torch/torch.h>

#include "fqgan/config.hpp"
#include "fqgan/quantizer.hpp"

namespace fqgan {

/// GroupNorm -> SiLU -> conv3x3, twice, plus identity (or 1x1 projection) skip.
class ResBlockImpl : public torch::nn::Module {
public:
    ResBlockImpl(int in_channels, int out_channels);
    torch::Tensor forward(const torch::Tensor& x);

private:
    torch::nn::GroupNorm norm1_{nullptr}, norm2_{nullptr};
    torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr}, skip_{nullptr};
};
TORCH_MODULE(ResBlock);

/// Shared base encoder: one stride-2 stage per factor of two in the downsample ratio.
class EncoderImpl : public torch::nn::Module {
public:
    explicit EncoderImpl(const TokenizerConfig& cfg);
    torch::Tensor forward(const torch::Tensor& x);
    int out_channels() const { return out_channels_; }

private:
    torch::nn::Conv2d conv_in_{nullptr}, conv_out_{nullptr};
    torch::nn::Sequential body_{nullptr};
    torch::nn::GroupNorm norm_out_{nullptr};
    int out_channels_;
};
TORCH_MODULE(Encoder);

/// Branch adapter: two pointwise convolutions with SiLU between them.
class AdapterImpl : public torch::nn::Module {
public:
    AdapterImpl(int channels, int code_dim);
    torch::Tensor forward(const torch::Tensor& x);

private:
    torch::nn::Conv2d fc1_{nullptr}, fc2_{nullptr};
};
TORCH_MODULE(Adapter);

class DecoderImpl : public torch::nn::Module {
public:
    DecoderImpl(const TokenizerConfig& cfg, int in_channels);
    torch::Tensor forward(const torch::Tensor& z);

private:
    torch::nn::Conv2d conv_in_{nullptr}, conv_out_{nullptr};
    torch::nn::Sequential body_{nullptr};
    torch::nn::GroupNorm norm_out_{nullptr};
};
TORCH_MODULE(Decoder);

/// Four strided conv layers; one realness logit per overlapping patch.
class PatchDiscriminatorImpl : public torch::nn::Module {
public:
    explicit PatchDiscriminatorImpl(const TokenizerConfig& cfg);
    torch::Tensor forward(const torch::Tensor& x);

private:
    torch::nn::Sequential net_{nullptr};
};
TORCH_MODULE(PatchDiscriminator);

/// Lightweight head mapping a semantic code map onto the teacher feature space.
class FeaturePredictorImpl : public torch::nn::Module {
public:
    FeaturePredictorImpl(int code_dim, int teacher_dim);
    torch::Tensor forward(const torch::Tensor& q);

private:
    torch::nn::Conv2d fc1_{nullptr}, fc2_{nullptr};
};
TORCH_MODULE(FeaturePredictor);

/// (N, D, H, W) -> (N*H*W, D) and back.
torch::Tensor map_to_rows(const torch::Tensor& map);
torch::Tensor rows_to_map(const torch::Tensor& rows, std::int64_t n, std::int64_t h, std::int64_t w);

struct TokenizerForward {
    std::vector<torch::Tensor> features;    // adapter outputs h_i, (N, D, gh, gw)
    FactorizedQuantization quantization;    // per-branch rows, plus token grids
    std::vector<torch::Tensor> straight;    // straight-through codes, (N, D, gh, gw)
    torch::Tensor reconstruction;           // (N, 3, H, W), unclamped
};

/// Encoder, k adapters, k sub-codebooks, channel-concatenating decoder, and feature predictors for
/// teacher-supervised branches. The discriminator is a separate module with its own optimizer.
class FactorizedTokenizerImpl : public torch::nn::Module {
public:
    explicit FactorizedTokenizerImpl(TokenizerConfig cfg);

    const TokenizerConfig& config() const { return cfg_; }

    torch::Tensor encode_base(const torch::Tensor& x);
    /// Adapter outputs (L2-normalised along channels when the config asks for it).
    std::vector<torch::Tensor> encode(const torch::Tensor& x);
    TokenizerForward forward(const torch::Tensor& x);
    std::vector<FactorizedTokenGrid> tokenize(const torch::Tensor& x);

    /// Concatenates maps in branch order along channels and decodes.
    torch::Tensor decode(const std::vector<torch::Tensor>& q_maps);
    torch::Tensor decode(const std::vector<QuantizedMap>& q_list, std::int64_t batch);
    torch::Tensor decode_tokens(const std::vector<FactorizedTokenGrid>& grids);

    torch::Tensor reconstruct(const torch::Tensor& x);
    /// Keeps only branch `branch` (1-based) and zeroes the other code maps before decoding.
    torch::Tensor reconstruct_single_branch(const torch::Tensor& x, int branch);

    std::vector<SubCodebookImpl*> codebooks();
    bool has_predictor(int branch) const;
    /// `branch` is 1-based; `q_map` is (N, D, gh, gw).
    torch::Tensor predict_teacher(int branch, const torch::Tensor& q_map);

    void check_images(const torch::Tensor& x) const;

    /// Generator-side parameters excluding the codebooks.
    std::vector<torch::Tensor> network_parameters();
    std::vector<torch::Tensor> codebook_parameters();

private:
    TokenizerConfig cfg_;
    Encoder encoder_{nullptr};
    std::vector<Adapter> adapters_;
    std::vector<SubCodebook> codebooks_;
    Decoder decoder_{nullptr};
    std::vector<FeaturePredictor> predictors_;  // null where no teacher is assigned
};
TORCH_MODULE(FactorizedTokenizer);

}  // namespace fqgan
