#pragma once

#include <cstdint>
#include <vector>

#include <torch/torch.h>

#include "fqgan/config.hpp"
#include "fqgan/quantizer.hpp"

namespace fqgan {

class RMSNormImpl : public torch::nn::Module {
public:
    explicit RMSNormImpl(int dim, double eps = 1e-6);
    torch::Tensor forward(const torch::Tensor& x);

private:
    torch::Tensor weight_;
    double eps_;
};
TORCH_MODULE(RMSNorm);

/// Pre-norm causal self-attention + SwiGLU feed-forward.
class CausalBlockImpl : public torch::nn::Module {
public:
    CausalBlockImpl(int width, int heads, double dropout);
    torch::Tensor forward(const torch::Tensor& x);

private:
    int heads_;
    double dropout_;
    RMSNorm attn_norm_{nullptr}, ffn_norm_{nullptr};
    torch::nn::Linear qkv_{nullptr}, proj_{nullptr}, w_gate_{nullptr}, w_up_{nullptr}, w_down_{nullptr};
};
TORCH_MODULE(CausalBlock);

/// Shape of the token sequences a FAR model is built for.
struct FarVocab {
    std::vector<int> sizes;  // K_i per branch
    int grid_h = 0;
    int grid_w = 0;

    int k() const { return static_cast<int>(sizes.size()); }
    int seq_len() const { return grid_h * grid_w; }
    bool operator==(const FarVocab&) const = default;
};

/// u + s * (c - u); s = 1 returns `cond` and s = 0 returns `uncond` exactly.
torch::Tensor cfg_guide(const torch::Tensor& cond, const torch::Tensor& uncond, double scale);

/// Class-conditional causal transformer over patch positions with a k-way input embedding and a
/// pluggable per-position head (factorized AR, k linear classifiers, or k MLP classifiers).
class FarModelImpl : public torch::nn::Module {
public:
    FarModelImpl(FarConfig cfg, FarVocab vocab);

    const FarConfig& config() const { return cfg_; }
    const FarVocab& vocab() const { return vocab_; }
    int null_class() const { return cfg_.num_classes; }

    /// (..., k) sub-token tuples -> (..., width).
    torch::Tensor embed_step(const torch::Tensor& tokens);

    /// `classes` (B,), `prefix` (B, T, k) with T < L. Returns g_0..g_T as (B, T+1, width);
    /// g_t is the hidden state that predicts position t.
    torch::Tensor backbone_forward(const torch::Tensor& classes, const torch::Tensor& prefix);

    /// Logits over branch `branch` (1-based) given hidden states (M, width) and the sub-tokens of
    /// earlier branches at the same position, (M, branch-1).
    torch::Tensor head_predict(const torch::Tensor& g, const torch::Tensor& prefix_subtokens, int branch);

    /// Teacher-forced logits for every branch at once; `subtokens` is (M, k).
    std::vector<torch::Tensor> head_logits(const torch::Tensor& g, const torch::Tensor& subtokens);

    /// Mean over sequences and positions of the summed per-branch cross-entropy.
    /// `tokens` is (B, L, k). Classes are replaced by the null class with probability
    /// `class_dropout_prob` when `drop_classes` is set (draws from the global torch RNG).
    torch::Tensor sequence_loss(const torch::Tensor& classes, const torch::Tensor& tokens, bool drop_classes);

    /// Classifier-free guided ancestral sampling. temperature == 0 takes the argmax.
    std::vector<FactorizedTokenGrid> sample(const std::vector<int>& classes, double cfg_scale, double temperature,
                                            std::uint64_t seed);

    std::vector<torch::Tensor> head_parameters();

private:
    torch::Tensor run_factorized_head(const torch::Tensor& g, const torch::Tensor& prefix_subtokens);

    FarConfig cfg_;
    FarVocab vocab_;
    torch::nn::Embedding class_embed_{nullptr};
    std::vector<torch::nn::Embedding> token_embeds_;
    torch::nn::Linear aggregate_{nullptr};
    torch::Tensor pos_embed_;
    std::vector<CausalBlock> blocks_;
    RMSNorm final_norm_{nullptr};

    // factorized_ar
    std::vector<torch::nn::Embedding> head_embeds_;
    torch::Tensor head_pos_;
    std::vector<CausalBlock> head_blocks_;
    RMSNorm head_norm_{nullptr};
    // all variants
    std::vector<torch::nn::Sequential> outputs_;
};
TORCH_MODULE(FarModel);

/// Packs grids into (B, L, k) int64 tokens and (B,) labels (missing labels map to the null class).
torch::Tensor grids_to_tokens(const std::vector<FactorizedTokenGrid>& grids);
torch::Tensor grids_to_labels(const std::vector<FactorizedTokenGrid>& grids, int null_class);

}  // namespace fqgan
