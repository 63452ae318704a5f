#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#include <torch/torch.h>

#include "fqgan/config.hpp"
#include "fqgan/frozen_net.hpp"

namespace fqgan {

struct LossError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct LossWeights {
    double lambda_disentangle = 0.1;
    double lambda_rep = 0.5;
    double perceptual_weight = 1.0;
    double gan_weight = 0.1;
    double commitment_beta = 0.25;

    static LossWeights from(const TokenizerConfig& cfg);
    void validate() const;
};

/// Unweighted loss terms of one step.
struct LossParts {
    double rec = 0;
    double vq = 0;
    double perceptual = 0;
    double gan_generator = 0;
    double gan_discriminator = 0;
    double disentangle = 0;
    double rep = 0;
};

struct LossReport {
    std::int64_t step = 0;
    double rec = 0;
    double vq = 0;
    double perceptual = 0;
    double gan_generator = 0;
    double gan_discriminator = 0;
    double disentangle = 0;
    double rep = 0;
    double total = 0;

    bool operator==(const LossReport&) const = default;
};

/// Weighted sum of the generator-side terms. Throws naming the first non-finite term.
LossReport total_loss(const LossParts& parts, const LossWeights& weights, std::int64_t step = 0);

/// Header and row of the metrics CSV: step,rec,vq,perceptual,gan_g,gan_d,disentangle,rep,total
std::string loss_csv_header();
std::string loss_csv_row(const LossReport& r);

torch::Tensor rec_loss(const torch::Tensor& x, const torch::Tensor& x_hat);

/// Feature distance under a frozen, randomly initialised CNN, summed over its layers.
class PerceptualProxyImpl : public torch::nn::Module {
public:
    explicit PerceptualProxyImpl(std::uint64_t seed = kPerceptualSeed);
    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& x_hat);

private:
    FrozenConvNet net_{nullptr};
};
TORCH_MODULE(PerceptualProxy);

struct GanLosses {
    torch::Tensor generator;
    torch::Tensor discriminator;
};

/// Hinge losses. `fake_logits` for the discriminator term should be computed from detached fakes.
torch::Tensor hinge_discriminator_loss(const torch::Tensor& real_logits, const torch::Tensor& fake_logits);
torch::Tensor hinge_generator_loss(const torch::Tensor& fake_logits);
GanLosses gan_losses(const torch::Tensor& real_logits, const torch::Tensor& fake_logits);

/// 1 - mean cosine similarity between predicted and teacher vectors along `dim`.
/// Range [0, 2]. Throws on a zero-norm teacher vector.
torch::Tensor rep_loss(const torch::Tensor& predicted, const torch::Tensor& teacher, std::int64_t dim = 1);

}  // namespace fqgan
