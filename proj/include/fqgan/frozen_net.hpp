#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

#include <torch/torch.h>

namespace fqgan {

/// 64-bit FNV-1a; stable across platforms, unlike std::hash.
std::uint64_t stable_hash(std::string_view s);

/// Seed of the frozen extractor behind the proxy Frechet distance. Changing it invalidates
/// every previously reported proxy_fid value.
inline constexpr std::uint64_t kProxyFidSeed = 20241206;
inline constexpr std::uint64_t kPerceptualSeed = 7177;

/// A randomly initialised conv stack whose weights are drawn from a private generator seeded
/// with `seed` and never trained. Each layer is a stride-2 3x3 conv followed by leaky ReLU.
class FrozenConvNetImpl : public torch::nn::Module {
public:
    FrozenConvNetImpl(std::uint64_t seed, std::vector<int> channels, int in_channels = 3);

    /// Activations after every layer.
    std::vector<torch::Tensor> features(const torch::Tensor& x);
    torch::Tensor forward(const torch::Tensor& x) { return features(x).back(); }

    std::uint64_t seed() const { return seed_; }

private:
    std::uint64_t seed_;
    std::vector<torch::nn::Conv2d> convs_;
};
TORCH_MODULE(FrozenConvNet);

}  // namespace fqgan
