#include "fqgan/frozen_net.hpp"

#include <ATen/CPUGeneratorImpl.h>
#include <cmath>

namespace fqgan {

std::uint64_t stable_hash(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

FrozenConvNetImpl::FrozenConvNetImpl(std::uint64_t seed, std::vector<int> channels, int in_channels)
    : seed_(seed) {
    auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
    int prev = in_channels;
    for (std::size_t i = 0; i < channels.size(); ++i) {
        auto conv = torch::nn::Conv2d(torch::nn::Conv2dOptions(prev, channels[i], 3).stride(2).padding(1));
        torch::NoGradGuard guard;
        const double std = std::sqrt(2.0 / (prev * 9));
        conv->weight.copy_(at::normal(0.0, std, conv->weight.sizes(), gen));
        conv->bias.copy_(at::normal(0.0, 0.01, conv->bias.sizes(), gen));
        convs_.push_back(register_module("conv" + std::to_string(i), conv));
        prev = channels[i];
    }
    for (auto& p : parameters()) p.set_requires_grad(false);
    eval();
}

std::vector<torch::Tensor> FrozenConvNetImpl::features(const torch::Tensor& x) {
    std::vector<torch::Tensor> out;
    out.reserve(convs_.size());
    auto h = x;
    for (auto& conv : convs_) {
        h = torch::leaky_relu(conv->forward(h), 0.2);
        out.push_back(h);
    }
    return out;
}

}  // namespace fqgan
