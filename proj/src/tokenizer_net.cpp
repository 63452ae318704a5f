#include "fqgan/tokenizer_net.hpp"

#include <algorithm>
#include <string>

namespace fqgan {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

namespace {

nn::GroupNorm group_norm(int channels) {
    return nn::GroupNorm(nn::GroupNormOptions(std::min(8, channels), channels).eps(1e-6));
}

nn::Conv2d conv(int in, int out, int kernel, int stride = 1, int padding = 0) {
    return nn::Conv2d(nn::Conv2dOptions(in, out, kernel).stride(stride).padding(padding));
}

int stage_channels(const TokenizerConfig& cfg, int stage) {
    return cfg.base_channels * std::min(1 << stage, 4);
}

}  // namespace

ResBlockImpl::ResBlockImpl(int in_channels, int out_channels) {
    norm1_ = register_module("norm1", group_norm(in_channels));
    conv1_ = register_module("conv1", conv(in_channels, out_channels, 3, 1, 1));
    norm2_ = register_module("norm2", group_norm(out_channels));
    conv2_ = register_module("conv2", conv(out_channels, out_channels, 3, 1, 1));
    if (in_channels != out_channels) skip_ = register_module("skip", conv(in_channels, out_channels, 1));
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x) {
    auto h = conv1_->forward(torch::silu(norm1_->forward(x)));
    h = conv2_->forward(torch::silu(norm2_->forward(h)));
    return (skip_ ? skip_->forward(x) : x) + h;
}

EncoderImpl::EncoderImpl(const TokenizerConfig& cfg) {
    conv_in_ = register_module("conv_in", conv(3, cfg.base_channels, 3, 1, 1));
    body_ = nn::Sequential();
    int ch = cfg.base_channels;
    for (int s = 0; s < cfg.num_stages(); ++s) {
        const int out = stage_channels(cfg, s);
        for (int b = 0; b < cfg.res_blocks; ++b) {
            body_->push_back(ResBlock(ch, out));
            ch = out;
        }
        body_->push_back(conv(ch, ch, 4, 2, 1));
    }
    body_->push_back(ResBlock(ch, ch));
    body_ = register_module("body", body_);
    norm_out_ = register_module("norm_out", group_norm(ch));
    conv_out_ = register_module("conv_out", conv(ch, ch, 3, 1, 1));
    out_channels_ = ch;
}

torch::Tensor EncoderImpl::forward(const torch::Tensor& x) {
    auto h = body_->forward(conv_in_->forward(x));
    return conv_out_->forward(torch::silu(norm_out_->forward(h)));
}

AdapterImpl::AdapterImpl(int channels, int code_dim) {
    fc1_ = register_module("fc1", conv(channels, channels, 1));
    fc2_ = register_module("fc2", conv(channels, code_dim, 1));
}

torch::Tensor AdapterImpl::forward(const torch::Tensor& x) {
    return fc2_->forward(torch::silu(fc1_->forward(x)));
}

DecoderImpl::DecoderImpl(const TokenizerConfig& cfg, int in_channels) {
    int ch = stage_channels(cfg, cfg.num_stages() - 1);
    conv_in_ = register_module("conv_in", conv(in_channels, ch, 3, 1, 1));
    body_ = nn::Sequential();
    body_->push_back(ResBlock(ch, ch));
    for (int s = cfg.num_stages() - 1; s >= 0; --s) {
        const int out = stage_channels(cfg, s);
        for (int b = 0; b < cfg.res_blocks; ++b) {
            body_->push_back(ResBlock(ch, out));
            ch = out;
        }
        body_->push_back(nn::Upsample(
            nn::UpsampleOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest)));
        body_->push_back(conv(ch, ch, 3, 1, 1));
    }
    body_ = register_module("body", body_);
    norm_out_ = register_module("norm_out", group_norm(ch));
    conv_out_ = register_module("conv_out", conv(ch, 3, 3, 1, 1));
}

torch::Tensor DecoderImpl::forward(const torch::Tensor& z) {
    auto h = body_->forward(conv_in_->forward(z));
    return conv_out_->forward(torch::silu(norm_out_->forward(h)));
}

PatchDiscriminatorImpl::PatchDiscriminatorImpl(const TokenizerConfig& cfg) {
    const int c = cfg.disc_channels;
    net_ = nn::Sequential(
        conv(3, c, 4, 2, 1), nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)),
        conv(c, 2 * c, 4, 2, 1), group_norm(2 * c), nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)),
        conv(2 * c, 4 * c, 4, 2, 1), group_norm(4 * c), nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)),
        conv(4 * c, 1, 3, 1, 1));
    net_ = register_module("net", net_);
}

torch::Tensor PatchDiscriminatorImpl::forward(const torch::Tensor& x) { return net_->forward(x); }

FeaturePredictorImpl::FeaturePredictorImpl(int code_dim, int teacher_dim) {
    const int hidden = std::max(64, teacher_dim);
    fc1_ = register_module("fc1", conv(code_dim, hidden, 1));
    fc2_ = register_module("fc2", conv(hidden, teacher_dim, 1));
}

torch::Tensor FeaturePredictorImpl::forward(const torch::Tensor& q) {
    return fc2_->forward(torch::silu(fc1_->forward(q)));
}

torch::Tensor map_to_rows(const torch::Tensor& map) {
    return map.permute({0, 2, 3, 1}).reshape({-1, map.size(1)});
}

torch::Tensor rows_to_map(const torch::Tensor& rows, std::int64_t n, std::int64_t h, std::int64_t w) {
    return rows.reshape({n, h, w, rows.size(1)}).permute({0, 3, 1, 2});
}

FactorizedTokenizerImpl::FactorizedTokenizerImpl(TokenizerConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    encoder_ = register_module("encoder", Encoder(cfg_));
    for (int i = 0; i < cfg_.k; ++i) {
        adapters_.push_back(
            register_module("adapter" + std::to_string(i + 1), Adapter(encoder_->out_channels(), cfg_.code_dim)));
    }
    for (int i = 0; i < cfg_.k; ++i) {
        codebooks_.push_back(register_module(
            "codebook" + std::to_string(i + 1),
            SubCodebook(i + 1, cfg_.codebook_size, cfg_.code_dim, cfg_.codebook_l2_norm)));
    }
    decoder_ = register_module("decoder", Decoder(cfg_, cfg_.k * cfg_.code_dim));
    predictors_.resize(static_cast<std::size_t>(cfg_.k), FeaturePredictor(nullptr));
    for (int i = 0; i < cfg_.k; ++i) {
        if (cfg_.teacher_assignment[static_cast<std::size_t>(i)].empty()) continue;
        predictors_[static_cast<std::size_t>(i)] = register_module(
            "predictor" + std::to_string(i + 1), FeaturePredictor(cfg_.code_dim, cfg_.teacher_dim));
    }
}

void FactorizedTokenizerImpl::check_images(const torch::Tensor& x) const {
    if (x.dim() != 4 || x.size(1) != 3 || x.size(2) != cfg_.image_size || x.size(3) != cfg_.image_size) {
        throw std::invalid_argument("image batch must be (N, 3, " + std::to_string(cfg_.image_size) + ", " +
                                    std::to_string(cfg_.image_size) + ")");
    }
}

torch::Tensor FactorizedTokenizerImpl::encode_base(const torch::Tensor& x) {
    check_images(x);
    return encoder_->forward(x);
}

std::vector<torch::Tensor> FactorizedTokenizerImpl::encode(const torch::Tensor& x) {
    const auto base = encode_base(x);
    std::vector<torch::Tensor> out;
    out.reserve(adapters_.size());
    for (auto& adapter : adapters_) {
        auto h = adapter->forward(base);
        if (cfg_.codebook_l2_norm) h = F::normalize(h, F::NormalizeFuncOptions().dim(1));
        out.push_back(h);
    }
    return out;
}

TokenizerForward FactorizedTokenizerImpl::forward(const torch::Tensor& x) {
    TokenizerForward out;
    out.features = encode(x);
    const auto n = x.size(0);
    const auto gh = out.features.front().size(2);
    const auto gw = out.features.front().size(3);

    std::vector<torch::Tensor> rows;
    rows.reserve(out.features.size());
    for (const auto& h : out.features) rows.push_back(map_to_rows(h));
    out.quantization = quantize_factorized(rows, codebooks(), static_cast<int>(gh), static_cast<int>(gw));
    for (std::size_t i = 0; i < rows.size(); ++i) {
        out.straight.push_back(rows_to_map(straight_through(rows[i], out.quantization.maps[i]), n, gh, gw));
    }
    out.reconstruction = decode(out.straight);
    return out;
}

std::vector<FactorizedTokenGrid> FactorizedTokenizerImpl::tokenize(const torch::Tensor& x) {
    torch::NoGradGuard guard;
    const auto features = encode(x);
    std::vector<torch::Tensor> rows;
    for (const auto& h : features) rows.push_back(map_to_rows(h));
    return quantize_factorized(rows, codebooks(), static_cast<int>(features.front().size(2)),
                               static_cast<int>(features.front().size(3)))
        .grids;
}

torch::Tensor FactorizedTokenizerImpl::decode(const std::vector<torch::Tensor>& q_maps) {
    if (static_cast<int>(q_maps.size()) != cfg_.k) throw std::invalid_argument("decode needs k code maps");
    for (const auto& q : q_maps) {
        if (q.dim() != 4 || q.sizes() != q_maps.front().sizes() || q.size(1) != cfg_.code_dim) {
            throw std::invalid_argument("decode: code maps must share grid shape and have code_dim channels");
        }
    }
    return decoder_->forward(torch::cat(q_maps, 1));
}

torch::Tensor FactorizedTokenizerImpl::decode(const std::vector<QuantizedMap>& q_list, std::int64_t batch) {
    const auto g = cfg_.grid_edge();
    std::vector<torch::Tensor> maps;
    for (const auto& q : q_list) {
        if (q.values.size(0) != batch * g * g) throw std::invalid_argument("decode: grid mismatch");
        maps.push_back(rows_to_map(q.values, batch, g, g));
    }
    return decode(maps);
}

torch::Tensor FactorizedTokenizerImpl::decode_tokens(const std::vector<FactorizedTokenGrid>& grids) {
    if (grids.empty()) throw std::invalid_argument("decode_tokens: no grids");
    const auto n = static_cast<std::int64_t>(grids.size());
    const auto g = cfg_.grid_edge();
    std::vector<torch::Tensor> maps;
    for (int i = 0; i < cfg_.k; ++i) {
        std::vector<std::int64_t> idx;
        idx.reserve(static_cast<std::size_t>(n * g * g));
        for (const auto& grid : grids) {
            if (grid.k != cfg_.k || grid.grid_h != g || grid.grid_w != g) {
                throw std::invalid_argument("decode_tokens: grid shape does not match the tokenizer");
            }
            for (int p = 0; p < grid.num_patches(); ++p) {
                const auto t = grid.at(p, i);
                if (t >= static_cast<std::uint32_t>(cfg_.codebook_size)) {
                    throw std::out_of_range("decode_tokens: token out of range");
                }
                idx.push_back(t);
            }
        }
        const auto values = codebooks_[static_cast<std::size_t>(i)]->codes().index_select(0, torch::tensor(idx));
        maps.push_back(rows_to_map(values, n, g, g));
    }
    return decode(maps);
}

torch::Tensor FactorizedTokenizerImpl::reconstruct(const torch::Tensor& x) { return forward(x).reconstruction; }

torch::Tensor FactorizedTokenizerImpl::reconstruct_single_branch(const torch::Tensor& x, int branch) {
    if (branch < 1 || branch > cfg_.k) {
        throw std::out_of_range("branch " + std::to_string(branch) + " outside 1.." + std::to_string(cfg_.k));
    }
    auto fwd = forward(x);
    std::vector<torch::Tensor> maps;
    for (int i = 0; i < cfg_.k; ++i) {
        const auto& q = fwd.straight[static_cast<std::size_t>(i)];
        maps.push_back(i + 1 == branch ? q : torch::zeros_like(q));
    }
    return decode(maps);
}

std::vector<SubCodebookImpl*> FactorizedTokenizerImpl::codebooks() {
    std::vector<SubCodebookImpl*> out;
    for (auto& cb : codebooks_) out.push_back(cb.get());
    return out;
}

bool FactorizedTokenizerImpl::has_predictor(int branch) const {
    return branch >= 1 && branch <= cfg_.k && !predictors_[static_cast<std::size_t>(branch - 1)].is_empty();
}

torch::Tensor FactorizedTokenizerImpl::predict_teacher(int branch, const torch::Tensor& q_map) {
    if (!has_predictor(branch)) throw std::invalid_argument("branch " + std::to_string(branch) + " has no teacher");
    return predictors_[static_cast<std::size_t>(branch - 1)]->forward(q_map);
}

std::vector<torch::Tensor> FactorizedTokenizerImpl::network_parameters() {
    std::vector<torch::Tensor> out;
    for (const auto& item : named_parameters()) {
        if (item.key().rfind("codebook", 0) != 0) out.push_back(item.value());
    }
    return out;
}

std::vector<torch::Tensor> FactorizedTokenizerImpl::codebook_parameters() {
    std::vector<torch::Tensor> out;
    for (auto& cb : codebooks_) out.push_back(cb->embeddings);
    return out;
}

}  // namespace fqgan
