#include "fqgan/far.hpp"

#include <ATen/CPUGeneratorImpl.h>
#include <stdexcept>
#include <string>

namespace fqgan {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

RMSNormImpl::RMSNormImpl(int dim, double eps) : eps_(eps) {
    weight_ = register_parameter("weight", torch::ones({dim}));
}

torch::Tensor RMSNormImpl::forward(const torch::Tensor& x) {
    return x * torch::rsqrt(x.pow(2).mean(-1, true) + eps_) * weight_;
}

CausalBlockImpl::CausalBlockImpl(int width, int heads, double dropout) : heads_(heads), dropout_(dropout) {
    const int hidden = ((8 * width / 3) + 7) / 8 * 8;
    attn_norm_ = register_module("attn_norm", RMSNorm(width));
    qkv_ = register_module("qkv", nn::Linear(nn::LinearOptions(width, 3 * width).bias(false)));
    proj_ = register_module("proj", nn::Linear(nn::LinearOptions(width, width).bias(false)));
    ffn_norm_ = register_module("ffn_norm", RMSNorm(width));
    w_gate_ = register_module("w_gate", nn::Linear(nn::LinearOptions(width, hidden).bias(false)));
    w_up_ = register_module("w_up", nn::Linear(nn::LinearOptions(width, hidden).bias(false)));
    w_down_ = register_module("w_down", nn::Linear(nn::LinearOptions(hidden, width).bias(false)));
}

torch::Tensor CausalBlockImpl::forward(const torch::Tensor& x) {
    const auto b = x.size(0);
    const auto t = x.size(1);
    const auto c = x.size(2);
    auto qkv = qkv_->forward(attn_norm_->forward(x)).view({b, t, 3, heads_, c / heads_}).permute({2, 0, 3, 1, 4});
    const double p = is_training() ? dropout_ : 0.0;
    auto att = at::scaled_dot_product_attention(qkv[0], qkv[1], qkv[2], {}, p, /*is_causal=*/true);
    att = att.transpose(1, 2).reshape({b, t, c});
    auto h = x + F::dropout(proj_->forward(att), F::DropoutFuncOptions().p(p).training(is_training()));
    const auto n = ffn_norm_->forward(h);
    auto ffn = w_down_->forward(torch::silu(w_gate_->forward(n)) * w_up_->forward(n));
    return h + F::dropout(ffn, F::DropoutFuncOptions().p(p).training(is_training()));
}

torch::Tensor cfg_guide(const torch::Tensor& cond, const torch::Tensor& uncond, double scale) {
    if (cond.sizes() != uncond.sizes()) throw std::invalid_argument("cfg_guide: logit shapes differ");
    if (scale == 1.0) return cond;
    if (scale == 0.0) return uncond;
    return uncond + scale * (cond - uncond);
}

FarModelImpl::FarModelImpl(FarConfig cfg, FarVocab vocab) : cfg_(std::move(cfg)), vocab_(std::move(vocab)) {
    cfg_.validate();
    if (vocab_.sizes.empty() || vocab_.seq_len() < 1) throw std::invalid_argument("FAR vocabulary is empty");
    const int w = cfg_.width;
    const int k = vocab_.k();

    class_embed_ = register_module("class_embed", nn::Embedding(cfg_.num_classes + 1, w));
    for (int i = 0; i < k; ++i) {
        token_embeds_.push_back(
            register_module("token_embed" + std::to_string(i + 1), nn::Embedding(vocab_.sizes[static_cast<std::size_t>(i)], w)));
    }
    aggregate_ = register_module("aggregate", nn::Linear(k * w, w));
    pos_embed_ = register_parameter("pos_embed", torch::zeros({vocab_.seq_len(), w}));
    for (int l = 0; l < cfg_.backbone_layers; ++l) {
        blocks_.push_back(register_module("block" + std::to_string(l), CausalBlock(w, cfg_.heads, cfg_.dropout)));
    }
    final_norm_ = register_module("final_norm", RMSNorm(w));

    if (cfg_.head_variant == HeadVariant::FactorizedAr) {
        for (int i = 0; i + 1 < k; ++i) {
            head_embeds_.push_back(register_module("head_embed" + std::to_string(i + 1),
                                                   nn::Embedding(vocab_.sizes[static_cast<std::size_t>(i)], w)));
        }
        head_pos_ = register_parameter("head_pos", torch::zeros({k, w}));
        for (int l = 0; l < cfg_.head_layers; ++l) {
            head_blocks_.push_back(
                register_module("head_block" + std::to_string(l), CausalBlock(w, cfg_.heads, cfg_.dropout)));
        }
        head_norm_ = register_module("head_norm", RMSNorm(w));
    }
    for (int i = 0; i < k; ++i) {
        const int classes = vocab_.sizes[static_cast<std::size_t>(i)];
        nn::Sequential out;
        if (cfg_.head_variant == HeadVariant::KMlp) {
            out->push_back(nn::Linear(w, cfg_.mlp_hidden));
            out->push_back(nn::GELU());
            out->push_back(nn::Linear(cfg_.mlp_hidden, classes));
        } else {
            out->push_back(nn::Linear(w, classes));
        }
        outputs_.push_back(register_module("output" + std::to_string(i + 1), out));
    }

    torch::NoGradGuard guard;
    for (auto& m : modules(/*include_self=*/false)) {
        if (auto* lin = m->as<nn::Linear>()) {
            lin->weight.normal_(0.0, 0.02);
            if (lin->bias.defined()) lin->bias.zero_();
        } else if (auto* emb = m->as<nn::Embedding>()) {
            emb->weight.normal_(0.0, 0.02);
        }
    }
    pos_embed_.normal_(0.0, 0.02);
    if (head_pos_.defined()) head_pos_.normal_(0.0, 0.02);
}

torch::Tensor FarModelImpl::embed_step(const torch::Tensor& tokens) {
    const int k = vocab_.k();
    if (tokens.size(-1) != k) throw std::invalid_argument("embed_step: expected k sub-tokens per step");
    std::vector<torch::Tensor> parts;
    parts.reserve(static_cast<std::size_t>(k));
    for (int i = 0; i < k; ++i) {
        const auto z = tokens.select(-1, i);
        if (z.numel() > 0 && (z.min().item<std::int64_t>() < 0 ||
                              z.max().item<std::int64_t>() >= vocab_.sizes[static_cast<std::size_t>(i)])) {
            throw std::out_of_range("embed_step: sub-token of branch " + std::to_string(i + 1) + " out of range");
        }
        parts.push_back(token_embeds_[static_cast<std::size_t>(i)]->forward(z));
    }
    return aggregate_->forward(torch::cat(parts, -1));
}

torch::Tensor FarModelImpl::backbone_forward(const torch::Tensor& classes, const torch::Tensor& prefix) {
    const auto b = classes.size(0);
    if (prefix.dim() != 3 || prefix.size(0) != b) throw std::invalid_argument("backbone_forward: prefix must be (B, T, k)");
    const auto t = prefix.size(1);
    if (t >= vocab_.seq_len()) throw std::out_of_range("backbone_forward: prefix longer than L-1");
    if (classes.min().item<std::int64_t>() < 0 || classes.max().item<std::int64_t>() > cfg_.num_classes) {
        throw std::out_of_range("backbone_forward: class token out of range");
    }
    auto x = class_embed_->forward(classes).unsqueeze(1);
    if (t > 0) x = torch::cat({x, embed_step(prefix)}, 1);
    x = x + pos_embed_.slice(0, 0, t + 1).unsqueeze(0);
    for (auto& block : blocks_) x = block->forward(x);
    return final_norm_->forward(x);
}

torch::Tensor FarModelImpl::run_factorized_head(const torch::Tensor& g, const torch::Tensor& prefix_subtokens) {
    const auto j = prefix_subtokens.size(1);
    std::vector<torch::Tensor> seq{g.unsqueeze(1)};
    for (std::int64_t i = 0; i < j; ++i) {
        seq.push_back(head_embeds_[static_cast<std::size_t>(i)]->forward(prefix_subtokens.select(1, i)).unsqueeze(1));
    }
    auto x = torch::cat(seq, 1) + head_pos_.slice(0, 0, j + 1).unsqueeze(0);
    for (auto& block : head_blocks_) x = block->forward(x);
    return head_norm_->forward(x);
}

torch::Tensor FarModelImpl::head_predict(const torch::Tensor& g, const torch::Tensor& prefix_subtokens, int branch) {
    const int k = vocab_.k();
    if (branch < 1 || branch > k) throw std::out_of_range("head_predict: branch out of range");
    if (prefix_subtokens.dim() != 2 || prefix_subtokens.size(0) != g.size(0) || prefix_subtokens.size(1) != branch - 1) {
        throw std::invalid_argument("head_predict: prefix must hold the " + std::to_string(branch - 1) +
                                    " earlier sub-tokens of each position");
    }
    auto& out = outputs_[static_cast<std::size_t>(branch - 1)];
    if (cfg_.head_variant != HeadVariant::FactorizedAr) return out->forward(g);
    const auto h = run_factorized_head(g, prefix_subtokens);
    return out->forward(h.select(1, branch - 1));
}

std::vector<torch::Tensor> FarModelImpl::head_logits(const torch::Tensor& g, const torch::Tensor& subtokens) {
    const int k = vocab_.k();
    std::vector<torch::Tensor> logits;
    logits.reserve(static_cast<std::size_t>(k));
    if (cfg_.head_variant != HeadVariant::FactorizedAr) {
        for (auto& out : outputs_) logits.push_back(out->forward(g));
        return logits;
    }
    const auto h = run_factorized_head(g, subtokens.slice(1, 0, k - 1));
    for (int i = 0; i < k; ++i) logits.push_back(outputs_[static_cast<std::size_t>(i)]->forward(h.select(1, i)));
    return logits;
}

torch::Tensor FarModelImpl::sequence_loss(const torch::Tensor& classes, const torch::Tensor& tokens, bool drop_classes) {
    const int k = vocab_.k();
    const auto l = vocab_.seq_len();
    if (tokens.dim() != 3 || tokens.size(1) != l || tokens.size(2) != k) {
        throw std::invalid_argument("sequence_loss: tokens must be (B, L, k)");
    }
    auto cls = classes;
    if (drop_classes && cfg_.class_dropout_prob > 0) {
        const auto drop = torch::rand({classes.size(0)}) < cfg_.class_dropout_prob;
        cls = torch::where(drop, torch::full_like(classes, null_class()), classes);
    }
    const auto g = backbone_forward(cls, tokens.slice(1, 0, l - 1));  // (B, L, w)
    const auto flat_g = g.reshape({-1, cfg_.width});
    const auto flat_tokens = tokens.reshape({-1, k});
    const auto logits = head_logits(flat_g, flat_tokens);
    torch::Tensor loss;
    for (int i = 0; i < k; ++i) {
        const auto ce = F::cross_entropy(logits[static_cast<std::size_t>(i)], flat_tokens.select(1, i));
        loss = loss.defined() ? loss + ce : ce;
    }
    return loss;
}

std::vector<FactorizedTokenGrid> FarModelImpl::sample(const std::vector<int>& classes, double cfg_scale,
                                                      double temperature, std::uint64_t seed) {
    if (classes.empty()) return {};
    for (int c : classes) {
        if (c < 0 || c >= cfg_.num_classes) throw std::out_of_range("sample: invalid class token " + std::to_string(c));
    }
    if (cfg_scale < 0 || temperature < 0) throw std::invalid_argument("sample: cfg_scale and temperature must be >= 0");
    torch::NoGradGuard guard;
    const bool was_training = is_training();
    eval();

    auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
    const auto n = static_cast<std::int64_t>(classes.size());
    const int k = vocab_.k();
    const auto l = vocab_.seq_len();
    std::vector<std::int64_t> cls_vec(classes.begin(), classes.end());
    cls_vec.resize(static_cast<std::size_t>(2 * n), null_class());
    const auto cls = torch::tensor(cls_vec, torch::kLong);

    auto tokens = torch::zeros({n, 0, k}, torch::kLong);
    for (std::int64_t t = 0; t < l; ++t) {
        const auto doubled = torch::cat({tokens, tokens}, 0);
        const auto g = backbone_forward(cls, doubled).select(1, t);  // (2n, w)
        auto step = torch::zeros({n, 0}, torch::kLong);
        for (int i = 1; i <= k; ++i) {
            const auto logits = head_predict(g, torch::cat({step, step}, 0), i);
            const auto guided = cfg_guide(logits.slice(0, 0, n), logits.slice(0, n, 2 * n), cfg_scale);
            torch::Tensor z;
            if (temperature == 0.0) {
                z = guided.argmax(1);
            } else {
                const auto probs = torch::softmax(guided.to(torch::kDouble) / temperature, 1);
                z = torch::multinomial(probs, 1, false, gen).squeeze(1);
            }
            step = torch::cat({step, z.unsqueeze(1)}, 1);
        }
        tokens = torch::cat({tokens, step.unsqueeze(1)}, 1);
    }
    if (was_training) train();

    std::vector<FactorizedTokenGrid> out(static_cast<std::size_t>(n));
    const auto acc = tokens.accessor<std::int64_t, 3>();
    for (std::int64_t s = 0; s < n; ++s) {
        auto& grid = out[static_cast<std::size_t>(s)];
        grid.grid_h = vocab_.grid_h;
        grid.grid_w = vocab_.grid_w;
        grid.k = k;
        grid.class_label = classes[static_cast<std::size_t>(s)];
        grid.tokens.resize(static_cast<std::size_t>(l * k));
        for (std::int64_t p = 0; p < l; ++p) {
            for (int i = 0; i < k; ++i) grid.at(static_cast<int>(p), i) = static_cast<std::uint32_t>(acc[s][p][i]);
        }
    }
    return out;
}

std::vector<torch::Tensor> FarModelImpl::head_parameters() {
    std::vector<torch::Tensor> out;
    for (const auto& item : named_parameters()) {
        if (item.key().rfind("head", 0) == 0 || item.key().rfind("output", 0) == 0) out.push_back(item.value());
    }
    return out;
}

torch::Tensor grids_to_tokens(const std::vector<FactorizedTokenGrid>& grids) {
    if (grids.empty()) throw std::invalid_argument("grids_to_tokens: no grids");
    const auto& first = grids.front();
    const auto l = first.num_patches();
    auto out = torch::empty({static_cast<std::int64_t>(grids.size()), l, first.k}, torch::kLong);
    auto acc = out.accessor<std::int64_t, 3>();
    for (std::size_t n = 0; n < grids.size(); ++n) {
        const auto& g = grids[n];
        if (g.k != first.k || g.grid_h != first.grid_h || g.grid_w != first.grid_w) {
            throw std::invalid_argument("grids_to_tokens: inconsistent grid shapes");
        }
        for (int p = 0; p < l; ++p) {
            for (int i = 0; i < g.k; ++i) acc[static_cast<std::int64_t>(n)][p][i] = g.at(p, i);
        }
    }
    return out;
}

torch::Tensor grids_to_labels(const std::vector<FactorizedTokenGrid>& grids, int null_class) {
    std::vector<std::int64_t> labels;
    labels.reserve(grids.size());
    for (const auto& g : grids) labels.push_back(g.class_label.value_or(null_class));
    return torch::tensor(labels, torch::kLong);
}

}  // namespace fqgan
