#include "fqgan/losses.hpp"

#include <cmath>
#include <cstdio>

namespace fqgan {

LossWeights LossWeights::from(const TokenizerConfig& cfg) {
    LossWeights w;
    w.lambda_disentangle = cfg.lambda_disentangle;
    w.lambda_rep = cfg.lambda_rep;
    w.perceptual_weight = cfg.perceptual_weight;
    w.gan_weight = cfg.gan_weight;
    w.commitment_beta = cfg.commitment_beta;
    w.validate();
    return w;
}

void LossWeights::validate() const {
    if (lambda_disentangle < 0 || lambda_rep < 0 || perceptual_weight < 0 || gan_weight < 0 || commitment_beta < 0) {
        throw LossError("loss weights must be non-negative");
    }
}

LossReport total_loss(const LossParts& parts, const LossWeights& weights, std::int64_t step) {
    weights.validate();
    const std::pair<const char*, double> named[] = {
        {"rec", parts.rec},
        {"vq", parts.vq},
        {"perceptual", parts.perceptual},
        {"gan_generator", parts.gan_generator},
        {"gan_discriminator", parts.gan_discriminator},
        {"disentangle", parts.disentangle},
        {"rep", parts.rep},
    };
    for (const auto& [name, value] : named) {
        if (!std::isfinite(value)) throw LossError(std::string("non-finite loss term: ") + name);
    }
    LossReport r;
    r.step = step;
    r.rec = parts.rec;
    r.vq = parts.vq;
    r.perceptual = parts.perceptual;
    r.gan_generator = parts.gan_generator;
    r.gan_discriminator = parts.gan_discriminator;
    r.disentangle = parts.disentangle;
    r.rep = parts.rep;
    r.total = r.rec + r.vq + weights.perceptual_weight * r.perceptual + weights.gan_weight * r.gan_generator +
              weights.lambda_disentangle * r.disentangle + weights.lambda_rep * r.rep;
    return r;
}

std::string loss_csv_header() { return "step,rec,vq,perceptual,gan_g,gan_d,disentangle,rep,total"; }

std::string loss_csv_row(const LossReport& r) {
    char buf[512];
    std::snprintf(buf, sizeof buf, "%lld,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g", static_cast<long long>(r.step),
                  r.rec, r.vq, r.perceptual, r.gan_generator, r.gan_discriminator, r.disentangle, r.rep, r.total);
    return buf;
}

torch::Tensor rec_loss(const torch::Tensor& x, const torch::Tensor& x_hat) {
    if (x.sizes() != x_hat.sizes()) throw LossError("rec_loss: shape mismatch");
    return (x - x_hat).pow(2).mean();
}

PerceptualProxyImpl::PerceptualProxyImpl(std::uint64_t seed) {
    net_ = register_module("net", FrozenConvNet(seed, std::vector<int>{16, 32, 32}));
}

torch::Tensor PerceptualProxyImpl::forward(const torch::Tensor& x, const torch::Tensor& x_hat) {
    if (x.sizes() != x_hat.sizes()) throw LossError("perceptual_loss: shape mismatch");
    const auto fx = net_->features(x);
    const auto fy = net_->features(x_hat);
    auto total = torch::zeros({}, x.options());
    for (std::size_t l = 0; l < fx.size(); ++l) total = total + (fx[l].detach() - fy[l]).pow(2).mean();
    return total;
}

torch::Tensor hinge_discriminator_loss(const torch::Tensor& real_logits, const torch::Tensor& fake_logits) {
    return torch::relu(1.0 - real_logits).mean() + torch::relu(1.0 + fake_logits).mean();
}

torch::Tensor hinge_generator_loss(const torch::Tensor& fake_logits) { return -fake_logits.mean(); }

GanLosses gan_losses(const torch::Tensor& real_logits, const torch::Tensor& fake_logits) {
    if (real_logits.sizes() != fake_logits.sizes()) throw LossError("gan_losses: logit maps differ in shape");
    return {hinge_generator_loss(fake_logits), hinge_discriminator_loss(real_logits, fake_logits)};
}

torch::Tensor rep_loss(const torch::Tensor& predicted, const torch::Tensor& teacher, std::int64_t dim) {
    if (predicted.sizes() != teacher.sizes()) throw LossError("rep_loss: grid mismatch between prediction and teacher");
    const auto teacher_norm = teacher.norm(2, dim, true);
    if ((teacher_norm < 1e-12).any().item<bool>()) throw LossError("rep_loss: zero-norm teacher vector");
    const auto pred_norm = predicted.norm(2, dim, true).clamp_min(1e-12);
    const auto cosine = (predicted * teacher).sum(dim, true) / (pred_norm * teacher_norm);
    return 1.0 - cosine.mean();
}

}  // namespace fqgan
